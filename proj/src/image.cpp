#include "pcfg/image.hpp"

#include <cstdio>
#include <fstream>
#include <iterator>
#include <limits>

namespace pcfg {

std::string hex(Address a) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "0x%llx", static_cast<unsigned long long>(a));
  return buf;
}

const char* to_string(InstrKind k) {
  switch (k) {
    case InstrKind::Nop: return "Nop";
    case InstrKind::Alu: return "Alu";
    case InstrKind::JmpDirect: return "JmpDirect";
    case InstrKind::JccDirect: return "JccDirect";
    case InstrKind::Call: return "Call";
    case InstrKind::Ret: return "Ret";
    case InstrKind::IJmpTable: return "IJmpTable";
    case InstrKind::IJmpOpaque: return "IJmpOpaque";
    case InstrKind::Halt: return "Halt";
    case InstrKind::FrameTeardown: return "FrameTeardown";
    case InstrKind::BoundHint: return "BoundHint";
  }
  return "?";
}

std::string pretty_name(const std::string& mangled) {
  auto pos = mangled.rfind('$');
  if (pos == std::string::npos) return mangled;
  return mangled.substr(0, pos);
}

std::string typed_name(const std::string& pretty, SymbolKind kind) {
  return kind == SymbolKind::Func ? pretty + "()" : pretty;
}

SymbolEntry SymbolEntry::make(Address offset, std::string mangled,
                              SymbolKind kind, bool noreturn) {
  SymbolEntry s;
  s.offset = offset;
  s.pretty = pretty_name(mangled);
  s.typed = typed_name(s.pretty, kind);
  s.mangled = std::move(mangled);
  s.kind = kind;
  s.known_noreturn = noreturn;
  return s;
}

namespace {

void check_layout(Address text_base, std::size_t text_len, Address data_base,
                  std::size_t data_len, const std::vector<SymbolEntry>& syms) {
  constexpr auto kMax = std::numeric_limits<Address>::max();
  if (text_len > kMax - text_base) throw MalformedImage("text range overflows");
  if (data_len > kMax - data_base) throw MalformedImage("data range overflows");
  if (text_len != 0 && data_len != 0) {
    Address te = text_base + text_len;
    Address de = data_base + data_len;
    if (text_base < de && data_base < te)
      throw MalformedImage("text and data sections overlap");
  }
  for (const auto& s : syms) {
    if (s.mangled.empty()) throw MalformedImage("symbol with empty name");
    if (s.kind == SymbolKind::Func &&
        (s.offset < text_base || s.offset >= text_base + text_len))
      throw MalformedImage("function symbol " + s.mangled + " at " +
                           hex(s.offset) + " outside text");
  }
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}

  template <typename T>
  T uint(const char* what) {
    if (bytes_.size() - pos_ < sizeof(T))
      throw MalformedImage(std::string("truncated ") + what);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      v |= static_cast<T>(bytes_[pos_ + i]) << (8 * i);
    pos_ += sizeof(T);
    return v;
  }

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n)
      throw MalformedImage(std::string("truncated ") + what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i)
    out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

constexpr std::uint16_t kVersion = 1;

}  // namespace

Image::Image(Address text_base, std::vector<std::uint8_t> text,
             Address data_base, std::vector<std::uint8_t> data,
             std::vector<SymbolEntry> symbols)
    : text_base_(text_base),
      text_(std::move(text)),
      data_base_(data_base),
      data_(std::move(data)),
      symbols_(std::move(symbols)) {
  check_layout(text_base_, text_.size(), data_base_, data_.size(), symbols_);
}

std::optional<std::uint32_t> Image::read_data_u32(Address addr) const {
  if (addr < data_base_ || addr >= data_end() || data_end() - addr < 4)
    return std::nullopt;
  auto off = addr - data_base_;
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(data_[off + i]) << (8 * i);
  return v;
}

Image load_image(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  auto magic = r.take(4, "magic");
  if (!(magic[0] == 'P' && magic[1] == 'C' && magic[2] == 'F' &&
        magic[3] == 'G'))
    throw MalformedImage("bad magic");
  if (auto v = r.uint<std::uint16_t>("version"); v != kVersion)
    throw MalformedImage("unsupported version " + std::to_string(v));

  auto text_base = r.uint<std::uint64_t>("text base");
  auto text_len = r.uint<std::uint32_t>("text length");
  auto text = r.take(text_len, "text section");
  auto data_base = r.uint<std::uint64_t>("data base");
  auto data_len = r.uint<std::uint32_t>("data length");
  auto data = r.take(data_len, "data section");

  auto count = r.uint<std::uint32_t>("symbol count");
  std::vector<SymbolEntry> syms;
  syms.reserve(std::min<std::uint32_t>(count, 1u << 20));
  for (std::uint32_t i = 0; i < count; ++i) {
    auto offset = r.uint<std::uint64_t>("symbol offset");
    auto kind = r.uint<std::uint8_t>("symbol kind");
    auto noreturn = r.uint<std::uint8_t>("symbol noreturn flag");
    auto name_len = r.uint<std::uint16_t>("symbol name length");
    auto name = r.take(name_len, "symbol name");
    if (kind > 1) throw MalformedImage("bad symbol kind");
    if (noreturn > 1) throw MalformedImage("bad noreturn flag");
    syms.push_back(SymbolEntry::make(offset, std::string(name.begin(), name.end()),
                                     static_cast<SymbolKind>(kind),
                                     noreturn != 0));
  }
  if (!r.done()) throw MalformedImage("trailing bytes after symbol table");

  return Image(text_base, {text.begin(), text.end()}, data_base,
               {data.begin(), data.end()}, std::move(syms));
}

std::vector<std::uint8_t> serialize_image(const Image& image) {
  std::vector<std::uint8_t> out{'P', 'C', 'F', 'G'};
  put<std::uint16_t>(out, kVersion);
  put<std::uint64_t>(out, image.text_base());
  put<std::uint32_t>(out, static_cast<std::uint32_t>(image.text().size()));
  out.insert(out.end(), image.text().begin(), image.text().end());
  put<std::uint64_t>(out, image.data_base());
  put<std::uint32_t>(out, static_cast<std::uint32_t>(image.data().size()));
  out.insert(out.end(), image.data().begin(), image.data().end());
  put<std::uint32_t>(out, static_cast<std::uint32_t>(image.symbols().size()));
  for (const auto& s : image.symbols()) {
    put<std::uint64_t>(out, s.offset);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(s.kind));
    put<std::uint8_t>(out, s.known_noreturn ? 1 : 0);
    put<std::uint16_t>(out, static_cast<std::uint16_t>(s.mangled.size()));
    out.insert(out.end(), s.mangled.begin(), s.mangled.end());
  }
  return out;
}

Image read_image_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path.string());
  return load_image(bytes);
}

void write_image_file(const Image& image, const std::filesystem::path& path) {
  auto bytes = serialize_image(image);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot create " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

Instruction decode(const Image& image, Address addr) {
  if (!image.in_text(addr)) throw OutOfRange(addr);
  auto text = image.text();
  auto off = addr - image.text_base();
  auto avail = text.size() - off;
  auto op = text[off];
  if (op > static_cast<std::uint8_t>(InstrKind::BoundHint))
    return Instruction::make(InstrKind::Nop, addr);
  auto kind = static_cast<InstrKind>(op);
  auto len = instruction_length(kind);
  if (len > avail) return Instruction::make(InstrKind::Nop, addr);

  auto le = [&](std::size_t at, std::size_t n) {
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < n; ++i)
      v |= static_cast<std::uint64_t>(text[off + at + i]) << (8 * i);
    return v;
  };
  auto insn = Instruction::make(kind, addr);
  switch (kind) {
    case InstrKind::JmpDirect:
    case InstrKind::JccDirect:
    case InstrKind::Call:
      insn.target = le(1, 4);
      break;
    case InstrKind::IJmpTable:
      insn.table_base = le(1, 4);
      insn.imm = static_cast<std::uint16_t>(le(5, 2));
      break;
    case InstrKind::Alu:
    case InstrKind::BoundHint:
      insn.imm = static_cast<std::uint16_t>(le(1, 2));
      break;
    default:
      break;
  }
  return insn;
}

void encode(const Instruction& insn, std::vector<std::uint8_t>& out) {
  out.push_back(static_cast<std::uint8_t>(insn.kind));
  switch (insn.kind) {
    case InstrKind::JmpDirect:
    case InstrKind::JccDirect:
    case InstrKind::Call:
      put<std::uint32_t>(out, static_cast<std::uint32_t>(insn.target));
      break;
    case InstrKind::IJmpTable:
      put<std::uint32_t>(out, static_cast<std::uint32_t>(insn.table_base));
      put<std::uint16_t>(out, insn.imm);
      break;
    case InstrKind::Alu:
    case InstrKind::BoundHint:
      put<std::uint16_t>(out, insn.imm);
      break;
    default:
      break;
  }
}

bool contains_cfi(const Image& image, Address lo, Address hi) {
  if (lo > hi) throw OutOfRange(lo);
  if (lo == hi) return false;
  if (!image.in_text(lo)) throw OutOfRange(lo);
  if (hi > image.text_end()) throw OutOfRange(hi);
  for (Address a = lo; a < hi;) {
    auto insn = decode(image, a);
    if (insn.end() > hi) return false;
    if (is_control_flow(insn.kind)) return true;
    a = insn.end();
  }
  return false;
}

std::optional<std::uint16_t> last_bound_hint(const Image& image, Address lo,
                                             Address hi) {
  std::optional<std::uint16_t> found;
  for (Address a = lo; a < hi && image.in_text(a);) {
    auto insn = decode(image, a);
    if (insn.kind == InstrKind::BoundHint) found = insn.imm;
    a = insn.end();
  }
  return found;
}

bool contains_teardown(const Image& image, Address lo, Address hi) {
  for (Address a = lo; a < hi && image.in_text(a);) {
    auto insn = decode(image, a);
    if (insn.kind == InstrKind::FrameTeardown) return true;
    a = insn.end();
  }
  return false;
}

}  // namespace pcfg
