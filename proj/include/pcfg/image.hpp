#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pcfg/error.hpp"

namespace pcfg {

enum class InstrKind : std::uint8_t {
  Nop = 0x00,
  Alu = 0x01,
  JmpDirect = 0x02,
  JccDirect = 0x03,
  Call = 0x04,
  Ret = 0x05,
  IJmpTable = 0x06,
  IJmpOpaque = 0x07,
  Halt = 0x08,
  FrameTeardown = 0x09,
  BoundHint = 0x0A,
};

const char* to_string(InstrKind k);

constexpr bool is_control_flow(InstrKind k) {
  switch (k) {
    case InstrKind::JmpDirect:
    case InstrKind::JccDirect:
    case InstrKind::Call:
    case InstrKind::Ret:
    case InstrKind::IJmpTable:
    case InstrKind::IJmpOpaque:
    case InstrKind::Halt:
      return true;
    default:
      return false;
  }
}

constexpr std::uint8_t instruction_length(InstrKind k) {
  switch (k) {
    case InstrKind::Alu:
    case InstrKind::BoundHint:
      return 3;
    case InstrKind::JmpDirect:
    case InstrKind::JccDirect:
    case InstrKind::Call:
      return 5;
    case InstrKind::IJmpTable:
      return 7;
    default:
      return 1;
  }
}

/// A decoded instruction. Operand fields not used by `kind` are zero.
struct Instruction {
  Address addr = 0;
  std::uint8_t length = 1;
  InstrKind kind = InstrKind::Nop;
  Address target = 0;      // JmpDirect, JccDirect, Call
  Address table_base = 0;  // IJmpTable
  std::uint16_t imm = 0;   // BoundHint value, IJmpTable bound hint, Alu operand

  Address end() const { return addr + length; }
  bool operator==(const Instruction&) const = default;

  static Instruction make(InstrKind k, Address addr = 0) {
    return Instruction{addr, instruction_length(k), k, 0, 0, 0};
  }
  static Instruction branch(InstrKind k, Address target, Address addr = 0) {
    auto i = make(k, addr);
    i.target = target;
    return i;
  }
  static Instruction bound_hint(std::uint16_t imm, Address addr = 0) {
    auto i = make(InstrKind::BoundHint, addr);
    i.imm = imm;
    return i;
  }
  static Instruction ijmp_table(Address base, std::uint16_t bound,
                                Address addr = 0) {
    auto i = make(InstrKind::IJmpTable, addr);
    i.table_base = base;
    i.imm = bound;
    return i;
  }
};

enum class SymbolKind : std::uint8_t { Func = 0, Object = 1 };

struct SymbolEntry {
  Address offset = 0;
  std::string mangled;
  std::string pretty;
  std::string typed;
  SymbolKind kind = SymbolKind::Func;
  bool known_noreturn = false;

  bool operator==(const SymbolEntry&) const = default;

  /// Builds an entry with pretty/typed names derived from `mangled`.
  static SymbolEntry make(Address offset, std::string mangled,
                          SymbolKind kind = SymbolKind::Func,
                          bool noreturn = false);
};

/// `mangled` with a trailing "$suffix" removed.
std::string pretty_name(const std::string& mangled);
std::string typed_name(const std::string& pretty, SymbolKind kind);

/// Immutable loaded binary: one text section, one data section, symbols.
class Image {
 public:
  Image() = default;
  Image(Address text_base, std::vector<std::uint8_t> text, Address data_base,
        std::vector<std::uint8_t> data, std::vector<SymbolEntry> symbols);

  Address text_base() const { return text_base_; }
  Address text_end() const { return text_base_ + text_.size(); }
  Address data_base() const { return data_base_; }
  Address data_end() const { return data_base_ + data_.size(); }
  std::span<const std::uint8_t> text() const { return text_; }
  std::span<const std::uint8_t> data() const { return data_; }
  const std::vector<SymbolEntry>& symbols() const { return symbols_; }

  bool in_text(Address a) const { return a >= text_base_ && a < text_end(); }

  /// Little-endian u32 at `addr` in data, if all four bytes are present.
  std::optional<std::uint32_t> read_data_u32(Address addr) const;

  bool operator==(const Image&) const = default;

 private:
  Address text_base_ = 0;
  std::vector<std::uint8_t> text_;
  Address data_base_ = 0;
  std::vector<std::uint8_t> data_;
  std::vector<SymbolEntry> symbols_;
};

/// Parses and validates the "PCFG" container.
Image load_image(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> serialize_image(const Image& image);

Image read_image_file(const std::filesystem::path& path);
void write_image_file(const Image& image, const std::filesystem::path& path);

/// Decodes the instruction at `addr`. Total over text: unknown opcodes and
/// multi-byte instructions truncated by the end of text decode as a 1-byte Nop.
Instruction decode(const Image& image, Address addr);

/// Appends the encoding of `insn` (ignoring insn.addr) to `out`.
void encode(const Instruction& insn, std::vector<std::uint8_t>& out);

/// True iff decoding forward from `lo`, some control-flow instruction starts
/// and ends within [lo, hi].
bool contains_cfi(const Image& image, Address lo, Address hi);

/// Imm of the last BoundHint decoded in [lo, hi), if any.
std::optional<std::uint16_t> last_bound_hint(const Image& image, Address lo,
                                             Address hi);

/// True if a FrameTeardown starts in [lo, hi).
bool contains_teardown(const Image& image, Address lo, Address hi);

}  // namespace pcfg
