// pcfg: analyze, verify, bench and generate PCFG images.

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "pcfg/export.hpp"
#include "pcfg/parallel.hpp"
#include "pcfg/workload.hpp"

using namespace pcfg;

namespace {

unsigned default_threads() {
  return std::clamp(std::thread::hardware_concurrency(), 1u, 64u);
}

void print_times(const StageTimes& t) {
  std::cerr << std::fixed << std::setprecision(3) << "time init "
            << t.init_ms << " ms\ntime traversal " << t.traversal_ms
            << " ms\ntime finalization " << t.finalization_ms << " ms\n";
}

int cmd_analyze(const std::string& image_path, unsigned threads,
                const std::string& format, const std::string& out_path) {
  Image image;
  try {
    image = read_image_file(image_path);
  } catch (const MalformedImage& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  auto r = construct_full(image, {.workers = threads});
  std::string text = format == "dot"    ? to_dot(r.graph)
                     : format == "json" ? to_json(r.graph, r.tables)
                                        : canonical_serialize(r.graph);

  std::size_t noreturn = 0;
  for (const auto& [a, f] : r.graph.entries())
    noreturn += f.status == ReturnStatus::NoReturn;
  std::ostringstream summary;
  summary << "functions " << r.graph.entries().size() << "\nblocks "
          << r.graph.blocks().size() << "\nedges " << r.graph.edges().size()
          << "\nnoreturn " << noreturn << "\ntables_trimmed "
          << r.finalize_stats.tables_trimmed << "\n";

  if (out_path.empty()) {
    std::cout << text;
    std::cerr << summary.str();
  } else {
    std::ofstream out(out_path, std::ios::binary);
    out << text;
    if (!out) {
      std::cerr << "error: cannot write " << out_path << "\n";
      return 2;
    }
    std::cout << summary.str();
  }
  print_times(r.times);
  return 0;
}

int cmd_verify(const std::string& image_path, const std::string& truth_path,
               unsigned threads) {
  Image image;
  GroundTruth truth;
  try {
    image = read_image_file(image_path);
    truth = read_truth_file(truth_path);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  auto r = construct_full(image, {.workers = threads});
  auto reports = compare(truth, observe(r.graph, r.tables));
  int shown = 0;
  bool all = true;
  for (const auto& rep : reports) {
    std::cout << (rep.ok() ? "PASS " : "FAIL ") << rep.facet;
    if (!rep.ok()) std::cout << " (" << rep.diffs.size() << " diffs)";
    std::cout << "\n";
    all = all && rep.ok();
  }
  for (const auto& rep : reports)
    for (const auto& d : rep.diffs)
      if (shown++ < 10) std::cout << "  " << rep.facet << ": " << d << "\n";
  print_times(r.times);
  return all ? 0 : 1;
}

int cmd_bench(const std::string& image_path, const std::string& list,
              unsigned repeat, bool inject_divergence) {
  Image image;
  try {
    image = read_image_file(image_path);
  } catch (const MalformedImage& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  std::vector<unsigned> levels;
  std::stringstream ss(list);
  for (std::string tok; std::getline(ss, tok, ',');) {
    try {
      levels.push_back(static_cast<unsigned>(std::stoul(tok)));
    } catch (const std::exception&) {
      std::cerr << "error: bad thread count '" << tok << "'\n";
      return 2;
    }
    if (levels.back() == 0) {
      std::cerr << "error: thread count must be >= 1\n";
      return 2;
    }
  }

  std::set<std::string> outputs;
  struct Row {
    unsigned threads;
    double mean, min;
  };
  std::vector<Row> rows;
  for (unsigned t : levels) {
    double sum = 0, best = 0;
    for (unsigned i = 0; i < repeat; ++i) {
      auto t0 = std::chrono::steady_clock::now();
      auto g = construct(image, t);
      double ms = std::chrono::duration<double, std::milli>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
      auto canon = canonical_serialize(g);
      if (inject_divergence && rows.size() + 1 == levels.size() &&
          i + 1 == repeat)
        canon += "#";
      outputs.insert(std::move(canon));
      sum += ms;
      best = i == 0 ? ms : std::min(best, ms);
    }
    rows.push_back({t, sum / repeat, best});
  }

  // Speedup is relative to the 1-thread row, or the first row without one.
  double base = rows.front().mean;
  for (const auto& r : rows)
    if (r.threads == 1) base = r.mean;
  std::cout << std::fixed << std::setprecision(3);
  std::cout << "threads   mean_ms    min_ms  speedup\n";
  for (const auto& r : rows)
    std::cout << std::setw(7) << r.threads << std::setw(10) << r.mean
              << std::setw(10) << r.min << std::setw(9) << base / r.mean
              << "\n";
  for (const auto& r : rows)
    std::cout << "row threads=" << r.threads << " mean_ms=" << r.mean
              << " min_ms=" << r.min << " speedup=" << base / r.mean << "\n";
  if (outputs.size() != 1) {
    std::cout << "DIVERGENT: " << outputs.size() << " distinct outputs\n";
    return 1;
  }
  std::cout << "outputs identical\n";
  return 0;
}

int cmd_gen(const std::string& family, std::uint64_t seed,
            const std::string& out_dir, const std::vector<std::string>& extra) {
  ScenarioSpec spec;
  try {
    spec.family = parse_family(family);
    spec.seed = seed;
    for (const auto& arg : extra) {
      auto eq = arg.find('=');
      if (arg.rfind("--", 0) != 0 || eq == std::string::npos)
        throw SpecOutOfBounds("expected --key=value, got " + arg);
      auto key = arg.substr(2, eq - 2);
      std::size_t used = 0;
      auto val = arg.substr(eq + 1);
      std::uint64_t v = 0;
      try {
        v = std::stoull(val, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != val.size())
        throw SpecOutOfBounds("bad value for " + key + ": " + val);
      spec.params[key] = v;
    }
    auto sc = generate(spec);
    std::filesystem::path dir =
        out_dir.empty() ? family + "-" + std::to_string(seed) : out_dir;
    emit(sc.image, sc.truth, dir);
    std::cout << (dir / "image.pcfg").string() << "\n"
              << (dir / "truth.json").string() << "\n";
  } catch (const SpecOutOfBounds& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Parallel CFG construction over PCFG images"};
  app.require_subcommand(1);

  std::string image_path, format = "canon", out_path, truth_path;
  unsigned threads = default_threads();

  auto* analyze = app.add_subcommand("analyze", "build and print the CFG");
  analyze->add_option("image", image_path)->required();
  analyze->add_option("--threads", threads)->check(CLI::Range(1u, 1024u));
  analyze->add_option("--format", format)
      ->check(CLI::IsMember({"dot", "json", "canon"}));
  analyze->add_option("--out", out_path);

  auto* verify = app.add_subcommand("verify", "check against ground truth");
  verify->add_option("image", image_path)->required();
  verify->add_option("--truth", truth_path)->required();
  verify->add_option("--threads", threads)->check(CLI::Range(1u, 1024u));

  std::string thread_list;
  unsigned repeat = 3;
  bool inject = false;
  auto* bench = app.add_subcommand("bench", "time construction per thread count");
  bench->add_option("image", image_path)->required();
  bench->add_option("--threads", thread_list)->required();
  bench->add_option("--repeat", repeat)->check(CLI::Range(1u, 1000000u));
  bench->add_flag("--inject-divergence", inject)->group("");

  std::string family, gen_out;
  std::uint64_t seed = 0;
  auto* gen = app.add_subcommand("gen", "generate an image and its truth");
  gen->add_option("family", family)->required();
  gen->add_option("--seed", seed);
  gen->add_option("--out", gen_out);
  gen->allow_extras();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? 0 : 2;
  }

  if (*analyze) return cmd_analyze(image_path, threads, format, out_path);
  if (*verify) return cmd_verify(image_path, truth_path, threads);
  if (*bench) return cmd_bench(image_path, thread_list, repeat, inject);
  return cmd_gen(family, seed, gen_out, gen->remaining());
}
