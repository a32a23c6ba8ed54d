// encodenet <command> --config <path> [--set key=value]... [--run-dir <path>] [--seed N] [--force]

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "encodenet/pipeline.hpp"
#include "encodenet/report.hpp"

namespace {

using namespace encodenet;

constexpr const char* kRunDirEnv = "ENCODENET_RUN_DIR";

int exit_code_for(const Error& e) {
  const std::string kind = e.kind();
  if (kind == "prerequisite") return 3;
  if (kind == "config" || kind == "parse") return 4;
  return 1;
}

void report_error(const std::string& command, const std::string& kind, const std::string& message) {
  std::cerr << nlohmann::json{{"error", kind}, {"command", command}, {"message", message}}.dump() << std::endl;
}

struct Options {
  std::string config;
  std::vector<std::string> overrides;
  std::string run_dir;
  std::optional<std::uint64_t> seed;
  bool force = false;
};

void print_record(const std::string& what, const StageInfo& info, const RunRecord& rec) {
  std::cout << what << (info.reused ? " (reused)" : "") << ": " << rec.eval_metric_name << " = " << rec.final_metric
            << "  [" << info.dir.string() << "]\n";
}

int run(const std::string& command, const Options& opt) {
  const PipelineConfig cfg = PipelineConfig::load(opt.config, opt.overrides);
  std::string run_dir = opt.run_dir;
  if (run_dir.empty()) {
    const char* env = std::getenv(kRunDirEnv);
    run_dir = env && *env ? env : "runs/default";
  }
  const bool auto_upstream = command == "ablate";
  Pipeline p(cfg, run_dir, opt.force, auto_upstream, [](const std::string& s) { std::cout << s << std::endl; });
  const std::uint64_t seed = opt.seed.value_or(cfg.seeds.front());
  const TargetMode mode = cfg.target_mode;

  if (command == "train-baseline") {
    const auto o = p.baseline(seed);
    print_record("baseline", o.info, o.record);
  } else if (command == "cluster") {
    const auto o = p.cluster(seed, mode);
    std::cout << "clusters per class:";
    for (const int k : o.k_per_class) std::cout << ' ' << k;
    std::cout << (o.info.reused ? " (reused)" : "") << "  [" << o.info.dir.string() << "]\n";
  } else if (command == "rank") {
    const auto o = p.rank(seed, mode);
    std::cout << o.representatives.cells.size() << " representatives, " << o.pairs.size() << " pairs, audit "
              << (o.audit.ok() ? "ok" : "FAILED") << (o.info.reused ? " (reused)" : "") << "  [" << o.info.dir.string()
              << "]\n";
  } else if (command == "train-cae") {
    const auto o = p.cae(seed, mode);
    print_record("cae", o.info, o.record);
  } else if (command == "assemble") {
    const auto o = p.assemble(seed, mode);
    std::cout << "assembled " << o.encodenet_parameters << " parameters (baseline " << o.baseline_parameters << ")"
              << (o.info.reused ? " (reused)" : "") << "  [" << o.info.dir.string() << "]\n";
  } else if (command == "train-head") {
    const auto o = p.head(seed, mode);
    print_record("head", o.info, o.record);
  } else if (command == "ablate") {
    const std::vector<std::uint64_t> seeds = opt.seed ? std::vector<std::uint64_t>{*opt.seed} : cfg.seeds;
    const auto r = p.ablate(seeds);
    write_ablation(p.run_dir(), r);
    for (const auto& row : r.rows) {
      std::cout << row.name << ": median accuracy " << (row.median ? std::to_string(*row.median) : "n/a") << "\n";
    }
    std::cout << "ablation table: " << (p.run_dir() / "ablation" / "ablation.md").string() << "\n";
  } else if (command == "report") {
    const auto s = render_report(p);
    std::cout << "wrote " << s.files.size() << " files under " << (p.run_dir() / "report").string() << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"EncodeNet experiment workbench"};
  app.require_subcommand(1, 1);
  Options opt;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"train-baseline", "train the baseline classifier"},
      {"cluster", "k-means clusters within each class of the training set"},
      {"rank", "entropy scores, representatives and conversion pairs"},
      {"train-cae", "train the converting autoencoder"},
      {"assemble", "frozen CAE encoder + classifier head"},
      {"train-head", "train the head with the encoder frozen"},
      {"ablate", "all stages for every target mode and seed"},
      {"report", "tables, plots and conversion grids for a run directory"}};
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", opt.config, "pipeline config file")->required();
    sub->add_option("--set", opt.overrides, "override a config key (key=value)");
    sub->add_option("--run-dir", opt.run_dir, std::string("run directory (default $") + kRunDirEnv + " or runs/default)");
    sub->add_option("--seed", opt.seed, "run a single seed");
    sub->add_flag("--force", opt.force, "recompute stages even when their outputs exist");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report_error(app.get_subcommands().empty() ? "" : app.get_subcommands().front()->get_name(), "usage", e.what());
    return 2;
  }
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    return run(command, opt);
  } catch (const Error& e) {
    report_error(command, e.kind(), e.what());
    return exit_code_for(e);
  } catch (const std::exception& e) {
    report_error(command, "internal", e.what());
    return 1;
  }
}
