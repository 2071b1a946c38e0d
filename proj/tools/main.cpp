// Command line front end: run / evaluate / ablate / check.

#include <cstdint>
#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "metalearn/checks.hpp"
#include "metalearn/errors.hpp"
#include "metalearn/experiment.hpp"

namespace {

using namespace metalearn;

struct CommonOpts {
  std::string config_path;
  std::int64_t seed = -1;
  std::string out;
  std::string precision;
  int workers = 0;
  bool dry_run = false;
};

void add_common(CLI::App* cmd, CommonOpts& o, bool config_required) {
  auto* cfg = cmd->add_option("--config", o.config_path, "Config file (JSON)");
  if (config_required) cfg->required();
  cmd->add_option("--seed", o.seed, "Override the config's seed list");
  cmd->add_option("--out", o.out, "Override the output directory");
  cmd->add_option("--precision", o.precision, "Arithmetic width")
      ->check(CLI::IsMember({"single", "double"}));
  cmd->add_option("--workers", o.workers, "Episode worker threads")
      ->check(CLI::PositiveNumber);
  cmd->add_flag("--dry-run", o.dry_run, "Print the resolved config and exit");
}

ExperimentConfig load_with_overrides(const CommonOpts& o) {
  ExperimentConfig cfg = load_experiment_config(o.config_path);
  if (o.seed >= 0) cfg.seeds = {static_cast<std::uint64_t>(o.seed)};
  if (!o.out.empty()) cfg.out_dir = o.out;
  if (!o.precision.empty()) {
    cfg.precision =
        o.precision == "single" ? Precision::Single : Precision::Double;
  }
  if (o.workers > 0) cfg.meta.workers = o.workers;
  cfg.validate();
  return cfg;
}

void print_summary(std::ostream& os, const char* label, const Summary& s) {
  os << label << " " << s.mean << " +/- " << s.half_width << " (n=" << s.n
     << ")";
}

void print_report(std::ostream& os, const EvalReport& report) {
  for (const SeedReport& sr : report.per_seed) {
    os << "  seed " << sr.seed << ": ";
    if (report.classification) {
      print_summary(os, "accuracy", sr.accuracy);
      os << ", ";
    }
    print_summary(os, "loss", sr.loss);
    if (sr.dropped > 0) os << ", dropped " << sr.dropped;
    os << "\n";
  }
  os << "  pooled: ";
  if (report.classification) {
    print_summary(os, "accuracy", report.pooled_accuracy);
    os << ", ";
  }
  print_summary(os, "loss", report.pooled_loss);
  os << "\n";
}

int cmd_run(const CommonOpts& o) {
  ExperimentConfig cfg = load_with_overrides(o);
  if (o.dry_run) {
    std::cout << resolved_config_text(cfg) << "\n";
    return 0;
  }
  const EvalReport report = run_experiment(cfg);
  std::cout << "test evaluation (" << report.task_count << " tasks):\n";
  print_report(std::cout, report);
  std::cout << "artifacts in " << cfg.out_dir << "\n";
  return 0;
}

struct EvalOpts {
  std::string checkpoint;
  std::string split = "test";
  int episodes = 600;
  std::int64_t seed = 0;
};

int cmd_evaluate(const CommonOpts& o, const EvalOpts& e) {
  ExperimentConfig cfg = load_with_overrides(o);
  if (o.dry_run) {
    std::cout << resolved_config_text(cfg) << "\n";
    return 0;
  }
  const std::map<std::string, Split> splits = {{"train", Split::Train},
                                               {"val", Split::Val},
                                               {"test", Split::Test}};
  const Split split = splits.at(e.split);
  const EvalReport report =
      evaluate_checkpoint(e.checkpoint, cfg, split, e.episodes,
                          static_cast<std::uint64_t>(e.seed), o.out);
  std::cout << e.split << " evaluation (" << report.task_count
            << " tasks):\n";
  print_report(std::cout, report);
  return 0;
}

int cmd_ablate(const CommonOpts& o) {
  ExperimentConfig cfg = load_with_overrides(o);
  if (o.dry_run) {
    std::cout << resolved_config_text(cfg) << "\n";
    for (const AblationRow& row : ablation_rows()) {
      std::cout << "row " << row.index << ": " << row.name;
      if (row.shared_with >= 0) {
        std::cout << " (shares artifacts with row " << row.shared_with << ")";
      }
      std::cout << "\n";
    }
    return 0;
  }
  const std::vector<AblationRow> rows = run_ablation(cfg);
  std::cout << format_ablation_table(rows);
  for (const AblationRow& row : rows) {
    if (row.failed) {
      std::cerr << "row " << row.index << " (" << row.name
                << ") failed: " << row.error << "\n";
    }
  }
  return 0;
}

int cmd_check() {
  const std::vector<CheckResult> results = run_acceptance_checks(std::cout);
  int failed = 0;
  for (const CheckResult& r : results) {
    if (!r.passed) ++failed;
  }
  std::cout << (results.size() - failed) << "/" << results.size()
            << " checks passed\n";
  return failed == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gradient-based meta-learning: training, evaluation and "
               "ablation sweeps"};
  app.require_subcommand(1);

  CommonOpts run_opts;
  CLI::App* run = app.add_subcommand("run", "Train, checkpoint and evaluate");
  add_common(run, run_opts, true);

  CommonOpts eval_common;
  EvalOpts eval_opts;
  CLI::App* evaluate =
      app.add_subcommand("evaluate", "Score a saved checkpoint");
  add_common(evaluate, eval_common, true);
  evaluate->add_option("--checkpoint", eval_opts.checkpoint, "Checkpoint file")
      ->required();
  evaluate->add_option("--split", eval_opts.split, "Class split to sample")
      ->check(CLI::IsMember({"train", "val", "test"}));
  evaluate->add_option("--episodes", eval_opts.episodes, "Task count")
      ->check(CLI::PositiveNumber);
  evaluate->add_option("--eval-seed", eval_opts.seed, "Evaluation stream seed");

  CommonOpts ablate_opts;
  CLI::App* ablate =
      app.add_subcommand("ablate", "Run the ten-row variant matrix");
  add_common(ablate, ablate_opts, true);

  CLI::App* check =
      app.add_subcommand("check", "Run the full oracle and property battery");

  try {
    app.parse(argc, argv);
    if (run->parsed()) return cmd_run(run_opts);
    if (evaluate->parsed()) return cmd_evaluate(eval_common, eval_opts);
    if (ablate->parsed()) return cmd_ablate(ablate_opts);
    if (check->parsed()) return cmd_check();
    return 10;
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 3;
  } catch (const DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << "\n";
    return 5;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << "\n";
    return 10;
  }
}
