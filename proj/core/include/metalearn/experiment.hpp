#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "metalearn/inner_loop.hpp"
#include "metalearn/outer_loop.hpp"
#include "metalearn/tasks.hpp"

namespace metalearn {

enum class FamilyKind { Sinusoid, Clusters };
const char* to_string(FamilyKind k);

// Which pieces of the update rule a run learns. Presets name the common
// rows: "maml" (nothing), "metasgd" (elementwise rates), "full" (warp, FiLM
// and all three loss terms).
struct VariantSpec {
  std::string name = "maml";
  VariantFlags flags;
  bool diagonal_lr = false;
};
VariantSpec variant_preset(const std::string& name);

struct ExperimentConfig {
  int schema_version = 1;
  FamilyKind family_kind = FamilyKind::Clusters;
  SinusoidFamily::Config sinusoid;
  ClusterFamily::Config clusters;
  TaskSpec task;
  std::vector<int> encoder_dims;
  std::vector<int> warped_layers;
  std::vector<int> adapted_layers;
  bool encoder_bias = true;
  InnerConfig inner;  // flags and diagonal_lr come from `variant`
  MetaConfig meta;
  VariantSpec variant;
  PretrainConfig pretrain;
  int eval_episodes = 600;
  std::vector<std::uint64_t> seeds = {0};
  std::string out_dir = "out";
  Precision precision = Precision::Double;

  void validate() const;
  ModelSpec model_spec() const;
  InnerConfig resolved_inner() const;
  std::unique_ptr<TaskFamily> make_family() const;
  std::unique_ptr<Embedder> make_embedder() const;
};

// Parse errors name the offending field. Omitted fields take defaults; the
// serialized form writes every field back out, so a resolved config is
// self-describing and round-trips to an equal value.
ExperimentConfig parse_experiment_config(const std::string& text);
std::string resolved_config_text(const ExperimentConfig& config);
ExperimentConfig load_experiment_config(const std::string& path);
void save_experiment_config(const std::string& path,
                            const ExperimentConfig& config);

struct Summary {
  int n = 0;
  double mean = 0.0;
  // 1.96 * sample std / sqrt(n), the 95% normal interval.
  double half_width = 0.0;
};
Summary summarize(const std::vector<double>& xs);

struct SeedReport {
  std::uint64_t seed = 0;
  Summary loss;
  Summary accuracy;  // n=0 for regression
  int dropped = 0;
};

struct EvalReport {
  bool classification = true;
  std::vector<SeedReport> per_seed;
  Summary pooled_loss;
  Summary pooled_accuracy;
  int task_count = 0;
};

// Per-task records: "task_index,<accuracy|loss>,support_seed". The report's
// interval is recomputable from this file alone.
void write_task_csv(const std::string& path, const EvalSamples& samples,
                    bool classification);
std::vector<double> read_task_csv_values(const std::string& path);

void write_eval_report(const std::string& path, const EvalReport& report);

// Evaluates one parameter set over `episodes` tasks per seed.
// csv_dir, when non-empty, receives tasks_seed<i>.csv per seed.
EvalReport evaluate_params(const MetaParams& params, const TaskFamily& family,
                           const TaskSpec& spec, Split split, int episodes,
                           const std::vector<std::uint64_t>& seeds,
                           const InnerConfig& inner, const Embedder& embedder,
                           int workers, const std::string& csv_dir);

// Full pipeline: optional pretrain, meta_train, meta-test evaluation; one
// subdirectory per seed under config.out_dir, pooled report at the top.
EvalReport run_experiment(const ExperimentConfig& config);

// Loads a checkpoint and evaluates it on the requested split. Training
// classes are off limits here.
EvalReport evaluate_checkpoint(const std::string& checkpoint_path,
                               const ExperimentConfig& config, Split split,
                               int episodes, std::uint64_t seed,
                               const std::string& csv_dir);

struct AblationRow {
  int index = 0;
  std::string name;
  VariantSpec variant;
  int shared_with = -1;  // row index whose artifacts this row reuses
  bool failed = false;
  std::string error;
  EvalReport report;
};

// The ten-row component/loss-term matrix; rows 6 and 10 alias rows 1 and 3.
std::vector<AblationRow> ablation_rows();

// Runs every distinct row with shared seeds and task streams; a failing row
// is marked and the sweep continues.
std::vector<AblationRow> run_ablation(const ExperimentConfig& base);
std::string format_ablation_table(const std::vector<AblationRow>& rows);

// step/value CSV extractions from a metrics log, one file per series.
void write_plot_data(const std::string& metrics_path,
                     const std::string& out_dir);

}  // namespace metalearn
