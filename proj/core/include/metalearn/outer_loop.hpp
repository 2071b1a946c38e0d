#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "metalearn/inner_loop.hpp"
#include "metalearn/model.hpp"
#include "metalearn/tasks.hpp"

namespace metalearn {

// Seed-stream tags. Every consumer derives its own stream from
// (seed, tag, indices...), so resuming or reordering work never shifts the
// draws of another consumer.
inline constexpr std::uint64_t kTagTrain = 0x7472;
inline constexpr std::uint64_t kTagVal = 0x7661;
inline constexpr std::uint64_t kTagEval = 0x6576;
inline constexpr std::uint64_t kTagPretrain = 0x7072;

struct MetaConfig {
  double eta = 1e-3;
  int meta_batch = 2;
  int steps = 1000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int val_interval = 100;
  int val_episodes = 100;
  double clip_norm = 10.0;
  std::uint64_t seed = 0;
  int workers = 1;

  void validate() const;
};

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  long step = 0;
};

// Moment buffers mirroring the trainable entries of params, zeroed.
AdamState init_adam(MetaParams& params);

// Mean final query loss over the batch. Episodes that trip the divergence
// guard are dropped from the mean with a warning on stderr; an all-diverged
// batch throws.
double meta_objective(const MetaParams& params,
                      const std::vector<Episode>& episodes,
                      const InnerConfig& inner, const Embedder& embedder);

struct StepStats {
  double meta_loss = 0.0;
  double grad_norm = 0.0;
  bool clipped = false;
  // Non-finite meta-gradient; the update was skipped entirely.
  bool skipped = false;
  int dropped_episodes = 0;
};

// One Adam update of every trainable tensor from the meta-batch gradient.
// Episode gradients are reduced in episode order whatever the worker count,
// so a run is reproducible under any parallelism.
StepStats meta_step(MetaParams& params, AdamState& state,
                    const std::vector<Episode>& episodes,
                    const InnerConfig& inner, const MetaConfig& config,
                    const Embedder& embedder);

struct EvalSamples {
  std::vector<double> losses;
  std::vector<double> accuracies;  // empty for regression
  std::vector<std::uint64_t> seeds;
  int dropped = 0;

  double mean_loss() const;
  double mean_accuracy() const;
};

// `count` episodes with seeds derived from (seed, tag, index), adapted and
// scored on the query set. Used for both periodic validation and final
// evaluation; a fixed (seed, tag) pins the task set bitwise.
EvalSamples evaluate_episodes(const MetaParams& params,
                              const TaskFamily& family, const TaskSpec& spec,
                              Split split, int count, std::uint64_t seed,
                              std::uint64_t tag, const InnerConfig& inner,
                              const Embedder& embedder, int workers);

struct TrainPaths {
  std::string metrics;     // JSONL, one record per meta-step
  std::string best;        // lowest-validation-loss checkpoint
  std::string last;        // rolling checkpoint, resume source
};

struct TrainResult {
  long start_step = 0;
  long end_step = 0;
  double best_val_loss = 0.0;
  bool has_best = false;
};

// Runs config.steps meta-steps with periodic validation on a fixed held-out
// task set, checkpointing best and last. If paths.last already holds a
// checkpoint, training resumes from it and reproduces the uninterrupted run
// exactly. Empty path strings disable the corresponding output.
TrainResult meta_train(MetaParams& params, const TaskFamily& family,
                       const TaskSpec& spec, const MetaConfig& config,
                       const InnerConfig& inner, const Embedder& embedder,
                       const TrainPaths& paths);

}  // namespace metalearn
