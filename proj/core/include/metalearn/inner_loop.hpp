#pragma once

#include <memory>
#include <vector>

#include "metalearn/loss.hpp"
#include "metalearn/model.hpp"
#include "metalearn/tasks.hpp"

namespace metalearn {

struct InnerConfig {
  double alpha = 0.01;
  int steps = 5;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  // Treat inner gradients as constants, truncating second-order terms.
  bool first_order = false;
  // Elementwise learned rates (params.diag_lr) instead of the scalar alpha.
  bool diagonal_lr = false;
  VariantFlags flags;
  double divergence_threshold = 1e6;

  void validate() const;
};

// The unrolled adaptation record. thetas[j] holds the adapted tensors before
// step j in ThetaState::flat order, so thetas.front() is the initialization
// and thetas.back() is what the query set is scored with. meta_losses has
// one value per step taken; base_losses covers every snapshot.
struct Trajectory {
  std::vector<std::vector<Tensor>> thetas;
  std::vector<double> base_losses;
  std::vector<double> meta_losses;
  ThetaState final_theta;

  int steps() const { return static_cast<int>(thetas.size()) - 1; }
};

// Runs the J inner steps on an already-lifted model. The trajectory stays
// differentiable w.r.t. every lifted leaf unless config.first_order is set;
// the warp and FiLM generators participate in the forward pass but are never
// stepped, which is what turns the fixed warp into a preconditioner.
Trajectory adapt(const ModelVars& vars, const ThetaState& theta0,
                 const Episode& episode, const Tensor& relation,
                 const InnerConfig& config);

// omega @ omega^T, the explicit preconditioner a fixed warp layer applies to
// its neighbour's gradient. Only tests consume this; the training path gets
// the same effect implicitly from differentiating through the warp.
Tensor materialize_preconditioner(const Tensor& omega_layer);

// theta - lr (*) grad, all elementwise.
Var diagonal_precondition_step(const Var& theta, const Var& grad,
                               const Var& lr);
Tensor diagonal_precondition_step(const Tensor& theta, const Tensor& grad,
                                  const Tensor& lr);

// One episode end to end: canonicalize, lift onto a fresh tape, adapt, score
// the query set. The tape handle keeps every Var in the run alive.
struct EpisodeRun {
  std::shared_ptr<Tape> tape;
  ModelVars vars;
  Episode episode;
  Tensor relation;
  Trajectory trajectory;
  Var query_loss;
  double accuracy = -1.0;  // classification only
};

EpisodeRun run_episode(const MetaParams& params, const Episode& episode,
                       const InnerConfig& config, const Embedder& embedder);

}  // namespace metalearn
