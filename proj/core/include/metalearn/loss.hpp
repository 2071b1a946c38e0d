#pragma once

#include "metalearn/model.hpp"
#include "metalearn/tasks.hpp"
#include "metalearn/var.hpp"

namespace metalearn {

enum class LossKind { CrossEntropy, Squared };

// Which learned pieces of the update rule are active. Everything off is the
// plain-SGD-on-base-loss baseline; the ablation tables toggle these.
struct VariantFlags {
  bool use_warp = false;
  bool use_film = false;
  bool use_support_loss = false;
  bool use_query_loss = false;
  bool use_regularizer = false;

  bool any_learned_loss() const {
    return use_support_loss || use_query_loss || use_regularizer;
  }
  ForwardOptions forward_options() const { return {use_warp, use_film}; }

  static VariantFlags none() { return {}; }
  static VariantFlags all() { return {true, true, true, true, true}; }
};

// Mean-reduced standard loss. Cross-entropy takes [m, N] logits against
// one-hot targets; squared takes predictions against same-shaped targets and
// averages over every element.
Var base_loss(const Var& predictions, const Var& targets, LossKind kind);

// Column of per-instance losses, [m, 1]; the scalar base_loss is the mean of
// this column.
Var per_instance_base_loss(const Var& predictions, const Var& targets,
                           LossKind kind);

// Applies one learned loss network to a [batch, in] conditioning matrix and
// mean-reduces the per-instance outputs to a scalar.
Var loss_net_apply(const VarLossNet& net, const Var& input, bool use_film);

// The [S, 2N+1] inductive conditioning: one-hot target, softmax prediction,
// per-instance base loss. Regression narrows to [S, 3]: target, prediction,
// per-instance loss.
Var support_loss_input(const Var& support_logits, const Episode& episode);
Var support_loss(const VarLossNet& net, const Var& support_logits,
                 const Episode& episode, bool use_film);

// The [Q, 2N+1] transductive conditioning: softmax prediction, relation
// scores (constant), squared prediction-to-scores distance. Regression
// narrows to [Q, 3].
Var query_loss_input(const Var& query_logits, const Tensor& relation,
                     const Episode& episode);
Var query_loss(const VarLossNet& net, const Var& query_logits,
               const Tensor& relation, const Episode& episode, bool use_film);

// mean, std, L1, L2 of a weight matrix as a [1, 4] row.
Var layer_stats(const Var& weights);

// Stats of every adapted layer (head included) through the regularizer net.
Var weight_regularizer(const VarLossNet& net, const ThetaState& theta,
                       bool use_film);

// The inner objective: base support loss plus whichever learned terms the
// flags enable. With all loss-net weights zero the learned terms vanish and
// this equals the base loss exactly.
Var meta_loss(const ModelVars& vars, const ThetaState& theta,
              const Episode& episode, const Tensor& relation,
              const VariantFlags& flags);

// Same objective with the plain support loss broken out, for trajectory
// bookkeeping without a second forward pass.
struct MetaLossParts {
  Var total;
  Var base;
};
MetaLossParts meta_loss_parts(const Var& support_logits, const ModelVars& vars,
                              const ThetaState& theta, const Episode& episode,
                              const Tensor& relation, const VariantFlags& flags);

LossKind episode_loss_kind(const Episode& episode);

// One-hot slot targets for a classification episode, or the regression
// target column.
Tensor support_targets(const Episode& episode);
Tensor query_targets(const Episode& episode);

}  // namespace metalearn
