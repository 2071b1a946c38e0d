#include "metalearn/loss.hpp"

namespace metalearn {

namespace {

// Epsilon inside the sqrt keeps std and L2 differentiable at exactly-zero
// weights; it perturbs the [1,-1] reference values by ~5e-13.
constexpr double kStatsEps = 1e-12;

}  // namespace

LossKind episode_loss_kind(const Episode& episode) {
  return episode.classification ? LossKind::CrossEntropy : LossKind::Squared;
}

Tensor support_targets(const Episode& episode) {
  if (episode.classification) {
    return one_hot(episode.support_y, episode.way,
                   episode.support_x.precision());
  }
  return episode.support_t;
}

Tensor query_targets(const Episode& episode) {
  if (episode.classification) {
    return one_hot(episode.query_y, episode.way, episode.query_x.precision());
  }
  return episode.query_t;
}

Var per_instance_base_loss(const Var& predictions, const Var& targets,
                           LossKind kind) {
  if (!predictions.value.same_shape(targets.value)) {
    throw ShapeError("base_loss: shape " + predictions.value.shape_string() +
                     " vs " + targets.value.shape_string());
  }
  if (kind == LossKind::CrossEntropy) {
    return scale(sum(mul(log_softmax(predictions, 1), targets), 1), -1.0);
  }
  const int cols = predictions.value.dim(1);
  return scale(sum(square(sub(predictions, targets)), 1), 1.0 / cols);
}

Var base_loss(const Var& predictions, const Var& targets, LossKind kind) {
  return mean_all(per_instance_base_loss(predictions, targets, kind));
}

Var loss_net_apply(const VarLossNet& net, const Var& input, bool use_film) {
  const int in = net.linear.front().weight.value.dim(0);
  if (input.value.rank() != 2 || input.value.dim(1) != in) {
    throw ShapeError("loss net: input " + input.value.shape_string() +
                     " for extent " + std::to_string(in));
  }
  const int batch = input.value.dim(0);
  Var h = input;
  for (size_t i = 0; i < net.linear.size(); ++i) {
    h = add(matmul(h, net.linear[i].weight),
            expand(net.linear[i].bias, 0, batch));
    if (i + 1 < net.linear.size()) {
      if (use_film) h = film(h, net.film[i]);
      h = relu(h);
    }
  }
  return mean_all(h);
}

Var support_loss_input(const Var& support_logits, const Episode& episode) {
  if (episode.classification) {
    Var onehot = constant(support_targets(episode));
    Var probs = softmax(support_logits, 1);
    Var inst = per_instance_base_loss(support_logits, onehot,
                                      LossKind::CrossEntropy);
    return concat({onehot, probs, inst}, 1);
  }
  Var target = constant(episode.support_t);
  Var inst = square(sub(support_logits, target));
  return concat({target, support_logits, inst}, 1);
}

Var support_loss(const VarLossNet& net, const Var& support_logits,
                 const Episode& episode, bool use_film) {
  return loss_net_apply(net, support_loss_input(support_logits, episode),
                        use_film);
}

Var query_loss_input(const Var& query_logits, const Tensor& relation,
                     const Episode& episode) {
  const int q = query_logits.value.dim(0);
  const int cols = episode.classification ? episode.way : 1;
  if (relation.rank() != 2 || relation.dim(0) != q ||
      relation.dim(1) != cols) {
    throw ShapeError("query loss: relation scores " + relation.shape_string() +
                     " for " + std::to_string(q) + " x " +
                     std::to_string(cols));
  }
  Var rel = constant(relation);
  if (episode.classification) {
    Var probs = softmax(query_logits, 1);
    Var inst = sum(square(sub(probs, rel)), 1);
    return concat({probs, rel, inst}, 1);
  }
  Var inst = square(sub(query_logits, rel));
  return concat({query_logits, rel, inst}, 1);
}

Var query_loss(const VarLossNet& net, const Var& query_logits,
               const Tensor& relation, const Episode& episode, bool use_film) {
  return loss_net_apply(net, query_loss_input(query_logits, relation, episode),
                        use_film);
}

Var layer_stats(const Var& weights) {
  Var mu = mean_all(weights);
  Var centered = sub(weights, spread(mu, weights.value.shape()));
  Var stddev = sqrt(add_scalar(mean_all(square(centered)), kStatsEps));
  Var l1 = sum_all(abs(weights));
  Var l2 = sqrt(add_scalar(sum_all(square(weights)), kStatsEps));
  return concat({reshape(mu, {1, 1}), reshape(stddev, {1, 1}),
                 reshape(l1, {1, 1}), reshape(l2, {1, 1})},
                1);
}

Var weight_regularizer(const VarLossNet& net, const ThetaState& theta,
                       bool use_film) {
  std::vector<Var> stats;
  for (const VarLinear& lin : theta.layers) stats.push_back(layer_stats(lin.weight));
  stats.push_back(layer_stats(theta.head));
  return loss_net_apply(net, concat(stats, 1), use_film);
}

Var meta_loss(const ModelVars& vars, const ThetaState& theta,
              const Episode& episode, const Tensor& relation,
              const VariantFlags& flags) {
  Var support_logits = forward(vars, theta, constant(episode.support_x),
                               flags.forward_options());
  return meta_loss_parts(support_logits, vars, theta, episode, relation, flags)
      .total;
}

MetaLossParts meta_loss_parts(const Var& support_logits, const ModelVars& vars,
                              const ThetaState& theta, const Episode& episode,
                              const Tensor& relation,
                              const VariantFlags& flags) {
  const LossKind kind = episode_loss_kind(episode);
  MetaLossParts parts;
  parts.base = base_loss(support_logits, constant(support_targets(episode)),
                         kind);
  parts.total = parts.base;
  if (flags.use_support_loss) {
    parts.total = add(parts.total, support_loss(vars.support_net,
                                                support_logits, episode,
                                                flags.use_film));
  }
  if (flags.use_query_loss) {
    Var query_logits = forward(vars, theta, constant(episode.query_x),
                               flags.forward_options());
    parts.total = add(parts.total, query_loss(vars.query_net, query_logits,
                                              relation, episode,
                                              flags.use_film));
  }
  if (flags.use_regularizer) {
    parts.total = add(parts.total,
                      weight_regularizer(vars.reg_net, theta, flags.use_film));
  }
  return parts;
}

}  // namespace metalearn
