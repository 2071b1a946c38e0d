#include "metalearn/inner_loop.hpp"

#include <cmath>
#include <string>

#include "metalearn/errors.hpp"
#include "metalearn/tape.hpp"

namespace metalearn {
namespace {

bool diverged(double v, double threshold) {
  return !std::isfinite(v) || std::abs(v) > threshold;
}

std::vector<Tensor> snapshot(const std::vector<Var>& flat) {
  std::vector<Tensor> out;
  out.reserve(flat.size());
  for (const Var& v : flat) out.push_back(v.value);
  return out;
}

}  // namespace

void InnerConfig::validate() const {
  if (alpha <= 0.0) throw ConfigError("inner: alpha must be > 0");
  if (steps < 0) throw ConfigError("inner: step count must be >= 0");
  if (momentum < 0.0 || momentum >= 1.0) {
    throw ConfigError("inner: momentum must be in [0, 1)");
  }
  if (weight_decay < 0.0) throw ConfigError("inner: weight decay must be >= 0");
  if (divergence_threshold <= 0.0) {
    throw ConfigError("inner: divergence threshold must be > 0");
  }
}

Trajectory adapt(const ModelVars& vars, const ThetaState& theta0,
                 const Episode& episode, const Tensor& relation,
                 const InnerConfig& config) {
  config.validate();
  const bool with_bias = vars.params->spec.encoder.use_bias;
  if (config.diagonal_lr && vars.diag_lr.empty()) {
    throw ConfigError("inner: diagonal rates requested but not initialized");
  }

  ThetaState theta = theta0;
  Trajectory traj;
  traj.thetas.push_back(snapshot(theta.flat(with_bias)));

  // Per-parameter learning rates; the head rate is stored as a single column
  // and duplicated exactly like the head itself.
  std::vector<Var> rates;
  if (config.diagonal_lr) {
    rates = vars.diag_lr;
    if (episode.classification && episode.way >= 2) {
      rates.back() = expand_head(rates.back(), episode.way);
    }
  }

  std::vector<Var> momentum_buf;
  for (int j = 0; j < config.steps; ++j) {
    Var support_logits = forward(vars, theta, constant(episode.support_x),
                                 config.flags.forward_options());
    MetaLossParts parts = meta_loss_parts(support_logits, vars, theta, episode,
                                          relation, config.flags);
    const double loss_v = parts.total.value.item();
    if (diverged(loss_v, config.divergence_threshold)) {
      throw DivergenceError("inner objective " + std::to_string(loss_v), j);
    }
    traj.meta_losses.push_back(loss_v);
    traj.base_losses.push_back(parts.base.value.item());

    std::vector<Var> flat = theta.flat(with_bias);
    std::vector<Var> grads = grad(parts.total, flat, !config.first_order);
    if (momentum_buf.empty() && config.momentum > 0.0) {
      for (const Var& v : flat) {
        momentum_buf.push_back(constant(Tensor::zeros(
            v.value.shape(), v.value.precision())));
      }
    }

    std::vector<Var> next;
    next.reserve(flat.size());
    for (size_t i = 0; i < flat.size(); ++i) {
      Var step = grads[i];
      if (config.momentum > 0.0) {
        momentum_buf[i] = add(scale(momentum_buf[i], config.momentum),
                              grads[i]);
        step = add(grads[i], scale(momentum_buf[i], config.momentum));
      }
      if (config.weight_decay > 0.0) {
        step = add(step, scale(flat[i], config.weight_decay));
      }
      if (config.diagonal_lr) {
        next.push_back(diagonal_precondition_step(flat[i], step, rates[i]));
      } else {
        next.push_back(sub(flat[i], scale(step, config.alpha)));
      }
    }
    theta.assign_flat(next, with_bias);
    traj.thetas.push_back(snapshot(next));
  }

  // Support loss at the final parameters, for a complete loss-per-snapshot
  // record.
  Var final_logits = forward(vars, theta, constant(episode.support_x),
                             config.flags.forward_options());
  Var final_base = base_loss(final_logits, constant(support_targets(episode)),
                             episode_loss_kind(episode));
  const double final_v = final_base.value.item();
  if (diverged(final_v, config.divergence_threshold)) {
    throw DivergenceError("inner objective " + std::to_string(final_v),
                          config.steps);
  }
  traj.base_losses.push_back(final_v);
  traj.final_theta = theta;
  return traj;
}

Tensor materialize_preconditioner(const Tensor& omega_layer) {
  if (omega_layer.rank() != 2 || omega_layer.dim(0) != omega_layer.dim(1)) {
    throw ShapeError("preconditioner: omega must be square, got " +
                     omega_layer.shape_string());
  }
  const int n = omega_layer.dim(0);
  Tensor out({n, n}, omega_layer.precision());
  double* o = out.mutable_data();
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int k = 0; k < n; ++k) {
        acc += omega_layer.at(i, k) * omega_layer.at(j, k);
      }
      o[static_cast<std::int64_t>(i) * n + j] = acc;
    }
  }
  return out.rounded();
}

Var diagonal_precondition_step(const Var& theta, const Var& grad,
                               const Var& lr) {
  return sub(theta, mul(lr, grad));
}

Tensor diagonal_precondition_step(const Tensor& theta, const Tensor& grad,
                                  const Tensor& lr) {
  return sub(constant(theta), mul(constant(lr), constant(grad))).value;
}

EpisodeRun run_episode(const MetaParams& params, const Episode& episode,
                       const InnerConfig& config, const Embedder& embedder) {
  EpisodeRun run;
  run.episode = canonicalize(episode);
  if (run.episode.classification && run.episode.way != params.spec.way) {
    throw ConfigError("episode is " + std::to_string(run.episode.way) +
                      "-way, model expects " + std::to_string(params.spec.way));
  }
  if (config.flags.use_query_loss) {
    run.relation = embedder.relation_scores(run.episode, params);
  }
  run.tape = std::make_shared<Tape>();
  run.vars = lift(params, *run.tape);
  ThetaState theta0 = initial_theta(run.vars, run.episode.way);
  run.trajectory = adapt(run.vars, theta0, run.episode, run.relation, config);

  Var query_logits = forward(run.vars, run.trajectory.final_theta,
                             constant(run.episode.query_x),
                             config.flags.forward_options());
  run.query_loss = base_loss(query_logits,
                             constant(query_targets(run.episode)),
                             episode_loss_kind(run.episode));
  const double q = run.query_loss.value.item();
  if (diverged(q, config.divergence_threshold)) {
    throw DivergenceError("query loss " + std::to_string(q), config.steps);
  }
  if (run.episode.classification) {
    const std::vector<int> pred = row_argmax(query_logits.value);
    int hits = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
      hits += pred[i] == run.episode.query_y[i];
    }
    run.accuracy = static_cast<double>(hits) / pred.size();
  }
  return run;
}

}  // namespace metalearn
