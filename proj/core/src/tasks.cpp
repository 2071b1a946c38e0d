#include "metalearn/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "metalearn/loss.hpp"
#include "metalearn/tape.hpp"

namespace metalearn {

const char* to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

void TaskSpec::validate() const {
  if (classification && way < 2) throw ConfigError("task: way must be >= 2");
  if (shot < 1) throw ConfigError("task: shot must be >= 1");
  if (query_per_class < 1) throw ConfigError("task: query count must be >= 1");
  if (input_dim < 1) throw ConfigError("task: input_dim must be >= 1");
}

Episode canonicalize(const Episode& episode) {
  if (!episode.classification) return episode;
  std::map<int, int> to_slot;
  std::vector<int> order;
  for (int y : episode.support_y) {
    if (to_slot.emplace(y, static_cast<int>(order.size())).second) {
      order.push_back(y);
    }
  }
  if (static_cast<int>(order.size()) != episode.way) {
    throw DomainError("episode: support covers " +
                      std::to_string(order.size()) + " of " +
                      std::to_string(episode.way) + " classes");
  }
  Episode out = episode;
  for (int& y : out.support_y) y = to_slot.at(y);
  for (int& y : out.query_y) {
    auto it = to_slot.find(y);
    if (it == to_slot.end()) {
      throw DomainError("episode: query label " + std::to_string(y) +
                        " absent from support");
    }
    y = it->second;
  }
  out.slot_to_class.assign(episode.way, 0);
  for (int slot = 0; slot < episode.way; ++slot) {
    const int old_label = order[slot];
    out.slot_to_class[slot] = episode.slot_to_class.empty()
                                  ? old_label
                                  : episode.slot_to_class[old_label];
  }
  return out;
}

SinusoidFamily::SinusoidFamily() : SinusoidFamily(Config{}) {}

SinusoidFamily::SinusoidFamily(Config config) : config_(config) {
  if (config_.amp_lo <= 0.0 || config_.amp_hi <= config_.amp_lo ||
      config_.phase_hi <= config_.phase_lo || config_.x_hi <= config_.x_lo) {
    throw ConfigError("sinusoid: degenerate parameter range");
  }
}

Episode SinusoidFamily::sample(const TaskSpec& spec, Split, Rng& rng) const {
  if (spec.classification) {
    throw ConfigError("sinusoid: regression family, classification spec");
  }
  const double amp = rng.uniform(config_.amp_lo, config_.amp_hi);
  const double phase = rng.uniform(config_.phase_lo, config_.phase_hi);
  auto draw = [&](int n, Tensor& xs, Tensor& ts) {
    xs = Tensor({n, 1}, Precision::Double);
    ts = Tensor({n, 1}, Precision::Double);
    double* xp = xs.mutable_data();
    double* tp = ts.mutable_data();
    for (int i = 0; i < n; ++i) {
      const double x = rng.uniform(config_.x_lo, config_.x_hi);
      xp[i] = x;
      tp[i] = amp * std::sin(x + phase) + config_.noise * rng.normal();
    }
  };
  Episode ep;
  ep.classification = false;
  ep.way = 1;
  draw(spec.shot, ep.support_x, ep.support_t);
  draw(spec.query_per_class, ep.query_x, ep.query_t);
  return ep;
}

ClusterFamily::ClusterFamily() : ClusterFamily(Config{}) {}

ClusterFamily::ClusterFamily(Config config) : config_(config) {
  if (config_.classes_train < 1 || config_.classes_val < 1 ||
      config_.classes_test < 1) {
    throw ConfigError("clusters: every split needs at least one class");
  }
  if (config_.dim < 1) throw ConfigError("clusters: dim must be >= 1");
  if (config_.radius <= 0.0) throw ConfigError("clusters: radius must be > 0");
  if (config_.scale_lo <= 0.0 || config_.scale_hi < config_.scale_lo) {
    throw ConfigError("clusters: bad variance range");
  }
  Rng rng(derive_seed(config_.seed, 0xC1A55u));
  const int total = total_classes();
  means_.resize(total);
  for (int c = 0; c < total; ++c) {
    std::vector<double> g(config_.dim);
    double norm2 = 0.0;
    for (double& v : g) {
      v = rng.normal();
      norm2 += v * v;
    }
    const double scale = config_.radius / std::sqrt(norm2);
    for (double& v : g) v *= scale;
    means_[c] = std::move(g);
  }
  variances_.resize(config_.dim);
  for (double& v : variances_) {
    v = rng.uniform(config_.scale_lo, config_.scale_hi);
  }
}

int ClusterFamily::total_classes() const {
  return config_.classes_train + config_.classes_val + config_.classes_test;
}

std::vector<int> ClusterFamily::pool(Split split) const {
  int lo = 0, hi = config_.classes_train;
  if (split == Split::Val) {
    lo = config_.classes_train;
    hi = lo + config_.classes_val;
  } else if (split == Split::Test) {
    lo = config_.classes_train + config_.classes_val;
    hi = lo + config_.classes_test;
  }
  std::vector<int> ids(hi - lo);
  std::iota(ids.begin(), ids.end(), lo);
  return ids;
}

const std::vector<double>& ClusterFamily::class_mean(int class_id) const {
  return means_.at(class_id);
}

std::vector<double> ClusterFamily::sample_point(int class_id, Rng& rng) const {
  const std::vector<double>& mu = means_.at(class_id);
  std::vector<double> x(config_.dim);
  for (int d = 0; d < config_.dim; ++d) {
    x[d] = mu[d] + std::sqrt(variances_[d]) * rng.normal();
  }
  return x;
}

Episode ClusterFamily::sample(const TaskSpec& spec, Split split,
                              Rng& rng) const {
  if (!spec.classification) {
    throw ConfigError("clusters: classification family, regression spec");
  }
  if (spec.input_dim != config_.dim) {
    throw ConfigError("clusters: spec input_dim " +
                      std::to_string(spec.input_dim) + " vs family dim " +
                      std::to_string(config_.dim));
  }
  std::vector<int> ids = pool(split);
  if (static_cast<int>(ids.size()) < spec.way) {
    throw ConfigError("clusters: pool of " + std::to_string(ids.size()) +
                      " classes for " + std::to_string(spec.way) + "-way");
  }
  rng.shuffle(ids);
  ids.resize(spec.way);

  Episode ep;
  ep.classification = true;
  ep.way = spec.way;
  ep.slot_to_class = ids;
  auto fill = [&](int per_class, Tensor& xs, std::vector<int>& ys) {
    const int rows = spec.way * per_class;
    xs = Tensor({rows, config_.dim}, Precision::Double);
    ys.resize(rows);
    double* xp = xs.mutable_data();
    int r = 0;
    for (int slot = 0; slot < spec.way; ++slot) {
      for (int k = 0; k < per_class; ++k, ++r) {
        const std::vector<double> x = sample_point(ids[slot], rng);
        std::copy(x.begin(), x.end(),
                  xp + static_cast<std::int64_t>(r) * config_.dim);
        ys[r] = slot;
      }
    }
  };
  fill(spec.shot, ep.support_x, ep.support_y);
  fill(spec.query_per_class, ep.query_x, ep.query_y);
  return ep;
}

Episode sample_episode(const TaskFamily& family, const TaskSpec& spec,
                       Split split, Rng& rng) {
  spec.validate();
  return family.sample(spec, split, rng);
}

Tensor prototype_relation_scores(const Episode& episode,
                                 const MetaParams& params) {
  if (!episode.classification) {
    throw ConfigError("relation scores: classification episodes only");
  }
  const Tensor support = encode_plain(params, episode.support_x.astype(
                                                  Precision::Double));
  const Tensor query =
      encode_plain(params, episode.query_x.astype(Precision::Double));
  const int feat = support.dim(1);
  const int n = episode.way;
  const int q = query.dim(0);

  std::vector<std::vector<double>> proto(n, std::vector<double>(feat, 0.0));
  std::vector<int> counts(n, 0);
  for (int r = 0; r < support.dim(0); ++r) {
    const int slot = episode.support_y[r];
    ++counts[slot];
    for (int f = 0; f < feat; ++f) proto[slot][f] += support.at(r, f);
  }
  for (int slot = 0; slot < n; ++slot) {
    for (double& v : proto[slot]) v /= counts[slot];
  }

  Tensor scores({q, n}, Precision::Double);
  double* out = scores.mutable_data();
  for (int r = 0; r < q; ++r) {
    std::vector<double> neg(n);
    double mx = -1e300;
    for (int slot = 0; slot < n; ++slot) {
      double d2 = 0.0;
      for (int f = 0; f < feat; ++f) {
        const double d = query.at(r, f) - proto[slot][f];
        d2 += d * d;
      }
      neg[slot] = -d2;
      mx = std::max(mx, neg[slot]);
    }
    double z = 0.0;
    for (int slot = 0; slot < n; ++slot) z += std::exp(neg[slot] - mx);
    for (int slot = 0; slot < n; ++slot) {
      out[static_cast<std::int64_t>(r) * n + slot] =
          std::exp(neg[slot] - mx) / z;
    }
  }
  return scores.astype(episode.support_x.precision());
}

Tensor PrototypeEmbedder::relation_scores(const Episode& episode,
                                          const MetaParams& params) const {
  return prototype_relation_scores(episode, params);
}

Tensor MeanTargetEmbedder::relation_scores(const Episode& episode,
                                           const MetaParams&) const {
  if (episode.classification) {
    throw ConfigError("mean-target scores: regression episodes only");
  }
  double mean = 0.0;
  for (std::int64_t i = 0; i < episode.support_t.size(); ++i) {
    mean += episode.support_t.at(i);
  }
  mean /= static_cast<double>(episode.support_t.size());
  return Tensor::full({episode.query_x.dim(0), 1}, mean,
                      episode.query_x.precision());
}

PretrainResult pretrain_encoder(const ClusterFamily& family,
                                const EncoderSpec& spec,
                                const PretrainConfig& config) {
  spec.validate();
  if (spec.input_dim() != family.config().dim) {
    throw ConfigError("pretrain: encoder input " +
                      std::to_string(spec.input_dim()) + " vs family dim " +
                      std::to_string(family.config().dim));
  }
  // Encoder init matches init_meta_params() for the same seed, so zero-step
  // pre-training reproduces the random initialization exactly.
  ModelSpec mspec;
  mspec.encoder = spec;
  mspec.classification = true;
  mspec.way = 2;
  MetaParams init = init_meta_params(mspec, std::nullopt, config.seed);
  std::vector<LinearParams> layers = std::move(init.encoder);

  const std::vector<int> pool = family.pool(Split::Train);
  const int classes = static_cast<int>(pool.size());
  Rng rng(derive_seed(config.seed, 0x9ee7u));
  Tensor head = Tensor::randn({spec.feature_dim(), classes}, rng,
                              std::sqrt(1.0 / spec.feature_dim()));

  // Tensors the SGD loop updates, with one Nesterov momentum buffer each.
  std::vector<Tensor*> tensors;
  for (LinearParams& lin : layers) {
    tensors.push_back(&lin.weight);
    if (spec.use_bias) tensors.push_back(&lin.bias);
  }
  tensors.push_back(&head);
  std::vector<Tensor> momentum;
  for (Tensor* t : tensors) momentum.push_back(Tensor::zeros(t->shape()));

  auto draw_batch = [&](int n, Tensor& xs, std::vector<int>& ys) {
    xs = Tensor({n, family.config().dim}, Precision::Double);
    ys.resize(n);
    double* xp = xs.mutable_data();
    for (int i = 0; i < n; ++i) {
      const int idx = rng.uniform_int(0, classes - 1);
      const std::vector<double> x = family.sample_point(pool[idx], rng);
      std::copy(x.begin(), x.end(),
                xp + static_cast<std::int64_t>(i) * family.config().dim);
      ys[i] = idx;
    }
  };

  for (int step = 0; step < config.steps; ++step) {
    Tensor xs;
    std::vector<int> ys;
    draw_batch(config.batch, xs, ys);

    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(tensors.size());
    for (Tensor* t : tensors) leaves.push_back(make_leaf(tape, *t));
    Var h = constant(xs);
    size_t k = 0;
    for (int l = 0; l < spec.layers(); ++l) {
      h = matmul(h, leaves[k++]);
      if (spec.use_bias) h = add(h, expand(leaves[k++], 0, config.batch));
      if (spec.activation(l) == Activation::Relu) h = relu(h);
      if (spec.activation(l) == Activation::Tanh) h = tanh(h);
    }
    Var logits = matmul(h, leaves[k]);
    Var loss = base_loss(logits, constant(one_hot(ys, classes)),
                         LossKind::CrossEntropy);
    std::vector<Var> grads = grad(loss, leaves);
    for (size_t i = 0; i < tensors.size(); ++i) {
      double* w = tensors[i]->mutable_data();
      double* m = momentum[i].mutable_data();
      const double* g = grads[i].value.data();
      for (std::int64_t j = 0; j < tensors[i]->size(); ++j) {
        m[j] = config.momentum * m[j] + g[j];
        const double step_j = g[j] + config.momentum * m[j];
        w[j] -= config.lr * (step_j + config.weight_decay * w[j]);
      }
    }
  }

  PretrainResult result;
  // Held-out accuracy of encoder+head before the head is dropped.
  const int eval_n = 512;
  Tensor xs;
  std::vector<int> ys;
  draw_batch(eval_n, xs, ys);
  MetaParams probe;
  probe.spec = mspec;
  probe.encoder = layers;
  const Tensor feats = encode_plain(probe, xs);
  int hits = 0;
  for (int r = 0; r < eval_n; ++r) {
    int best = 0;
    double best_v = -1e300;
    for (int c = 0; c < classes; ++c) {
      double acc = 0.0;
      for (int f = 0; f < spec.feature_dim(); ++f) {
        acc += feats.at(r, f) * head.at(f, c);
      }
      if (acc > best_v) {
        best_v = acc;
        best = c;
      }
    }
    hits += best == ys[r];
  }
  result.train_accuracy = static_cast<double>(hits) / eval_n;
  result.encoder = std::move(layers);
  return result;
}

}  // namespace metalearn
