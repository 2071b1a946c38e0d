#include "metalearn/outer_loop.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <thread>

#include <json.hpp>

#include "metalearn/checkpoint.hpp"
#include "metalearn/errors.hpp"

namespace metalearn {
namespace {

using nlohmann::json;

// Runs fn(0..n-1) on up to `workers` threads; any exception is captured per
// index so the caller can consume failures in index order.
void run_indexed(int n, int workers, const std::function<void(int)>& fn,
                 std::vector<std::exception_ptr>& errors) {
  errors.assign(n, nullptr);
  auto guarded = [&](int i) {
    try {
      fn(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  workers = std::max(1, std::min(workers, n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) guarded(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
        guarded(i);
      }
    });
  }
  for (std::thread& t : pool) t.join();
}

std::vector<size_t> trainable_indices(std::vector<ParamEntry>& entries) {
  std::vector<size_t> out;
  for (size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].trainable) out.push_back(i);
  }
  return out;
}

void add_into(Tensor& acc, const Tensor& g) {
  double* a = acc.mutable_data();
  const double* b = g.data();
  for (std::int64_t i = 0; i < acc.size(); ++i) a[i] += b[i];
}

double mean_of(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return xs.empty() ? 0.0 : s / xs.size();
}

}  // namespace

void MetaConfig::validate() const {
  if (eta <= 0.0) throw ConfigError("meta: eta must be > 0");
  if (meta_batch < 1) throw ConfigError("meta: batch size must be >= 1");
  if (steps < 0) throw ConfigError("meta: step count must be >= 0");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
    throw ConfigError("meta: betas must be in [0, 1)");
  }
  if (epsilon <= 0.0) throw ConfigError("meta: epsilon must be > 0");
  if (val_interval < 1) throw ConfigError("meta: val interval must be >= 1");
  if (val_episodes < 1) throw ConfigError("meta: val episodes must be >= 1");
  if (clip_norm <= 0.0) throw ConfigError("meta: clip norm must be > 0");
  if (workers < 1) throw ConfigError("meta: worker count must be >= 1");
}

AdamState init_adam(MetaParams& params) {
  AdamState state;
  for (const ParamEntry& e : param_entries(params)) {
    if (!e.trainable) continue;
    state.m.push_back(Tensor::zeros(e.tensor->shape()));
    state.v.push_back(Tensor::zeros(e.tensor->shape()));
  }
  return state;
}

double meta_objective(const MetaParams& params,
                      const std::vector<Episode>& episodes,
                      const InnerConfig& inner, const Embedder& embedder) {
  if (episodes.empty()) throw ConfigError("meta objective: no episodes");
  std::vector<double> losses;
  int dropped = 0;
  for (size_t i = 0; i < episodes.size(); ++i) {
    try {
      losses.push_back(
          run_episode(params, episodes[i], inner, embedder).query_loss.value
              .item());
    } catch (const DivergenceError& e) {
      std::cerr << "warning: episode " << i << " diverged: " << e.what()
                << "\n";
      ++dropped;
    }
  }
  if (losses.empty()) {
    throw DivergenceError("every episode in the batch diverged", -1);
  }
  (void)dropped;
  return mean_of(losses);
}

StepStats meta_step(MetaParams& params, AdamState& state,
                    const std::vector<Episode>& episodes,
                    const InnerConfig& inner, const MetaConfig& config,
                    const Embedder& embedder) {
  if (episodes.empty()) throw ConfigError("meta step: no episodes");
  std::vector<ParamEntry> entries = param_entries(params);
  const std::vector<size_t> train_idx = trainable_indices(entries);
  if (state.m.size() != train_idx.size()) {
    throw ConfigError("meta step: optimizer state tracks " +
                      std::to_string(state.m.size()) + " tensors, model has " +
                      std::to_string(train_idx.size()));
  }

  const int n = static_cast<int>(episodes.size());
  struct EpisodeGrad {
    std::vector<Tensor> grads;
    double loss = 0.0;
  };
  std::vector<EpisodeGrad> results(n);
  std::vector<std::exception_ptr> errors;
  run_indexed(
      n, config.workers,
      [&](int i) {
        EpisodeRun run = run_episode(params, episodes[i], inner, embedder);
        std::vector<Var*> vars = var_entries(run.vars);
        std::vector<Var> leaves;
        leaves.reserve(train_idx.size());
        for (size_t k : train_idx) leaves.push_back(*vars[k]);
        std::vector<Var> gs = grad(run.query_loss, leaves);
        EpisodeGrad& out = results[i];
        out.loss = run.query_loss.value.item();
        out.grads.reserve(gs.size());
        for (const Var& g : gs) out.grads.push_back(g.value);
      },
      errors);

  // Reduce in episode order; worker count never changes the sum.
  StepStats stats;
  std::vector<Tensor> acc;
  std::vector<double> losses;
  for (int i = 0; i < n; ++i) {
    if (errors[i]) {
      try {
        std::rethrow_exception(errors[i]);
      } catch (const DivergenceError& e) {
        std::cerr << "warning: episode " << i << " diverged: " << e.what()
                  << "\n";
        ++stats.dropped_episodes;
        continue;
      }
    }
    if (acc.empty()) {
      // Copies share storage until add_into's first write.
      acc = results[i].grads;
    } else {
      for (size_t k = 0; k < acc.size(); ++k) add_into(acc[k],
                                                       results[i].grads[k]);
    }
    losses.push_back(results[i].loss);
  }
  if (losses.empty()) {
    throw DivergenceError("every episode in the batch diverged", -1);
  }
  stats.meta_loss = mean_of(losses);

  const double inv = 1.0 / static_cast<double>(losses.size());
  double norm_sq = 0.0;
  for (Tensor& g : acc) {
    double* d = g.mutable_data();
    for (std::int64_t i = 0; i < g.size(); ++i) {
      d[i] *= inv;
      norm_sq += d[i] * d[i];
    }
  }
  stats.grad_norm = std::sqrt(norm_sq);
  if (!std::isfinite(stats.grad_norm)) {
    std::cerr << "warning: non-finite meta-gradient, update skipped\n";
    stats.skipped = true;
    return stats;
  }
  if (stats.grad_norm > config.clip_norm) {
    const double f = config.clip_norm / stats.grad_norm;
    for (Tensor& g : acc) {
      double* d = g.mutable_data();
      for (std::int64_t i = 0; i < g.size(); ++i) d[i] *= f;
    }
    stats.clipped = true;
  }

  ++state.step;
  const double bc1 = 1.0 - std::pow(config.beta1, state.step);
  const double bc2 = 1.0 - std::pow(config.beta2, state.step);
  for (size_t k = 0; k < train_idx.size(); ++k) {
    Tensor& w = *entries[train_idx[k]].tensor;
    double* wd = w.mutable_data();
    double* md = state.m[k].mutable_data();
    double* vd = state.v[k].mutable_data();
    const double* gd = acc[k].data();
    for (std::int64_t i = 0; i < w.size(); ++i) {
      md[i] = config.beta1 * md[i] + (1.0 - config.beta1) * gd[i];
      vd[i] = config.beta2 * vd[i] + (1.0 - config.beta2) * gd[i] * gd[i];
      const double mhat = md[i] / bc1;
      const double vhat = vd[i] / bc2;
      wd[i] -= config.eta * mhat / (std::sqrt(vhat) + config.epsilon);
    }
    w = w.rounded();
  }
  return stats;
}

double EvalSamples::mean_loss() const { return mean_of(losses); }
double EvalSamples::mean_accuracy() const { return mean_of(accuracies); }

EvalSamples evaluate_episodes(const MetaParams& params,
                              const TaskFamily& family, const TaskSpec& spec,
                              Split split, int count, std::uint64_t seed,
                              std::uint64_t tag, const InnerConfig& inner,
                              const Embedder& embedder, int workers) {
  if (count < 1) throw ConfigError("evaluate: episode count must be >= 1");
  struct Sample {
    double loss = 0.0;
    double accuracy = -1.0;
    std::uint64_t seed = 0;
  };
  std::vector<Sample> samples(count);
  std::vector<std::exception_ptr> errors;
  run_indexed(
      count, workers,
      [&](int i) {
        const std::uint64_t ep_seed =
            derive_seed(seed, tag, static_cast<std::uint64_t>(i));
        Rng rng(ep_seed);
        Episode ep = sample_episode(family, spec, split, rng);
        ep.seed = ep_seed;
        EpisodeRun run = run_episode(params, ep, inner, embedder);
        samples[i] = {run.query_loss.value.item(), run.accuracy, ep_seed};
      },
      errors);

  EvalSamples out;
  for (int i = 0; i < count; ++i) {
    if (errors[i]) {
      try {
        std::rethrow_exception(errors[i]);
      } catch (const DivergenceError& e) {
        std::cerr << "warning: eval episode " << i << " diverged: " << e.what()
                  << "\n";
        ++out.dropped;
        continue;
      }
    }
    out.losses.push_back(samples[i].loss);
    if (samples[i].accuracy >= 0.0) out.accuracies.push_back(
        samples[i].accuracy);
    out.seeds.push_back(samples[i].seed);
  }
  if (out.losses.empty()) {
    throw DivergenceError("every evaluation episode diverged", -1);
  }
  return out;
}

namespace {

// Drops metrics records at or past the resume step so a resumed run's log is
// identical to an uninterrupted one.
void trim_metrics(const std::string& path, long start_step) {
  std::ifstream in(path);
  if (!in) return;
  std::vector<std::string> keep;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      if (json::parse(line).at("step").get<long>() >= start_step) continue;
    } catch (const json::exception&) {
      continue;
    }
    keep.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("metrics: cannot rewrite '" + path + "'");
  for (const std::string& l : keep) out << l << "\n";
}

}  // namespace

TrainResult meta_train(MetaParams& params, const TaskFamily& family,
                       const TaskSpec& spec, const MetaConfig& config,
                       const InnerConfig& inner, const Embedder& embedder,
                       const TrainPaths& paths) {
  config.validate();
  inner.validate();
  spec.validate();

  TrainResult result;
  AdamState state = init_adam(params);
  double best = std::numeric_limits<double>::infinity();
  bool has_best = false;
  long start = 0;

  if (!paths.last.empty()) {
    std::ifstream probe(paths.last);
    if (probe.good()) {
      Checkpoint ck = load_checkpoint(paths.last);
      params = std::move(ck.params);
      if (ck.adam.m.empty()) {
        state = init_adam(params);
      } else {
        state = std::move(ck.adam);
      }
      start = ck.step;
      if (std::isfinite(ck.best_val)) {
        best = ck.best_val;
        has_best = true;
      }
    }
  }
  result.start_step = start;

  std::ofstream metrics;
  if (!paths.metrics.empty()) {
    if (start > 0) trim_metrics(paths.metrics, start);
    metrics.open(paths.metrics, start > 0 ? std::ios::app : std::ios::trunc);
    if (!metrics) throw IoError("metrics: cannot open '" + paths.metrics +
                                "'");
  }

  for (long s = start; s < config.steps; ++s) {
    std::vector<Episode> batch;
    batch.reserve(config.meta_batch);
    for (int b = 0; b < config.meta_batch; ++b) {
      const std::uint64_t ep_seed =
          derive_seed(config.seed, kTagTrain, static_cast<std::uint64_t>(s),
                      static_cast<std::uint64_t>(b));
      Rng rng(ep_seed);
      Episode ep = sample_episode(family, spec, Split::Train, rng);
      ep.seed = ep_seed;
      batch.push_back(std::move(ep));
    }
    const StepStats stats =
        meta_step(params, state, batch, inner, config, embedder);

    const bool val_now = (s + 1) % config.val_interval == 0 ||
                         s + 1 == config.steps;
    double val_loss = 0.0, val_acc = 0.0;
    if (val_now) {
      const EvalSamples val = evaluate_episodes(
          params, family, spec, Split::Val, config.val_episodes, config.seed,
          kTagVal, inner, embedder, config.workers);
      val_loss = val.mean_loss();
      val_acc = val.mean_accuracy();
      if (val_loss < best) {
        best = val_loss;
        has_best = true;
        if (!paths.best.empty()) {
          save_checkpoint(paths.best, params, state, s + 1, best);
        }
      }
      if (!paths.last.empty()) {
        save_checkpoint(paths.last, params, state, s + 1,
                        has_best ? best
                                 : std::numeric_limits<double>::quiet_NaN());
      }
    }

    if (metrics.is_open()) {
      json rec;
      rec["step"] = s;
      rec["meta_loss"] = stats.meta_loss;
      if (val_now) {
        rec["val_loss"] = val_loss;
        rec["val_accuracy"] = spec.classification ? json(val_acc) : json();
      } else {
        rec["val_loss"] = nullptr;
        rec["val_accuracy"] = nullptr;
      }
      rec["grad_norm"] = stats.grad_norm;
      rec["clipped_flag"] = stats.clipped;
      metrics << rec.dump() << "\n";
      metrics.flush();
    }
  }

  if (!paths.last.empty()) {
    save_checkpoint(paths.last, params, state, config.steps,
                    has_best ? best : std::numeric_limits<double>::quiet_NaN());
  }
  result.end_step = config.steps;
  result.best_val_loss = has_best ? best : 0.0;
  result.has_best = has_best;
  return result;
}

}  // namespace metalearn
