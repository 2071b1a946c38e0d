#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "metalearn/checkpoint.hpp"
#include "metalearn/outer_loop.hpp"

using namespace metalearn;

namespace {

ClusterFamily small_family() {
  ClusterFamily::Config fc;
  fc.dim = 6;
  fc.classes_train = 8;
  fc.classes_val = 3;
  fc.classes_test = 3;
  fc.radius = 5.0;
  fc.seed = 2;
  return ClusterFamily(fc);
}

TaskSpec small_task() {
  TaskSpec t;
  t.way = 3;
  t.shot = 2;
  t.query_per_class = 4;
  t.input_dim = 6;
  return t;
}

ModelSpec small_model() {
  ModelSpec m;
  m.encoder = EncoderSpec::mlp({6, 8, 6}, {1}, {1});
  m.classification = true;
  m.way = 3;
  return m;
}

InnerConfig small_inner() {
  InnerConfig inner;
  inner.steps = 2;
  inner.momentum = 0.0;
  inner.weight_decay = 0.0;
  return inner;
}

Episode train_episode(const ClusterFamily& family, const TaskSpec& spec,
                      std::uint64_t seed) {
  Rng rng(seed);
  return sample_episode(family, spec, Split::Train, rng);
}

double max_param_diff(MetaParams& a, MetaParams& b) {
  auto ea = param_entries(a);
  auto eb = param_entries(b);
  REQUIRE(ea.size() == eb.size());
  double m = 0.0;
  for (size_t i = 0; i < ea.size(); ++i) {
    const Tensor& ta = *ea[i].tensor;
    const Tensor& tb = *eb[i].tensor;
    REQUIRE(ta.shape() == tb.shape());
    for (std::int64_t k = 0; k < ta.size(); ++k) {
      m = std::max(m, std::abs(ta.at(k) - tb.at(k)));
    }
  }
  return m;
}

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("metalearn_test_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter()++));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  static int& counter() {
    static int c = 0;
    return c;
  }
  std::string file(const char* name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("meta config validation") {
  MetaConfig ok;
  ok.validate();
  MetaConfig bad = ok;
  bad.eta = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = ok;
  bad.meta_batch = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = ok;
  bad.steps = -1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = ok;
  bad.workers = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("the objective is the batch mean of final query losses") {
  const ClusterFamily family = small_family();
  const TaskSpec tspec = small_task();
  const MetaParams params = init_meta_params(small_model(), std::nullopt, 1);
  const InnerConfig inner = small_inner();
  const PrototypeEmbedder embedder;

  const Episode e0 = train_episode(family, tspec, 100);
  const Episode e1 = train_episode(family, tspec, 101);

  const double l0 = run_episode(params, e0, inner, embedder)
                        .query_loss.value.item();
  const double l1 = run_episode(params, e1, inner, embedder)
                        .query_loss.value.item();

  CHECK(meta_objective(params, {e0}, inner, embedder) ==
        doctest::Approx(l0).epsilon(1e-12));
  CHECK(meta_objective(params, {e0, e1}, inner, embedder) ==
        doctest::Approx(0.5 * (l0 + l1)).epsilon(1e-12));
  // Duplicating an episode cannot move the mean.
  CHECK(meta_objective(params, {e0, e0, e0}, inner, embedder) ==
        doctest::Approx(l0).epsilon(1e-7));
}

TEST_CASE("a zero learning rate leaves every parameter untouched") {
  const ClusterFamily family = small_family();
  const TaskSpec tspec = small_task();
  MetaParams params = init_meta_params(small_model(), std::nullopt, 2);
  MetaParams before = init_meta_params(small_model(), std::nullopt, 2);
  AdamState state = init_adam(params);

  MetaConfig mc;
  mc.eta = 0.0;  // meta_step takes the value as given
  const StepStats stats =
      meta_step(params, state, {train_episode(family, tspec, 5)},
                small_inner(), mc, PrototypeEmbedder{});

  CHECK(std::isfinite(stats.meta_loss));
  CHECK(stats.grad_norm > 0.0);
  CHECK_FALSE(stats.skipped);
  CHECK(max_param_diff(params, before) == 0.0);
  CHECK(state.step == 1);
}

TEST_CASE("first step is a bias-corrected signed update") {
  const ClusterFamily family = small_family();
  const TaskSpec tspec = small_task();
  MetaParams params = init_meta_params(small_model(), std::nullopt, 3);
  MetaParams reference = init_meta_params(small_model(), std::nullopt, 3);
  const InnerConfig inner = small_inner();
  const PrototypeEmbedder embedder;
  const Episode ep = train_episode(family, tspec, 7);

  // Per-entry gradients of the same objective, computed directly.
  EpisodeRun run = run_episode(reference, ep, inner, embedder);
  std::vector<Var*> lifted = var_entries(run.vars);
  std::vector<ParamEntry> ref_entries = param_entries(reference);
  std::vector<size_t> tidx;
  for (size_t i = 0; i < ref_entries.size(); ++i) {
    if (ref_entries[i].trainable) tidx.push_back(i);
  }
  std::vector<Var> leaves;
  for (size_t k : tidx) leaves.push_back(*lifted[k]);
  std::vector<Var> gs = grad(run.query_loss, leaves);

  double norm_sq = 0.0;
  for (const Var& g : gs) {
    for (std::int64_t i = 0; i < g.value.size(); ++i) {
      norm_sq += g.value.at(i) * g.value.at(i);
    }
  }
  const double norm = std::sqrt(norm_sq);

  MetaConfig mc;
  mc.eta = 0.05;
  AdamState state = init_adam(params);
  const StepStats stats =
      meta_step(params, state, {ep}, inner, mc, embedder);
  CHECK(stats.grad_norm == doctest::Approx(norm).epsilon(1e-9));

  // With t = 1 the corrected moments reduce to g and g^2, so the update is
  // eta * g / (|g| + eps), possibly after norm clipping (none here).
  REQUIRE_FALSE(stats.clipped);
  std::vector<ParamEntry> new_entries = param_entries(params);
  for (size_t k = 0; k < tidx.size(); ++k) {
    const Tensor& w_new = *new_entries[tidx[k]].tensor;
    const Tensor& w_old = *ref_entries[tidx[k]].tensor;
    for (std::int64_t i = 0; i < w_new.size(); ++i) {
      const double g = gs[k].value.at(i);
      const double want =
          w_old.at(i) - mc.eta * g / (std::sqrt(g * g) + mc.epsilon);
      CHECK(w_new.at(i) == doctest::Approx(want).epsilon(1e-9));
    }
  }
}

TEST_CASE("a tiny clip threshold scales the gradient and flags it") {
  const ClusterFamily family = small_family();
  const TaskSpec tspec = small_task();
  MetaParams params = init_meta_params(small_model(), std::nullopt, 4);
  AdamState state = init_adam(params);

  MetaConfig mc;
  mc.clip_norm = 1e-9;
  const StepStats stats =
      meta_step(params, state, {train_episode(family, tspec, 9)},
                small_inner(), mc, PrototypeEmbedder{});
  CHECK(stats.clipped);
  CHECK(stats.grad_norm > mc.clip_norm);  // reported before clipping
}

TEST_CASE("updates are identical under any worker count") {
  const ClusterFamily family = small_family();
  const TaskSpec tspec = small_task();
  std::vector<Episode> batch;
  for (int i = 0; i < 4; ++i) {
    batch.push_back(train_episode(family, tspec, 20 + i));
  }

  auto run_with = [&](int workers) {
    MetaParams params = init_meta_params(small_model(), std::nullopt, 5);
    AdamState state = init_adam(params);
    MetaConfig mc;
    mc.workers = workers;
    for (int s = 0; s < 3; ++s) {
      meta_step(params, state, batch, small_inner(), mc,
                PrototypeEmbedder{});
    }
    return params;
  };

  MetaParams serial = run_with(1);
  MetaParams threaded = run_with(4);
  CHECK(max_param_diff(serial, threaded) == 0.0);
}

TEST_CASE("evaluation streams are pinned by seed and tag") {
  const ClusterFamily family = small_family();
  const TaskSpec tspec = small_task();
  const MetaParams params = init_meta_params(small_model(), std::nullopt, 6);
  const InnerConfig inner = small_inner();

  const EvalSamples a = evaluate_episodes(params, family, tspec, Split::Test,
                                          8, 3, kTagEval, inner,
                                          PrototypeEmbedder{}, 1);
  const EvalSamples b = evaluate_episodes(params, family, tspec, Split::Test,
                                          8, 3, kTagEval, inner,
                                          PrototypeEmbedder{}, 3);
  REQUIRE(a.losses.size() == 8);
  REQUIRE(a.accuracies.size() == 8);
  REQUIRE(a.seeds.size() == 8);
  for (size_t i = 0; i < 8; ++i) {
    CHECK(a.seeds[i] == derive_seed(3, kTagEval, i));
    CHECK(a.losses[i] == b.losses[i]);
    CHECK(a.accuracies[i] == b.accuracies[i]);
    CHECK(a.accuracies[i] >= 0.0);
    CHECK(a.accuracies[i] <= 1.0);
  }

  // A different tag gives a different task stream.
  const EvalSamples c = evaluate_episodes(params, family, tspec, Split::Test,
                                          8, 3, kTagVal, inner,
                                          PrototypeEmbedder{}, 1);
  bool differs = false;
  for (size_t i = 0; i < 8; ++i) {
    if (c.losses[i] != a.losses[i]) differs = true;
  }
  CHECK(differs);
}

TEST_CASE("an all-diverged batch throws a batch-wide divergence error") {
  const ClusterFamily family = small_family();
  const TaskSpec tspec = small_task();
  const MetaParams params = init_meta_params(small_model(), std::nullopt, 7);

  InnerConfig inner = small_inner();
  inner.alpha = 1e6;
  inner.steps = 8;

  try {
    meta_objective(params, {train_episode(family, tspec, 30)}, inner,
                   PrototypeEmbedder{});
    FAIL("expected divergence");
  } catch (const DivergenceError& e) {
    CHECK(e.step() == -1);
    CHECK(std::string(e.what()).find("inner step") == std::string::npos);
  }
}

TEST_CASE("zero meta-steps still checkpoint the initialization") {
  const ClusterFamily family = small_family();
  const TaskSpec tspec = small_task();
  MetaParams params = init_meta_params(small_model(), std::nullopt, 8);
  MetaParams init = init_meta_params(small_model(), std::nullopt, 8);

  MetaConfig mc;
  mc.steps = 0;
  TempDir dir;
  TrainPaths paths;
  paths.last = dir.file("last.json");
  const TrainResult result = meta_train(params, family, tspec, mc,
                                        small_inner(), PrototypeEmbedder{},
                                        paths);
  CHECK(result.start_step == 0);
  CHECK(result.end_step == 0);
  CHECK_FALSE(result.has_best);
  CHECK(max_param_diff(params, init) == 0.0);

  Checkpoint ck = load_checkpoint(paths.last);
  CHECK(ck.step == 0);
  CHECK(max_param_diff(ck.params, init) == 0.0);
}

TEST_CASE("metrics log one record per step with the documented fields") {
  const ClusterFamily family = small_family();
  const TaskSpec tspec = small_task();
  MetaParams params = init_meta_params(small_model(), std::nullopt, 9);

  MetaConfig mc;
  mc.steps = 4;
  mc.val_interval = 2;
  mc.val_episodes = 3;
  TempDir dir;
  TrainPaths paths;
  paths.metrics = dir.file("metrics.jsonl");
  paths.best = dir.file("best.json");
  paths.last = dir.file("last.json");
  meta_train(params, family, tspec, mc, small_inner(), PrototypeEmbedder{},
             paths);

  std::ifstream in(paths.metrics);
  REQUIRE(in.good());
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    CHECK(line.find("\"step\"") != std::string::npos);
    CHECK(line.find("\"meta_loss\"") != std::string::npos);
    CHECK(line.find("\"val_loss\"") != std::string::npos);
    CHECK(line.find("\"val_accuracy\"") != std::string::npos);
    CHECK(line.find("\"grad_norm\"") != std::string::npos);
    CHECK(line.find("\"clipped_flag\"") != std::string::npos);
    ++lines;
  }
  CHECK(lines == 4);

  CHECK(std::filesystem::exists(paths.best));
  CHECK(std::filesystem::exists(paths.last));
  Checkpoint last = load_checkpoint(paths.last);
  CHECK(last.step == 4);
  Checkpoint best = load_checkpoint(paths.best);
  CHECK(std::isfinite(best.best_val));
}

TEST_CASE("training twice from the same seed is bitwise identical") {
  const ClusterFamily family = small_family();
  const TaskSpec tspec = small_task();

  auto train_once = [&](int workers) {
    MetaParams params = init_meta_params(small_model(), std::nullopt, 10);
    MetaConfig mc;
    mc.steps = 3;
    mc.val_interval = 10;  // no validation inside 3 steps
    mc.seed = 77;
    mc.workers = workers;
    meta_train(params, family, tspec, mc, small_inner(), PrototypeEmbedder{},
               TrainPaths{});
    return params;
  };

  MetaParams a = train_once(1);
  MetaParams b = train_once(1);
  MetaParams c = train_once(3);
  CHECK(max_param_diff(a, b) == 0.0);
  CHECK(max_param_diff(a, c) == 0.0);
}
