#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "metalearn/tasks.hpp"

using namespace metalearn;

namespace {

ClusterFamily tiny_clusters() {
  ClusterFamily::Config fc;
  fc.dim = 8;
  fc.classes_train = 6;
  fc.classes_val = 2;
  fc.classes_test = 2;
  fc.radius = 5.0;
  fc.seed = 3;
  return ClusterFamily(fc);
}

TaskSpec cluster_task(int dim) {
  TaskSpec t;
  t.way = 3;
  t.shot = 2;
  t.query_per_class = 4;
  t.input_dim = dim;
  return t;
}

bool tensors_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::int64_t i = 0; i < a.size(); ++i) {
    if (a.at(i) != b.at(i)) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("task spec validation") {
  TaskSpec ok;
  ok.validate();

  TaskSpec bad = ok;
  bad.way = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = ok;
  bad.shot = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = ok;
  bad.query_per_class = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = ok;
  bad.input_dim = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  TaskSpec reg;
  reg.classification = false;
  reg.way = 1;
  reg.validate();  // way 1 is fine for regression
}

TEST_CASE("sinusoid tasks are reproducible and correctly shaped") {
  const SinusoidFamily family;
  TaskSpec spec;
  spec.classification = false;
  spec.way = 1;
  spec.shot = 5;
  spec.query_per_class = 7;

  Rng r1(42);
  Rng r2(42);
  const Episode a = sample_episode(family, spec, Split::Train, r1);
  const Episode b = sample_episode(family, spec, Split::Train, r2);

  CHECK_FALSE(a.classification);
  CHECK(a.way == 1);
  CHECK(a.support_x.shape() == std::vector<int>{5, 1});
  CHECK(a.support_t.shape() == std::vector<int>{5, 1});
  CHECK(a.query_x.shape() == std::vector<int>{7, 1});
  CHECK(a.query_t.shape() == std::vector<int>{7, 1});
  CHECK(tensors_equal(a.support_x, b.support_x));
  CHECK(tensors_equal(a.support_t, b.support_t));
  CHECK(tensors_equal(a.query_x, b.query_x));
  CHECK(tensors_equal(a.query_t, b.query_t));

  Rng r3(43);
  const Episode c = sample_episode(family, spec, Split::Train, r3);
  CHECK_FALSE(tensors_equal(a.support_x, c.support_x));

  const TaskSpec cls;  // classification spec on a regression family
  Rng r4(1);
  CHECK_THROWS_AS(sample_episode(family, cls, Split::Train, r4), ConfigError);
}

TEST_CASE("a noiseless sinusoid task lies on one sinusoid exactly") {
  SinusoidFamily::Config fc;
  fc.noise = 0.0;
  const SinusoidFamily family(fc);
  TaskSpec spec;
  spec.classification = false;
  spec.way = 1;
  spec.shot = 10;
  spec.query_per_class = 10;

  for (std::uint64_t seed : {11u, 12u, 13u}) {
    Rng rng(seed);
    const Episode ep = sample_episode(family, spec, Split::Train, rng);

    // A sin(x + p) = a sin x + b cos x; solve the 2x2 normal equations over
    // all twenty points and demand a near-zero residual.
    std::vector<double> xs, ys;
    for (int i = 0; i < 10; ++i) {
      xs.push_back(ep.support_x.at(i, 0));
      ys.push_back(ep.support_t.at(i, 0));
      xs.push_back(ep.query_x.at(i, 0));
      ys.push_back(ep.query_t.at(i, 0));
    }
    double ss = 0, cc = 0, sc = 0, sy = 0, cy = 0;
    for (size_t i = 0; i < xs.size(); ++i) {
      const double s = std::sin(xs[i]), c = std::cos(xs[i]);
      ss += s * s;
      cc += c * c;
      sc += s * c;
      sy += s * ys[i];
      cy += c * ys[i];
    }
    const double det = ss * cc - sc * sc;
    REQUIRE(std::abs(det) > 1e-6);
    const double a = (cc * sy - sc * cy) / det;
    const double b = (ss * cy - sc * sy) / det;
    for (size_t i = 0; i < xs.size(); ++i) {
      const double fit = a * std::sin(xs[i]) + b * std::cos(xs[i]);
      CHECK(std::abs(fit - ys[i]) < 1e-9);
    }
    const double amp = std::sqrt(a * a + b * b);
    CHECK(amp >= fc.amp_lo - 1e-9);
    CHECK(amp <= fc.amp_hi + 1e-9);
  }
}

TEST_CASE("cluster class pools partition the id range by split") {
  const ClusterFamily family = tiny_clusters();
  CHECK(family.total_classes() == 10);

  std::vector<int> all;
  for (Split s : {Split::Train, Split::Val, Split::Test}) {
    for (int id : family.pool(s)) all.push_back(id);
  }
  std::vector<int> want(10);
  std::iota(want.begin(), want.end(), 0);
  CHECK(all == want);
  CHECK(family.pool(Split::Train).size() == 6);
  CHECK(family.pool(Split::Val).size() == 2);
  CHECK(family.pool(Split::Test).size() == 2);
}

TEST_CASE("cluster geometry is pinned by the family seed") {
  const ClusterFamily a = tiny_clusters();
  const ClusterFamily b = tiny_clusters();
  for (int id = 0; id < a.total_classes(); ++id) {
    CHECK(a.class_mean(id) == b.class_mean(id));
    double norm = 0.0;
    for (double v : a.class_mean(id)) norm += v * v;
    CHECK(std::sqrt(norm) == doctest::Approx(5.0).epsilon(1e-9));
  }

  ClusterFamily::Config other = a.config();
  other.seed = 4;
  const ClusterFamily c(other);
  CHECK(a.class_mean(0) != c.class_mean(0));
}

TEST_CASE("cluster episodes use one slot block per class") {
  const ClusterFamily family = tiny_clusters();
  const TaskSpec spec = cluster_task(8);
  Rng rng(5);
  const Episode ep = sample_episode(family, spec, Split::Train, rng);

  CHECK(ep.classification);
  CHECK(ep.way == 3);
  CHECK(ep.support_x.shape() == std::vector<int>{6, 8});
  CHECK(ep.query_x.shape() == std::vector<int>{12, 8});
  REQUIRE(ep.support_y.size() == 6);
  REQUIRE(ep.query_y.size() == 12);
  REQUIRE(ep.slot_to_class.size() == 3);

  for (int r = 0; r < 6; ++r) CHECK(ep.support_y[r] == r / 2);
  for (int r = 0; r < 12; ++r) CHECK(ep.query_y[r] == r / 4);

  // Slot classes are distinct ids from the train pool.
  std::vector<int> ids = ep.slot_to_class;
  std::sort(ids.begin(), ids.end());
  CHECK(std::adjacent_find(ids.begin(), ids.end()) == ids.end());
  for (int id : ids) {
    CHECK(id >= 0);
    CHECK(id < 6);
  }

  // Already in first-appearance order, so canonicalization is the identity.
  const Episode canon = canonicalize(ep);
  CHECK(canon.support_y == ep.support_y);
  CHECK(canon.query_y == ep.query_y);
  CHECK(canon.slot_to_class == ep.slot_to_class);
  CHECK(tensors_equal(canon.support_x, ep.support_x));
}

TEST_CASE("cluster sampling mismatches are rejected") {
  const ClusterFamily family = tiny_clusters();
  Rng rng(1);

  TaskSpec reg = cluster_task(8);
  reg.classification = false;
  reg.way = 1;
  CHECK_THROWS_AS(sample_episode(family, reg, Split::Train, rng), ConfigError);

  CHECK_THROWS_AS(sample_episode(family, cluster_task(9), Split::Train, rng),
                  ConfigError);

  TaskSpec wide = cluster_task(8);
  wide.way = 3;  // val pool only has two classes
  CHECK_THROWS_AS(sample_episode(family, wide, Split::Val, rng), ConfigError);
}

TEST_CASE("every train class is drawn at its expected rate") {
  const ClusterFamily family;  // 60 train classes
  TaskSpec spec;
  spec.way = 5;
  spec.shot = 1;
  spec.query_per_class = 1;
  spec.input_dim = family.config().dim;

  std::vector<int> counts(family.total_classes(), 0);
  Rng rng(99);
  const int episodes = 1000;
  for (int i = 0; i < episodes; ++i) {
    const Episode ep = sample_episode(family, spec, Split::Train, rng);
    for (int id : ep.slot_to_class) ++counts[id];
  }
  // Binomial(1000, 5/60): mean 83.3, sd 8.7. Five sigmas either side keeps
  // the test deterministic-feeling while still catching a skewed shuffle.
  for (int id = 0; id < 60; ++id) {
    CHECK(counts[id] > 39);
    CHECK(counts[id] < 128);
  }
  for (int id = 60; id < family.total_classes(); ++id) {
    CHECK(counts[id] == 0);
  }
}

TEST_CASE("canonicalization relabels by first support appearance") {
  Episode ep;
  ep.classification = true;
  ep.way = 2;
  ep.support_x = Tensor::zeros({4, 1});
  ep.query_x = Tensor::zeros({2, 1});
  ep.support_y = {1, 0, 1, 0};
  ep.query_y = {0, 1};
  ep.slot_to_class = {10, 20};

  const Episode out = canonicalize(ep);
  CHECK(out.support_y == std::vector<int>{0, 1, 0, 1});
  CHECK(out.query_y == std::vector<int>{1, 0});
  CHECK(out.slot_to_class == std::vector<int>{20, 10});

  Episode missing = ep;
  missing.support_y = {1, 1, 1, 1};
  CHECK_THROWS_AS(canonicalize(missing), DomainError);

  Episode stray = ep;
  stray.query_y = {0, 2};
  CHECK_THROWS_AS(canonicalize(stray), DomainError);

  Episode reg;
  reg.classification = false;
  reg.way = 1;
  reg.support_y = {7};  // untouched for regression
  CHECK(canonicalize(reg).support_y == std::vector<int>{7});
}

TEST_CASE("prototype scores are rowwise distributions over slots") {
  const ClusterFamily family = tiny_clusters();
  const TaskSpec spec = cluster_task(8);

  ModelSpec mspec;
  mspec.encoder = EncoderSpec::mlp({8, 8}, {}, {0});
  mspec.encoder.activations = {Activation::Identity};
  mspec.encoder.use_bias = false;
  mspec.way = 3;
  MetaParams params = init_meta_params(mspec, std::nullopt, 1);

  Rng rng(17);
  const Episode ep = sample_episode(family, spec, Split::Train, rng);
  const Tensor scores = prototype_relation_scores(ep, params);
  REQUIRE(scores.shape() == std::vector<int>{12, 3});
  for (int r = 0; r < 12; ++r) {
    double row = 0.0;
    for (int c = 0; c < 3; ++c) {
      CHECK(scores.at(r, c) > 0.0);
      row += scores.at(r, c);
    }
    CHECK(row == doctest::Approx(1.0).epsilon(1e-9));
  }

  const PrototypeEmbedder embedder;
  CHECK(tensors_equal(embedder.relation_scores(ep, params), scores));
}

TEST_CASE("prototype scores mostly agree with the labels when classes are far apart") {
  const ClusterFamily family;  // radius 6 in 32 dims, well separated
  TaskSpec spec;
  spec.way = 5;
  spec.shot = 5;
  spec.query_per_class = 15;
  spec.input_dim = 32;

  // Identity encoder: scores come from raw input distances.
  ModelSpec mspec;
  mspec.encoder = EncoderSpec::mlp({32, 32}, {}, {0});
  mspec.encoder.activations = {Activation::Identity};
  mspec.encoder.use_bias = false;
  MetaParams params = init_meta_params(mspec, std::nullopt, 1);
  params.encoder[0].weight = Tensor::identity(32, Precision::Double);

  int hits = 0, total = 0;
  Rng rng(7);
  for (int e = 0; e < 20; ++e) {
    const Episode ep = sample_episode(family, spec, Split::Train, rng);
    const Tensor scores = prototype_relation_scores(ep, params);
    for (int r = 0; r < scores.dim(0); ++r) {
      int best = 0;
      for (int c = 1; c < scores.dim(1); ++c) {
        if (scores.at(r, c) > scores.at(r, best)) best = c;
      }
      hits += (best == ep.query_y[r]);
      ++total;
    }
  }
  CHECK(static_cast<double>(hits) / total > 0.8);
}

TEST_CASE("regression queries are scored with the mean support target") {
  Episode ep;
  ep.classification = false;
  ep.way = 1;
  ep.support_x = Tensor::zeros({3, 1});
  ep.query_x = Tensor::zeros({2, 1});
  ep.support_t = Tensor::from_vector({3, 1}, {1.0, 2.0, 6.0});
  ep.query_t = Tensor::zeros({2, 1});

  ModelSpec mspec;
  mspec.encoder = EncoderSpec::mlp({1, 2}, {}, {0});
  mspec.classification = false;
  mspec.way = 1;
  const MetaParams params = init_meta_params(mspec, std::nullopt, 1);

  const MeanTargetEmbedder embedder;
  const Tensor scores = embedder.relation_scores(ep, params);
  REQUIRE(scores.shape() == std::vector<int>{2, 1});
  CHECK(scores.at(0, 0) == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(scores.at(1, 0) == doctest::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("zero-step pre-training reproduces the seeded initialization") {
  const ClusterFamily family = tiny_clusters();
  const EncoderSpec enc = EncoderSpec::mlp({8, 16, 8}, {1}, {1});

  PretrainConfig pc;
  pc.steps = 0;
  pc.seed = 12;
  const PretrainResult result = pretrain_encoder(family, enc, pc);

  ModelSpec mspec;
  mspec.encoder = enc;
  mspec.way = 2;
  const MetaParams fresh = init_meta_params(mspec, std::nullopt, 12);
  REQUIRE(result.encoder.size() == fresh.encoder.size());
  for (size_t l = 0; l < fresh.encoder.size(); ++l) {
    CHECK(tensors_equal(result.encoder[l].weight, fresh.encoder[l].weight));
    CHECK(tensors_equal(result.encoder[l].bias, fresh.encoder[l].bias));
  }
}

TEST_CASE("pre-training lifts class accuracy well above chance") {
  const ClusterFamily family = tiny_clusters();
  const EncoderSpec enc = EncoderSpec::mlp({8, 16, 8}, {1}, {1});

  PretrainConfig pc;
  pc.steps = 0;
  pc.batch = 32;
  pc.seed = 12;
  const double untrained = pretrain_encoder(family, enc, pc).train_accuracy;

  pc.steps = 200;
  const PretrainResult trained = pretrain_encoder(family, enc, pc);
  CHECK(trained.train_accuracy > 0.5);  // chance is 1/6
  CHECK(trained.train_accuracy > untrained);

  ModelSpec mspec;
  mspec.encoder = enc;
  mspec.way = 2;
  const MetaParams fresh = init_meta_params(mspec, std::nullopt, 12);
  CHECK_FALSE(
      tensors_equal(trained.encoder[0].weight, fresh.encoder[0].weight));

  CHECK_THROWS_AS(
      pretrain_encoder(family, EncoderSpec::mlp({9, 8}, {}, {}), pc),
      ConfigError);
}
