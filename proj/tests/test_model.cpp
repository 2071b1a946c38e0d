#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <set>

#include "doctest.h"
#include "metalearn/model.hpp"

using namespace metalearn;

namespace {

ModelSpec small_spec() {
  ModelSpec spec;
  spec.encoder = EncoderSpec::mlp({6, 8, 4}, {1}, {1});
  spec.classification = true;
  spec.way = 3;
  return spec;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(a.at(i) - b.at(i)));
  }
  return m;
}

}  // namespace

TEST_CASE("mlp helper lays out layers and accessors answer") {
  EncoderSpec e = EncoderSpec::mlp({6, 8, 4}, {1}, {1});
  CHECK(e.layers() == 2);
  CHECK(e.input_dim() == 6);
  CHECK(e.feature_dim() == 4);
  CHECK(e.layer_dims[0] == std::pair<int, int>{6, 8});
  CHECK(e.layer_dims[1] == std::pair<int, int>{8, 4});
  CHECK_FALSE(e.is_warped(0));
  CHECK(e.is_warped(1));
  CHECK_FALSE(e.is_adapted(0));
  CHECK(e.is_adapted(1));
  CHECK(e.activation(0) == Activation::Relu);
  e.validate();
}

TEST_CASE("spec validation rejects inconsistent layouts") {
  // Warped / adapted indices out of range, too few dims.
  CHECK_THROWS_AS(EncoderSpec::mlp({6, 8, 4}, {2}, {1}), ConfigError);
  CHECK_THROWS_AS(EncoderSpec::mlp({6, 8, 4}, {1}, {5}), ConfigError);
  CHECK_THROWS_AS(EncoderSpec::mlp({6}, {}, {}), ConfigError);

  EncoderSpec chain = EncoderSpec::mlp({6, 8, 4}, {}, {});
  chain.layer_dims[1].first = 7;  // breaks the 8 -> 7 chain
  CHECK_THROWS_AS(chain.validate(), ConfigError);

  EncoderSpec acts = EncoderSpec::mlp({6, 8, 4}, {}, {});
  acts.activations = {Activation::Relu};
  CHECK_THROWS_AS(acts.validate(), ConfigError);

  ModelSpec m = small_spec();
  m.way = 1;
  CHECK_THROWS_AS(m.validate(), ConfigError);  // classification needs >= 2

  ModelSpec reg = small_spec();
  reg.classification = false;
  reg.way = 1;
  reg.validate();
  CHECK(reg.loss_in() == 3);
}

TEST_CASE("loss net sizing follows the task interface") {
  ModelSpec m = small_spec();
  CHECK(m.loss_in() == 2 * 3 + 1);
  CHECK(m.adapted_layer_count() == 2);  // adapted encoder layer + head
  CHECK(m.reg_in() == 8);
}

TEST_CASE("initialization: identity warps, sized head, small generators") {
  const ModelSpec spec = small_spec();
  MetaParams p = init_meta_params(spec, std::nullopt, 3);

  REQUIRE(p.warp.count(1) == 1);
  CHECK(max_abs_diff(p.warp.at(1), Tensor::identity(4)) == 0.0);
  CHECK(p.head.shape() == std::vector<int>{4, 1});
  CHECK(p.encoder.size() == 2);
  CHECK(p.encoder[0].weight.shape() == std::vector<int>{6, 8});
  CHECK(p.encoder[0].bias.shape() == std::vector<int>{1, 8});
  CHECK(p.diag_lr.empty());

  // Loss-net and FiLM weights are N(0, 0.01) draws; pool them and check the
  // sample variance.
  double sum = 0.0, sq = 0.0;
  std::int64_t n = 0;
  for (const ParamEntry& e : param_entries(p)) {
    if (e.group != ParamGroup::Phi && e.group != ParamGroup::Psi) continue;
    for (std::int64_t i = 0; i < e.tensor->size(); ++i) {
      sum += e.tensor->at(i);
      sq += e.tensor->at(i) * e.tensor->at(i);
      ++n;
    }
  }
  REQUIRE(n > 5000);
  const double mean = sum / n;
  const double var = sq / n - mean * mean;
  CHECK(std::abs(mean) < 0.01);
  CHECK(var == doctest::Approx(0.01).epsilon(0.2));
}

TEST_CASE("same seed, same parameters; different seed, different") {
  const ModelSpec spec = small_spec();
  MetaParams a = init_meta_params(spec, std::nullopt, 11);
  MetaParams b = init_meta_params(spec, std::nullopt, 11);
  MetaParams c = init_meta_params(spec, std::nullopt, 12);

  auto ea = param_entries(a), eb = param_entries(b), ec = param_entries(c);
  REQUIRE(ea.size() == eb.size());
  bool any_differ = false;
  for (size_t i = 0; i < ea.size(); ++i) {
    CHECK(max_abs_diff(*ea[i].tensor, *eb[i].tensor) == 0.0);
    if (max_abs_diff(*ea[i].tensor, *ec[i].tensor) > 0.0) any_differ = true;
  }
  CHECK(any_differ);
}

TEST_CASE("a pretrained encoder is kept verbatim") {
  const ModelSpec spec = small_spec();
  MetaParams donor = init_meta_params(spec, std::nullopt, 40);
  MetaParams p = init_meta_params(spec, donor.encoder, 41);
  for (size_t l = 0; l < donor.encoder.size(); ++l) {
    CHECK(max_abs_diff(p.encoder[l].weight, donor.encoder[l].weight) == 0.0);
    CHECK(max_abs_diff(p.encoder[l].bias, donor.encoder[l].bias) == 0.0);
  }
  // Head and generators still come from the new seed.
  MetaParams q = init_meta_params(spec, donor.encoder, 41);
  CHECK(max_abs_diff(p.head, q.head) == 0.0);
}

TEST_CASE("param entry walk: names, groups, storage identity") {
  const ModelSpec spec = small_spec();
  MetaParams p = init_meta_params(spec, std::nullopt, 5);
  const std::vector<ParamEntry> entries = param_entries(p);

  std::set<std::string> names;
  for (const ParamEntry& e : entries) names.insert(e.name);
  CHECK(names.size() == entries.size());  // unique
  CHECK(names.count("encoder.0.weight") == 1);
  CHECK(names.count("encoder.1.weight") == 1);
  CHECK(names.count("head") == 1);
  CHECK(names.count("warp.1") == 1);
  CHECK(names.count("film.1.weight") == 1);
  CHECK(names.count("support_net.linear.0.weight") == 1);
  CHECK(names.count("query_net.film.1.bias") == 1);
  CHECK(names.count("reg_net.linear.2.bias") == 1);

  for (const ParamEntry& e : entries) {
    // Frozen encoder layers are the non-adapted ones.
    if (e.name.rfind("encoder.0.", 0) == 0) CHECK_FALSE(e.trainable);
    if (e.name.rfind("encoder.1.", 0) == 0) CHECK(e.trainable);
    if (e.name == "head") CHECK(e.group == ParamGroup::Theta);
    if (e.name.rfind("warp.", 0) == 0) CHECK(e.group == ParamGroup::Omega);
    if (e.name.rfind("support_net.linear.", 0) == 0) {
      CHECK(e.group == ParamGroup::Phi);
    }
    if (e.name.rfind("film.", 0) == 0) CHECK(e.group == ParamGroup::Psi);
  }
}

TEST_CASE("lifted vars line up with param entries one to one") {
  const ModelSpec spec = small_spec();
  MetaParams p = init_meta_params(spec, std::nullopt, 6);
  const std::vector<ParamEntry> entries = param_entries(p);

  Tape tape;
  ModelVars vars = lift(p, tape);
  std::vector<Var*> lifted = var_entries(vars);
  REQUIRE(lifted.size() == entries.size());
  for (size_t i = 0; i < entries.size(); ++i) {
    // lift() shares tensor storage, so the pointers must agree.
    CHECK(lifted[i]->value.data() == entries[i].tensor->data());
    CHECK(lifted[i]->on_tape() == entries[i].trainable);
  }
}

TEST_CASE("diagonal learning rates mirror the adapted tensors") {
  const ModelSpec spec = small_spec();
  MetaParams p = init_meta_params(spec, std::nullopt, 7);
  enable_diagonal_lr(p, 0.25);
  REQUIRE_FALSE(p.diag_lr.empty());
  // One rate tensor per adapted tensor: layer-1 weight, bias, head.
  CHECK(p.diag_lr.size() == 3);
  for (const Tensor& t : p.diag_lr) {
    for (std::int64_t i = 0; i < t.size(); ++i) CHECK(t.at(i) == 0.25);
  }
  CHECK(p.diag_lr[0].shape() == p.encoder[1].weight.shape());
  CHECK(p.diag_lr[2].shape() == p.head.shape());

  bool found = false;
  for (const ParamEntry& e : param_entries(p)) {
    if (e.name == "diag_lr.0") {
      CHECK(e.group == ParamGroup::Omega);
      CHECK(e.trainable);
      found = true;
    }
  }
  CHECK(found);
}

TEST_CASE("film with a zero generator is the identity") {
  Tape tape;
  Rng rng(9);
  Var x = make_leaf(tape, Tensor::randn({5, 4}, rng));
  VarFilm gen;
  gen.weight = constant(Tensor::zeros({4, 8}));
  gen.bias = constant(Tensor::zeros({1, 8}));
  Var y = film(x, gen);
  CHECK(max_abs_diff(y.value, x.value) == 0.0);
}

TEST_CASE("film applies generated scale and shift") {
  // Bias-only generator: gamma = g, beta = b constants for every row.
  Tape tape;
  Var x = make_leaf(tape, Tensor::from_vector({1, 2}, {2.0, -3.0}));
  VarFilm gen;
  gen.weight = constant(Tensor::zeros({2, 4}));
  Tensor bias = Tensor::from_vector({1, 4}, {0.5, -1.0, 10.0, 0.25});
  gen.bias = constant(bias);
  Var y = film(x, gen);
  // (gamma + 1) * x + beta with gamma = (0.5, -1), beta = (10, 0.25).
  CHECK(y.value.at(0, 0) == doctest::Approx(1.5 * 2.0 + 10.0));
  CHECK(y.value.at(0, 1) == doctest::Approx(0.0 * -3.0 + 0.25));
}

TEST_CASE("expand_head duplicates the vector into identical columns") {
  Tape tape;
  Var head = make_leaf(tape, Tensor::from_vector({2, 1}, {1.0, 2.0}));
  Var wide = expand_head(head, 3);
  REQUIRE(wide.value.shape() == std::vector<int>{2, 3});
  for (int c = 0; c < 3; ++c) {
    CHECK(wide.value.at(0, c) == 1.0);
    CHECK(wide.value.at(1, c) == 2.0);
  }
}

TEST_CASE("initial_theta expands the head only for multi-way tasks") {
  const ModelSpec spec = small_spec();
  MetaParams p = init_meta_params(spec, std::nullopt, 8);
  Tape tape;
  ModelVars vars = lift(p, tape);

  ThetaState multi = initial_theta(vars, 3);
  CHECK(multi.head.value.shape() == std::vector<int>{4, 3});
  CHECK(multi.layer_ids == std::vector<int>{1});

  ThetaState single = initial_theta(vars, 1);
  CHECK(single.head.value.shape() == std::vector<int>{4, 1});
}

TEST_CASE("theta flattening round trips") {
  const ModelSpec spec = small_spec();
  MetaParams p = init_meta_params(spec, std::nullopt, 13);
  Tape tape;
  ModelVars vars = lift(p, tape);
  ThetaState theta = initial_theta(vars, 3);

  std::vector<Var> flat = theta.flat(true);
  REQUIRE(flat.size() == 3);  // layer-1 weight, bias, head
  std::vector<Var> doubled;
  for (const Var& v : flat) doubled.push_back(scale(v, 2.0));
  theta.assign_flat(doubled, true);
  CHECK(max_abs_diff(theta.layers[0].weight.value,
                     doubled[0].value) == 0.0);
  CHECK(max_abs_diff(theta.head.value, doubled[2].value) == 0.0);

  std::vector<Var> no_bias = theta.flat(false);
  CHECK(no_bias.size() == 2);
}

TEST_CASE("identity warp changes nothing in the forward pass") {
  const ModelSpec spec = small_spec();
  MetaParams p = init_meta_params(spec, std::nullopt, 15);
  Tape tape;
  ModelVars vars = lift(p, tape);
  ThetaState theta = initial_theta(vars, 3);
  Rng rng(2);
  const Tensor x = Tensor::randn({7, 6}, rng);

  Var warped = forward(vars, theta, constant(x), {true, false});
  Var plain = forward(vars, theta, constant(x), {false, false});
  CHECK(max_abs_diff(warped.value, plain.value) <= 1e-12);
}

TEST_CASE("plain encoder pass matches the lifted one without warp or film") {
  const ModelSpec spec = small_spec();
  MetaParams p = init_meta_params(spec, std::nullopt, 16);
  Tape tape;
  ModelVars vars = lift(p, tape);
  ThetaState theta = initial_theta(vars, 3);
  Rng rng(3);
  const Tensor x = Tensor::randn({5, 6}, rng);

  const Tensor lifted = encode(vars, theta, constant(x), {false, false}).value;
  const Tensor plain = encode_plain(p, x);
  CHECK(max_abs_diff(lifted, plain) <= 1e-10);
  CHECK_THROWS_AS(encode_plain(p, Tensor::zeros({5, 7})), ShapeError);
}

TEST_CASE("tanh encoder agrees between lifted and plain passes") {
  ModelSpec spec = small_spec();
  spec.encoder.activations = {Activation::Tanh, Activation::Tanh};
  MetaParams p = init_meta_params(spec, std::nullopt, 17);
  Tape tape;
  ModelVars vars = lift(p, tape);
  ThetaState theta = initial_theta(vars, 3);
  Rng rng(4);
  const Tensor x = Tensor::randn({5, 6}, rng);

  const Tensor lifted = encode(vars, theta, constant(x), {false, false}).value;
  const Tensor plain = encode_plain(p, x);
  CHECK(max_abs_diff(lifted, plain) <= 1e-10);
  for (std::int64_t i = 0; i < lifted.size(); ++i) {
    CHECK(std::abs(lifted.at(i)) <= 1.0);
  }
}
