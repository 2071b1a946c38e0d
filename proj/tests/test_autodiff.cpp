#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <functional>
#include <vector>

#include "doctest.h"
#include "metalearn/tape.hpp"
#include "metalearn/var.hpp"

using namespace metalearn;

namespace {

using Builder = std::function<Var(const std::vector<Var>&)>;

double eval_scalar(const Builder& f, const std::vector<Tensor>& xs) {
  Tape tape;
  std::vector<Var> leaves;
  leaves.reserve(xs.size());
  for (const Tensor& t : xs) leaves.push_back(make_leaf(tape, t));
  return f(leaves).value.item();
}

// Central finite differences over every coordinate of every input.
void check_gradients(const Builder& f, std::vector<Tensor> xs) {
  Tape tape;
  std::vector<Var> leaves;
  for (const Tensor& t : xs) leaves.push_back(make_leaf(tape, t));
  const std::vector<Var> gs = grad(f(leaves), leaves);

  const double eps = 1e-5;
  for (size_t i = 0; i < xs.size(); ++i) {
    REQUIRE(gs[i].value.shape() == xs[i].shape());
    for (std::int64_t k = 0; k < xs[i].size(); ++k) {
      const double orig = xs[i].at(k);
      xs[i].mutable_data()[k] = orig + eps;
      const double fp = eval_scalar(f, xs);
      xs[i].mutable_data()[k] = orig - eps;
      const double fm = eval_scalar(f, xs);
      xs[i].mutable_data()[k] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double analytic = gs[i].value.at(k);
      const double tol =
          1e-6 + 1e-4 * std::max(std::abs(analytic), std::abs(numeric));
      CHECK(std::abs(analytic - numeric) <= tol);
    }
  }
}

// Random values pushed away from the relu/abs kinks so finite differences
// stay on one side.
Tensor smooth_randn(std::vector<int> shape, Rng& rng) {
  Tensor t = Tensor::randn(std::move(shape), rng);
  double* d = t.mutable_data();
  for (std::int64_t i = 0; i < t.size(); ++i) {
    d[i] += d[i] >= 0.0 ? 0.05 : -0.05;
  }
  return t;
}

}  // namespace

TEST_CASE("gradients agree with finite differences across the op set") {
  // Each builder exercises a different op mix; shapes vary per trial.
  std::vector<std::pair<const char*, std::function<void(Rng&, int, int, int)>>>
      trials;

  auto add_trial = [&](const char* name,
                       std::function<void(Rng&, int, int, int)> fn) {
    trials.emplace_back(name, std::move(fn));
  };

  add_trial("matmul-sum", [](Rng& rng, int m, int k, int n) {
    check_gradients(
        [](const std::vector<Var>& v) { return sum_all(matmul(v[0], v[1])); },
        {smooth_randn({m, k}, rng), smooth_randn({k, n}, rng)});
  });
  add_trial("elementwise-product-difference", [](Rng& rng, int m, int k, int) {
    check_gradients(
        [](const std::vector<Var>& v) {
          return mean_all(mul(add(v[0], v[1]), sub(v[0], v[1])));
        },
        {smooth_randn({m, k}, rng), smooth_randn({m, k}, rng)});
  });
  add_trial("safe-divide", [](Rng& rng, int m, int k, int) {
    check_gradients(
        [](const std::vector<Var>& v) {
          return sum_all(divide(v[0], add_scalar(abs(v[1]), 1.0)));
        },
        {smooth_randn({m, k}, rng), smooth_randn({m, k}, rng)});
  });
  add_trial("relu-matmul-transpose", [](Rng& rng, int m, int k, int n) {
    check_gradients(
        [](const std::vector<Var>& v) {
          return sum_all(relu(matmul(v[0], transpose(v[1]))));
        },
        {smooth_randn({m, k}, rng), smooth_randn({n, k}, rng)});
  });
  add_trial("leaky-relu-square", [](Rng& rng, int m, int k, int) {
    check_gradients(
        [](const std::vector<Var>& v) {
          return mean_all(square(leaky_relu(v[0], 0.1)));
        },
        {smooth_randn({m, k}, rng)});
  });
  add_trial("log-offset-abs", [](Rng& rng, int m, int k, int) {
    check_gradients(
        [](const std::vector<Var>& v) {
          return sum_all(log(add_scalar(abs(v[0]), 0.5)));
        },
        {smooth_randn({m, k}, rng)});
  });
  add_trial("sqrt-of-square", [](Rng& rng, int m, int k, int) {
    check_gradients(
        [](const std::vector<Var>& v) {
          return sum_all(sqrt(add_scalar(square(v[0]), 0.3)));
        },
        {smooth_randn({m, k}, rng)});
  });
  add_trial("exp-scale", [](Rng& rng, int m, int k, int) {
    check_gradients(
        [](const std::vector<Var>& v) {
          return sum_all(exp(scale(v[0], 0.3)));
        },
        {smooth_randn({m, k}, rng)});
  });
  add_trial("softmax-weighted", [](Rng& rng, int m, int k, int) {
    check_gradients(
        [](const std::vector<Var>& v) {
          return sum_all(mul(softmax(v[0], 1), v[1]));
        },
        {smooth_randn({m, k + 1}, rng), smooth_randn({m, k + 1}, rng)});
  });
  add_trial("log-softmax-weighted", [](Rng& rng, int m, int k, int) {
    check_gradients(
        [](const std::vector<Var>& v) {
          return sum_all(mul(log_softmax(v[0], 1), v[1]));
        },
        {smooth_randn({m, k + 1}, rng), smooth_randn({m, k + 1}, rng)});
  });
  add_trial("slice-concat-pad", [](Rng& rng, int m, int, int) {
    check_gradients(
        [](const std::vector<Var>& v) {
          Var left = slice(v[0], 1, 0, 2);
          Var right = scale(slice(v[0], 1, 2, 2), 2.0);
          Var glued = concat({left, right}, 1);
          return sum_all(mul(glued, pad_slice(slice(v[0], 1, 1, 1), 1, 3, 4)));
        },
        {smooth_randn({m, 4}, rng)});
  });
  add_trial("expand-column", [](Rng& rng, int m, int, int n) {
    check_gradients(
        [n](const std::vector<Var>& v) {
          return sum_all(mul(expand(v[0], 1, n), v[1]));
        },
        {smooth_randn({m, 1}, rng), smooth_randn({m, n}, rng)});
  });
  add_trial("spread-mean", [](Rng& rng, int m, int k, int) {
    check_gradients(
        [m, k](const std::vector<Var>& v) {
          return sum_all(mul(spread(mean_all(v[0]), {m, k}), v[1]));
        },
        {smooth_randn({m, k}, rng), smooth_randn({m, k}, rng)});
  });
  add_trial("axis-reductions", [](Rng& rng, int m, int k, int) {
    check_gradients(
        [](const std::vector<Var>& v) {
          return add(sum_all(square(sum(v[0], 0))),
                     sum_all(square(mean(v[0], 1))));
        },
        {smooth_randn({m, k}, rng)});
  });
  add_trial("reshape-dot", [](Rng& rng, int m, int k, int) {
    check_gradients(
        [m, k](const std::vector<Var>& v) {
          return sum_all(
              mul(reshape(v[0], {m * k}), reshape(v[1], {m * k})));
        },
        {smooth_randn({m, k}, rng), smooth_randn({m, k}, rng)});
  });
  add_trial("two-layer-net", [](Rng& rng, int m, int k, int n) {
    check_gradients(
        [m](const std::vector<Var>& v) {
          Var h = relu(add(matmul(v[0], v[1]), expand(v[2], 0, m)));
          return mean_all(square(matmul(h, v[3])));
        },
        {smooth_randn({m, k}, rng), smooth_randn({k, n}, rng),
         smooth_randn({1, n}, rng), smooth_randn({n, 1}, rng)});
  });
  add_trial("shared-operand-fanout", [](Rng& rng, int m, int k, int) {
    check_gradients(
        [](const std::vector<Var>& v) {
          return add(sum_all(mul(v[0], v[0])),
                     sum_all(matmul(transpose(v[0]), v[0])));
        },
        {smooth_randn({m, k}, rng)});
  });
  add_trial("tanh-chain", [](Rng& rng, int m, int k, int n) {
    check_gradients(
        [](const std::vector<Var>& v) {
          return sum_all(square(tanh(matmul(v[0], v[1]))));
        },
        {smooth_randn({m, k}, rng), smooth_randn({k, n}, rng)});
  });

  Rng rng(20240901);
  int executed = 0;
  for (int trial = 0; trial < 102; ++trial) {
    const auto& [name, fn] = trials[trial % trials.size()];
    INFO("trial ", trial, ": ", name);
    const int m = rng.uniform_int(1, 4);
    const int k = rng.uniform_int(1, 4);
    const int n = rng.uniform_int(1, 4);
    fn(rng, m, k, n);
    ++executed;
  }
  CHECK(executed >= 100);
}

TEST_CASE("backward of backward gives exact Hessian-vector products") {
  // f(x) = (x.x)^2, so H = 8 x x^T + 4 (x.x) I.
  Rng rng(42);
  const Tensor x0 = Tensor::randn({3, 1}, rng);
  const Tensor v0 = Tensor::randn({3, 1}, rng);

  Tape tape;
  Var x = make_leaf(tape, x0);
  Var sq = sum_all(square(x));
  Var f = square(sq);
  Var g = grad(f, {x}, true)[0];
  Var hv = grad(sum_all(mul(g, constant(v0))), {x})[0];

  double dot = 0.0;
  for (int i = 0; i < 3; ++i) dot += x0.at(i, 0) * x0.at(i, 0);
  for (int i = 0; i < 3; ++i) {
    double xv = 0.0;
    for (int j = 0; j < 3; ++j) xv += x0.at(j, 0) * v0.at(j, 0);
    const double want = 8.0 * x0.at(i, 0) * xv + 4.0 * dot * v0.at(i, 0);
    CHECK(hv.value.at(i, 0) == doctest::Approx(want).epsilon(1e-9));
  }

  // First derivative too: 4 (x.x) x.
  for (int i = 0; i < 3; ++i) {
    CHECK(g.value.at(i, 0) ==
          doctest::Approx(4.0 * dot * x0.at(i, 0)).epsilon(1e-12));
  }
}

TEST_CASE("tanh backward is retraceable to second order") {
  // f(x) = sum tanh(x): grad 1 - t^2, diagonal Hessian -2 t (1 - t^2).
  Rng rng(43);
  const Tensor x0 = Tensor::randn({4, 1}, rng);
  const Tensor v0 = Tensor::randn({4, 1}, rng);

  Tape tape;
  Var x = make_leaf(tape, x0);
  Var f = sum_all(tanh(x));
  Var g = grad(f, {x}, true)[0];
  Var hv = grad(sum_all(mul(g, constant(v0))), {x})[0];

  for (int i = 0; i < 4; ++i) {
    const double t = std::tanh(x0.at(i, 0));
    CHECK(g.value.at(i, 0) == doctest::Approx(1.0 - t * t).epsilon(1e-12));
    const double want = -2.0 * t * (1.0 - t * t) * v0.at(i, 0);
    CHECK(hv.value.at(i, 0) == doctest::Approx(want).epsilon(1e-9));
  }
}

TEST_CASE("replaying any node reproduces its stored value bitwise") {
  Rng rng(77);
  Tape tape;
  Var x = make_leaf(tape, Tensor::randn({3, 4}, rng));
  Var w = make_leaf(tape, Tensor::randn({4, 5}, rng));
  Var b = make_leaf(tape, Tensor::randn({1, 5}, rng));
  Var h = relu(add(matmul(x, w), expand(b, 0, 3)));
  Var y = mean_all(mul(softmax(h, 1), log_softmax(h, 1)));
  (void)grad(y, {x, w, b}, true);

  for (int i = 0; i < tape.size(); ++i) {
    const Tensor replay = tape.recompute(i);
    const Tensor& stored = tape.node(i).value;
    REQUIRE(replay.shape() == stored.shape());
    for (std::int64_t k = 0; k < stored.size(); ++k) {
      CHECK(replay.at(k) == stored.at(k));
    }
  }
}

TEST_CASE("plain backward records nothing, create_graph records") {
  Rng rng(5);
  Tape tape;
  Var x = make_leaf(tape, Tensor::randn({2, 3}, rng));
  Var y = sum_all(square(x));
  const int before = tape.size();

  (void)grad(y, {x});
  CHECK(tape.size() == before);

  Var g = grad(y, {x}, true)[0];
  CHECK(tape.size() > before);
  CHECK(g.on_tape());
}

TEST_CASE("softmax rows are distributions and shift invariant") {
  Rng rng(8);
  Tape tape;
  Var x = make_leaf(tape, Tensor::randn({6, 9}, rng));
  Tensor s = softmax(x, 1).value;
  for (int i = 0; i < 6; ++i) {
    double row = 0.0;
    for (int j = 0; j < 9; ++j) {
      CHECK(s.at(i, j) > 0.0);
      row += s.at(i, j);
    }
    CHECK(row == doctest::Approx(1.0).epsilon(1e-12));
  }

  Tensor shifted = softmax(add_scalar(x, 123.5), 1).value;
  for (std::int64_t k = 0; k < s.size(); ++k) {
    CHECK(shifted.at(k) == doctest::Approx(s.at(k)).epsilon(1e-12));
  }

  Tensor ls = log_softmax(x, 1).value;
  for (std::int64_t k = 0; k < s.size(); ++k) {
    CHECK(ls.at(k) == doctest::Approx(std::log(s.at(k))).epsilon(1e-9));
  }
}

TEST_CASE("detach blocks gradient flow") {
  Tape tape;
  Var x = make_leaf(tape, Tensor::from_vector({2}, {3.0, -2.0}));
  Var d = detach(x);
  CHECK_FALSE(d.on_tape());

  // y = detach(x) . x, so dy/dx is the detached value, not 2x.
  Var y = sum_all(mul(d, x));
  Tensor g = grad(y, {x})[0].value;
  CHECK(g.at(0) == 3.0);
  CHECK(g.at(1) == -2.0);
}

TEST_CASE("no-grad scopes produce constants") {
  Tape tape;
  Var x = make_leaf(tape, Tensor::from_vector({2}, {1.0, 2.0}));
  {
    NoGradGuard guard;
    Var y = square(x);
    CHECK_FALSE(y.on_tape());
    CHECK(y.value.at(1) == 4.0);
  }
  CHECK(square(x).on_tape());
}

TEST_CASE("autodiff misuse throws tape errors") {
  Tape tape, other;
  Var x = make_leaf(tape, Tensor::from_vector({2}, {1.0, 2.0}));
  Var z = make_leaf(other, Tensor::from_vector({2}, {1.0, 2.0}));

  CHECK_THROWS_AS(add(x, z), TapeError);                    // mixed tapes
  CHECK_THROWS_AS(grad(sum_all(square(x)), {z}), TapeError);
  CHECK_THROWS_AS(grad(constant(Tensor::scalar(1.0)), {x}), TapeError);
  CHECK_THROWS_AS(grad(square(x), {x}), TapeError);         // non-scalar
}

TEST_CASE("shape and domain violations throw") {
  Tape tape;
  Var a = make_leaf(tape, Tensor::zeros({2, 3}));
  Var b = make_leaf(tape, Tensor::zeros({3, 2}));
  CHECK_THROWS_AS(add(a, b), ShapeError);
  CHECK_THROWS_AS(matmul(a, a), ShapeError);
  CHECK_THROWS_AS(reshape(a, {4, 2}), ShapeError);
  CHECK_THROWS_AS(slice(a, 1, 2, 5), ShapeError);
  CHECK_THROWS_AS(expand(a, 1, 4), ShapeError);  // axis extent is not 1

  Var ones = make_leaf(tape, Tensor::full({2}, 1.0));
  Var zero = make_leaf(tape, Tensor::zeros({2}));
  Var neg = make_leaf(tape, Tensor::full({2}, -1.0));
  CHECK_THROWS_AS(divide(ones, zero), DomainError);
  CHECK_THROWS_AS(log(neg), DomainError);
  CHECK_THROWS_AS(sqrt(neg), DomainError);
}

TEST_CASE("one_hot and row_argmax") {
  Tensor oh = one_hot({0, 2, 1}, 3);
  CHECK(oh.rows() == 3);
  CHECK(oh.cols() == 3);
  CHECK(oh.at(0, 0) == 1.0);
  CHECK(oh.at(1, 2) == 1.0);
  CHECK(oh.at(2, 1) == 1.0);
  double total = 0.0;
  for (std::int64_t k = 0; k < oh.size(); ++k) total += oh.at(k);
  CHECK(total == 3.0);
  CHECK_THROWS_AS(one_hot({3}, 3), DomainError);
  CHECK_THROWS_AS(one_hot({-1}, 3), DomainError);

  Tensor m = Tensor::from_vector({2, 3}, {0.1, 0.9, 0.3, 2.0, -1.0, 0.5});
  const std::vector<int> am = row_argmax(m);
  CHECK(am == std::vector<int>{1, 0});
}

TEST_CASE("single precision rounds op results but not element moves") {
  const double stored = static_cast<double>(static_cast<float>(0.1));
  Tape tape;
  Var x = make_leaf(tape, Tensor::full({2, 2}, 0.1, Precision::Single));
  CHECK(x.value.at(0, 0) == stored);
  // Moves and duplications keep bits exactly.
  CHECK(transpose(x).value.at(0, 0) == stored);
  CHECK(reshape(x, {4}).value.at(0) == stored);
  CHECK(slice(x, 0, 0, 1).value.at(0, 0) == stored);

  // Arithmetic rounds its double result through float.
  const double exact = stored * stored;
  const double rounded = static_cast<double>(static_cast<float>(exact));
  REQUIRE(exact != rounded);
  Var prod = mul(x, x);
  CHECK(prod.value.precision() == Precision::Single);
  CHECK(prod.value.at(0, 0) == rounded);

  // Mixed-precision arithmetic promotes to double and stops rounding.
  Var d = make_leaf(tape, Tensor::full({2, 2}, 0.1));
  Var mixed = mul(x, d);
  CHECK(mixed.value.precision() == Precision::Double);
  CHECK(mixed.value.at(0, 0) == stored * 0.1);
}
