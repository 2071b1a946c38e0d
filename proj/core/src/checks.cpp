#include "metalearn/checks.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <thread>

#include "metalearn/experiment.hpp"

namespace metalearn {
namespace {

struct Timer {
  std::chrono::steady_clock::time_point start =
      std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                         start)
        .count();
  }
};

int check_workers() {
  const unsigned hw = std::thread::hardware_concurrency();
  return static_cast<int>(std::clamp(hw, 1u, 8u));
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(3) << std::scientific << v;
  return os.str();
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  }
  return m;
}

// Hand-rolled dense kernels, deliberately independent of the tape's.
Tensor hmat(const Tensor& a, const Tensor& b) {
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += a.at(i, p) * b.at(p, j);
      out.mutable_data()[static_cast<std::int64_t>(i) * n + j] = acc;
    }
  }
  return out;
}

Tensor hmat_nt(const Tensor& a, const Tensor& b) {  // a @ b^T
  const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  Tensor out = Tensor::zeros({m, n});
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += a.at(i, p) * b.at(j, p);
      out.mutable_data()[static_cast<std::int64_t>(i) * n + j] = acc;
    }
  }
  return out;
}

Tensor hmat_tn(const Tensor& a, const Tensor& b) {  // a^T @ b
  const int m = a.dim(1), k = a.dim(0), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += a.at(p, i) * b.at(p, j);
      out.mutable_data()[static_cast<std::int64_t>(i) * n + j] = acc;
    }
  }
  return out;
}

Tensor taxpy(double c, const Tensor& x, const Tensor& y) {  // c*x + y
  Tensor out = y;
  double* o = out.mutable_data();
  for (std::int64_t i = 0; i < x.size(); ++i) o[i] += c * x.data()[i];
  return out;
}

Tensor tscale(const Tensor& x, double c) {
  Tensor out = x;
  double* o = out.mutable_data();
  for (std::int64_t i = 0; i < x.size(); ++i) o[i] *= c;
  return out;
}

class FixedEmbedder : public Embedder {
 public:
  explicit FixedEmbedder(Tensor scores) : scores_(std::move(scores)) {}
  Tensor relation_scores(const Episode&, const MetaParams&) const override {
    return scores_;
  }

 private:
  Tensor scores_;
};

Episode sample_with_seed(const TaskFamily& family, const TaskSpec& spec,
                         Split split, std::uint64_t seed) {
  Rng rng(seed);
  Episode ep = sample_episode(family, spec, split, rng);
  ep.seed = seed;
  return ep;
}

// ---------------------------------------------------------------------------
// 1. Meta-gradients of the mean final query loss against central finite
//    differences, on a frozen tiny instance covering every parameter group.

CheckResult check_meta_gradient_oracle() {
  CheckResult r{"meta-gradient-finite-difference-oracle", false, ""};
  Timer timer;

  ClusterFamily::Config fc;
  fc.dim = 4;
  fc.classes_train = 8;
  fc.classes_val = 4;
  fc.classes_test = 4;
  fc.radius = 4.0;
  fc.seed = 3;
  const ClusterFamily family(fc);
  TaskSpec tspec;
  tspec.way = 2;
  tspec.shot = 1;
  tspec.query_per_class = 15;
  tspec.input_dim = 4;

  ModelSpec mspec;
  mspec.encoder = EncoderSpec::mlp({4, 8, 4}, {1}, {1});
  mspec.classification = true;
  mspec.way = 2;
  MetaParams params = init_meta_params(mspec, std::nullopt, 21);

  const Episode ep = sample_with_seed(family, tspec, Split::Train,
                                      derive_seed(21, kTagTrain, 0));
  InnerConfig inner;
  inner.alpha = 0.01;
  inner.steps = 2;
  inner.momentum = 0.0;
  inner.weight_decay = 0.0;
  inner.flags = VariantFlags::all();

  // The relation scores are an input of the instance, held fixed so the
  // numeric and analytic sides differentiate the same function.
  const FixedEmbedder embedder(
      prototype_relation_scores(canonicalize(ep), params));

  auto objective = [&]() {
    return run_episode(params, ep, inner, embedder).query_loss.value.item();
  };

  EpisodeRun run = run_episode(params, ep, inner, embedder);
  std::vector<ParamEntry> entries = param_entries(params);
  std::vector<Var*> vars = var_entries(run.vars);
  std::vector<size_t> tidx;
  for (size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].trainable) tidx.push_back(i);
  }
  std::vector<Var> leaves;
  for (size_t k : tidx) leaves.push_back(*vars[k]);
  const std::vector<Var> grads = grad(run.query_loss, leaves);

  std::map<ParamGroup, std::vector<size_t>> by_group;
  for (size_t i = 0; i < tidx.size(); ++i) {
    by_group[entries[tidx[i]].group].push_back(i);
  }

  Rng rng(derive_seed(21, 0xFDu));
  const ParamGroup order[] = {ParamGroup::Theta, ParamGroup::Omega,
                              ParamGroup::Phi, ParamGroup::Psi};
  const double eps = 1e-5;
  int tested = 0;
  double max_rel = 0.0, max_abs = 0.0;
  for (int i = 0; i < 56; ++i) {
    const std::vector<size_t>& pool = by_group[order[i % 4]];
    const size_t pos =
        pool[rng.uniform_int(0, static_cast<int>(pool.size()) - 1)];
    Tensor* t = entries[tidx[pos]].tensor;
    const std::int64_t idx =
        rng.uniform_int(0, static_cast<int>(t->size()) - 1);
    const double orig = t->data()[idx];
    const double analytic = grads[pos].value.data()[idx];

    t->mutable_data()[idx] = orig + eps;
    const double fp = objective();
    t->mutable_data()[idx] = orig - eps;
    const double fm = objective();
    t->mutable_data()[idx] = orig;
    const double fd = (fp - fm) / (2.0 * eps);
    ++tested;

    if (std::abs(analytic) < 1e-8) {
      const double abs_err = std::abs(analytic - fd);
      max_abs = std::max(max_abs, abs_err);
      if (abs_err > 1e-7) {
        r.detail = entries[tidx[pos]].name + "[" + std::to_string(idx) +
                   "]: analytic " + fmt(analytic) + " vs fd " + fmt(fd);
        return r;
      }
    } else {
      const double rel = std::abs(analytic - fd) /
                         std::max(std::abs(analytic), std::abs(fd));
      max_rel = std::max(max_rel, rel);
      if (rel > 1e-4) {
        r.detail = entries[tidx[pos]].name + "[" + std::to_string(idx) +
                   "]: analytic " + fmt(analytic) + " vs fd " + fmt(fd) +
                   " (rel " + fmt(rel) + ")";
        return r;
      }
    }
  }
  const double secs = timer.seconds();
  if (tested < 50 || secs > 120.0) {
    r.detail = std::to_string(tested) + " coords in " + fmt(secs) + " s";
    return r;
  }
  r.passed = true;
  r.detail = std::to_string(tested) + " coords, max rel " + fmt(max_rel) +
             ", max abs " + fmt(max_abs) + ", " + fmt(secs) + " s";
  return r;
}

// ---------------------------------------------------------------------------
// 2. With identity warp, zero generators and zero loss nets disabled, the
//    unrolled trajectory must match a hand-coded plain SGD learner.

struct RefMaml {
  std::vector<Tensor> w, b;
  Tensor head;  // already expanded to way columns
  std::vector<int> adapted;
  double alpha = 0.01;

  void step(const Tensor& x, const std::vector<int>& y, int way) {
    const int m = x.dim(0);
    const int layers = static_cast<int>(w.size());
    std::vector<Tensor> hs = {x}, zs;
    for (int l = 0; l < layers; ++l) {
      Tensor z = hmat(hs.back(), w[l]);
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < z.dim(1); ++j) {
          z.mutable_data()[static_cast<std::int64_t>(i) * z.dim(1) + j] +=
              b[l].at(0, j);
        }
      }
      zs.push_back(z);
      Tensor h = z;
      double* hd = h.mutable_data();
      for (std::int64_t i = 0; i < h.size(); ++i) hd[i] = std::max(0.0, hd[i]);
      hs.push_back(h);
    }
    const Tensor logits = hmat(hs.back(), head);

    // d(mean cross-entropy)/d(logits) = (softmax - onehot) / m
    Tensor dlogits = Tensor::zeros({m, way});
    for (int i = 0; i < m; ++i) {
      double mx = -1e300;
      for (int c = 0; c < way; ++c) mx = std::max(mx, logits.at(i, c));
      double z = 0.0;
      for (int c = 0; c < way; ++c) z += std::exp(logits.at(i, c) - mx);
      for (int c = 0; c < way; ++c) {
        const double p = std::exp(logits.at(i, c) - mx) / z;
        dlogits.mutable_data()[static_cast<std::int64_t>(i) * way + c] =
            (p - (y[i] == c ? 1.0 : 0.0)) / m;
      }
    }

    const Tensor dhead = hmat_tn(hs.back(), dlogits);
    Tensor dh = hmat_nt(dlogits, head);
    std::vector<Tensor> dw(layers), db(layers);
    for (int l = layers - 1; l >= 0; --l) {
      Tensor dz = dh;
      for (std::int64_t i = 0; i < dz.size(); ++i) {
        if (zs[l].data()[i] <= 0.0) dz.mutable_data()[i] = 0.0;
      }
      dw[l] = hmat_tn(hs[l], dz);
      Tensor dbl = Tensor::zeros({1, dz.dim(1)});
      for (int j = 0; j < dz.dim(1); ++j) {
        double acc = 0.0;
        for (int i = 0; i < m; ++i) acc += dz.at(i, j);
        dbl.mutable_data()[j] = acc;
      }
      db[l] = dbl;
      if (l > 0) dh = hmat_nt(dz, w[l]);
    }

    for (int l : adapted) {
      w[l] = taxpy(-alpha, dw[l], w[l]);
      b[l] = taxpy(-alpha, db[l], b[l]);
    }
    head = taxpy(-alpha, dhead, head);
  }
};

CheckResult check_maml_equivalence() {
  CheckResult r{"plain-sgd-maml-equivalence", false, ""};

  ClusterFamily::Config fc;
  fc.dim = 8;
  fc.classes_train = 10;
  fc.classes_val = 4;
  fc.classes_test = 4;
  fc.radius = 5.0;
  fc.seed = 9;
  const ClusterFamily family(fc);
  TaskSpec tspec;
  tspec.way = 5;
  tspec.shot = 5;
  tspec.input_dim = 8;

  ModelSpec mspec;
  mspec.encoder = EncoderSpec::mlp({8, 16, 8}, {1}, {1});
  mspec.classification = true;
  mspec.way = 5;
  const MetaParams params = init_meta_params(mspec, std::nullopt, 31);
  const Episode ep = sample_with_seed(family, tspec, Split::Train,
                                      derive_seed(31, kTagTrain, 0));

  InnerConfig inner;
  inner.alpha = 0.01;
  inner.steps = 5;
  inner.momentum = 0.0;
  inner.weight_decay = 0.0;

  const EpisodeRun run =
      run_episode(params, ep, inner, PrototypeEmbedder{});

  RefMaml ref;
  for (const LinearParams& lin : params.encoder) {
    ref.w.push_back(lin.weight);
    ref.b.push_back(lin.bias);
  }
  Tensor head = Tensor::zeros({mspec.encoder.feature_dim(), tspec.way});
  for (int f = 0; f < head.dim(0); ++f) {
    for (int c = 0; c < tspec.way; ++c) {
      head.mutable_data()[static_cast<std::int64_t>(f) * tspec.way + c] =
          params.head.at(f, 0);
    }
  }
  ref.head = head;
  ref.adapted = mspec.encoder.adapted_layers;
  ref.alpha = inner.alpha;

  const Episode canon = run.episode;
  double worst = 0.0;
  for (int j = 0; j <= inner.steps; ++j) {
    // Snapshot order: adapted layer weight, bias, then head.
    std::vector<Tensor> expect;
    for (int l : ref.adapted) {
      expect.push_back(ref.w[l]);
      expect.push_back(ref.b[l]);
    }
    expect.push_back(ref.head);
    const std::vector<Tensor>& got = run.trajectory.thetas[j];
    for (size_t k = 0; k < expect.size(); ++k) {
      worst = std::max(worst, max_abs_diff(expect[k], got[k]));
    }
    if (j < inner.steps) ref.step(canon.support_x, canon.support_y,
                                  tspec.way);
  }
  r.passed = worst <= 1e-6;
  r.detail = "max |engine - reference| = " + fmt(worst) + " over " +
             std::to_string(inner.steps + 1) + " snapshots";
  return r;
}

// ---------------------------------------------------------------------------
// 3. A fixed square layer behind the adapted weights preconditions the step
//    by omega omega^T, and scaled identities rescale the step exactly.

CheckResult check_preconditioner_identity() {
  CheckResult r{"warp-preconditioner-identity", false, ""};
  const int d = 3, k = 4, m = 6;
  const double alpha = 0.01;

  ModelSpec warped;
  warped.encoder = EncoderSpec::mlp({d, k}, {0}, {0});
  warped.encoder.activations = {Activation::Identity};
  warped.encoder.use_bias = false;
  warped.classification = false;
  warped.way = 1;

  ModelSpec plain = warped;
  plain.encoder = EncoderSpec::mlp({d, k}, {}, {0});
  plain.encoder.activations = {Activation::Identity};
  plain.encoder.use_bias = false;

  InnerConfig inner;
  inner.alpha = alpha;
  inner.steps = 1;
  inner.momentum = 0.0;
  inner.weight_decay = 0.0;
  inner.flags.use_warp = true;

  Rng rng(derive_seed(77, 0xA1u));
  auto episode_from = [&](const Tensor& x, const Tensor& y) {
    Episode ep;
    ep.classification = false;
    ep.way = 1;
    ep.support_x = x;
    ep.support_t = y;
    ep.query_x = x;
    ep.query_t = y;
    return ep;
  };

  auto implicit_delta = [&](const Tensor& theta0, const Tensor& omega,
                            const Tensor& head, const Episode& ep) {
    MetaParams p = init_meta_params(warped, std::nullopt, 5);
    p.encoder[0].weight = theta0;
    p.warp.at(0) = omega;
    p.head = head;
    const EpisodeRun run = run_episode(p, ep, inner, MeanTargetEmbedder{});
    const Tensor before = run.trajectory.thetas[0][0];
    const Tensor after = run.trajectory.thetas[1][0];
    return taxpy(-1.0, before, after);
  };

  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor theta0 = Tensor::randn({d, k}, rng, 1.0);
    const Tensor omega = Tensor::randn({k, k}, rng, 1.0);
    const Tensor head = Tensor::randn({k, 1}, rng, 1.0);
    const Tensor x = Tensor::randn({m, d}, rng, 1.0);
    const Tensor y = Tensor::randn({m, 1}, rng, 1.0);
    const Episode ep = episode_from(x, y);

    const Tensor delta_eff = hmat_nt(implicit_delta(theta0, omega, head, ep),
                                     omega);

    // Explicit side: gradient of the reparameterized model at w = theta0
    // omega^T, pushed through the materialized preconditioner.
    MetaParams p = init_meta_params(plain, std::nullopt, 5);
    p.encoder[0].weight = hmat_nt(theta0, omega);
    p.head = head;
    Tape tape;
    ModelVars vars = lift(p, tape);
    ThetaState theta = initial_theta(vars, 1);
    Var loss = base_loss(forward(vars, theta, constant(x), {false, false}),
                         constant(y), LossKind::Squared);
    const Tensor g = grad(loss, {vars.encoder[0].weight})[0].value;
    const Tensor expected =
        tscale(hmat(g, materialize_preconditioner(omega)), -alpha);
    worst = std::max(worst, max_abs_diff(delta_eff, expected));
  }
  if (worst > 1e-6) {
    r.detail = "random omega: max diff " + fmt(worst);
    return r;
  }

  // sqrt(c)-scaled identity with matched initial function: the effective
  // step grows by exactly c, the raw step by sqrt(c).
  const double c = 2.0;
  const Tensor theta0 = Tensor::randn({d, k}, rng, 1.0);
  const Tensor head = Tensor::randn({k, 1}, rng, 1.0);
  const Tensor x = Tensor::randn({m, d}, rng, 1.0);
  const Tensor y = Tensor::randn({m, 1}, rng, 1.0);
  const Episode ep = episode_from(x, y);

  const Tensor delta_a =
      implicit_delta(theta0, Tensor::identity(k), head, ep);
  const Tensor delta_b = implicit_delta(
      tscale(theta0, 1.0 / std::sqrt(c)),
      tscale(Tensor::identity(k), std::sqrt(c)), head, ep);
  const double raw = max_abs_diff(delta_b, tscale(delta_a, std::sqrt(c)));
  const double eff = max_abs_diff(tscale(delta_b, std::sqrt(c)),
                                  tscale(delta_a, c));
  if (raw > 1e-6 || eff > 1e-6) {
    r.detail = "scaled identity: raw diff " + fmt(raw) + ", effective diff " +
               fmt(eff);
    return r;
  }
  r.passed = true;
  r.detail = "20 random omega max diff " + fmt(worst) +
             "; c-scaling raw/effective diffs " + fmt(raw) + "/" + fmt(eff);
  return r;
}

// ---------------------------------------------------------------------------
// 4. Zeroed loss nets change nothing; a hand-wired support net that emits
//    (c-1) times the base loss turns the trajectory into SGD at rate c*alpha.

void zero_loss_nets(MetaParams& params) {
  for (const ParamEntry& e : param_entries(params)) {
    if (e.name.rfind("support_net.", 0) == 0 ||
        e.name.rfind("query_net.", 0) == 0 ||
        e.name.rfind("reg_net.", 0) == 0) {
      *e.tensor = Tensor::zeros(e.tensor->shape(), e.tensor->precision());
    }
  }
}

CheckResult check_loss_recovery() {
  CheckResult r{"zero-loss-net-recovery-and-wired-scaling", false, ""};

  ClusterFamily::Config fc;
  fc.dim = 16;
  fc.classes_train = 12;
  fc.classes_val = 4;
  fc.classes_test = 4;
  fc.radius = 5.0;
  fc.seed = 5;
  const ClusterFamily family(fc);
  TaskSpec tspec;
  tspec.way = 5;
  tspec.shot = 5;
  tspec.input_dim = 16;

  ModelSpec mspec;
  mspec.encoder = EncoderSpec::mlp({16, 32, 32}, {1}, {1});
  mspec.classification = true;
  mspec.way = 5;

  // Part one: zero generators vanish from the objective.
  MetaParams params = init_meta_params(mspec, std::nullopt, 51);
  for (const ParamEntry& e : param_entries(params)) {
    if (e.group == ParamGroup::Phi) {
      *e.tensor = Tensor::zeros(e.tensor->shape(), e.tensor->precision());
    }
  }
  const VariantFlags flags = VariantFlags::all();
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const Episode ep = sample_with_seed(family, tspec, Split::Train,
                                        derive_seed(51, kTagTrain, i));
    const Tensor relation = prototype_relation_scores(ep, params);
    Tape tape;
    ModelVars vars = lift(params, tape);
    ThetaState theta = initial_theta(vars, tspec.way);
    Var logits = forward(vars, theta, constant(ep.support_x),
                         flags.forward_options());
    const MetaLossParts parts =
        meta_loss_parts(logits, vars, theta, ep, relation, flags);
    worst = std::max(worst, std::abs(parts.total.value.item() -
                                     parts.base.value.item()));
  }
  if (worst > 1e-7) {
    r.detail = "zeroed nets: max |meta - base| = " + fmt(worst);
    return r;
  }

  // Part two: route the per-instance base loss through the support net with
  // an output weight of c-1.
  const double c = 1.7;
  MetaParams wired = init_meta_params(mspec, std::nullopt, 52);
  zero_loss_nets(wired);
  const int loss_col = 2 * tspec.way;  // per-instance loss column
  wired.support_net.linear[0].weight.set(loss_col, 0, 1.0);
  wired.support_net.linear[1].weight.set(0, 0, 1.0);
  wired.support_net.linear[2].weight.set(0, 0, c - 1.0);

  InnerConfig inner_wired;
  inner_wired.alpha = 0.01;
  inner_wired.steps = 3;
  inner_wired.momentum = 0.0;
  inner_wired.weight_decay = 0.0;
  inner_wired.flags.use_support_loss = true;
  InnerConfig inner_scaled = inner_wired;
  inner_scaled.alpha = c * inner_wired.alpha;
  inner_scaled.flags = VariantFlags::none();

  const Episode ep = sample_with_seed(family, tspec, Split::Train,
                                      derive_seed(52, kTagTrain, 1));
  const EpisodeRun run_a =
      run_episode(wired, ep, inner_wired, PrototypeEmbedder{});
  const EpisodeRun run_b =
      run_episode(wired, ep, inner_scaled, PrototypeEmbedder{});
  double traj = 0.0;
  for (size_t j = 0; j < run_a.trajectory.thetas.size(); ++j) {
    for (size_t k = 0; k < run_a.trajectory.thetas[j].size(); ++k) {
      traj = std::max(traj, max_abs_diff(run_a.trajectory.thetas[j][k],
                                         run_b.trajectory.thetas[j][k]));
    }
  }
  r.passed = traj <= 1e-6;
  r.detail = "zeroed-net gap " + fmt(worst) + "; wired-vs-scaled-rate gap " +
             fmt(traj);
  return r;
}

// ---------------------------------------------------------------------------
// 5. Elementwise rates seeded uniformly at alpha reproduce the scalar path.

CheckResult check_metasgd_special_case() {
  CheckResult r{"uniform-diagonal-rate-metasgd", false, ""};

  ClusterFamily::Config fc;
  fc.dim = 16;
  fc.classes_train = 12;
  fc.classes_val = 4;
  fc.classes_test = 4;
  fc.radius = 5.0;
  fc.seed = 5;
  const ClusterFamily family(fc);
  TaskSpec tspec;
  tspec.way = 5;
  tspec.shot = 5;
  tspec.input_dim = 16;

  ModelSpec mspec;
  mspec.encoder = EncoderSpec::mlp({16, 32, 32}, {1}, {1});
  mspec.classification = true;
  mspec.way = 5;

  const MetaParams scalar = init_meta_params(mspec, std::nullopt, 61);
  MetaParams diag = scalar;
  enable_diagonal_lr(diag, 0.01);

  InnerConfig inner;
  inner.alpha = 0.01;
  inner.steps = 5;
  inner.momentum = 0.9;
  inner.weight_decay = 0.0005;
  InnerConfig inner_diag = inner;
  inner_diag.diagonal_lr = true;

  const Episode ep = sample_with_seed(family, tspec, Split::Train,
                                      derive_seed(61, kTagTrain, 0));
  const EpisodeRun run_a = run_episode(scalar, ep, inner, PrototypeEmbedder{});
  const EpisodeRun run_b =
      run_episode(diag, ep, inner_diag, PrototypeEmbedder{});
  double worst = 0.0;
  for (size_t j = 0; j < run_a.trajectory.thetas.size(); ++j) {
    for (size_t k = 0; k < run_a.trajectory.thetas[j].size(); ++k) {
      worst = std::max(worst, max_abs_diff(run_a.trajectory.thetas[j][k],
                                           run_b.trajectory.thetas[j][k]));
    }
  }
  r.passed = worst <= 1e-7;
  r.detail = "max trajectory gap " + fmt(worst);
  return r;
}

// ---------------------------------------------------------------------------
// 6. Renaming an episode's classes cannot move the needle: the duplicated
//    single-vector head plus first-appearance canonicalization make accuracy
//    exactly invariant.

CheckResult check_relabel_invariance() {
  CheckResult r{"class-relabel-invariance", false, ""};

  const ClusterFamily family;
  TaskSpec tspec;
  tspec.way = 5;
  tspec.shot = 5;
  tspec.input_dim = family.config().dim;

  // Narrow enough that the freshly drawn regularizer net stays in its
  // well-behaved range for every episode; the invariance itself is exact at
  // any width.
  ModelSpec mspec;
  mspec.encoder = EncoderSpec::mlp({32, 16, 16, 8}, {2}, {2});
  mspec.classification = true;
  mspec.way = 5;
  const MetaParams params = init_meta_params(mspec, std::nullopt, 71);

  InnerConfig inner;
  inner.alpha = 0.01;
  inner.steps = 5;
  inner.momentum = 0.9;
  inner.weight_decay = 0.0005;
  inner.flags = VariantFlags::all();
  const PrototypeEmbedder embedder;

  Rng perm_rng(derive_seed(71, 0x9e37u));
  int mismatches = 0;
  for (int i = 0; i < 100; ++i) {
    const Episode ep = sample_with_seed(family, tspec, Split::Test,
                                        derive_seed(71, kTagEval, i));
    std::vector<int> pi(tspec.way);
    std::iota(pi.begin(), pi.end(), 0);
    perm_rng.shuffle(pi);

    Episode relabeled = ep;
    for (int& y : relabeled.support_y) y = pi[y];
    for (int& y : relabeled.query_y) y = pi[y];
    relabeled.slot_to_class.assign(tspec.way, 0);
    for (int s = 0; s < tspec.way; ++s) {
      relabeled.slot_to_class[pi[s]] = ep.slot_to_class[s];
    }

    const EpisodeRun run_a = run_episode(params, ep, inner, embedder);
    const EpisodeRun run_b = run_episode(params, relabeled, inner, embedder);
    if (run_a.accuracy != run_b.accuracy ||
        run_a.query_loss.value.item() != run_b.query_loss.value.item()) {
      ++mismatches;
    }
  }
  r.passed = mismatches == 0;
  r.detail = std::to_string(mismatches) + " of 100 episodes changed under "
             "relabeling";
  return r;
}

// ---------------------------------------------------------------------------
// 7. The learned loss terms are means over instances: permuting or
//    duplicating rows leaves the values put.

CheckResult check_batch_invariance() {
  CheckResult r{"instance-permutation-duplication-invariance", false, ""};

  const ClusterFamily family;
  TaskSpec tspec;
  tspec.way = 5;
  tspec.shot = 5;
  tspec.input_dim = family.config().dim;

  ModelSpec mspec;
  mspec.encoder = EncoderSpec::mlp({32, 64, 64, 64}, {2}, {2});
  mspec.classification = true;
  mspec.way = 5;
  const MetaParams params = init_meta_params(mspec, std::nullopt, 81);
  const Episode ep = sample_with_seed(family, tspec, Split::Train,
                                      derive_seed(81, kTagTrain, 2));
  const Tensor relation = prototype_relation_scores(ep, params);

  auto permute_rows = [](const Tensor& t, const std::vector<int>& order) {
    Tensor out({static_cast<int>(order.size()), t.dim(1)}, t.precision());
    for (size_t i = 0; i < order.size(); ++i) {
      for (int j = 0; j < t.dim(1); ++j) {
        out.mutable_data()[static_cast<std::int64_t>(i) * t.dim(1) + j] =
            t.at(order[i], j);
      }
    }
    return out;
  };

  auto support_value = [&](const Episode& e) {
    Tape tape;
    ModelVars vars = lift(params, tape);
    ThetaState theta = initial_theta(vars, tspec.way);
    Var logits = forward(vars, theta, constant(e.support_x), {true, true});
    return support_loss(vars.support_net, logits, e, true).value.item();
  };
  auto query_value = [&](const Episode& e, const Tensor& rel) {
    Tape tape;
    ModelVars vars = lift(params, tape);
    ThetaState theta = initial_theta(vars, tspec.way);
    Var logits = forward(vars, theta, constant(e.query_x), {true, true});
    return query_loss(vars.query_net, logits, rel, e, true).value.item();
  };

  Rng rng(derive_seed(81, 0x51u));
  const int s = ep.support_x.dim(0);
  const int q = ep.query_x.dim(0);
  std::vector<int> sperm(s), qperm(q);
  std::iota(sperm.begin(), sperm.end(), 0);
  std::iota(qperm.begin(), qperm.end(), 0);
  rng.shuffle(sperm);
  rng.shuffle(qperm);

  Episode ep_sp = ep;
  ep_sp.support_x = permute_rows(ep.support_x, sperm);
  ep_sp.support_y.clear();
  for (int i : sperm) ep_sp.support_y.push_back(ep.support_y[i]);

  std::vector<int> sdup(s * 2), qdup(q * 2);
  for (int i = 0; i < s; ++i) sdup[i] = sdup[s + i] = i;
  for (int i = 0; i < q; ++i) qdup[i] = qdup[q + i] = i;
  Episode ep_sd = ep;
  ep_sd.support_x = permute_rows(ep.support_x, sdup);
  ep_sd.support_y.clear();
  for (int i : sdup) ep_sd.support_y.push_back(ep.support_y[i]);

  Episode ep_qp = ep;
  ep_qp.query_x = permute_rows(ep.query_x, qperm);
  ep_qp.query_y.clear();
  for (int i : qperm) ep_qp.query_y.push_back(ep.query_y[i]);
  const Tensor rel_qp = permute_rows(relation, qperm);

  Episode ep_qd = ep;
  ep_qd.query_x = permute_rows(ep.query_x, qdup);
  ep_qd.query_y.clear();
  for (int i : qdup) ep_qd.query_y.push_back(ep.query_y[i]);
  const Tensor rel_qd = permute_rows(relation, qdup);

  const double base_s = support_value(ep);
  const double base_q = query_value(ep, relation);
  const double d1 = std::abs(support_value(ep_sp) - base_s);
  const double d2 = std::abs(support_value(ep_sd) - base_s);
  const double d3 = std::abs(query_value(ep_qp, rel_qp) - base_q);
  const double d4 = std::abs(query_value(ep_qd, rel_qd) - base_q);
  const double worst = std::max({d1, d2, d3, d4});
  r.passed = worst <= 1e-6;
  r.detail = "support perm/dup " + fmt(d1) + "/" + fmt(d2) +
             ", query perm/dup " + fmt(d3) + "/" + fmt(d4);
  return r;
}

// ---------------------------------------------------------------------------
// 8. Training on sinusoids must earn its keep: adapted query MSE at the end
//    is at most half of what the meta-initialization manages.

CheckResult check_sinusoid_learning() {
  CheckResult r{"sinusoid-query-mse-halves", false, ""};
  Timer timer;

  const SinusoidFamily family;
  TaskSpec tspec;
  tspec.classification = false;
  tspec.way = 1;
  tspec.shot = 5;
  tspec.input_dim = 1;

  // Bounded hidden activations keep the initial predictions, and with them
  // the squared-error inputs of the learned loss nets, at unit scale across
  // the [-5, 5] input range. Narrower loss nets damp the FiLM gain the same
  // way.
  ModelSpec mspec;
  mspec.encoder = EncoderSpec::mlp({1, 40, 40, 16}, {2}, {2});
  mspec.encoder.activations = {Activation::Tanh, Activation::Tanh,
                               Activation::Tanh};
  mspec.classification = false;
  mspec.way = 1;
  mspec.loss_hidden = 16;

  InnerConfig inner;
  inner.alpha = 0.01;
  inner.steps = 5;
  inner.momentum = 0.9;
  inner.weight_decay = 0.0005;
  inner.flags = VariantFlags::all();

  const MeanTargetEmbedder embedder;
  const int workers = check_workers();

  int halved = 0;
  std::ostringstream detail;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    // A seed whose run diverges counts as not halved rather than sinking
    // the whole check; the bar is 4 of 5.
    try {
      MetaParams params = init_meta_params(mspec, std::nullopt, seed);
      const double before =
          evaluate_episodes(params, family, tspec, Split::Test, 200, seed,
                            kTagEval, inner, embedder, workers)
              .mean_loss();

      MetaConfig mc;
      mc.eta = 1e-3;
      mc.meta_batch = 4;
      mc.steps = 2000;
      mc.val_interval = 1000;
      mc.val_episodes = 20;
      mc.seed = seed;
      mc.workers = workers;
      meta_train(params, family, tspec, mc, inner, embedder, TrainPaths{});

      const double after =
          evaluate_episodes(params, family, tspec, Split::Test, 200, seed,
                            kTagEval, inner, embedder, workers)
              .mean_loss();
      if (after <= 0.5 * before) ++halved;
      detail << " seed " << seed << ": " << fmt(before) << " -> "
             << fmt(after) << ";";
    } catch (const std::exception& e) {
      detail << " seed " << seed << ": diverged (" << e.what() << ");";
    }
  }
  const double secs = timer.seconds();
  r.passed = halved >= 4 && secs <= 1800.0;
  r.detail = std::to_string(halved) + "/5 seeds halved;" + detail.str() +
             " " + fmt(secs) + " s";
  return r;
}

// ---------------------------------------------------------------------------
// 9. The fully learned update rule must not fall behind the plain baseline
//    on the desk-scale classification family.

CheckResult check_variant_ordering() {
  CheckResult r{"full-variant-not-below-baseline", false, ""};
  Timer timer;

  const ClusterFamily family;
  TaskSpec tspec;
  tspec.way = 5;
  tspec.shot = 5;
  tspec.input_dim = family.config().dim;

  // Same narrow encoder as the relabeling check: both update rules train
  // cleanly there from a fresh draw, which is what the comparison needs.
  ModelSpec mspec;
  mspec.encoder = EncoderSpec::mlp({32, 16, 16, 8}, {2}, {2});
  mspec.classification = true;
  mspec.way = 5;

  const PrototypeEmbedder embedder;
  const int workers = check_workers();

  auto train_and_eval = [&](const VariantFlags& flags) {
    std::vector<double> accs;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      MetaParams params = init_meta_params(mspec, std::nullopt, seed);
      InnerConfig inner;
      inner.alpha = 0.01;
      inner.steps = 5;
      inner.momentum = 0.9;
      inner.weight_decay = 0.0005;
      inner.flags = flags;

      MetaConfig mc;
      mc.eta = 1e-3;
      mc.meta_batch = 2;
      mc.steps = 150;
      mc.val_interval = 150;
      mc.val_episodes = 40;
      mc.seed = seed;
      mc.workers = workers;
      meta_train(params, family, tspec, mc, inner, embedder, TrainPaths{});

      const EvalSamples samples =
          evaluate_episodes(params, family, tspec, Split::Test, 600, seed,
                            kTagEval, inner, embedder, workers);
      accs.insert(accs.end(), samples.accuracies.begin(),
                  samples.accuracies.end());
    }
    return summarize(accs);
  };

  const Summary base = train_and_eval(VariantFlags::none());
  const Summary full = train_and_eval(VariantFlags::all());
  const double margin = full.mean - (base.mean - base.half_width);
  r.passed = margin >= 0.0;
  r.detail = "baseline " + fmt(base.mean) + " +/- " + fmt(base.half_width) +
             ", full " + fmt(full.mean) + " +/- " + fmt(full.half_width) +
             ", margin " + fmt(margin) + ", " + fmt(timer.seconds()) + " s";
  return r;
}

// ---------------------------------------------------------------------------
// 10. The reporting layer: the interval narrows like 1/sqrt(n) and the CSV
//     alone reproduces it.

CheckResult check_ci_scaling() {
  CheckResult r{"ci-inverse-sqrt-scaling", false, ""};

  const ClusterFamily family;
  TaskSpec tspec;
  tspec.way = 5;
  tspec.shot = 5;
  tspec.input_dim = family.config().dim;

  ModelSpec mspec;
  mspec.encoder = EncoderSpec::mlp({32, 64, 64, 64}, {2}, {2});
  mspec.classification = true;
  mspec.way = 5;
  const MetaParams params = init_meta_params(mspec, std::nullopt, 0);

  InnerConfig inner;
  inner.alpha = 0.01;
  inner.steps = 1;
  inner.momentum = 0.0;
  inner.weight_decay = 0.0;
  const PrototypeEmbedder embedder;
  const int workers = check_workers();

  std::map<int, Summary> by_n;
  EvalSamples mid;
  for (const int n : {100, 400, 1600}) {
    const EvalSamples samples =
        evaluate_episodes(params, family, tspec, Split::Test, n, 11, kTagEval,
                          inner, embedder, workers);
    by_n[n] = summarize(samples.accuracies);
    if (n == 400) mid = samples;
  }
  const double r1 = by_n[100].half_width / by_n[400].half_width;
  const double r2 = by_n[400].half_width / by_n[1600].half_width;
  const bool scaling_ok =
      r1 >= 1.6 && r1 <= 2.4 && r2 >= 1.6 && r2 <= 2.4;

  const std::string csv =
      (std::filesystem::temp_directory_path() / "metalearn_ci_tasks.csv")
          .string();
  write_task_csv(csv, mid, true);
  const Summary redo = summarize(read_task_csv_values(csv));
  std::filesystem::remove(csv);
  const bool csv_ok = std::abs(redo.mean - by_n[400].mean) <= 1e-12 &&
                      std::abs(redo.half_width - by_n[400].half_width) <=
                          1e-12;

  r.passed = scaling_ok && csv_ok;
  r.detail = "half-width ratios " + fmt(r1) + ", " + fmt(r2) +
             " (want ~2); csv recomputation " +
             std::string(csv_ok ? "matches" : "differs");
  return r;
}

}  // namespace

std::vector<CheckResult> run_acceptance_checks(std::ostream& os) {
  using Entry = std::pair<const char*, CheckResult (*)()>;
  const std::vector<Entry> checks = {
      {"meta-gradient-finite-difference-oracle", check_meta_gradient_oracle},
      {"plain-sgd-maml-equivalence", check_maml_equivalence},
      {"warp-preconditioner-identity", check_preconditioner_identity},
      {"zero-loss-net-recovery-and-wired-scaling", check_loss_recovery},
      {"uniform-diagonal-rate-metasgd", check_metasgd_special_case},
      {"class-relabel-invariance", check_relabel_invariance},
      {"instance-permutation-duplication-invariance", check_batch_invariance},
      {"sinusoid-query-mse-halves", check_sinusoid_learning},
      {"full-variant-not-below-baseline", check_variant_ordering},
      {"ci-inverse-sqrt-scaling", check_ci_scaling},
  };
  std::vector<CheckResult> results;
  for (const auto& [name, fn] : checks) {
    CheckResult res;
    try {
      res = fn();
    } catch (const std::exception& e) {
      res.passed = false;
      res.detail = std::string("exception: ") + e.what();
    }
    res.name = name;
    os << (res.passed ? "PASS" : "FAIL") << " " << res.name << ": "
       << res.detail << "\n";
    os.flush();
    results.push_back(std::move(res));
  }
  return results;
}

}  // namespace metalearn
