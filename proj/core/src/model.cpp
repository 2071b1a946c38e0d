#include "metalearn/model.hpp"

#include <algorithm>
#include <cmath>

namespace metalearn {

namespace {

bool contains(const std::vector<int>& v, int x) {
  return std::find(v.begin(), v.end(), x) != v.end();
}

void require_strictly_increasing(const char* what, const std::vector<int>& v,
                                 int limit) {
  for (size_t i = 0; i < v.size(); ++i) {
    if (v[i] < 0 || v[i] >= limit) {
      throw ConfigError(std::string(what) + " index " + std::to_string(v[i]) +
                        " out of range [0, " + std::to_string(limit) + ")");
    }
    if (i > 0 && v[i] <= v[i - 1]) {
      throw ConfigError(std::string(what) + " indices must strictly increase");
    }
  }
}

}  // namespace

const char* to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::Theta: return "theta";
    case ParamGroup::Omega: return "omega";
    case ParamGroup::Phi: return "phi";
    case ParamGroup::Psi: return "psi";
  }
  return "?";
}

bool EncoderSpec::is_warped(int layer) const {
  return contains(warped_layers, layer);
}

bool EncoderSpec::is_adapted(int layer) const {
  return contains(adapted_layers, layer);
}

Activation EncoderSpec::activation(int layer) const {
  if (activations.empty()) return Activation::Relu;
  return activations[layer];
}

void EncoderSpec::validate() const {
  if (layer_dims.empty()) throw ConfigError("encoder: no layers");
  for (size_t l = 0; l < layer_dims.size(); ++l) {
    if (layer_dims[l].first < 1 || layer_dims[l].second < 1) {
      throw ConfigError("encoder: layer " + std::to_string(l) +
                        " has non-positive extents");
    }
    if (l > 0 && layer_dims[l].first != layer_dims[l - 1].second) {
      throw ConfigError("encoder: layer " + std::to_string(l) + " input " +
                        std::to_string(layer_dims[l].first) +
                        " does not chain from previous output " +
                        std::to_string(layer_dims[l - 1].second));
    }
  }
  require_strictly_increasing("warped layer", warped_layers, layers());
  require_strictly_increasing("adapted layer", adapted_layers, layers());
  if (!activations.empty() &&
      activations.size() != layer_dims.size()) {
    throw ConfigError("encoder: " + std::to_string(activations.size()) +
                      " activations for " + std::to_string(layer_dims.size()) +
                      " layers");
  }
}

EncoderSpec EncoderSpec::mlp(const std::vector<int>& dims,
                             std::vector<int> warped,
                             std::vector<int> adapted) {
  if (dims.size() < 2) throw ConfigError("encoder: need at least two dims");
  EncoderSpec spec;
  for (size_t i = 0; i + 1 < dims.size(); ++i) {
    spec.layer_dims.emplace_back(dims[i], dims[i + 1]);
  }
  spec.warped_layers = std::move(warped);
  spec.adapted_layers = std::move(adapted);
  spec.validate();
  return spec;
}

void ModelSpec::validate() const {
  encoder.validate();
  if (classification && way < 2) {
    throw ConfigError("model: classification needs way >= 2");
  }
  if (!classification && way != 1) {
    throw ConfigError("model: regression uses way = 1");
  }
  if (loss_hidden < 1) throw ConfigError("model: loss_hidden < 1");
}

// Keep the walk order here in sync with lift() below: checkpoints, gradient
// reductions and the finite-difference oracle all assume this exact order.
std::vector<ParamEntry> param_entries(MetaParams& p) {
  std::vector<ParamEntry> out;
  const EncoderSpec& enc = p.spec.encoder;
  for (int l = 0; l < enc.layers(); ++l) {
    const bool train = enc.is_adapted(l);
    const std::string base = "encoder." + std::to_string(l);
    out.push_back({base + ".weight", ParamGroup::Theta,
                   &p.encoder[l].weight, train});
    if (enc.use_bias) {
      out.push_back({base + ".bias", ParamGroup::Theta, &p.encoder[l].bias,
                     train});
    }
  }
  out.push_back({"head", ParamGroup::Theta, &p.head, true});
  for (auto& [l, w] : p.warp) {
    out.push_back({"warp." + std::to_string(l), ParamGroup::Omega, &w, true});
  }
  for (auto& [l, f] : p.encoder_film) {
    const std::string base = "film." + std::to_string(l);
    out.push_back({base + ".weight", ParamGroup::Psi, &f.weight, true});
    out.push_back({base + ".bias", ParamGroup::Psi, &f.bias, true});
  }
  const std::pair<const char*, LossNetParams*> nets[] = {
      {"support_net", &p.support_net},
      {"query_net", &p.query_net},
      {"reg_net", &p.reg_net},
  };
  for (auto& [name, net] : nets) {
    for (size_t i = 0; i < net->linear.size(); ++i) {
      const std::string base =
          std::string(name) + ".linear." + std::to_string(i);
      out.push_back({base + ".weight", ParamGroup::Phi,
                     &net->linear[i].weight, true});
      out.push_back({base + ".bias", ParamGroup::Phi, &net->linear[i].bias,
                     true});
    }
    for (size_t i = 0; i < net->film.size(); ++i) {
      const std::string base =
          std::string(name) + ".film." + std::to_string(i);
      out.push_back({base + ".weight", ParamGroup::Psi, &net->film[i].weight,
                     true});
      out.push_back({base + ".bias", ParamGroup::Psi, &net->film[i].bias,
                     true});
    }
  }
  for (size_t i = 0; i < p.diag_lr.size(); ++i) {
    out.push_back({"diag_lr." + std::to_string(i), ParamGroup::Omega,
                   &p.diag_lr[i], true});
  }
  return out;
}

namespace {

LossNetParams init_loss_net(int in, int hidden, Rng& rng) {
  LossNetParams net;
  const int dims[4] = {in, hidden, hidden, 1};
  for (int i = 0; i < 3; ++i) {
    LinearParams lin;
    lin.weight = Tensor::randn({dims[i], dims[i + 1]}, rng, 0.1);
    lin.bias = Tensor::randn({1, dims[i + 1]}, rng, 0.1);
    net.linear.push_back(std::move(lin));
  }
  for (int i = 0; i < 2; ++i) {
    FilmParams film;
    film.weight = Tensor::randn({hidden, 2 * hidden}, rng, 0.1);
    film.bias = Tensor::randn({1, 2 * hidden}, rng, 0.1);
    net.film.push_back(std::move(film));
  }
  return net;
}

}  // namespace

MetaParams init_meta_params(
    const ModelSpec& spec,
    const std::optional<std::vector<LinearParams>>& pretrained_encoder,
    std::uint64_t seed) {
  spec.validate();
  MetaParams p;
  p.spec = spec;
  const EncoderSpec& enc = spec.encoder;
  Rng rng(derive_seed(seed, 0x1417u));

  for (int l = 0; l < enc.layers(); ++l) {
    const auto [in, out] = enc.layer_dims[l];
    LinearParams lin;
    lin.weight = Tensor::randn({in, out}, rng, std::sqrt(2.0 / in));
    if (enc.use_bias) lin.bias = Tensor::zeros({1, out});
    p.encoder.push_back(std::move(lin));
  }
  // Pretrained weights replace the draws rather than suppressing them, so
  // the phi/psi init below is identical with and without pre-training.
  if (pretrained_encoder) {
    if (static_cast<int>(pretrained_encoder->size()) != enc.layers()) {
      throw ConfigError("init: pretrained encoder has " +
                        std::to_string(pretrained_encoder->size()) +
                        " layers, spec has " + std::to_string(enc.layers()));
    }
    for (int l = 0; l < enc.layers(); ++l) {
      const LinearParams& src = (*pretrained_encoder)[l];
      if (!src.weight.same_shape(p.encoder[l].weight)) {
        throw ConfigError("init: pretrained layer " + std::to_string(l) +
                          " weight shape " + src.weight.shape_string() +
                          " vs " + p.encoder[l].weight.shape_string());
      }
      p.encoder[l].weight = src.weight;
      if (enc.use_bias) {
        if (!src.bias.same_shape(p.encoder[l].bias)) {
          throw ConfigError("init: pretrained layer " + std::to_string(l) +
                            " bias shape mismatch");
        }
        p.encoder[l].bias = src.bias;
      }
    }
  }

  const int feat = enc.feature_dim();
  p.head = Tensor::randn({feat, 1}, rng, std::sqrt(1.0 / feat));

  for (int l : enc.warped_layers) {
    p.warp[l] = Tensor::identity(enc.layer_dims[l].second);
  }
  for (int l : enc.warped_layers) {
    const int d = enc.layer_dims[l].second;
    FilmParams film;
    film.weight = Tensor::randn({d, 2 * d}, rng, 0.1);
    film.bias = Tensor::randn({1, 2 * d}, rng, 0.1);
    p.encoder_film[l] = std::move(film);
  }

  p.support_net = init_loss_net(spec.loss_in(), spec.loss_hidden, rng);
  p.query_net = init_loss_net(spec.loss_in(), spec.loss_hidden, rng);
  p.reg_net = init_loss_net(spec.reg_in(), spec.loss_hidden, rng);
  return p;
}

void enable_diagonal_lr(MetaParams& p, double alpha0) {
  p.diag_lr.clear();
  const EncoderSpec& enc = p.spec.encoder;
  for (int l : enc.adapted_layers) {
    p.diag_lr.push_back(
        Tensor::full(p.encoder[l].weight.shape(), alpha0));
    if (enc.use_bias) {
      p.diag_lr.push_back(Tensor::full(p.encoder[l].bias.shape(), alpha0));
    }
  }
  p.diag_lr.push_back(Tensor::full(p.head.shape(), alpha0));
}

// Must mirror the param_entries() walk exactly; a unit test checks that the
// lifted leaves share storage with the entries in order.
ModelVars lift(const MetaParams& p, Tape& tape) {
  ModelVars v;
  v.params = &p;
  const EncoderSpec& enc = p.spec.encoder;
  auto as_var = [&](const Tensor& t, bool trainable) {
    return trainable ? make_leaf(tape, t) : constant(t);
  };
  for (int l = 0; l < enc.layers(); ++l) {
    const bool train = enc.is_adapted(l);
    VarLinear lin;
    lin.weight = as_var(p.encoder[l].weight, train);
    if (enc.use_bias) lin.bias = as_var(p.encoder[l].bias, train);
    v.encoder.push_back(std::move(lin));
  }
  v.head = make_leaf(tape, p.head);
  for (const auto& [l, w] : p.warp) v.warp[l] = make_leaf(tape, w);
  for (const auto& [l, f] : p.encoder_film) {
    v.encoder_film[l] = {make_leaf(tape, f.weight), make_leaf(tape, f.bias)};
  }
  auto lift_net = [&](const LossNetParams& net) {
    VarLossNet out;
    for (const LinearParams& lin : net.linear) {
      out.linear.push_back(
          {make_leaf(tape, lin.weight), make_leaf(tape, lin.bias)});
    }
    for (const FilmParams& film : net.film) {
      out.film.push_back(
          {make_leaf(tape, film.weight), make_leaf(tape, film.bias)});
    }
    return out;
  };
  v.support_net = lift_net(p.support_net);
  v.query_net = lift_net(p.query_net);
  v.reg_net = lift_net(p.reg_net);
  for (const Tensor& lr : p.diag_lr) v.diag_lr.push_back(make_leaf(tape, lr));
  return v;
}

// Keep the walk order here in sync with param_entries().
std::vector<Var*> var_entries(ModelVars& v) {
  std::vector<Var*> out;
  const EncoderSpec& enc = v.params->spec.encoder;
  for (int l = 0; l < enc.layers(); ++l) {
    out.push_back(&v.encoder[l].weight);
    if (enc.use_bias) out.push_back(&v.encoder[l].bias);
  }
  out.push_back(&v.head);
  for (auto& [l, w] : v.warp) out.push_back(&w);
  for (auto& [l, f] : v.encoder_film) {
    out.push_back(&f.weight);
    out.push_back(&f.bias);
  }
  for (VarLossNet* net : {&v.support_net, &v.query_net, &v.reg_net}) {
    for (VarLinear& lin : net->linear) {
      out.push_back(&lin.weight);
      out.push_back(&lin.bias);
    }
    for (VarFilm& film : net->film) {
      out.push_back(&film.weight);
      out.push_back(&film.bias);
    }
  }
  for (Var& lr : v.diag_lr) out.push_back(&lr);
  return out;
}

std::vector<Var> ThetaState::flat(bool with_bias) const {
  std::vector<Var> out;
  for (const VarLinear& lin : layers) {
    out.push_back(lin.weight);
    if (with_bias) out.push_back(lin.bias);
  }
  out.push_back(head);
  return out;
}

void ThetaState::assign_flat(const std::vector<Var>& tensors, bool with_bias) {
  size_t k = 0;
  for (VarLinear& lin : layers) {
    lin.weight = tensors[k++];
    if (with_bias) lin.bias = tensors[k++];
  }
  head = tensors[k++];
  if (k != tensors.size()) {
    throw ShapeError("theta: " + std::to_string(tensors.size()) +
                     " tensors, expected " + std::to_string(k));
  }
}

ThetaState initial_theta(const ModelVars& vars, int way) {
  ThetaState theta;
  const EncoderSpec& enc = vars.params->spec.encoder;
  for (int l : enc.adapted_layers) {
    theta.layer_ids.push_back(l);
    theta.layers.push_back(vars.encoder[l]);
  }
  theta.head = way >= 2 ? expand_head(vars.head, way) : vars.head;
  return theta;
}

Var film(const Var& x, const VarFilm& gen) {
  if (x.value.rank() == 1) {
    const int d = x.value.dim(0);
    return reshape(film(reshape(x, {1, d}), gen), {d});
  }
  const int batch = x.value.dim(0);
  const int d = x.value.dim(1);
  if (gen.weight.value.dim(0) != d) {
    throw ShapeError("film: generator expects extent " +
                     std::to_string(gen.weight.value.dim(0)) + ", got " +
                     x.value.shape_string());
  }
  Var gb = add(matmul(x, gen.weight), expand(gen.bias, 0, batch));
  Var gamma = slice(gb, 1, 0, d);
  Var beta = slice(gb, 1, d, d);
  return add(add(mul(gamma, x), x), beta);
}

Var expand_head(const Var& theta_head, int way) {
  if (way < 2) throw DomainError("expand_head: way must be >= 2");
  return expand(theta_head, 1, way);
}

Var encode(const ModelVars& vars, const ThetaState& theta, const Var& x,
           const ForwardOptions& opts) {
  const EncoderSpec& enc = vars.params->spec.encoder;
  if (x.value.rank() != 2 || x.value.dim(1) != enc.input_dim()) {
    throw ShapeError("encode: input " + x.value.shape_string() +
                     " for extent " + std::to_string(enc.input_dim()));
  }
  const int batch = x.value.dim(0);
  Var h = x;
  size_t adapted_slot = 0;
  for (int l = 0; l < enc.layers(); ++l) {
    const VarLinear* lin = &vars.encoder[l];
    if (enc.is_adapted(l)) {
      lin = &theta.layers[adapted_slot];
      ++adapted_slot;
    }
    h = matmul(h, lin->weight);
    if (enc.use_bias) h = add(h, expand(lin->bias, 0, batch));
    if (enc.is_warped(l)) {
      if (opts.use_warp) h = matmul(h, transpose(vars.warp.at(l)));
      if (opts.use_film) h = film(h, vars.encoder_film.at(l));
    }
    if (enc.activation(l) == Activation::Relu) h = relu(h);
    if (enc.activation(l) == Activation::Tanh) h = tanh(h);
  }
  return h;
}

Var forward(const ModelVars& vars, const ThetaState& theta, const Var& x,
            const ForwardOptions& opts) {
  return matmul(encode(vars, theta, x, opts), theta.head);
}

Tensor encode_plain(const MetaParams& p, const Tensor& x) {
  const EncoderSpec& enc = p.spec.encoder;
  if (x.rank() != 2 || x.dim(1) != enc.input_dim()) {
    throw ShapeError("encode_plain: input " + x.shape_string() +
                     " for extent " + std::to_string(enc.input_dim()));
  }
  const int batch = x.dim(0);
  Tensor h = x;
  for (int l = 0; l < enc.layers(); ++l) {
    const auto [in, out] = enc.layer_dims[l];
    Tensor next({batch, out}, h.precision());
    double* o = next.mutable_data();
    const double* hx = h.data();
    const double* w = p.encoder[l].weight.data();
    const double* b = enc.use_bias ? p.encoder[l].bias.data() : nullptr;
    for (int r = 0; r < batch; ++r) {
      for (int c = 0; c < out; ++c) {
        double acc = b ? b[c] : 0.0;
        for (int k = 0; k < in; ++k) {
          acc += hx[static_cast<std::int64_t>(r) * in + k] *
                 w[static_cast<std::int64_t>(k) * out + c];
        }
        if (enc.activation(l) == Activation::Relu && acc < 0.0) acc = 0.0;
        if (enc.activation(l) == Activation::Tanh) acc = std::tanh(acc);
        o[static_cast<std::int64_t>(r) * out + c] = acc;
      }
    }
    h = std::move(next);
  }
  return h;
}

}  // namespace metalearn
