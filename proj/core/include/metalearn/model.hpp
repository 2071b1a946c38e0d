#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "metalearn/tape.hpp"
#include "metalearn/tensor.hpp"
#include "metalearn/var.hpp"

namespace metalearn {

enum class Activation { Relu, Identity, Tanh };

// Fully connected encoder layout. Warped layers carry a square mixing matrix
// and a FiLM generator; adapted layers are the ones the inner loop updates
// (the rest stay at their, typically pre-trained, initialization and receive
// no meta-update either).
struct EncoderSpec {
  std::vector<std::pair<int, int>> layer_dims;  // (in, out) per layer
  std::vector<int> warped_layers;               // 0-based layer indices
  std::vector<int> adapted_layers;              // 0-based layer indices
  std::vector<Activation> activations;          // empty = ReLU everywhere
  bool use_bias = true;

  int layers() const { return static_cast<int>(layer_dims.size()); }
  int input_dim() const { return layer_dims.front().first; }
  int feature_dim() const { return layer_dims.back().second; }
  bool is_warped(int layer) const;
  bool is_adapted(int layer) const;
  Activation activation(int layer) const;
  void validate() const;

  // dims = {in, hidden..., feature}.
  static EncoderSpec mlp(const std::vector<int>& dims,
                         std::vector<int> warped, std::vector<int> adapted);
};

// Encoder plus task interface: way/loss-net sizing. The learned loss
// networks read 2N+1 inputs for N-way classification and 3 for regression
// (target, prediction, loss); the regularizer reads 4 statistics per adapted
// layer, head included.
struct ModelSpec {
  EncoderSpec encoder;
  bool classification = true;
  int way = 5;
  int loss_hidden = 40;

  int loss_in() const { return classification ? 2 * way + 1 : 3; }
  int adapted_layer_count() const {
    return static_cast<int>(encoder.adapted_layers.size()) + 1;
  }
  int reg_in() const { return 4 * adapted_layer_count(); }
  void validate() const;
};

struct LinearParams {
  Tensor weight;  // [in, out]
  Tensor bias;    // [1, out]; empty when the spec disables biases
};

struct FilmParams {
  Tensor weight;  // [d, 2d]
  Tensor bias;    // [1, 2d]
};

// One learned loss network: three linear layers (the phi group) with a FiLM
// generator after each hidden layer (the psi group).
struct LossNetParams {
  std::vector<LinearParams> linear;
  std::vector<FilmParams> film;
};

enum class ParamGroup { Theta, Omega, Phi, Psi };
const char* to_string(ParamGroup g);

// Everything the outer loop can learn, plus the frozen encoder layers needed
// to run the model. diag_lr is populated only in the elementwise
// learning-rate mode (one tensor per adapted parameter, canonical order).
struct MetaParams {
  ModelSpec spec;
  std::vector<LinearParams> encoder;
  Tensor head;  // [feature_dim, 1]
  std::map<int, Tensor> warp;
  std::map<int, FilmParams> encoder_film;
  LossNetParams support_net;
  LossNetParams query_net;
  LossNetParams reg_net;
  std::vector<Tensor> diag_lr;
};

// Canonical flat view over MetaParams. Checkpoints, gradient reductions and
// the finite-difference oracle all iterate this order, so it must stay
// stable. Frozen encoder layers appear with trainable=false.
struct ParamEntry {
  std::string name;
  ParamGroup group;
  Tensor* tensor;
  bool trainable;
};
std::vector<ParamEntry> param_entries(MetaParams& params);

// Random initialization: fan-in-scaled theta (or the given pretrained
// encoder), identity warps, small-normal loss-net and FiLM weights.
MetaParams init_meta_params(
    const ModelSpec& spec,
    const std::optional<std::vector<LinearParams>>& pretrained_encoder,
    std::uint64_t seed);

// Switches the model into the elementwise learning-rate parameterization,
// seeding every rate at alpha0.
void enable_diagonal_lr(MetaParams& params, double alpha0);

struct VarLinear {
  Var weight;
  Var bias;
};
struct VarFilm {
  Var weight;
  Var bias;
};
struct VarLossNet {
  std::vector<VarLinear> linear;
  std::vector<VarFilm> film;
};

// MetaParams lifted onto an episode tape: leaves for trainable tensors,
// constants for frozen ones. One ModelVars per episode; never shared across
// tapes.
struct ModelVars {
  const MetaParams* params = nullptr;
  std::vector<VarLinear> encoder;
  Var head;
  std::map<int, Var> warp;
  std::map<int, VarFilm> encoder_film;
  VarLossNet support_net;
  VarLossNet query_net;
  VarLossNet reg_net;
  std::vector<Var> diag_lr;
};
ModelVars lift(const MetaParams& params, Tape& tape);

// The lifted Vars in param_entries order, one per entry; frozen entries are
// the constants lift() made for them.
std::vector<Var*> var_entries(ModelVars& vars);

// The tensors the inner loop updates: adapted encoder layers plus the
// (expanded) head, kept in a fixed flat order so gradient lists line up.
struct ThetaState {
  std::vector<int> layer_ids;
  std::vector<VarLinear> layers;
  Var head;

  std::vector<Var> flat(bool with_bias) const;
  void assign_flat(const std::vector<Var>& tensors, bool with_bias);
};

// theta_0 for one episode: shares the meta-init leaves, expands the head to
// `way` columns for classification (way=1 keeps the raw vector).
ThetaState initial_theta(const ModelVars& vars, int way);

// (gamma(x) + 1) * x + beta(x), with gamma/beta generated from x itself.
Var film(const Var& x, const VarFilm& gen);

// Duplicates the single head vector into `way` identical columns.
Var expand_head(const Var& theta_head, int way);

struct ForwardOptions {
  bool use_warp = true;
  bool use_film = true;
};

// Encoder features for a [batch, in] input.
Var encode(const ModelVars& vars, const ThetaState& theta, const Var& x,
           const ForwardOptions& opts);

// Features through the head: [batch, way] logits.
Var forward(const ModelVars& vars, const ThetaState& theta, const Var& x,
            const ForwardOptions& opts);

// Tape-free plain-theta encoder pass (no warp, no FiLM); used by the
// relation surrogate and the pre-trainer's evaluation path.
Tensor encode_plain(const MetaParams& params, const Tensor& x);

}  // namespace metalearn
