#include "metalearn/checkpoint.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "metalearn/errors.hpp"

namespace metalearn {
namespace {

using nlohmann::json;

constexpr int kFormatVersion = 1;

const char* activation_name(Activation a) {
  if (a == Activation::Relu) return "relu";
  if (a == Activation::Tanh) return "tanh";
  return "identity";
}

Activation activation_from(const std::string& s) {
  if (s == "relu") return Activation::Relu;
  if (s == "identity") return Activation::Identity;
  if (s == "tanh") return Activation::Tanh;
  throw ConfigError("checkpoint: unknown activation '" + s + "'");
}

json tensor_to_json(const Tensor& t) {
  json j;
  j["shape"] = t.shape();
  j["precision"] = to_string(t.precision());
  std::vector<double> data(t.data(), t.data() + t.size());
  j["data"] = std::move(data);
  return j;
}

Tensor tensor_from_json(const json& j, const std::string& name) {
  const std::vector<int> shape = j.at("shape").get<std::vector<int>>();
  const Precision prec =
      precision_from_string(j.at("precision").get<std::string>());
  const std::vector<double> data = j.at("data").get<std::vector<double>>();
  Tensor t(shape, prec);
  if (static_cast<std::int64_t>(data.size()) != t.size()) {
    throw IoError("checkpoint: tensor '" + name + "' has " +
                  std::to_string(data.size()) + " values for shape " +
                  t.shape_string());
  }
  std::copy(data.begin(), data.end(), t.mutable_data());
  return t.rounded();
}

json spec_to_json(const ModelSpec& spec, bool diagonal_lr) {
  json enc;
  enc["layer_dims"] = spec.encoder.layer_dims;
  enc["warped"] = spec.encoder.warped_layers;
  enc["adapted"] = spec.encoder.adapted_layers;
  std::vector<std::string> acts;
  for (Activation a : spec.encoder.activations) {
    acts.push_back(activation_name(a));
  }
  enc["activations"] = acts;
  enc["use_bias"] = spec.encoder.use_bias;

  json j;
  j["classification"] = spec.classification;
  j["way"] = spec.way;
  j["loss_hidden"] = spec.loss_hidden;
  j["encoder"] = enc;
  j["diagonal_lr"] = diagonal_lr;
  return j;
}

ModelSpec spec_from_json(const json& j, bool& diagonal_lr) {
  ModelSpec spec;
  spec.classification = j.at("classification").get<bool>();
  spec.way = j.at("way").get<int>();
  spec.loss_hidden = j.at("loss_hidden").get<int>();
  const json& enc = j.at("encoder");
  spec.encoder.layer_dims =
      enc.at("layer_dims").get<std::vector<std::pair<int, int>>>();
  spec.encoder.warped_layers = enc.at("warped").get<std::vector<int>>();
  spec.encoder.adapted_layers = enc.at("adapted").get<std::vector<int>>();
  for (const std::string& s :
       enc.at("activations").get<std::vector<std::string>>()) {
    spec.encoder.activations.push_back(activation_from(s));
  }
  spec.encoder.use_bias = enc.at("use_bias").get<bool>();
  diagonal_lr = j.at("diagonal_lr").get<bool>();
  spec.validate();
  return spec;
}

}  // namespace

void save_checkpoint(const std::string& path, MetaParams& params,
                     const AdamState& adam, long step, double best_val) {
  json j;
  j["format_version"] = kFormatVersion;
  j["step"] = step;
  if (std::isfinite(best_val)) {
    j["best_val_loss"] = best_val;
  } else {
    j["best_val_loss"] = nullptr;
  }
  j["spec"] = spec_to_json(params.spec, !params.diag_lr.empty());

  json tensors = json::object();
  json adam_m = json::object();
  json adam_v = json::object();
  size_t t = 0;
  for (const ParamEntry& e : param_entries(params)) {
    tensors[e.name] = tensor_to_json(*e.tensor);
    if (e.trainable) {
      if (t < adam.m.size()) {
        adam_m[e.name] = tensor_to_json(adam.m[t]);
        adam_v[e.name] = tensor_to_json(adam.v[t]);
      }
      ++t;
    }
  }
  j["params"] = std::move(tensors);
  if (!adam.m.empty()) {
    j["adam"] = {{"step", adam.step},
                 {"m", std::move(adam_m)},
                 {"v", std::move(adam_v)}};
  }

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError("checkpoint: cannot open '" + tmp + "'");
    out << j.dump();
    if (!out) throw IoError("checkpoint: write to '" + tmp + "' failed");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw IoError("checkpoint: rename to '" + path + "' failed");
  }
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("checkpoint: cannot open '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw IoError("checkpoint: '" + path + "' is not valid JSON: " + e.what());
  }
  try {
    if (j.at("format_version").get<int>() != kFormatVersion) {
      throw IoError("checkpoint: unsupported format_version in '" + path +
                    "'");
    }
    Checkpoint ck;
    ck.step = j.at("step").get<long>();
    if (!j.at("best_val_loss").is_null()) {
      ck.best_val = j.at("best_val_loss").get<double>();
    }

    bool diagonal_lr = false;
    const ModelSpec spec = spec_from_json(j.at("spec"), diagonal_lr);
    ck.params = init_meta_params(spec, std::nullopt, 0);
    if (diagonal_lr) enable_diagonal_lr(ck.params, 0.0);

    const json& tensors = j.at("params");
    size_t consumed = 0;
    for (const ParamEntry& e : param_entries(ck.params)) {
      auto it = tensors.find(e.name);
      if (it == tensors.end()) {
        throw IoError("checkpoint: missing tensor '" + e.name + "'");
      }
      Tensor t = tensor_from_json(*it, e.name);
      if (t.shape() != e.tensor->shape()) {
        throw IoError("checkpoint: tensor '" + e.name + "' has shape " +
                      t.shape_string() + ", spec implies " +
                      e.tensor->shape_string());
      }
      *e.tensor = std::move(t);
      ++consumed;
    }
    if (consumed != tensors.size()) {
      throw IoError("checkpoint: '" + path + "' carries " +
                    std::to_string(tensors.size()) + " tensors, spec implies " +
                    std::to_string(consumed));
    }

    if (j.contains("adam")) {
      const json& a = j.at("adam");
      ck.adam.step = a.at("step").get<long>();
      for (const ParamEntry& e : param_entries(ck.params)) {
        if (!e.trainable) continue;
        Tensor m = tensor_from_json(a.at("m").at(e.name), e.name + ".m");
        Tensor v = tensor_from_json(a.at("v").at(e.name), e.name + ".v");
        if (m.shape() != e.tensor->shape() || v.shape() != e.tensor->shape()) {
          throw IoError("checkpoint: moment shape mismatch at '" + e.name +
                        "'");
        }
        ck.adam.m.push_back(std::move(m));
        ck.adam.v.push_back(std::move(v));
      }
    }
    return ck;
  } catch (const json::exception& e) {
    throw IoError("checkpoint: '" + path + "' is malformed: " + e.what());
  }
}

}  // namespace metalearn
