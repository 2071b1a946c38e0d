#include "metalearn/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "metalearn/checkpoint.hpp"
#include "metalearn/errors.hpp"

namespace metalearn {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

void check_fields(const json& j, const std::string& scope,
                  std::initializer_list<const char*> allowed) {
  if (!j.is_object()) {
    throw ConfigError("config: '" + scope + "' must be an object");
  }
  for (const auto& item : j.items()) {
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) {
          return item.key() == a;
        }) == allowed.end()) {
      throw ConfigError("config: unknown field '" + scope + "." + item.key() +
                        "'");
    }
  }
}

template <typename T>
T get_or(const json& j, const std::string& scope, const char* key, T def) {
  if (!j.contains(key)) return def;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config: field '" + scope + "." + key +
                      "' has the wrong type");
  }
}

// Output precision decorator: the wrapped family's draws are converted after
// sampling, keeping the draw sequence identical across precisions.
class PrecisionFamily : public TaskFamily {
 public:
  PrecisionFamily(const TaskFamily& base, Precision prec)
      : base_(base), prec_(prec) {}
  bool classification() const override { return base_.classification(); }
  int input_dim() const override { return base_.input_dim(); }
  Episode sample(const TaskSpec& spec, Split split, Rng& rng) const override {
    Episode ep = base_.sample(spec, split, rng);
    ep.support_x = ep.support_x.astype(prec_);
    ep.query_x = ep.query_x.astype(prec_);
    if (ep.support_t.size() > 0) ep.support_t = ep.support_t.astype(prec_);
    if (ep.query_t.size() > 0) ep.query_t = ep.query_t.astype(prec_);
    return ep;
  }

 private:
  const TaskFamily& base_;
  Precision prec_;
};

void convert_params(MetaParams& params, Precision prec) {
  for (const ParamEntry& e : param_entries(params)) {
    *e.tensor = e.tensor->astype(prec);
  }
}

json variant_to_json(const VariantSpec& v) {
  json j;
  j["name"] = v.name;
  j["use_warp"] = v.flags.use_warp;
  j["use_film"] = v.flags.use_film;
  j["use_support_loss"] = v.flags.use_support_loss;
  j["use_query_loss"] = v.flags.use_query_loss;
  j["use_regularizer"] = v.flags.use_regularizer;
  j["diagonal_lr"] = v.diagonal_lr;
  return j;
}

VariantSpec variant_from_json(const json& j) {
  if (j.is_string()) return variant_preset(j.get<std::string>());
  check_fields(j, "variant",
               {"name", "use_warp", "use_film", "use_support_loss",
                "use_query_loss", "use_regularizer", "diagonal_lr"});
  VariantSpec v;
  v.name = get_or<std::string>(j, "variant", "name", "custom");
  v.flags.use_warp = get_or(j, "variant", "use_warp", false);
  v.flags.use_film = get_or(j, "variant", "use_film", false);
  v.flags.use_support_loss = get_or(j, "variant", "use_support_loss", false);
  v.flags.use_query_loss = get_or(j, "variant", "use_query_loss", false);
  v.flags.use_regularizer = get_or(j, "variant", "use_regularizer", false);
  v.diagonal_lr = get_or(j, "variant", "diagonal_lr", false);
  return v;
}

json config_to_json(const ExperimentConfig& c) {
  json j;
  j["schema_version"] = c.schema_version;

  json fam;
  fam["kind"] = to_string(c.family_kind);
  fam["sinusoid"] = {{"amp_lo", c.sinusoid.amp_lo},
                     {"amp_hi", c.sinusoid.amp_hi},
                     {"phase_lo", c.sinusoid.phase_lo},
                     {"phase_hi", c.sinusoid.phase_hi},
                     {"x_lo", c.sinusoid.x_lo},
                     {"x_hi", c.sinusoid.x_hi},
                     {"noise", c.sinusoid.noise}};
  fam["clusters"] = {{"classes_train", c.clusters.classes_train},
                     {"classes_val", c.clusters.classes_val},
                     {"classes_test", c.clusters.classes_test},
                     {"dim", c.clusters.dim},
                     {"radius", c.clusters.radius},
                     {"scale_lo", c.clusters.scale_lo},
                     {"scale_hi", c.clusters.scale_hi},
                     {"seed", c.clusters.seed}};
  j["family"] = fam;

  j["task"] = {{"way", c.task.way},
               {"shot", c.task.shot},
               {"query_per_class", c.task.query_per_class}};
  j["encoder"] = {{"dims", c.encoder_dims},
                  {"warped", c.warped_layers},
                  {"adapted", c.adapted_layers},
                  {"use_bias", c.encoder_bias}};
  j["inner"] = {{"alpha", c.inner.alpha},
                {"steps", c.inner.steps},
                {"momentum", c.inner.momentum},
                {"weight_decay", c.inner.weight_decay},
                {"first_order", c.inner.first_order},
                {"divergence_threshold", c.inner.divergence_threshold}};
  j["meta"] = {{"eta", c.meta.eta},
               {"meta_batch", c.meta.meta_batch},
               {"steps", c.meta.steps},
               {"beta1", c.meta.beta1},
               {"beta2", c.meta.beta2},
               {"epsilon", c.meta.epsilon},
               {"val_interval", c.meta.val_interval},
               {"val_episodes", c.meta.val_episodes},
               {"clip_norm", c.meta.clip_norm},
               {"workers", c.meta.workers}};
  j["variant"] = variant_to_json(c.variant);
  j["pretrain"] = {{"steps", c.pretrain.steps},
                   {"batch", c.pretrain.batch},
                   {"lr", c.pretrain.lr},
                   {"momentum", c.pretrain.momentum},
                   {"weight_decay", c.pretrain.weight_decay}};
  j["eval"] = {{"episodes", c.eval_episodes}};
  j["seeds"] = c.seeds;
  j["out"] = c.out_dir;
  j["precision"] = to_string(c.precision);
  return j;
}

}  // namespace

const char* to_string(FamilyKind k) {
  return k == FamilyKind::Sinusoid ? "sinusoid" : "clusters";
}

VariantSpec variant_preset(const std::string& name) {
  VariantSpec v;
  v.name = name;
  if (name == "maml") return v;
  if (name == "metasgd") {
    v.diagonal_lr = true;
    return v;
  }
  if (name == "full") {
    v.flags = VariantFlags::all();
    return v;
  }
  throw ConfigError("config: unknown variant preset '" + name + "'");
}

ExperimentConfig parse_experiment_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: not valid JSON: ") + e.what());
  }
  check_fields(j, "",
               {"schema_version", "family", "task", "encoder", "inner", "meta",
                "variant", "pretrain", "eval", "seeds", "out", "precision"});

  ExperimentConfig c;
  c.schema_version = get_or(j, "", "schema_version", 1);
  if (c.schema_version != 1) {
    throw ConfigError("config: unsupported schema_version " +
                      std::to_string(c.schema_version));
  }

  if (j.contains("family")) {
    const json& fam = j.at("family");
    check_fields(fam, "family", {"kind", "sinusoid", "clusters"});
    const std::string kind = get_or<std::string>(fam, "family", "kind",
                                                 "clusters");
    if (kind == "sinusoid") {
      c.family_kind = FamilyKind::Sinusoid;
    } else if (kind == "clusters") {
      c.family_kind = FamilyKind::Clusters;
    } else {
      throw ConfigError("config: unknown family.kind '" + kind + "'");
    }
    if (fam.contains("sinusoid")) {
      const json& s = fam.at("sinusoid");
      check_fields(s, "family.sinusoid",
                   {"amp_lo", "amp_hi", "phase_lo", "phase_hi", "x_lo", "x_hi",
                    "noise"});
      c.sinusoid.amp_lo = get_or(s, "family.sinusoid", "amp_lo",
                                 c.sinusoid.amp_lo);
      c.sinusoid.amp_hi = get_or(s, "family.sinusoid", "amp_hi",
                                 c.sinusoid.amp_hi);
      c.sinusoid.phase_lo = get_or(s, "family.sinusoid", "phase_lo",
                                   c.sinusoid.phase_lo);
      c.sinusoid.phase_hi = get_or(s, "family.sinusoid", "phase_hi",
                                   c.sinusoid.phase_hi);
      c.sinusoid.x_lo = get_or(s, "family.sinusoid", "x_lo", c.sinusoid.x_lo);
      c.sinusoid.x_hi = get_or(s, "family.sinusoid", "x_hi", c.sinusoid.x_hi);
      c.sinusoid.noise = get_or(s, "family.sinusoid", "noise",
                                c.sinusoid.noise);
    }
    if (fam.contains("clusters")) {
      const json& cl = fam.at("clusters");
      check_fields(cl, "family.clusters",
                   {"classes_train", "classes_val", "classes_test", "dim",
                    "radius", "scale_lo", "scale_hi", "seed"});
      c.clusters.classes_train = get_or(cl, "family.clusters", "classes_train",
                                        c.clusters.classes_train);
      c.clusters.classes_val = get_or(cl, "family.clusters", "classes_val",
                                      c.clusters.classes_val);
      c.clusters.classes_test = get_or(cl, "family.clusters", "classes_test",
                                       c.clusters.classes_test);
      c.clusters.dim = get_or(cl, "family.clusters", "dim", c.clusters.dim);
      c.clusters.radius = get_or(cl, "family.clusters", "radius",
                                 c.clusters.radius);
      c.clusters.scale_lo = get_or(cl, "family.clusters", "scale_lo",
                                   c.clusters.scale_lo);
      c.clusters.scale_hi = get_or(cl, "family.clusters", "scale_hi",
                                   c.clusters.scale_hi);
      c.clusters.seed = get_or(cl, "family.clusters", "seed",
                               c.clusters.seed);
    }
  }

  if (j.contains("task")) {
    const json& t = j.at("task");
    check_fields(t, "task", {"way", "shot", "query_per_class"});
    c.task.way = get_or(t, "task", "way", c.task.way);
    c.task.shot = get_or(t, "task", "shot", c.task.shot);
    c.task.query_per_class = get_or(t, "task", "query_per_class",
                                    c.task.query_per_class);
  }
  c.task.classification = c.family_kind == FamilyKind::Clusters;
  c.task.input_dim =
      c.family_kind == FamilyKind::Clusters ? c.clusters.dim : 1;

  // Family-shaped encoder defaults; explicit keys win.
  if (c.family_kind == FamilyKind::Clusters) {
    c.encoder_dims = {c.clusters.dim, 64, 64, 64};
  } else {
    c.encoder_dims = {1, 40, 40, 16};
  }
  const int default_last = static_cast<int>(c.encoder_dims.size()) - 2;
  c.warped_layers = {default_last};
  c.adapted_layers = {default_last};
  if (j.contains("encoder")) {
    const json& e = j.at("encoder");
    check_fields(e, "encoder", {"dims", "warped", "adapted", "use_bias"});
    c.encoder_dims = get_or(e, "encoder", "dims", c.encoder_dims);
    const int last = static_cast<int>(c.encoder_dims.size()) - 2;
    c.warped_layers = get_or(e, "encoder", "warped", std::vector<int>{last});
    c.adapted_layers = get_or(e, "encoder", "adapted", std::vector<int>{last});
    c.encoder_bias = get_or(e, "encoder", "use_bias", c.encoder_bias);
  }

  if (j.contains("inner")) {
    const json& in = j.at("inner");
    check_fields(in, "inner",
                 {"alpha", "steps", "momentum", "weight_decay", "first_order",
                  "divergence_threshold"});
    c.inner.alpha = get_or(in, "inner", "alpha", c.inner.alpha);
    c.inner.steps = get_or(in, "inner", "steps", c.inner.steps);
    c.inner.momentum = get_or(in, "inner", "momentum", c.inner.momentum);
    c.inner.weight_decay = get_or(in, "inner", "weight_decay",
                                  c.inner.weight_decay);
    c.inner.first_order = get_or(in, "inner", "first_order",
                                 c.inner.first_order);
    c.inner.divergence_threshold = get_or(in, "inner", "divergence_threshold",
                                          c.inner.divergence_threshold);
  }

  if (j.contains("meta")) {
    const json& m = j.at("meta");
    check_fields(m, "meta",
                 {"eta", "meta_batch", "steps", "beta1", "beta2", "epsilon",
                  "val_interval", "val_episodes", "clip_norm", "workers"});
    c.meta.eta = get_or(m, "meta", "eta", c.meta.eta);
    c.meta.meta_batch = get_or(m, "meta", "meta_batch", c.meta.meta_batch);
    c.meta.steps = get_or(m, "meta", "steps", c.meta.steps);
    c.meta.beta1 = get_or(m, "meta", "beta1", c.meta.beta1);
    c.meta.beta2 = get_or(m, "meta", "beta2", c.meta.beta2);
    c.meta.epsilon = get_or(m, "meta", "epsilon", c.meta.epsilon);
    c.meta.val_interval = get_or(m, "meta", "val_interval",
                                 c.meta.val_interval);
    c.meta.val_episodes = get_or(m, "meta", "val_episodes",
                                 c.meta.val_episodes);
    c.meta.clip_norm = get_or(m, "meta", "clip_norm", c.meta.clip_norm);
    c.meta.workers = get_or(m, "meta", "workers", c.meta.workers);
  }

  if (j.contains("variant")) c.variant = variant_from_json(j.at("variant"));

  if (j.contains("pretrain")) {
    const json& p = j.at("pretrain");
    check_fields(p, "pretrain",
                 {"steps", "batch", "lr", "momentum", "weight_decay"});
    c.pretrain.steps = get_or(p, "pretrain", "steps", c.pretrain.steps);
    c.pretrain.batch = get_or(p, "pretrain", "batch", c.pretrain.batch);
    c.pretrain.lr = get_or(p, "pretrain", "lr", c.pretrain.lr);
    c.pretrain.momentum = get_or(p, "pretrain", "momentum",
                                 c.pretrain.momentum);
    c.pretrain.weight_decay = get_or(p, "pretrain", "weight_decay",
                                     c.pretrain.weight_decay);
  }

  if (j.contains("eval")) {
    const json& e = j.at("eval");
    check_fields(e, "eval", {"episodes"});
    c.eval_episodes = get_or(e, "eval", "episodes", c.eval_episodes);
  }

  c.seeds = get_or(j, "", "seeds", c.seeds);
  c.out_dir = get_or(j, "", "out", c.out_dir);
  if (j.contains("precision")) {
    c.precision =
        precision_from_string(get_or<std::string>(j, "", "precision",
                                                  "double"));
  }
  c.validate();
  return c;
}

std::string resolved_config_text(const ExperimentConfig& config) {
  return config_to_json(config).dump(2) + "\n";
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_experiment_config(ss.str());
}

void save_experiment_config(const std::string& path,
                            const ExperimentConfig& config) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("config: cannot open '" + path + "' for writing");
  out << resolved_config_text(config);
  if (!out) throw IoError("config: write to '" + path + "' failed");
}

void ExperimentConfig::validate() const {
  task.validate();
  inner.validate();
  meta.validate();
  if (encoder_dims.size() < 2) {
    throw ConfigError("config: encoder.dims needs at least input and output");
  }
  const int in_dim =
      family_kind == FamilyKind::Clusters ? clusters.dim : 1;
  if (encoder_dims.front() != in_dim) {
    throw ConfigError("config: encoder.dims starts at " +
                      std::to_string(encoder_dims.front()) +
                      ", family produces " + std::to_string(in_dim) +
                      "-dim inputs");
  }
  if ((variant.flags.use_warp || variant.flags.use_film) &&
      warped_layers.empty()) {
    throw ConfigError(
        "config: variant uses warp/film but encoder.warped is empty");
  }
  if (pretrain.steps > 0 && family_kind != FamilyKind::Clusters) {
    throw ConfigError("config: pretrain requires a classification family");
  }
  if (eval_episodes < 1) throw ConfigError("config: eval.episodes must be >= 1");
  if (seeds.empty()) throw ConfigError("config: seeds must be non-empty");
  if (out_dir.empty()) throw ConfigError("config: out must be non-empty");
  model_spec().validate();
}

ModelSpec ExperimentConfig::model_spec() const {
  ModelSpec spec;
  spec.encoder = EncoderSpec::mlp(encoder_dims, warped_layers, adapted_layers);
  spec.encoder.use_bias = encoder_bias;
  spec.classification = family_kind == FamilyKind::Clusters;
  spec.way = spec.classification ? task.way : 1;
  return spec;
}

InnerConfig ExperimentConfig::resolved_inner() const {
  InnerConfig r = inner;
  r.flags = variant.flags;
  r.diagonal_lr = variant.diagonal_lr;
  return r;
}

std::unique_ptr<TaskFamily> ExperimentConfig::make_family() const {
  if (family_kind == FamilyKind::Sinusoid) {
    return std::make_unique<SinusoidFamily>(sinusoid);
  }
  return std::make_unique<ClusterFamily>(clusters);
}

std::unique_ptr<Embedder> ExperimentConfig::make_embedder() const {
  if (family_kind == FamilyKind::Sinusoid) {
    return std::make_unique<MeanTargetEmbedder>();
  }
  return std::make_unique<PrototypeEmbedder>();
}

Summary summarize(const std::vector<double>& xs) {
  Summary s;
  s.n = static_cast<int>(xs.size());
  if (s.n == 0) return s;
  double sum = 0.0;
  for (double x : xs) sum += x;
  s.mean = sum / s.n;
  if (s.n < 2) return s;
  double sq = 0.0;
  for (double x : xs) sq += (x - s.mean) * (x - s.mean);
  const double sd = std::sqrt(sq / (s.n - 1));
  s.half_width = 1.96 * sd / std::sqrt(static_cast<double>(s.n));
  return s;
}

void write_task_csv(const std::string& path, const EvalSamples& samples,
                    bool classification) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("csv: cannot open '" + path + "'");
  out << "task_index," << (classification ? "accuracy" : "loss")
      << ",support_seed\n";
  out << std::setprecision(17);
  for (size_t i = 0; i < samples.losses.size(); ++i) {
    const double value =
        classification ? samples.accuracies[i] : samples.losses[i];
    out << i << "," << value << "," << samples.seeds[i] << "\n";
  }
  if (!out) throw IoError("csv: write to '" + path + "' failed");
}

std::vector<double> read_task_csv_values(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("csv: cannot open '" + path + "'");
  std::vector<double> values;
  std::string line;
  if (!std::getline(in, line)) {
    throw IoError("csv: '" + path + "' is empty");
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const size_t a = line.find(',');
    const size_t b = line.find(',', a + 1);
    if (a == std::string::npos || b == std::string::npos) {
      throw IoError("csv: malformed record in '" + path + "'");
    }
    values.push_back(std::stod(line.substr(a + 1, b - a - 1)));
  }
  return values;
}

namespace {

json summary_to_json(const Summary& s) {
  return {{"n", s.n}, {"mean", s.mean}, {"half_width", s.half_width}};
}

}  // namespace

void write_eval_report(const std::string& path, const EvalReport& report) {
  json j;
  j["classification"] = report.classification;
  j["task_count"] = report.task_count;
  j["pooled_loss"] = summary_to_json(report.pooled_loss);
  if (report.classification) {
    j["pooled_accuracy"] = summary_to_json(report.pooled_accuracy);
  }
  json per = json::array();
  for (const SeedReport& r : report.per_seed) {
    json e;
    e["seed"] = r.seed;
    e["loss"] = summary_to_json(r.loss);
    if (report.classification) e["accuracy"] = summary_to_json(r.accuracy);
    e["dropped"] = r.dropped;
    per.push_back(std::move(e));
  }
  j["per_seed"] = std::move(per);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("report: cannot open '" + path + "'");
  out << j.dump(2) << "\n";
  if (!out) throw IoError("report: write to '" + path + "' failed");
}

EvalReport evaluate_params(const MetaParams& params, const TaskFamily& family,
                           const TaskSpec& spec, Split split, int episodes,
                           const std::vector<std::uint64_t>& seeds,
                           const InnerConfig& inner, const Embedder& embedder,
                           int workers, const std::string& csv_dir) {
  EvalReport report;
  report.classification = spec.classification;
  std::vector<double> all_losses;
  std::vector<double> all_accs;
  for (size_t i = 0; i < seeds.size(); ++i) {
    const EvalSamples samples =
        evaluate_episodes(params, family, spec, split, episodes, seeds[i],
                          kTagEval, inner, embedder, workers);
    if (!csv_dir.empty()) {
      write_task_csv(csv_dir + "/tasks_seed" + std::to_string(i) + ".csv",
                     samples, spec.classification);
    }
    SeedReport sr;
    sr.seed = seeds[i];
    sr.loss = summarize(samples.losses);
    sr.accuracy = summarize(samples.accuracies);
    sr.dropped = samples.dropped;
    report.per_seed.push_back(sr);
    all_losses.insert(all_losses.end(), samples.losses.begin(),
                      samples.losses.end());
    all_accs.insert(all_accs.end(), samples.accuracies.begin(),
                    samples.accuracies.end());
  }
  report.pooled_loss = summarize(all_losses);
  report.pooled_accuracy = summarize(all_accs);
  report.task_count = static_cast<int>(all_losses.size());
  return report;
}

EvalReport run_experiment(const ExperimentConfig& config) {
  config.validate();
  fs::create_directories(config.out_dir);
  save_experiment_config(config.out_dir + "/config.json", config);

  const std::unique_ptr<TaskFamily> base_family = config.make_family();
  const TaskFamily* family = base_family.get();
  std::unique_ptr<TaskFamily> wrapped;
  if (config.precision == Precision::Single) {
    wrapped = std::make_unique<PrecisionFamily>(*base_family,
                                                Precision::Single);
    family = wrapped.get();
  }
  const std::unique_ptr<Embedder> embedder = config.make_embedder();
  const ModelSpec mspec = config.model_spec();
  const InnerConfig inner = config.resolved_inner();

  EvalReport report;
  report.classification = config.task.classification;
  std::vector<double> all_losses;
  std::vector<double> all_accs;

  for (size_t i = 0; i < config.seeds.size(); ++i) {
    const std::uint64_t seed = config.seeds[i];
    const std::string seed_dir =
        config.out_dir + "/seed" + std::to_string(i);
    fs::create_directories(seed_dir);

    std::optional<std::vector<LinearParams>> pretrained;
    if (config.pretrain.steps > 0) {
      ClusterFamily pre_family(config.clusters);
      PretrainConfig pc = config.pretrain;
      pc.seed = derive_seed(seed, kTagPretrain);
      pretrained = pretrain_encoder(pre_family, mspec.encoder, pc).encoder;
    }
    MetaParams params = init_meta_params(mspec, pretrained, seed);
    if (config.variant.diagonal_lr) {
      enable_diagonal_lr(params, config.inner.alpha);
    }
    if (config.precision == Precision::Single) {
      convert_params(params, Precision::Single);
    }

    MetaConfig mc = config.meta;
    mc.seed = seed;
    TrainPaths paths;
    paths.metrics = seed_dir + "/metrics.jsonl";
    paths.best = seed_dir + "/best.json";
    paths.last = seed_dir + "/last.json";
    const TrainResult tr =
        meta_train(params, *family, config.task, mc, inner, *embedder, paths);
    write_plot_data(paths.metrics, seed_dir);

    if (tr.has_best) {
      params = load_checkpoint(paths.best).params;
    }
    const EvalSamples samples = evaluate_episodes(
        params, *family, config.task, Split::Test, config.eval_episodes, seed,
        kTagEval, inner, *embedder, config.meta.workers);
    write_task_csv(seed_dir + "/tasks.csv", samples,
                   config.task.classification);

    SeedReport sr;
    sr.seed = seed;
    sr.loss = summarize(samples.losses);
    sr.accuracy = summarize(samples.accuracies);
    sr.dropped = samples.dropped;
    report.per_seed.push_back(sr);
    all_losses.insert(all_losses.end(), samples.losses.begin(),
                      samples.losses.end());
    all_accs.insert(all_accs.end(), samples.accuracies.begin(),
                    samples.accuracies.end());
  }

  report.pooled_loss = summarize(all_losses);
  report.pooled_accuracy = summarize(all_accs);
  report.task_count = static_cast<int>(all_losses.size());
  write_eval_report(config.out_dir + "/report.json", report);
  return report;
}

EvalReport evaluate_checkpoint(const std::string& checkpoint_path,
                               const ExperimentConfig& config, Split split,
                               int episodes, std::uint64_t seed,
                               const std::string& csv_dir) {
  if (split == Split::Train) {
    throw ConfigError(
        "evaluate: refusing to score the meta-train class pool; use the val "
        "or test split");
  }
  const Checkpoint ck = load_checkpoint(checkpoint_path);
  const std::unique_ptr<TaskFamily> family = config.make_family();
  const std::unique_ptr<Embedder> embedder = config.make_embedder();
  if (!csv_dir.empty()) fs::create_directories(csv_dir);
  return evaluate_params(ck.params, *family, config.task, split, episodes,
                         {seed}, config.resolved_inner(), *embedder,
                         config.meta.workers, csv_dir);
}

std::vector<AblationRow> ablation_rows() {
  auto flags = [](bool warp, bool film, bool sup, bool query, bool reg) {
    VariantFlags f;
    f.use_warp = warp;
    f.use_film = film;
    f.use_support_loss = sup;
    f.use_query_loss = query;
    f.use_regularizer = reg;
    return f;
  };
  std::vector<AblationRow> rows(10);
  auto set = [&](int idx, const std::string& name, VariantFlags f,
                 int shared = -1) {
    AblationRow& r = rows[idx - 1];
    r.index = idx;
    r.name = name;
    r.variant.name = name;
    r.variant.flags = f;
    r.shared_with = shared;
  };
  set(1, "init_only", flags(false, false, false, false, false));
  set(2, "warp", flags(true, false, false, false, false));
  set(3, "learned_loss", flags(false, false, true, true, true));
  set(4, "warp_learned_loss", flags(true, false, true, true, true));
  set(5, "full", flags(true, true, true, true, true));
  set(6, "base_loss_only", flags(false, false, false, false, false), 1);
  set(7, "inductive_term", flags(false, false, true, false, false));
  set(8, "transductive_term", flags(false, false, false, true, false));
  set(9, "regularizer_term", flags(false, false, false, false, true));
  set(10, "all_loss_terms", flags(false, false, true, true, true), 3);
  return rows;
}

std::vector<AblationRow> run_ablation(const ExperimentConfig& base) {
  base.validate();
  fs::create_directories(base.out_dir);
  std::vector<AblationRow> rows = ablation_rows();
  for (AblationRow& row : rows) {
    if (row.shared_with >= 0) continue;
    ExperimentConfig cfg = base;
    cfg.variant = row.variant;
    cfg.out_dir = base.out_dir + "/rows/" + std::to_string(row.index) + "_" +
                  row.name;
    try {
      row.report = run_experiment(cfg);
    } catch (const Error& e) {
      row.failed = true;
      row.error = e.what();
      std::cerr << "warning: ablation row " << row.index << " (" << row.name
                << ") failed: " << e.what() << "\n";
    }
  }
  for (AblationRow& row : rows) {
    if (row.shared_with < 0) continue;
    const AblationRow& src = rows[row.shared_with - 1];
    row.report = src.report;
    row.failed = src.failed;
    row.error = src.error;
  }

  std::ofstream out(base.out_dir + "/ablation.csv", std::ios::trunc);
  if (!out) throw IoError("ablation: cannot open table file");
  out << "row,name,n,mean,half_width,shared_with,failed\n";
  out << std::setprecision(17);
  for (const AblationRow& row : rows) {
    const Summary& s = row.report.classification ? row.report.pooled_accuracy
                                                 : row.report.pooled_loss;
    out << row.index << "," << row.name << "," << s.n << "," << s.mean << ","
        << s.half_width << "," << row.shared_with << "," << row.failed
        << "\n";
  }
  return rows;
}

std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(4) << "row" << std::setw(22) << "variant"
     << std::setw(26) << "result (mean +/- 95% CI)" << "note\n";
  for (const AblationRow& row : rows) {
    os << std::left << std::setw(4) << row.index << std::setw(22) << row.name;
    if (row.failed) {
      os << std::setw(26) << "failed" << row.error << "\n";
      continue;
    }
    const Summary& s = row.report.classification ? row.report.pooled_accuracy
                                                 : row.report.pooled_loss;
    std::ostringstream val;
    val << std::fixed << std::setprecision(4) << s.mean << " +/- "
        << s.half_width;
    os << std::setw(26) << val.str();
    if (row.shared_with >= 0) {
      os << "shares artifacts with row " << row.shared_with;
    }
    os << "\n";
  }
  return os.str();
}

void write_plot_data(const std::string& metrics_path,
                     const std::string& out_dir) {
  std::ifstream in(metrics_path);
  if (!in) throw IoError("plot: cannot open '" + metrics_path + "'");
  std::vector<std::pair<long, double>> meta_loss, val_loss, val_acc;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception&) {
      continue;
    }
    const long step = rec.value("step", -1L);
    if (step < 0) continue;
    if (rec.contains("meta_loss") && rec["meta_loss"].is_number()) {
      meta_loss.emplace_back(step, rec["meta_loss"].get<double>());
    }
    if (rec.contains("val_loss") && rec["val_loss"].is_number()) {
      val_loss.emplace_back(step, rec["val_loss"].get<double>());
    }
    if (rec.contains("val_accuracy") && rec["val_accuracy"].is_number()) {
      val_acc.emplace_back(step, rec["val_accuracy"].get<double>());
    }
  }
  auto dump = [&](const std::string& name,
                  const std::vector<std::pair<long, double>>& series) {
    if (series.empty()) return;
    std::ofstream out(out_dir + "/" + name, std::ios::trunc);
    if (!out) throw IoError("plot: cannot open '" + out_dir + "/" + name +
                            "'");
    out << "step,value\n" << std::setprecision(17);
    for (const auto& [s, v] : series) out << s << "," << v << "\n";
  };
  dump("plot_meta_loss.csv", meta_loss);
  dump("plot_val_loss.csv", val_loss);
  dump("plot_val_accuracy.csv", val_acc);
}

}  // namespace metalearn
