#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "metalearn/model.hpp"
#include "metalearn/rng.hpp"
#include "metalearn/tensor.hpp"

namespace metalearn {

enum class Split { Train, Val, Test };
const char* to_string(Split s);

struct TaskSpec {
  bool classification = true;
  int way = 5;              // N
  int shot = 5;             // K
  int query_per_class = 15;
  int input_dim = 1;
  void validate() const;
};

// One few-shot task. Classification targets are class slots 0..way-1 with
// slot_to_class mapping back to the family's global label space; regression
// targets live in support_t/query_t.
struct Episode {
  bool classification = true;
  int way = 1;
  Tensor support_x;
  Tensor query_x;
  std::vector<int> support_y;
  std::vector<int> query_y;
  Tensor support_t;
  Tensor query_t;
  std::vector<int> slot_to_class;
  std::uint64_t seed = 0;
};

// Relabels classes to slots ordered by first appearance in the support
// sequence. Instance order is untouched, so two episodes that differ only by
// a label permutation canonicalize to bitwise-identical inputs; everything
// downstream (loss-net inputs, relation scores) sees slot space only.
Episode canonicalize(const Episode& episode);

class TaskFamily {
 public:
  virtual ~TaskFamily() = default;
  virtual bool classification() const = 0;
  virtual int input_dim() const = 0;
  virtual Episode sample(const TaskSpec& spec, Split split, Rng& rng) const = 0;
};

// y = A sin(x + p) + noise, A ~ U[amp], p ~ U[phase], x ~ U[range]. The task
// space is continuous, so all splits draw from the same distribution.
class SinusoidFamily : public TaskFamily {
 public:
  struct Config {
    double amp_lo = 0.1, amp_hi = 5.0;
    double phase_lo = 0.0, phase_hi = 3.14159265358979323846;
    double x_lo = -5.0, x_hi = 5.0;
    double noise = 0.1;
  };

  SinusoidFamily();
  explicit SinusoidFamily(Config config);
  bool classification() const override { return false; }
  int input_dim() const override { return 1; }
  Episode sample(const TaskSpec& spec, Split split, Rng& rng) const override;
  const Config& config() const { return config_; }

 private:
  Config config_;
};

// A pool of Gaussian classes in R^d with means on a radius-`radius`
// hypersphere and one diagonal covariance shared by every class. Global
// class ids partition into disjoint train/val/test pools.
class ClusterFamily : public TaskFamily {
 public:
  struct Config {
    int classes_train = 60;
    int classes_val = 16;
    int classes_test = 20;
    int dim = 32;
    double radius = 6.0;
    double scale_lo = 0.5, scale_hi = 1.5;  // per-dim variance range
    std::uint64_t seed = 7;
  };

  ClusterFamily();
  explicit ClusterFamily(Config config);
  bool classification() const override { return true; }
  int input_dim() const override { return config_.dim; }
  Episode sample(const TaskSpec& spec, Split split, Rng& rng) const override;
  const Config& config() const { return config_; }

  int total_classes() const;
  std::vector<int> pool(Split split) const;  // global class ids
  const std::vector<double>& class_mean(int class_id) const;
  // Draws one point of the given global class.
  std::vector<double> sample_point(int class_id, Rng& rng) const;

 private:
  Config config_;
  std::vector<std::vector<double>> means_;
  std::vector<double> variances_;
};

Episode sample_episode(const TaskFamily& family, const TaskSpec& spec,
                       Split split, Rng& rng);

// Source of the per-query relation scores consumed by the transductive loss
// term. Scores are treated as constants under differentiation.
class Embedder {
 public:
  virtual ~Embedder() = default;
  // [query_count, way] for classification; [query_count, 1] for regression.
  virtual Tensor relation_scores(const Episode& episode,
                                 const MetaParams& params) const = 0;
};

// Classification surrogate: class prototypes are mean support embeddings
// under the plain (unwarped, unmodulated) encoder; scores are the softmax of
// negative squared embedding distances.
class PrototypeEmbedder : public Embedder {
 public:
  Tensor relation_scores(const Episode& episode,
                         const MetaParams& params) const override;
};

// Regression surrogate: every query instance gets the mean support target.
class MeanTargetEmbedder : public Embedder {
 public:
  Tensor relation_scores(const Episode& episode,
                         const MetaParams& params) const override;
};

Tensor prototype_relation_scores(const Episode& episode,
                                 const MetaParams& params);

struct PretrainConfig {
  int steps = 0;  // 0 skips pre-training
  int batch = 64;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  std::uint64_t seed = 0;
};

struct PretrainResult {
  std::vector<LinearParams> encoder;
  // Top-1 accuracy of encoder+head on held-out draws from the meta-train
  // pool, measured just before the head is discarded.
  double train_accuracy = 0.0;
};

// Trains the encoder plus a temporary all-classes head on the meta-train
// pool with cross-entropy, then discards the head.
PretrainResult pretrain_encoder(const ClusterFamily& family,
                                const EncoderSpec& spec,
                                const PretrainConfig& config);

}  // namespace metalearn
