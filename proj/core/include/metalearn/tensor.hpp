#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "metalearn/errors.hpp"
#include "metalearn/rng.hpp"

namespace metalearn {

// Numeric mode for a tensor. Storage is always double; Single means every
// op result is rounded through float before it is stored, which models
// float32 arithmetic closely enough for loss-scale comparisons while keeping
// a single storage type.
enum class Precision { Single, Double };

inline const char* to_string(Precision p) {
  return p == Precision::Single ? "single" : "double";
}

inline Precision precision_from_string(const std::string& s) {
  if (s == "single") return Precision::Single;
  if (s == "double") return Precision::Double;
  throw ConfigError("unknown precision '" + s + "' (want single|double)");
}

// Result precision of an op over operands: any Double operand promotes.
inline Precision promote(Precision a, Precision b) {
  return (a == Precision::Double || b == Precision::Double)
             ? Precision::Double
             : Precision::Single;
}

// Dense row-major tensor with copy-on-write storage. Rank 0 (scalar),
// 1 (vector) and 2 (matrix) cover everything this library needs; no
// broadcasting, mismatched shapes throw.
class Tensor {
 public:
  Tensor() : Tensor(std::vector<int>{}, Precision::Double) {}

  Tensor(std::vector<int> shape, Precision prec)
      : shape_(std::move(shape)),
        prec_(prec),
        data_(std::make_shared<std::vector<double>>(checked_size(shape_),
                                                    0.0)) {}

  static Tensor zeros(std::vector<int> shape,
                      Precision prec = Precision::Double) {
    return Tensor(std::move(shape), prec);
  }

  static Tensor full(std::vector<int> shape, double value,
                     Precision prec = Precision::Double);
  static Tensor scalar(double value, Precision prec = Precision::Double);
  static Tensor from_vector(std::vector<int> shape,
                            const std::vector<double>& values,
                            Precision prec = Precision::Double);
  static Tensor randn(std::vector<int> shape, Rng& rng, double stddev = 1.0,
                      Precision prec = Precision::Double);
  static Tensor identity(int n, Precision prec = Precision::Double);

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t size() const { return static_cast<std::int64_t>(data_->size()); }
  Precision precision() const { return prec_; }

  int dim(int axis) const;
  int rows() const { return dim(0); }
  int cols() const { return dim(1); }

  const double* data() const { return data_->data(); }
  const std::vector<double>& values() const { return *data_; }

  // Detaches from any sharers before handing out a writable pointer.
  double* mutable_data();

  double at(std::int64_t flat_index) const;
  double at(int row, int col) const;
  void set(std::int64_t flat_index, double value);
  void set(int row, int col, double value);

  // Scalar extraction, throws unless size() == 1.
  double item() const;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;

  Tensor astype(Precision prec) const;

  // Rounds every element through float. No-op copy for Double tensors
  // unless force is set.
  Tensor rounded(bool force = false) const;

  std::string shape_string() const;

 private:
  static std::int64_t checked_size(const std::vector<int>& shape);

  std::vector<int> shape_;
  Precision prec_;
  std::shared_ptr<std::vector<double>> data_;
};

std::string shape_to_string(const std::vector<int>& shape);

}  // namespace metalearn
