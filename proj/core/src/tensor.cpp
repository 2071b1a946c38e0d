#include "metalearn/tensor.hpp"

#include <cmath>
#include <sstream>

namespace metalearn {

std::string shape_to_string(const std::vector<int>& shape) {
  std::ostringstream out;
  out << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::int64_t Tensor::checked_size(const std::vector<int>& shape) {
  if (shape.size() > 2) {
    throw ShapeError("tensor rank " + std::to_string(shape.size()) +
                     " unsupported, max rank is 2");
  }
  std::int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative extent in " + shape_to_string(shape));
    n *= d;
  }
  return n;
}

Tensor Tensor::full(std::vector<int> shape, double value, Precision prec) {
  Tensor t(std::move(shape), prec);
  if (prec == Precision::Single) value = static_cast<float>(value);
  auto* p = t.data_->data();
  for (std::int64_t i = 0; i < t.size(); ++i) p[i] = value;
  return t;
}

Tensor Tensor::scalar(double value, Precision prec) {
  return full({}, value, prec);
}

Tensor Tensor::from_vector(std::vector<int> shape,
                           const std::vector<double>& values, Precision prec) {
  Tensor t(std::move(shape), prec);
  if (static_cast<std::int64_t>(values.size()) != t.size()) {
    throw ShapeError("from_vector: " + std::to_string(values.size()) +
                     " values for shape " + t.shape_string());
  }
  auto* p = t.data_->data();
  for (std::int64_t i = 0; i < t.size(); ++i) {
    p[i] = prec == Precision::Single ? static_cast<float>(values[i])
                                     : values[i];
  }
  return t;
}

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, double stddev,
                     Precision prec) {
  Tensor t(std::move(shape), prec);
  auto* p = t.data_->data();
  for (std::int64_t i = 0; i < t.size(); ++i) {
    double v = stddev * rng.normal();
    p[i] = prec == Precision::Single ? static_cast<float>(v) : v;
  }
  return t;
}

Tensor Tensor::identity(int n, Precision prec) {
  Tensor t({n, n}, prec);
  auto* p = t.data_->data();
  for (int i = 0; i < n; ++i) p[static_cast<std::int64_t>(i) * n + i] = 1.0;
  return t;
}

int Tensor::dim(int axis) const {
  if (axis < 0 || axis >= rank()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     shape_string());
  }
  return shape_[axis];
}

double* Tensor::mutable_data() {
  if (data_.use_count() > 1) {
    data_ = std::make_shared<std::vector<double>>(*data_);
  }
  return data_->data();
}

double Tensor::at(std::int64_t flat_index) const {
  if (flat_index < 0 || flat_index >= size()) {
    throw ShapeError("flat index " + std::to_string(flat_index) +
                     " out of range for " + shape_string());
  }
  return (*data_)[flat_index];
}

double Tensor::at(int row, int col) const {
  if (rank() != 2) throw ShapeError("2d access into " + shape_string());
  if (row < 0 || row >= shape_[0] || col < 0 || col >= shape_[1]) {
    throw ShapeError("index (" + std::to_string(row) + ", " +
                     std::to_string(col) + ") out of range for " +
                     shape_string());
  }
  return (*data_)[static_cast<std::int64_t>(row) * shape_[1] + col];
}

void Tensor::set(std::int64_t flat_index, double value) {
  if (flat_index < 0 || flat_index >= size()) {
    throw ShapeError("flat index " + std::to_string(flat_index) +
                     " out of range for " + shape_string());
  }
  mutable_data()[flat_index] =
      prec_ == Precision::Single ? static_cast<float>(value) : value;
}

void Tensor::set(int row, int col, double value) {
  if (rank() != 2) throw ShapeError("2d access into " + shape_string());
  if (row < 0 || row >= shape_[0] || col < 0 || col >= shape_[1]) {
    throw ShapeError("index (" + std::to_string(row) + ", " +
                     std::to_string(col) + ") out of range for " +
                     shape_string());
  }
  mutable_data()[static_cast<std::int64_t>(row) * shape_[1] + col] =
      prec_ == Precision::Single ? static_cast<float>(value) : value;
}

double Tensor::item() const {
  if (size() != 1) {
    throw ShapeError("item() on tensor of shape " + shape_string());
  }
  return (*data_)[0];
}

bool Tensor::all_finite() const {
  for (double v : *data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor Tensor::astype(Precision prec) const {
  if (prec == prec_) return *this;
  Tensor t = *this;
  t.prec_ = prec;
  if (prec == Precision::Single) t = t.rounded(true);
  return t;
}

Tensor Tensor::rounded(bool force) const {
  if (prec_ == Precision::Double && !force) return *this;
  Tensor t = *this;
  auto* p = t.mutable_data();
  for (std::int64_t i = 0; i < t.size(); ++i) {
    p[i] = static_cast<float>(p[i]);
  }
  return t;
}

std::string Tensor::shape_string() const { return shape_to_string(shape_); }

}  // namespace metalearn
