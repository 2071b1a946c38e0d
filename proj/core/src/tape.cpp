#include "metalearn/tape.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <cstring>

namespace metalearn {

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Div: return "divide";
    case OpKind::Scale: return "scale";
    case OpKind::AddScalar: return "add_scalar";
    case OpKind::Matmul: return "matmul";
    case OpKind::Transpose: return "transpose";
    case OpKind::Reshape: return "reshape";
    case OpKind::Slice: return "slice";
    case OpKind::PadSlice: return "pad_slice";
    case OpKind::Concat: return "concat";
    case OpKind::Expand: return "expand";
    case OpKind::Spread: return "spread";
    case OpKind::Sum: return "sum";
    case OpKind::SumAll: return "sum_all";
    case OpKind::Relu: return "relu";
    case OpKind::LeakyRelu: return "leaky_relu";
    case OpKind::Log: return "log";
    case OpKind::Exp: return "exp";
    case OpKind::Sqrt: return "sqrt";
    case OpKind::Abs: return "abs";
    case OpKind::Tanh: return "tanh";
  }
  return "?";
}

namespace {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapConst = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

Precision promoted(const std::vector<Var>& inputs) {
  for (const Var& v : inputs) {
    if (v.value.precision() == Precision::Double) return Precision::Double;
  }
  return inputs.empty() ? Precision::Double : Precision::Single;
}

// Ops that only move or duplicate elements need no float rounding: their
// outputs are exactly representable whenever their inputs are.
bool value_preserving(OpKind op) {
  switch (op) {
    case OpKind::Leaf:
    case OpKind::Transpose:
    case OpKind::Reshape:
    case OpKind::Slice:
    case OpKind::PadSlice:
    case OpKind::Concat:
    case OpKind::Expand:
    case OpKind::Spread:
    case OpKind::Relu:
    case OpKind::Abs:
      return true;
    default:
      return false;
  }
}

template <typename F>
Tensor map1(const Tensor& a, Precision prec, F f) {
  Tensor out(a.shape(), prec);
  double* o = out.mutable_data();
  const double* x = a.data();
  for (std::int64_t i = 0; i < a.size(); ++i) o[i] = f(x[i]);
  return out;
}

template <typename F>
Tensor map2(const Tensor& a, const Tensor& b, Precision prec, F f) {
  Tensor out(a.shape(), prec);
  double* o = out.mutable_data();
  const double* x = a.data();
  const double* y = b.data();
  for (std::int64_t i = 0; i < a.size(); ++i) o[i] = f(x[i], y[i]);
  return out;
}

Tensor eval_matmul(const Tensor& a, const Tensor& b, Precision prec) {
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n}, prec);
  Map(out.mutable_data(), m, n) =
      MapConst(a.data(), m, k) * MapConst(b.data(), k, n);
  return out;
}

Tensor eval_slice(const Tensor& a, int axis, int start,
                  const std::vector<int>& target, Precision prec) {
  Tensor out(target, prec);
  double* o = out.mutable_data();
  const double* x = a.data();
  if (a.rank() == 1) {
    std::memcpy(o, x + start, sizeof(double) * target[0]);
  } else if (axis == 0) {
    std::memcpy(o, x + static_cast<std::int64_t>(start) * a.dim(1),
                sizeof(double) * out.size());
  } else {
    const int rows = a.dim(0), cols = a.dim(1), len = target[1];
    for (int r = 0; r < rows; ++r) {
      std::memcpy(o + static_cast<std::int64_t>(r) * len,
                  x + static_cast<std::int64_t>(r) * cols + start,
                  sizeof(double) * len);
    }
  }
  return out;
}

Tensor eval_pad_slice(const Tensor& a, int axis, int start,
                      const std::vector<int>& target, Precision prec) {
  Tensor out(target, prec);
  double* o = out.mutable_data();
  const double* x = a.data();
  if (a.rank() == 1) {
    std::memcpy(o + start, x, sizeof(double) * a.size());
  } else if (axis == 0) {
    std::memcpy(o + static_cast<std::int64_t>(start) * a.dim(1), x,
                sizeof(double) * a.size());
  } else {
    const int rows = a.dim(0), cols = a.dim(1), total = target[1];
    for (int r = 0; r < rows; ++r) {
      std::memcpy(o + static_cast<std::int64_t>(r) * total + start,
                  x + static_cast<std::int64_t>(r) * cols,
                  sizeof(double) * cols);
    }
  }
  return out;
}

Tensor eval_concat(const std::vector<Var>& parts, int axis, Precision prec) {
  const Tensor& first = parts[0].value;
  std::vector<int> shape = first.shape();
  int total = 0;
  for (const Var& p : parts) total += p.value.shape()[axis];
  shape[axis] = total;
  Tensor out(shape, prec);
  double* o = out.mutable_data();
  if (first.rank() == 1 || axis == 0) {
    std::int64_t off = 0;
    for (const Var& p : parts) {
      std::memcpy(o + off, p.value.data(), sizeof(double) * p.value.size());
      off += p.value.size();
    }
  } else {
    const int rows = shape[0];
    int col_off = 0;
    for (const Var& p : parts) {
      const int cols = p.value.dim(1);
      const double* x = p.value.data();
      for (int r = 0; r < rows; ++r) {
        std::memcpy(o + static_cast<std::int64_t>(r) * total + col_off,
                    x + static_cast<std::int64_t>(r) * cols,
                    sizeof(double) * cols);
      }
      col_off += cols;
    }
  }
  return out;
}

Tensor eval_expand(const Tensor& a, int axis, const std::vector<int>& target,
                   Precision prec) {
  Tensor out(target, prec);
  double* o = out.mutable_data();
  const double* x = a.data();
  if (axis == 1) {
    const int rows = target[0], n = target[1];
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < n; ++c) o[static_cast<std::int64_t>(r) * n + c] = x[r];
    }
  } else {
    const int rows = target[0], cols = target[1];
    for (int r = 0; r < rows; ++r) {
      std::memcpy(o + static_cast<std::int64_t>(r) * cols, x,
                  sizeof(double) * cols);
    }
  }
  return out;
}

Tensor eval_sum(const Tensor& a, int axis, Precision prec) {
  const int rows = a.dim(0), cols = a.dim(1);
  const double* x = a.data();
  if (axis == 1) {
    Tensor out({rows, 1}, prec);
    double* o = out.mutable_data();
    for (int r = 0; r < rows; ++r) {
      double acc = 0.0;
      for (int c = 0; c < cols; ++c) acc += x[static_cast<std::int64_t>(r) * cols + c];
      o[r] = acc;
    }
    return out;
  }
  Tensor out({1, cols}, prec);
  double* o = out.mutable_data();
  for (int c = 0; c < cols; ++c) {
    double acc = 0.0;
    for (int r = 0; r < rows; ++r) acc += x[static_cast<std::int64_t>(r) * cols + c];
    o[c] = acc;
  }
  return out;
}

}  // namespace

namespace detail {

Tensor eval_node(const Node& n) {
  const Precision prec = promoted(n.inputs);
  Tensor out;
  switch (n.op) {
    case OpKind::Leaf:
      return n.value;
    case OpKind::Add:
      out = map2(n.inputs[0].value, n.inputs[1].value, prec,
                 [](double x, double y) { return x + y; });
      break;
    case OpKind::Sub:
      out = map2(n.inputs[0].value, n.inputs[1].value, prec,
                 [](double x, double y) { return x - y; });
      break;
    case OpKind::Mul:
      out = map2(n.inputs[0].value, n.inputs[1].value, prec,
                 [](double x, double y) { return x * y; });
      break;
    case OpKind::Div:
      out = map2(n.inputs[0].value, n.inputs[1].value, prec,
                 [](double x, double y) { return x / y; });
      break;
    case OpKind::Scale: {
      const double c = n.scalar;
      out = map1(n.inputs[0].value, prec, [c](double x) { return c * x; });
      break;
    }
    case OpKind::AddScalar: {
      const double c = n.scalar;
      out = map1(n.inputs[0].value, prec, [c](double x) { return x + c; });
      break;
    }
    case OpKind::Matmul:
      out = eval_matmul(n.inputs[0].value, n.inputs[1].value, prec);
      break;
    case OpKind::Transpose: {
      const Tensor& a = n.inputs[0].value;
      const int rows = a.dim(0), cols = a.dim(1);
      out = Tensor({cols, rows}, prec);
      double* o = out.mutable_data();
      const double* x = a.data();
      for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
          o[static_cast<std::int64_t>(c) * rows + r] =
              x[static_cast<std::int64_t>(r) * cols + c];
        }
      }
      break;
    }
    case OpKind::Reshape: {
      const Tensor& a = n.inputs[0].value;
      out = Tensor(n.target_shape, prec);
      std::memcpy(out.mutable_data(), a.data(), sizeof(double) * a.size());
      break;
    }
    case OpKind::Slice:
      out = eval_slice(n.inputs[0].value, n.axis, n.start, n.target_shape, prec);
      break;
    case OpKind::PadSlice:
      out = eval_pad_slice(n.inputs[0].value, n.axis, n.start, n.target_shape,
                           prec);
      break;
    case OpKind::Concat:
      out = eval_concat(n.inputs, n.axis, prec);
      break;
    case OpKind::Expand:
      out = eval_expand(n.inputs[0].value, n.axis, n.target_shape, prec);
      break;
    case OpKind::Spread: {
      const double v = n.inputs[0].value.at(0);
      out = Tensor(n.target_shape, prec);
      double* o = out.mutable_data();
      for (std::int64_t i = 0; i < out.size(); ++i) o[i] = v;
      break;
    }
    case OpKind::Sum:
      out = eval_sum(n.inputs[0].value, n.axis, prec);
      break;
    case OpKind::SumAll: {
      const Tensor& a = n.inputs[0].value;
      double acc = 0.0;
      const double* x = a.data();
      for (std::int64_t i = 0; i < a.size(); ++i) acc += x[i];
      out = Tensor({}, prec);
      out.mutable_data()[0] = acc;
      break;
    }
    case OpKind::Relu:
      out = map1(n.inputs[0].value, prec,
                 [](double x) { return x > 0.0 ? x : 0.0; });
      break;
    case OpKind::LeakyRelu: {
      const double s = n.scalar;
      out = map1(n.inputs[0].value, prec,
                 [s](double x) { return x > 0.0 ? x : s * x; });
      break;
    }
    case OpKind::Log:
      out = map1(n.inputs[0].value, prec, [](double x) { return std::log(x); });
      break;
    case OpKind::Exp:
      out = map1(n.inputs[0].value, prec, [](double x) { return std::exp(x); });
      break;
    case OpKind::Sqrt:
      out = map1(n.inputs[0].value, prec,
                 [](double x) { return std::sqrt(x); });
      break;
    case OpKind::Abs:
      out = map1(n.inputs[0].value, prec,
                 [](double x) { return std::abs(x); });
      break;
    case OpKind::Tanh:
      out = map1(n.inputs[0].value, prec,
                 [](double x) { return std::tanh(x); });
      break;
  }
  if (out.precision() == Precision::Single && !value_preserving(n.op)) {
    out = out.rounded();
  }
  return out;
}

}  // namespace detail

Tensor Tape::recompute(int i) const {
  if (i < 0 || i >= size()) {
    throw TapeError("recompute: node " + std::to_string(i) + " of " +
                    std::to_string(size()));
  }
  return detail::eval_node(nodes_[i]);
}

}  // namespace metalearn
