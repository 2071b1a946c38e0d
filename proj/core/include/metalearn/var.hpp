#pragma once

#include <vector>

#include "metalearn/tensor.hpp"

namespace metalearn {

class Tape;

// Value plus an optional handle into the tape that produced it. A Var with
// no tape is a constant: it participates in arithmetic but receives no
// gradient. Vars are cheap to copy (tensor storage is shared).
struct Var {
  Tensor value;
  Tape* tape = nullptr;
  int node = -1;

  Var() = default;
  explicit Var(Tensor v) : value(std::move(v)) {}
  Var(Tensor v, Tape* t, int n) : value(std::move(v)), tape(t), node(n) {}

  bool on_tape() const { return tape != nullptr && node >= 0; }
  const std::vector<int>& shape() const { return value.shape(); }
};

// Wraps a tensor as a non-differentiable constant.
inline Var constant(Tensor value) { return Var(std::move(value)); }

// Records `value` as a differentiable leaf (a parameter) on the tape.
Var make_leaf(Tape& tape, Tensor value);

// While any guard is alive on this thread, ops compute values but record
// nothing, so results come back as constants. Used for evaluation-only code
// and for the non-create_graph backward sweep.
class NoGradGuard {
 public:
  NoGradGuard() { ++depth(); }
  ~NoGradGuard() { --depth(); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
  static bool active() { return depth() > 0; }

 private:
  static int& depth() {
    thread_local int d = 0;
    return d;
  }
};

// Elementwise arithmetic. Operands must have identical shapes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var divide(const Var& a, const Var& b);

Var scale(const Var& a, double factor);
Var add_scalar(const Var& a, double addend);

// [m,k] x [k,n] -> [m,n].
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var reshape(const Var& a, std::vector<int> shape);

// Contiguous crop of `length` entries along `axis` starting at `start`.
Var slice(const Var& a, int axis, int start, int length);
// Inverse of slice: embeds `a` into zeros whose extent along `axis` is
// `total`, offset by `start`.
Var pad_slice(const Var& a, int axis, int start, int total);
Var concat(const std::vector<Var>& parts, int axis);

// Duplicates a size-1 axis of a matrix to extent `count`.
Var expand(const Var& a, int axis, int count);
// Fills a tensor of the given shape with a rank-0 scalar.
Var spread(const Var& a, std::vector<int> shape);

// Axis reduction of a matrix, keeping the reduced axis at extent 1.
Var sum(const Var& a, int axis);
Var sum_all(const Var& a);
Var mean(const Var& a, int axis);
Var mean_all(const Var& a);

Var relu(const Var& a);
Var leaky_relu(const Var& a, double slope);
Var log(const Var& a);
Var exp(const Var& a);
Var sqrt(const Var& a);
Var abs(const Var& a);
Var tanh(const Var& a);
Var square(const Var& a);

// Numerically stable log-softmax / softmax. axis applies to matrices;
// vectors reduce over their single axis.
Var log_softmax(const Var& a, int axis = -1);
Var softmax(const Var& a, int axis = -1);

// Strips the tape handle, returning a constant with the same value.
Var detach(const Var& a);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }

// Reverse-mode differentiation of a scalar output with respect to leaf (or
// intermediate) inputs recorded on the same tape. Returns one Var per input,
// shaped like it. Inputs the output does not depend on get zero constants.
// With create_graph the backward pass itself records onto the tape, so the
// returned gradients can be differentiated again.
std::vector<Var> grad(const Var& output, const std::vector<Var>& inputs,
                      bool create_graph = false);

// One-hot rows for integer class labels.
Tensor one_hot(const std::vector<int>& labels, int num_classes,
               Precision prec = Precision::Double);

// Index of the max entry in each row of a matrix.
std::vector<int> row_argmax(const Tensor& t);

}  // namespace metalearn
