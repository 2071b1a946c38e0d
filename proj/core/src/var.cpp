#include "metalearn/var.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>

#include "metalearn/tape.hpp"

namespace metalearn {

namespace {

Tape* resolve_tape(const char* op, const std::vector<Var>& inputs) {
  Tape* tape = nullptr;
  for (const Var& v : inputs) {
    if (!v.on_tape()) continue;
    if (tape == nullptr) {
      tape = v.tape;
    } else if (tape != v.tape) {
      throw TapeError(std::string(op) +
                      ": operands recorded on different tapes");
    }
  }
  return tape;
}

// Validated inputs in, one recorded (or constant) Var out. Every op funnels
// through here so the no-grad and constant-folding rules live in one place.
Var record(OpKind op, std::vector<Var> inputs, double scalar = 0.0,
           int axis = -1, int start = 0, std::vector<int> target_shape = {}) {
  Node n;
  n.op = op;
  n.inputs = std::move(inputs);
  n.scalar = scalar;
  n.axis = axis;
  n.start = start;
  n.target_shape = std::move(target_shape);
  Tape* tape = resolve_tape(op_name(op), n.inputs);
  n.value = detail::eval_node(n);
  if (tape == nullptr || NoGradGuard::active()) {
    return constant(std::move(n.value));
  }
  Tensor value = n.value;
  const int idx = tape->emit(std::move(n));
  return Var(std::move(value), tape, idx);
}

void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (!a.value.same_shape(b.value)) {
    throw ShapeError(std::string(op) + ": shape " + a.value.shape_string() +
                     " vs " + b.value.shape_string());
  }
}

void require_rank2(const char* op, const Var& a) {
  if (a.value.rank() != 2) {
    throw ShapeError(std::string(op) + ": want a matrix, got " +
                     a.value.shape_string());
  }
}

int normalized_axis(const char* op, const Var& a, int axis) {
  if (a.value.rank() == 1) {
    if (axis != 0) {
      throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                       " on a vector");
    }
    return 0;
  }
  require_rank2(op, a);
  if (axis != 0 && axis != 1) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " on " + a.value.shape_string());
  }
  return axis;
}

Tensor relu_mask(const Tensor& a) {
  Tensor m(a.shape(), a.precision());
  double* o = m.mutable_data();
  const double* x = a.data();
  for (std::int64_t i = 0; i < a.size(); ++i) o[i] = x[i] > 0.0 ? 1.0 : 0.0;
  return m;
}

Tensor leaky_mask(const Tensor& a, double slope) {
  Tensor m(a.shape(), a.precision());
  double* o = m.mutable_data();
  const double* x = a.data();
  for (std::int64_t i = 0; i < a.size(); ++i) o[i] = x[i] > 0.0 ? 1.0 : slope;
  return m;
}

Tensor sign_mask(const Tensor& a) {
  Tensor m(a.shape(), a.precision());
  double* o = m.mutable_data();
  const double* x = a.data();
  for (std::int64_t i = 0; i < a.size(); ++i) {
    o[i] = x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0);
  }
  return m;
}

}  // namespace

Var make_leaf(Tape& tape, Tensor value) {
  Node n;
  n.op = OpKind::Leaf;
  n.value = std::move(value);
  Tensor v = n.value;
  const int idx = tape.emit(std::move(n));
  return Var(std::move(v), &tape, idx);
}

Var add(const Var& a, const Var& b) {
  require_same_shape("add", a, b);
  return record(OpKind::Add, {a, b});
}

Var sub(const Var& a, const Var& b) {
  require_same_shape("sub", a, b);
  return record(OpKind::Sub, {a, b});
}

Var mul(const Var& a, const Var& b) {
  require_same_shape("mul", a, b);
  return record(OpKind::Mul, {a, b});
}

Var divide(const Var& a, const Var& b) {
  require_same_shape("divide", a, b);
  const double* y = b.value.data();
  for (std::int64_t i = 0; i < b.value.size(); ++i) {
    if (y[i] == 0.0) throw DomainError("divide: zero divisor");
  }
  return record(OpKind::Div, {a, b});
}

Var scale(const Var& a, double factor) {
  return record(OpKind::Scale, {a}, factor);
}

Var add_scalar(const Var& a, double addend) {
  return record(OpKind::AddScalar, {a}, addend);
}

Var matmul(const Var& a, const Var& b) {
  require_rank2("matmul", a);
  require_rank2("matmul", b);
  if (a.value.dim(1) != b.value.dim(0)) {
    throw ShapeError("matmul: shape " + a.value.shape_string() + " vs " +
                     b.value.shape_string());
  }
  return record(OpKind::Matmul, {a, b});
}

Var transpose(const Var& a) {
  require_rank2("transpose", a);
  return record(OpKind::Transpose, {a});
}

Var reshape(const Var& a, std::vector<int> shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  if (n != a.value.size()) {
    throw ShapeError("reshape: shape " + a.value.shape_string() + " vs " +
                     shape_to_string(shape));
  }
  return record(OpKind::Reshape, {a}, 0.0, -1, 0, std::move(shape));
}

Var slice(const Var& a, int axis, int start, int length) {
  axis = normalized_axis("slice", a, axis);
  const int extent = a.value.shape()[axis];
  if (start < 0 || length < 1 || start + length > extent) {
    throw ShapeError("slice: [" + std::to_string(start) + ", " +
                     std::to_string(start + length) + ") of extent " +
                     std::to_string(extent));
  }
  std::vector<int> target = a.value.shape();
  target[axis] = length;
  return record(OpKind::Slice, {a}, 0.0, axis, start, std::move(target));
}

Var pad_slice(const Var& a, int axis, int start, int total) {
  axis = normalized_axis("pad_slice", a, axis);
  const int extent = a.value.shape()[axis];
  if (start < 0 || start + extent > total) {
    throw ShapeError("pad_slice: extent " + std::to_string(extent) + " at " +
                     std::to_string(start) + " into " + std::to_string(total));
  }
  std::vector<int> target = a.value.shape();
  target[axis] = total;
  return record(OpKind::PadSlice, {a}, 0.0, axis, start, std::move(target));
}

Var concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  axis = normalized_axis("concat", parts[0], axis);
  for (const Var& p : parts) {
    if (p.value.rank() != parts[0].value.rank()) {
      throw ShapeError("concat: shape " + parts[0].value.shape_string() +
                       " vs " + p.value.shape_string());
    }
    const int other = 1 - axis;
    if (p.value.rank() == 2 &&
        p.value.shape()[other] != parts[0].value.shape()[other]) {
      throw ShapeError("concat: shape " + parts[0].value.shape_string() +
                       " vs " + p.value.shape_string());
    }
  }
  return record(OpKind::Concat, parts, 0.0, axis);
}

Var expand(const Var& a, int axis, int count) {
  require_rank2("expand", a);
  if (axis != 0 && axis != 1) {
    throw ShapeError("expand: axis " + std::to_string(axis));
  }
  if (a.value.shape()[axis] != 1) {
    throw ShapeError("expand: axis " + std::to_string(axis) + " of " +
                     a.value.shape_string() + " must have extent 1");
  }
  if (count < 1) throw ShapeError("expand: count " + std::to_string(count));
  std::vector<int> target = a.value.shape();
  target[axis] = count;
  return record(OpKind::Expand, {a}, 0.0, axis, 0, std::move(target));
}

Var spread(const Var& a, std::vector<int> shape) {
  if (a.value.size() != 1) {
    throw ShapeError("spread: want a scalar, got " + a.value.shape_string());
  }
  if (shape.size() > 2) {
    throw ShapeError("spread: target rank " + std::to_string(shape.size()));
  }
  return record(OpKind::Spread, {a}, 0.0, -1, 0, std::move(shape));
}

Var sum(const Var& a, int axis) {
  require_rank2("sum", a);
  if (axis != 0 && axis != 1) {
    throw ShapeError("sum: axis " + std::to_string(axis));
  }
  return record(OpKind::Sum, {a}, 0.0, axis);
}

Var sum_all(const Var& a) { return record(OpKind::SumAll, {a}); }

Var mean(const Var& a, int axis) {
  Var s = sum(a, axis);
  return scale(s, 1.0 / a.value.shape()[axis]);
}

Var mean_all(const Var& a) {
  if (a.value.size() == 0) throw DomainError("mean_all: empty tensor");
  return scale(sum_all(a), 1.0 / static_cast<double>(a.value.size()));
}

Var relu(const Var& a) { return record(OpKind::Relu, {a}); }

Var leaky_relu(const Var& a, double slope) {
  return record(OpKind::LeakyRelu, {a}, slope);
}

Var log(const Var& a) {
  const double* x = a.value.data();
  for (std::int64_t i = 0; i < a.value.size(); ++i) {
    if (x[i] <= 0.0) {
      throw DomainError("log: non-positive input " + std::to_string(x[i]));
    }
  }
  return record(OpKind::Log, {a});
}

Var exp(const Var& a) { return record(OpKind::Exp, {a}); }

Var sqrt(const Var& a) {
  const double* x = a.value.data();
  for (std::int64_t i = 0; i < a.value.size(); ++i) {
    if (x[i] < 0.0) {
      throw DomainError("sqrt: negative input " + std::to_string(x[i]));
    }
  }
  return record(OpKind::Sqrt, {a});
}

Var abs(const Var& a) { return record(OpKind::Abs, {a}); }

Var tanh(const Var& a) { return record(OpKind::Tanh, {a}); }

Var square(const Var& a) { return mul(a, a); }

Var log_softmax(const Var& a, int axis) {
  if (a.value.rank() == 1) {
    const int n = a.value.dim(0);
    double mx = a.value.at(0);
    for (std::int64_t i = 1; i < n; ++i) mx = std::max(mx, a.value.at(i));
    Var shifted = sub(a, constant(Tensor::full({n}, mx, a.value.precision())));
    Var lse = log(sum_all(exp(shifted)));
    return sub(shifted, spread(lse, {n}));
  }
  require_rank2("log_softmax", a);
  if (axis == -1) axis = 1;
  if (axis == 0) return transpose(log_softmax(transpose(a), 1));
  const int rows = a.value.dim(0), cols = a.value.dim(1);
  Tensor rowmax({rows, cols}, a.value.precision());
  double* o = rowmax.mutable_data();
  const double* x = a.value.data();
  for (int r = 0; r < rows; ++r) {
    double mx = x[static_cast<std::int64_t>(r) * cols];
    for (int c = 1; c < cols; ++c) {
      mx = std::max(mx, x[static_cast<std::int64_t>(r) * cols + c]);
    }
    for (int c = 0; c < cols; ++c) o[static_cast<std::int64_t>(r) * cols + c] = mx;
  }
  Var shifted = sub(a, constant(std::move(rowmax)));
  Var lse = log(sum(exp(shifted), 1));
  return sub(shifted, expand(lse, 1, cols));
}

Var softmax(const Var& a, int axis) { return exp(log_softmax(a, axis)); }

Var detach(const Var& a) { return constant(a.value); }

Tensor one_hot(const std::vector<int>& labels, int num_classes,
               Precision prec) {
  Tensor t({static_cast<int>(labels.size()), num_classes}, prec);
  double* o = t.mutable_data();
  for (size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] < 0 || labels[r] >= num_classes) {
      throw DomainError("one_hot: label " + std::to_string(labels[r]) +
                        " outside [0, " + std::to_string(num_classes) + ")");
    }
    o[r * num_classes + labels[r]] = 1.0;
  }
  return t;
}

std::vector<int> row_argmax(const Tensor& t) {
  if (t.rank() != 2) {
    throw ShapeError("row_argmax: want a matrix, got " + t.shape_string());
  }
  std::vector<int> out(t.dim(0));
  const double* x = t.data();
  for (int r = 0; r < t.dim(0); ++r) {
    int best = 0;
    for (int c = 1; c < t.dim(1); ++c) {
      if (x[static_cast<std::int64_t>(r) * t.dim(1) + c] >
          x[static_cast<std::int64_t>(r) * t.dim(1) + best]) {
        best = c;
      }
    }
    out[r] = best;
  }
  return out;
}

std::vector<Var> grad(const Var& output, const std::vector<Var>& inputs,
                      bool create_graph) {
  if (output.value.size() != 1) {
    throw TapeError("grad: output must be scalar, got shape " +
                    output.value.shape_string());
  }
  if (!output.on_tape()) {
    throw TapeError("grad: output is a constant with no tape");
  }
  Tape& tape = *output.tape;
  for (size_t k = 0; k < inputs.size(); ++k) {
    if (!inputs[k].on_tape()) {
      throw TapeError("grad: input " + std::to_string(k) +
                      " is a constant, not on any tape");
    }
    if (inputs[k].tape != &tape) {
      throw TapeError("grad: input " + std::to_string(k) +
                      " recorded on a different tape");
    }
  }

  const int n0 = output.node + 1;
  auto zeros_for = [](const Var& in) {
    return constant(Tensor::zeros(in.value.shape(), in.value.precision()));
  };

  // dep[i]: node i depends on at least one requested input. Nodes outside
  // this set cannot route gradient anywhere useful and are skipped.
  std::vector<char> dep(n0, 0);
  for (const Var& in : inputs) {
    if (in.node < n0) dep[in.node] = 1;
  }
  for (int i = 0; i < n0; ++i) {
    if (dep[i]) continue;
    for (const Var& p : tape.node(i).inputs) {
      if (p.on_tape() && p.node < i && dep[p.node]) {
        dep[i] = 1;
        break;
      }
    }
  }
  if (!dep[output.node]) {
    std::vector<Var> out;
    out.reserve(inputs.size());
    for (const Var& in : inputs) out.push_back(zeros_for(in));
    return out;
  }

  std::optional<NoGradGuard> guard;
  if (!create_graph) guard.emplace();

  std::vector<std::optional<Var>> adj(n0);
  adj[output.node] = constant(
      Tensor::full(output.value.shape(), 1.0, output.value.precision()));

  auto want = [&](const Var& p) { return p.on_tape() && dep[p.node]; };
  auto accum = [&](const Var& p, const Var& g) {
    if (!adj[p.node]) {
      adj[p.node] = g;
    } else {
      adj[p.node] = add(*adj[p.node], g);
    }
  };

  for (int i = output.node; i >= 0; --i) {
    if (!adj[i] || !dep[i]) continue;
    // Copy: with create_graph the dispatch below appends nodes, which can
    // reallocate the tape's storage under a reference.
    const Node nd = tape.node(i);
    if (nd.op == OpKind::Leaf) continue;
    const Var g = *adj[i];
    const Var out_var(nd.value, &tape, i);
    switch (nd.op) {
      case OpKind::Leaf:
        break;
      case OpKind::Add:
        if (want(nd.inputs[0])) accum(nd.inputs[0], g);
        if (want(nd.inputs[1])) accum(nd.inputs[1], g);
        break;
      case OpKind::Sub:
        if (want(nd.inputs[0])) accum(nd.inputs[0], g);
        if (want(nd.inputs[1])) accum(nd.inputs[1], scale(g, -1.0));
        break;
      case OpKind::Mul:
        if (want(nd.inputs[0])) accum(nd.inputs[0], mul(g, nd.inputs[1]));
        if (want(nd.inputs[1])) accum(nd.inputs[1], mul(g, nd.inputs[0]));
        break;
      case OpKind::Div:
        if (want(nd.inputs[0])) {
          accum(nd.inputs[0], divide(g, nd.inputs[1]));
        }
        if (want(nd.inputs[1])) {
          accum(nd.inputs[1],
                scale(mul(g, divide(out_var, nd.inputs[1])), -1.0));
        }
        break;
      case OpKind::Scale:
        if (want(nd.inputs[0])) accum(nd.inputs[0], scale(g, nd.scalar));
        break;
      case OpKind::AddScalar:
        if (want(nd.inputs[0])) accum(nd.inputs[0], g);
        break;
      case OpKind::Matmul:
        if (want(nd.inputs[0])) {
          accum(nd.inputs[0], matmul(g, transpose(nd.inputs[1])));
        }
        if (want(nd.inputs[1])) {
          accum(nd.inputs[1], matmul(transpose(nd.inputs[0]), g));
        }
        break;
      case OpKind::Transpose:
        if (want(nd.inputs[0])) accum(nd.inputs[0], transpose(g));
        break;
      case OpKind::Reshape:
        if (want(nd.inputs[0])) {
          accum(nd.inputs[0], reshape(g, nd.inputs[0].value.shape()));
        }
        break;
      case OpKind::Slice:
        if (want(nd.inputs[0])) {
          accum(nd.inputs[0],
                pad_slice(g, nd.axis, nd.start,
                          nd.inputs[0].value.shape()[nd.axis]));
        }
        break;
      case OpKind::PadSlice:
        if (want(nd.inputs[0])) {
          accum(nd.inputs[0], slice(g, nd.axis, nd.start,
                                    nd.inputs[0].value.shape()[nd.axis]));
        }
        break;
      case OpKind::Concat: {
        int off = 0;
        for (const Var& p : nd.inputs) {
          const int len = p.value.shape()[nd.axis];
          if (want(p)) accum(p, slice(g, nd.axis, off, len));
          off += len;
        }
        break;
      }
      case OpKind::Expand:
        if (want(nd.inputs[0])) accum(nd.inputs[0], sum(g, nd.axis));
        break;
      case OpKind::Spread:
        if (want(nd.inputs[0])) {
          accum(nd.inputs[0],
                reshape(sum_all(g), nd.inputs[0].value.shape()));
        }
        break;
      case OpKind::Sum:
        if (want(nd.inputs[0])) {
          accum(nd.inputs[0],
                expand(g, nd.axis, nd.inputs[0].value.shape()[nd.axis]));
        }
        break;
      case OpKind::SumAll:
        if (want(nd.inputs[0])) {
          accum(nd.inputs[0], spread(g, nd.inputs[0].value.shape()));
        }
        break;
      case OpKind::Relu:
        if (want(nd.inputs[0])) {
          accum(nd.inputs[0],
                mul(g, constant(relu_mask(nd.inputs[0].value))));
        }
        break;
      case OpKind::LeakyRelu:
        if (want(nd.inputs[0])) {
          accum(nd.inputs[0],
                mul(g, constant(leaky_mask(nd.inputs[0].value, nd.scalar))));
        }
        break;
      case OpKind::Log:
        if (want(nd.inputs[0])) accum(nd.inputs[0], divide(g, nd.inputs[0]));
        break;
      case OpKind::Exp:
        if (want(nd.inputs[0])) accum(nd.inputs[0], mul(g, out_var));
        break;
      case OpKind::Sqrt:
        if (want(nd.inputs[0])) {
          accum(nd.inputs[0], divide(g, scale(out_var, 2.0)));
        }
        break;
      case OpKind::Abs:
        if (want(nd.inputs[0])) {
          accum(nd.inputs[0],
                mul(g, constant(sign_mask(nd.inputs[0].value))));
        }
        break;
      case OpKind::Tanh:
        if (want(nd.inputs[0])) {
          // d tanh = 1 - tanh^2, written on the tape so it stays retraceable.
          accum(nd.inputs[0],
                mul(g, add_scalar(scale(mul(out_var, out_var), -1.0), 1.0)));
        }
        break;
    }
  }

  std::vector<Var> out;
  out.reserve(inputs.size());
  for (const Var& in : inputs) {
    if (in.node < n0 && adj[in.node]) {
      const Var& gv = *adj[in.node];
      out.push_back(create_graph ? gv : constant(gv.value));
    } else {
      out.push_back(zeros_for(in));
    }
  }
  return out;
}

}  // namespace metalearn
