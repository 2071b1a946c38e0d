#pragma once

#include <vector>

#include "metalearn/tensor.hpp"
#include "metalearn/var.hpp"

namespace metalearn {

enum class OpKind {
  Leaf,
  Add,
  Sub,
  Mul,
  Div,
  Scale,
  AddScalar,
  Matmul,
  Transpose,
  Reshape,
  Slice,
  PadSlice,
  Concat,
  Expand,
  Spread,
  Sum,
  SumAll,
  Relu,
  LeakyRelu,
  Log,
  Exp,
  Sqrt,
  Abs,
  Tanh,
};

const char* op_name(OpKind op);

// One recorded operation. Input Vars are stored by value: tensor storage is
// shared, so this keeps the forward values alive for the backward pass and
// for replay without copying data.
struct Node {
  OpKind op = OpKind::Leaf;
  std::vector<Var> inputs;
  Tensor value;
  double scalar = 0.0;            // Scale factor, AddScalar addend, LeakyRelu slope
  int axis = -1;                  // Slice, PadSlice, Concat, Expand, Sum
  int start = 0;                  // Slice, PadSlice offset
  std::vector<int> target_shape;  // Reshape, Spread, Slice, PadSlice, Expand
};

// Append-only record of one differentiable computation, typically scoped to
// a single episode. Nodes are stored in topological order by construction.
// A tape is confined to one thread at a time; distinct episodes use distinct
// tapes and never share mutable state.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  int size() const { return static_cast<int>(nodes_.size()); }
  const Node& node(int i) const { return nodes_[i]; }

  int emit(Node n) {
    nodes_.push_back(std::move(n));
    return size() - 1;
  }

  // Re-evaluates node i from its recorded inputs. Deterministic kernels make
  // this bit-identical to the stored value; tests assert exactly that.
  Tensor recompute(int i) const;

 private:
  std::vector<Node> nodes_;
};

namespace detail {
// Shared forward kernels used both when recording and when replaying.
Tensor eval_node(const Node& n);
}  // namespace detail

}  // namespace metalearn
