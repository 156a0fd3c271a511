#pragma once
// Reverse-mode automatic differentiation on a per-step tape.
//
// A Tape records operations in topological order; backward() replays them in
// reverse exactly once, accumulating gradients additively. Handles (Var) are
// cheap (tape pointer + node index). Tapes are intended to live for a single
// training step and be discarded.
#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "sitar/tensor.hpp"

namespace sitar::ad {

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool attached() const { return tape != nullptr && id >= 0; }
};

class Tape {
 public:
  struct Node {
    Tensor value;
    std::vector<double> grad;  // same extent as value.data
    std::function<void(Tape&)> backward;  // empty for leaves
  };

  // Creates a leaf whose gradient is tracked.
  Var leaf(Tensor t) {
    nodes_.push_back(Node{std::move(t), {}, {}});
    nodes_.back().grad.assign(nodes_.back().value.size(), 0.0);
    return Var{this, static_cast<int>(nodes_.size() - 1)};
  }

  // Records an interior node produced by an operation.
  Var push(Tensor value, std::function<void(Tape&)> backward) {
    nodes_.push_back(Node{std::move(value), {}, std::move(backward)});
    nodes_.back().grad.assign(nodes_.back().value.size(), 0.0);
    return Var{this, static_cast<int>(nodes_.size() - 1)};
  }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  const Tensor& value(int id) const { return nodes_.at(id).value; }
  std::vector<double>& grad(Var v) { return nodes_.at(v.id).grad; }
  std::vector<double>& grad(int id) { return nodes_.at(id).grad; }

  // Seeds d(loss)/d(loss) = 1 and propagates to every leaf. Repeated calls
  // without clearing accumulate into existing gradients.
  void backward(Var loss) {
    require(loss.tape == this, "backward: loss from another tape");
    require(value(loss).size() == 1, "backward: loss must be scalar");
    grad(loss)[0] += 1.0;
    for (int i = loss.id; i >= 0; --i) {
      if (nodes_[i].backward) nodes_[i].backward(*this);
    }
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
};

// Detaches a value from the tape: identical data, no attachment.
inline Tensor stop_gradient(const Var& v) { return v.tape->value(v); }
inline Tensor stop_gradient(const Tensor& t) { return t; }

// ---- Operations -----------------------------------------------------------
// Elementwise (equal shapes).
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // Hadamard product
// Elementwise against a constant tensor of equal shape.
Var add_const(Var a, const Tensor& c);
Var mul_const(Var a, const Tensor& c);
// Elementwise affine with scalars: a*x + b.
Var affine(Var x, double a, double b);
// Unary elementwise.
Var relu(Var x);
Var exp_(Var x);
Var log_(Var x);
Var square(Var x);
Var tanh_(Var x);
// Matrix product of 2-D tensors [M,K]x[K,N].
Var matmul(Var a, Var b);
// Adds a length-N row vector to every row of [M,N].
Var add_rowvec(Var x, Var b);
// Full reductions to scalars.
Var sum(Var x);
Var mean(Var x);
// Softmax over the last axis of a 2-D tensor.
Var softmax(Var x);
// Mean softmax cross-entropy of logits [B,C] against integer labels.
Var cross_entropy_logits(Var logits, const std::vector<int>& labels);
// Shape ops.
Var reshape(Var x, std::vector<std::size_t> shape);
Var concat(Var a, Var b);  // along the last axis of 2-D tensors
// Convolutions, kernel 4 / stride 2 / pad 1 geometry by default.
// x: [B,Cin,H,W], w: [Cout,Cin,K,K], bias: [Cout] -> [B,Cout,H/2,W/2]
Var conv2d(Var x, Var w, Var bias, int kernel = 4, int stride = 2, int pad = 1);
// x: [B,Cin,H,W], w: [Cin,Cout,K,K], bias: [Cout] -> [B,Cout,2H,2W]
Var conv2d_transpose(Var x, Var w, Var bias, int kernel = 4, int stride = 2, int pad = 1);

// Central finite-difference gradient oracle for scalar functions of a tensor.
Tensor fd_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                   double step);

}  // namespace sitar::ad
