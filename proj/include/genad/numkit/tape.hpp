#pragma once

#include <functional>
#include <vector>

#include "genad/numkit/tensor.hpp"

namespace genad::numkit {

// Handle into a Tape. Only meaningful for the tape that produced it.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Define-by-run reverse-mode graph. Rebuilt per training step; single-threaded.
// Backward visits nodes in reverse creation order (a valid reverse topological
// order since ops only consume earlier nodes) and accumulates into parents, so
// shared subexpressions add up instead of overwriting.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var input(const Tensor& value);     // differentiable leaf (parameter copy)
  Var constant(const Tensor& value);  // non-differentiable leaf

  const Tensor& val(Var v) const;
  // Gradient of the last backward() target wrt v. Throws NumericError if none
  // was computed (backward not run, or v not on a differentiable path).
  const Tensor& grad(Var v) const;
  bool has_grad(Var v) const;
  void backward(Var loss);  // loss must be scalar and depend on some input

  size_t size() const { return nodes_.size(); }

  // arithmetic
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);                  // elementwise
  Var scale(Var a, double c);
  Var add_const(Var a, const Tensor& c);  // e.g. additive attention masks
  Var mul_const(Var a, const Tensor& c);
  Var add_row(Var x, Var bias);           // [n,d] + [d]
  Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false);

  // activations
  Var relu(Var x);
  Var tanh_(Var x);
  Var sigmoid(Var x);
  Var exp_(Var x);
  Var log_(Var x);

  // reductions
  Var sum(Var x);        // scalar
  Var mean(Var x);       // scalar
  Var mean_rows(Var x);  // [n,d] -> [1,d]

  // softmax family (last axis)
  Var softmax(Var x);
  // z_k ∝ w_k exp(x_k); zero-weight entries get z=0 and carry no gradient.
  Var weighted_softmax(Var x, const Tensor& w);
  // log of the above on the support; zero-weight entries are 0 placeholders
  // that must not be read by downstream ops.
  Var weighted_log_softmax(Var x, const Tensor& w);

  Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);

  // structure
  Var reshape(Var x, std::vector<int> shape);
  Var gather_rows(Var x, std::vector<int> idx);
  // out[dest_idx[i], :] = x[i, :], other rows zero
  Var scatter_rows(Var x, int n_rows, std::vector<int> dest_idx);
  Var concat_cols(Var a, Var b);
  Var pick(Var x, int flat_index);              // scalar
  Var dot_const(Var x, const Tensor& coef);     // scalar, coef fixed

  // losses
  Var cross_entropy(Var logits, const std::vector<int>& targets);  // mean
  Var bce(Var pred, const Tensor& target);  // pred in (0,1), clamped at 1e-7

  // scalar folds
  Var vsum(const std::vector<Var>& xs);
  Var vmax(const std::vector<Var>& xs);  // ties go to the first max

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    std::function<void(Tape&)> backfn;  // empty for leaves
  };

  std::vector<Node> nodes_;
  bool backward_done_ = false;

  Var push(Tensor value, bool requires_grad, std::function<void(Tape&)> backfn);
  const Node& node(Var v) const;
  bool rg(Var v) const { return node(v).requires_grad; }
  void accum(int id, const Tensor& g);
  void accum_at(int id, size_t flat, double g);
  double* grad_ptr(int id);  // nullptr when the node needs no gradient
  friend struct TapeAccess;
};

// softmax(Q·Kᵀ/√d)·V with an optional causal (lower-triangular) mask.
Var attention(Tape& t, Var q, Var k, Var v, bool causal = false);
// Same, with an additive [n_q, n_k] score mask (use -1e30 to hide a key).
Var attention(Tape& t, Var q, Var k, Var v, const Tensor& add_mask, bool causal = false);
// y = x·w + bias
Var linear(Tape& t, Var x, Var w, Var bias);

}  // namespace genad::numkit
