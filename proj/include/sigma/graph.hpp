#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "sigma/params.hpp"
#include "sigma/random.hpp"
#include "sigma/tensor.hpp"

namespace sigma {

struct Var {
  int idx = -1;
  bool valid() const { return idx >= 0; }
};

// Reverse-mode tape over matrix-valued nodes. Values are computed eagerly as
// ops are recorded; backward() walks the tape once in reverse creation order.
// A graph is built for one forward pass and discarded; nothing is mutated
// after construction except gradient buffers.
class Graph {
 public:
  Var input(Tensor value);
  Var scalar(double value);
  // Leaf bound to a stored parameter; repeated lookups of one name return the
  // same node so gradients accumulate. Gradients flow only when trainable.
  Var param(ParamStore& store, const std::string& name);

  Var affine(Var x, Var w, Var b);
  Var matmul(Var a, Var b);
  Var matmul_nt(Var a, Var b);  // a * b^T
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var add_row(Var x, Var row);
  Var mul_row(Var x, Var row);
  Var scale(Var x, double c);
  Var add_const(Var x, double c);
  Var scale_by(Var x, Var s);  // s is a 1x1 node
  Var exp_elem(Var x);
  Var sqrt_elem(Var x);
  Var sigmoid(Var x);
  Var gelu(Var x);
  Var relu(Var x);
  Var softmax_rows(Var x);
  Var layer_norm(Var x, Var gain, Var bias);
  Var concat_rows(const std::vector<Var>& xs);
  Var concat_cols(const std::vector<Var>& xs);
  Var slice_rows(Var x, std::size_t r0, std::size_t r1);
  Var slice_cols(Var x, std::size_t c0, std::size_t c1);
  Var reshape(Var x, std::size_t r, std::size_t c);
  Var mean_rows(Var x);
  Var sum_all(Var x);
  Var mean_all(Var x);
  Var dot(Var a, Var b);  // flattened inner product
  Var mse(Var a, Var b);  // mean over all elements
  // Flattened cosine similarity; returns the given constant when either
  // argument is exactly the zero vector.
  Var cosine(Var a, Var b, double degenerate);
  Var logsumexp_rows(Var x);
  Var diag(Var x);
  Var dropout(Var x, double rate, Rng& rng);

  void backward(Var loss);
  const Tensor& value(Var v) const;
  // Zero tensor when no gradient flows through v.
  Tensor grad(Var v) const;
  // Gradients for every parameter referenced by this graph, keyed by name.
  // Frozen parameters report exact zeros.
  std::map<std::string, Tensor> param_grads() const;

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad_buf;
    bool needs_grad = false;
    std::function<void(Graph&)> back;
  };

  int push(Tensor value, bool needs_grad, std::function<void(Graph&)> back);
  void accum(int idx, const Tensor& g);
  void accum_at(int idx, std::size_t flat_index, double g);
  const Tensor& val(int idx) const { return nodes_[static_cast<std::size_t>(idx)].value; }
  Tensor& gbuf(int idx) { return nodes_[static_cast<std::size_t>(idx)].grad_buf; }
  bool wants(int idx) const { return nodes_[static_cast<std::size_t>(idx)].needs_grad; }

  std::vector<Node> nodes_;
  std::map<std::string, int> param_nodes_;
  std::map<int, std::string> node_param_names_;
  bool ran_backward_ = false;
};

// Multi-head cross-attention with per-head scale 1/sqrt(d/heads), heads
// concatenated then output-projected. q_in: [q x d], kv_in: [k x d].
Var multihead_attention(Graph& g, Var q_in, Var kv_in, Var wq, Var wk, Var wv, Var wo,
                        std::size_t heads);

// Central finite differences (f(p+h) - f(p-h)) / 2h over every trainable
// scalar in the store. loss_fn must be pure and deterministic.
std::map<std::string, Tensor> finite_diff_gradient(
    const std::function<double(ParamStore&)>& loss_fn, ParamStore& params, double h = 1e-5);

// Max relative gradient error between reverse-mode and finite differences.
double max_rel_gradient_error(const std::map<std::string, Tensor>& analytic,
                              const std::map<std::string, Tensor>& numeric);

}  // namespace sigma
