#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "cln/tensor.hpp"

namespace cln {

// Handle to a node in a Graph. Only meaningful together with its graph.
struct Var {
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::size_t id = kNone;
  bool valid() const { return id != kNone; }
};

// Single-owner reverse-mode tape. Nodes are appended in topological order;
// backward() walks them in reverse and accumulates leaf gradients into the
// bound Tensors. A graph must not be shared between threads; separate graphs
// over the same read-only tensors are fine.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Shape shape, std::vector<double> values);
  // Trainable leaf if t.requires_grad(), otherwise a zero-copy constant view.
  Var param(const Tensor& t);
  Var view(const Tensor& t);

  const Shape& shape(Var v) const { return nodes_.at(v.id).shape; }
  std::span<const double> value(Var v) const;
  std::span<const double> grad(Var v) const { return nodes_.at(v.id).grad; }
  double item(Var v) const;
  bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  // root must hold exactly one value. Node gradients are reset first;
  // Tensor accumulators are added to, never overwritten.
  void backward(Var root);

  // --- ops -------------------------------------------------------------
  Var matmul(Var a, Var b);                  // [m,k] x [k,n]
  Var linear(Var x, Var w, Var b);           // x[m,k] w[k,n] + b[n]
  Var add(Var a, Var b);                     // same element count
  Var scale(Var x, double s);
  Var gelu(Var x);                           // exact erf form
  Var layer_norm_rows(Var x, double eps);    // pre-affine normalization per row
  // Row r uses gammas[r / rows_per_group] (or gammas[0] if only one given).
  Var affine_rows(Var xhat, std::span<const Var> gammas, std::span<const Var> betas,
                  std::size_t rows_per_group);
  // qkv[B*N, 3d] -> [B*N, d], softmax(q k^T / sqrt(dh)) v per sample and head.
  Var attention(Var qkv, std::size_t batch, std::size_t tokens, std::size_t heads);
  Var gather_rows(Var x, std::vector<std::size_t> rows);
  Var mul_row_broadcast(Var x, Var v);       // x[B,d] * v[d]
  Var cosine_rows(Var x, Var key);           // [B]; throws on degenerate vectors
  Var sum(Var x);
  Var mean(Var x);
  // Mean over the batch of per-row masked cross-entropy.
  Var softmax_cross_entropy(Var logits, std::span<const std::size_t> labels,
                            const std::vector<bool>* mask = nullptr);
  Var concat_cols(std::span<const Var> parts);
  // patches[B*P, d] -> tokens[B*(P+1), d]; token 0 of each sample is cls.
  Var assemble_tokens(Var patches, Var cls, Var pos, std::size_t batch);

 private:
  using BackwardFn = std::function<void(Graph&, std::size_t self)>;
  struct Node {
    Shape shape;
    RealBuffer owned;
    const Tensor* external = nullptr;
    const Tensor* sink = nullptr;
    RealBuffer grad;
    bool needs_grad = false;
    BackwardFn backward;
  };

  Var push(Shape shape, RealBuffer values, std::initializer_list<Var> parents,
           BackwardFn fn);
  Var push(Shape shape, RealBuffer values, std::span<const Var> parents, BackwardFn fn);
  const double* data(std::size_t id) const;
  // Lazily allocated gradient buffer, or nullptr if the node takes no gradient.
  double* grad_buf(std::size_t id);

  std::vector<Node> nodes_;
};

}  // namespace cln
