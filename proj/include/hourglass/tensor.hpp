#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "hourglass/common.hpp"
#include "hourglass/rng.hpp"

namespace hourglass {

class Tensor;

namespace detail {

// One recorded computation node. Nodes are created in program order with
// strictly increasing ids; reverse-mode traversal visits reachable nodes in
// decreasing id order, which fixes the backward schedule deterministically.
struct Node {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // allocated on first accumulation
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  uint64_t id = 0;
  bool requires_grad = false;

  int64_t size() const { return static_cast<int64_t>(values.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(values.size(), 0.0);
  }
};

using NodePtr = std::shared_ptr<Node>;

NodePtr new_node(Shape shape, std::vector<double> values);

// Returns the gradient buffer of `node`, or nullptr if the node does not
// participate in differentiation (callers skip accumulation then).
inline double* grad_buf(const NodePtr& node) {
  if (!node->requires_grad) return nullptr;
  node->ensure_grad();
  return node->grad.data();
}

// While disabled, newly created ops drop their parents and backward
// closures, so evaluation builds no graph.
bool grad_enabled();

}  // namespace detail

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Dense float64 array with shape, values and an optional accumulated
// gradient. Tensor is a cheap shared handle to an immutable node; only leaf
// values (via mutable_values) and gradients change after creation.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from_values(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor randn(Shape shape, RngStream& rng, double scale = 1.0, bool requires_grad = false);
  static Tensor rand_uniform(Shape shape, RngStream& rng, double lo, double hi,
                             bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t rank() const { return static_cast<int64_t>(node_->shape.size()); }
  int64_t dim(int64_t axis) const { return node_->shape[static_cast<size_t>(axis)]; }
  int64_t size() const { return node_->size(); }

  std::span<const double> values() const { return node_->values; }
  // In-place mutation is reserved for leaves (parameter updates, finite
  // difference probes); mutating an op output would desynchronize the graph.
  std::span<double> mutable_values();

  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  std::span<const double> grad() const;
  void zero_grad();

  // Reverse-mode pass from a scalar; accumulates into .grad of every
  // reachable tensor that requires gradients.
  void backward() const;

  detail::NodePtr node() const { return node_; }
  static Tensor wrap(detail::NodePtr node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

 private:
  detail::NodePtr node_;
};

// Builds an op node. `backward` receives the finished node (its .grad holds
// the upstream gradient) and must accumulate into the parents via
// detail::grad_buf. If no parent requires gradients (or grad mode is off)
// the result is a constant leaf.
Tensor make_op(Shape shape, std::vector<double> values, const std::vector<Tensor>& parents,
               std::function<void(detail::Node&)> backward);

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor add_scalar(const Tensor& x, double s);
Tensor mul_scalar(const Tensor& x, double s);
// x + v with v broadcast over the last dimension.
Tensor add_rowvec(const Tensor& x, const Tensor& v);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor relu(const Tensor& x);
// |x| with subgradient 0 at x == 0.
Tensor abs_val(const Tensor& x);

// ---- linear algebra ----
// Supported: [M,K]x[K,N], [G,M,K]x[G,K,N] (batched) and [G,M,K]x[K,N].
Tensor matmul(const Tensor& a, const Tensor& b);
// a x b^T over the last two dims: [..,M,K] x [..,N,K] -> [..,M,N].
Tensor matmul_nt(const Tensor& a, const Tensor& b);

// ---- shape ----
Tensor reshape(const Tensor& x, Shape shape);
Tensor narrow(const Tensor& x, int64_t axis, int64_t start, int64_t length);
// Every `step`-th index along `axis`, starting at 0.
Tensor take_every(const Tensor& x, int64_t axis, int64_t step);
Tensor concat(const Tensor& a, const Tensor& b, int64_t axis);
// [B,...] -> [...] for one batch element.
Tensor select0(const Tensor& x, int64_t index);
// [B,T,D] -> [B*H,T,D/H] splitting the feature dim into H heads.
Tensor split_heads(const Tensor& x, int64_t heads);
// Inverse of split_heads.
Tensor merge_heads(const Tensor& x, int64_t heads);

// ---- attention masks ----
// Boolean allow-matrix broadcast over attention heads. Entries outside the
// mask never receive probability mass.
struct AttnMask {
  int64_t batch = 0;
  int64_t tq = 0;
  int64_t tk = 0;
  std::vector<uint8_t> allow;  // batch*tq*tk, 1 = attend

  static AttnMask all(int64_t batch, int64_t tq, int64_t tk);
  // Allow keys [0, valid[b]) for every query row.
  static AttnMask key_padding(const std::vector<int64_t>& valid, int64_t tq, int64_t tk);
  static AttnMask causal(int64_t t);
  AttnMask and_with(const AttnMask& other) const;
};

// ---- softmax / reductions ----
// Softmax over the last dim with max-subtraction. When a mask is given the
// leading dim of x must equal mask.batch * head_groups. A fully masked row
// is a contract violation.
Tensor softmax_last(const Tensor& x, const AttnMask* mask = nullptr, int64_t head_groups = 1);
Tensor log_softmax_last(const Tensor& x);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

// ---- normalization ----
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// ---- lookup / convolution ----
// table [V,D], ids flattened row-major of id_shape -> [id_shape...,D].
Tensor embedding(const Tensor& table, const std::vector<int64_t>& ids, Shape id_shape);
// x [B,T,Cin], w [Cout,K,Cin], b [Cout]; zero padding.
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int64_t stride, int64_t pad);
// Depthwise: x [B,T,C], w [C,K]; same-length output (odd K).
Tensor depthwise_conv1d(const Tensor& x, const Tensor& w);
// x [B,T,H,W,Cin], w [Cout,kt,kh,kw,Cin], b [Cout]. Temporal stride 1 with
// same padding; spatial stride/pad as given.
Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b, int64_t spatial_stride,
              int64_t spatial_pad);
// [B,T,H,W,C] -> [B,T,C], mean over the spatial grid.
Tensor spatial_mean(const Tensor& x);

// ---- non-differentiable helpers ----
int64_t argmax_span(std::span<const double> v);

}  // namespace hourglass
