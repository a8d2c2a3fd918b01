#include "hourglass/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

namespace hourglass {

namespace detail {

namespace {
thread_local uint64_t g_next_id = 1;
thread_local bool g_grad_enabled = true;
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

void set_grad_enabled(bool enabled) { g_grad_enabled = enabled; }

NodePtr new_node(Shape shape, std::vector<double> values) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->id = g_next_id++;
  return node;
}

}  // namespace detail

NoGradGuard::NoGradGuard() : previous_(detail::grad_enabled()) { detail::set_grad_enabled(false); }
NoGradGuard::~NoGradGuard() { detail::set_grad_enabled(previous_); }

Tensor Tensor::from_values(Shape shape, std::vector<double> values, bool requires_grad) {
  check_shape(numel(shape) == static_cast<int64_t>(values.size()), "tensor ", shape_str(shape),
              " expects ", numel(shape), " values, got ", values.size());
  auto node = detail::new_node(std::move(shape), std::move(values));
  node->requires_grad = requires_grad && detail::grad_enabled();
  return wrap(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> v(static_cast<size_t>(numel(shape)), 0.0);
  return from_values(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> v(static_cast<size_t>(numel(shape)), value);
  return from_values(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_values(Shape{}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, RngStream& rng, double scale, bool requires_grad) {
  std::vector<double> v(static_cast<size_t>(numel(shape)));
  for (double& x : v) x = rng.normal() * scale;
  return from_values(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::rand_uniform(Shape shape, RngStream& rng, double lo, double hi,
                            bool requires_grad) {
  std::vector<double> v(static_cast<size_t>(numel(shape)));
  for (double& x : v) x = rng.uniform(lo, hi);
  return from_values(std::move(shape), std::move(v), requires_grad);
}

std::span<double> Tensor::mutable_values() {
  check_contract(node_->parents.empty(), "mutable_values is only valid on leaf tensors");
  return node_->values;
}

double Tensor::item() const {
  check_shape(size() == 1, "item() expects a scalar, got shape ", shape_str(shape()));
  return node_->values[0];
}

std::span<const double> Tensor::grad() const {
  check_contract(node_->requires_grad, "tensor does not track gradients");
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_->requires_grad) node_->grad.assign(node_->values.size(), 0.0);
}

void Tensor::backward() const {
  check_shape(size() == 1, "backward() expects a scalar root, got shape ", shape_str(shape()));
  check_contract(node_->requires_grad, "backward() on a tensor that does not require gradients");

  // Collect the reachable differentiable subgraph.
  std::vector<detail::NodePtr> nodes;
  std::unordered_set<const detail::Node*> seen;
  std::vector<detail::NodePtr> stack{node_};
  seen.insert(node_.get());
  while (!stack.empty()) {
    detail::NodePtr cur = stack.back();
    stack.pop_back();
    nodes.push_back(cur);
    for (const auto& p : cur->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p);
    }
  }
  // Children always have larger ids than their parents, so descending ids
  // are a valid (and deterministic) topological order.
  std::sort(nodes.begin(), nodes.end(),
            [](const detail::NodePtr& a, const detail::NodePtr& b) { return a->id > b->id; });

  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (auto& n : nodes) {
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

Tensor make_op(Shape shape, std::vector<double> values, const std::vector<Tensor>& parents,
               std::function<void(detail::Node&)> backward) {
  auto node = detail::new_node(std::move(shape), std::move(values));
  bool track = false;
  if (detail::grad_enabled()) {
    for (const auto& p : parents) track = track || p.requires_grad();
  }
  if (track) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (const auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(backward);
  }
  return Tensor::wrap(std::move(node));
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  check_shape(a.shape() == b.shape(), op, ": shape mismatch ", shape_str(a.shape()), " vs ",
              shape_str(b.shape()));
}

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& x, Fwd fwd, Bwd dfdx) {
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  auto xn = x.node();
  return make_op(x.shape(), std::move(out), {x}, [xn, dfdx](detail::Node& self) {
    double* gx = detail::grad_buf(xn);
    if (!gx) return;
    for (size_t i = 0; i < self.values.size(); ++i)
      gx[i] += self.grad[i] * dfdx(xn->values[i], self.values[i]);
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  auto an = a.node();
  auto bn = b.node();
  return make_op(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node& self) {
    if (double* ga = detail::grad_buf(an))
      for (size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
    if (double* gb = detail::grad_buf(bn))
      for (size_t i = 0; i < self.grad.size(); ++i) gb[i] += self.grad[i];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
  auto an = a.node();
  auto bn = b.node();
  return make_op(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node& self) {
    if (double* ga = detail::grad_buf(an))
      for (size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
    if (double* gb = detail::grad_buf(bn))
      for (size_t i = 0; i < self.grad.size(); ++i) gb[i] -= self.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  auto an = a.node();
  auto bn = b.node();
  return make_op(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node& self) {
    if (double* ga = detail::grad_buf(an))
      for (size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * bn->values[i];
    if (double* gb = detail::grad_buf(bn))
      for (size_t i = 0; i < self.grad.size(); ++i) gb[i] += self.grad[i] * an->values[i];
  });
}

Tensor neg(const Tensor& x) {
  return unary_op(
      x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor add_scalar(const Tensor& x, double s) {
  return unary_op(
      x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& x, double s) {
  return unary_op(
      x, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  check_shape(v.rank() == 1, "add_rowvec: bias must be rank 1, got ", shape_str(v.shape()));
  const int64_t d = v.dim(0);
  check_shape(x.rank() >= 1 && x.shape().back() == d, "add_rowvec: last dim of ",
              shape_str(x.shape()), " must be ", d);
  const auto xv = x.values();
  const auto vv = v.values();
  std::vector<double> out(xv.size());
  const int64_t rows = x.size() / d;
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < d; ++c) out[r * d + c] = xv[r * d + c] + vv[c];
  auto xn = x.node();
  auto vn = v.node();
  return make_op(x.shape(), std::move(out), {x, v}, [xn, vn, rows, d](detail::Node& self) {
    if (double* gx = detail::grad_buf(xn))
      for (size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
    if (double* gv = detail::grad_buf(vn))
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < d; ++c) gv[c] += self.grad[r * d + c];
  });
}

Tensor exp(const Tensor& x) {
  return unary_op(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary_op(
      x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor tanh(const Tensor& x) {
  return unary_op(
      x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor silu(const Tensor& x) {
  return unary_op(
      x, [](double v) { return v / (1.0 + std::exp(-v)); },
      [](double v, double) {
        double s = 1.0 / (1.0 + std::exp(-v));
        return s * (1.0 + v * (1.0 - s));
      });
}

Tensor relu(const Tensor& x) {
  return unary_op(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor abs_val(const Tensor& x) {
  return unary_op(
      x, [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

namespace {

// C[g] += A[g] * B[g or 0], with optional transposed B.
void gemm_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n,
              bool b_transposed) {
  if (!b_transposed) {
    for (int64_t i = 0; i < m; ++i) {
      double* crow = c + i * n;
      const double* arow = a + i * k;
      for (int64_t p = 0; p < k; ++p) {
        const double av = arow[p];
        if (av == 0.0) continue;
        const double* brow = b + p * n;
        for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
    // b is [n,k]
    for (int64_t i = 0; i < m; ++i) {
      const double* arow = a + i * k;
      double* crow = c + i * n;
      for (int64_t j = 0; j < n; ++j) {
        const double* brow = b + j * k;
        double acc = 0.0;
        for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
        crow[j] += acc;
      }
    }
  }
}

// dA += dC * B^T   (B given as [k,n])
void gemm_grad_a(const double* dc, const double* b, double* da, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* dcrow = dc + i * n;
    double* darow = da + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (int64_t j = 0; j < n; ++j) acc += dcrow[j] * brow[j];
      darow[p] += acc;
    }
  }
}

// dB += A^T * dC   (A given as [m,k])
void gemm_grad_b(const double* a, const double* dc, double* db, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* dcrow = dc + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* dbrow = db + p * n;
      for (int64_t j = 0; j < n; ++j) dbrow[j] += av * dcrow[j];
    }
  }
}

struct MatmulDims {
  int64_t groups;  // 1 for 2D
  int64_t m, k, n;
  bool b_batched;
};

MatmulDims matmul_dims(const Tensor& a, const Tensor& b, bool nt) {
  MatmulDims d{};
  check_shape(a.rank() == 2 || a.rank() == 3, "matmul: lhs rank must be 2 or 3, got ",
              shape_str(a.shape()));
  check_shape(b.rank() == 2 || b.rank() == 3, "matmul: rhs rank must be 2 or 3, got ",
              shape_str(b.shape()));
  d.groups = a.rank() == 3 ? a.dim(0) : 1;
  d.m = a.dim(a.rank() - 2);
  d.k = a.dim(a.rank() - 1);
  d.b_batched = b.rank() == 3;
  if (d.b_batched) {
    check_shape(a.rank() == 3 && b.dim(0) == d.groups, "matmul: batch mismatch ",
                shape_str(a.shape()), " vs ", shape_str(b.shape()));
  }
  const int64_t bk = nt ? b.dim(b.rank() - 1) : b.dim(b.rank() - 2);
  d.n = nt ? b.dim(b.rank() - 2) : b.dim(b.rank() - 1);
  check_shape(bk == d.k, "matmul: inner dim mismatch ", shape_str(a.shape()), " vs ",
              shape_str(b.shape()));
  return d;
}

Tensor matmul_impl(const Tensor& a, const Tensor& b, bool nt) {
  const MatmulDims d = matmul_dims(a, b, nt);
  Shape out_shape = a.rank() == 3 ? Shape{d.groups, d.m, d.n} : Shape{d.m, d.n};
  std::vector<double> out(static_cast<size_t>(d.groups * d.m * d.n), 0.0);
  const double* ap = a.values().data();
  const double* bp = b.values().data();
  const int64_t b_stride = d.b_batched ? d.k * d.n : 0;
  for (int64_t g = 0; g < d.groups; ++g)
    gemm_acc(ap + g * d.m * d.k, bp + g * b_stride, out.data() + g * d.m * d.n, d.m, d.k, d.n, nt);

  auto an = a.node();
  auto bn = b.node();
  return make_op(std::move(out_shape), std::move(out), {a, b}, [an, bn, d, nt](detail::Node& self) {
    const int64_t b_stride = d.b_batched ? d.k * d.n : 0;
    double* ga = detail::grad_buf(an);
    double* gb = detail::grad_buf(bn);
    for (int64_t g = 0; g < d.groups; ++g) {
      const double* dc = self.grad.data() + g * d.m * d.n;
      const double* ap = an->values.data() + g * d.m * d.k;
      const double* bp = bn->values.data() + g * b_stride;
      if (!nt) {
        if (ga) gemm_grad_a(dc, bp, ga + g * d.m * d.k, d.m, d.k, d.n);
        if (gb) gemm_grad_b(ap, dc, gb + g * b_stride, d.m, d.k, d.n);
      } else {
        // C = A * B^T with B [n,k]: dA += dC * B ; dB += dC^T * A.
        if (ga) gemm_acc(dc, bp, ga + g * d.m * d.k, d.m, d.n, d.k, false);
        if (gb) {
          double* gbp = gb + g * b_stride;
          const double* dcp = dc;
          for (int64_t i = 0; i < d.m; ++i) {
            for (int64_t j = 0; j < d.n; ++j) {
              const double dv = dcp[i * d.n + j];
              if (dv == 0.0) continue;
              const double* arow = ap + i * d.k;
              double* gbrow = gbp + j * d.k;
              for (int64_t p = 0; p < d.k; ++p) gbrow[p] += dv * arow[p];
            }
          }
        }
      }
    }
  });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) { return matmul_impl(a, b, false); }
Tensor matmul_nt(const Tensor& a, const Tensor& b) { return matmul_impl(a, b, true); }

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  check_shape(numel(shape) == x.size(), "reshape: cannot view ", shape_str(x.shape()), " as ",
              shape_str(shape));
  std::vector<double> out(x.values().begin(), x.values().end());
  auto xn = x.node();
  return make_op(std::move(shape), std::move(out), {x}, [xn](detail::Node& self) {
    if (double* gx = detail::grad_buf(xn))
      for (size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  });
}

namespace {

// Row-major decomposition around one axis: x viewed as [outer, axis, inner].
struct AxisView {
  int64_t outer, axis, inner;
};

AxisView axis_view(const Shape& shape, int64_t axis) {
  AxisView v{1, shape[static_cast<size_t>(axis)], 1};
  for (int64_t i = 0; i < axis; ++i) v.outer *= shape[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

int64_t normalize_axis(const Tensor& x, int64_t axis) {
  if (axis < 0) axis += x.rank();
  check_shape(axis >= 0 && axis < x.rank(), "axis ", axis, " out of range for ",
              shape_str(x.shape()));
  return axis;
}

}  // namespace

Tensor narrow(const Tensor& x, int64_t axis, int64_t start, int64_t length) {
  axis = normalize_axis(x, axis);
  check_shape(start >= 0 && length >= 0 && start + length <= x.dim(axis), "narrow: range [", start,
              ",", start + length, ") out of bounds for axis ", axis, " of ",
              shape_str(x.shape()));
  const AxisView v = axis_view(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[static_cast<size_t>(axis)] = length;
  std::vector<double> out(static_cast<size_t>(v.outer * length * v.inner));
  const double* xp = x.values().data();
  for (int64_t o = 0; o < v.outer; ++o)
    for (int64_t i = 0; i < length; ++i)
      std::copy_n(xp + (o * v.axis + start + i) * v.inner, v.inner,
                  out.data() + (o * length + i) * v.inner);
  auto xn = x.node();
  return make_op(std::move(out_shape), std::move(out), {x},
                 [xn, v, start, length](detail::Node& self) {
                   double* gx = detail::grad_buf(xn);
                   if (!gx) return;
                   const double* g = self.grad.data();
                   for (int64_t o = 0; o < v.outer; ++o)
                     for (int64_t i = 0; i < length; ++i) {
                       double* dst = gx + (o * v.axis + start + i) * v.inner;
                       const double* src = g + (o * length + i) * v.inner;
                       for (int64_t c = 0; c < v.inner; ++c) dst[c] += src[c];
                     }
                 });
}

Tensor take_every(const Tensor& x, int64_t axis, int64_t step) {
  axis = normalize_axis(x, axis);
  check_config(step >= 1, "take_every: step must be >= 1, got ", step);
  const AxisView v = axis_view(x.shape(), axis);
  const int64_t kept = ceil_div(v.axis, step);
  Shape out_shape = x.shape();
  out_shape[static_cast<size_t>(axis)] = kept;
  std::vector<double> out(static_cast<size_t>(v.outer * kept * v.inner));
  const double* xp = x.values().data();
  for (int64_t o = 0; o < v.outer; ++o)
    for (int64_t i = 0; i < kept; ++i)
      std::copy_n(xp + (o * v.axis + i * step) * v.inner, v.inner,
                  out.data() + (o * kept + i) * v.inner);
  auto xn = x.node();
  return make_op(std::move(out_shape), std::move(out), {x},
                 [xn, v, kept, step](detail::Node& self) {
                   double* gx = detail::grad_buf(xn);
                   if (!gx) return;
                   const double* g = self.grad.data();
                   for (int64_t o = 0; o < v.outer; ++o)
                     for (int64_t i = 0; i < kept; ++i) {
                       double* dst = gx + (o * v.axis + i * step) * v.inner;
                       const double* src = g + (o * kept + i) * v.inner;
                       for (int64_t c = 0; c < v.inner; ++c) dst[c] += src[c];
                     }
                 });
}

Tensor concat(const Tensor& a, const Tensor& b, int64_t axis) {
  axis = normalize_axis(a, axis);
  check_shape(a.rank() == b.rank(), "concat: rank mismatch ", shape_str(a.shape()), " vs ",
              shape_str(b.shape()));
  for (int64_t i = 0; i < a.rank(); ++i)
    if (i != axis)
      check_shape(a.dim(i) == b.dim(i), "concat: shape mismatch ", shape_str(a.shape()), " vs ",
                  shape_str(b.shape()), " on axis ", i);
  const AxisView va = axis_view(a.shape(), axis);
  const AxisView vb = axis_view(b.shape(), axis);
  Shape out_shape = a.shape();
  out_shape[static_cast<size_t>(axis)] = va.axis + vb.axis;
  const int64_t total = va.axis + vb.axis;
  std::vector<double> out(static_cast<size_t>(va.outer * total * va.inner));
  const double* ap = a.values().data();
  const double* bp = b.values().data();
  for (int64_t o = 0; o < va.outer; ++o) {
    std::copy_n(ap + o * va.axis * va.inner, va.axis * va.inner,
                out.data() + o * total * va.inner);
    std::copy_n(bp + o * vb.axis * vb.inner, vb.axis * vb.inner,
                out.data() + (o * total + va.axis) * va.inner);
  }
  auto an = a.node();
  auto bn = b.node();
  return make_op(std::move(out_shape), std::move(out), {a, b},
                 [an, bn, va, vb, total](detail::Node& self) {
                   const double* g = self.grad.data();
                   if (double* ga = detail::grad_buf(an))
                     for (int64_t o = 0; o < va.outer; ++o) {
                       const double* src = g + o * total * va.inner;
                       double* dst = ga + o * va.axis * va.inner;
                       for (int64_t c = 0; c < va.axis * va.inner; ++c) dst[c] += src[c];
                     }
                   if (double* gb = detail::grad_buf(bn))
                     for (int64_t o = 0; o < va.outer; ++o) {
                       const double* src = g + (o * total + va.axis) * va.inner;
                       double* dst = gb + o * vb.axis * vb.inner;
                       for (int64_t c = 0; c < vb.axis * vb.inner; ++c) dst[c] += src[c];
                     }
                 });
}

Tensor select0(const Tensor& x, int64_t index) {
  check_shape(x.rank() >= 1, "select0: rank must be >= 1");
  Tensor row = narrow(x, 0, index, 1);
  Shape shape(x.shape().begin() + 1, x.shape().end());
  return reshape(row, std::move(shape));
}

Tensor split_heads(const Tensor& x, int64_t heads) {
  check_shape(x.rank() == 3, "split_heads: expected [B,T,D], got ", shape_str(x.shape()));
  const int64_t batch = x.dim(0), t = x.dim(1), d = x.dim(2);
  check_shape(d % heads == 0, "split_heads: feature dim ", d, " not divisible by heads ", heads);
  const int64_t dh = d / heads;
  std::vector<double> out(static_cast<size_t>(batch * heads * t * dh));
  const double* xp = x.values().data();
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t i = 0; i < t; ++i)
        std::copy_n(xp + (b * t + i) * d + h * dh, dh,
                    out.data() + ((b * heads + h) * t + i) * dh);
  auto xn = x.node();
  return make_op({batch * heads, t, dh}, std::move(out), {x},
                 [xn, batch, heads, t, d, dh](detail::Node& self) {
                   double* gx = detail::grad_buf(xn);
                   if (!gx) return;
                   const double* g = self.grad.data();
                   for (int64_t b = 0; b < batch; ++b)
                     for (int64_t h = 0; h < heads; ++h)
                       for (int64_t i = 0; i < t; ++i) {
                         double* dst = gx + (b * t + i) * d + h * dh;
                         const double* src = g + ((b * heads + h) * t + i) * dh;
                         for (int64_t c = 0; c < dh; ++c) dst[c] += src[c];
                       }
                 });
}

Tensor merge_heads(const Tensor& x, int64_t heads) {
  check_shape(x.rank() == 3, "merge_heads: expected [B*H,T,dh], got ", shape_str(x.shape()));
  check_shape(x.dim(0) % heads == 0, "merge_heads: leading dim ", x.dim(0),
              " not divisible by heads ", heads);
  const int64_t batch = x.dim(0) / heads, t = x.dim(1), dh = x.dim(2);
  const int64_t d = heads * dh;
  std::vector<double> out(static_cast<size_t>(batch * t * d));
  const double* xp = x.values().data();
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t i = 0; i < t; ++i)
        std::copy_n(xp + ((b * heads + h) * t + i) * dh, dh,
                    out.data() + (b * t + i) * d + h * dh);
  auto xn = x.node();
  return make_op({batch, t, d}, std::move(out), {x},
                 [xn, batch, heads, t, d, dh](detail::Node& self) {
                   double* gx = detail::grad_buf(xn);
                   if (!gx) return;
                   const double* g = self.grad.data();
                   for (int64_t b = 0; b < batch; ++b)
                     for (int64_t h = 0; h < heads; ++h)
                       for (int64_t i = 0; i < t; ++i) {
                         double* dst = gx + ((b * heads + h) * t + i) * dh;
                         const double* src = g + (b * t + i) * d + h * dh;
                         for (int64_t c = 0; c < dh; ++c) dst[c] += src[c];
                       }
                 });
}

// ---------------------------------------------------------------------------
// masks
// ---------------------------------------------------------------------------

AttnMask AttnMask::all(int64_t batch, int64_t tq, int64_t tk) {
  AttnMask m{batch, tq, tk, std::vector<uint8_t>(static_cast<size_t>(batch * tq * tk), 1)};
  return m;
}

AttnMask AttnMask::key_padding(const std::vector<int64_t>& valid, int64_t tq, int64_t tk) {
  const int64_t batch = static_cast<int64_t>(valid.size());
  AttnMask m{batch, tq, tk, std::vector<uint8_t>(static_cast<size_t>(batch * tq * tk), 0)};
  for (int64_t b = 0; b < batch; ++b) {
    const int64_t limit = std::min(valid[static_cast<size_t>(b)], tk);
    for (int64_t i = 0; i < tq; ++i)
      for (int64_t j = 0; j < limit; ++j) m.allow[static_cast<size_t>((b * tq + i) * tk + j)] = 1;
  }
  return m;
}

AttnMask AttnMask::causal(int64_t t) {
  AttnMask m{1, t, t, std::vector<uint8_t>(static_cast<size_t>(t * t), 0)};
  for (int64_t i = 0; i < t; ++i)
    for (int64_t j = 0; j <= i; ++j) m.allow[static_cast<size_t>(i * t + j)] = 1;
  return m;
}

AttnMask AttnMask::and_with(const AttnMask& other) const {
  check_shape(tq == other.tq && tk == other.tk, "mask combine: geometry mismatch");
  const int64_t batch_out = std::max(batch, other.batch);
  check_shape(batch == batch_out || batch == 1, "mask combine: batch mismatch");
  check_shape(other.batch == batch_out || other.batch == 1, "mask combine: batch mismatch");
  AttnMask m{batch_out, tq, tk, std::vector<uint8_t>(static_cast<size_t>(batch_out * tq * tk), 0)};
  for (int64_t b = 0; b < batch_out; ++b) {
    const uint8_t* pa = allow.data() + (batch == 1 ? 0 : b * tq * tk);
    const uint8_t* pb = other.allow.data() + (other.batch == 1 ? 0 : b * tq * tk);
    uint8_t* po = m.allow.data() + b * tq * tk;
    for (int64_t i = 0; i < tq * tk; ++i) po[i] = pa[i] & pb[i];
  }
  return m;
}

// ---------------------------------------------------------------------------
// softmax / reductions
// ---------------------------------------------------------------------------

Tensor softmax_last(const Tensor& x, const AttnMask* mask, int64_t head_groups) {
  check_shape(x.rank() >= 1, "softmax_last: rank must be >= 1");
  const int64_t cols = x.shape().back();
  const int64_t rows = x.size() / cols;
  if (mask) {
    check_shape(mask->tk == cols, "softmax_last: mask key dim ", mask->tk, " != ", cols);
    const int64_t lead = x.rank() >= 3 ? x.dim(0) : 1;
    check_shape(lead == mask->batch * head_groups, "softmax_last: mask batch ", mask->batch,
                " * heads ", head_groups, " != leading dim ", lead);
    check_shape(rows % (mask->batch * head_groups) == 0, "softmax_last: mask rows mismatch");
  }
  const int64_t rows_per_group = mask ? rows / (mask->batch * head_groups) : 0;

  std::vector<double> out(static_cast<size_t>(x.size()));
  const double* xp = x.values().data();
  for (int64_t r = 0; r < rows; ++r) {
    const uint8_t* allow = nullptr;
    if (mask) {
      const int64_t group = r / rows_per_group;  // index in [0, batch*heads)
      const int64_t b = group / head_groups;
      const int64_t q = r % rows_per_group;  // query row within [tq]
      check_shape(rows_per_group == mask->tq, "softmax_last: mask query dim ", mask->tq,
                  " != ", rows_per_group);
      allow = mask->allow.data() + (b * mask->tq + q) * mask->tk;
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t c = 0; c < cols; ++c)
      if (!allow || allow[c]) mx = std::max(mx, xp[r * cols + c]);
    check_contract(std::isfinite(mx), "softmax_last: fully masked row ", r,
                   " (caller must guarantee at least one valid key)");
    double denom = 0.0;
    for (int64_t c = 0; c < cols; ++c) {
      if (!allow || allow[c]) {
        const double e = std::exp(xp[r * cols + c] - mx);
        out[static_cast<size_t>(r * cols + c)] = e;
        denom += e;
      } else {
        out[static_cast<size_t>(r * cols + c)] = 0.0;
      }
    }
    for (int64_t c = 0; c < cols; ++c) out[static_cast<size_t>(r * cols + c)] /= denom;
  }
  auto xn = x.node();
  return make_op(x.shape(), std::move(out), {x}, [xn, rows, cols](detail::Node& self) {
    double* gx = detail::grad_buf(xn);
    if (!gx) return;
    for (int64_t r = 0; r < rows; ++r) {
      const double* p = self.values.data() + r * cols;
      const double* dp = self.grad.data() + r * cols;
      double dot = 0.0;
      for (int64_t c = 0; c < cols; ++c) dot += p[c] * dp[c];
      double* g = gx + r * cols;
      for (int64_t c = 0; c < cols; ++c) g[c] += p[c] * (dp[c] - dot);
    }
  });
}

Tensor log_softmax_last(const Tensor& x) {
  check_shape(x.rank() >= 1, "log_softmax_last: rank must be >= 1");
  const int64_t cols = x.shape().back();
  const int64_t rows = x.size() / cols;
  std::vector<double> out(static_cast<size_t>(x.size()));
  const double* xp = x.values().data();
  for (int64_t r = 0; r < rows; ++r) {
    double mx = xp[r * cols];
    for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, xp[r * cols + c]);
    double denom = 0.0;
    for (int64_t c = 0; c < cols; ++c) denom += std::exp(xp[r * cols + c] - mx);
    const double lse = mx + std::log(denom);
    for (int64_t c = 0; c < cols; ++c)
      out[static_cast<size_t>(r * cols + c)] = xp[r * cols + c] - lse;
  }
  auto xn = x.node();
  return make_op(x.shape(), std::move(out), {x}, [xn, rows, cols](detail::Node& self) {
    double* gx = detail::grad_buf(xn);
    if (!gx) return;
    for (int64_t r = 0; r < rows; ++r) {
      const double* y = self.values.data() + r * cols;
      const double* dy = self.grad.data() + r * cols;
      double total = 0.0;
      for (int64_t c = 0; c < cols; ++c) total += dy[c];
      double* g = gx + r * cols;
      for (int64_t c = 0; c < cols; ++c) g[c] += dy[c] - std::exp(y[c]) * total;
    }
  });
}

Tensor sum_all(const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  auto xn = x.node();
  return make_op(Shape{}, {total}, {x}, [xn](detail::Node& self) {
    if (double* gx = detail::grad_buf(xn)) {
      const double g = self.grad[0];
      for (size_t i = 0; i < xn->values.size(); ++i) gx[i] += g;
    }
  });
}

Tensor mean_all(const Tensor& x) { return mul_scalar(sum_all(x), 1.0 / static_cast<double>(x.size())); }

// ---------------------------------------------------------------------------
// layer norm
// ---------------------------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const int64_t d = x.shape().back();
  check_shape(gamma.rank() == 1 && gamma.dim(0) == d, "layer_norm: gamma shape mismatch");
  check_shape(beta.rank() == 1 && beta.dim(0) == d, "layer_norm: beta shape mismatch");
  const int64_t rows = x.size() / d;
  std::vector<double> out(static_cast<size_t>(x.size()));
  auto normalized = std::make_shared<std::vector<double>>(static_cast<size_t>(x.size()));
  auto inv_sigma = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
  const double* xp = x.values().data();
  const double* gp = gamma.values().data();
  const double* bp = beta.values().data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* row = xp + r * d;
    double mean = 0.0;
    for (int64_t c = 0; c < d; ++c) mean += row[c];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t c = 0; c < d; ++c) {
      const double diff = row[c] - mean;
      var += diff * diff;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_sigma)[static_cast<size_t>(r)] = inv;
    for (int64_t c = 0; c < d; ++c) {
      const double xhat = (row[c] - mean) * inv;
      (*normalized)[static_cast<size_t>(r * d + c)] = xhat;
      out[static_cast<size_t>(r * d + c)] = gp[c] * xhat + bp[c];
    }
  }
  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  return make_op(x.shape(), std::move(out), {x, gamma, beta},
                 [xn, gn, bn, normalized, inv_sigma, rows, d](detail::Node& self) {
                   double* gx = detail::grad_buf(xn);
                   double* gg = detail::grad_buf(gn);
                   double* gb = detail::grad_buf(bn);
                   const double* gp = gn->values.data();
                   for (int64_t r = 0; r < rows; ++r) {
                     const double* dy = self.grad.data() + r * d;
                     const double* xhat = normalized->data() + r * d;
                     const double inv = (*inv_sigma)[static_cast<size_t>(r)];
                     if (gg || gb) {
                       for (int64_t c = 0; c < d; ++c) {
                         if (gg) gg[c] += dy[c] * xhat[c];
                         if (gb) gb[c] += dy[c];
                       }
                     }
                     if (gx) {
                       double sum_h = 0.0, sum_hx = 0.0;
                       for (int64_t c = 0; c < d; ++c) {
                         const double h = dy[c] * gp[c];
                         sum_h += h;
                         sum_hx += h * xhat[c];
                       }
                       const double inv_d = 1.0 / static_cast<double>(d);
                       double* g = gx + r * d;
                       for (int64_t c = 0; c < d; ++c) {
                         const double h = dy[c] * gp[c];
                         g[c] += inv * (h - inv_d * sum_h - xhat[c] * inv_d * sum_hx);
                       }
                     }
                   }
                 });
}

// ---------------------------------------------------------------------------
// embedding
// ---------------------------------------------------------------------------

Tensor embedding(const Tensor& table, const std::vector<int64_t>& ids, Shape id_shape) {
  check_shape(table.rank() == 2, "embedding: table must be [V,D]");
  check_shape(numel(id_shape) == static_cast<int64_t>(ids.size()), "embedding: id count mismatch");
  const int64_t v = table.dim(0), d = table.dim(1);
  for (int64_t id : ids)
    check_shape(id >= 0 && id < v, "embedding: id ", id, " out of range [0,", v, ")");
  Shape out_shape = std::move(id_shape);
  out_shape.push_back(d);
  std::vector<double> out(ids.size() * static_cast<size_t>(d));
  const double* tp = table.values().data();
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy_n(tp + ids[i] * d, d, out.data() + static_cast<int64_t>(i) * d);
  auto tn = table.node();
  auto ids_copy = std::make_shared<std::vector<int64_t>>(ids);
  return make_op(std::move(out_shape), std::move(out), {table},
                 [tn, ids_copy, d](detail::Node& self) {
                   double* gt = detail::grad_buf(tn);
                   if (!gt) return;
                   for (size_t i = 0; i < ids_copy->size(); ++i) {
                     const double* src = self.grad.data() + static_cast<int64_t>(i) * d;
                     double* dst = gt + (*ids_copy)[i] * d;
                     for (int64_t c = 0; c < d; ++c) dst[c] += src[c];
                   }
                 });
}

int64_t argmax_span(std::span<const double> v) {
  int64_t best = 0;
  for (size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[static_cast<size_t>(best)]) best = static_cast<int64_t>(i);
  return best;
}

}  // namespace hourglass
