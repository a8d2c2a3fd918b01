#include "hourglass/nn.hpp"

#include <cmath>

namespace hourglass {

Tensor ParamStore::create(const std::string& name, Shape shape, Init init, double fan_in,
                          double fan_out, double scale) {
  check_config(index_.find(name) == index_.end(), "duplicate parameter name: ", name);
  Tensor t;
  switch (init) {
    case Init::kZero:
      t = Tensor::zeros(shape, /*requires_grad=*/true);
      break;
    case Init::kOne:
      t = Tensor::full(shape, 1.0, /*requires_grad=*/true);
      break;
    case Init::kUniformFan: {
      const double a = std::sqrt(6.0 / (fan_in + fan_out)) * scale;
      t = Tensor::rand_uniform(shape, rng_, -a, a, /*requires_grad=*/true);
      break;
    }
    case Init::kNormalScaled:
      t = Tensor::randn(shape, rng_, scale, /*requires_grad=*/true);
      break;
  }
  index_[name] = items_.size();
  items_.emplace_back(name, t);
  return t;
}

Tensor* ParamStore::find(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) return nullptr;
  return &items_[it->second].second;
}

int64_t ParamStore::total_size() const {
  int64_t n = 0;
  for (const auto& [name, t] : items_) n += t.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [name, t] : items_) t.zero_grad();
}

Linear::Linear(ParamStore& ps, const std::string& prefix, int64_t d_in, int64_t d_out) {
  w = ps.create(scoped(prefix, "w"), {d_in, d_out}, ParamStore::Init::kUniformFan,
                static_cast<double>(d_in), static_cast<double>(d_out));
  b = ps.create(scoped(prefix, "b"), {d_out}, ParamStore::Init::kZero);
}

Linear Linear::zero_init(ParamStore& ps, const std::string& prefix, int64_t d_in, int64_t d_out) {
  Linear l;
  l.w = ps.create(scoped(prefix, "w"), {d_in, d_out}, ParamStore::Init::kZero);
  l.b = ps.create(scoped(prefix, "b"), {d_out}, ParamStore::Init::kZero);
  return l;
}

LayerNormModule::LayerNormModule(ParamStore& ps, const std::string& prefix, int64_t dim) {
  gamma = ps.create(scoped(prefix, "gamma"), {dim}, ParamStore::Init::kOne);
  beta = ps.create(scoped(prefix, "beta"), {dim}, ParamStore::Init::kZero);
}

Conv1dModule::Conv1dModule(ParamStore& ps, const std::string& prefix, int64_t c_in, int64_t c_out,
                           int64_t k, int64_t stride, int64_t pad)
    : stride(stride), pad(pad) {
  w = ps.create(scoped(prefix, "w"), {c_out, k, c_in}, ParamStore::Init::kUniformFan,
                static_cast<double>(c_in * k), static_cast<double>(c_out * k));
  b = ps.create(scoped(prefix, "b"), {c_out}, ParamStore::Init::kZero);
}

Conv3dModule::Conv3dModule(ParamStore& ps, const std::string& prefix, int64_t c_in, int64_t c_out,
                           int64_t k, int64_t spatial_stride, int64_t spatial_pad)
    : spatial_stride(spatial_stride), spatial_pad(spatial_pad) {
  w = ps.create(scoped(prefix, "w"), {c_out, k, k, k, c_in}, ParamStore::Init::kUniformFan,
                static_cast<double>(c_in * k * k * k), static_cast<double>(c_out * k * k * k));
  b = ps.create(scoped(prefix, "b"), {c_out}, ParamStore::Init::kZero);
}

FeedForward::FeedForward(ParamStore& ps, const std::string& prefix, int64_t d_in, int64_t hidden,
                         int64_t d_out)
    : up(ps, scoped(prefix, "up"), d_in, hidden), down(ps, scoped(prefix, "down"), hidden, d_out) {}

MultiHeadAttention::MultiHeadAttention(ParamStore& ps, const std::string& prefix, int64_t dim,
                                       int64_t heads, bool zero_out_proj)
    : heads(heads), dim(dim) {
  check_config(heads >= 1, "attention: heads must be >= 1");
  check_shape(dim % heads == 0, "attention: dim ", dim, " not divisible by heads ", heads);
  wq = Linear(ps, scoped(prefix, "wq"), dim, dim);
  wk = Linear(ps, scoped(prefix, "wk"), dim, dim);
  wv = Linear(ps, scoped(prefix, "wv"), dim, dim);
  wo = zero_out_proj ? Linear::zero_init(ps, scoped(prefix, "wo"), dim, dim)
                     : Linear(ps, scoped(prefix, "wo"), dim, dim);
}

MultiHeadAttention::Output MultiHeadAttention::forward(const Tensor& query, const Tensor& key,
                                                       const Tensor& value,
                                                       const AttnMask* mask) const {
  check_shape(query.rank() == 3 && key.rank() == 3 && value.rank() == 3,
              "attention: inputs must be [B,T,D]");
  check_shape(query.dim(2) == dim && key.dim(2) == dim && value.dim(2) == dim,
              "attention: feature dim mismatch, expected ", dim);
  check_shape(key.dim(1) == value.dim(1) && key.dim(0) == value.dim(0),
              "attention: key/value geometry mismatch");
  check_shape(query.dim(0) == key.dim(0), "attention: batch mismatch");
  const int64_t batch = query.dim(0);
  const int64_t tq = query.dim(1);
  const int64_t tk = key.dim(1);
  const int64_t dh = dim / heads;

  Tensor q = split_heads(wq.forward(query), heads);  // [B*H,Tq,dh]
  Tensor k = split_heads(wk.forward(key), heads);
  Tensor v = split_heads(wv.forward(value), heads);
  Tensor logits = mul_scalar(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor probs = softmax_last(logits, mask, heads);     // [B*H,Tq,Tk]
  Tensor context = merge_heads(matmul(probs, v), heads);  // [B,Tq,D]

  Output out;
  out.out = wo.forward(context);
  out.scores = reshape(probs, {batch, heads, tq, tk});
  return out;
}

ConvGatingMlp::ConvGatingMlp(ParamStore& ps, const std::string& prefix, int64_t dim,
                             int64_t hidden, int64_t kernel)
    : up(ps, scoped(prefix, "up"), dim, 2 * hidden),
      gate_norm(ps, scoped(prefix, "gate_norm"), hidden),
      down(ps, scoped(prefix, "down"), hidden, dim) {
  check_config(kernel % 2 == 1, "conv gating kernel must be odd, got ", kernel);
  dw_kernel = ps.create(scoped(prefix, "dw"), {hidden, kernel}, ParamStore::Init::kUniformFan,
                        static_cast<double>(kernel), static_cast<double>(kernel));
}

Tensor ConvGatingMlp::forward(const Tensor& x) const {
  const int64_t hidden = down.w.dim(0);
  Tensor z = silu(up.forward(x));                     // [B,T,2H]
  Tensor a = narrow(z, -1, 0, hidden);                // gate input
  Tensor g = narrow(z, -1, hidden, hidden);           // gated path
  Tensor conv = depthwise_conv1d(gate_norm.forward(g), dw_kernel);
  return down.forward(mul(a, conv));
}

}  // namespace hourglass
