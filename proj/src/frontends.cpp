#include "hourglass/frontends.hpp"

#include <algorithm>

namespace hourglass {

ShapePlan plan_downsample(int64_t n, int64_t d) {
  check_config(d >= 1, "downsample factor must be >= 1, got ", d);
  check_shape(n >= 1, "sequence length must be >= 1, got ", n);
  ShapePlan plan;
  plan.n = n;
  plan.d = d;
  plan.kept_len = ceil_div(n, d);
  plan.pad_added = plan.kept_len * d - n;
  return plan;
}

Tensor mask_time(const Tensor& x, const std::vector<int64_t>& valid) {
  check_shape(x.rank() >= 2, "mask_time: input must be [B,T,...]");
  const int64_t batch = x.dim(0), t = x.dim(1);
  check_shape(static_cast<int64_t>(valid.size()) == batch, "mask_time: need one length per sample");
  const int64_t inner = x.size() / (batch * t);
  std::vector<double> out(x.values().begin(), x.values().end());
  for (int64_t b = 0; b < batch; ++b) {
    const int64_t lo = std::clamp<int64_t>(valid[static_cast<size_t>(b)], 0, t);
    std::fill_n(out.data() + (b * t + lo) * inner, (t - lo) * inner, 0.0);
  }
  auto xn = x.node();
  auto lens = std::make_shared<std::vector<int64_t>>(valid);
  return make_op(x.shape(), std::move(out), {x}, [xn, lens, batch, t, inner](detail::Node& self) {
    double* gx = detail::grad_buf(xn);
    if (!gx) return;
    for (int64_t b = 0; b < batch; ++b) {
      const int64_t hi = std::clamp<int64_t>((*lens)[static_cast<size_t>(b)], 0, t);
      const double* src = self.grad.data() + b * t * inner;
      double* dst = gx + b * t * inner;
      for (int64_t c = 0; c < hi * inner; ++c) dst[c] += src[c];
    }
  });
}

Tensor pad_time_replicate(const Tensor& x, int64_t target, const std::vector<int64_t>& valid) {
  check_shape(x.rank() >= 2, "pad_time_replicate: input must be [B,T,...]");
  const int64_t batch = x.dim(0), t = x.dim(1);
  check_shape(target >= t, "pad_time_replicate: target ", target, " < current length ", t);
  check_shape(static_cast<int64_t>(valid.size()) == batch,
              "pad_time_replicate: need one length per sample");
  const int64_t inner = x.size() / (batch * t);
  Shape out_shape = x.shape();
  out_shape[1] = target;
  std::vector<double> out(static_cast<size_t>(batch * target * inner), 0.0);
  const double* xp = x.values().data();
  std::vector<int64_t> last(static_cast<size_t>(batch));
  for (int64_t b = 0; b < batch; ++b) {
    const int64_t n = std::clamp<int64_t>(valid[static_cast<size_t>(b)], 1, t);
    last[static_cast<size_t>(b)] = n - 1;
    std::copy_n(xp + b * t * inner, t * inner, out.data() + b * target * inner);
    // Positions [n, target) replicate frame n-1; batch-padding slots within
    // [n, t) are overwritten too, keeping every tail frame identical.
    for (int64_t i = n; i < target; ++i)
      std::copy_n(xp + (b * t + n - 1) * inner, inner, out.data() + (b * target + i) * inner);
  }
  auto xn = x.node();
  auto lastv = std::make_shared<std::vector<int64_t>>(std::move(last));
  return make_op(std::move(out_shape), std::move(out), {x},
                 [xn, lastv, batch, t, target, inner](detail::Node& self) {
                   double* gx = detail::grad_buf(xn);
                   if (!gx) return;
                   for (int64_t b = 0; b < batch; ++b) {
                     const int64_t n = (*lastv)[static_cast<size_t>(b)] + 1;
                     const double* src = self.grad.data() + b * target * inner;
                     double* dst = gx + b * t * inner;
                     for (int64_t c = 0; c < n * inner; ++c) dst[c] += src[c];
                     for (int64_t i = n; i < target; ++i) {
                       const double* grow = self.grad.data() + (b * target + i) * inner;
                       double* drow = gx + (b * t + n - 1) * inner;
                       for (int64_t c = 0; c < inner; ++c) drow[c] += grow[c];
                     }
                   }
                 });
}

AudioFrontend::AudioFrontend(ParamStore& ps, const std::string& prefix, int64_t feat_bins,
                             int64_t dim)
    : conv1(ps, scoped(prefix, "conv1"), feat_bins, dim, 3, 2, 1),
      conv2(ps, scoped(prefix, "conv2"), dim, dim, 3, 2, 1),
      proj(ps, scoped(prefix, "proj"), dim, dim) {}

Tensor AudioFrontend::forward(const Tensor& audio) const {
  check_shape(audio.rank() == 3, "audio frontend: input must be [B,Ta,Fa]");
  check_shape(audio.dim(1) >= 4, "audio frontend: input too short, need Ta >= 4, got ",
              audio.dim(1));
  Tensor x = silu(conv1.forward(audio));
  x = silu(conv2.forward(x));
  return proj.forward(x);
}

VideoDownsampleResult video_downsample(const Tensor& video, int64_t d,
                                       const std::vector<int64_t>* valid) {
  check_shape(video.rank() >= 2, "video_downsample: input must be [B,T,...]");
  const int64_t batch = video.dim(0);
  const int64_t n = video.dim(1);
  VideoDownsampleResult result;
  result.plan = plan_downsample(n, d);
  std::vector<int64_t> lens =
      valid ? *valid : std::vector<int64_t>(static_cast<size_t>(batch), n);
  result.retained = pad_time_replicate(video, result.plan.kept_len * d, lens);
  result.kept = take_every(result.retained, 1, d);
  return result;
}

VisualFrontend::VisualFrontend(ParamStore& ps, const std::string& prefix, int64_t in_channels,
                               const std::vector<int64_t>& block_channels, int64_t in_height,
                               int64_t in_width, int64_t dim) {
  check_config(!block_channels.empty(), "visual frontend needs at least one block");
  check_config(in_height >= 8 && in_width >= 8, "visual frontend: spatial input must be >= 8x8, got ",
               in_height, "x", in_width);
  int64_t h = in_height, w = in_width;
  int64_t c = in_channels;
  for (size_t i = 0; i < block_channels.size(); ++i) {
    const int64_t c_out = block_channels[i];
    const std::string bp = scoped(prefix, "block" + std::to_string(i));
    Block blk;
    blk.conv1 = Conv3dModule(ps, scoped(bp, "conv1"), c, c_out, 3, 1, 1);
    blk.norm1 = LayerNormModule(ps, scoped(bp, "norm1"), c_out);
    blk.conv2 = Conv3dModule(ps, scoped(bp, "conv2"), c_out, c_out, 3, 2, 1);
    blk.norm2 = LayerNormModule(ps, scoped(bp, "norm2"), c_out);
    blk.shortcut = Conv3dModule(ps, scoped(bp, "shortcut"), c, c_out, 1, 2, 0);
    blocks.push_back(std::move(blk));
    c = c_out;
    h = ceil_div(h, 2);
    w = ceil_div(w, 2);
    check_config(h >= 1 && w >= 1, "visual frontend: spatial grid exhausted at block ", i);
  }
  proj = Linear(ps, scoped(prefix, "proj"), c, dim);
}

Tensor VisualFrontend::forward(const Tensor& frames) const {
  check_shape(frames.rank() == 5, "visual frontend: input must be [B,T,H,W,C]");
  Tensor x = frames;
  for (const auto& blk : blocks) {
    Tensor h = silu(layer_norm(blk.conv1.forward(x), blk.norm1.gamma, blk.norm1.beta));
    h = layer_norm(blk.conv2.forward(h), blk.norm2.gamma, blk.norm2.beta);
    x = silu(add(h, blk.shortcut.forward(x)));
  }
  return proj.forward(spatial_mean(x));
}

}  // namespace hourglass
