#include "hourglass/upsampler.hpp"

#include <algorithm>

namespace hourglass {

Tensor interleave_time(const Tensor& kept, const Tensor& pred, int64_t ratio) {
  check_config(ratio >= 1, "interleave_time: ratio must be >= 1, got ", ratio);
  check_shape(kept.rank() >= 2, "interleave_time: kept must be [B,T,...]");
  const int64_t batch = kept.dim(0), t = kept.dim(1);
  const int64_t inner = kept.size() / (batch * t);
  if (ratio == 1) {
    check_shape(!pred.defined() || pred.size() == 0, "interleave_time: ratio 1 takes no predictions");
    return kept;
  }
  check_shape(pred.rank() == kept.rank() && pred.dim(0) == batch,
              "interleave_time: prediction batch mismatch");
  check_shape(pred.dim(1) == (ratio - 1) * t, "interleave_time: need ", (ratio - 1) * t,
              " prediction frames, got ", pred.dim(1));
  check_shape(pred.size() / (batch * pred.dim(1)) == inner,
              "interleave_time: feature shape mismatch");

  const int64_t t_out = ratio * t;
  Shape out_shape = kept.shape();
  out_shape[1] = t_out;
  std::vector<double> out(static_cast<size_t>(batch * t_out * inner));
  const double* kp = kept.values().data();
  const double* pp = pred.values().data();
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t k = 0; k < t; ++k) {
      std::copy_n(kp + (b * t + k) * inner, inner, out.data() + (b * t_out + k * ratio) * inner);
      for (int64_t j = 1; j < ratio; ++j)
        std::copy_n(pp + (b * (ratio - 1) * t + k * (ratio - 1) + j - 1) * inner, inner,
                    out.data() + (b * t_out + k * ratio + j) * inner);
    }
  auto kn = kept.node();
  auto pn = pred.node();
  return make_op(std::move(out_shape), std::move(out), {kept, pred},
                 [kn, pn, batch, t, inner, ratio, t_out](detail::Node& self) {
                   double* gk = detail::grad_buf(kn);
                   double* gp = detail::grad_buf(pn);
                   for (int64_t b = 0; b < batch; ++b)
                     for (int64_t k = 0; k < t; ++k) {
                       if (gk) {
                         const double* src = self.grad.data() + (b * t_out + k * ratio) * inner;
                         double* dst = gk + (b * t + k) * inner;
                         for (int64_t c = 0; c < inner; ++c) dst[c] += src[c];
                       }
                       if (gp)
                         for (int64_t j = 1; j < ratio; ++j) {
                           const double* src =
                               self.grad.data() + (b * t_out + k * ratio + j) * inner;
                           double* dst =
                               gp + (b * (ratio - 1) * t + k * (ratio - 1) + j - 1) * inner;
                           for (int64_t c = 0; c < inner; ++c) dst[c] += src[c];
                         }
                     }
                 });
}

Tensor group_diff_time(const Tensor& x, int64_t group) {
  check_config(group >= 2, "group_diff_time: group must be >= 2, got ", group);
  check_shape(x.rank() >= 2, "group_diff_time: input must be [B,T,...]");
  const int64_t batch = x.dim(0), t = x.dim(1);
  check_contract(t % group == 0, "group_diff_time: length ", t, " not divisible by group ", group,
                 " (pad the sequence first)");
  const int64_t inner = x.size() / (batch * t);
  const int64_t groups = t / group;
  const int64_t t_out = groups * (group - 1);
  Shape out_shape = x.shape();
  out_shape[1] = t_out;
  std::vector<double> out(static_cast<size_t>(batch * t_out * inner));
  const double* xp = x.values().data();
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t g = 0; g < groups; ++g)
      for (int64_t j = 1; j < group; ++j) {
        const double* hi = xp + (b * t + g * group + j) * inner;
        const double* lo = xp + (b * t + g * group + j - 1) * inner;
        double* dst = out.data() + (b * t_out + g * (group - 1) + j - 1) * inner;
        for (int64_t c = 0; c < inner; ++c) dst[c] = hi[c] - lo[c];
      }
  auto xn = x.node();
  return make_op(std::move(out_shape), std::move(out), {x},
                 [xn, batch, t, inner, group, groups, t_out](detail::Node& self) {
                   double* gx = detail::grad_buf(xn);
                   if (!gx) return;
                   for (int64_t b = 0; b < batch; ++b)
                     for (int64_t g = 0; g < groups; ++g)
                       for (int64_t j = 1; j < group; ++j) {
                         const double* src =
                             self.grad.data() + (b * t_out + g * (group - 1) + j - 1) * inner;
                         double* ghi = gx + (b * t + g * group + j) * inner;
                         double* glo = gx + (b * t + g * group + j - 1) * inner;
                         for (int64_t c = 0; c < inner; ++c) {
                           ghi[c] += src[c];
                           glo[c] -= src[c];
                         }
                       }
                 });
}

Tensor repeat_time(const Tensor& x, int64_t times) {
  check_config(times >= 1, "repeat_time: times must be >= 1");
  const int64_t batch = x.dim(0), t = x.dim(1);
  const int64_t inner = x.size() / (batch * t);
  const int64_t t_out = t * times;
  Shape out_shape = x.shape();
  out_shape[1] = t_out;
  std::vector<double> out(static_cast<size_t>(batch * t_out * inner));
  const double* xp = x.values().data();
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t k = 0; k < t; ++k)
      for (int64_t j = 0; j < times; ++j)
        std::copy_n(xp + (b * t + k) * inner, inner,
                    out.data() + (b * t_out + k * times + j) * inner);
  auto xn = x.node();
  return make_op(std::move(out_shape), std::move(out), {x},
                 [xn, batch, t, inner, times, t_out](detail::Node& self) {
                   double* gx = detail::grad_buf(xn);
                   if (!gx) return;
                   for (int64_t b = 0; b < batch; ++b)
                     for (int64_t k = 0; k < t; ++k)
                       for (int64_t j = 0; j < times; ++j) {
                         const double* src =
                             self.grad.data() + (b * t_out + k * times + j) * inner;
                         double* dst = gx + (b * t + k) * inner;
                         for (int64_t c = 0; c < inner; ++c) dst[c] += src[c];
                       }
                 });
}

Tensor spatial_pool_grid(const Tensor& x, int64_t grid) {
  check_shape(x.rank() == 5, "spatial_pool_grid: input must be [B,T,H,W,C]");
  const int64_t batch = x.dim(0), t = x.dim(1), h = x.dim(2), w = x.dim(3), c = x.dim(4);
  check_config(grid >= 1 && grid <= h && grid <= w, "spatial_pool_grid: grid ", grid,
               " incompatible with ", h, "x", w);
  // Cell boundaries by even split; remainders go to the trailing cells.
  auto bounds = [](int64_t extent, int64_t g, int64_t i) {
    return std::pair<int64_t, int64_t>{i * extent / g, (i + 1) * extent / g};
  };
  const int64_t feat = grid * grid * c;
  std::vector<double> out(static_cast<size_t>(batch * t * feat), 0.0);
  const double* xp = x.values().data();
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t ti = 0; ti < t; ++ti)
      for (int64_t gi = 0; gi < grid; ++gi)
        for (int64_t gj = 0; gj < grid; ++gj) {
          auto [h0, h1] = bounds(h, grid, gi);
          auto [w0, w1] = bounds(w, grid, gj);
          const double inv = 1.0 / static_cast<double>((h1 - h0) * (w1 - w0));
          double* orow = out.data() + ((b * t + ti) * grid * grid + gi * grid + gj) * c;
          for (int64_t hh = h0; hh < h1; ++hh)
            for (int64_t ww = w0; ww < w1; ++ww) {
              const double* xrow = xp + (((b * t + ti) * h + hh) * w + ww) * c;
              for (int64_t ch = 0; ch < c; ++ch) orow[ch] += xrow[ch] * inv;
            }
        }
  auto xn = x.node();
  return make_op({batch, t, feat}, std::move(out), {x},
                 [xn, batch, t, h, w, c, grid, bounds](detail::Node& self) {
                   double* gx = detail::grad_buf(xn);
                   if (!gx) return;
                   for (int64_t b = 0; b < batch; ++b)
                     for (int64_t ti = 0; ti < t; ++ti)
                       for (int64_t gi = 0; gi < grid; ++gi)
                         for (int64_t gj = 0; gj < grid; ++gj) {
                           auto [h0, h1] = bounds(h, grid, gi);
                           auto [w0, w1] = bounds(w, grid, gj);
                           const double inv =
                               1.0 / static_cast<double>((h1 - h0) * (w1 - w0));
                           const double* grow = self.grad.data() +
                                                ((b * t + ti) * grid * grid + gi * grid + gj) * c;
                           for (int64_t hh = h0; hh < h1; ++hh)
                             for (int64_t ww = w0; ww < w1; ++ww) {
                               double* gxrow = gx + (((b * t + ti) * h + hh) * w + ww) * c;
                               for (int64_t ch = 0; ch < c; ++ch)
                                 gxrow[ch] += grow[ch] * inv;
                             }
                         }
                 });
}

Tensor mean_heads(const Tensor& scores) {
  check_shape(scores.rank() == 4, "mean_heads: expected [B,H,Tq,Tk]");
  const int64_t batch = scores.dim(0), heads = scores.dim(1);
  const int64_t cell = scores.dim(2) * scores.dim(3);
  const double inv = 1.0 / static_cast<double>(heads);
  std::vector<double> out(static_cast<size_t>(batch * cell), 0.0);
  const double* sp = scores.values().data();
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t h = 0; h < heads; ++h) {
      const double* src = sp + (b * heads + h) * cell;
      double* dst = out.data() + b * cell;
      for (int64_t i = 0; i < cell; ++i) dst[i] += src[i] * inv;
    }
  auto sn = scores.node();
  return make_op({batch, scores.dim(2), scores.dim(3)}, std::move(out), {scores},
                 [sn, batch, heads, cell, inv](detail::Node& self) {
                   double* gs = detail::grad_buf(sn);
                   if (!gs) return;
                   for (int64_t b = 0; b < batch; ++b)
                     for (int64_t h = 0; h < heads; ++h) {
                       double* dst = gs + (b * heads + h) * cell;
                       const double* src = self.grad.data() + b * cell;
                       for (int64_t i = 0; i < cell; ++i) dst[i] += src[i] * inv;
                     }
                 });
}

ContextPredictor::ContextPredictor(ParamStore& ps, const std::string& prefix, int64_t dim,
                                   int64_t ratio)
    : conv(ps, scoped(prefix, "conv"), dim, dim, 3, 1, 1),
      expand(ps, scoped(prefix, "expand"), dim, (ratio - 1) * dim),
      ratio(ratio) {
  check_config(ratio >= 2, "context predictor: ratio must be >= 2, got ", ratio);
}

Tensor ContextPredictor::forward(const Tensor& h_v) const {
  check_shape(h_v.rank() == 3, "context predictor: input must be [B,T,D]");
  const int64_t batch = h_v.dim(0), t = h_v.dim(1), dim = h_v.dim(2);
  Tensor local = silu(conv.forward(h_v));
  Tensor expanded = expand.forward(local);  // [B,T,(r-1)*D]
  // Row-major view regroups the (r-1) predictions of each frame in time
  // order.
  return reshape(expanded, {batch, t * (ratio - 1), dim});
}

ResidualPredictor::ResidualPredictor(ParamStore& ps, const std::string& prefix, int64_t feat_dim,
                                     int64_t hidden, int64_t dim, int64_t ratio)
    : ffn(ps, scoped(prefix, "ffn"), feat_dim, hidden, dim), ratio(ratio) {
  check_config(ratio >= 2, "residual predictor: ratio must be >= 2, got ", ratio);
}

Tensor ResidualPredictor::forward(const Tensor& h_v, const Tensor& diffs) const {
  check_shape(h_v.rank() == 3 && diffs.rank() == 3, "residual predictor: inputs must be [B,T,*]");
  check_shape(diffs.dim(1) == h_v.dim(1) * (ratio - 1), "residual predictor: need ",
              h_v.dim(1) * (ratio - 1), " residual rows, got ", diffs.dim(1));
  return add(repeat_time(h_v, ratio - 1), ffn.forward(diffs));
}

UpsampleStage::UpsampleStage(ParamStore& ps, const std::string& prefix, int64_t dim, int64_t heads,
                             int64_t ratio, bool context_enabled, bool residual_enabled,
                             int64_t residual_feat, int64_t residual_hidden)
    : ratio(ratio), context_enabled(context_enabled), residual_enabled(residual_enabled) {
  check_config(context_enabled || residual_enabled,
               "upsample stage needs at least one prediction branch");
  if (context_enabled) context.emplace(ps, scoped(prefix, "context"), dim, ratio);
  if (residual_enabled)
    residual.emplace(ps, scoped(prefix, "residual"), residual_feat, residual_hidden, dim, ratio);
  const int64_t merged_in = (context_enabled && residual_enabled) ? 2 * dim : dim;
  merge = Linear(ps, scoped(prefix, "merge"), merged_in, dim);
  align_attn = MultiHeadAttention(ps, scoped(prefix, "align"), dim, heads);
}

UpsampleStageOutput UpsampleStage::forward(const Tensor& h_v, const Tensor* residual_feats,
                                           const Tensor& audio_keys,
                                           const std::vector<int64_t>& out_valid,
                                           const std::vector<int64_t>& key_valid) const {
  check_shape(h_v.rank() == 3, "upsample stage: h_v must be [B,T,D]");
  check_contract(audio_keys.defined(), "upsample stage: audio key sequence required");
  const int64_t t_out = h_v.dim(1) * ratio;

  Tensor combined;
  if (context_enabled) {
    Tensor p_c = interleave_time(h_v, context->forward(h_v), ratio);
    combined = p_c;
    if (residual_enabled) {
      check_contract(residual_feats != nullptr, "upsample stage: residual branch needs raw-frame features");
      Tensor diffs = group_diff_time(*residual_feats, ratio);
      Tensor p_r = interleave_time(h_v, residual->forward(h_v, diffs), ratio);
      combined = concat(p_c, p_r, -1);
    }
  } else {
    check_contract(residual_feats != nullptr, "upsample stage: residual branch needs raw-frame features");
    Tensor diffs = group_diff_time(*residual_feats, ratio);
    combined = interleave_time(h_v, residual->forward(h_v, diffs), ratio);
  }
  Tensor merged = merge.forward(combined);

  AttnMask mask = AttnMask::key_padding(key_valid, t_out, audio_keys.dim(1));
  auto attn_out = align_attn.forward(merged, audio_keys, audio_keys, &mask);

  UpsampleStageOutput out;
  out.p = add(merged, attn_out.out);
  out.alpha = mean_heads(attn_out.scores);
  out.ratio = ratio;
  out.valid = out_valid;
  return out;
}

std::vector<int64_t> UpsamplerStack::stage_ratios(int64_t factor) {
  check_config(factor >= 2, "upsampler: factor must be >= 2, got ", factor);
  // Factors split into chained stages of at most 3; 4 runs as two 2x stages.
  std::vector<int64_t> ratios;
  int64_t rest = factor;
  while (rest > 3) {
    check_config(rest % 2 == 0, "upsampler: unsupported factor ", factor);
    ratios.push_back(2);
    rest /= 2;
  }
  ratios.push_back(rest);
  std::reverse(ratios.begin(), ratios.end());
  return ratios;
}

UpsamplerStack::UpsamplerStack(ParamStore& ps, const std::string& prefix, int64_t dim,
                               int64_t heads, int64_t factor, bool context_enabled,
                               bool residual_enabled, int64_t residual_feat,
                               int64_t residual_hidden)
    : factor(factor) {
  const auto ratios = stage_ratios(factor);
  int64_t upsampled = 1;
  for (size_t i = 0; i < ratios.size(); ++i) {
    upsampled *= ratios[i];
    out_strides.push_back(factor / upsampled);
    stages.emplace_back(ps, scoped(prefix, "stage" + std::to_string(i)), dim, heads, ratios[i],
                        context_enabled, residual_enabled, residual_feat, residual_hidden);
  }
}

UpsamplerStack::Output UpsamplerStack::forward(const Tensor& h_v, const Tensor& residual_feats,
                                               const Tensor& h_a, int64_t n,
                                               const std::vector<int64_t>& valid) const {
  check_shape(residual_feats.dim(1) == h_v.dim(1) * factor,
              "upsampler: residual features must cover the padded original grid (",
              h_v.dim(1) * factor, "), got ", residual_feats.dim(1));
  Output out;
  Tensor cur = h_v;
  for (size_t i = 0; i < stages.size(); ++i) {
    const int64_t stride = out_strides[i];
    // Per-sample valid lengths on this stage's output grid; the stride-
    // matched audio keys have the same counts, so query i faces key i.
    std::vector<int64_t> grid_valid(valid.size());
    for (size_t b = 0; b < valid.size(); ++b) grid_valid[b] = ceil_div(valid[b], stride);
    Tensor stage_feats = stride == 1 ? residual_feats : take_every(residual_feats, 1, stride);
    Tensor stage_keys = stride == 1 ? h_a : take_every(h_a, 1, stride);
    const Tensor* feats_ptr = stages[i].residual_enabled ? &stage_feats : nullptr;
    auto stage_out = stages[i].forward(cur, feats_ptr, stage_keys, grid_valid, grid_valid);
    cur = stage_out.p;
    out.stage_outputs.push_back(std::move(stage_out));
  }
  check_shape(cur.dim(1) >= n, "upsampler: internal length ", cur.dim(1), " shorter than target ", n);
  out.p = cur.dim(1) == n ? cur : narrow(cur, 1, 0, n);
  return out;
}

}  // namespace hourglass
