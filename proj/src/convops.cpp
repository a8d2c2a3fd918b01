#include <algorithm>
#include <cmath>

#include "hourglass/tensor.hpp"

namespace hourglass {

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int64_t stride, int64_t pad) {
  check_shape(x.rank() == 3, "conv1d: input must be [B,T,Cin], got ", shape_str(x.shape()));
  check_shape(w.rank() == 3, "conv1d: weight must be [Cout,K,Cin], got ", shape_str(w.shape()));
  const int64_t batch = x.dim(0), t = x.dim(1), cin = x.dim(2);
  const int64_t cout = w.dim(0), k = w.dim(1);
  check_shape(w.dim(2) == cin, "conv1d: channel mismatch ", w.dim(2), " vs ", cin);
  check_shape(b.rank() == 1 && b.dim(0) == cout, "conv1d: bias must be [Cout]");
  check_config(stride >= 1, "conv1d: stride must be >= 1");
  const int64_t t_out = (t + 2 * pad - k) / stride + 1;
  check_shape(t_out >= 1, "conv1d: input length ", t, " too short for kernel ", k, " stride ",
              stride);

  std::vector<double> out(static_cast<size_t>(batch * t_out * cout));
  const double* xp = x.values().data();
  const double* wp = w.values().data();
  const double* bp = b.values().data();
  for (int64_t n = 0; n < batch; ++n) {
    for (int64_t to = 0; to < t_out; ++to) {
      double* orow = out.data() + (n * t_out + to) * cout;
      for (int64_t co = 0; co < cout; ++co) orow[co] = bp[co];
      for (int64_t dk = 0; dk < k; ++dk) {
        const int64_t ti = to * stride + dk - pad;
        if (ti < 0 || ti >= t) continue;
        const double* xrow = xp + (n * t + ti) * cin;
        for (int64_t co = 0; co < cout; ++co) {
          const double* wrow = wp + (co * k + dk) * cin;
          double acc = 0.0;
          for (int64_t ci = 0; ci < cin; ++ci) acc += xrow[ci] * wrow[ci];
          orow[co] += acc;
        }
      }
    }
  }

  auto xn = x.node();
  auto wn = w.node();
  auto bn = b.node();
  return make_op({batch, t_out, cout}, std::move(out), {x, w, b},
                 [=](detail::Node& self) {
                   double* gx = detail::grad_buf(xn);
                   double* gw = detail::grad_buf(wn);
                   double* gb = detail::grad_buf(bn);
                   const double* xp = xn->values.data();
                   const double* wp = wn->values.data();
                   for (int64_t n = 0; n < batch; ++n) {
                     for (int64_t to = 0; to < t_out; ++to) {
                       const double* grow = self.grad.data() + (n * t_out + to) * cout;
                       if (gb)
                         for (int64_t co = 0; co < cout; ++co) gb[co] += grow[co];
                       for (int64_t dk = 0; dk < k; ++dk) {
                         const int64_t ti = to * stride + dk - pad;
                         if (ti < 0 || ti >= t) continue;
                         const double* xrow = xp + (n * t + ti) * cin;
                         double* gxrow = gx ? gx + (n * t + ti) * cin : nullptr;
                         for (int64_t co = 0; co < cout; ++co) {
                           const double g = grow[co];
                           if (g == 0.0) continue;
                           const double* wrow = wp + (co * k + dk) * cin;
                           if (gxrow)
                             for (int64_t ci = 0; ci < cin; ++ci) gxrow[ci] += g * wrow[ci];
                           if (gw) {
                             double* gwrow = gw + (co * k + dk) * cin;
                             for (int64_t ci = 0; ci < cin; ++ci) gwrow[ci] += g * xrow[ci];
                           }
                         }
                       }
                     }
                   }
                 });
}

Tensor depthwise_conv1d(const Tensor& x, const Tensor& w) {
  check_shape(x.rank() == 3, "depthwise_conv1d: input must be [B,T,C]");
  check_shape(w.rank() == 2, "depthwise_conv1d: weight must be [C,K]");
  const int64_t batch = x.dim(0), t = x.dim(1), c = x.dim(2);
  const int64_t k = w.dim(1);
  check_shape(w.dim(0) == c, "depthwise_conv1d: channel mismatch");
  check_config(k % 2 == 1, "depthwise_conv1d: kernel must be odd, got ", k);
  const int64_t pad = (k - 1) / 2;

  std::vector<double> out(static_cast<size_t>(batch * t * c), 0.0);
  const double* xp = x.values().data();
  const double* wp = w.values().data();
  for (int64_t n = 0; n < batch; ++n)
    for (int64_t to = 0; to < t; ++to) {
      double* orow = out.data() + (n * t + to) * c;
      for (int64_t dk = 0; dk < k; ++dk) {
        const int64_t ti = to + dk - pad;
        if (ti < 0 || ti >= t) continue;
        const double* xrow = xp + (n * t + ti) * c;
        for (int64_t ch = 0; ch < c; ++ch) orow[ch] += xrow[ch] * wp[ch * k + dk];
      }
    }

  auto xn = x.node();
  auto wn = w.node();
  return make_op(x.shape(), std::move(out), {x, w}, [=](detail::Node& self) {
    double* gx = detail::grad_buf(xn);
    double* gw = detail::grad_buf(wn);
    const double* xp = xn->values.data();
    const double* wp = wn->values.data();
    for (int64_t n = 0; n < batch; ++n)
      for (int64_t to = 0; to < t; ++to) {
        const double* grow = self.grad.data() + (n * t + to) * c;
        for (int64_t dk = 0; dk < k; ++dk) {
          const int64_t ti = to + dk - pad;
          if (ti < 0 || ti >= t) continue;
          const double* xrow = xp + (n * t + ti) * c;
          double* gxrow = gx ? gx + (n * t + ti) * c : nullptr;
          for (int64_t ch = 0; ch < c; ++ch) {
            if (gxrow) gxrow[ch] += grow[ch] * wp[ch * k + dk];
            if (gw) gw[ch * k + dk] += grow[ch] * xrow[ch];
          }
        }
      }
  });
}

Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b, int64_t spatial_stride,
              int64_t spatial_pad) {
  check_shape(x.rank() == 5, "conv3d: input must be [B,T,H,W,Cin], got ", shape_str(x.shape()));
  check_shape(w.rank() == 5, "conv3d: weight must be [Cout,kt,kh,kw,Cin], got ",
              shape_str(w.shape()));
  const int64_t batch = x.dim(0), t = x.dim(1), h = x.dim(2), wd = x.dim(3), cin = x.dim(4);
  const int64_t cout = w.dim(0), kt = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  check_shape(w.dim(4) == cin, "conv3d: channel mismatch ", w.dim(4), " vs ", cin);
  check_shape(b.rank() == 1 && b.dim(0) == cout, "conv3d: bias must be [Cout]");
  check_config(kt % 2 == 1, "conv3d: temporal kernel must be odd");
  const int64_t pt = (kt - 1) / 2;  // temporal stride fixed at 1, same length
  const int64_t s = spatial_stride, p = spatial_pad;
  const int64_t h_out = (h + 2 * p - kh) / s + 1;
  const int64_t w_out = (wd + 2 * p - kw) / s + 1;
  check_config(h_out >= 1 && w_out >= 1, "conv3d: spatial dims ", h, "x", wd,
               " too small for kernel ", kh, " stride ", s);

  std::vector<double> out(static_cast<size_t>(batch * t * h_out * w_out * cout));
  const double* xp = x.values().data();
  const double* wp = w.values().data();
  const double* bp = b.values().data();
  for (int64_t n = 0; n < batch; ++n)
    for (int64_t to = 0; to < t; ++to)
      for (int64_t ho = 0; ho < h_out; ++ho)
        for (int64_t wo = 0; wo < w_out; ++wo) {
          double* orow = out.data() + (((n * t + to) * h_out + ho) * w_out + wo) * cout;
          for (int64_t co = 0; co < cout; ++co) orow[co] = bp[co];
          for (int64_t dt = 0; dt < kt; ++dt) {
            const int64_t ti = to + dt - pt;
            if (ti < 0 || ti >= t) continue;
            for (int64_t dh = 0; dh < kh; ++dh) {
              const int64_t hi = ho * s + dh - p;
              if (hi < 0 || hi >= h) continue;
              for (int64_t dw = 0; dw < kw; ++dw) {
                const int64_t wi = wo * s + dw - p;
                if (wi < 0 || wi >= wd) continue;
                const double* xrow = xp + (((n * t + ti) * h + hi) * wd + wi) * cin;
                const double* wbase = wp + ((dt * kh + dh) * kw + dw) * cin;
                for (int64_t co = 0; co < cout; ++co) {
                  const double* wrow = wbase + co * cin * kt * kh * kw;
                  double acc = 0.0;
                  for (int64_t ci = 0; ci < cin; ++ci) acc += xrow[ci] * wrow[ci];
                  orow[co] += acc;
                }
              }
            }
          }
        }

  auto xn = x.node();
  auto wn = w.node();
  auto bn = b.node();
  return make_op({batch, t, h_out, w_out, cout}, std::move(out), {x, w, b},
                 [=](detail::Node& self) {
                   double* gx = detail::grad_buf(xn);
                   double* gw = detail::grad_buf(wn);
                   double* gb = detail::grad_buf(bn);
                   const double* xp = xn->values.data();
                   const double* wp = wn->values.data();
                   const int64_t wstride = cin * kt * kh * kw;
                   for (int64_t n = 0; n < batch; ++n)
                     for (int64_t to = 0; to < t; ++to)
                       for (int64_t ho = 0; ho < h_out; ++ho)
                         for (int64_t wo = 0; wo < w_out; ++wo) {
                           const double* grow =
                               self.grad.data() + (((n * t + to) * h_out + ho) * w_out + wo) * cout;
                           if (gb)
                             for (int64_t co = 0; co < cout; ++co) gb[co] += grow[co];
                           for (int64_t dt = 0; dt < kt; ++dt) {
                             const int64_t ti = to + dt - pt;
                             if (ti < 0 || ti >= t) continue;
                             for (int64_t dh = 0; dh < kh; ++dh) {
                               const int64_t hi = ho * s + dh - p;
                               if (hi < 0 || hi >= h) continue;
                               for (int64_t dw = 0; dw < kw; ++dw) {
                                 const int64_t wi = wo * s + dw - p;
                                 if (wi < 0 || wi >= wd) continue;
                                 const int64_t xoff = (((n * t + ti) * h + hi) * wd + wi) * cin;
                                 const int64_t woff = ((dt * kh + dh) * kw + dw) * cin;
                                 const double* xrow = xp + xoff;
                                 double* gxrow = gx ? gx + xoff : nullptr;
                                 for (int64_t co = 0; co < cout; ++co) {
                                   const double g = grow[co];
                                   if (g == 0.0) continue;
                                   const double* wrow = wp + woff + co * wstride;
                                   if (gxrow)
                                     for (int64_t ci = 0; ci < cin; ++ci)
                                       gxrow[ci] += g * wrow[ci];
                                   if (gw) {
                                     double* gwrow = gw + woff + co * wstride;
                                     for (int64_t ci = 0; ci < cin; ++ci)
                                       gwrow[ci] += g * xrow[ci];
                                   }
                                 }
                               }
                             }
                           }
                         }
                 });
}

Tensor spatial_mean(const Tensor& x) {
  check_shape(x.rank() == 5, "spatial_mean: input must be [B,T,H,W,C]");
  const int64_t batch = x.dim(0), t = x.dim(1), h = x.dim(2), w = x.dim(3), c = x.dim(4);
  const double inv = 1.0 / static_cast<double>(h * w);
  std::vector<double> out(static_cast<size_t>(batch * t * c), 0.0);
  const double* xp = x.values().data();
  for (int64_t n = 0; n < batch; ++n)
    for (int64_t ti = 0; ti < t; ++ti) {
      double* orow = out.data() + (n * t + ti) * c;
      for (int64_t s = 0; s < h * w; ++s) {
        const double* xrow = xp + ((n * t + ti) * h * w + s) * c;
        for (int64_t ch = 0; ch < c; ++ch) orow[ch] += xrow[ch];
      }
      for (int64_t ch = 0; ch < c; ++ch) orow[ch] *= inv;
    }
  auto xn = x.node();
  return make_op({batch, t, c}, std::move(out), {x}, [=](detail::Node& self) {
    double* gx = detail::grad_buf(xn);
    if (!gx) return;
    for (int64_t n = 0; n < batch; ++n)
      for (int64_t ti = 0; ti < t; ++ti) {
        const double* grow = self.grad.data() + (n * t + ti) * c;
        for (int64_t s = 0; s < h * w; ++s) {
          double* gxrow = gx + ((n * t + ti) * h * w + s) * c;
          for (int64_t ch = 0; ch < c; ++ch) gxrow[ch] += grow[ch] * inv;
        }
      }
  });
}

}  // namespace hourglass
