#include "hourglass/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace hourglass {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double hi = std::max(a, b);
  return hi + std::log1p(std::exp(std::min(a, b) - hi));
}

}  // namespace

void LossConfig::validate() const {
  check_config(align_past >= 0 && align_future >= 0,
               "loss config: window sizes must be >= 0, got l=", align_past, " r=", align_future);
  check_config(lambda_align >= 0.0 && lambda_ctc >= 0.0,
               "loss config: loss weights must be >= 0");
  check_config(lambda_align + lambda_ctc < 1.0,
               "loss config: lambda_align + lambda_ctc must be < 1, got ",
               lambda_align + lambda_ctc);
  check_config(label_smoothing >= 0.0 && label_smoothing < 1.0,
               "loss config: label smoothing must be in [0,1)");
}

Tensor va_align_loss(const Tensor& alpha, int64_t past, int64_t future,
                     const std::vector<int64_t>& valid) {
  check_shape(alpha.rank() == 3, "va_align_loss: alpha must be [B,Tq,Tk]");
  check_config(past >= 0 && future >= 0, "va_align_loss: window must be non-negative");
  const int64_t batch = alpha.dim(0), tq = alpha.dim(1), tk = alpha.dim(2);
  check_shape(static_cast<int64_t>(valid.size()) == batch,
              "va_align_loss: need one valid length per sample");

  // Normalization contract on the valid rows.
  const double* ap = alpha.values().data();
  for (int64_t b = 0; b < batch; ++b) {
    const int64_t n = std::min(valid[static_cast<size_t>(b)], tq);
    for (int64_t i = 0; i < n; ++i) {
      double row_sum = 0.0;
      for (int64_t j = 0; j < tk; ++j) row_sum += ap[(b * tq + i) * tk + j];
      check_contract(std::fabs(row_sum - 1.0) <= 1e-6, "va_align_loss: alpha row (", b, ",", i,
                     ") sums to ", row_sum, ", not a distribution");
    }
  }

  Tensor total = Tensor::scalar(0.0);
  for (int64_t b = 0; b < batch; ++b) {
    const int64_t n = std::min(valid[static_cast<size_t>(b)], tq);
    std::vector<double> window(static_cast<size_t>(tq * tk), 0.0);
    for (int64_t i = 0; i < n; ++i) {
      const int64_t lo = std::max<int64_t>(0, i - past);
      const int64_t hi = std::min(n - 1, i + future);
      for (int64_t j = lo; j <= hi; ++j) window[static_cast<size_t>(i * tk + j)] = 1.0;
    }
    Tensor w = Tensor::from_values({tq, tk}, std::move(window));
    Tensor mass = sum_all(mul(select0(alpha, b), w));
    Tensor loss_b = abs_val(sub(Tensor::scalar(static_cast<double>(n)), mass));
    total = add(total, loss_b);
  }
  return mul_scalar(total, 1.0 / static_cast<double>(batch));
}

Tensor va_align_loss_multi(const std::vector<Tensor>& alphas, int64_t past, int64_t future,
                           const std::vector<std::vector<int64_t>>& valids) {
  check_contract(!alphas.empty() && alphas.size() == valids.size(),
                 "va_align_loss_multi: one valid-length list per stage required");
  Tensor total = Tensor::scalar(0.0);
  for (size_t s = 0; s < alphas.size(); ++s)
    total = add(total, va_align_loss(alphas[s], past, future, valids[s]));
  return mul_scalar(total, 1.0 / static_cast<double>(alphas.size()));
}

Tensor ctc_loss(const Tensor& log_probs, const std::vector<TokenSeq>& targets,
                const std::vector<int64_t>& input_lengths,
                const std::vector<int64_t>& target_lengths) {
  check_shape(log_probs.rank() == 3, "ctc_loss: log_probs must be [B,T,V]");
  const int64_t batch = log_probs.dim(0), t_max = log_probs.dim(1), vocab = log_probs.dim(2);
  check_shape(static_cast<int64_t>(targets.size()) == batch &&
                  static_cast<int64_t>(input_lengths.size()) == batch &&
                  static_cast<int64_t>(target_lengths.size()) == batch,
              "ctc_loss: per-sample metadata size mismatch");

  struct SampleLattice {
    std::vector<int64_t> labels;       // blank-augmented, length 2U+1
    std::vector<double> log_alpha;     // T x S
    int64_t t = 0;
    int64_t s = 0;
    double log_z = kNegInf;
  };
  auto lattices = std::make_shared<std::vector<SampleLattice>>(static_cast<size_t>(batch));

  const double* lp = log_probs.values().data();
  double loss_sum = 0.0;
  for (int64_t b = 0; b < batch; ++b) {
    const int64_t t_len = input_lengths[static_cast<size_t>(b)];
    const int64_t u = target_lengths[static_cast<size_t>(b)];
    check_shape(t_len >= 1 && t_len <= t_max, "ctc_loss: input length ", t_len,
                " out of range for sample ", b);
    check_shape(u <= static_cast<int64_t>(targets[static_cast<size_t>(b)].size()),
                "ctc_loss: target length exceeds provided tokens for sample ", b);

    // Minimum frames for an alignment in the expanded-label lattice:
    // one per token plus one separating blank per adjacent repeat.
    int64_t required = u;
    for (int64_t i = 1; i < u; ++i)
      if (targets[static_cast<size_t>(b)][static_cast<size_t>(i)] ==
          targets[static_cast<size_t>(b)][static_cast<size_t>(i - 1)])
        ++required;
    if (t_len < required)
      throw InfeasibleError(
          b, detail::concat_msg("ctc_loss: sample ", b, " needs at least ", required,
                                " frames for its expanded label sequence, got ", t_len));

    auto& lat = (*lattices)[static_cast<size_t>(b)];
    lat.t = t_len;
    lat.s = 2 * u + 1;
    lat.labels.assign(static_cast<size_t>(lat.s), 0);
    for (int64_t i = 0; i < u; ++i) {
      const int64_t token = targets[static_cast<size_t>(b)][static_cast<size_t>(i)];
      check_shape(token >= 1 && token < vocab, "ctc_loss: token ", token,
                  " outside [1,", vocab, ") for sample ", b);
      lat.labels[static_cast<size_t>(2 * i + 1)] = token;
    }

    const double* row0 = lp + (b * t_max + 0) * vocab;
    lat.log_alpha.assign(static_cast<size_t>(lat.t * lat.s), kNegInf);
    lat.log_alpha[0] = row0[0];  // initial blank
    if (lat.s > 1) lat.log_alpha[1] = row0[lat.labels[1]];
    for (int64_t ti = 1; ti < lat.t; ++ti) {
      const double* row = lp + (b * t_max + ti) * vocab;
      for (int64_t s = 0; s < lat.s; ++s) {
        double acc = lat.log_alpha[static_cast<size_t>((ti - 1) * lat.s + s)];
        if (s >= 1) acc = log_add(acc, lat.log_alpha[static_cast<size_t>((ti - 1) * lat.s + s - 1)]);
        if (s >= 2 && lat.labels[static_cast<size_t>(s)] != 0 &&
            lat.labels[static_cast<size_t>(s)] != lat.labels[static_cast<size_t>(s - 2)])
          acc = log_add(acc, lat.log_alpha[static_cast<size_t>((ti - 1) * lat.s + s - 2)]);
        lat.log_alpha[static_cast<size_t>(ti * lat.s + s)] =
            acc + row[lat.labels[static_cast<size_t>(s)]];
      }
    }
    double log_z = lat.log_alpha[static_cast<size_t>((lat.t - 1) * lat.s + lat.s - 1)];
    if (lat.s > 1)
      log_z = log_add(log_z, lat.log_alpha[static_cast<size_t>((lat.t - 1) * lat.s + lat.s - 2)]);
    lat.log_z = log_z;
    loss_sum += -log_z;
  }

  auto lpn = log_probs.node();
  const double inv_batch = 1.0 / static_cast<double>(batch);
  return make_op(Shape{}, {loss_sum * inv_batch}, {log_probs},
                 [lpn, lattices, batch, t_max, vocab, inv_batch](detail::Node& self) {
                   double* gx = detail::grad_buf(lpn);
                   if (!gx) return;
                   const double upstream = self.grad[0] * inv_batch;
                   const double* lp = lpn->values.data();
                   for (int64_t b = 0; b < batch; ++b) {
                     const auto& lat = (*lattices)[static_cast<size_t>(b)];
                     const int64_t s_len = lat.s;
                     // Backward lattice: log_beta[t][s] sums path suffixes
                     // starting after frame t.
                     std::vector<double> beta(static_cast<size_t>(lat.t * s_len), kNegInf);
                     beta[static_cast<size_t>((lat.t - 1) * s_len + s_len - 1)] = 0.0;
                     if (s_len > 1) beta[static_cast<size_t>((lat.t - 1) * s_len + s_len - 2)] = 0.0;
                     for (int64_t ti = lat.t - 2; ti >= 0; --ti) {
                       const double* next_row = lp + (b * t_max + ti + 1) * vocab;
                       for (int64_t s = 0; s < s_len; ++s) {
                         double acc = beta[static_cast<size_t>((ti + 1) * s_len + s)] +
                                      next_row[lat.labels[static_cast<size_t>(s)]];
                         if (s + 1 < s_len)
                           acc = log_add(acc, beta[static_cast<size_t>((ti + 1) * s_len + s + 1)] +
                                                  next_row[lat.labels[static_cast<size_t>(s + 1)]]);
                         if (s + 2 < s_len && lat.labels[static_cast<size_t>(s + 2)] != 0 &&
                             lat.labels[static_cast<size_t>(s + 2)] !=
                                 lat.labels[static_cast<size_t>(s)])
                           acc = log_add(acc, beta[static_cast<size_t>((ti + 1) * s_len + s + 2)] +
                                                  next_row[lat.labels[static_cast<size_t>(s + 2)]]);
                         beta[static_cast<size_t>(ti * s_len + s)] = acc;
                       }
                     }
                     for (int64_t ti = 0; ti < lat.t; ++ti) {
                       double* grow = gx + (b * t_max + ti) * vocab;
                       for (int64_t s = 0; s < s_len; ++s) {
                         const double occupancy =
                             lat.log_alpha[static_cast<size_t>(ti * s_len + s)] +
                             beta[static_cast<size_t>(ti * s_len + s)] - lat.log_z;
                         if (occupancy == kNegInf) continue;
                         grow[lat.labels[static_cast<size_t>(s)]] -=
                             upstream * std::exp(occupancy);
                       }
                     }
                   }
                 });
}

Tensor ce_loss(const Tensor& logits, const std::vector<TokenSeq>& targets,
               const std::vector<int64_t>& valid, double smoothing) {
  check_shape(logits.rank() == 3, "ce_loss: logits must be [B,U,V]");
  const int64_t batch = logits.dim(0), u_max = logits.dim(1), vocab = logits.dim(2);
  check_shape(static_cast<int64_t>(targets.size()) == batch &&
                  static_cast<int64_t>(valid.size()) == batch,
              "ce_loss: per-sample metadata size mismatch");
  check_config(smoothing >= 0.0 && smoothing < 1.0, "ce_loss: smoothing must be in [0,1)");

  int64_t total_positions = 0;
  std::vector<double> smoothed(static_cast<size_t>(logits.size()), 0.0);
  for (int64_t b = 0; b < batch; ++b) {
    const int64_t n = valid[static_cast<size_t>(b)];
    check_shape(n <= u_max && n <= static_cast<int64_t>(targets[static_cast<size_t>(b)].size()),
                "ce_loss: valid length out of range for sample ", b);
    total_positions += n;
    for (int64_t i = 0; i < n; ++i) {
      const int64_t gold = targets[static_cast<size_t>(b)][static_cast<size_t>(i)];
      check_shape(gold >= 0 && gold < vocab, "ce_loss: target id ", gold, " out of range");
      double* row = smoothed.data() + (b * u_max + i) * vocab;
      const double fill = smoothing / static_cast<double>(vocab);
      for (int64_t c = 0; c < vocab; ++c) row[c] = fill;
      row[gold] += 1.0 - smoothing;
    }
  }
  check_contract(total_positions > 0, "ce_loss: no valid target positions");
  Tensor q = Tensor::from_values(logits.shape(), std::move(smoothed));
  Tensor lp = log_softmax_last(logits);
  return mul_scalar(sum_all(mul(lp, q)), -1.0 / static_cast<double>(total_positions));
}

LossBundle joint_loss(const Tensor& ce, const Tensor& ctc, const Tensor& va, double lambda_align,
                      double lambda_ctc) {
  check_config(lambda_align >= 0.0 && lambda_ctc >= 0.0, "joint_loss: weights must be >= 0");
  check_config(lambda_align + lambda_ctc < 1.0,
               "joint_loss: lambda_align + lambda_ctc must be < 1, got ",
               lambda_align + lambda_ctc);
  for (const Tensor* t : {&ce, &ctc, &va})
    check_contract(std::isfinite(t->item()), "joint_loss: non-finite component");
  LossBundle bundle;
  bundle.ce = ce;
  bundle.ctc = ctc;
  bundle.va_align = va;
  bundle.total = add(add(mul_scalar(ce, 1.0 - lambda_align - lambda_ctc),
                         mul_scalar(va, lambda_align)),
                     mul_scalar(ctc, lambda_ctc));
  return bundle;
}

}  // namespace hourglass
