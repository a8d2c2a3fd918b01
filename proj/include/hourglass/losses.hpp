#pragma once

#include <optional>
#include <vector>

#include "hourglass/tensor.hpp"

namespace hourglass {

struct LossConfig {
  int64_t align_past = 6;    // window frames into the past (l)
  int64_t align_future = 6;  // window frames into the future (r)
  double lambda_align = 0.2;
  double lambda_ctc = 0.3;
  double label_smoothing = 0.1;

  void validate() const;
};

// Per-sample target token ids (1..V-1; 0 is the blank and never a target).
using TokenSeq = std::vector<int64_t>;

// Infeasible sequence loss instance (e.g. a CTC target longer than its
// input allows); carries the offending sample index.
struct InfeasibleError : std::runtime_error {
  int64_t sample = -1;
  InfeasibleError(int64_t sample, const std::string& msg)
      : std::runtime_error(msg), sample(sample) {}
};

// Boundary-window attention loss for one alignment matrix. alpha is
// [B,Tq,Tk] of post-softmax scores; row i of a valid query must hold a
// probability distribution. Per sample: S = sum over valid i of
// alpha[i, i-l .. i+r] (out-of-range columns contribute 0) and the loss is
// |valid_n - S|; the batch value is the sample mean.
Tensor va_align_loss(const Tensor& alpha, int64_t past, int64_t future,
                     const std::vector<int64_t>& valid);

// Mean of per-stage window losses, for chained upsampling.
Tensor va_align_loss_multi(const std::vector<Tensor>& alphas, int64_t past, int64_t future,
                           const std::vector<std::vector<int64_t>>& valids);

// Connectionist temporal classification via the log-domain forward
// algorithm over the blank-augmented label lattice; blank id is 0. Returns
// the batch mean of per-sample negative log-likelihoods. Throws
// InfeasibleError when a target cannot be aligned within its input length.
Tensor ctc_loss(const Tensor& log_probs, const std::vector<TokenSeq>& targets,
                const std::vector<int64_t>& input_lengths,
                const std::vector<int64_t>& target_lengths);

// Label-smoothed cross entropy over decoder logits [B,U,V]; targets give
// the gold id per position, valid[b] positions count per sample. The
// smoothed target is (1-eps)*onehot + eps/V. Averaged over valid positions.
Tensor ce_loss(const Tensor& logits, const std::vector<TokenSeq>& targets,
               const std::vector<int64_t>& valid, double smoothing);

struct LossBundle {
  Tensor ce;
  Tensor ctc;
  Tensor va_align;
  Tensor total;

  double ce_value() const { return ce.item(); }
  double ctc_value() const { return ctc.item(); }
  double va_value() const { return va_align.item(); }
  double total_value() const { return total.item(); }
};

// total = (1 - l1 - l2) * ce + l1 * va + l2 * ctc.
LossBundle joint_loss(const Tensor& ce, const Tensor& ctc, const Tensor& va, double lambda_align,
                      double lambda_ctc);

}  // namespace hourglass
