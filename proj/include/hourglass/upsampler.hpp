#pragma once

#include <optional>
#include <vector>

#include "hourglass/nn.hpp"

namespace hourglass {

// Interleave kept frames with their predictions: output index k*ratio holds
// kept[k]; the following ratio-1 slots hold pred[k*(ratio-1) ...] in order.
// ratio == 1 passes kept through unchanged (pred must be empty-length).
Tensor interleave_time(const Tensor& kept, const Tensor& pred, int64_t ratio);

// Within-group adjacent frame differences: for each group of `group` frames
// emit the group-1 deltas x[g*group+j] - x[g*group+j-1], groups in order.
// T must be divisible by `group`.
Tensor group_diff_time(const Tensor& x, int64_t group);

// Repeat every frame `times` times along the time axis:
// out[k*times + j] = x[k].
Tensor repeat_time(const Tensor& x, int64_t times);

// Average-pool the spatial grid of [B,T,H,W,C] into cells of a g x g grid
// and flatten to [B,T,g*g*C].
Tensor spatial_pool_grid(const Tensor& x, int64_t grid);

// Mean over the head axis of [B,H,Tq,Tk] -> [B,Tq,Tk].
Tensor mean_heads(const Tensor& scores);

// Emits (ratio-1) prediction vectors per input frame from a local
// convolution over the kept sequence.
struct ContextPredictor {
  Conv1dModule conv;  // kernel 3, length preserving
  Linear expand;      // D -> (ratio-1)*D
  int64_t ratio = 2;

  ContextPredictor() = default;
  ContextPredictor(ParamStore& ps, const std::string& prefix, int64_t dim, int64_t ratio);
  // [B,T,D] -> [B,(ratio-1)*T,D]
  Tensor forward(const Tensor& h_v) const;
};

// Kept representation plus a learned transform of the motion residual:
// out[k*(r-1)+j] = h_v[k] + ffn(diff[k*(r-1)+j]).
struct ResidualPredictor {
  FeedForward ffn;  // residual feature dim -> hidden -> D
  int64_t ratio = 2;

  ResidualPredictor() = default;
  ResidualPredictor(ParamStore& ps, const std::string& prefix, int64_t feat_dim, int64_t hidden,
                    int64_t dim, int64_t ratio);
  Tensor forward(const Tensor& h_v, const Tensor& diffs) const;
};

struct UpsampleStageOutput {
  Tensor p;      // [B,ratio*T,D]
  Tensor alpha;  // head-averaged alignment scores, [B,ratio*T,Tk]
  int64_t ratio = 0;
  // Per-sample count of real (non-padded) rows in p / alpha queries; the
  // audio key side has the same valid counts by construction.
  std::vector<int64_t> valid;
};

// One up-by-`ratio` stage: interleaved context and residual predictions,
// merged by a projection of their feature-wise concatenation, plus a
// residual cross-attention over the (stride-matched) audio sequence whose
// scores feed the alignment loss.
struct UpsampleStage {
  int64_t ratio = 2;
  bool context_enabled = true;
  bool residual_enabled = true;
  std::optional<ContextPredictor> context;
  std::optional<ResidualPredictor> residual;
  Linear merge;  // 2D->D when both branches run, D->D otherwise
  MultiHeadAttention align_attn;

  UpsampleStage() = default;
  UpsampleStage(ParamStore& ps, const std::string& prefix, int64_t dim, int64_t heads,
                int64_t ratio, bool context_enabled, bool residual_enabled, int64_t residual_feat,
                int64_t residual_hidden);

  // h_v [B,T,D]; residual_feats [B,ratio*T,F] (pooled raw-frame features on
  // this stage's output grid, divisible geometry); audio_keys [B,Tk,D].
  UpsampleStageOutput forward(const Tensor& h_v, const Tensor* residual_feats,
                              const Tensor& audio_keys, const std::vector<int64_t>& out_valid,
                              const std::vector<int64_t>& key_valid) const;
};

// Chain of stages realizing a total factor d (2 -> [2], 3 -> [3],
// 4 -> [2,2]); the final output is trimmed back to the original length.
struct UpsamplerStack {
  int64_t factor = 2;
  std::vector<UpsampleStage> stages;
  std::vector<int64_t> out_strides;  // original-grid stride after each stage

  UpsamplerStack() = default;
  UpsamplerStack(ParamStore& ps, const std::string& prefix, int64_t dim, int64_t heads,
                 int64_t factor, bool context_enabled, bool residual_enabled,
                 int64_t residual_feat, int64_t residual_hidden);

  static std::vector<int64_t> stage_ratios(int64_t factor);

  struct Output {
    Tensor p;  // [B,n,D], exactly the pre-downsampling length
    std::vector<UpsampleStageOutput> stage_outputs;
  };

  // h_v [B,ceil(n/d),D]; residual_feats [B,ceil(n/d)*d,F] pooled from the
  // retained pre-downsampling frames; h_a [B,n_a,D]. n is the target output
  // length; valid lists per-sample true lengths on the original grid.
  Output forward(const Tensor& h_v, const Tensor& residual_feats, const Tensor& h_a, int64_t n,
                 const std::vector<int64_t>& valid) const;
};

}  // namespace hourglass
