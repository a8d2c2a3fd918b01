#pragma once

#include <optional>
#include <vector>

#include "hourglass/nn.hpp"

namespace hourglass {

// Temporal geometry of one downsampling: length n is padded with pad_added
// synthetic trailing frames so that kept_len * d - pad_added == n.
struct ShapePlan {
  int64_t n = 0;
  int64_t d = 1;
  int64_t kept_len = 0;
  int64_t pad_added = 0;
};

ShapePlan plan_downsample(int64_t n, int64_t d);

// Zero out frames at positions >= valid[b]; x is [B,T,...].
Tensor mask_time(const Tensor& x, const std::vector<int64_t>& valid);

// Extend [B,T,...] to length target by replicating each sample's last valid
// frame. Replication (not zeros) keeps frame differences flat in the padded
// region.
Tensor pad_time_replicate(const Tensor& x, int64_t target, const std::vector<int64_t>& valid);

// Audio features to encoder rate: two stride-2 temporal convolutions
// (x4 subsampling) and a projection to the model dimension.
struct AudioFrontend {
  Conv1dModule conv1, conv2;
  Linear proj;

  AudioFrontend() = default;
  AudioFrontend(ParamStore& ps, const std::string& prefix, int64_t feat_bins, int64_t dim);
  // [B,Ta,Fa] -> [B,ceil(Ta/4),D]; Ta must be >= 4.
  Tensor forward(const Tensor& audio) const;
  static int64_t output_len(int64_t t_in) { return ceil_div(ceil_div(t_in, 2), 2); }
};

struct VideoDownsampleResult {
  Tensor kept;      // [B,kept_len,H,W,C], frames 0, d, 2d, ...
  Tensor retained;  // [B,kept_len*d,H,W,C], input plus replicated tail
  ShapePlan plan;
};

// Keeps the first frame of every group of d. valid (optional) gives true
// per-sample lengths so the replicated tail starts after real content.
VideoDownsampleResult video_downsample(const Tensor& video, int64_t d,
                                       const std::vector<int64_t>* valid = nullptr);

// Stack of 3D-convolution residual blocks, stride 1 in time, each block
// halving the spatial grid; spatially pooled to 1x1 and projected to D.
struct VisualFrontend {
  struct Block {
    Conv3dModule conv1;     // channel change, stride 1
    Conv3dModule conv2;     // stride 2 spatial
    Conv3dModule shortcut;  // 1x1x1, stride 2 spatial
    LayerNormModule norm1, norm2;
  };

  std::vector<Block> blocks;
  Linear proj;

  VisualFrontend() = default;
  // block_channels lists output channels per block (2 conv layers each).
  VisualFrontend(ParamStore& ps, const std::string& prefix, int64_t in_channels,
                 const std::vector<int64_t>& block_channels, int64_t in_height, int64_t in_width,
                 int64_t dim);
  // [B,T,H,W,C] -> [B,T,D].
  Tensor forward(const Tensor& frames) const;
};

}  // namespace hourglass
