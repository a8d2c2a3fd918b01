#pragma once

#include <string>
#include <vector>

#include "hourglass/model.hpp"

namespace hourglass::cost {

// Closed-form floating-point operation counts per layer kind, with the
// convention 1 multiply-accumulate = 2 flops (stated in every report).
enum class LayerKind { kLinear, kConv1d, kDepthwiseConv1d, kConv3d, kAttention, kLayerNorm, kElementwise };

LayerKind layer_kind_from_string(const std::string& name);

struct LayerDesc {
  LayerKind kind = LayerKind::kElementwise;
  int64_t t = 0;       // sequence length (query length for attention)
  int64_t tk = 0;      // key length for attention
  int64_t d_in = 0;    // input feature dim / channels
  int64_t d_out = 0;   // output feature dim / channels
  int64_t kernel = 1;  // conv kernel extent (per axis for conv3d)
  int64_t h = 0, w = 0;  // conv3d output spatial grid
  int64_t heads = 1;
  int64_t count = 0;  // element count for kElementwise
};

double module_flops(const LayerDesc& desc);

struct ModuleCost {
  std::string name;
  double flops = 0.0;
};

struct CostReport {
  std::string label;
  int64_t downsample = 1;
  std::vector<ModuleCost> modules;
  std::string config_echo;  // canonical config json

  double total() const;
  double module_total(const std::string& prefix) const;
};

struct CostInput {
  int64_t audio_frames = 100;  // feature frames per reference input
  int64_t video_frames = 25;   // raw video frames per reference input
  int64_t target_len = 8;      // assumed decoded tokens per reference input
};

// Flop inventory of one configured model on the reference input, module by
// module, mirroring the executed architecture.
CostReport model_cost(const ModelConfig& config, const CostInput& input, const std::string& label);

// Table rows: audio-only, the d=1 audio-visual baseline, and per requested
// factor the no-upsampling, context-only and full-pipeline variants.
std::vector<CostReport> cost_table(const ModelConfig& base, const std::vector<int64_t>& d_values,
                                   const CostInput& input);

std::string render_table(const std::vector<CostReport>& reports);
std::string table_json(const std::vector<CostReport>& reports, const CostInput& input);

}  // namespace hourglass::cost
