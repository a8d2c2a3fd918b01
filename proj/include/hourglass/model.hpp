#pragma once

#include <optional>
#include <string>
#include <vector>

#include "hourglass/encoders.hpp"
#include "hourglass/frontends.hpp"
#include "hourglass/fusion_decoder.hpp"
#include "hourglass/losses.hpp"
#include "hourglass/upsampler.hpp"

namespace hourglass {

// Full architecture and loss hyperparameters. The desk preset keeps every
// mechanism at a size that trains on a CPU in seconds; the paper preset
// mirrors the reference dimensions and is used by the cost model.
struct ModelConfig {
  int64_t dim = 64;
  int64_t heads = 2;
  int64_t ffn_hidden = 128;
  int64_t cgmlp_hidden = 96;
  int64_t conv_kernel = 3;

  int64_t audio_bins = 16;
  int64_t video_height = 16;
  int64_t video_width = 16;
  int64_t video_channels = 1;
  std::vector<int64_t> visual_blocks{8, 16};  // conv channels, 2 layers per block

  int64_t audio_layers = 2;
  int64_t visual_layers = 2;
  int64_t decoder_layers = 2;
  int64_t vocab_size = 8;  // CTC classes including blank 0

  int64_t downsample = 2;  // d; 1 disables down-up sampling
  bool use_video = true;
  bool claf_enabled = true;
  bool upsample_enabled = true;
  bool context_enabled = true;
  bool residual_enabled = true;
  int64_t residual_pool_grid = 4;

  LossConfig loss;
  int64_t max_decode_len = 24;

  void validate() const;
  std::string canonical_json() const;
  uint64_t hash() const;
  std::string to_json_text(int indent = 2) const;
  static ModelConfig from_json_text(const std::string& text);

  static ModelConfig desk_preset();
  static ModelConfig paper_preset();

  // Named training modes mirroring the ablation rows; returns the list of
  // keys the mode changed relative to the avsr baseline.
  std::vector<std::string> apply_mode(const std::string& mode);
  static const std::vector<std::string>& mode_names();
};

// One collated batch: padded feature tensors plus true lengths; padding
// regions carry zeros.
struct AVBatch {
  Tensor audio;  // [B,Ta,Fa]
  Tensor video;  // [B,Tv,H,W,C]; undefined for audio-only models
  std::vector<TokenSeq> tokens;
  std::vector<int64_t> audio_len;
  std::vector<int64_t> video_len;

  int64_t batch_size() const { return audio.dim(0); }
};

struct ModelDiagnostics {
  // Alignment matrix of the final upsampling stage, [B,n,n]; undefined when
  // the upsampler does not run.
  Tensor alpha;
  std::vector<int64_t> alpha_valid;
};

class HourglassModel {
 public:
  HourglassModel(const ModelConfig& cfg, uint64_t init_seed);

  struct Encoded {
    Tensor h_a;            // [B,n,D]
    Tensor h_v;            // [B,ceil(n/d),D] when video runs
    Tensor fused;          // [B,n,D]
    Tensor ctc_log_probs;  // [B,n,V]
    std::vector<int64_t> n_valid;
    std::vector<int64_t> kept_valid;
    std::vector<UpsampleStageOutput> stages;
  };

  Encoded encode(const AVBatch& batch) const;
  LossBundle compute_loss(const AVBatch& batch, ModelDiagnostics* diag = nullptr) const;
  std::vector<TokenSeq> recognize(const AVBatch& batch, ModelDiagnostics* diag = nullptr) const;

  ParamStore& params() { return ps_; }
  const ParamStore& params() const { return ps_; }
  const ModelConfig& config() const { return cfg_; }
  const TransformerDecoder& decoder() const { return decoder_; }

 private:
  ModelConfig cfg_;
  ParamStore ps_;
  AudioFrontend audio_frontend_;
  AudioEncoder audio_encoder_;
  std::optional<VisualFrontend> visual_frontend_;
  std::optional<VisualEncoder> visual_encoder_;
  std::optional<UpsamplerStack> upsampler_;
  std::optional<FusionModule> fusion_;
  std::optional<CtcHead> ctc_head_;  // audio-only path
  TransformerDecoder decoder_;
};

}  // namespace hourglass
