#include "hourglass/model.hpp"

#include <algorithm>

#include <json.hpp>

namespace hourglass {

using nlohmann::json;

void ModelConfig::validate() const {
  check_config(dim >= 2 && heads >= 1 && dim % heads == 0, "config: dim ", dim,
               " must be positive and divisible by heads ", heads);
  check_config(ffn_hidden >= 1 && cgmlp_hidden >= 1, "config: hidden dims must be >= 1");
  check_config(conv_kernel >= 1 && conv_kernel % 2 == 1, "config: conv kernel must be odd");
  check_config(audio_bins >= 1, "config: audio_bins must be >= 1");
  check_config(vocab_size >= 2, "config: vocab needs the blank plus at least one token");
  check_config(downsample >= 1, "config: downsample factor must be >= 1, got ", downsample);
  check_config(audio_layers >= 0 && visual_layers >= 0 && decoder_layers >= 1,
               "config: invalid layer counts");
  if (use_video) {
    check_config(video_height >= 8 && video_width >= 8, "config: video patch must be >= 8x8");
    check_config(!visual_blocks.empty(), "config: visual frontend needs blocks");
    check_config(residual_pool_grid >= 1 && residual_pool_grid <= video_height &&
                     residual_pool_grid <= video_width,
                 "config: residual pool grid incompatible with the video patch");
    if (upsample_enabled) {
      check_config(downsample >= 2, "config: upsampling requires downsample >= 2");
      check_config(context_enabled, "config: the upsampler always carries the context branch");
    }
  }
  loss.validate();
}

namespace {

json config_to_json(const ModelConfig& c) {
  json j;
  j["dim"] = c.dim;
  j["heads"] = c.heads;
  j["ffn_hidden"] = c.ffn_hidden;
  j["cgmlp_hidden"] = c.cgmlp_hidden;
  j["conv_kernel"] = c.conv_kernel;
  j["audio_bins"] = c.audio_bins;
  j["video_height"] = c.video_height;
  j["video_width"] = c.video_width;
  j["video_channels"] = c.video_channels;
  j["visual_blocks"] = c.visual_blocks;
  j["audio_layers"] = c.audio_layers;
  j["visual_layers"] = c.visual_layers;
  j["decoder_layers"] = c.decoder_layers;
  j["vocab_size"] = c.vocab_size;
  j["downsample"] = c.downsample;
  j["use_video"] = c.use_video;
  j["claf_enabled"] = c.claf_enabled;
  j["upsample_enabled"] = c.upsample_enabled;
  j["context_enabled"] = c.context_enabled;
  j["residual_enabled"] = c.residual_enabled;
  j["residual_pool_grid"] = c.residual_pool_grid;
  j["align_past"] = c.loss.align_past;
  j["align_future"] = c.loss.align_future;
  j["lambda_align"] = c.loss.lambda_align;
  j["lambda_ctc"] = c.loss.lambda_ctc;
  j["label_smoothing"] = c.loss.label_smoothing;
  j["max_decode_len"] = c.max_decode_len;
  return j;
}

template <typename T>
void read_field(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

std::string ModelConfig::canonical_json() const { return config_to_json(*this).dump(); }

std::string ModelConfig::to_json_text(int indent) const { return config_to_json(*this).dump(indent); }

uint64_t ModelConfig::hash() const {
  // FNV-1a over the canonical dump (nlohmann keeps keys sorted).
  const std::string text = canonical_json();
  uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001B3ULL;
  }
  return h;
}

ModelConfig ModelConfig::from_json_text(const std::string& text) {
  json j = json::parse(text);
  ModelConfig c;
  read_field(j, "dim", c.dim);
  read_field(j, "heads", c.heads);
  read_field(j, "ffn_hidden", c.ffn_hidden);
  read_field(j, "cgmlp_hidden", c.cgmlp_hidden);
  read_field(j, "conv_kernel", c.conv_kernel);
  read_field(j, "audio_bins", c.audio_bins);
  read_field(j, "video_height", c.video_height);
  read_field(j, "video_width", c.video_width);
  read_field(j, "video_channels", c.video_channels);
  read_field(j, "visual_blocks", c.visual_blocks);
  read_field(j, "audio_layers", c.audio_layers);
  read_field(j, "visual_layers", c.visual_layers);
  read_field(j, "decoder_layers", c.decoder_layers);
  read_field(j, "vocab_size", c.vocab_size);
  read_field(j, "downsample", c.downsample);
  read_field(j, "use_video", c.use_video);
  read_field(j, "claf_enabled", c.claf_enabled);
  read_field(j, "upsample_enabled", c.upsample_enabled);
  read_field(j, "context_enabled", c.context_enabled);
  read_field(j, "residual_enabled", c.residual_enabled);
  read_field(j, "residual_pool_grid", c.residual_pool_grid);
  read_field(j, "align_past", c.loss.align_past);
  read_field(j, "align_future", c.loss.align_future);
  read_field(j, "lambda_align", c.loss.lambda_align);
  read_field(j, "lambda_ctc", c.loss.lambda_ctc);
  read_field(j, "label_smoothing", c.loss.label_smoothing);
  read_field(j, "max_decode_len", c.max_decode_len);
  c.validate();
  return c;
}

ModelConfig ModelConfig::desk_preset() { return ModelConfig{}; }

ModelConfig ModelConfig::paper_preset() {
  ModelConfig c;
  c.dim = 256;
  c.heads = 4;
  c.ffn_hidden = 2048;
  c.cgmlp_hidden = 2048;
  c.conv_kernel = 31;
  c.audio_bins = 80;
  c.video_height = 112;
  c.video_width = 112;
  c.video_channels = 3;
  c.visual_blocks = {16, 32, 64, 64};  // 8 conv layers, channels 16..64
  c.audio_layers = 24;
  c.visual_layers = 12;
  c.decoder_layers = 6;
  c.vocab_size = 4000;
  c.max_decode_len = 64;
  return c;
}

std::vector<std::string> ModelConfig::apply_mode(const std::string& mode) {
  if (mode == "avsr_full") return {};
  if (mode == "asr") {
    use_video = false;
    claf_enabled = false;
    upsample_enabled = false;
    context_enabled = false;
    residual_enabled = false;
    loss.lambda_align = 0.0;
    return {"use_video", "claf_enabled", "upsample_enabled", "context_enabled",
            "residual_enabled", "lambda_align"};
  }
  if (mode == "avsr_no_upsample") {
    upsample_enabled = false;
    context_enabled = false;
    residual_enabled = false;
    loss.lambda_align = 0.0;
    return {"upsample_enabled", "context_enabled", "residual_enabled", "lambda_align"};
  }
  if (mode == "avsr_no_claf") {
    claf_enabled = false;
    return {"claf_enabled"};
  }
  if (mode == "avsr_no_valign") {
    loss.lambda_align = 0.0;
    return {"lambda_align"};
  }
  if (mode == "avsr_context_only") {
    residual_enabled = false;
    loss.lambda_align = 0.0;
    return {"residual_enabled", "lambda_align"};
  }
  if (mode == "avsr_no_residual") {
    residual_enabled = false;
    return {"residual_enabled"};
  }
  throw ConfigError("unknown training mode: " + mode);
}

const std::vector<std::string>& ModelConfig::mode_names() {
  static const std::vector<std::string> names{
      "asr",           "avsr_full",       "avsr_no_upsample", "avsr_no_claf",
      "avsr_no_valign", "avsr_context_only", "avsr_no_residual"};
  return names;
}

HourglassModel::HourglassModel(const ModelConfig& cfg, uint64_t init_seed)
    : cfg_(cfg), ps_(init_seed) {
  cfg_.validate();
  audio_frontend_ = AudioFrontend(ps_, "audio_frontend", cfg_.audio_bins, cfg_.dim);
  audio_encoder_ = AudioEncoder(ps_, "audio_encoder", cfg_.audio_layers, cfg_.dim, cfg_.heads,
                                cfg_.cgmlp_hidden, cfg_.conv_kernel);
  if (cfg_.use_video) {
    visual_frontend_.emplace(ps_, "visual_frontend", cfg_.video_channels, cfg_.visual_blocks,
                             cfg_.video_height, cfg_.video_width, cfg_.dim);
    visual_encoder_.emplace(ps_, "visual_encoder", cfg_.visual_layers, cfg_.dim, cfg_.heads,
                            cfg_.cgmlp_hidden, cfg_.conv_kernel, cfg_.claf_enabled);
    if (cfg_.upsample_enabled) {
      const int64_t feat =
          cfg_.residual_pool_grid * cfg_.residual_pool_grid * cfg_.video_channels;
      upsampler_.emplace(ps_, "upsampler", cfg_.dim, cfg_.heads, cfg_.downsample,
                         cfg_.context_enabled, cfg_.residual_enabled, feat, cfg_.ffn_hidden);
    }
    // With d == 1 the visual sequence already matches the audio length, so
    // the bidirectional fusion applies even without an upsampler.
    const bool full_fusion = cfg_.upsample_enabled || cfg_.downsample == 1;
    fusion_.emplace(ps_, "fusion", "ctc_head", cfg_.dim, cfg_.heads, cfg_.vocab_size,
                    full_fusion ? FusionModule::Mode::kFull : FusionModule::Mode::kAvOnly);
  } else {
    ctc_head_.emplace(ps_, "ctc_head", cfg_.dim, cfg_.vocab_size);
  }
  decoder_ = TransformerDecoder(ps_, "decoder", cfg_.decoder_layers, cfg_.dim, cfg_.heads,
                                cfg_.ffn_hidden, cfg_.vocab_size);
}

HourglassModel::Encoded HourglassModel::encode(const AVBatch& batch) const {
  const int64_t b = batch.batch_size();
  check_shape(static_cast<int64_t>(batch.audio_len.size()) == b,
              "encode: need one audio length per sample");

  Tensor a_feat = audio_frontend_.forward(batch.audio);
  std::vector<int64_t> a_valid(static_cast<size_t>(b));
  for (int64_t i = 0; i < b; ++i)
    a_valid[static_cast<size_t>(i)] =
        AudioFrontend::output_len(batch.audio_len[static_cast<size_t>(i)]);

  Encoded enc;
  if (!cfg_.use_video) {
    enc.n_valid = a_valid;
    Tensor h_in = mask_time(a_feat, enc.n_valid);
    enc.h_a = audio_encoder_.forward(h_in, enc.n_valid);
    enc.fused = enc.h_a;
    enc.ctc_log_probs = ctc_head_->forward(enc.fused);
    return enc;
  }

  check_contract(batch.video.defined(), "encode: video tensor required for audio-visual mode");
  check_shape(static_cast<int64_t>(batch.video_len.size()) == b,
              "encode: need one video length per sample");

  // Equalize the audio rate to the pre-downsampling video grid; residual
  // frame differences beyond either modality's true length are masked out.
  const int64_t n = std::min(a_feat.dim(1), batch.video.dim(1));
  Tensor a_trim = a_feat.dim(1) == n ? a_feat : narrow(a_feat, 1, 0, n);
  Tensor v_trim = batch.video.dim(1) == n ? batch.video : narrow(batch.video, 1, 0, n);
  enc.n_valid.resize(static_cast<size_t>(b));
  for (int64_t i = 0; i < b; ++i)
    enc.n_valid[static_cast<size_t>(i)] =
        std::min({a_valid[static_cast<size_t>(i)], batch.video_len[static_cast<size_t>(i)], n});

  Tensor h_in = mask_time(a_trim, enc.n_valid);
  enc.h_a = audio_encoder_.forward(h_in, enc.n_valid);

  auto ds = video_downsample(v_trim, cfg_.downsample, &enc.n_valid);
  enc.kept_valid.resize(static_cast<size_t>(b));
  for (int64_t i = 0; i < b; ++i)
    enc.kept_valid[static_cast<size_t>(i)] =
        ceil_div(enc.n_valid[static_cast<size_t>(i)], cfg_.downsample);

  Tensor v_feat = mask_time(visual_frontend_->forward(ds.kept), enc.kept_valid);
  auto venc = visual_encoder_->forward(v_feat, enc.kept_valid,
                                       cfg_.claf_enabled ? &enc.h_a : nullptr,
                                       cfg_.claf_enabled ? &enc.n_valid : nullptr);
  enc.h_v = venc.h_v;

  Tensor p;
  if (cfg_.upsample_enabled) {
    Tensor pooled = spatial_pool_grid(ds.retained, cfg_.residual_pool_grid);
    auto ups = upsampler_->forward(enc.h_v, pooled, enc.h_a, n, enc.n_valid);
    p = ups.p;
    enc.stages = std::move(ups.stage_outputs);
  } else {
    p = enc.h_v;
  }

  const auto& v_valid = cfg_.upsample_enabled ? enc.n_valid : enc.kept_valid;
  auto fused = fusion_->forward(enc.h_a, p, enc.n_valid, v_valid);
  enc.fused = fused.fused;
  enc.ctc_log_probs = fused.ctc_log_probs;
  return enc;
}

LossBundle HourglassModel::compute_loss(const AVBatch& batch, ModelDiagnostics* diag) const {
  Encoded enc = encode(batch);
  const int64_t b = batch.batch_size();

  std::vector<int64_t> target_lens(static_cast<size_t>(b));
  std::vector<std::vector<int64_t>> shifted(static_cast<size_t>(b));
  std::vector<TokenSeq> ce_targets(static_cast<size_t>(b));
  std::vector<int64_t> ce_valid(static_cast<size_t>(b));
  int64_t u_max = 0;
  for (int64_t i = 0; i < b; ++i) {
    const auto& toks = batch.tokens[static_cast<size_t>(i)];
    target_lens[static_cast<size_t>(i)] = static_cast<int64_t>(toks.size());
    auto& in_row = shifted[static_cast<size_t>(i)];
    in_row.reserve(toks.size() + 1);
    in_row.push_back(decoder_.begin_id());
    in_row.insert(in_row.end(), toks.begin(), toks.end());
    auto& out_row = ce_targets[static_cast<size_t>(i)];
    out_row = toks;
    out_row.push_back(decoder_.end_id());
    ce_valid[static_cast<size_t>(i)] = static_cast<int64_t>(out_row.size());
    u_max = std::max(u_max, static_cast<int64_t>(in_row.size()));
  }

  Tensor ctc = ctc_loss(enc.ctc_log_probs, batch.tokens, enc.n_valid, target_lens);
  Tensor logits = decoder_.forward_teacher(enc.fused, enc.n_valid, shifted, u_max);
  Tensor ce = ce_loss(logits, ce_targets, ce_valid, cfg_.loss.label_smoothing);

  Tensor va;
  if (!enc.stages.empty()) {
    std::vector<Tensor> alphas;
    std::vector<std::vector<int64_t>> valids;
    for (const auto& st : enc.stages) {
      alphas.push_back(st.alpha);
      valids.push_back(st.valid);
    }
    va = va_align_loss_multi(alphas, cfg_.loss.align_past, cfg_.loss.align_future, valids);
    if (diag) {
      diag->alpha = enc.stages.back().alpha;
      diag->alpha_valid = enc.stages.back().valid;
    }
  } else {
    va = Tensor::scalar(0.0);
  }

  return joint_loss(ce, ctc, va, cfg_.loss.lambda_align, cfg_.loss.lambda_ctc);
}

std::vector<TokenSeq> HourglassModel::recognize(const AVBatch& batch,
                                                ModelDiagnostics* diag) const {
  NoGradGuard no_grad;
  Encoded enc = encode(batch);
  if (diag && !enc.stages.empty()) {
    diag->alpha = enc.stages.back().alpha;
    diag->alpha_valid = enc.stages.back().valid;
  }
  std::vector<TokenSeq> hyps;
  hyps.reserve(static_cast<size_t>(batch.batch_size()));
  for (int64_t i = 0; i < batch.batch_size(); ++i) {
    Tensor mem = narrow(enc.fused, 0, i, 1);
    hyps.push_back(
        decoder_.greedy(mem, enc.n_valid[static_cast<size_t>(i)], cfg_.max_decode_len));
  }
  return hyps;
}

}  // namespace hourglass
