#include "hourglass/costmodel.hpp"

#include <cmath>
#include <sstream>

#include <json.hpp>

#include "hourglass/frontends.hpp"

namespace hourglass::cost {

using nlohmann::json;

LayerKind layer_kind_from_string(const std::string& name) {
  if (name == "linear") return LayerKind::kLinear;
  if (name == "conv1d") return LayerKind::kConv1d;
  if (name == "depthwise_conv1d") return LayerKind::kDepthwiseConv1d;
  if (name == "conv3d") return LayerKind::kConv3d;
  if (name == "attention") return LayerKind::kAttention;
  if (name == "layer_norm") return LayerKind::kLayerNorm;
  if (name == "elementwise") return LayerKind::kElementwise;
  throw ConfigError("unknown layer kind: " + name);
}

double module_flops(const LayerDesc& d) {
  const double t = static_cast<double>(d.t);
  switch (d.kind) {
    case LayerKind::kLinear:
      return t * (2.0 * d.d_in * d.d_out + d.d_out);
    case LayerKind::kConv1d:
      return t * d.d_out * (2.0 * d.d_in * d.kernel + 1.0);
    case LayerKind::kDepthwiseConv1d:
      return t * d.d_in * 2.0 * d.kernel;
    case LayerKind::kConv3d:
      return t * d.h * d.w * d.d_out *
             (2.0 * d.d_in * d.kernel * d.kernel * d.kernel + 1.0);
    case LayerKind::kAttention: {
      const double tq = t, tk = static_cast<double>(d.tk);
      const double dim = static_cast<double>(d.d_in);
      const double proj = 2.0 * (tq + 2.0 * tk) * dim * dim + (tq + 2.0 * tk) * dim;
      const double scores = 2.0 * tq * tk * dim;
      const double softmax = 5.0 * d.heads * tq * tk;
      const double weighted = 2.0 * tq * tk * dim;
      const double out = 2.0 * tq * dim * dim + tq * dim;
      return proj + scores + softmax + weighted + out;
    }
    case LayerKind::kLayerNorm:
      return 8.0 * t * d.d_in;
    case LayerKind::kElementwise:
      return static_cast<double>(d.count);
  }
  throw ConfigError("unknown layer kind");
}

namespace {

struct Accumulator {
  std::vector<ModuleCost>& modules;
  std::string current;
  double flops = 0.0;

  void begin(const std::string& name) {
    flush();
    current = name;
  }
  void add(const LayerDesc& d) { flops += module_flops(d); }
  void add_elementwise(int64_t count) {
    LayerDesc d;
    d.kind = LayerKind::kElementwise;
    d.count = count;
    add(d);
  }
  void flush() {
    if (!current.empty()) modules.push_back({current, flops});
    current.clear();
    flops = 0.0;
  }
};

LayerDesc linear(int64_t t, int64_t d_in, int64_t d_out) {
  LayerDesc d;
  d.kind = LayerKind::kLinear;
  d.t = t;
  d.d_in = d_in;
  d.d_out = d_out;
  return d;
}

LayerDesc attention(int64_t tq, int64_t tk, int64_t dim, int64_t heads) {
  LayerDesc d;
  d.kind = LayerKind::kAttention;
  d.t = tq;
  d.tk = tk;
  d.d_in = dim;
  d.heads = heads;
  return d;
}

LayerDesc layer_norm(int64_t t, int64_t dim) {
  LayerDesc d;
  d.kind = LayerKind::kLayerNorm;
  d.t = t;
  d.d_in = dim;
  return d;
}

void add_branchformer_layer(Accumulator& acc, int64_t t, const ModelConfig& c) {
  acc.add(layer_norm(t, c.dim));
  acc.add(attention(t, t, c.dim, c.heads));
  acc.add(layer_norm(t, c.dim));
  acc.add(linear(t, c.dim, 2 * c.cgmlp_hidden));        // gating up-projection
  acc.add_elementwise(4 * t * 2 * c.cgmlp_hidden);      // silu
  acc.add(layer_norm(t, c.cgmlp_hidden));
  {
    LayerDesc d;
    d.kind = LayerKind::kDepthwiseConv1d;
    d.t = t;
    d.d_in = c.cgmlp_hidden;
    d.kernel = c.conv_kernel;
    acc.add(d);
  }
  acc.add_elementwise(t * c.cgmlp_hidden);              // gate product
  acc.add(linear(t, c.cgmlp_hidden, c.dim));
  acc.add(linear(t, 2 * c.dim, c.dim));                 // branch merge
  acc.add_elementwise(t * c.dim);                       // residual add
}

void add_ffn(Accumulator& acc, int64_t t, int64_t d_in, int64_t hidden, int64_t d_out) {
  acc.add(linear(t, d_in, hidden));
  acc.add_elementwise(4 * t * hidden);
  acc.add(linear(t, hidden, d_out));
}

}  // namespace

double CostReport::total() const {
  double sum = 0.0;
  for (const auto& m : modules) sum += m.flops;
  return sum;
}

double CostReport::module_total(const std::string& prefix) const {
  double sum = 0.0;
  for (const auto& m : modules)
    if (m.name.rfind(prefix, 0) == 0) sum += m.flops;
  return sum;
}

CostReport model_cost(const ModelConfig& config, const CostInput& input,
                      const std::string& label) {
  config.validate();
  CostReport report;
  report.label = label;
  report.downsample = config.use_video ? config.downsample : 1;
  report.config_echo = config.canonical_json();
  Accumulator acc{report.modules};

  const int64_t n_audio = AudioFrontend::output_len(input.audio_frames);
  const int64_t n = config.use_video ? std::min(n_audio, input.video_frames) : n_audio;

  // Audio front-end: two stride-2 convolutions and a projection.
  acc.begin("audio_frontend");
  {
    const int64_t t1 = ceil_div(input.audio_frames, 2);
    const int64_t t2 = ceil_div(t1, 2);
    LayerDesc c1;
    c1.kind = LayerKind::kConv1d;
    c1.t = t1;
    c1.d_in = config.audio_bins;
    c1.d_out = config.dim;
    c1.kernel = 3;
    acc.add(c1);
    acc.add_elementwise(4 * t1 * config.dim);
    LayerDesc c2 = c1;
    c2.t = t2;
    c2.d_in = config.dim;
    acc.add(c2);
    acc.add_elementwise(4 * t2 * config.dim);
    acc.add(linear(t2, config.dim, config.dim));
  }

  acc.begin("audio_encoder");
  for (int64_t i = 0; i < config.audio_layers; ++i) add_branchformer_layer(acc, n, config);

  int64_t t_kept = n;
  if (config.use_video) {
    const int64_t d = config.downsample;
    t_kept = ceil_div(n, d);

    acc.begin("visual_frontend");
    {
      int64_t h = config.video_height, w = config.video_width;
      int64_t c_in = config.video_channels;
      for (int64_t c_out : config.visual_blocks) {
        LayerDesc conv1;
        conv1.kind = LayerKind::kConv3d;
        conv1.t = t_kept;
        conv1.h = h;
        conv1.w = w;
        conv1.d_in = c_in;
        conv1.d_out = c_out;
        conv1.kernel = 3;
        acc.add(conv1);
        acc.add(layer_norm(t_kept * h * w, c_out));
        acc.add_elementwise(4 * t_kept * h * w * c_out);
        const int64_t h2 = ceil_div(h, 2), w2 = ceil_div(w, 2);
        LayerDesc conv2 = conv1;
        conv2.h = h2;
        conv2.w = w2;
        conv2.d_in = c_out;
        acc.add(conv2);
        acc.add(layer_norm(t_kept * h2 * w2, c_out));
        LayerDesc shortcut = conv1;
        shortcut.h = h2;
        shortcut.w = w2;
        shortcut.kernel = 1;
        acc.add(shortcut);
        acc.add_elementwise(5 * t_kept * h2 * w2 * c_out);  // add + silu
        h = h2;
        w = w2;
        c_in = c_out;
      }
      acc.add_elementwise(t_kept * h * w * c_in);  // spatial mean
      acc.add(linear(t_kept, c_in, config.dim));
    }

    acc.begin("visual_encoder");
    for (int64_t i = 0; i < config.visual_layers; ++i) {
      add_branchformer_layer(acc, t_kept, config);
      if (config.claf_enabled) {
        acc.add(attention(t_kept, n, config.dim, config.heads));
        acc.add_elementwise(t_kept * config.dim);
      }
    }

    if (config.upsample_enabled) {
      acc.begin("upsampler");
      const int64_t feat =
          config.residual_pool_grid * config.residual_pool_grid * config.video_channels;
      // Pooling the retained frames into the residual feature grid.
      acc.add_elementwise(t_kept * config.downsample * config.video_height * config.video_width *
                          config.video_channels);
      const auto ratios = UpsamplerStack::stage_ratios(config.downsample);
      int64_t t_in = t_kept;
      int64_t upsampled = 1;
      for (int64_t ratio : ratios) {
        upsampled *= ratio;
        const int64_t stride = config.downsample / upsampled;
        const int64_t t_out = t_in * ratio;
        const int64_t tk = ceil_div(n, stride);
        if (config.context_enabled) {
          LayerDesc conv;
          conv.kind = LayerKind::kConv1d;
          conv.t = t_in;
          conv.d_in = config.dim;
          conv.d_out = config.dim;
          conv.kernel = 3;
          acc.add(conv);
          acc.add_elementwise(4 * t_in * config.dim);
          acc.add(linear(t_in, config.dim, (ratio - 1) * config.dim));
        }
        if (config.residual_enabled) {
          acc.add_elementwise((ratio - 1) * t_in * feat);  // frame differences
          add_ffn(acc, (ratio - 1) * t_in, feat, config.ffn_hidden, config.dim);
          acc.add_elementwise((ratio - 1) * t_in * config.dim);  // kept + residual
        }
        const int64_t merged_in =
            (config.context_enabled && config.residual_enabled) ? 2 * config.dim : config.dim;
        acc.add(linear(t_out, merged_in, config.dim));
        acc.add(attention(t_out, tk, config.dim, config.heads));
        acc.add_elementwise(t_out * config.dim);  // residual add
        t_in = t_out;
      }
    }

    acc.begin("fusion");
    const bool full_fusion = config.upsample_enabled || config.downsample == 1;
    const int64_t p_len = full_fusion ? n : t_kept;
    if (full_fusion) {
      acc.add(attention(p_len, n, config.dim, config.heads));  // video queries audio
      acc.add(attention(n, p_len, config.dim, config.heads));  // audio queries video
      acc.add(linear(n, 2 * config.dim, config.dim));
    } else {
      acc.add(attention(n, p_len, config.dim, config.heads));
      acc.add(linear(n, config.dim, config.dim));
    }
  }

  acc.begin("ctc_head");
  acc.add(linear(n, config.dim, config.vocab_size));
  acc.add_elementwise(5 * n * config.vocab_size);  // log-softmax

  acc.begin("decoder");
  {
    const int64_t u = input.target_len;
    acc.add_elementwise(u * config.dim);  // embedding + positions
    for (int64_t i = 0; i < config.decoder_layers; ++i) {
      acc.add(layer_norm(u, config.dim));
      acc.add(attention(u, u, config.dim, config.heads));
      acc.add(layer_norm(u, config.dim));
      acc.add(attention(u, n, config.dim, config.heads));
      acc.add(layer_norm(u, config.dim));
      add_ffn(acc, u, config.dim, config.ffn_hidden, config.dim);
      acc.add_elementwise(3 * u * config.dim);
    }
    acc.add(layer_norm(u, config.dim));
    acc.add(linear(u, config.dim, config.vocab_size + 2));
  }
  acc.flush();
  return report;
}

std::vector<CostReport> cost_table(const ModelConfig& base, const std::vector<int64_t>& d_values,
                                   const CostInput& input) {
  std::vector<CostReport> reports;

  ModelConfig asr = base;
  asr.apply_mode("asr");
  asr.downsample = 1;
  reports.push_back(model_cost(asr, input, "asr"));

  ModelConfig baseline = base;
  baseline.apply_mode("avsr_full");
  baseline.downsample = 1;
  baseline.upsample_enabled = false;
  baseline.context_enabled = false;
  baseline.residual_enabled = false;
  reports.push_back(model_cost(baseline, input, "avsr d=1"));

  for (int64_t d : d_values) {
    if (d <= 1) continue;
    ModelConfig no_up = base;
    no_up.apply_mode("avsr_no_upsample");
    no_up.downsample = d;
    reports.push_back(
        model_cost(no_up, input, "avsr d=" + std::to_string(d) + " no_upsample"));

    ModelConfig ctx = base;
    ctx.apply_mode("avsr_context_only");
    ctx.downsample = d;
    reports.push_back(model_cost(ctx, input, "avsr d=" + std::to_string(d) + " context"));

    ModelConfig full = base;
    full.apply_mode("avsr_full");
    full.downsample = d;
    reports.push_back(model_cost(full, input, "avsr d=" + std::to_string(d) + " full"));
  }
  return reports;
}

std::string render_table(const std::vector<CostReport>& reports) {
  double baseline = 0.0;
  for (const auto& r : reports)
    if (r.label == "avsr d=1") baseline = r.total();

  std::ostringstream os;
  os << "flop accounting, 1 MAC = 2 flops; reference input per report\n";
  os << std::left;
  os.setf(std::ios::fixed);
  os.precision(4);
  os << "label                        total_gflops   vs_avsr_d1\n";
  for (const auto& r : reports) {
    const double total = r.total();
    os.width(28);
    os << r.label;
    os.width(15);
    os << total / 1e9;
    if (baseline > 0.0) {
      os.precision(1);
      os << (total / baseline * 100.0) << "%";
      os.precision(4);
      if (baseline > total) {
        os.precision(1);
        os << "  (-" << (100.0 * (baseline - total) / baseline) << "%)";
        os.precision(4);
      }
    }
    os << "\n";
  }
  return os.str();
}

std::string table_json(const std::vector<CostReport>& reports, const CostInput& input) {
  json j;
  j["convention"] = "1 MAC = 2 flops";
  j["reference_input"] = {{"audio_frames", input.audio_frames},
                          {"video_frames", input.video_frames},
                          {"target_len", input.target_len}};
  double baseline = 0.0;
  for (const auto& r : reports)
    if (r.label == "avsr d=1") baseline = r.total();
  json rows = json::array();
  for (const auto& r : reports) {
    json row;
    row["label"] = r.label;
    row["downsample"] = r.downsample;
    row["total_flops"] = r.total();
    if (baseline > 0.0) row["relative_to_avsr_d1"] = r.total() / baseline;
    json modules = json::array();
    for (const auto& m : r.modules) modules.push_back({{"name", m.name}, {"flops", m.flops}});
    row["modules"] = modules;
    row["config"] = json::parse(r.config_echo);
    rows.push_back(std::move(row));
  }
  j["reports"] = std::move(rows);
  return j.dump(2);
}

}  // namespace hourglass::cost
