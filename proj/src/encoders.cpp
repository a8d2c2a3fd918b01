#include "hourglass/encoders.hpp"

namespace hourglass {

BranchformerBlock::BranchformerBlock(ParamStore& ps, const std::string& prefix, int64_t dim,
                                     int64_t heads, int64_t mlp_hidden, int64_t conv_kernel)
    : ln_attn(ps, scoped(prefix, "ln_attn"), dim),
      ln_mlp(ps, scoped(prefix, "ln_mlp"), dim),
      attn(ps, scoped(prefix, "attn"), dim, heads),
      mlp(ps, scoped(prefix, "mlp"), dim, mlp_hidden, conv_kernel),
      merge(ps, scoped(prefix, "merge"), 2 * dim, dim) {}

Tensor BranchformerBlock::forward(const Tensor& x, const std::vector<int64_t>& valid) const {
  const int64_t t = x.dim(1);
  AttnMask mask = AttnMask::key_padding(valid, t, t);
  Tensor normed = ln_attn.forward(x);
  Tensor attn_out = attn.forward(normed, normed, normed, &mask).out;
  Tensor gate_out = mlp.forward(mask_time(ln_mlp.forward(x), valid));
  return add(x, merge.forward(concat(attn_out, gate_out, -1)));
}

AudioEncoder::AudioEncoder(ParamStore& ps, const std::string& prefix, int64_t num_layers,
                           int64_t dim, int64_t heads, int64_t mlp_hidden, int64_t conv_kernel) {
  layers.reserve(static_cast<size_t>(num_layers));
  for (int64_t i = 0; i < num_layers; ++i)
    layers.emplace_back(ps, scoped(prefix, "layer" + std::to_string(i)), dim, heads, mlp_hidden,
                        conv_kernel);
}

Tensor AudioEncoder::forward(const Tensor& x, const std::vector<int64_t>& valid) const {
  Tensor h = x;
  for (const auto& layer : layers) h = layer.forward(h, valid);
  return h;
}

VisualEncoder::VisualEncoder(ParamStore& ps, const std::string& prefix, int64_t num_layers,
                             int64_t dim, int64_t heads, int64_t mlp_hidden, int64_t conv_kernel,
                             bool cross_enabled)
    : cross_enabled(cross_enabled) {
  layers.reserve(static_cast<size_t>(num_layers));
  for (int64_t i = 0; i < num_layers; ++i) {
    const std::string lp = scoped(prefix, "layer" + std::to_string(i));
    layers.emplace_back(ps, lp, dim, heads, mlp_hidden, conv_kernel);
    if (cross_enabled) cross.emplace_back(ps, scoped(lp, "cross"), dim, heads);
  }
}

VisualEncoder::Output VisualEncoder::forward(const Tensor& v, const std::vector<int64_t>& v_valid,
                                             const Tensor* audio,
                                             const std::vector<int64_t>* a_valid) const {
  check_contract(!cross_enabled || (audio != nullptr && a_valid != nullptr),
                 "visual encoder: cross path enabled but no audio sequence provided");
  Output out;
  Tensor h = v;
  for (size_t i = 0; i < layers.size(); ++i) {
    h = layers[i].forward(h, v_valid);
    if (cross_enabled) {
      AttnMask mask = AttnMask::key_padding(*a_valid, h.dim(1), audio->dim(1));
      auto ca = cross[i].forward(h, *audio, *audio, &mask);
      h = add(h, ca.out);
      out.last_scores = ca.scores;
    }
  }
  out.h_v = h;
  return out;
}

}  // namespace hourglass
