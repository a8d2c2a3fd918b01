#include "hourglass/fusion_decoder.hpp"

#include <cmath>

namespace hourglass {

FusionModule::FusionModule(ParamStore& ps, const std::string& prefix,
                           const std::string& ctc_prefix, int64_t dim, int64_t heads,
                           int64_t vocab, Mode mode)
    : mode(mode) {
  av_attn = MultiHeadAttention(ps, scoped(prefix, "av"), dim, heads);
  if (mode == Mode::kFull) {
    va_attn = MultiHeadAttention(ps, scoped(prefix, "va"), dim, heads);
    out_proj = Linear(ps, scoped(prefix, "out"), 2 * dim, dim);
  } else {
    out_proj = Linear(ps, scoped(prefix, "out"), dim, dim);
  }
  ctc_head = Linear(ps, ctc_prefix, dim, vocab);
}

FusionModule::Output FusionModule::forward(const Tensor& h_a, const Tensor& p,
                                           const std::vector<int64_t>& a_valid,
                                           const std::vector<int64_t>& v_valid) const {
  check_shape(h_a.rank() == 3 && p.rank() == 3, "fusion: inputs must be [B,T,D]");
  const int64_t n = h_a.dim(1);
  Tensor fused;
  if (mode == Mode::kFull) {
    check_contract(p.dim(1) == n, "fusion: full mode needs equal lengths, audio ", n, " vs video ",
                   p.dim(1));
    AttnMask va_mask = AttnMask::key_padding(a_valid, p.dim(1), n);
    AttnMask av_mask = AttnMask::key_padding(v_valid, n, p.dim(1));
    Tensor va = va_attn.forward(p, h_a, h_a, &va_mask).out;  // video queries audio
    Tensor av = av_attn.forward(h_a, p, p, &av_mask).out;    // audio queries video
    fused = out_proj.forward(concat(av, va, -1));
  } else {
    AttnMask av_mask = AttnMask::key_padding(v_valid, n, p.dim(1));
    Tensor av = av_attn.forward(h_a, p, p, &av_mask).out;
    fused = out_proj.forward(av);
  }
  Output out;
  out.fused = fused;
  out.ctc_log_probs = log_softmax_last(ctc_head.forward(fused));
  return out;
}

CtcHead::CtcHead(ParamStore& ps, const std::string& prefix, int64_t dim, int64_t vocab)
    : proj(ps, prefix, dim, vocab) {}

TransformerDecoder::TransformerDecoder(ParamStore& ps, const std::string& prefix,
                                       int64_t num_layers, int64_t dim, int64_t heads,
                                       int64_t ffn_hidden, int64_t vocab)
    : vocab(vocab), dim(dim) {
  embed = ps.create(scoped(prefix, "embed"), {vocab + 2, dim}, ParamStore::Init::kNormalScaled,
                    0, 0, 1.0 / std::sqrt(static_cast<double>(dim)));
  layers.reserve(static_cast<size_t>(num_layers));
  for (int64_t i = 0; i < num_layers; ++i) {
    const std::string lp = scoped(prefix, "layer" + std::to_string(i));
    Layer layer;
    layer.ln_self = LayerNormModule(ps, scoped(lp, "ln_self"), dim);
    layer.ln_cross = LayerNormModule(ps, scoped(lp, "ln_cross"), dim);
    layer.ln_ffn = LayerNormModule(ps, scoped(lp, "ln_ffn"), dim);
    layer.self_attn = MultiHeadAttention(ps, scoped(lp, "self"), dim, heads);
    layer.cross_attn = MultiHeadAttention(ps, scoped(lp, "cross"), dim, heads);
    layer.ffn = FeedForward(ps, scoped(lp, "ffn"), dim, ffn_hidden, dim);
    layers.push_back(std::move(layer));
  }
  final_ln = LayerNormModule(ps, scoped(prefix, "final_ln"), dim);
  out_proj = Linear(ps, scoped(prefix, "out"), dim, vocab + 2);
}

namespace {

// Sinusoidal position rows, added to the token embeddings.
Tensor position_encoding(int64_t t, int64_t dim) {
  std::vector<double> pe(static_cast<size_t>(t * dim));
  for (int64_t i = 0; i < t; ++i)
    for (int64_t c = 0; c < dim; ++c) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (c / 2)) / static_cast<double>(dim));
      pe[static_cast<size_t>(i * dim + c)] =
          (c % 2 == 0) ? std::sin(i * rate) : std::cos(i * rate);
    }
  return Tensor::from_values({1, t, dim}, std::move(pe));
}

Tensor add_positions(const Tensor& x) {
  Tensor pe = position_encoding(x.dim(1), x.dim(2));
  // Broadcast over the batch by explicit repetition.
  std::vector<double> out(static_cast<size_t>(x.size()));
  const double* xp = x.values().data();
  const double* pp = pe.values().data();
  const int64_t batch = x.dim(0), cell = x.dim(1) * x.dim(2);
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t i = 0; i < cell; ++i)
      out[static_cast<size_t>(b * cell + i)] = xp[b * cell + i] + pp[i];
  auto xn = x.node();
  return make_op(x.shape(), std::move(out), {x}, [xn](detail::Node& self) {
    if (double* gx = detail::grad_buf(xn))
      for (size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  });
}

}  // namespace

Tensor TransformerDecoder::forward_teacher(const Tensor& memory,
                                           const std::vector<int64_t>& memory_valid,
                                           const std::vector<std::vector<int64_t>>& shifted_inputs,
                                           int64_t u_max) const {
  const int64_t batch = memory.dim(0);
  check_shape(static_cast<int64_t>(shifted_inputs.size()) == batch,
              "decoder: one input row per sample");
  std::vector<int64_t> flat(static_cast<size_t>(batch * u_max), end_id());
  std::vector<int64_t> tgt_valid(static_cast<size_t>(batch));
  for (int64_t b = 0; b < batch; ++b) {
    const auto& row = shifted_inputs[static_cast<size_t>(b)];
    check_shape(static_cast<int64_t>(row.size()) <= u_max, "decoder: input row ", b,
                " longer than u_max");
    tgt_valid[static_cast<size_t>(b)] = static_cast<int64_t>(row.size());
    for (size_t i = 0; i < row.size(); ++i) flat[static_cast<size_t>(b * u_max) + i] = row[i];
  }

  Tensor x = add_positions(embedding(embed, flat, {batch, u_max}));
  AttnMask self_mask = AttnMask::causal(u_max).and_with(AttnMask::key_padding(tgt_valid, u_max, u_max));
  AttnMask cross_mask = AttnMask::key_padding(memory_valid, u_max, memory.dim(1));
  for (const auto& layer : layers) {
    Tensor normed = layer.ln_self.forward(x);
    x = add(x, layer.self_attn.forward(normed, normed, normed, &self_mask).out);
    x = add(x, layer.cross_attn.forward(layer.ln_cross.forward(x), memory, memory, &cross_mask).out);
    x = add(x, layer.ffn.forward(layer.ln_ffn.forward(x)));
  }
  return out_proj.forward(final_ln.forward(x));
}

std::vector<int64_t> TransformerDecoder::greedy(const Tensor& memory, int64_t memory_valid,
                                                int64_t max_len) const {
  check_shape(memory.rank() == 3 && memory.dim(0) == 1, "greedy: memory must be [1,n,D]");
  NoGradGuard no_grad;
  std::vector<int64_t> hyp;
  if (max_len <= 0) return hyp;
  std::vector<int64_t> prefix{begin_id()};
  for (int64_t step = 0; step < max_len; ++step) {
    const int64_t u = static_cast<int64_t>(prefix.size());
    Tensor logits = forward_teacher(memory, {memory_valid}, {prefix}, u);
    auto row = logits.values().subspan(static_cast<size_t>((u - 1) * (vocab + 2)),
                                       static_cast<size_t>(vocab + 2));
    const int64_t next = argmax_span(row);
    if (next == end_id()) break;
    hyp.push_back(next);
    prefix.push_back(next);
  }
  return hyp;
}

}  // namespace hourglass
