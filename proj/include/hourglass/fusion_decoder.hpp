#pragma once

#include <optional>
#include <vector>

#include "hourglass/nn.hpp"

namespace hourglass {

// Bidirectional cross-attention fusion of the audio sequence and the
// (upsampled) visual sequence, with a CTC projection on the fused result.
// In full mode both sequences must have equal length; av_only keeps the
// audio query and accepts a shorter visual sequence.
struct FusionModule {
  enum class Mode { kFull, kAvOnly };

  Mode mode = Mode::kFull;
  MultiHeadAttention va_attn;  // query = video
  MultiHeadAttention av_attn;  // query = audio
  Linear out_proj;             // 2D->D in full mode, D->D in av_only
  Linear ctc_head;             // D->V

  struct Output {
    Tensor fused;          // [B,n,D]
    Tensor ctc_log_probs;  // [B,n,V]
  };

  FusionModule() = default;
  FusionModule(ParamStore& ps, const std::string& prefix, const std::string& ctc_prefix,
               int64_t dim, int64_t heads, int64_t vocab, Mode mode);

  Output forward(const Tensor& h_a, const Tensor& p, const std::vector<int64_t>& a_valid,
                 const std::vector<int64_t>& v_valid) const;
};

// CTC log-probabilities straight from an audio-only stream (no fusion).
struct CtcHead {
  Linear proj;

  CtcHead() = default;
  CtcHead(ParamStore& ps, const std::string& prefix, int64_t dim, int64_t vocab);
  Tensor forward(const Tensor& h) const { return log_softmax_last(proj.forward(h)); }
};

// Autoregressive Transformer decoder. Token space extends the CTC vocab
// with begin/end symbols: ids [0,V) are corpus tokens (0 = blank, unused in
// targets), V = begin, V+1 = end.
struct TransformerDecoder {
  struct Layer {
    LayerNormModule ln_self, ln_cross, ln_ffn;
    MultiHeadAttention self_attn, cross_attn;
    FeedForward ffn;
  };

  int64_t vocab = 0;  // corpus vocab (CTC side)
  int64_t dim = 0;
  Tensor embed;  // [vocab+2, D]
  std::vector<Layer> layers;
  LayerNormModule final_ln;
  Linear out_proj;  // D -> vocab+2

  int64_t begin_id() const { return vocab; }
  int64_t end_id() const { return vocab + 1; }

  TransformerDecoder() = default;
  TransformerDecoder(ParamStore& ps, const std::string& prefix, int64_t num_layers, int64_t dim,
                     int64_t heads, int64_t ffn_hidden, int64_t vocab);

  // Teacher-forced pass: inputs are begin-shifted token rows [B,U] (ids in
  // decoder space), memory is the fused sequence. Causal self-attention.
  Tensor forward_teacher(const Tensor& memory, const std::vector<int64_t>& memory_valid,
                         const std::vector<std::vector<int64_t>>& shifted_inputs,
                         int64_t u_max) const;

  // Greedy decode for one utterance (memory [1,n,D]); stops at the end
  // symbol or max_len. Returns corpus-space token ids.
  std::vector<int64_t> greedy(const Tensor& memory, int64_t memory_valid, int64_t max_len) const;
};

}  // namespace hourglass
