#pragma once

#include <optional>
#include <vector>

#include "hourglass/frontends.hpp"
#include "hourglass/nn.hpp"

namespace hourglass {

// Two parallel branches over a shared residual stream: self-attention and
// convolutional gating, merged by a learned projection of their
// concatenation. Layer norm is applied per branch input.
struct BranchformerBlock {
  LayerNormModule ln_attn, ln_mlp;
  MultiHeadAttention attn;
  ConvGatingMlp mlp;
  Linear merge;  // [2D -> D]

  BranchformerBlock() = default;
  BranchformerBlock(ParamStore& ps, const std::string& prefix, int64_t dim, int64_t heads,
                    int64_t mlp_hidden, int64_t conv_kernel);
  // valid masks both the attention keys and the gating convolution input,
  // so padded frames cannot leak into valid positions.
  Tensor forward(const Tensor& x, const std::vector<int64_t>& valid) const;
};

struct AudioEncoder {
  std::vector<BranchformerBlock> layers;

  AudioEncoder() = default;
  AudioEncoder(ParamStore& ps, const std::string& prefix, int64_t num_layers, int64_t dim,
               int64_t heads, int64_t mlp_hidden, int64_t conv_kernel);
  Tensor forward(const Tensor& x, const std::vector<int64_t>& valid) const;
};

// Visual Branchformer stack with an optional audio cross-attention added
// after every layer (query = visual stream, key/value = audio encoder
// output), residual form.
struct VisualEncoder {
  std::vector<BranchformerBlock> layers;
  std::vector<MultiHeadAttention> cross;  // one per layer when enabled
  bool cross_enabled = false;

  VisualEncoder() = default;
  VisualEncoder(ParamStore& ps, const std::string& prefix, int64_t num_layers, int64_t dim,
                int64_t heads, int64_t mlp_hidden, int64_t conv_kernel, bool cross_enabled);

  struct Output {
    Tensor h_v;
    // Post-softmax cross-attention scores of the last layer, [B,H,T',n];
    // undefined when the cross path is disabled.
    Tensor last_scores;
  };

  // audio must be provided iff the cross path is enabled.
  Output forward(const Tensor& v, const std::vector<int64_t>& v_valid, const Tensor* audio,
                 const std::vector<int64_t>* a_valid) const;
};

}  // namespace hourglass
