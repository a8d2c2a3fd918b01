#pragma once

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hourglass/tensor.hpp"

namespace hourglass {

// Ordered registry of named trainable tensors. Creation order is the
// canonical order for initialization, optimizer sweeps and checkpoints, so
// two models built from the same config and seed get identical weights.
class ParamStore {
 public:
  explicit ParamStore(uint64_t seed) : rng_(seed) {}

  enum class Init { kZero, kOne, kUniformFan, kNormalScaled };

  // fan_in/fan_out control the kUniformFan range sqrt(6/(fan_in+fan_out)).
  Tensor create(const std::string& name, Shape shape, Init init, double fan_in = 0,
                double fan_out = 0, double scale = 1.0);

  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  std::vector<std::pair<std::string, Tensor>>& items_mutable() { return items_; }
  Tensor* find(const std::string& name);
  int64_t total_size() const;
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::map<std::string, size_t> index_;
  RngStream rng_;
};

// Hierarchical name helper: scope("enc", "layer0") -> "enc.layer0".
inline std::string scoped(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

struct Linear {
  Tensor w;  // [Din,Dout]
  Tensor b;  // [Dout]

  Linear() = default;
  Linear(ParamStore& ps, const std::string& prefix, int64_t d_in, int64_t d_out);
  Tensor forward(const Tensor& x) const { return add_rowvec(matmul(x, w), b); }
  // Zero-filled output projection; used where a residual branch must vanish
  // at initialization.
  static Linear zero_init(ParamStore& ps, const std::string& prefix, int64_t d_in, int64_t d_out);
};

struct LayerNormModule {
  Tensor gamma, beta;

  LayerNormModule() = default;
  LayerNormModule(ParamStore& ps, const std::string& prefix, int64_t dim);
  Tensor forward(const Tensor& x) const { return layer_norm(x, gamma, beta); }
};

struct Conv1dModule {
  Tensor w;  // [Cout,K,Cin]
  Tensor b;
  int64_t stride = 1;
  int64_t pad = 0;

  Conv1dModule() = default;
  Conv1dModule(ParamStore& ps, const std::string& prefix, int64_t c_in, int64_t c_out, int64_t k,
               int64_t stride, int64_t pad);
  Tensor forward(const Tensor& x) const { return conv1d(x, w, b, stride, pad); }
};

struct Conv3dModule {
  Tensor w;  // [Cout,kt,kh,kw,Cin]
  Tensor b;
  int64_t spatial_stride = 1;
  int64_t spatial_pad = 1;

  Conv3dModule() = default;
  Conv3dModule(ParamStore& ps, const std::string& prefix, int64_t c_in, int64_t c_out, int64_t k,
               int64_t spatial_stride, int64_t spatial_pad);
  Tensor forward(const Tensor& x) const { return conv3d(x, w, b, spatial_stride, spatial_pad); }
};

// Two-layer feed-forward with SiLU.
struct FeedForward {
  Linear up, down;

  FeedForward() = default;
  FeedForward(ParamStore& ps, const std::string& prefix, int64_t d_in, int64_t hidden,
              int64_t d_out);
  Tensor forward(const Tensor& x) const { return down.forward(silu(up.forward(x))); }
};

// Multi-head scaled dot-product attention with learned q/k/v/out
// projections. Scores are returned per head, post softmax.
struct MultiHeadAttention {
  Linear wq, wk, wv, wo;
  int64_t heads = 1;
  int64_t dim = 0;

  struct Output {
    Tensor out;     // [B,Tq,D]
    Tensor scores;  // [B,heads,Tq,Tk]
  };

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore& ps, const std::string& prefix, int64_t dim, int64_t heads,
                     bool zero_out_proj = false);
  Output forward(const Tensor& query, const Tensor& key, const Tensor& value,
                 const AttnMask* mask = nullptr) const;
};

// Convolutional gating branch: project up, split, gate one half with a
// depthwise-convolved (and normalized) view of the other, project down.
struct ConvGatingMlp {
  Linear up;    // D -> 2*hidden
  LayerNormModule gate_norm;
  Tensor dw_kernel;  // [hidden,K]
  Linear down;  // hidden -> D

  ConvGatingMlp() = default;
  ConvGatingMlp(ParamStore& ps, const std::string& prefix, int64_t dim, int64_t hidden,
                int64_t kernel);
  Tensor forward(const Tensor& x) const;
};

}  // namespace hourglass
