#pragma once
// Transformer building blocks: attention, feed-forward, positional encoding,
// convolutional subsampling, layer norm and the label-smoothed loss.
//
// Residual sub-blocks use pre-norm placement:
//     y = x + dropout(sublayer(layer_norm(x)))
//
// Weight matrices are stored [in, out] so a linear layer is x * W + b.

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "dtx/params.hpp"
#include "dtx/tensor.hpp"

namespace dtx::nn {

enum class MaskKind { none, causal, padding };

// allowed[q * keys + k] != 0 when query q may attend to key k.
struct AttentionMask {
  MaskKind kind = MaskKind::none;
  std::size_t queries = 0;
  std::size_t keys = 0;
  std::vector<std::uint8_t> allowed;

  static AttentionMask none(std::size_t queries, std::size_t keys);
  static AttentionMask causal(std::size_t length);
  // Keys at index >= valid_keys are padding.
  static AttentionMask padding(std::size_t queries, std::size_t keys, std::size_t valid_keys);

  bool is_allowed(std::size_t q, std::size_t k) const { return allowed[q * keys + k] != 0; }
};

// Training/eval switch plus the seeded generator that drives dropout masks.
struct Mode {
  bool train = false;
  double dropout = 0.0;
  std::mt19937_64* rng = nullptr;

  static Mode eval() { return {}; }
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
  Tensor operator()(const Tensor& x) const;
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;
  Tensor operator()(const Tensor& x) const;
};

struct MultiHeadAttention {
  Linear query, key, value, output;
  std::size_t heads = 1;
};

struct FeedForward {
  Linear first, second;
};

struct EncoderBlock {
  LayerNorm attn_norm;
  MultiHeadAttention attn;
  LayerNorm ffn_norm;
  FeedForward ffn;
};

// Two 3x3 stride-2 convolutions (time and frequency), ReLU after each, then a
// linear projection of the flattened frequency x channel map to d_model.
// Convolution kernels are stored as [9 * in_channels, out_channels] with rows
// ordered (kernel_t, kernel_f, in_channel).
struct ConvFrontend {
  Tensor conv1_weight, conv1_bias;
  Tensor conv2_weight, conv2_bias;
  Linear proj;
  std::size_t channels = 0;
  std::size_t feat_dim = 0;
};

// Parameter registration: names follow module.block-index.tensor-name.
Linear make_linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                   std::mt19937_64& rng);
LayerNorm make_layer_norm(ParamStore& store, const std::string& name, std::size_t dim);
MultiHeadAttention make_attention(ParamStore& store, const std::string& name, std::size_t d_model,
                                  std::size_t heads, std::mt19937_64& rng);
FeedForward make_feed_forward(ParamStore& store, const std::string& name, std::size_t d_model,
                              std::size_t ffn_dim, std::mt19937_64& rng);
EncoderBlock make_encoder_block(ParamStore& store, const std::string& name, std::size_t d_model,
                                std::size_t heads, std::size_t ffn_dim, std::mt19937_64& rng);
ConvFrontend make_conv_frontend(ParamStore& store, const std::string& name, std::size_t feat_dim,
                                std::size_t channels, std::size_t d_model, std::mt19937_64& rng);

struct AttentionResult {
  Tensor context;  // [L, d_v]
  Tensor weights;  // [L, S]
};

// softmax(Q K^T / sqrt(d_k) restricted to allowed keys) V.
AttentionResult scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                             const AttentionMask& mask);

// Learned projections, `heads` parallel attentions over d_model/heads slices,
// concatenation, output projection.
Tensor multi_head_attention(const Tensor& query, const Tensor& key, const Tensor& value,
                            const AttentionMask& mask, const MultiHeadAttention& params);

Tensor position_wise_ffn(const Tensor& x, const FeedForward& params);

// PE[pos, 2i] = sin(pos / 10000^(2i/d)), PE[pos, 2i+1] = cos(same).
Tensor sinusoidal_positional_encoding(std::size_t max_len, std::size_t d_model);

// Zero padding of one frame on each side, so each layer maps n -> ceil(n / 2).
std::size_t conv_output_length(std::size_t frames);
inline constexpr std::size_t kMinConvFrames = 4;

// features [T, feat_dim] -> [conv_output_length(T), d_model]. Requires T >= 4.
Tensor conv_subsample(const Tensor& features, const ConvFrontend& params);

// Mean over non-pad positions of cross-entropy against the smoothed target
// distribution: 1 - eps on the gold id, eps / (V - 1) on every other id.
Tensor label_smoothing_loss(const Tensor& logits, const std::vector<int>& targets, double epsilon,
                            int pad_id);

Tensor residual_sublayer(const Tensor& x, const LayerNorm& norm,
                         const std::function<Tensor(const Tensor&)>& sublayer, const Mode& mode);

Tensor encoder_block(const Tensor& x, const AttentionMask& mask, const EncoderBlock& params,
                     const Mode& mode);

}  // namespace dtx::nn
