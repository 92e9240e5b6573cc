#include "dtx/nn.hpp"

#include <cmath>

#include "dtx/ops.hpp"
#include "dtx/random.hpp"

namespace dtx::nn {

AttentionMask AttentionMask::none(std::size_t queries, std::size_t keys) {
  return {MaskKind::none, queries, keys, std::vector<std::uint8_t>(queries * keys, 1)};
}

AttentionMask AttentionMask::causal(std::size_t length) {
  AttentionMask m{MaskKind::causal, length, length, std::vector<std::uint8_t>(length * length, 0)};
  for (std::size_t i = 0; i < length; ++i)
    for (std::size_t j = 0; j <= i; ++j) m.allowed[i * length + j] = 1;
  return m;
}

AttentionMask AttentionMask::padding(std::size_t queries, std::size_t keys, std::size_t valid_keys) {
  if (valid_keys == 0 || valid_keys > keys)
    throw ContractError("padding mask needs 1 <= valid_keys <= keys");
  AttentionMask m{MaskKind::padding, queries, keys, std::vector<std::uint8_t>(queries * keys, 0)};
  for (std::size_t i = 0; i < queries; ++i)
    for (std::size_t j = 0; j < valid_keys; ++j) m.allowed[i * keys + j] = 1;
  return m;
}

Tensor Linear::operator()(const Tensor& x) const { return add_bias(matmul(x, weight), bias); }

Tensor LayerNorm::operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }

Linear make_linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                   std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  std::vector<double> w(in * out);
  for (double& v : w) v = (2.0 * uniform01(rng) - 1.0) * limit;
  Linear l;
  l.weight = store.add(name + ".weight", {in, out}, std::move(w));
  l.bias = store.add(name + ".bias", {out}, std::vector<double>(out, 0.0));
  return l;
}

LayerNorm make_layer_norm(ParamStore& store, const std::string& name, std::size_t dim) {
  return {store.add(name + ".gain", {dim}, std::vector<double>(dim, 1.0)),
          store.add(name + ".bias", {dim}, std::vector<double>(dim, 0.0))};
}

MultiHeadAttention make_attention(ParamStore& store, const std::string& name, std::size_t d_model,
                                  std::size_t heads, std::mt19937_64& rng) {
  if (heads == 0 || d_model % heads != 0)
    throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  MultiHeadAttention a;
  a.query = make_linear(store, name + ".query", d_model, d_model, rng);
  a.key = make_linear(store, name + ".key", d_model, d_model, rng);
  a.value = make_linear(store, name + ".value", d_model, d_model, rng);
  a.output = make_linear(store, name + ".output", d_model, d_model, rng);
  a.heads = heads;
  return a;
}

FeedForward make_feed_forward(ParamStore& store, const std::string& name, std::size_t d_model,
                              std::size_t ffn_dim, std::mt19937_64& rng) {
  return {make_linear(store, name + ".first", d_model, ffn_dim, rng),
          make_linear(store, name + ".second", ffn_dim, d_model, rng)};
}

EncoderBlock make_encoder_block(ParamStore& store, const std::string& name, std::size_t d_model,
                                std::size_t heads, std::size_t ffn_dim, std::mt19937_64& rng) {
  EncoderBlock b;
  b.attn_norm = make_layer_norm(store, name + ".attn_norm", d_model);
  b.attn = make_attention(store, name + ".self_attn", d_model, heads, rng);
  b.ffn_norm = make_layer_norm(store, name + ".ffn_norm", d_model);
  b.ffn = make_feed_forward(store, name + ".ffn", d_model, ffn_dim, rng);
  return b;
}

ConvFrontend make_conv_frontend(ParamStore& store, const std::string& name, std::size_t feat_dim,
                                std::size_t channels, std::size_t d_model, std::mt19937_64& rng) {
  auto conv_weight = [&](const std::string& n, std::size_t in_ch) {
    const std::size_t fan_in = 9 * in_ch;
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + channels));
    std::vector<double> w(fan_in * channels);
    for (double& v : w) v = (2.0 * uniform01(rng) - 1.0) * limit;
    return store.add(n, {fan_in, channels}, std::move(w));
  };
  ConvFrontend c;
  c.channels = channels;
  c.feat_dim = feat_dim;
  c.conv1_weight = conv_weight(name + ".conv1.weight", 1);
  c.conv1_bias = store.add(name + ".conv1.bias", {channels}, std::vector<double>(channels, 0.0));
  c.conv2_weight = conv_weight(name + ".conv2.weight", channels);
  c.conv2_bias = store.add(name + ".conv2.bias", {channels}, std::vector<double>(channels, 0.0));
  const std::size_t f2 = conv_output_length(conv_output_length(feat_dim));
  c.proj = make_linear(store, name + ".proj", f2 * channels, d_model, rng);
  return c;
}

AttentionResult scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                             const AttentionMask& mask) {
  if (q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2)
    throw DimensionError("attention inputs must be matrices");
  if (q.dim(1) != k.dim(1))
    throw DimensionError("attention: query width " + shape_str(q.shape()) + " vs key width " +
                         shape_str(k.shape()));
  if (k.dim(0) != v.dim(0))
    throw DimensionError("attention: " + std::to_string(k.dim(0)) + " keys but " +
                         std::to_string(v.dim(0)) + " values");
  if (mask.queries != q.dim(0) || mask.keys != k.dim(0))
    throw DimensionError("attention: mask " + std::to_string(mask.queries) + "x" +
                         std::to_string(mask.keys) + " for " + std::to_string(q.dim(0)) +
                         " queries and " + std::to_string(k.dim(0)) + " keys");
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
  Tensor scores = scale(matmul_nt(q, k), inv_scale);
  Tensor weights = mask.kind == MaskKind::none ? softmax(scores) : masked_softmax(scores, mask.allowed);
  return {matmul(weights, v), weights};
}

Tensor multi_head_attention(const Tensor& query, const Tensor& key, const Tensor& value,
                            const AttentionMask& mask, const MultiHeadAttention& params) {
  const Tensor q = params.query(query);
  const Tensor k = params.key(key);
  const Tensor v = params.value(value);
  const std::size_t d = q.dim(1);
  if (params.heads == 1)
    return params.output(scaled_dot_product_attention(q, k, v, mask).context);
  const std::size_t dh = d / params.heads;
  std::vector<Tensor> heads;
  heads.reserve(params.heads);
  for (std::size_t h = 0; h < params.heads; ++h) {
    const std::size_t b = h * dh, e = b + dh;
    heads.push_back(scaled_dot_product_attention(slice_cols(q, b, e), slice_cols(k, b, e),
                                                 slice_cols(v, b, e), mask)
                        .context);
  }
  return params.output(concat_cols(heads));
}

Tensor position_wise_ffn(const Tensor& x, const FeedForward& params) {
  return params.second(relu(params.first(x)));
}

Tensor sinusoidal_positional_encoding(std::size_t max_len, std::size_t d_model) {
  if (d_model == 0 || d_model % 2 != 0)
    throw ConfigError("positional encoding needs an even d_model, got " + std::to_string(d_model));
  std::vector<double> pe(max_len * d_model);
  for (std::size_t pos = 0; pos < max_len; ++pos) {
    for (std::size_t i = 0; i < d_model / 2; ++i) {
      const double angle = static_cast<double>(pos) /
                           std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d_model));
      pe[pos * d_model + 2 * i] = std::sin(angle);
      pe[pos * d_model + 2 * i + 1] = std::cos(angle);
    }
  }
  return Tensor::from({max_len, d_model}, std::move(pe));
}

std::size_t conv_output_length(std::size_t frames) {
  // (n + 2*pad - kernel) / stride + 1 with pad 1, kernel 3, stride 2.
  return (frames + 2 - 3) / 2 + 1;
}

namespace {

// im2col for a channels-last [rows, cols, channels] map, 3x3 kernel, stride 2,
// zero padding 1. Returns flat source indices, -1 for padding.
std::vector<std::int64_t> patch_index(std::size_t rows, std::size_t cols, std::size_t channels) {
  const std::size_t out_r = conv_output_length(rows), out_c = conv_output_length(cols);
  std::vector<std::int64_t> idx;
  idx.reserve(out_r * out_c * 9 * channels);
  for (std::size_t r = 0; r < out_r; ++r)
    for (std::size_t c = 0; c < out_c; ++c)
      for (int kr = 0; kr < 3; ++kr)
        for (int kc = 0; kc < 3; ++kc) {
          const auto sr = static_cast<std::int64_t>(2 * r) + kr - 1;
          const auto sc = static_cast<std::int64_t>(2 * c) + kc - 1;
          const bool inside = sr >= 0 && sc >= 0 && sr < static_cast<std::int64_t>(rows) &&
                              sc < static_cast<std::int64_t>(cols);
          for (std::size_t ch = 0; ch < channels; ++ch)
            idx.push_back(inside ? (sr * static_cast<std::int64_t>(cols) + sc) *
                                           static_cast<std::int64_t>(channels) +
                                       static_cast<std::int64_t>(ch)
                                 : -1);
        }
  return idx;
}

Tensor conv_layer(const Tensor& input, std::size_t rows, std::size_t cols, std::size_t in_ch,
                  const Tensor& weight, const Tensor& bias) {
  const auto idx = patch_index(rows, cols, in_ch);
  const std::size_t positions = conv_output_length(rows) * conv_output_length(cols);
  Tensor patches = reshape(gather(input, idx, 0.0), {positions, 9 * in_ch});
  return relu(add_bias(matmul(patches, weight), bias));
}

}  // namespace

Tensor conv_subsample(const Tensor& features, const ConvFrontend& params) {
  if (features.ndim() != 2 || features.dim(1) != params.feat_dim)
    throw InputError("conv_subsample: expected [T, " + std::to_string(params.feat_dim) +
                     "] features, got " + shape_str(features.shape()));
  const std::size_t t = features.dim(0);
  if (t < kMinConvFrames)
    throw InputError("conv_subsample: " + std::to_string(t) +
                     " frames is too short for two stride-2 layers (need >= 4)");
  const std::size_t t1 = conv_output_length(t), f1 = conv_output_length(params.feat_dim);
  const std::size_t t2 = conv_output_length(t1), f2 = conv_output_length(f1);
  Tensor h1 = conv_layer(features, t, params.feat_dim, 1, params.conv1_weight, params.conv1_bias);
  Tensor h2 = conv_layer(h1, t1, f1, params.channels, params.conv2_weight, params.conv2_bias);
  return params.proj(reshape(h2, {t2, f2 * params.channels}));
}

Tensor label_smoothing_loss(const Tensor& logits, const std::vector<int>& targets, double epsilon,
                            int pad_id) {
  if (!(epsilon >= 0.0 && epsilon < 1.0))
    throw ContractError("label smoothing epsilon must lie in [0, 1)");
  if (logits.ndim() != 2 || logits.dim(0) != targets.size())
    throw DimensionError("label_smoothing_loss: logits " + shape_str(logits.shape()) + " for " +
                         std::to_string(targets.size()) + " targets");
  const std::size_t len = logits.dim(0), vocab = logits.dim(1);
  if (vocab < 2) throw DimensionError("label_smoothing_loss: vocabulary must have >= 2 entries");
  const double off = epsilon / static_cast<double>(vocab - 1);
  std::vector<double> dist(len * vocab, 0.0);
  std::size_t counted = 0;
  for (std::size_t i = 0; i < len; ++i) {
    if (targets[i] == pad_id) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= vocab)
      throw InputError("label_smoothing_loss: target id " + std::to_string(targets[i]) +
                       " outside vocabulary");
    ++counted;
    for (std::size_t v = 0; v < vocab; ++v) dist[i * vocab + v] = off;
    dist[i * vocab + static_cast<std::size_t>(targets[i])] = 1.0 - epsilon;
  }
  if (counted == 0) throw ContractError("label_smoothing_loss: every target position is padding");
  Tensor q = Tensor::from({len, vocab}, std::move(dist));
  return scale(sum(mul(log_softmax(logits), q)), -1.0 / static_cast<double>(counted));
}

Tensor residual_sublayer(const Tensor& x, const LayerNorm& norm,
                         const std::function<Tensor(const Tensor&)>& sublayer, const Mode& mode) {
  Tensor y = sublayer(norm(x));
  if (mode.train && mode.dropout > 0.0) {
    if (!mode.rng) throw ContractError("training-mode dropout needs a generator");
    y = dropout(y, mode.dropout, true, *mode.rng);
  }
  return add(x, y);
}

Tensor encoder_block(const Tensor& x, const AttentionMask& mask, const EncoderBlock& params,
                     const Mode& mode) {
  Tensor h = residual_sublayer(
      x, params.attn_norm,
      [&](const Tensor& n) { return multi_head_attention(n, n, n, mask, params.attn); }, mode);
  return residual_sublayer(
      h, params.ffn_norm, [&](const Tensor& n) { return position_wise_ffn(n, params.ffn); }, mode);
}

}  // namespace dtx::nn
