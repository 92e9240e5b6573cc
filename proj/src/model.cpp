#include "dtx/model.hpp"

#include <cmath>
#include <sstream>

#include "dtx/errors.hpp"
#include "dtx/ops.hpp"
#include "dtx/random.hpp"

namespace dtx::model {

void ModelConfig::validate() const {
  if (d_model == 0 || heads == 0 || d_model % heads != 0)
    throw ConfigError("d_model must be a positive multiple of heads");
  if (d_model % 2 != 0) throw ConfigError("d_model must be even for the positional encoding");
  if (sentence_heads == 0 || d_model % sentence_heads != 0)
    throw ConfigError("d_model must be a multiple of sentence_heads");
  if (ffn_dim == 0 || feat_dim == 0 || conv_channels == 0) throw ConfigError("layer widths must be positive");
  if (n_dec == 0 || n_acoustic_enc == 0 || n_phoneme_enc == 0 || n_enc_baseline == 0)
    throw ConfigError("block counts must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
  if (label_smoothing < 0.0 || label_smoothing >= 1.0) throw ConfigError("label_smoothing must be in [0, 1)");
  if (n_candidates == 0 || n_candidates > ctc_beam) throw ConfigError("need 1 <= n_candidates <= ctc_beam");
  if (target_vocab < 4 || phoneme_vocab < 2) throw ConfigError("vocabularies too small");
}

std::string ModelConfig::describe() const {
  std::ostringstream os;
  os << "d_model=" << d_model << "\nheads=" << heads << "\nffn_dim=" << ffn_dim
     << "\nn_enc_baseline=" << n_enc_baseline << "\nn_dec=" << n_dec << "\nn_acoustic_enc=" << n_acoustic_enc
     << "\nn_phoneme_enc=" << n_phoneme_enc << "\nfeat_dim=" << feat_dim << "\nconv_channels=" << conv_channels
     << "\ntarget_vocab=" << target_vocab << "\nphoneme_vocab=" << phoneme_vocab
     << "\nsentence_heads=" << sentence_heads << '\n';
  return os.str();
}

ModelConfig full_size_preset() {
  ModelConfig c;
  c.d_model = 512;
  c.heads = 8;
  c.ffn_dim = 2048;
  return c;
}

namespace {

std::size_t linear_count(std::size_t in, std::size_t out) { return in * out + out; }

std::size_t attention_count(std::size_t d) { return 4 * linear_count(d, d); }

std::size_t encoder_block_count(const ModelConfig& c) {
  return attention_count(c.d_model) + linear_count(c.d_model, c.ffn_dim) + linear_count(c.ffn_dim, c.d_model) +
         4 * c.d_model;
}

std::size_t conv_count(const ModelConfig& c) {
  const std::size_t f = (c.feat_dim - 1) / 2 / 2 + 1;
  return 9 * c.conv_channels + c.conv_channels + 9 * c.conv_channels * c.conv_channels + c.conv_channels +
         linear_count(f * c.conv_channels, c.d_model);
}

}  // namespace

std::size_t decoupled_parameter_count(const ModelConfig& c) {
  const std::size_t d = c.d_model;
  const std::size_t a2p = conv_count(c) + c.n_acoustic_enc * encoder_block_count(c) + 2 * d +
                          linear_count(d, c.phoneme_vocab);
  const std::size_t fusion_block = encoder_block_count(c) + 2 * attention_count(d) + 2 * d + linear_count(2 * d, d);
  const std::size_t p2t = c.phoneme_vocab * d + c.n_phoneme_enc * encoder_block_count(c) + 2 * d +
                          c.target_vocab * d + c.n_dec * fusion_block + 2 * d + linear_count(d, c.target_vocab);
  return a2p + p2t;
}

std::size_t baseline_parameter_count(const ModelConfig& c) {
  const std::size_t d = c.d_model;
  const std::size_t decoder_block = encoder_block_count(c) + attention_count(d) + 2 * d;
  return conv_count(c) + c.n_enc_baseline * encoder_block_count(c) + 2 * d + c.target_vocab * d +
         c.n_dec * decoder_block + 2 * d + linear_count(d, c.target_vocab);
}

double parameter_mismatch(const ModelConfig& cfg) {
  return std::abs(static_cast<double>(decoupled_parameter_count(cfg)) /
                      static_cast<double>(baseline_parameter_count(cfg)) -
                  1.0);
}

std::uint64_t config_digest(const ModelConfig& cfg) {
  const std::string s = cfg.describe();
  return fnv1a(s.data(), s.size());
}

namespace {

std::string idx(const std::string& prefix, std::size_t i) { return prefix + "." + std::to_string(i); }

Tensor make_embedding(ParamStore& store, const std::string& name, std::size_t vocab, std::size_t d,
                      std::mt19937_64& rng) {
  std::vector<double> v(vocab * d);
  const double sigma = 1.0 / std::sqrt(static_cast<double>(d));
  for (double& x : v) x = sigma * standard_normal(rng);
  return store.add(name, {vocab, d}, std::move(v));
}

A2P make_a2p(ParamStore& store, const ModelConfig& cfg, std::mt19937_64& rng) {
  A2P a;
  a.conv = nn::make_conv_frontend(store, "a2p.conv", cfg.feat_dim, cfg.conv_channels, cfg.d_model, rng);
  for (std::size_t i = 0; i < cfg.n_acoustic_enc; ++i)
    a.blocks.push_back(nn::make_encoder_block(store, idx("a2p.enc", i), cfg.d_model, cfg.heads, cfg.ffn_dim, rng));
  a.norm = nn::make_layer_norm(store, "a2p.norm", cfg.d_model);
  a.ctc = nn::make_linear(store, "a2p.ctc", cfg.d_model, cfg.phoneme_vocab, rng);
  return a;
}

FusionBlock make_fusion_block(ParamStore& store, const std::string& name, const ModelConfig& cfg,
                              std::mt19937_64& rng) {
  FusionBlock b;
  b.self_norm = nn::make_layer_norm(store, name + ".self_norm", cfg.d_model);
  b.self_attn = nn::make_attention(store, name + ".self_attn", cfg.d_model, cfg.heads, rng);
  b.cross_norm = nn::make_layer_norm(store, name + ".cross_norm", cfg.d_model);
  b.acoustic_attn = nn::make_attention(store, name + ".acoustic_attn", cfg.d_model, cfg.heads, rng);
  b.phoneme_attn = nn::make_attention(store, name + ".phoneme_attn", cfg.d_model, cfg.heads, rng);
  b.fusion = nn::make_linear(store, name + ".fusion", 2 * cfg.d_model, cfg.d_model, rng);
  b.ffn_norm = nn::make_layer_norm(store, name + ".ffn_norm", cfg.d_model);
  b.ffn = nn::make_feed_forward(store, name + ".ffn", cfg.d_model, cfg.ffn_dim, rng);
  return b;
}

DecoderBlock make_decoder_block(ParamStore& store, const std::string& name, const ModelConfig& cfg,
                                std::mt19937_64& rng) {
  DecoderBlock b;
  b.self_norm = nn::make_layer_norm(store, name + ".self_norm", cfg.d_model);
  b.self_attn = nn::make_attention(store, name + ".self_attn", cfg.d_model, cfg.heads, rng);
  b.cross_norm = nn::make_layer_norm(store, name + ".cross_norm", cfg.d_model);
  b.cross_attn = nn::make_attention(store, name + ".cross_attn", cfg.d_model, cfg.heads, rng);
  b.ffn_norm = nn::make_layer_norm(store, name + ".ffn_norm", cfg.d_model);
  b.ffn = nn::make_feed_forward(store, name + ".ffn", cfg.d_model, cfg.ffn_dim, rng);
  return b;
}

Tensor with_position(const Tensor& x) {
  return add(x, nn::sinusoidal_positional_encoding(x.rows(), x.cols()));
}

}  // namespace

DecoupledModel make_decoupled(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  DecoupledModel m;
  m.config = cfg;
  std::mt19937_64 rng(seed);
  m.a2p = make_a2p(m.params, cfg, rng);
  P2T& p = m.p2t;
  p.phoneme_embedding = make_embedding(m.params, "p2t.phoneme_embedding", cfg.phoneme_vocab, cfg.d_model, rng);
  for (std::size_t i = 0; i < cfg.n_phoneme_enc; ++i)
    p.phoneme_blocks.push_back(
        nn::make_encoder_block(m.params, idx("p2t.phoneme_enc", i), cfg.d_model, cfg.heads, cfg.ffn_dim, rng));
  p.phoneme_norm = nn::make_layer_norm(m.params, "p2t.phoneme_norm", cfg.d_model);
  p.target_embedding = make_embedding(m.params, "p2t.target_embedding", cfg.target_vocab, cfg.d_model, rng);
  for (std::size_t i = 0; i < cfg.n_dec; ++i) p.blocks.push_back(make_fusion_block(m.params, idx("p2t.dec", i), cfg, rng));
  p.norm = nn::make_layer_norm(m.params, "p2t.norm", cfg.d_model);
  p.output = nn::make_linear(m.params, "p2t.output", cfg.d_model, cfg.target_vocab, rng);
  p.sentence_heads = cfg.sentence_heads;
  return m;
}

BaselineModel make_baseline(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  BaselineModel m;
  m.config = cfg;
  std::mt19937_64 rng(seed);
  m.conv = nn::make_conv_frontend(m.params, "baseline.conv", cfg.feat_dim, cfg.conv_channels, cfg.d_model, rng);
  for (std::size_t i = 0; i < cfg.n_enc_baseline; ++i)
    m.encoder.push_back(
        nn::make_encoder_block(m.params, idx("baseline.enc", i), cfg.d_model, cfg.heads, cfg.ffn_dim, rng));
  m.encoder_norm = nn::make_layer_norm(m.params, "baseline.enc_norm", cfg.d_model);
  m.target_embedding = make_embedding(m.params, "baseline.target_embedding", cfg.target_vocab, cfg.d_model, rng);
  for (std::size_t i = 0; i < cfg.n_dec; ++i) m.decoder.push_back(make_decoder_block(m.params, idx("baseline.dec", i), cfg, rng));
  m.norm = nn::make_layer_norm(m.params, "baseline.norm", cfg.d_model);
  m.output = nn::make_linear(m.params, "baseline.output", cfg.d_model, cfg.target_vocab, rng);
  return m;
}

std::vector<int> decoder_input(const std::vector<int>& target) {
  std::vector<int> v{1};
  v.insert(v.end(), target.begin(), target.end());
  return v;
}

std::vector<int> decoder_output(const std::vector<int>& target) {
  std::vector<int> v(target);
  v.push_back(2);
  return v;
}

A2POutput a2p_forward(const Tensor& features, const A2P& a2p, const nn::Mode& mode) {
  Tensor h = with_position(nn::conv_subsample(features, a2p.conv));
  const auto mask = nn::AttentionMask::none(h.rows(), h.rows());
  for (const auto& b : a2p.blocks) h = nn::encoder_block(h, mask, b, mode);
  h = a2p.norm(h);
  return {log_softmax(a2p.ctc(h)), h};
}

Tensor embed_tokens(const std::vector<int>& ids, const Tensor& table) {
  return with_position(scale(embedding(table, ids), std::sqrt(static_cast<double>(table.cols()))));
}

Tensor phoneme_encode(const ctc::PhonemeSeq& candidate, const P2T& p2t, const nn::Mode& mode) {
  if (candidate.empty()) throw InputError("cannot encode an empty phoneme candidate");
  for (int id : candidate)
    if (id <= 0 || static_cast<std::size_t>(id) >= p2t.phoneme_embedding.rows())
      throw InputError("phoneme id " + std::to_string(id) + " outside the phoneme vocabulary");
  Tensor h = embed_tokens(candidate, p2t.phoneme_embedding);
  const auto mask = nn::AttentionMask::none(h.rows(), h.rows());
  for (const auto& b : p2t.phoneme_blocks) h = nn::encoder_block(h, mask, b, mode);
  return p2t.phoneme_norm(h);
}

std::vector<Tensor> phoneme_level_attention(const Tensor& query, const std::vector<Tensor>& candidates,
                                            const nn::MultiHeadAttention& params) {
  if (candidates.empty()) throw ContractError("phoneme-level attention needs at least one candidate");
  std::vector<Tensor> out;
  out.reserve(candidates.size());
  for (const auto& e : candidates)
    out.push_back(nn::multi_head_attention(query, e, e, nn::AttentionMask::none(query.rows(), e.rows()), params));
  return out;
}

SentenceAttention sentence_level_attention(const Tensor& query, const std::vector<Tensor>& contexts,
                                           std::size_t heads) {
  if (contexts.empty()) throw ContractError("sentence-level attention needs at least one context");
  const std::size_t d = query.cols();
  if (heads == 0 || d % heads != 0) throw ConfigError("sentence heads must divide d_model");
  for (const auto& c : contexts)
    if (c.shape() != query.shape())
      throw DimensionError("context " + shape_str(c.shape()) + " does not match query " + shape_str(query.shape()));
  const std::size_t dh = d / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t len = query.rows();

  std::vector<Tensor> outputs, weights;
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor q = heads == 1 ? query : slice_cols(query, h * dh, (h + 1) * dh);
    std::vector<Tensor> cs, scores;
    for (const auto& c : contexts) {
      cs.push_back(heads == 1 ? c : slice_cols(c, h * dh, (h + 1) * dh));
      scores.push_back(reshape(scale(sum_last(mul(q, cs.back())), inv), {len, 1}));
    }
    const Tensor w = softmax(concat_cols(scores));
    Tensor out;
    for (std::size_t n = 0; n < cs.size(); ++n) {
      Tensor term = scale_rows(cs[n], reshape(slice_cols(w, n, n + 1), {len}));
      out = n == 0 ? term : add(out, term);
    }
    outputs.push_back(out);
    weights.push_back(w);
  }
  if (heads == 1) return {outputs[0], weights[0]};
  return {concat_cols(outputs), concat_cols(weights)};
}

namespace {

Tensor dropped(const Tensor& y, const nn::Mode& mode) {
  if (!mode.train || mode.dropout <= 0.0) return y;
  if (!mode.rng) throw ContractError("training-mode dropout needs a generator");
  return dropout(y, mode.dropout, true, *mode.rng);
}

}  // namespace

Tensor fusion_block(const Tensor& x, const Tensor& acoustic, const std::vector<Tensor>& candidates,
                    const FusionBlock& params, std::size_t sentence_heads, Branches branches,
                    const nn::Mode& mode) {
  const auto causal = nn::AttentionMask::causal(x.rows());
  Tensor h = nn::residual_sublayer(
      x, params.self_norm,
      [&](const Tensor& n) { return nn::multi_head_attention(n, n, n, causal, params.self_attn); }, mode);

  const Tensor n = params.cross_norm(h);
  Tensor a, p;
  if (branches == Branches::phoneme_only) {
    a = Tensor::zeros(n.shape());
  } else {
    if (!acoustic.defined()) throw ContractError("acoustic branch enabled without acoustic states");
    a = nn::multi_head_attention(n, acoustic, acoustic, nn::AttentionMask::none(n.rows(), acoustic.rows()),
                                 params.acoustic_attn);
  }
  if (branches == Branches::acoustic_only) {
    p = Tensor::zeros(n.shape());
  } else {
    p = sentence_level_attention(n, phoneme_level_attention(n, candidates, params.phoneme_attn), sentence_heads)
            .output;
  }
  h = add(h, dropped(params.fusion(concat_cols({a, p})), mode));
  return nn::residual_sublayer(
      h, params.ffn_norm, [&](const Tensor& m) { return nn::position_wise_ffn(m, params.ffn); }, mode);
}

Tensor fusion_decoder_forward(const std::vector<int>& input_ids, const Tensor& acoustic,
                              const std::vector<Tensor>& candidates, const P2T& p2t,
                              const nn::Mode& mode, Branches branches) {
  if (input_ids.empty()) throw InputError("empty decoder input");
  if (branches != Branches::acoustic_only && candidates.empty())
    throw ContractError("fusion decoder needs at least one phoneme candidate");
  Tensor h = embed_tokens(input_ids, p2t.target_embedding);
  for (const auto& b : p2t.blocks) h = fusion_block(h, acoustic, candidates, b, p2t.sentence_heads, branches, mode);
  return p2t.output(p2t.norm(h));
}

Tensor baseline_encode(const Tensor& features, const BaselineModel& model, const nn::Mode& mode) {
  Tensor h = with_position(nn::conv_subsample(features, model.conv));
  const auto mask = nn::AttentionMask::none(h.rows(), h.rows());
  for (const auto& b : model.encoder) h = nn::encoder_block(h, mask, b, mode);
  return model.encoder_norm(h);
}

Tensor baseline_decode(const std::vector<int>& input_ids, const Tensor& memory, const BaselineModel& model,
                       const nn::Mode& mode) {
  if (input_ids.empty()) throw InputError("empty decoder input");
  Tensor h = embed_tokens(input_ids, model.target_embedding);
  const auto causal = nn::AttentionMask::causal(h.rows());
  const auto cross = nn::AttentionMask::none(h.rows(), memory.rows());
  for (const auto& b : model.decoder) {
    h = nn::residual_sublayer(
        h, b.self_norm, [&](const Tensor& n) { return nn::multi_head_attention(n, n, n, causal, b.self_attn); },
        mode);
    h = nn::residual_sublayer(
        h, b.cross_norm,
        [&](const Tensor& n) { return nn::multi_head_attention(n, memory, memory, cross, b.cross_attn); }, mode);
    h = nn::residual_sublayer(
        h, b.ffn_norm, [&](const Tensor& n) { return nn::position_wise_ffn(n, b.ffn); }, mode);
  }
  return model.output(model.norm(h));
}

Tensor baseline_forward(const Tensor& features, const std::vector<int>& input_ids,
                        const BaselineModel& model, const nn::Mode& mode) {
  return baseline_decode(input_ids, baseline_encode(features, model, mode), model, mode);
}

}  // namespace dtx::model
