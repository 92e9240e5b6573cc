#pragma once
// Baseline speech transformer and the decoupled A2P / P2T model.
//
// Decoupled model:
//   A2P:  features -> conv_subsample -> +PE -> acoustic encoder blocks -> LN
//         = acoustic hidden [T', d];  -> linear -> log-softmax over blank + phonemes.
//   P2T:  each phoneme candidate -> embedding -> +PE -> phoneme encoder blocks -> LN.
//         Fusion decoder block (pre-norm):
//           h  = x + self_attn(LN(x), causal)
//           n  = LN(h)
//           a  = MHA(n, acoustic hidden)
//           p  = sentence_level(n, [MHA(n, E_1), ..., MHA(n, E_N)])
//           h  = h + fusion([a | p])        fusion: linear 2d -> d
//           y  = h + ffn(LN(h))
//         -> LN -> linear to the target vocabulary.
//
// Parameter names: a2p.*, p2t.*, baseline.*; the A2P prefix is the freeze set.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "dtx/ctc.hpp"
#include "dtx/nn.hpp"
#include "dtx/params.hpp"
#include "dtx/tensor.hpp"

namespace dtx::model {

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t ffn_dim = 256;
  std::size_t n_enc_baseline = 13;
  std::size_t n_dec = 6;
  std::size_t n_acoustic_enc = 8;
  std::size_t n_phoneme_enc = 4;
  std::size_t feat_dim = 16;
  std::size_t conv_channels = 8;
  double dropout = 0.1;
  double label_smoothing = 0.1;
  std::size_t ctc_beam = 10;
  std::size_t n_candidates = 4;
  std::size_t target_vocab = 93;
  std::size_t phoneme_vocab = 42;  // CTC classes, blank included
  std::size_t sentence_heads = 1;

  void validate() const;
  std::string describe() const;  // stable key=value listing, hashed into checkpoints
};

// d_model 512, 8 heads, ffn 2048.
ModelConfig full_size_preset();

// Closed-form trainable parameter counts.
std::size_t decoupled_parameter_count(const ModelConfig& cfg);
std::size_t baseline_parameter_count(const ModelConfig& cfg);
// |decoupled / baseline - 1|; configs are expected to stay within 0.15.
double parameter_mismatch(const ModelConfig& cfg);

std::uint64_t config_digest(const ModelConfig& cfg);

inline constexpr const char* kA2PPrefix = "a2p.";
inline constexpr const char* kP2TPrefix = "p2t.";

// Which context halves feed the fusion linear; the missing half is zeros.
enum class Branches {
  both,
  acoustic_only,  // -PEL
  phoneme_only,   // -AEL
};

struct A2P {
  nn::ConvFrontend conv;
  std::vector<nn::EncoderBlock> blocks;
  nn::LayerNorm norm;
  nn::Linear ctc;
};

struct FusionBlock {
  nn::LayerNorm self_norm;
  nn::MultiHeadAttention self_attn;
  nn::LayerNorm cross_norm;
  nn::MultiHeadAttention acoustic_attn;
  nn::MultiHeadAttention phoneme_attn;
  nn::Linear fusion;
  nn::LayerNorm ffn_norm;
  nn::FeedForward ffn;
};

struct P2T {
  Tensor phoneme_embedding;  // [phoneme_vocab, d]
  std::vector<nn::EncoderBlock> phoneme_blocks;
  nn::LayerNorm phoneme_norm;
  Tensor target_embedding;  // [target_vocab, d]
  std::vector<FusionBlock> blocks;
  nn::LayerNorm norm;
  nn::Linear output;
  std::size_t sentence_heads = 1;
};

struct DecoupledModel {
  ModelConfig config;
  ParamStore params;
  A2P a2p;
  P2T p2t;
};

struct DecoderBlock {
  nn::LayerNorm self_norm;
  nn::MultiHeadAttention self_attn;
  nn::LayerNorm cross_norm;
  nn::MultiHeadAttention cross_attn;
  nn::LayerNorm ffn_norm;
  nn::FeedForward ffn;
};

struct BaselineModel {
  ModelConfig config;
  ParamStore params;
  nn::ConvFrontend conv;
  std::vector<nn::EncoderBlock> encoder;
  nn::LayerNorm encoder_norm;
  Tensor target_embedding;
  std::vector<DecoderBlock> decoder;
  nn::LayerNorm norm;
  nn::Linear output;
};

DecoupledModel make_decoupled(const ModelConfig& cfg, std::uint64_t seed);
BaselineModel make_baseline(const ModelConfig& cfg, std::uint64_t seed);

// Teacher forcing: input = [sos] + target, expected output = target + [eos].
std::vector<int> decoder_input(const std::vector<int>& target);
std::vector<int> decoder_output(const std::vector<int>& target);

struct A2POutput {
  Tensor log_probs;  // [T', phoneme_vocab]
  Tensor hidden;     // [T', d]
};

A2POutput a2p_forward(const Tensor& features, const A2P& a2p, const nn::Mode& mode);

// [S, d] encoding of one candidate. Unknown ids (including blank) are InputError.
Tensor phoneme_encode(const ctc::PhonemeSeq& candidate, const P2T& p2t, const nn::Mode& mode);

// One context [L, d] per candidate.
std::vector<Tensor> phoneme_level_attention(const Tensor& query, const std::vector<Tensor>& candidates,
                                            const nn::MultiHeadAttention& params);

struct SentenceAttention {
  Tensor output;   // [L, d]
  Tensor weights;  // [L, N * heads]; head-major blocks of N columns
};

// alpha[t, n] = softmax_n(q_t . c_{t,n} / sqrt(d)); output_t = sum_n alpha[t, n] c_{t,n}.
// With heads > 1 the same rule is applied per d/heads slice.
SentenceAttention sentence_level_attention(const Tensor& query, const std::vector<Tensor>& contexts,
                                           std::size_t heads = 1);

Tensor fusion_block(const Tensor& x, const Tensor& acoustic, const std::vector<Tensor>& candidates,
                    const FusionBlock& params, std::size_t sentence_heads, Branches branches,
                    const nn::Mode& mode);

// Logits [L, target_vocab] for decoder input ids (teacher forcing).
// `acoustic` may be undefined when branches == phoneme_only; `candidates`
// may be empty when branches == acoustic_only.
Tensor fusion_decoder_forward(const std::vector<int>& input_ids, const Tensor& acoustic,
                              const std::vector<Tensor>& candidates, const P2T& p2t,
                              const nn::Mode& mode, Branches branches = Branches::both);

Tensor baseline_encode(const Tensor& features, const BaselineModel& model, const nn::Mode& mode);
Tensor baseline_decode(const std::vector<int>& input_ids, const Tensor& memory, const BaselineModel& model,
                       const nn::Mode& mode);
Tensor baseline_forward(const Tensor& features, const std::vector<int>& input_ids,
                        const BaselineModel& model, const nn::Mode& mode);

// Scaled target embedding plus positional encoding.
Tensor embed_tokens(const std::vector<int>& ids, const Tensor& table);

}  // namespace dtx::model
