#pragma once
// Staged training: A2P CTC pretraining, P2T text-only pretraining, joint
// fine-tuning with online N-best candidates, and the baseline.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "dtx/checkpoint.hpp"
#include "dtx/ctc.hpp"
#include "dtx/eval.hpp"
#include "dtx/model.hpp"
#include "dtx/synth.hpp"

namespace dtx::train {

struct SpecAugmentConfig {
  std::size_t n_time_masks = 2;
  std::size_t max_time_width = 10;
  std::size_t n_freq_masks = 1;
  std::size_t max_freq_width = 3;
};

struct TrainConfig {
  std::uint64_t seed = 1;
  std::size_t batch_size = 16;
  std::size_t warmup_steps = 400;
  double lr_factor = 1.0;  // peak-scale factor of the Noam schedule
  std::size_t epochs_a2p = 10;
  std::size_t epochs_p2t = 10;
  std::size_t epochs_joint = 10;
  std::size_t epochs_baseline = 10;
  double clip_norm = 5.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-9;
  bool specaug = true;
  SpecAugmentConfig specaug_cfg;
  std::size_t avg_last_k = 5;
  bool unfreeze_a2p = false;
  // Joint fine-tuning path; phoneme_only trains the -AEL variant, acoustic_only the -PEL one.
  model::Branches branches = model::Branches::both;
  std::size_t max_decode_len = 64;

  void validate() const;
};

enum class Stage { a2p_pretrain, p2t_pretrain, joint, baseline };
std::string stage_name(Stage stage);

// d_model^-0.5 * min(step^-0.5, step * warmup^-1.5), scaled by `factor`.
double noam_lr(std::size_t step, std::size_t d_model, std::size_t warmup, double factor = 1.0);

// Zeroes up to n_time_masks bands of width <= max_time_width frames and
// n_freq_masks bands of width <= max_freq_width bins. Deterministic per seed.
Tensor spec_augment(const Tensor& features, const SpecAugmentConfig& cfg, std::uint64_t seed);

class Adam {
 public:
  Adam(std::vector<NamedTensor> params, double beta1, double beta2, double eps);
  // Parameters without a gradient are left untouched.
  void step(double lr);
  std::size_t steps() const { return t_; }
  const std::vector<NamedTensor>& params() const { return params_; }

 private:
  std::vector<NamedTensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

// Rescales gradients so their global L2 norm is at most max_norm; returns the
// norm before clipping.
double clip_grad_norm(const std::vector<NamedTensor>& params, double max_norm);

// steps.csv (stage,step,lr,loss) and epochs.csv (stage,epoch,train_loss,metric,value).
class MetricsLog {
 public:
  MetricsLog() = default;
  explicit MetricsLog(const std::filesystem::path& dir);
  void step(Stage stage, std::size_t step, double lr, double loss);
  void epoch(Stage stage, std::size_t epoch, double train_loss, const std::string& metric, double value);

 private:
  std::ofstream steps_, epochs_;
};

struct Hooks {
  MetricsLog* metrics = nullptr;
  std::function<void(const std::string&)> log;
  std::filesystem::path checkpoint_dir;  // empty: no files
};

struct EpochRecord {
  std::size_t epoch = 0;  // 0: before training
  double train_loss = 0.0;
  std::string metric;
  double value = 0.0;
  std::uint64_t a2p_digest = 0;
};

struct StageReport {
  Stage stage = Stage::a2p_pretrain;
  std::vector<EpochRecord> epochs;
  std::vector<double> step_losses;
  std::size_t steps = 0;
  std::size_t skipped = 0;
  double final_value = 0.0;  // dev metric after checkpoint averaging
};

// N-best without empty sequences; falls back to greedy collapse, and returns
// an empty list only when that is empty too.
ctc::NBestList generate_candidates(const Tensor& log_probs, std::size_t beam, std::size_t n);

struct DecodeOptions {
  std::size_t beam = 10;
  std::size_t max_len = 64;
  bool length_normalize = true;
  model::Branches branches = model::Branches::both;
};

eval::DecodeResult decode_decoupled(const model::DecoupledModel& m, const Tensor& features,
                                    const DecodeOptions& options);
// Text-only decoding from a given phoneme sequence (acoustic half zero).
eval::DecodeResult decode_from_phonemes(const model::DecoupledModel& m, const ctc::PhonemeSeq& phonemes,
                                        const DecodeOptions& options);
eval::DecodeResult decode_baseline(const model::BaselineModel& m, const Tensor& features,
                                   const DecodeOptions& options);

// Greedy CTC phoneme error rate over utterances with features.
eval::ErrorCounts a2p_per(const model::DecoupledModel& m, const std::vector<synth::Utterance>& utts,
                          const ctc::PhonemeInventory& inventory, bool include_wb = true);

eval::EvalReport decoupled_mer(const model::DecoupledModel& m, const std::vector<synth::Utterance>& utts,
                               const synth::TargetVocab& vocab, const DecodeOptions& options);
eval::EvalReport baseline_mer(const model::BaselineModel& m, const std::vector<synth::Utterance>& utts,
                              const synth::TargetVocab& vocab, const DecodeOptions& options);

// Metadata key holding the A2P digest written by pretrain_a2p.
inline constexpr const char* kA2PDigestKey = "a2p_digest";

StageReport pretrain_a2p(model::DecoupledModel& m, std::map<std::string, std::string>& metadata,
                         const std::vector<synth::Utterance>& train, const std::vector<synth::Utterance>& dev,
                         const synth::Lexicon& lexicon, const TrainConfig& cfg, const Hooks& hooks = {});

// Pairs come from text via the lexicon; the gold phoneme sequence is the single
// candidate and the acoustic half of the fusion input is zero.
StageReport pretrain_p2t(model::DecoupledModel& m, std::map<std::string, std::string>& metadata,
                         const std::vector<synth::Utterance>& text, const std::vector<synth::Utterance>& dev,
                         const synth::Lexicon& lexicon, const TrainConfig& cfg, const Hooks& hooks = {});

// Requires metadata[kA2PDigestKey] to match the model's A2P parameters.
StageReport joint_finetune(model::DecoupledModel& m, std::map<std::string, std::string>& metadata,
                           const std::vector<synth::Utterance>& train, const std::vector<synth::Utterance>& dev,
                           const synth::Lexicon& lexicon, const TrainConfig& cfg, const Hooks& hooks = {});

StageReport train_baseline(model::BaselineModel& m, std::map<std::string, std::string>& metadata,
                           const std::vector<synth::Utterance>& train, const std::vector<synth::Utterance>& dev,
                           const synth::Lexicon& lexicon, const TrainConfig& cfg, const Hooks& hooks = {});

}  // namespace dtx::train
