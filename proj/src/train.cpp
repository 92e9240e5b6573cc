#include "dtx/train.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <sstream>

#include "dtx/errors.hpp"
#include "dtx/nn.hpp"
#include "dtx/ops.hpp"
#include "dtx/random.hpp"

namespace dtx::train {

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a ^ (b + 0x9E3779B97F4A7C15ULL + (a << 6) + (a >> 2));
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

void say(const Hooks& hooks, const std::string& msg) {
  if (hooks.log) hooks.log(msg);
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size == 0 || warmup_steps == 0) throw ConfigError("batch_size and warmup_steps must be positive");
  if (lr_factor <= 0.0 || clip_norm <= 0.0) throw ConfigError("lr_factor and clip_norm must be positive");
  if (adam_beta1 < 0.0 || adam_beta1 >= 1.0 || adam_beta2 < 0.0 || adam_beta2 >= 1.0 || adam_eps <= 0.0)
    throw ConfigError("invalid Adam hyperparameters");
  if (avg_last_k == 0) throw ConfigError("avg_last_k must be >= 1");
  if (max_decode_len == 0) throw ConfigError("max_decode_len must be positive");
}

std::string stage_name(Stage stage) {
  switch (stage) {
    case Stage::a2p_pretrain: return "a2p_pretrain";
    case Stage::p2t_pretrain: return "p2t_pretrain";
    case Stage::joint: return "joint";
    case Stage::baseline: return "baseline";
  }
  return "unknown";
}

double noam_lr(std::size_t step, std::size_t d_model, std::size_t warmup, double factor) {
  if (step == 0) throw ContractError("noam_lr: step must be >= 1");
  const double s = static_cast<double>(step);
  return factor * std::pow(static_cast<double>(d_model), -0.5) *
         std::min(std::pow(s, -0.5), s * std::pow(static_cast<double>(warmup), -1.5));
}

Tensor spec_augment(const Tensor& features, const SpecAugmentConfig& cfg, std::uint64_t seed) {
  const std::size_t frames = features.rows(), bins = features.cols();
  if (cfg.max_time_width > frames || cfg.max_freq_width > bins)
    throw ConfigError("SpecAugment mask width exceeds the feature dimensions");
  std::vector<double> v(features.data().begin(), features.data().end());
  std::mt19937_64 rng(seed);
  for (std::size_t m = 0; m < cfg.n_time_masks && cfg.max_time_width > 0; ++m) {
    const auto w = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(cfg.max_time_width)));
    const auto t0 = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(frames - w)));
    for (std::size_t t = t0; t < t0 + w; ++t)
      for (std::size_t f = 0; f < bins; ++f) v[t * bins + f] = 0.0;
  }
  for (std::size_t m = 0; m < cfg.n_freq_masks && cfg.max_freq_width > 0; ++m) {
    const auto w = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(cfg.max_freq_width)));
    const auto f0 = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(bins - w)));
    for (std::size_t t = 0; t < frames; ++t)
      for (std::size_t f = f0; f < f0 + w; ++f) v[t * bins + f] = 0.0;
  }
  return Tensor::from(features.shape(), std::move(v));
}

Adam::Adam(std::vector<NamedTensor> params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

void Adam::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor p = params_[k].tensor;
    if (!p.has_grad()) continue;
    const auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

double clip_grad_norm(const std::vector<NamedTensor>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    if (p.tensor.has_grad())
      for (double g : p.tensor.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (const auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      for (double& g : p.tensor.node()->grad) g *= s;
    }
  }
  return norm;
}

MetricsLog::MetricsLog(const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const bool fresh_steps = !std::filesystem::exists(dir / "steps.csv");
  const bool fresh_epochs = !std::filesystem::exists(dir / "epochs.csv");
  steps_.open(dir / "steps.csv", std::ios::app);
  epochs_.open(dir / "epochs.csv", std::ios::app);
  if (!steps_ || !epochs_) throw InputError("cannot write metrics in " + dir.string());
  if (fresh_steps) steps_ << "stage,step,lr,loss\n";
  if (fresh_epochs) epochs_ << "stage,epoch,train_loss,metric,value\n";
}

void MetricsLog::step(Stage stage, std::size_t step, double lr, double loss) {
  if (steps_.is_open()) steps_ << stage_name(stage) << ',' << step << ',' << lr << ',' << loss << '\n';
}

void MetricsLog::epoch(Stage stage, std::size_t epoch, double train_loss, const std::string& metric, double value) {
  if (epochs_.is_open()) {
    epochs_ << stage_name(stage) << ',' << epoch << ',' << train_loss << ',' << metric << ',' << value << '\n';
    epochs_.flush();
  }
}

ctc::NBestList generate_candidates(const Tensor& log_probs, std::size_t beam, std::size_t n) {
  ctc::NBestList out;
  for (auto& c : ctc::prefix_beam_search_nbest(log_probs, beam, n))
    if (!c.phonemes.empty() && std::isfinite(c.log_score)) out.push_back(std::move(c));
  if (out.empty()) {
    auto greedy = ctc::greedy_collapse(ctc::frame_argmax(log_probs));
    if (!greedy.empty()) out.push_back({std::move(greedy), 0.0});
  }
  return out;
}

namespace {

eval::BeamOptions beam_options(const DecodeOptions& o) {
  eval::BeamOptions b;
  b.beam = o.beam;
  b.max_len = o.max_len;
  b.sos = synth::TargetVocab::kSos;
  b.eos = synth::TargetVocab::kEos;
  b.length_normalize = o.length_normalize;
  return b;
}

std::vector<double> last_row_log_probs(const Tensor& logits) {
  const Tensor lp = log_softmax(slice_rows(logits, logits.rows() - 1, logits.rows()));
  return {lp.data().begin(), lp.data().end()};
}

eval::DecodeResult decode_with(const model::P2T& p2t, const Tensor& acoustic, const std::vector<Tensor>& enc,
                               const DecodeOptions& options, model::Branches branches) {
  return eval::beam_decode(
      [&](const std::vector<int>& prefix) {
        return last_row_log_probs(model::fusion_decoder_forward(prefix, acoustic, enc, p2t, nn::Mode::eval(), branches));
      },
      beam_options(options));
}

}  // namespace

eval::DecodeResult decode_decoupled(const model::DecoupledModel& m, const Tensor& features,
                                    const DecodeOptions& options) {
  NoGradGuard guard;
  const auto a2p = model::a2p_forward(features, m.a2p, nn::Mode::eval());
  std::vector<Tensor> enc;
  model::Branches branches = options.branches;
  if (branches != model::Branches::acoustic_only) {
    for (const auto& c : generate_candidates(a2p.log_probs, m.config.ctc_beam, m.config.n_candidates))
      enc.push_back(model::phoneme_encode(c.phonemes, m.p2t, nn::Mode::eval()));
    // Nothing recognised: only the acoustic half can contribute.
    if (enc.empty()) branches = model::Branches::acoustic_only;
  }
  return decode_with(m.p2t, a2p.hidden, enc, options, branches);
}

eval::DecodeResult decode_from_phonemes(const model::DecoupledModel& m, const ctc::PhonemeSeq& phonemes,
                                        const DecodeOptions& options) {
  NoGradGuard guard;
  const std::vector<Tensor> enc{model::phoneme_encode(phonemes, m.p2t, nn::Mode::eval())};
  return decode_with(m.p2t, Tensor(), enc, options, model::Branches::phoneme_only);
}

eval::DecodeResult decode_baseline(const model::BaselineModel& m, const Tensor& features,
                                   const DecodeOptions& options) {
  NoGradGuard guard;
  const Tensor memory = model::baseline_encode(features, m, nn::Mode::eval());
  return eval::beam_decode(
      [&](const std::vector<int>& prefix) {
        return last_row_log_probs(model::baseline_decode(prefix, memory, m, nn::Mode::eval()));
      },
      beam_options(options));
}

eval::ErrorCounts a2p_per(const model::DecoupledModel& m, const std::vector<synth::Utterance>& utts,
                          const ctc::PhonemeInventory& inventory, bool include_wb) {
  NoGradGuard guard;
  std::vector<ctc::PhonemeSeq> refs, hyps;
  for (const auto& u : utts) {
    if (!u.features.defined()) continue;
    const auto out = model::a2p_forward(u.features, m.a2p, nn::Mode::eval());
    refs.push_back(u.phonemes);
    hyps.push_back(ctc::greedy_collapse(ctc::frame_argmax(out.log_probs)));
  }
  return eval::per(refs, hyps, inventory, include_wb);
}

eval::EvalReport decoupled_mer(const model::DecoupledModel& m, const std::vector<synth::Utterance>& utts,
                               const synth::TargetVocab& vocab, const DecodeOptions& options) {
  std::vector<std::vector<int>> refs, hyps;
  for (const auto& u : utts) {
    refs.push_back(u.target);
    hyps.push_back(decode_decoupled(m, u.features, options).tokens);
  }
  return eval::mer(refs, hyps, vocab);
}

eval::EvalReport baseline_mer(const model::BaselineModel& m, const std::vector<synth::Utterance>& utts,
                              const synth::TargetVocab& vocab, const DecodeOptions& options) {
  std::vector<std::vector<int>> refs, hyps;
  for (const auto& u : utts) {
    refs.push_back(u.target);
    hyps.push_back(decode_baseline(m, u.features, options).tokens);
  }
  return eval::mer(refs, hyps, vocab);
}

namespace {

struct Loop {
  Stage stage;
  ParamStore* store = nullptr;
  std::uint64_t config_digest = 0;
  std::string model_kind;
  std::vector<std::string> trainable;  // parameter name prefixes
  std::string frozen;                  // prefix that must not change; empty: none
  std::size_t epochs = 0;
  std::size_t d_model = 0;
  std::vector<std::size_t> lengths;
  std::function<void(std::size_t epoch)> begin_epoch;
  // Undefined tensor: skip the item.
  std::function<Tensor(std::size_t item, std::size_t epoch, const nn::Mode& mode)> loss;
  std::string metric;
  std::function<double()> evaluate;
  bool evaluate_before = false;
};

std::vector<NamedTensor> select(const ParamStore& store, const std::vector<std::string>& prefixes) {
  std::vector<NamedTensor> out;
  for (const auto& p : prefixes) {
    auto part = store.with_prefix(p);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

Checkpoint partial_snapshot(const ParamStore& store, const std::vector<std::string>& prefixes) {
  Checkpoint c;
  for (const auto& e : select(store, prefixes))
    c.entries.push_back({e.name, e.tensor.shape(), {e.tensor.data().begin(), e.tensor.data().end()}});
  return c;
}

StageReport run(const Loop& loop, std::map<std::string, std::string>& metadata, const TrainConfig& cfg,
                const Hooks& hooks) {
  cfg.validate();
  StageReport report;
  report.stage = loop.stage;
  const std::string name = stage_name(loop.stage);
  const auto params = select(*loop.store, loop.trainable);
  Adam adam(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
  std::mt19937_64 rng(mix(cfg.seed, static_cast<std::uint64_t>(loop.stage) + 17));
  const std::uint64_t frozen_digest = loop.frozen.empty() ? 0 : digest(*loop.store, loop.frozen);
  auto current_a2p = [&] { return digest(*loop.store, model::kA2PPrefix); };

  // Length-sorted batches; batch order reshuffled each epoch.
  std::vector<std::size_t> order(loop.lengths.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return loop.lengths[a] < loop.lengths[b]; });
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < order.size(); i += cfg.batch_size)
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + cfg.batch_size)));

  if (loop.evaluate_before && loop.evaluate) {
    const double v = loop.evaluate();
    report.epochs.push_back({0, 0.0, loop.metric, v, current_a2p()});
    if (hooks.metrics) hooks.metrics->epoch(loop.stage, 0, 0.0, loop.metric, v);
    say(hooks, name + " epoch 0 " + loop.metric + " " + std::to_string(v));
  }

  std::deque<Checkpoint> recent;
  nn::Mode mode{true, 0.0, &rng};
  for (std::size_t epoch = 1; epoch <= loop.epochs; ++epoch) {
    if (loop.begin_epoch) loop.begin_epoch(epoch);
    for (std::size_t i = batches.size(); i > 1; --i)
      std::swap(batches[i - 1], batches[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(i) - 1))]);
    double epoch_loss = 0.0;
    std::size_t epoch_items = 0;
    for (const auto& batch : batches) {
      loop.store->zero_grad();
      std::vector<Tensor> losses;
      for (std::size_t item : batch) {
        Tensor l = loop.loss(item, epoch, mode);
        if (!l.defined()) {
          ++report.skipped;
          continue;
        }
        losses.push_back(l);
      }
      if (losses.empty()) continue;
      Tensor total = losses[0];
      for (std::size_t k = 1; k < losses.size(); ++k) total = add(total, losses[k]);
      const double batch_loss = total.item() / static_cast<double>(losses.size());
      scale(total, 1.0 / static_cast<double>(losses.size())).backward();
      clip_grad_norm(params, cfg.clip_norm);
      const double lr = noam_lr(adam.steps() + 1, loop.d_model, cfg.warmup_steps, cfg.lr_factor);
      adam.step(lr);
      ++report.steps;
      report.step_losses.push_back(batch_loss);
      epoch_loss += batch_loss * static_cast<double>(losses.size());
      epoch_items += losses.size();
      if (hooks.metrics) hooks.metrics->step(loop.stage, adam.steps(), lr, batch_loss);
    }
    loop.store->zero_grad();
    if (!loop.frozen.empty() && digest(*loop.store, loop.frozen) != frozen_digest)
      throw ContractError("frozen parameters '" + loop.frozen + "' changed during " + name);

    const double mean_loss = epoch_items ? epoch_loss / static_cast<double>(epoch_items) : 0.0;
    const double value = loop.evaluate ? loop.evaluate() : 0.0;
    report.epochs.push_back({epoch, mean_loss, loop.metric, value, current_a2p()});
    if (hooks.metrics) hooks.metrics->epoch(loop.stage, epoch, mean_loss, loop.metric, value);
    std::ostringstream msg;
    msg << name << " epoch " << epoch << " loss " << mean_loss << ' ' << loop.metric << ' ' << value;
    say(hooks, msg.str());

    recent.push_back(partial_snapshot(*loop.store, loop.trainable));
    if (recent.size() > cfg.avg_last_k) recent.pop_front();
    if (!hooks.checkpoint_dir.empty()) {
      auto meta = metadata;
      meta["stage"] = name;
      meta["epoch"] = std::to_string(epoch);
      meta["model"] = loop.model_kind;
      save_checkpoint(hooks.checkpoint_dir / (name + "-epoch" + std::to_string(epoch) + ".ckpt"),
                      snapshot(*loop.store, loop.config_digest, meta));
    }
  }

  if (recent.size() > 1) {
    const Checkpoint mean = average_checkpoints({recent.begin(), recent.end()});
    for (const auto& prefix : loop.trainable) restore(*loop.store, mean, prefix);
    report.final_value = loop.evaluate ? loop.evaluate() : 0.0;
    say(hooks, name + " averaged last " + std::to_string(recent.size()) + " epochs: " + loop.metric + " " +
                   std::to_string(report.final_value));
  } else {
    report.final_value = report.epochs.empty() ? 0.0 : report.epochs.back().value;
  }
  if (!loop.frozen.empty() && digest(*loop.store, loop.frozen) != frozen_digest)
    throw ContractError("frozen parameters '" + loop.frozen + "' changed during " + name);
  return report;
}

void finish(const Loop& loop, std::map<std::string, std::string>& metadata, const Hooks& hooks) {
  metadata["stage"] = stage_name(loop.stage);
  metadata["model"] = loop.model_kind;
  if (!hooks.checkpoint_dir.empty())
    save_checkpoint(hooks.checkpoint_dir / (stage_name(loop.stage) + ".ckpt"),
                    snapshot(*loop.store, loop.config_digest, metadata));
}

Tensor features_for(const synth::Utterance& u, const TrainConfig& cfg, std::size_t epoch, std::size_t item,
                    Stage stage) {
  if (!cfg.specaug) return u.features;
  return spec_augment(u.features, cfg.specaug_cfg,
                      mix(mix(cfg.seed, static_cast<std::uint64_t>(stage)), mix(epoch, item)));
}

std::vector<std::size_t> frame_lengths(const std::vector<synth::Utterance>& utts) {
  std::vector<std::size_t> out;
  for (const auto& u : utts) {
    if (!u.features.defined()) throw InputError("utterance " + u.id + " has no features");
    out.push_back(u.features.rows());
  }
  return out;
}

}  // namespace

StageReport pretrain_a2p(model::DecoupledModel& m, std::map<std::string, std::string>& metadata,
                         const std::vector<synth::Utterance>& train, const std::vector<synth::Utterance>& dev,
                         const synth::Lexicon& lexicon, const TrainConfig& cfg, const Hooks& hooks) {
  Loop loop;
  loop.stage = Stage::a2p_pretrain;
  loop.store = &m.params;
  loop.config_digest = model::config_digest(m.config);
  loop.model_kind = "decoupled";
  loop.trainable = {model::kA2PPrefix};
  loop.epochs = cfg.epochs_a2p;
  loop.d_model = m.config.d_model;
  loop.lengths = frame_lengths(train);
  const double dropout = m.config.dropout;
  std::size_t warned = 0;
  loop.loss = [&](std::size_t i, std::size_t epoch, const nn::Mode& mode) -> Tensor {
    const auto& u = train[i];
    const Tensor feats = features_for(u, cfg, epoch, i, loop.stage);
    nn::Mode md = mode;
    md.dropout = dropout;
    const auto out = model::a2p_forward(feats, m.a2p, md);
    if (!ctc::feasible(out.log_probs.rows(), u.phonemes)) {
      if (epoch == 1 && warned++ < 5) say(hooks, "warning: skipping infeasible utterance " + u.id);
      return Tensor();
    }
    return ctc::ctc_loss(out.log_probs, u.phonemes);
  };
  loop.metric = "dev_per";
  loop.evaluate = [&] { return a2p_per(m, dev, lexicon.phonemes).rate(); };
  auto report = run(loop, metadata, cfg, hooks);
  metadata[kA2PDigestKey] = hex_digest(digest(m.params, model::kA2PPrefix));
  finish(loop, metadata, hooks);
  return report;
}

StageReport pretrain_p2t(model::DecoupledModel& m, std::map<std::string, std::string>& metadata,
                         const std::vector<synth::Utterance>& text, const std::vector<synth::Utterance>& dev,
                         const synth::Lexicon& lexicon, const TrainConfig& cfg, const Hooks& hooks) {
  Loop loop;
  loop.stage = Stage::p2t_pretrain;
  loop.store = &m.params;
  loop.config_digest = model::config_digest(m.config);
  loop.model_kind = "decoupled";
  loop.trainable = {model::kP2TPrefix};
  loop.frozen = model::kA2PPrefix;
  loop.epochs = cfg.epochs_p2t;
  loop.d_model = m.config.d_model;
  for (const auto& u : text) {
    if (u.phonemes.empty() || u.target.empty()) throw InputError("text pair " + u.id + " is empty");
    loop.lengths.push_back(u.phonemes.size());
  }
  const double eps = m.config.label_smoothing;
  loop.loss = [&](std::size_t i, std::size_t, const nn::Mode& mode) -> Tensor {
    const auto& u = text[i];
    nn::Mode md = mode;
    md.dropout = m.config.dropout;
    const std::vector<Tensor> cands{model::phoneme_encode(u.phonemes, m.p2t, md)};
    const Tensor logits = model::fusion_decoder_forward(model::decoder_input(u.target), Tensor(), cands, m.p2t, md,
                                                        model::Branches::phoneme_only);
    return nn::label_smoothing_loss(logits, model::decoder_output(u.target), eps, synth::TargetVocab::kPad);
  };
  loop.metric = "dev_mer_gold_phonemes";
  DecodeOptions greedy{1, cfg.max_decode_len, true, model::Branches::phoneme_only};
  loop.evaluate = [&] {
    std::vector<std::vector<int>> refs, hyps;
    for (const auto& u : dev) {
      refs.push_back(u.target);
      hyps.push_back(decode_from_phonemes(m, u.phonemes, greedy).tokens);
    }
    return eval::mer(refs, hyps, lexicon.vocab).mer();
  };
  auto report = run(loop, metadata, cfg, hooks);
  metadata["p2t_pretrained"] = "1";
  finish(loop, metadata, hooks);
  return report;
}

StageReport joint_finetune(model::DecoupledModel& m, std::map<std::string, std::string>& metadata,
                           const std::vector<synth::Utterance>& train, const std::vector<synth::Utterance>& dev,
                           const synth::Lexicon& lexicon, const TrainConfig& cfg, const Hooks& hooks) {
  const auto it = metadata.find(kA2PDigestKey);
  if (it == metadata.end()) throw ContractError("joint fine-tuning needs a pretrained A2P (no A2P digest recorded)");
  if (it->second != hex_digest(digest(m.params, model::kA2PPrefix)))
    throw ContractError("A2P parameters do not match the recorded pretraining digest");

  Loop loop;
  loop.stage = Stage::joint;
  loop.store = &m.params;
  loop.config_digest = model::config_digest(m.config);
  loop.model_kind = "decoupled";
  loop.trainable = {model::kP2TPrefix};
  if (cfg.unfreeze_a2p)
    loop.trainable.push_back(model::kA2PPrefix);
  else
    loop.frozen = model::kA2PPrefix;
  loop.epochs = cfg.epochs_joint;
  loop.d_model = m.config.d_model;
  loop.lengths = frame_lengths(train);

  // Candidates (and, while frozen, acoustic states) are regenerated once per epoch.
  std::vector<Tensor> hidden(train.size());
  std::vector<ctc::NBestList> candidates(train.size());
  std::size_t empty_warned = 0;
  loop.begin_epoch = [&](std::size_t epoch) {
    NoGradGuard guard;
    for (std::size_t i = 0; i < train.size(); ++i) {
      const auto out = model::a2p_forward(features_for(train[i], cfg, epoch, i, loop.stage), m.a2p, nn::Mode::eval());
      hidden[i] = out.hidden;
      candidates[i] = generate_candidates(out.log_probs, m.config.ctc_beam, m.config.n_candidates);
      if (candidates[i].empty() && empty_warned++ < 5)
        say(hooks, "warning: no phoneme candidates for " + train[i].id + ", skipping");
    }
  };
  const double eps = m.config.label_smoothing;
  loop.loss = [&](std::size_t i, std::size_t epoch, const nn::Mode& mode) -> Tensor {
    const bool use_phonemes = cfg.branches != model::Branches::acoustic_only;
    if (use_phonemes && candidates[i].empty()) return Tensor();
    const auto& u = train[i];
    nn::Mode md = mode;
    md.dropout = m.config.dropout;
    Tensor acoustic = hidden[i];
    if (cfg.unfreeze_a2p) acoustic = model::a2p_forward(features_for(u, cfg, epoch, i, loop.stage), m.a2p, md).hidden;
    std::vector<Tensor> enc;
    if (use_phonemes)
      for (const auto& c : candidates[i]) enc.push_back(model::phoneme_encode(c.phonemes, m.p2t, md));
    const Tensor logits =
        model::fusion_decoder_forward(model::decoder_input(u.target), acoustic, enc, m.p2t, md, cfg.branches);
    return nn::label_smoothing_loss(logits, model::decoder_output(u.target), eps, synth::TargetVocab::kPad);
  };
  loop.metric = "dev_mer";
  loop.evaluate_before = true;
  DecodeOptions greedy{1, cfg.max_decode_len, true, cfg.branches};
  loop.evaluate = [&] { return decoupled_mer(m, dev, lexicon.vocab, greedy).mer(); };
  auto report = run(loop, metadata, cfg, hooks);
  if (cfg.unfreeze_a2p) metadata[kA2PDigestKey] = hex_digest(digest(m.params, model::kA2PPrefix));
  finish(loop, metadata, hooks);
  return report;
}

StageReport train_baseline(model::BaselineModel& m, std::map<std::string, std::string>& metadata,
                           const std::vector<synth::Utterance>& train, const std::vector<synth::Utterance>& dev,
                           const synth::Lexicon& lexicon, const TrainConfig& cfg, const Hooks& hooks) {
  Loop loop;
  loop.stage = Stage::baseline;
  loop.store = &m.params;
  loop.config_digest = model::config_digest(m.config);
  loop.model_kind = "baseline";
  loop.trainable = {"baseline."};
  loop.epochs = cfg.epochs_baseline;
  loop.d_model = m.config.d_model;
  loop.lengths = frame_lengths(train);
  const double eps = m.config.label_smoothing;
  loop.loss = [&](std::size_t i, std::size_t epoch, const nn::Mode& mode) -> Tensor {
    const auto& u = train[i];
    nn::Mode md = mode;
    md.dropout = m.config.dropout;
    const Tensor logits =
        model::baseline_forward(features_for(u, cfg, epoch, i, loop.stage), model::decoder_input(u.target), m, md);
    return nn::label_smoothing_loss(logits, model::decoder_output(u.target), eps, synth::TargetVocab::kPad);
  };
  loop.metric = "dev_mer";
  DecodeOptions greedy{1, cfg.max_decode_len, true, model::Branches::both};
  loop.evaluate = [&] { return baseline_mer(m, dev, lexicon.vocab, greedy).mer(); };
  auto report = run(loop, metadata, cfg, hooks);
  finish(loop, metadata, hooks);
  return report;
}

}  // namespace dtx::train
