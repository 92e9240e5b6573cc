// Command-line driver: data generation, staged training, averaging, decoding
// and scoring.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <regex>
#include <sstream>

#include "CLI11.hpp"
#include "dtx/checkpoint.hpp"
#include "dtx/config.hpp"
#include "dtx/errors.hpp"
#include "dtx/train.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace dtx;

namespace {

constexpr const char* kModelConfigKey = "model_config";

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;  // key=value
  std::optional<std::uint64_t> seed;
  std::string out;
};

struct Timer {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

void log_line(const std::string& msg) { std::cerr << msg << std::endl; }

RunConfig resolve(const Common& c) {
  RunConfig cfg;
  if (!c.config_path.empty()) apply_config_file(cfg, c.config_path);
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  return cfg;
}

void add_common(CLI::App* app, Common& c, bool need_out = true) {
  app->add_option("--config", c.config_path, "Flat key = value config file")->check(CLI::ExistingFile);
  app->add_option("--set", c.overrides, "Override a config key (key=value), repeatable");
  app->add_option("--seed", c.seed, "Seed override");
  auto* out = app->add_option("--out", c.out, "Output directory");
  if (need_out) out->required();
}

void snapshot_config(const fs::path& dir, const RunConfig& cfg) {
  fs::create_directories(dir);
  write_config(dir / "config.resolved", cfg);
}

std::string model_keys(const RunConfig& cfg) {
  std::string out;
  for (const auto& k : RunConfig::keys())
    if (k.rfind("model.", 0) == 0) out += k + " = " + cfg.get(k) + "\n";
  return out;
}

model::ModelConfig model_from_checkpoint(const Checkpoint& ckpt) {
  const auto it = ckpt.metadata.find(kModelConfigKey);
  if (it == ckpt.metadata.end()) throw InputError("checkpoint carries no model configuration");
  const auto cfg = parse_config(it->second, "checkpoint model_config");
  if (model::config_digest(cfg.model) != ckpt.config_digest)
    throw InputError("checkpoint model configuration does not match its digest");
  return cfg.model;
}

struct Data {
  synth::Lexicon lexicon;
  fs::path dir;

  std::vector<synth::Utterance> subsets(const std::vector<std::string>& names) const {
    std::vector<synth::Utterance> out;
    for (const auto& n : names) {
      const auto part = synth::read_manifest(dir / (n + ".jsonl"), lexicon);
      out.insert(out.end(), part.begin(), part.end());
    }
    return out;
  }
};

Data load_data(const std::string& dir) {
  if (!fs::is_directory(dir)) throw InputError("data directory not found: " + dir);
  return {synth::read_lexicon(fs::path(dir) / "lexicon.txt"), dir};
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

void check_vocab(const model::ModelConfig& m, const synth::Lexicon& lx) {
  if (m.phoneme_vocab != lx.phonemes.classes() || m.target_vocab != lx.vocab.size())
    throw ConfigError("model vocabulary sizes (" + std::to_string(m.phoneme_vocab) + ", " +
                      std::to_string(m.target_vocab) + ") do not match the lexicon (" +
                      std::to_string(lx.phonemes.classes()) + ", " + std::to_string(lx.vocab.size()) + ")");
}

model::Branches parse_variant(const std::string& v) {
  if (v == "full") return model::Branches::both;
  if (v == "-PEL") return model::Branches::acoustic_only;
  if (v == "-AEL") return model::Branches::phoneme_only;
  throw ConfigError("unknown variant '" + v + "' (expected full, -PEL or -AEL)");
}

train::Hooks hooks_for(const fs::path& out, train::MetricsLog& metrics) {
  train::Hooks h;
  h.metrics = &metrics;
  h.checkpoint_dir = out;
  h.log = log_line;
  return h;
}

void write_hypotheses(const fs::path& path, const std::vector<synth::Utterance>& refs,
                      const std::vector<std::vector<int>>& hyps, const std::vector<ctc::PhonemeSeq>* phonemes,
                      const std::vector<eval::DecodeResult>& results, const synth::Lexicon& lx) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  for (std::size_t i = 0; i < refs.size(); ++i) {
    nlohmann::json j;
    j["id"] = refs[i].id;
    j["mix"] = synth::mix_name(refs[i].mix);
    j["features"] = nullptr;
    if (phonemes) j["phonemes"] = lx.phonemes.decode((*phonemes)[i]);
    nlohmann::json target = nlohmann::json::array(), langs = nlohmann::json::array();
    for (int id : hyps[i]) {
      if (lx.vocab.is_special(id)) continue;
      target.push_back(lx.vocab.unit(id));
      langs.push_back(lx.vocab.lang(id) == synth::Lang::alpha ? "alpha" : "beta");
    }
    j["target"] = std::move(target);
    j["langs"] = std::move(langs);
    j["finished"] = results[i].finished;
    j["score"] = results[i].score;
    out << j.dump() << '\n';
  }
}

void print_report(const eval::EvalReport& r, const fs::path& out_dir) {
  std::cout << r.table();
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream(out_dir / "report.json") << r.json() << '\n';
  }
}

// ---- subcommands ----

int gen_data(const Common& c) {
  RunConfig cfg = resolve(c);
  if (c.seed) cfg.corpus.seed = *c.seed;
  cfg.validate();
  Timer t;
  const auto corpus = synth::build_corpus(cfg.corpus);
  synth::write_corpus(c.out, corpus);
  snapshot_config(c.out, cfg);
  log_line("wrote corpus to " + c.out + " in " + std::to_string(t.seconds()) + "s");
  return 0;
}

struct StageArgs {
  Common common;
  std::string data;
  std::string subsets;
  std::string init;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> n_candidates;
  bool unfreeze = false;
  std::string variant = "full";
};

int train_stage(const StageArgs& a, train::Stage stage) {
  RunConfig cfg = resolve(a.common);
  if (a.common.seed) cfg.train.seed = *a.common.seed;
  if (a.unfreeze) cfg.train.unfreeze_a2p = true;
  if (a.n_candidates) cfg.model.n_candidates = *a.n_candidates;
  cfg.train.branches = parse_variant(a.variant);
  if (a.epochs) {
    switch (stage) {
      case train::Stage::a2p_pretrain: cfg.train.epochs_a2p = *a.epochs; break;
      case train::Stage::p2t_pretrain: cfg.train.epochs_p2t = *a.epochs; break;
      case train::Stage::joint: cfg.train.epochs_joint = *a.epochs; break;
      case train::Stage::baseline: cfg.train.epochs_baseline = *a.epochs; break;
    }
  }
  const Data data = load_data(a.data);

  std::optional<Checkpoint> init;
  std::map<std::string, std::string> meta;
  if (!a.init.empty()) {
    init = load_checkpoint(a.init);
    // Architecture comes from the checkpoint; candidate count stays a run option.
    const auto n_cand = cfg.model.n_candidates;
    const auto beam = cfg.model.ctc_beam;
    cfg.model = model_from_checkpoint(*init);
    if (a.n_candidates) cfg.model.n_candidates = n_cand;
    cfg.model.ctc_beam = beam;
    meta = init->metadata;
  }
  cfg.validate();
  check_vocab(cfg.model, data.lexicon);
  const fs::path out = a.common.out;
  snapshot_config(out, cfg);
  meta[kModelConfigKey] = model_keys(cfg);
  train::MetricsLog metrics(out);
  const auto hooks = hooks_for(out, metrics);

  std::vector<std::string> names = split_csv(a.subsets);
  if (names.empty()) names = {stage == train::Stage::p2t_pretrain ? "text_cs" : "train_cs"};
  const auto train_set = data.subsets(names);
  const auto dev = data.subsets({"dev"});
  Timer t;
  train::StageReport report;
  if (stage == train::Stage::baseline) {
    auto m = model::make_baseline(cfg.model, cfg.train.seed);
    if (init) restore(m.params, *init);
    report = train::train_baseline(m, meta, train_set, dev, data.lexicon, cfg.train, hooks);
  } else {
    auto m = model::make_decoupled(cfg.model, cfg.train.seed);
    if (init) restore(m.params, *init);
    if (stage == train::Stage::a2p_pretrain)
      report = train::pretrain_a2p(m, meta, train_set, dev, data.lexicon, cfg.train, hooks);
    else if (stage == train::Stage::p2t_pretrain)
      report = train::pretrain_p2t(m, meta, train_set, dev, data.lexicon, cfg.train, hooks);
    else
      report = train::joint_finetune(m, meta, train_set, dev, data.lexicon, cfg.train, hooks);
  }
  std::ostringstream msg;
  msg << train::stage_name(stage) << " done: " << report.steps << " steps, " << report.skipped
      << " skipped items, final dev " << (report.epochs.empty() ? "-" : report.epochs.back().metric) << ' '
      << report.final_value << ", " << t.seconds() << "s; checkpoint "
      << (out / (train::stage_name(stage) + ".ckpt")).string();
  log_line(msg.str());
  return 0;
}

std::vector<fs::path> checkpoint_inputs(const std::vector<std::string>& inputs) {
  std::vector<fs::path> files;
  for (const auto& in : inputs) {
    if (fs::is_directory(in)) {
      // Epoch checkpoints, ordered by stage name then epoch number.
      const std::regex pat(R"((.+)-epoch(\d+)\.ckpt)");
      std::vector<std::tuple<std::string, long, fs::path>> found;
      for (const auto& e : fs::directory_iterator(in)) {
        std::smatch m;
        const auto name = e.path().filename().string();
        if (std::regex_match(name, m, pat)) found.emplace_back(m[1], std::stol(m[2]), e.path());
      }
      std::sort(found.begin(), found.end());
      for (auto& f : found) files.push_back(std::get<2>(f));
    } else if (fs::is_regular_file(in)) {
      files.emplace_back(in);
    } else {
      throw InputError("checkpoint not found: " + in);
    }
  }
  return files;
}

int avg_ckpt(const std::vector<std::string>& inputs, std::size_t last, const std::string& out) {
  const auto files = checkpoint_inputs(inputs);
  if (last == 0) throw ConfigError("--last must be >= 1");
  if (files.size() < last)
    throw InputError("need " + std::to_string(last) + " checkpoints, found " + std::to_string(files.size()));
  std::vector<Checkpoint> ckpts;
  for (std::size_t i = files.size() - last; i < files.size(); ++i) {
    ckpts.push_back(load_checkpoint(files[i]));
    log_line("averaging " + files[i].string());
  }
  if (ckpts.front().config_digest != ckpts.back().config_digest)
    throw InputError("checkpoints come from different model configurations");
  auto avg = average_checkpoints(ckpts);
  avg.metadata["averaged"] = std::to_string(last);
  fs::path path(out);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  save_checkpoint(path, last == 1 ? ckpts.front() : avg);
  return 0;
}

struct DecodeArgs {
  Common common;
  std::string ckpt;
  std::string data;
  std::string subset = "test";
  std::optional<std::size_t> beam;
  std::optional<std::size_t> n_candidates;
  bool raw_score = false;
  std::string variant = "full";
  bool per_no_wb = false;
};

int decode_cmd(const DecodeArgs& a, bool ablate) {
  RunConfig cfg = resolve(a.common);
  const Checkpoint ckpt = load_checkpoint(a.ckpt);
  cfg.model = model_from_checkpoint(ckpt);
  if (a.n_candidates) cfg.model.n_candidates = *a.n_candidates;
  if (a.beam) cfg.decode.beam = *a.beam;
  if (a.raw_score) cfg.decode.length_normalize = false;
  cfg.decode.branches = parse_variant(a.variant);
  if (ablate && cfg.decode.branches == model::Branches::both)
    throw ConfigError("ablate needs --variant -PEL or -AEL");
  cfg.validate();
  const Data data = load_data(a.data);
  check_vocab(cfg.model, data.lexicon);
  const fs::path out = a.common.out;
  snapshot_config(out, cfg);
  const auto utts = data.subsets({a.subset});

  std::vector<std::vector<int>> refs, hyps;
  std::vector<eval::DecodeResult> results;
  std::vector<ctc::PhonemeSeq> greedy;
  Timer t;
  const bool is_baseline = ckpt.metadata.count("model") && ckpt.metadata.at("model") == "baseline";
  if (is_baseline) {
    if (cfg.decode.branches != model::Branches::both) throw ConfigError("variants apply to decoupled checkpoints only");
    auto m = model::make_baseline(cfg.model, 0);
    restore(m.params, ckpt);
    for (const auto& u : utts) results.push_back(train::decode_baseline(m, u.features, cfg.decode));
  } else {
    auto m = model::make_decoupled(cfg.model, 0);
    restore(m.params, ckpt);
    for (const auto& u : utts) {
      results.push_back(train::decode_decoupled(m, u.features, cfg.decode));
      NoGradGuard guard;
      const auto lp = model::a2p_forward(u.features, m.a2p, nn::Mode::eval()).log_probs;
      greedy.push_back(ctc::greedy_collapse(ctc::frame_argmax(lp)));
    }
  }
  for (std::size_t i = 0; i < utts.size(); ++i) {
    refs.push_back(utts[i].target);
    hyps.push_back(results[i].tokens);
  }
  write_hypotheses(out / "hyp.jsonl", utts, hyps, is_baseline ? nullptr : &greedy, results, data.lexicon);
  const auto report = eval::mer(refs, hyps, data.lexicon.vocab);
  print_report(report, out);
  if (!is_baseline) {
    std::vector<ctc::PhonemeSeq> ref_ph;
    for (const auto& u : utts) ref_ph.push_back(u.phonemes);
    const auto per = eval::per(ref_ph, greedy, data.lexicon.phonemes, !a.per_no_wb);
    std::cout << "PER " << std::fixed << std::setprecision(2) << 100.0 * per.rate() << "%\n";
  }
  log_line("decoded " + std::to_string(utts.size()) + " utterances in " + std::to_string(t.seconds()) + "s");
  return 0;
}

int eval_cmd(const std::string& ref, const std::string& hyp, const std::string& lexicon, bool per_flag,
             bool per_no_wb, const std::string& out) {
  const auto lx = synth::read_lexicon(lexicon);
  const auto refs = synth::read_manifest(ref, lx);
  const auto hyps = synth::read_manifest(hyp, lx);
  if (refs.size() != hyps.size())
    throw InputError("reference has " + std::to_string(refs.size()) + " entries, hypothesis " +
                     std::to_string(hyps.size()));
  std::vector<std::vector<int>> r, h;
  std::vector<ctc::PhonemeSeq> rp, hp;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    if (refs[i].id != hyps[i].id) throw InputError("utterance order differs at line " + std::to_string(i + 1));
    r.push_back(refs[i].target);
    h.push_back(hyps[i].target);
    rp.push_back(refs[i].phonemes);
    hp.push_back(hyps[i].phonemes);
  }
  print_report(eval::mer(r, h, lx.vocab), out);
  if (per_flag) {
    const auto per = eval::per(rp, hp, lx.phonemes, !per_no_wb);
    std::cout << "PER " << std::fixed << std::setprecision(2) << 100.0 * per.rate() << "%\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Decoupled transformer for code-switching speech recognition (toy scale)"};
  app.require_subcommand(1);

  Common gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate the synthetic bilingual corpus");
  add_common(gen_cmd, gen);

  StageArgs a2p, p2t, joint, base;
  auto stage_cmd = [&](const char* name, const char* help, StageArgs& s) {
    auto* cmd = app.add_subcommand(name, help);
    add_common(cmd, s.common);
    cmd->add_option("--data", s.data, "Corpus directory from gen-data")->required();
    cmd->add_option("--subsets", s.subsets, "Comma-separated manifests to train on (train_cs, train_alpha, ...)");
    cmd->add_option("--epochs", s.epochs, "Epoch override for this stage");
    return cmd;
  };
  stage_cmd("train-a2p", "CTC pretraining of the audio-to-phoneme network", a2p);
  auto* p2t_cmd = stage_cmd("train-p2t", "Text-only pretraining of the phoneme-to-text network", p2t);
  p2t_cmd->add_option("--init", p2t.init, "Start from this checkpoint")->check(CLI::ExistingFile);
  auto* joint_cmd = stage_cmd("train-joint", "Joint fine-tuning with N-best candidates", joint);
  joint_cmd->add_option("--init", joint.init, "Checkpoint holding a pretrained A2P")
      ->required()
      ->check(CLI::ExistingFile);
  joint_cmd->add_option("--n-candidates", joint.n_candidates, "Phoneme candidates per utterance");
  joint_cmd->add_flag("--unfreeze-a2p", joint.unfreeze, "Also update the A2P network");
  joint_cmd->add_option("--variant", joint.variant, "full, -PEL or -AEL");
  stage_cmd("train-baseline", "Train the speech-transformer baseline", base);

  std::vector<std::string> avg_inputs;
  std::size_t avg_last = 5;
  std::string avg_out;
  auto* avg_cmd = app.add_subcommand("avg-ckpt", "Average the last k checkpoints");
  avg_cmd->add_option("inputs", avg_inputs, "Checkpoint files (in order) or a directory of epoch checkpoints")
      ->required();
  avg_cmd->add_option("--last", avg_last, "Number of trailing checkpoints to average");
  avg_cmd->add_option("--out", avg_out, "Output checkpoint file")->required();

  DecodeArgs dec, abl;
  auto decode_like = [&](const char* name, const char* help, DecodeArgs& d) {
    auto* cmd = app.add_subcommand(name, help);
    add_common(cmd, d.common);
    cmd->add_option("--ckpt", d.ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
    cmd->add_option("--data", d.data, "Corpus directory")->required();
    cmd->add_option("--subset", d.subset, "Manifest to decode (dev, test, ...)");
    cmd->add_option("--beam", d.beam, "Beam width");
    cmd->add_option("--n-candidates", d.n_candidates, "Phoneme candidates per utterance");
    cmd->add_flag("--raw-score", d.raw_score, "Rank hypotheses by raw log-probability");
    cmd->add_flag("--per-no-wb", d.per_no_wb, "Exclude <wb> from PER");
    return cmd;
  };
  decode_like("decode", "Beam-search decode a manifest and score it", dec)
      ->add_option("--variant", dec.variant, "full, -PEL or -AEL");
  decode_like("ablate", "Decode with one context branch removed", abl)
      ->add_option("--variant", abl.variant, "-PEL or -AEL")
      ->required();

  std::string ev_ref, ev_hyp, ev_lex, ev_out;
  bool ev_per = false, ev_no_wb = false;
  auto* eval_cmd_app = app.add_subcommand("eval", "Score a hypothesis manifest against a reference");
  eval_cmd_app->add_option("--ref", ev_ref, "Reference manifest")->required()->check(CLI::ExistingFile);
  eval_cmd_app->add_option("--hyp", ev_hyp, "Hypothesis manifest")->required()->check(CLI::ExistingFile);
  eval_cmd_app->add_option("--lexicon", ev_lex, "lexicon.txt of the corpus")->required()->check(CLI::ExistingFile);
  eval_cmd_app->add_flag("--per", ev_per, "Also report phoneme error rate");
  eval_cmd_app->add_flag("--per-no-wb", ev_no_wb, "Exclude <wb> from PER");
  eval_cmd_app->add_option("--out", ev_out, "Directory for report.json");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen_cmd) return gen_data(gen);
    if (app.got_subcommand("train-a2p")) return train_stage(a2p, train::Stage::a2p_pretrain);
    if (*p2t_cmd) return train_stage(p2t, train::Stage::p2t_pretrain);
    if (*joint_cmd) return train_stage(joint, train::Stage::joint);
    if (app.got_subcommand("train-baseline")) return train_stage(base, train::Stage::baseline);
    if (*avg_cmd) return avg_ckpt(avg_inputs, avg_last, avg_out);
    if (app.got_subcommand("decode")) return decode_cmd(dec, false);
    if (app.got_subcommand("ablate")) return decode_cmd(abl, true);
    if (*eval_cmd_app) return eval_cmd(ev_ref, ev_hyp, ev_lex, ev_per, ev_no_wb, ev_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
