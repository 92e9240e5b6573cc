#include "dtx/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "dtx/errors.hpp"

namespace dtx {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size())
    throw ConfigError("bad value for " + key + ": '" + text + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("bad value for " + key + ": '" + text + "' (expected true or false)");
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

struct Field {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

using Registry = std::vector<std::pair<std::string, Field>>;

template <class Get>
Field size_field(Get access) {
  return {[access](RunConfig& c, const std::string& k, const std::string& v) {
            access(c) = parse_number<std::size_t>(k, v);
          },
          [access](const RunConfig& c) { return std::to_string(access(const_cast<RunConfig&>(c))); }};
}

template <class Get>
Field u64_field(Get access) {
  return {[access](RunConfig& c, const std::string& k, const std::string& v) {
            access(c) = parse_number<std::uint64_t>(k, v);
          },
          [access](const RunConfig& c) { return std::to_string(access(const_cast<RunConfig&>(c))); }};
}

template <class Get>
Field real_field(Get access) {
  return {[access](RunConfig& c, const std::string& k, const std::string& v) {
            access(c) = parse_number<double>(k, v);
          },
          [access](const RunConfig& c) { return format_double(access(const_cast<RunConfig&>(c))); }};
}

template <class Get>
Field bool_field(Get access) {
  return {[access](RunConfig& c, const std::string& k, const std::string& v) { access(c) = parse_bool(k, v); },
          [access](const RunConfig& c) { return std::string(access(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}

#define DTX_SIZE(key, expr) {key, size_field([](RunConfig& c) -> auto& { return expr; })}
#define DTX_U64(key, expr) {key, u64_field([](RunConfig& c) -> auto& { return expr; })}
#define DTX_REAL(key, expr) {key, real_field([](RunConfig& c) -> auto& { return expr; })}
#define DTX_BOOL(key, expr) {key, bool_field([](RunConfig& c) -> auto& { return expr; })}

const Registry& registry() {
  static const Registry r = {
      DTX_U64("corpus.seed", c.corpus.seed),
      DTX_SIZE("corpus.feat_dim", c.corpus.feat_dim),
      DTX_REAL("corpus.noise_sigma", c.corpus.noise_sigma),
      DTX_SIZE("corpus.frames_per_step", c.corpus.frames_per_step),
      DTX_SIZE("corpus.min_tokens", c.corpus.min_tokens),
      DTX_SIZE("corpus.max_tokens", c.corpus.max_tokens),
      DTX_REAL("corpus.beta_share", c.corpus.beta_share),
      DTX_SIZE("corpus.train_cs", c.corpus.train_cs),
      DTX_SIZE("corpus.train_alpha", c.corpus.train_alpha),
      DTX_SIZE("corpus.train_beta", c.corpus.train_beta),
      DTX_SIZE("corpus.text_cs", c.corpus.text_cs),
      DTX_SIZE("corpus.dev", c.corpus.dev),
      DTX_SIZE("corpus.test", c.corpus.test),
      DTX_U64("lexicon.seed", c.corpus.lexicon.seed),
      DTX_SIZE("lexicon.alpha_phonemes", c.corpus.lexicon.alpha_phonemes),
      DTX_SIZE("lexicon.beta_phonemes", c.corpus.lexicon.beta_phonemes),
      DTX_SIZE("lexicon.alpha_chars", c.corpus.lexicon.alpha_chars),
      DTX_SIZE("lexicon.beta_words", c.corpus.lexicon.beta_words),
      DTX_SIZE("lexicon.beta_pieces", c.corpus.lexicon.beta_pieces),
      DTX_SIZE("model.d_model", c.model.d_model),
      DTX_SIZE("model.heads", c.model.heads),
      DTX_SIZE("model.ffn_dim", c.model.ffn_dim),
      DTX_SIZE("model.n_enc_baseline", c.model.n_enc_baseline),
      DTX_SIZE("model.n_dec", c.model.n_dec),
      DTX_SIZE("model.n_acoustic_enc", c.model.n_acoustic_enc),
      DTX_SIZE("model.n_phoneme_enc", c.model.n_phoneme_enc),
      DTX_SIZE("model.feat_dim", c.model.feat_dim),
      DTX_SIZE("model.conv_channels", c.model.conv_channels),
      DTX_REAL("model.dropout", c.model.dropout),
      DTX_REAL("model.label_smoothing", c.model.label_smoothing),
      DTX_SIZE("model.ctc_beam", c.model.ctc_beam),
      DTX_SIZE("model.n_candidates", c.model.n_candidates),
      DTX_SIZE("model.target_vocab", c.model.target_vocab),
      DTX_SIZE("model.phoneme_vocab", c.model.phoneme_vocab),
      DTX_SIZE("model.sentence_heads", c.model.sentence_heads),
      DTX_U64("train.seed", c.train.seed),
      DTX_SIZE("train.batch_size", c.train.batch_size),
      DTX_SIZE("train.warmup_steps", c.train.warmup_steps),
      DTX_REAL("train.lr_factor", c.train.lr_factor),
      DTX_SIZE("train.epochs_a2p", c.train.epochs_a2p),
      DTX_SIZE("train.epochs_p2t", c.train.epochs_p2t),
      DTX_SIZE("train.epochs_joint", c.train.epochs_joint),
      DTX_SIZE("train.epochs_baseline", c.train.epochs_baseline),
      DTX_REAL("train.clip_norm", c.train.clip_norm),
      DTX_REAL("train.adam_beta1", c.train.adam_beta1),
      DTX_REAL("train.adam_beta2", c.train.adam_beta2),
      DTX_REAL("train.adam_eps", c.train.adam_eps),
      DTX_BOOL("train.specaug", c.train.specaug),
      DTX_SIZE("train.avg_last_k", c.train.avg_last_k),
      DTX_BOOL("train.unfreeze_a2p", c.train.unfreeze_a2p),
      DTX_SIZE("train.max_decode_len", c.train.max_decode_len),
      DTX_SIZE("specaug.n_time_masks", c.train.specaug_cfg.n_time_masks),
      DTX_SIZE("specaug.max_time_width", c.train.specaug_cfg.max_time_width),
      DTX_SIZE("specaug.n_freq_masks", c.train.specaug_cfg.n_freq_masks),
      DTX_SIZE("specaug.max_freq_width", c.train.specaug_cfg.max_freq_width),
      DTX_SIZE("decode.beam", c.decode.beam),
      DTX_SIZE("decode.max_len", c.decode.max_len),
      DTX_BOOL("decode.length_normalize", c.decode.length_normalize),
  };
  return r;
}

#undef DTX_SIZE
#undef DTX_U64
#undef DTX_REAL
#undef DTX_BOOL

const Field& lookup(const std::string& key) {
  for (const auto& [k, f] : registry())
    if (k == key) return f;
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) { lookup(key).set(*this, key, trim(value)); }

std::string RunConfig::get(const std::string& key) const { return lookup(key).get(*this); }

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& [key, f] : registry()) out.push_back(key);
    return out;
  }();
  return k;
}

std::string RunConfig::dump() const {
  std::string out;
  for (const auto& [key, f] : registry()) out += key + " = " + f.get(*this) + "\n";
  return out;
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (corpus.feat_dim != model.feat_dim)
    throw ConfigError("corpus.feat_dim (" + std::to_string(corpus.feat_dim) + ") != model.feat_dim (" +
                      std::to_string(model.feat_dim) + ")");
  const auto& lx = corpus.lexicon;
  if (model.phoneme_vocab != 2 + lx.alpha_phonemes + lx.beta_phonemes)
    throw ConfigError("model.phoneme_vocab must be 2 + lexicon.alpha_phonemes + lexicon.beta_phonemes");
  if (model.target_vocab != 3 + lx.alpha_chars + lx.beta_pieces)
    throw ConfigError("model.target_vocab must be 3 + lexicon.alpha_chars + lexicon.beta_pieces");
  if (decode.beam == 0 || decode.max_len == 0) throw ConfigError("decode.beam and decode.max_len must be positive");
}

RunConfig parse_config(const std::string& text, const std::string& source) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key = value");
    try {
      cfg.set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

void apply_config_file(RunConfig& base, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const RunConfig parsed = parse_config(ss.str(), path.string());
  // Re-parse onto `base` so only keys present in the file override it.
  std::istringstream lines(ss.str());
  std::string line;
  while (std::getline(lines, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const auto key = trim(line.substr(0, eq));
    base.set(key, parsed.get(key));
  }
}

RunConfig load_config(const std::filesystem::path& path) {
  RunConfig cfg;
  apply_config_file(cfg, path);
  return cfg;
}

void write_config(const std::filesystem::path& path, const RunConfig& cfg) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << "# resolved configuration\n" << cfg.dump();
}

}  // namespace dtx
