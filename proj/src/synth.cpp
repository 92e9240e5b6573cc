#include "dtx/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"
#include "dtx/random.hpp"

namespace dtx::synth {

using nlohmann::json;

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t derive(std::uint64_t seed, std::uint64_t tag, std::uint64_t index = 0) {
  return splitmix(splitmix(seed ^ splitmix(tag)) + index);
}

std::string utf8(char32_t cp) {
  std::string s;
  if (cp < 0x80) {
    s += static_cast<char>(cp);
  } else if (cp < 0x800) {
    s += static_cast<char>(0xC0 | (cp >> 6));
    s += static_cast<char>(0x80 | (cp & 0x3F));
  } else {
    s += static_cast<char>(0xE0 | (cp >> 12));
    s += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    s += static_cast<char>(0x80 | (cp & 0x3F));
  }
  return s;
}

template <class T>
void shuffle(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i)
    std::swap(v[i - 1], v[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(i) - 1))]);
}

std::string lang_name(Lang l) { return l == Lang::alpha ? "alpha" : "beta"; }

}  // namespace

std::string mix_name(Mix mix) {
  switch (mix) {
    case Mix::alpha_only: return "alpha";
    case Mix::beta_only: return "beta";
    case Mix::code_switch: return "cs";
  }
  return "cs";
}

Mix parse_mix(const std::string& name) {
  if (name == "alpha") return Mix::alpha_only;
  if (name == "beta") return Mix::beta_only;
  if (name == "cs") return Mix::code_switch;
  throw InputError("unknown language-mix tag: " + name);
}

TargetVocab::TargetVocab() {
  units_ = {"<pad>", "<sos>", "<eos>"};
  langs_ = {Lang::alpha, Lang::alpha, Lang::alpha};
  for (int i = 0; i < 3; ++i) ids_[units_[static_cast<std::size_t>(i)]] = i;
}

int TargetVocab::add(const std::string& unit, Lang lang) {
  if (!ids_.emplace(unit, static_cast<int>(units_.size())).second)
    throw InputError("duplicate target unit: " + unit);
  units_.push_back(unit);
  langs_.push_back(lang);
  return static_cast<int>(units_.size()) - 1;
}

int TargetVocab::id(const std::string& unit) const {
  auto it = ids_.find(unit);
  if (it == ids_.end()) throw InputError("unit not in vocabulary: " + unit);
  return it->second;
}

const std::string& TargetVocab::unit(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= units_.size())
    throw InputError("target id out of range: " + std::to_string(id));
  return units_[static_cast<std::size_t>(id)];
}

Lang TargetVocab::lang(int id) const {
  unit(id);
  return langs_[static_cast<std::size_t>(id)];
}

bool is_continuation_piece(const std::string& unit) {
  return unit.size() > 2 && unit.compare(unit.size() - 2, 2, "@@") == 0;
}

std::string Lexicon::word_text(const std::vector<int>& pieces) const {
  std::string w;
  for (int p : pieces) {
    std::string u = vocab.unit(p);
    if (is_continuation_piece(u)) u.resize(u.size() - 2);
    w += u;
  }
  return w;
}

Lexicon build_lexicon(const LexiconConfig& cfg) {
  if (cfg.beta_pieces <= cfg.beta_words)
    throw ConfigError("need more beta pieces than beta words (one word-final piece per word)");
  std::mt19937_64 rng(derive(cfg.seed, 0x1e1c));
  Lexicon lex;

  auto name = [](char prefix, std::size_t i) {
    std::ostringstream os;
    os << prefix << (i < 10 ? "0" : "") << i;
    return os.str();
  };
  std::vector<std::string> symbols{ctc::kWordBoundary};
  for (std::size_t i = 0; i < cfg.alpha_phonemes; ++i) lex.alpha_phonemes.push_back(name('a', i));
  for (std::size_t i = 0; i < cfg.beta_phonemes; ++i) lex.beta_phonemes.push_back(name('b', i));
  symbols.insert(symbols.end(), lex.alpha_phonemes.begin(), lex.alpha_phonemes.end());
  symbols.insert(symbols.end(), lex.beta_phonemes.begin(), lex.beta_phonemes.end());
  lex.phonemes = ctc::PhonemeInventory(symbols);

  // Alpha: prefix-free code. Two thirds of the phonemes stand alone; the rest
  // only ever start a two-phoneme code.
  std::vector<int> aph;
  for (const auto& s : lex.alpha_phonemes) aph.push_back(lex.phonemes.id(s));
  shuffle(aph, rng);
  const std::size_t singles = std::min(cfg.alpha_chars, cfg.alpha_phonemes * 2 / 3);
  const std::size_t initials = cfg.alpha_phonemes - singles;
  const std::size_t doubles = cfg.alpha_chars - singles;
  if (doubles > initials * cfg.alpha_phonemes)
    throw ConfigError("too many alpha characters for the alpha phoneme set");
  std::vector<ctc::PhonemeSeq> codes;
  for (std::size_t i = 0; i < singles; ++i) codes.push_back({aph[i]});
  std::vector<ctc::PhonemeSeq> pairs;
  for (std::size_t i = singles; i < cfg.alpha_phonemes; ++i)
    for (int f : aph) pairs.push_back({aph[i], f});
  shuffle(pairs, rng);
  codes.insert(codes.end(), pairs.begin(), pairs.begin() + static_cast<std::ptrdiff_t>(doubles));
  shuffle(codes, rng);

  std::set<char32_t> used_cp;
  for (std::size_t i = 0; i < cfg.alpha_chars; ++i) {
    char32_t cp;
    do {
      cp = static_cast<char32_t>(0x4E00 + uniform_int(rng, 0, 0x1FFF));
    } while (!used_cp.insert(cp).second);
    const int id = lex.vocab.add(utf8(cp), Lang::alpha);
    lex.alpha_units.push_back(id);
    lex.pronunciation[id] = codes[i];
  }

  // Beta: syllable-spelled pieces; continuation pieces first, then one
  // word-final piece per word.
  static const std::string consonants = "ptkbdgmnlrsfvz";
  static const std::string vowels = "aeiou";
  std::set<std::string> spellings;
  auto spell = [&] {
    std::string s;
    do {
      s.clear();
      const auto syl = uniform_int(rng, 1, 2);
      for (int k = 0; k < syl; ++k) {
        s += consonants[static_cast<std::size_t>(uniform_int(rng, 0, consonants.size() - 1))];
        s += vowels[static_cast<std::size_t>(uniform_int(rng, 0, vowels.size() - 1))];
      }
    } while (!spellings.insert(s).second);
    return s;
  };
  std::vector<int> bph;
  for (const auto& s : lex.beta_phonemes) bph.push_back(lex.phonemes.id(s));
  auto pronounce = [&] {
    ctc::PhonemeSeq p(static_cast<std::size_t>(uniform_int(rng, 1, 3)));
    for (int& x : p) x = bph[static_cast<std::size_t>(uniform_int(rng, 0, bph.size() - 1))];
    return p;
  };
  const std::size_t continuations = cfg.beta_pieces - cfg.beta_words;
  std::vector<int> cont_ids, final_ids;
  for (std::size_t i = 0; i < continuations; ++i) {
    const int id = lex.vocab.add(spell() + "@@", Lang::beta);
    lex.pronunciation[id] = pronounce();
    cont_ids.push_back(id);
  }
  for (std::size_t i = 0; i < cfg.beta_words; ++i) {
    const int id = lex.vocab.add(spell(), Lang::beta);
    lex.pronunciation[id] = pronounce();
    final_ids.push_back(id);
  }

  std::set<std::string> word_spellings;
  std::set<ctc::PhonemeSeq> word_prons;
  for (int fin : final_ids) {
    for (int attempt = 0;; ++attempt) {
      if (attempt > 1000) throw ConfigError("could not build distinct beta words");
      std::vector<int> pieces;
      const auto n_cont = continuations ? uniform_int(rng, 0, 2) : 0;
      for (int k = 0; k < n_cont; ++k)
        pieces.push_back(cont_ids[static_cast<std::size_t>(uniform_int(rng, 0, cont_ids.size() - 1))]);
      pieces.push_back(fin);
      ctc::PhonemeSeq pron;
      for (int p : pieces) pron.insert(pron.end(), lex.pronunciation[p].begin(), lex.pronunciation[p].end());
      const std::string text = lex.word_text(pieces);
      if (word_spellings.count(text) || word_prons.count(pron)) continue;
      word_spellings.insert(text);
      word_prons.insert(pron);
      lex.beta_words.push_back(pieces);
      break;
    }
  }
  return lex;
}

ctc::PhonemeSeq text_to_phonemes(const std::vector<int>& target, const Lexicon& lexicon) {
  ctc::PhonemeSeq out;
  for (int unit : target) {
    auto it = lexicon.pronunciation.find(unit);
    if (it == lexicon.pronunciation.end()) {
      std::string label = std::to_string(unit);
      if (unit >= 0 && static_cast<std::size_t>(unit) < lexicon.vocab.size())
        label = lexicon.vocab.unit(unit) + " (id " + label + ")";
      throw InputError("unit not in lexicon: " + label);
    }
    out.insert(out.end(), it->second.begin(), it->second.end());
    if (lexicon.vocab.lang(unit) == Lang::beta && !is_continuation_piece(lexicon.vocab.unit(unit)))
      out.push_back(lexicon.phonemes.word_boundary());
  }
  return out;
}

std::vector<Lang> unit_languages(const std::vector<int>& target, const Lexicon& lexicon) {
  std::vector<Lang> out;
  out.reserve(target.size());
  for (int u : target) out.push_back(lexicon.vocab.lang(u));
  return out;
}

std::vector<int> sample_sentence(std::uint64_t seed, Mix mix, std::size_t min_tokens,
                                 std::size_t max_tokens, const Lexicon& lexicon, double beta_share) {
  if (min_tokens < 1 || max_tokens < min_tokens) throw ConfigError("bad sentence length range");
  if (mix == Mix::code_switch && max_tokens < 2)
    throw ConfigError("code-switch sentences need at least two tokens");
  std::mt19937_64 rng(splitmix(seed));
  auto n = static_cast<std::size_t>(uniform_int(rng, static_cast<std::int64_t>(min_tokens),
                                                static_cast<std::int64_t>(max_tokens)));
  if (mix == Mix::code_switch) n = std::max<std::size_t>(n, 2);
  std::vector<Lang> langs(n, mix == Mix::beta_only ? Lang::beta : Lang::alpha);
  if (mix == Mix::code_switch) {
    for (Lang& l : langs) l = uniform01(rng) < beta_share ? Lang::beta : Lang::alpha;
    const bool has_alpha = std::count(langs.begin(), langs.end(), Lang::alpha) > 0;
    const bool has_beta = std::count(langs.begin(), langs.end(), Lang::beta) > 0;
    if (!has_alpha || !has_beta) {
      const auto pos = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(n) - 1));
      langs[pos] = has_alpha ? Lang::beta : Lang::alpha;
    }
  }
  std::vector<int> out;
  for (Lang l : langs) {
    if (l == Lang::alpha) {
      out.push_back(lexicon.alpha_units[static_cast<std::size_t>(
          uniform_int(rng, 0, static_cast<std::int64_t>(lexicon.alpha_units.size()) - 1))]);
    } else {
      const auto& w = lexicon.beta_words[static_cast<std::size_t>(
          uniform_int(rng, 0, static_cast<std::int64_t>(lexicon.beta_words.size()) - 1))];
      out.insert(out.end(), w.begin(), w.end());
    }
  }
  return out;
}

Prototypes make_prototypes(std::uint64_t seed, std::size_t classes, std::size_t dim, double min_distance) {
  std::mt19937_64 rng(derive(seed, 0x9707));
  Prototypes p;
  p.dim = dim;
  p.vectors.assign(classes, std::vector<double>(dim, 0.0));
  for (std::size_t c = 1; c < classes; ++c) {
    for (int attempt = 0;; ++attempt) {
      if (attempt > 10000) throw ConfigError("cannot place well-separated prototypes; lower min_distance");
      std::vector<double> v(dim);
      double norm = 0.0;
      for (double& x : v) {
        x = standard_normal(rng);
        norm += x * x;
      }
      norm = std::sqrt(norm);
      for (double& x : v) x /= norm;
      bool ok = true;
      for (std::size_t o = 1; o < c && ok; ++o) {
        double d2 = 0.0;
        for (std::size_t k = 0; k < dim; ++k) d2 += (v[k] - p.vectors[o][k]) * (v[k] - p.vectors[o][k]);
        ok = std::sqrt(d2) >= min_distance;
      }
      if (ok) {
        p.vectors[c] = std::move(v);
        break;
      }
    }
  }
  return p;
}

Tensor synthesize_features(const ctc::PhonemeSeq& phonemes, std::uint64_t seed, double noise_sigma,
                           const Prototypes& prototypes, std::size_t frames_per_step) {
  if (phonemes.empty()) throw InputError("cannot synthesize features for an empty phoneme sequence");
  if (frames_per_step < 1) throw ConfigError("frames_per_step must be >= 1");
  // Durations and noise use separate streams so the alignment does not depend on sigma.
  std::mt19937_64 durations(derive(seed, 0xd0));
  std::mt19937_64 noise(derive(seed, 0x7015e));
  std::vector<double> frames;
  std::size_t count = 0;
  for (int ph : phonemes) {
    if (ph <= 0 || static_cast<std::size_t>(ph) >= prototypes.vectors.size())
      throw InputError("no prototype for phoneme id " + std::to_string(ph));
    const auto duration = static_cast<std::size_t>(uniform_int(durations, 2, 4)) * frames_per_step;
    const auto& proto = prototypes.vectors[static_cast<std::size_t>(ph)];
    for (std::size_t f = 0; f < duration; ++f) {
      for (double x : proto) frames.push_back(noise_sigma > 0.0 ? x + noise_sigma * standard_normal(noise) : x);
      ++count;
    }
  }
  return Tensor::from({count, prototypes.dim}, std::move(frames));
}

Corpus build_corpus(const CorpusConfig& cfg) {
  Corpus c;
  c.config = cfg;
  c.lexicon = build_lexicon(cfg.lexicon);
  c.prototypes = make_prototypes(cfg.seed, c.lexicon.phonemes.classes(), cfg.feat_dim);

  std::set<std::vector<int>> used;
  auto fill = [&](std::vector<Utterance>& out, std::size_t count, Mix mix, std::uint64_t tag,
                  const std::string& prefix, bool audio) {
    std::uint64_t draw = 0;
    while (out.size() < count) {
      if (draw > 100 * (count + 10)) throw ConfigError("sentence space exhausted for subset " + prefix);
      auto target = sample_sentence(derive(cfg.seed, tag, draw++), mix, cfg.min_tokens, cfg.max_tokens,
                                    c.lexicon, cfg.beta_share);
      if (!used.insert(target).second) continue;
      Utterance u;
      std::ostringstream id;
      id << prefix << '-' << out.size();
      u.id = id.str();
      u.mix = mix;
      u.target = std::move(target);
      u.phonemes = text_to_phonemes(u.target, c.lexicon);
      if (audio)
        u.features = synthesize_features(u.phonemes, derive(cfg.seed, tag + 0x100, draw), cfg.noise_sigma,
                                         c.prototypes, cfg.frames_per_step);
      out.push_back(std::move(u));
    }
  };
  // Evaluation sets first so they never depend on training-set sizes.
  fill(c.dev, cfg.dev, Mix::code_switch, 1, "dev", true);
  fill(c.test, cfg.test, Mix::code_switch, 2, "test", true);
  fill(c.train_cs, cfg.train_cs, Mix::code_switch, 3, "cs", true);
  fill(c.train_alpha, cfg.train_alpha, Mix::alpha_only, 4, "alpha", true);
  fill(c.train_beta, cfg.train_beta, Mix::beta_only, 5, "beta", true);
  fill(c.text_cs, cfg.text_cs, Mix::code_switch, 6, "text", false);
  return c;
}

void write_manifest(const std::filesystem::path& path, const std::vector<Utterance>& utts,
                    const Lexicon& lexicon) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write manifest " + path.string());
  for (const auto& u : utts) {
    json j;
    j["id"] = u.id;
    j["mix"] = mix_name(u.mix);
    if (u.features.defined()) {
      json rows = json::array();
      const std::size_t dim = u.features.cols();
      for (std::size_t t = 0; t < u.features.rows(); ++t)
        rows.push_back(std::vector<double>(u.features.data().begin() + t * dim,
                                           u.features.data().begin() + (t + 1) * dim));
      j["features"] = std::move(rows);
    } else {
      j["features"] = nullptr;
    }
    j["phonemes"] = lexicon.phonemes.decode(u.phonemes);
    json target = json::array(), langs = json::array();
    for (int id : u.target) {
      target.push_back(lexicon.vocab.unit(id));
      langs.push_back(lang_name(lexicon.vocab.lang(id)));
    }
    j["target"] = std::move(target);
    j["langs"] = std::move(langs);
    out << j.dump() << '\n';
  }
  if (!out) throw InputError("error while writing " + path.string());
}

namespace {

Tensor features_from_json(const json& rows, const std::string& where) {
  if (!rows.is_array() || rows.empty()) throw InputError(where + ": features must be a non-empty 2-D array");
  const std::size_t dim = rows[0].size();
  std::vector<double> flat;
  flat.reserve(rows.size() * dim);
  for (const auto& r : rows) {
    if (!r.is_array() || r.size() != dim) throw InputError(where + ": ragged feature rows");
    for (const auto& v : r) flat.push_back(v.get<double>());
  }
  return Tensor::from({rows.size(), dim}, std::move(flat));
}

}  // namespace

std::vector<Utterance> read_manifest(const std::filesystem::path& path, const Lexicon& lexicon) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open manifest " + path.string());
  std::vector<Utterance> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw InputError(where + ": " + e.what());
    }
    Utterance u;
    u.id = j.at("id").get<std::string>();
    u.mix = parse_mix(j.value("mix", std::string("cs")));
    for (const auto& unit : j.at("target")) {
      const auto s = unit.get<std::string>();
      if (!lexicon.vocab.contains(s)) throw InputError(where + ": unit not in lexicon: " + s);
      u.target.push_back(lexicon.vocab.id(s));
    }
    if (j.contains("phonemes") && !j["phonemes"].is_null())
      u.phonemes = lexicon.phonemes.encode(j["phonemes"].get<std::vector<std::string>>());
    else
      u.phonemes = text_to_phonemes(u.target, lexicon);
    if (j.contains("features") && !j["features"].is_null()) {
      const auto& f = j["features"];
      if (f.is_string()) {
        const auto file = path.parent_path() / f.get<std::string>();
        std::ifstream fin(file);
        if (!fin) throw InputError(where + ": cannot open feature file " + file.string());
        u.features = features_from_json(json::parse(fin), file.string());
      } else {
        u.features = features_from_json(f, where);
      }
    }
    out.push_back(std::move(u));
  }
  return out;
}

void write_lexicon(const std::filesystem::path& path, const Lexicon& lexicon) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write lexicon " + path.string());
  out << "#alpha-phonemes";
  for (const auto& p : lexicon.alpha_phonemes) out << ' ' << p;
  out << "\n#beta-phonemes";
  for (const auto& p : lexicon.beta_phonemes) out << ' ' << p;
  out << '\n';
  for (const auto& w : lexicon.beta_words) {
    out << "#word " << lexicon.word_text(w);
    for (int p : w) out << ' ' << lexicon.vocab.unit(p);
    out << '\n';
  }
  for (std::size_t id = 3; id < lexicon.vocab.size(); ++id) {
    const int i = static_cast<int>(id);
    out << lexicon.vocab.unit(i) << '\t';
    const auto& pron = lexicon.pronunciation.at(i);
    for (std::size_t k = 0; k < pron.size(); ++k) out << (k ? " " : "") << lexicon.phonemes.symbol(pron[k]);
    out << '\n';
  }
}

Lexicon read_lexicon(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open lexicon " + path.string());
  Lexicon lex;
  std::vector<std::vector<std::string>> words;
  std::vector<std::pair<std::string, std::vector<std::string>>> entries;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    if (line[0] == '#') {
      std::string tag, tok;
      ls >> tag;
      std::vector<std::string> rest;
      while (ls >> tok) rest.push_back(tok);
      if (tag == "#alpha-phonemes") lex.alpha_phonemes = rest;
      else if (tag == "#beta-phonemes") lex.beta_phonemes = rest;
      else if (tag == "#word" && rest.size() >= 2) words.emplace_back(rest.begin() + 1, rest.end());
      continue;
    }
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw InputError("lexicon line without TAB: " + line);
    std::istringstream ps(line.substr(tab + 1));
    std::vector<std::string> pron;
    std::string p;
    while (ps >> p) pron.push_back(p);
    if (pron.empty()) throw InputError("lexicon entry without phonemes: " + line.substr(0, tab));
    entries.emplace_back(line.substr(0, tab), pron);
  }
  std::vector<std::string> symbols{ctc::kWordBoundary};
  symbols.insert(symbols.end(), lex.alpha_phonemes.begin(), lex.alpha_phonemes.end());
  symbols.insert(symbols.end(), lex.beta_phonemes.begin(), lex.beta_phonemes.end());
  lex.phonemes = ctc::PhonemeInventory(symbols);
  std::set<std::string> alpha_set(lex.alpha_phonemes.begin(), lex.alpha_phonemes.end());
  for (const auto& [unit, pron] : entries) {
    const Lang lang = alpha_set.count(pron.front()) ? Lang::alpha : Lang::beta;
    const int id = lex.vocab.add(unit, lang);
    lex.pronunciation[id] = lex.phonemes.encode(pron);
    if (lang == Lang::alpha) lex.alpha_units.push_back(id);
  }
  for (const auto& w : words) {
    std::vector<int> ids;
    for (const auto& piece : w) ids.push_back(lex.vocab.id(piece));
    lex.beta_words.push_back(std::move(ids));
  }
  return lex;
}

void write_corpus(const std::filesystem::path& dir, const Corpus& corpus) {
  std::filesystem::create_directories(dir);
  write_lexicon(dir / "lexicon.txt", corpus.lexicon);
  write_manifest(dir / "train_cs.jsonl", corpus.train_cs, corpus.lexicon);
  write_manifest(dir / "train_alpha.jsonl", corpus.train_alpha, corpus.lexicon);
  write_manifest(dir / "train_beta.jsonl", corpus.train_beta, corpus.lexicon);
  write_manifest(dir / "text_cs.jsonl", corpus.text_cs, corpus.lexicon);
  write_manifest(dir / "dev.jsonl", corpus.dev, corpus.lexicon);
  write_manifest(dir / "test.jsonl", corpus.test, corpus.lexicon);
}

}  // namespace dtx::synth
