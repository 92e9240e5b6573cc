#pragma once
// Deterministic toy code-switching corpus: two artificial languages with
// disjoint phoneme sets (sharing only <wb>), a lexicon, and prototype-based
// acoustic features.
//
//   lang alpha: single-character units, each pronounced with 1-2 phonemes
//               drawn from a prefix-free code, so character strings can be
//               recovered from phonemes without boundaries.
//   lang beta:  words built from word pieces ("ke@@" continues, "la" ends a
//               word); each piece has 1-3 phonemes and every word ends in <wb>.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "dtx/ctc.hpp"
#include "dtx/tensor.hpp"

namespace dtx::synth {

enum class Lang { alpha, beta };
enum class Mix { alpha_only, beta_only, code_switch };

std::string mix_name(Mix mix);
Mix parse_mix(const std::string& name);

// Output-unit vocabulary: pad, sos, eos, then alpha characters, then beta pieces.
class TargetVocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kSos = 1;
  static constexpr int kEos = 2;

  TargetVocab();
  int add(const std::string& unit, Lang lang);

  int id(const std::string& unit) const;
  bool contains(const std::string& unit) const { return ids_.count(unit) != 0; }
  const std::string& unit(int id) const;
  Lang lang(int id) const;
  bool is_special(int id) const { return id <= kEos; }
  std::size_t size() const { return units_.size(); }

 private:
  std::vector<std::string> units_;
  std::vector<Lang> langs_;
  std::unordered_map<std::string, int> ids_;
};

bool is_continuation_piece(const std::string& unit);

struct Lexicon {
  ctc::PhonemeInventory phonemes;
  TargetVocab vocab;
  std::vector<std::string> alpha_phonemes;
  std::vector<std::string> beta_phonemes;
  std::map<int, ctc::PhonemeSeq> pronunciation;  // target unit id -> phonemes (no <wb>)
  std::vector<int> alpha_units;
  std::vector<std::vector<int>> beta_words;  // piece id sequences

  std::string word_text(const std::vector<int>& pieces) const;
};

struct LexiconConfig {
  std::uint64_t seed = 1;
  std::size_t alpha_phonemes = 24;
  std::size_t beta_phonemes = 16;
  std::size_t alpha_chars = 40;
  std::size_t beta_words = 30;
  std::size_t beta_pieces = 50;
};

Lexicon build_lexicon(const LexiconConfig& cfg);

// Concatenated unit pronunciations with <wb> after every complete beta word.
// Throws InputError naming the first unit missing from the lexicon.
ctc::PhonemeSeq text_to_phonemes(const std::vector<int>& target, const Lexicon& lexicon);

// Per target unit language tags.
std::vector<Lang> unit_languages(const std::vector<int>& target, const Lexicon& lexicon);

// Uniform sampling of tokens (alpha characters or beta words); a token is
// beta with probability `beta_share` in code-switch mode, and code-switch
// sentences always contain both languages.
std::vector<int> sample_sentence(std::uint64_t seed, Mix mix, std::size_t min_tokens,
                                 std::size_t max_tokens, const Lexicon& lexicon,
                                 double beta_share = 0.3);

// Unit-norm prototype per phoneme id (index 0, the blank, is unused).
struct Prototypes {
  std::size_t dim = 0;
  std::vector<std::vector<double>> vectors;
};

Prototypes make_prototypes(std::uint64_t seed, std::size_t classes, std::size_t dim,
                           double min_distance = 0.8);

// Each phoneme lasts d in {2, 3, 4} steps of `frames_per_step` frames; every
// frame is the prototype plus N(0, noise_sigma^2) per element.
Tensor synthesize_features(const ctc::PhonemeSeq& phonemes, std::uint64_t seed, double noise_sigma,
                           const Prototypes& prototypes, std::size_t frames_per_step = 1);

struct Utterance {
  std::string id;
  Mix mix = Mix::code_switch;
  std::vector<int> target;  // unit ids without sos/eos
  ctc::PhonemeSeq phonemes;
  Tensor features;  // [T, feat_dim]; undefined for text-only entries
};

struct CorpusConfig {
  LexiconConfig lexicon;
  std::uint64_t seed = 7;
  std::size_t feat_dim = 16;
  double noise_sigma = 0.3;
  std::size_t frames_per_step = 4;
  std::size_t min_tokens = 3;
  std::size_t max_tokens = 8;
  double beta_share = 0.3;
  std::size_t train_cs = 2000;
  std::size_t train_alpha = 3000;
  std::size_t train_beta = 3000;
  std::size_t text_cs = 2000;  // unpaired code-switch text (no audio)
  std::size_t dev = 200;
  std::size_t test = 200;
};

struct Corpus {
  CorpusConfig config;
  Lexicon lexicon;
  Prototypes prototypes;
  std::vector<Utterance> train_cs, train_alpha, train_beta, text_cs, dev, test;
};

// Sentences are disjoint across every subset. Dev and test are code-switched.
Corpus build_corpus(const CorpusConfig& cfg);

// Manifest lines: {"id", "mix", "features": [[...], ...] | "relative/path.json" | null,
//                  "phonemes": [symbols], "target": [units], "langs": ["alpha"|"beta", ...]}
void write_manifest(const std::filesystem::path& path, const std::vector<Utterance>& utts,
                    const Lexicon& lexicon);
std::vector<Utterance> read_manifest(const std::filesystem::path& path, const Lexicon& lexicon);

// `unit TAB phoneme phoneme ...` per line, preceded by '#'-prefixed header
// lines listing the phoneme sets and beta words.
void write_lexicon(const std::filesystem::path& path, const Lexicon& lexicon);
Lexicon read_lexicon(const std::filesystem::path& path);

// Writes every subset plus lexicon.txt into `dir`.
void write_corpus(const std::filesystem::path& dir, const Corpus& corpus);

}  // namespace dtx::synth
