#pragma once
// Error rates over mixed alpha-character / beta-word sequences, and a
// generic length-wise beam search.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dtx/ctc.hpp"
#include "dtx/synth.hpp"

namespace dtx::eval {

enum class EditOp { match, substitution, insertion, deletion };

struct AlignedOp {
  EditOp op;
  std::ptrdiff_t ref;  // -1 for insertions
  std::ptrdiff_t hyp;  // -1 for deletions
};

struct EditResult {
  std::size_t distance = 0;
  std::size_t substitutions = 0;
  std::size_t insertions = 0;
  std::size_t deletions = 0;
  std::vector<AlignedOp> alignment;  // in sequence order
};

// Unit-cost Levenshtein. Backtrace prefers diagonal moves, then deletions,
// then insertions.
template <class T>
EditResult edit_distance(const std::vector<T>& ref, const std::vector<T>& hyp);

struct MixedUnit {
  std::string symbol;
  synth::Lang lang;
  bool operator==(const MixedUnit&) const = default;
};

// Alpha ids become characters; beta pieces are merged into words ("ke@@ la"
// -> "kela"). Special ids are dropped. A continuation piece that is not
// followed by more beta pieces is closed as a word on its own and counted in
// `dangling` (if given).
std::vector<MixedUnit> to_mixed_units(const std::vector<int>& target, const synth::TargetVocab& vocab,
                                      std::size_t* dangling = nullptr);

struct ErrorCounts {
  std::size_t ref_units = 0;
  std::size_t substitutions = 0;
  std::size_t insertions = 0;
  std::size_t deletions = 0;

  std::size_t errors() const { return substitutions + insertions + deletions; }
  double rate() const;  // errors / ref_units (0 when both are 0)
  ErrorCounts& operator+=(const ErrorCounts& o);
};

// Overall counts plus the alpha (CER) / beta (WER) split. Substitutions and
// deletions take the language of the aligned reference unit; insertions take
// the language of the next reference unit, or the previous one at the end of
// the sequence (the hypothesis unit's own language when the reference is empty).
struct EvalReport {
  std::size_t utterances = 0;
  ErrorCounts all, alpha, beta;
  std::size_t dangling_pieces = 0;

  double mer() const { return all.rate(); }
  double cer() const { return alpha.rate(); }
  double wer() const { return beta.rate(); }
  std::string table() const;
  std::string json() const;
};

EvalReport score_units(const std::vector<std::vector<MixedUnit>>& refs,
                       const std::vector<std::vector<MixedUnit>>& hyps);

EvalReport mer(const std::vector<std::vector<int>>& refs, const std::vector<std::vector<int>>& hyps,
               const synth::TargetVocab& vocab);

// Phoneme error rate; `<wb>` is removed from both sides when `include_wb` is false.
ErrorCounts per(const std::vector<ctc::PhonemeSeq>& refs, const std::vector<ctc::PhonemeSeq>& hyps,
                const ctc::PhonemeInventory& inventory, bool include_wb = true);

// Next-token log-probabilities for a prefix that starts with sos.
using StepScorer = std::function<std::vector<double>(const std::vector<int>& prefix)>;

struct BeamOptions {
  std::size_t beam = 10;
  std::size_t max_len = 64;
  int sos = 1;
  int eos = 2;
  bool length_normalize = true;
};

struct DecodeResult {
  std::vector<int> tokens;  // without sos / eos
  double log_prob = 0.0;    // sum of token log-probabilities, eos included
  double score = 0.0;       // ranking score (log_prob / steps when normalised)
  bool finished = true;     // false: no eos within max_len, best partial returned
};

DecodeResult beam_decode(const StepScorer& scorer, const BeamOptions& options);

}  // namespace dtx::eval
