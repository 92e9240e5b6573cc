#pragma once
// Connectionist temporal classification: training criterion, greedy collapse
// and N-best prefix beam search. The blank symbol is always id 0.

#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "dtx/tensor.hpp"

namespace dtx::ctc {

inline constexpr int kBlank = 0;
inline constexpr const char* kBlankSymbol = "<blank>";
inline constexpr const char* kWordBoundary = "<wb>";

using PhonemeSeq = std::vector<int>;

// Symbol table for the A2P output layer: blank at 0, then phonemes; `<wb>`
// appears exactly once.
class PhonemeInventory {
 public:
  PhonemeInventory() = default;
  // `phonemes` excludes the blank. Throws InputError on duplicates or a
  // missing/duplicated word boundary.
  explicit PhonemeInventory(const std::vector<std::string>& phonemes);

  int id(const std::string& symbol) const;
  const std::string& symbol(int id) const;
  bool contains(const std::string& symbol) const { return ids_.count(symbol) != 0; }
  int word_boundary() const { return wb_; }
  // Output classes including the blank.
  std::size_t classes() const { return symbols_.size(); }
  const std::vector<std::string>& symbols() const { return symbols_; }

  PhonemeSeq encode(const std::vector<std::string>& symbols) const;
  std::vector<std::string> decode(const PhonemeSeq& ids) const;

 private:
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, int> ids_;
  int wb_ = -1;
};

struct Candidate {
  PhonemeSeq phonemes;
  double log_score = 0.0;
};

// Distinct sequences ordered by non-increasing score.
using NBestList = std::vector<Candidate>;

// Minimum frames for a label: one per symbol plus one blank between each
// pair of equal neighbours.
std::size_t min_frames(const PhonemeSeq& label);
bool feasible(std::size_t frames, const PhonemeSeq& label);

// -log P(label | log_probs) from the log-space forward recursion, built from
// differentiable ops. log_probs is [T, classes], each row a log-distribution.
// An infeasible label yields +inf with an all-zero gradient.
Tensor ctc_loss(const Tensor& log_probs, const PhonemeSeq& label);

std::vector<int> frame_argmax(const Tensor& log_probs);

// Merge adjacent repeats, then drop blanks.
PhonemeSeq greedy_collapse(std::span<const int> frame_ids);

// Prefix beam search keeping separate blank / non-blank ending mass per
// prefix, merged in log space; after each frame the `beam` best prefixes by
// total mass survive. Returns the best min(n, survivors) prefixes.
NBestList prefix_beam_search_nbest(const Tensor& log_probs, std::size_t beam, std::size_t n);

}  // namespace dtx::ctc
