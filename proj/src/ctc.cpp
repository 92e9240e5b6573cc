#include "dtx/ctc.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "dtx/ops.hpp"

namespace dtx::ctc {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kInf = std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}
}  // namespace

PhonemeInventory::PhonemeInventory(const std::vector<std::string>& phonemes) {
  symbols_.push_back(kBlankSymbol);
  ids_[kBlankSymbol] = kBlank;
  for (const auto& p : phonemes) {
    if (p == kBlankSymbol) throw InputError("phoneme inventory may not list the blank symbol");
    if (!ids_.emplace(p, static_cast<int>(symbols_.size())).second)
      throw InputError("duplicate phoneme symbol: " + p);
    if (p == kWordBoundary) wb_ = static_cast<int>(symbols_.size());
    symbols_.push_back(p);
  }
  if (wb_ < 0) throw InputError("phoneme inventory lacks the <wb> symbol");
}

int PhonemeInventory::id(const std::string& symbol) const {
  auto it = ids_.find(symbol);
  if (it == ids_.end()) throw InputError("unknown phoneme symbol: " + symbol);
  return it->second;
}

const std::string& PhonemeInventory::symbol(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= symbols_.size())
    throw InputError("phoneme id out of range: " + std::to_string(id));
  return symbols_[static_cast<std::size_t>(id)];
}

PhonemeSeq PhonemeInventory::encode(const std::vector<std::string>& symbols) const {
  PhonemeSeq out;
  out.reserve(symbols.size());
  for (const auto& s : symbols) {
    const int i = id(s);
    if (i == kBlank) throw InputError("phoneme sequences may not contain the blank");
    out.push_back(i);
  }
  return out;
}

std::vector<std::string> PhonemeInventory::decode(const PhonemeSeq& ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int i : ids) out.push_back(symbol(i));
  return out;
}

std::size_t min_frames(const PhonemeSeq& label) {
  std::size_t n = label.size();
  for (std::size_t i = 1; i < label.size(); ++i)
    if (label[i] == label[i - 1]) ++n;
  return n;
}

bool feasible(std::size_t frames, const PhonemeSeq& label) { return frames >= min_frames(label); }

Tensor ctc_loss(const Tensor& log_probs, const PhonemeSeq& label) {
  if (log_probs.ndim() != 2) throw DimensionError("ctc_loss: log_probs must be [T, classes]");
  const std::size_t frames = log_probs.dim(0), classes = log_probs.dim(1);
  for (int id : label)
    if (id <= kBlank || static_cast<std::size_t>(id) >= classes)
      throw InputError("ctc_loss: label id " + std::to_string(id) + " outside 1.." +
                       std::to_string(classes - 1));

  if (!feasible(frames, label)) {
    return Tensor::make({1}, {kInf}, {log_probs}, [](detail::Node&) {});
  }

  // Blank-extended label: blank, l1, blank, l2, ..., blank.
  const std::size_t states = 2 * label.size() + 1;
  std::vector<int> ext(states, kBlank);
  for (std::size_t i = 0; i < label.size(); ++i) ext[2 * i + 1] = label[i];

  std::vector<std::int64_t> shift1(states), shift2(states), first(states, -1);
  for (std::size_t s = 0; s < states; ++s) {
    shift1[s] = s >= 1 ? static_cast<std::int64_t>(s - 1) : -1;
    const bool skip = s >= 2 && ext[s] != kBlank && ext[s] != ext[s - 2];
    shift2[s] = skip ? static_cast<std::int64_t>(s - 2) : -1;
  }
  first[0] = 0;
  if (states > 1) first[1] = 1;

  auto emissions = [&](std::size_t t) {
    std::vector<std::int64_t> idx(states);
    for (std::size_t s = 0; s < states; ++s)
      idx[s] = static_cast<std::int64_t>(t * classes + static_cast<std::size_t>(ext[s]));
    return gather(log_probs, idx, 0.0);
  };

  Tensor alpha = gather(emissions(0), first, kNegInf);
  for (std::size_t t = 1; t < frames; ++t) {
    Tensor stay_or_step = logaddexp(alpha, gather(alpha, shift1, kNegInf));
    Tensor merged = logaddexp(stay_or_step, gather(alpha, shift2, kNegInf));
    alpha = add(merged, emissions(t));
  }
  std::vector<std::int64_t> ends{static_cast<std::int64_t>(states - 1)};
  if (states > 1) ends.push_back(static_cast<std::int64_t>(states - 2));
  return scale(log_sum_exp(gather(alpha, ends, kNegInf)), -1.0);
}

std::vector<int> frame_argmax(const Tensor& log_probs) {
  const std::size_t frames = log_probs.rows(), classes = log_probs.cols();
  std::vector<int> out(frames);
  for (std::size_t t = 0; t < frames; ++t) {
    const double* row = log_probs.data().data() + t * classes;
    out[t] = static_cast<int>(std::max_element(row, row + classes) - row);
  }
  return out;
}

PhonemeSeq greedy_collapse(std::span<const int> frame_ids) {
  PhonemeSeq out;
  int prev = -1;
  for (int id : frame_ids) {
    if (id != prev && id != kBlank) out.push_back(id);
    prev = id;
  }
  return out;
}

NBestList prefix_beam_search_nbest(const Tensor& log_probs, std::size_t beam, std::size_t n) {
  if (n < 1 || beam < n) throw ContractError("prefix beam search needs beam >= n >= 1");
  if (log_probs.ndim() != 2) throw DimensionError("prefix beam search: log_probs must be [T, classes]");
  const std::size_t frames = log_probs.dim(0), classes = log_probs.dim(1);

  struct Mass {
    double blank = kNegInf;
    double nonblank = kNegInf;
    double total() const { return log_add(blank, nonblank); }
  };
  using Beam = std::vector<std::pair<PhonemeSeq, Mass>>;

  Beam current{{PhonemeSeq{}, Mass{0.0, kNegInf}}};
  for (std::size_t t = 0; t < frames; ++t) {
    const double* lp = log_probs.data().data() + t * classes;
    std::map<PhonemeSeq, Mass> next;
    for (const auto& [prefix, mass] : current) {
      const double total = mass.total();
      {
        Mass& m = next[prefix];
        m.blank = log_add(m.blank, total + lp[kBlank]);
      }
      const int last = prefix.empty() ? -1 : prefix.back();
      for (std::size_t c = 1; c < classes; ++c) {
        const int sym = static_cast<int>(c);
        PhonemeSeq extended = prefix;
        extended.push_back(sym);
        Mass& e = next[extended];
        if (sym == last) {
          // A repeat only extends after an intervening blank; otherwise it merges.
          e.nonblank = log_add(e.nonblank, mass.blank + lp[c]);
          Mass& same = next[prefix];
          same.nonblank = log_add(same.nonblank, mass.nonblank + lp[c]);
        } else {
          e.nonblank = log_add(e.nonblank, total + lp[c]);
        }
      }
    }
    Beam ranked(next.begin(), next.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
      return a.second.total() > b.second.total();
    });
    if (ranked.size() > beam) ranked.resize(beam);
    current = std::move(ranked);
  }

  NBestList out;
  for (std::size_t i = 0; i < current.size() && out.size() < n; ++i)
    out.push_back({current[i].first, current[i].second.total()});
  return out;
}

}  // namespace dtx::ctc
