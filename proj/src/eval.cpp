#include "dtx/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "json.hpp"
#include "dtx/errors.hpp"

namespace dtx::eval {

template <class T>
EditResult edit_distance(const std::vector<T>& ref, const std::vector<T>& hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<std::size_t> dp((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return dp[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = i;
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = j;
  for (std::size_t i = 1; i <= n; ++i)
    for (std::size_t j = 1; j <= m; ++j)
      at(i, j) = std::min({at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1), at(i - 1, j) + 1, at(i, j - 1) + 1});

  EditResult r;
  r.distance = at(n, m);
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && at(i, j) == at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1)) {
      const bool same = ref[i - 1] == hyp[j - 1];
      r.alignment.push_back({same ? EditOp::match : EditOp::substitution, static_cast<std::ptrdiff_t>(i - 1),
                             static_cast<std::ptrdiff_t>(j - 1)});
      if (!same) ++r.substitutions;
      --i;
      --j;
    } else if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
      r.alignment.push_back({EditOp::deletion, static_cast<std::ptrdiff_t>(i - 1), -1});
      ++r.deletions;
      --i;
    } else {
      r.alignment.push_back({EditOp::insertion, -1, static_cast<std::ptrdiff_t>(j - 1)});
      ++r.insertions;
      --j;
    }
  }
  std::reverse(r.alignment.begin(), r.alignment.end());
  return r;
}

template EditResult edit_distance<int>(const std::vector<int>&, const std::vector<int>&);
template EditResult edit_distance<std::string>(const std::vector<std::string>&, const std::vector<std::string>&);
template EditResult edit_distance<MixedUnit>(const std::vector<MixedUnit>&, const std::vector<MixedUnit>&);

std::vector<MixedUnit> to_mixed_units(const std::vector<int>& target, const synth::TargetVocab& vocab,
                                      std::size_t* dangling) {
  std::vector<MixedUnit> out;
  std::string word;
  bool open = false;
  auto close = [&](bool incomplete) {
    if (!open) return;
    out.push_back({word, synth::Lang::beta});
    if (incomplete && dangling) ++*dangling;
    word.clear();
    open = false;
  };
  for (int id : target) {
    if (vocab.is_special(id)) continue;
    const std::string& u = vocab.unit(id);
    if (vocab.lang(id) == synth::Lang::alpha) {
      close(true);
      out.push_back({u, synth::Lang::alpha});
    } else if (synth::is_continuation_piece(u)) {
      word += u.substr(0, u.size() - 2);
      open = true;
    } else {
      word += u;
      open = true;
      close(false);
    }
  }
  close(true);
  return out;
}

double ErrorCounts::rate() const {
  if (ref_units == 0) return errors() == 0 ? 0.0 : INFINITY;
  return static_cast<double>(errors()) / static_cast<double>(ref_units);
}

ErrorCounts& ErrorCounts::operator+=(const ErrorCounts& o) {
  ref_units += o.ref_units;
  substitutions += o.substitutions;
  insertions += o.insertions;
  deletions += o.deletions;
  return *this;
}

EvalReport score_units(const std::vector<std::vector<MixedUnit>>& refs,
                       const std::vector<std::vector<MixedUnit>>& hyps) {
  if (refs.size() != hyps.size())
    throw InputError("reference/hypothesis count mismatch: " + std::to_string(refs.size()) + " vs " +
                     std::to_string(hyps.size()));
  EvalReport rep;
  rep.utterances = refs.size();
  for (std::size_t u = 0; u < refs.size(); ++u) {
    const auto& ref = refs[u];
    const auto& hyp = hyps[u];
    for (const auto& unit : ref) {
      ++rep.all.ref_units;
      ++(unit.lang == synth::Lang::alpha ? rep.alpha : rep.beta).ref_units;
    }
    const EditResult e = edit_distance(ref, hyp);
    std::size_t next_ref = 0;  // index of the next reference unit not yet aligned
    for (const auto& op : e.alignment) {
      if (op.op == EditOp::match) {
        next_ref = static_cast<std::size_t>(op.ref) + 1;
        continue;
      }
      synth::Lang lang;
      if (op.op == EditOp::insertion) {
        if (next_ref < ref.size())
          lang = ref[next_ref].lang;
        else if (!ref.empty())
          lang = ref.back().lang;
        else
          lang = hyp[static_cast<std::size_t>(op.hyp)].lang;
      } else {
        lang = ref[static_cast<std::size_t>(op.ref)].lang;
        next_ref = static_cast<std::size_t>(op.ref) + 1;
      }
      ErrorCounts& bucket = lang == synth::Lang::alpha ? rep.alpha : rep.beta;
      switch (op.op) {
        case EditOp::substitution:
          ++bucket.substitutions;
          ++rep.all.substitutions;
          break;
        case EditOp::insertion:
          ++bucket.insertions;
          ++rep.all.insertions;
          break;
        case EditOp::deletion:
          ++bucket.deletions;
          ++rep.all.deletions;
          break;
        case EditOp::match:
          break;
      }
    }
  }
  return rep;
}

EvalReport mer(const std::vector<std::vector<int>>& refs, const std::vector<std::vector<int>>& hyps,
               const synth::TargetVocab& vocab) {
  if (refs.size() != hyps.size())
    throw InputError("reference/hypothesis count mismatch: " + std::to_string(refs.size()) + " vs " +
                     std::to_string(hyps.size()));
  std::vector<std::vector<MixedUnit>> r, h;
  std::size_t dangling = 0;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    r.push_back(to_mixed_units(refs[i], vocab));
    h.push_back(to_mixed_units(hyps[i], vocab, &dangling));
  }
  EvalReport rep = score_units(r, h);
  rep.dangling_pieces = dangling;
  return rep;
}

ErrorCounts per(const std::vector<ctc::PhonemeSeq>& refs, const std::vector<ctc::PhonemeSeq>& hyps,
                const ctc::PhonemeInventory& inventory, bool include_wb) {
  if (refs.size() != hyps.size()) throw InputError("reference/hypothesis count mismatch");
  const int wb = inventory.word_boundary();
  auto strip = [&](const ctc::PhonemeSeq& s) {
    if (include_wb) return s;
    ctc::PhonemeSeq out;
    for (int p : s)
      if (p != wb) out.push_back(p);
    return out;
  };
  ErrorCounts c;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto r = strip(refs[i]);
    const auto e = edit_distance(r, strip(hyps[i]));
    c.ref_units += r.size();
    c.substitutions += e.substitutions;
    c.insertions += e.insertions;
    c.deletions += e.deletions;
  }
  return c;
}

std::string EvalReport::table() const {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "utterances " << utterances << "\n";
  os << "           rate%    ref    sub    ins    del\n";
  auto row = [&](const char* name, const ErrorCounts& c) {
    os << std::left << std::setw(9) << name << std::right << std::setw(8) << 100.0 * c.rate() << std::setw(7)
       << c.ref_units << std::setw(7) << c.substitutions << std::setw(7) << c.insertions << std::setw(7)
       << c.deletions << "\n";
  };
  row("MER", all);
  row("CER(a)", alpha);
  row("WER(b)", beta);
  return os.str();
}

std::string EvalReport::json() const {
  auto counts = [](const ErrorCounts& c) {
    return nlohmann::json{{"rate", c.rate()},
                          {"ref_units", c.ref_units},
                          {"substitutions", c.substitutions},
                          {"insertions", c.insertions},
                          {"deletions", c.deletions}};
  };
  nlohmann::json j{{"utterances", utterances},
                   {"mer", mer()},
                   {"cer_alpha", cer()},
                   {"wer_beta", wer()},
                   {"all", counts(all)},
                   {"alpha", counts(alpha)},
                   {"beta", counts(beta)},
                   {"dangling_pieces", dangling_pieces}};
  return j.dump(2);
}

namespace {

struct Hyp {
  std::vector<int> prefix;  // starts with sos
  double log_prob = 0.0;
};

double rank(double log_prob, std::size_t steps, bool normalize) {
  return normalize ? log_prob / static_cast<double>(std::max<std::size_t>(steps, 1)) : log_prob;
}

}  // namespace

DecodeResult beam_decode(const StepScorer& scorer, const BeamOptions& opt) {
  if (opt.beam == 0) throw ContractError("beam must be >= 1");
  std::vector<Hyp> live{{{opt.sos}, 0.0}};
  std::vector<DecodeResult> finished;

  for (std::size_t step = 0; step < opt.max_len && !live.empty() && finished.size() < opt.beam; ++step) {
    struct Expansion {
      std::size_t parent;
      int token;
      double log_prob;
    };
    std::vector<Expansion> expansions;
    for (std::size_t h = 0; h < live.size(); ++h) {
      const auto lp = scorer(live[h].prefix);
      for (std::size_t v = 0; v < lp.size(); ++v) {
        if (static_cast<int>(v) == opt.sos || std::isinf(lp[v])) continue;
        expansions.push_back({h, static_cast<int>(v), live[h].log_prob + lp[v]});
      }
    }
    // Expansions of one step share a length, so raw log-probability orders them.
    std::stable_sort(expansions.begin(), expansions.end(),
                     [](const Expansion& a, const Expansion& b) { return a.log_prob > b.log_prob; });
    // Finished hypotheses keep their beam slot, so the live beam shrinks.
    const std::size_t capacity = opt.beam - finished.size();
    std::vector<Hyp> next;
    for (const auto& e : expansions) {
      if (next.size() >= capacity) break;
      if (e.token == opt.eos) {
        DecodeResult r;
        r.tokens.assign(live[e.parent].prefix.begin() + 1, live[e.parent].prefix.end());
        r.log_prob = e.log_prob;
        r.score = rank(e.log_prob, step + 1, opt.length_normalize);
        finished.push_back(std::move(r));
        next.push_back({{}, -INFINITY});
        continue;
      }
      Hyp h{live[e.parent].prefix, e.log_prob};
      h.prefix.push_back(e.token);
      next.push_back(std::move(h));
    }
    live.clear();
    for (auto& h : next)
      if (!h.prefix.empty()) live.push_back(std::move(h));
    // Stop once no live hypothesis can still outrank the best finished one
    // under raw scoring (log-probabilities only decrease).
    if (!opt.length_normalize && !finished.empty() && !live.empty()) {
      double best = -INFINITY;
      for (const auto& f : finished) best = std::max(best, f.score);
      bool any = false;
      for (const auto& h : live) any = any || h.log_prob > best;
      if (!any) live.clear();
    }
  }

  if (!finished.empty()) {
    return *std::max_element(finished.begin(), finished.end(), [](const DecodeResult& a, const DecodeResult& b) {
      return a.score < b.score;
    });
  }
  DecodeResult r;
  r.finished = false;
  if (live.empty()) return r;
  const auto best = std::max_element(live.begin(), live.end(),
                                     [](const Hyp& a, const Hyp& b) { return a.log_prob < b.log_prob; });
  r.tokens.assign(best->prefix.begin() + 1, best->prefix.end());
  r.log_prob = best->log_prob;
  r.score = rank(best->log_prob, r.tokens.size(), opt.length_normalize);
  return r;
}

}  // namespace dtx::eval
