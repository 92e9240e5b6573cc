#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"
#include "dtx/eval.hpp"
#include "dtx/random.hpp"

using namespace dtx;
using namespace dtx::eval;

namespace {

std::vector<std::string> split(const std::string& s) {
  std::istringstream is(s);
  std::vector<std::string> out;
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

std::vector<std::string> tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto p = line.find('\t', start);
    out.push_back(line.substr(start, p - start));
    if (p == std::string::npos) return out;
    start = p + 1;
  }
}

std::vector<std::string> data_lines(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty() && line[0] != '#') out.push_back(line);
  return out;
}

struct FixtureVocab {
  synth::TargetVocab vocab;
  std::vector<int> ids(const std::vector<std::string>& units) {
    std::vector<int> out;
    for (const auto& u : units) {
      if (!vocab.contains(u)) vocab.add(u, static_cast<unsigned char>(u[0]) < 0x80 ? synth::Lang::beta : synth::Lang::alpha);
      out.push_back(vocab.id(u));
    }
    return out;
  }
};

// Random next-token tables keyed by prefix.
struct ToyDecoder {
  std::size_t vocab;
  std::uint64_t seed;
  mutable std::map<std::vector<int>, std::vector<double>> cache;

  std::vector<double> operator()(const std::vector<int>& prefix) const {
    auto it = cache.find(prefix);
    if (it != cache.end()) return it->second;
    std::uint64_t h = seed;
    for (int t : prefix) h = h * 1000003u + static_cast<std::uint64_t>(t) + 1;
    std::mt19937_64 rng(h);
    std::vector<double> lp(vocab);
    double z = 0.0;
    for (double& x : lp) {
      x = 2.0 * standard_normal(rng);
      z += std::exp(x);
    }
    for (double& x : lp) x -= std::log(z);
    lp[1] = -INFINITY;  // sos is never emitted
    return cache[prefix] = lp;
  }
};

}  // namespace

TEST_CASE("edit distance") {
  using V = std::vector<std::string>;
  CHECK(edit_distance(V{"a", "b", "c"}, V{"a", "b", "c"}).distance == 0);
  const auto sub = edit_distance(V{"a", "b", "c"}, V{"a", "x", "c"});
  CHECK(sub.distance == 1);
  CHECK(sub.substitutions == 1);
  const auto ins = edit_distance(V{}, V{"a", "b", "c"});
  CHECK(ins.distance == 3);
  CHECK(ins.insertions == 3);
  const auto del = edit_distance(V{"a", "b"}, V{});
  CHECK(del.deletions == 2);
  // Diagonal moves win ties: "ab" -> "ba" is two substitutions, not del + ins.
  const auto swap = edit_distance(V{"a", "b"}, V{"b", "a"});
  CHECK(swap.substitutions == 2);

  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<int> a(static_cast<std::size_t>(uniform_int(rng, 0, 8))), b(static_cast<std::size_t>(uniform_int(rng, 0, 8)));
    for (int& x : a) x = static_cast<int>(uniform_int(rng, 0, 3));
    for (int& x : b) x = static_cast<int>(uniform_int(rng, 0, 3));
    const auto ab = edit_distance(a, b);
    const auto ba = edit_distance(b, a);
    CHECK(ab.distance == ba.distance);
    CHECK(ab.substitutions + ab.insertions + ab.deletions == ab.distance);
    CHECK(ab.distance >= (a.size() > b.size() ? a.size() - b.size() : b.size() - a.size()));
    CHECK(ab.distance <= std::max(a.size(), b.size()));
    // The alignment replays a into b.
    std::vector<int> rebuilt;
    std::size_t consumed = 0;
    for (const auto& op : ab.alignment) {
      if (op.op != EditOp::insertion) ++consumed;
      if (op.op != EditOp::deletion) rebuilt.push_back(b[static_cast<std::size_t>(op.hyp)]);
    }
    CHECK(consumed == a.size());
    CHECK(rebuilt == b);
  }
}

TEST_CASE("mixed units") {
  FixtureVocab fv;
  const auto alpha = fv.ids({"我", "爱", "你"});
  const auto units = to_mixed_units(alpha, fv.vocab);
  REQUIRE(units.size() == 3);
  CHECK(units[1] == MixedUnit{"爱", synth::Lang::alpha});

  CHECK(to_mixed_units(fv.ids({"he@@", "llo"}), fv.vocab) == std::vector<MixedUnit>{{"hello", synth::Lang::beta}});

  std::size_t dangling = 0;
  const auto odd = to_mixed_units(fv.ids({"he@@", "我", "wor@@"}), fv.vocab, &dangling);
  CHECK(odd == std::vector<MixedUnit>{{"he", synth::Lang::beta}, {"我", synth::Lang::alpha}, {"wor", synth::Lang::beta}});
  CHECK(dangling == 2);

  std::vector<int> with_specials{synth::TargetVocab::kSos};
  for (int id : alpha) with_specials.push_back(id);
  with_specials.push_back(synth::TargetVocab::kEos);
  CHECK(to_mixed_units(with_specials, fv.vocab) == units);
}

TEST_CASE("fixture suite against the independent scorer") {
  const auto cases = data_lines(DTX_FIXTURE_DIR "/mer_cases.tsv");
  const auto expected = data_lines(DTX_FIXTURE_DIR "/mer_expected.tsv");
  REQUIRE(cases.size() == 20);
  REQUIRE(expected.size() == 20);
  FixtureVocab fv;
  std::vector<std::vector<int>> refs, hyps;
  EvalReport total_expect;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const auto cols = tabs(cases[i]);
    REQUIRE(cols.size() == 3);
    const auto ref = fv.ids(split(cols[0]));
    const auto hyp = fv.ids(split(cols[1]));
    refs.push_back(ref);
    hyps.push_back(hyp);

    std::vector<std::string> tokens;
    for (const auto& u : to_mixed_units(ref, fv.vocab)) tokens.push_back(u.symbol);
    CHECK_MESSAGE(tokens == split(cols[2]), "case " << i);

    const auto exp_cols = tabs(expected[i]);
    REQUIRE(exp_cols.size() == 4);
    auto parse = [](const std::string& s) {
      std::istringstream is(s);
      ErrorCounts c;
      is >> c.ref_units >> c.substitutions >> c.insertions >> c.deletions;
      return c;
    };
    const ErrorCounts e_all = parse(exp_cols[1]), e_alpha = parse(exp_cols[2]), e_beta = parse(exp_cols[3]);
    const EvalReport r = mer({ref}, {hyp}, fv.vocab);
    auto same = [](const ErrorCounts& a, const ErrorCounts& b) {
      return a.ref_units == b.ref_units && a.substitutions == b.substitutions && a.insertions == b.insertions &&
             a.deletions == b.deletions;
    };
    CHECK_MESSAGE(same(r.all, e_all), "case " << i);
    CHECK_MESSAGE(same(r.alpha, e_alpha), "case " << i);
    CHECK_MESSAGE(same(r.beta, e_beta), "case " << i);
    CHECK(r.alpha.errors() + r.beta.errors() == r.all.errors());
    total_expect.all += e_all;
    total_expect.alpha += e_alpha;
    total_expect.beta += e_beta;
  }
  const EvalReport all = mer(refs, hyps, fv.vocab);
  CHECK(all.utterances == 20);
  CHECK(std::abs(all.mer() - total_expect.all.rate()) < 1e-15);
  CHECK(std::abs(all.cer() - total_expect.alpha.rate()) < 1e-15);
  CHECK(std::abs(all.wer() - total_expect.beta.rate()) < 1e-15);
}

TEST_CASE("constructed rates") {
  FixtureVocab fv;
  const auto ref = fv.ids(split("我 爱 he@@ llo 你 好 code 的 人 是 他"));
  auto hyp = fv.ids(split("我 爱 wor@@ ld 你 好 code 的 人 是 他"));
  const EvalReport r = mer({ref}, {hyp}, fv.vocab);
  CHECK(r.all.ref_units == 10);
  CHECK(std::abs(r.mer() - 0.1) < 1e-15);
  CHECK(std::abs(r.wer() - 0.5) < 1e-15);
  CHECK(r.cer() == 0.0);

  const EvalReport same = mer({ref}, {ref}, fv.vocab);
  CHECK(same.mer() == 0.0);
  CHECK(same.cer() == 0.0);
  CHECK(same.wer() == 0.0);
  CHECK_THROWS_AS(mer({ref}, {}, fv.vocab), InputError);

  const auto j = nlohmann::json::parse(r.json());
  CHECK(j["mer"].get<double>() == r.mer());
  CHECK(j["beta"]["substitutions"].get<std::size_t>() == 1);
  CHECK(r.table().find("MER") != std::string::npos);
}

TEST_CASE("phoneme error rate") {
  ctc::PhonemeInventory inv({"<wb>", "p", "q"});
  const int wb = inv.word_boundary(), p = inv.id("p"), q = inv.id("q");
  const std::vector<ctc::PhonemeSeq> ref{{p, q, wb}}, hyp{{p, q}};
  CHECK(per(ref, hyp, inv, true).rate() == doctest::Approx(1.0 / 3.0));
  CHECK(per(ref, hyp, inv, false).rate() == 0.0);
}

TEST_CASE("beam decode") {
  SUBCASE("beam 1 equals greedy") {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
      ToyDecoder dec{6, seed, {}};
      std::vector<int> greedy{1};
      double lp = 0.0;
      bool done = false;
      for (std::size_t step = 0; step < 12 && !done; ++step) {
        const auto p = dec(greedy);
        const int best = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
        lp += p[static_cast<std::size_t>(best)];
        if (best == 2) done = true;
        else greedy.push_back(best);
      }
      const auto r = beam_decode(dec, {1, 12, 1, 2, true});
      CHECK(r.tokens == std::vector<int>(greedy.begin() + 1, greedy.end()));
      CHECK(r.finished == done);
      CHECK(std::abs(r.log_prob - lp) < 1e-12);
    }
  }
  SUBCASE("two-step toy decoders match exhaustive search") {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
      const std::size_t v = 7;
      ToyDecoder dec{v, 100 + seed, {}};
      // Two content tokens (eos and sos excluded), then eos with probability 1.
      auto two_step = [&](const std::vector<int>& prefix) {
        std::vector<double> lp(v, -INFINITY);
        if (prefix.size() == 3) {
          lp[2] = 0.0;
          return lp;
        }
        lp = dec(prefix);
        lp[2] = -INFINITY;
        return lp;
      };
      double best = -INFINITY;
      std::vector<int> arg;
      for (int a = 3; a < static_cast<int>(v); ++a)
        for (int b = 0; b < static_cast<int>(v); ++b) {
          if (b == 1 || b == 2 || a == 0) continue;
          const double s = two_step({1})[static_cast<std::size_t>(a)] + two_step({1, a})[static_cast<std::size_t>(b)];
          if (s > best) {
            best = s;
            arg = {a, b};
          }
        }
      for (int a : {0}) {
        for (int b = 0; b < static_cast<int>(v); ++b) {
          if (b == 1 || b == 2) continue;
          const double s = two_step({1})[static_cast<std::size_t>(a)] + two_step({1, a})[static_cast<std::size_t>(b)];
          if (s > best) {
            best = s;
            arg = {a, b};
          }
        }
      }
      for (bool normalize : {false, true}) {
        const auto r = beam_decode(two_step, {v, 4, 1, 2, normalize});
        CHECK(r.finished);
        CHECK(r.tokens == arg);
        CHECK(std::abs(r.log_prob - best) < 1e-12);
      }
    }
  }
  SUBCASE("determinism and the unfinished flag") {
    ToyDecoder dec{5, 7, {}};
    const auto a = beam_decode(dec, {4, 10, 1, 2, true});
    const auto b = beam_decode(dec, {4, 10, 1, 2, true});
    CHECK(a.tokens == b.tokens);
    CHECK(a.score == b.score);
    auto never_end = [&](const std::vector<int>& prefix) {
      auto lp = dec(prefix);
      lp[2] = -INFINITY;
      return lp;
    };
    const auto r = beam_decode(never_end, {3, 5, 1, 2, true});
    CHECK_FALSE(r.finished);
    CHECK(r.tokens.size() == 5);
  }
  SUBCASE("length normalisation") {
    // eos at once: log 0.4 (per step -0.92); one token then eos: log 0.3 (per step -0.60).
    auto dec = [](const std::vector<int>& prefix) {
      std::vector<double> lp(4, -INFINITY);
      if (prefix.size() == 1) {
        lp[2] = std::log(0.4);
        lp[3] = std::log(0.6);
      } else {
        lp[2] = std::log(0.5);
        lp[3] = std::log(0.5);
      }
      return lp;
    };
    CHECK(beam_decode(dec, {4, 5, 1, 2, false}).tokens.empty());
    CHECK(beam_decode(dec, {4, 5, 1, 2, true}).tokens == std::vector<int>{3});
  }
}

TEST_CASE("beam width and best model score") {
  // Once the beam covers every prefix the search is exact, so widening it
  // further cannot lower the best score.
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    ToyDecoder dec{4, 1000 + seed, {}};
    const auto exact = beam_decode(dec, {64, 3, 1, 2, false});
    for (std::size_t beam : {128u, 256u}) CHECK(beam_decode(dec, {beam, 3, 1, 2, false}).log_prob == exact.log_prob);
    REQUIRE(exact.finished);
    for (std::size_t beam : {1u, 2u, 4u, 8u}) {
      const auto r = beam_decode(dec, {beam, 3, 1, 2, false});
      if (r.finished) CHECK(r.log_prob <= exact.log_prob);
    }
  }
  // Below that point beam search is not monotone in the width: here the
  // greedy path is pruned by two prefixes that later score worse.
  ToyDecoder dec{5, 1070, {}};
  const auto b1 = beam_decode(dec, {1, 6, 1, 2, false});
  const auto b2 = beam_decode(dec, {2, 6, 1, 2, false});
  CHECK(b1.finished);
  CHECK(b2.finished);
  CHECK(b2.log_prob < b1.log_prob);
}
