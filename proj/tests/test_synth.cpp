#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "dtx/ctc.hpp"
#include "dtx/synth.hpp"
#include "test_helpers.hpp"

using namespace dtx;
using namespace dtx::synth;

namespace {

const Lexicon& lexicon() {
  static const Lexicon lex = build_lexicon({});
  return lex;
}

// Greedy phoneme-to-text inverter: alpha runs are decoded with the
// prefix-free code, beta runs are read up to <wb> and looked up as words.
std::vector<int> invert(const ctc::PhonemeSeq& phonemes, const Lexicon& lex) {
  std::map<ctc::PhonemeSeq, int> alpha_code;
  for (int u : lex.alpha_units) alpha_code[lex.pronunciation.at(u)] = u;
  std::map<ctc::PhonemeSeq, std::vector<int>> beta_code;
  for (const auto& w : lex.beta_words) {
    ctc::PhonemeSeq p;
    for (int piece : w) p.insert(p.end(), lex.pronunciation.at(piece).begin(), lex.pronunciation.at(piece).end());
    beta_code[p] = w;
  }
  std::set<int> alpha_ph;
  for (const auto& s : lex.alpha_phonemes) alpha_ph.insert(lex.phonemes.id(s));

  std::vector<int> out;
  std::size_t i = 0;
  while (i < phonemes.size()) {
    if (alpha_ph.count(phonemes[i])) {
      ctc::PhonemeSeq cur{phonemes[i++]};
      while (!alpha_code.count(cur)) cur.push_back(phonemes.at(i++));
      out.push_back(alpha_code.at(cur));
    } else {
      ctc::PhonemeSeq cur;
      while (phonemes.at(i) != lex.phonemes.word_boundary()) cur.push_back(phonemes[i++]);
      ++i;
      const auto& w = beta_code.at(cur);
      out.insert(out.end(), w.begin(), w.end());
    }
  }
  return out;
}

std::size_t nearest(const std::vector<double>& frame, const Prototypes& protos) {
  std::size_t best = 1;
  double best_d = INFINITY;
  for (std::size_t c = 1; c < protos.vectors.size(); ++c) {
    double d = 0.0;
    for (std::size_t k = 0; k < protos.dim; ++k) d += (frame[k] - protos.vectors[c][k]) * (frame[k] - protos.vectors[c][k]);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

CorpusConfig small_config() {
  CorpusConfig cfg;
  cfg.train_cs = 60;
  cfg.train_alpha = 40;
  cfg.train_beta = 40;
  cfg.text_cs = 50;
  cfg.dev = 20;
  cfg.test = 20;
  return cfg;
}

}  // namespace

TEST_CASE("lexicon shape and disjoint phoneme sets") {
  const auto& lex = lexicon();
  CHECK(lex.phonemes.classes() == 1 + 1 + 24 + 16);
  CHECK(lex.vocab.size() == 3 + 40 + 50);
  CHECK(lex.alpha_units.size() == 40);
  CHECK(lex.beta_words.size() == 30);
  std::set<std::string> a(lex.alpha_phonemes.begin(), lex.alpha_phonemes.end());
  for (const auto& b : lex.beta_phonemes) CHECK(a.count(b) == 0);
  CHECK(a.count(ctc::kWordBoundary) == 0);

  for (const auto& [unit, pron] : lex.pronunciation) {
    REQUIRE(!pron.empty());
    const bool alpha = lex.vocab.lang(unit) == Lang::alpha;
    CHECK(pron.size() <= (alpha ? 2u : 3u));
    for (int p : pron) {
      const auto& sym = lex.phonemes.symbol(p);
      CHECK(a.count(sym) == (alpha ? 1u : 0u));
      CHECK(sym != ctc::kWordBoundary);
    }
  }
  // Every beta word ends in a word-final piece and only there.
  for (const auto& w : lex.beta_words) {
    for (std::size_t i = 0; i + 1 < w.size(); ++i) CHECK(is_continuation_piece(lex.vocab.unit(w[i])));
    CHECK_FALSE(is_continuation_piece(lex.vocab.unit(w.back())));
  }
}

TEST_CASE("lexicon determinism") {
  const Lexicon a = build_lexicon({});
  const Lexicon b = build_lexicon({});
  CHECK(a.pronunciation == b.pronunciation);
  CHECK(a.beta_words == b.beta_words);
  for (std::size_t i = 0; i < a.vocab.size(); ++i)
    CHECK(a.vocab.unit(static_cast<int>(i)) == b.vocab.unit(static_cast<int>(i)));
  LexiconConfig other;
  other.seed = 2;
  CHECK(build_lexicon(other).pronunciation != a.pronunciation);
}

TEST_CASE("text_to_phonemes") {
  const auto& lex = lexicon();
  const int c = lex.alpha_units[0];
  CHECK(text_to_phonemes({c}, lex) == lex.pronunciation.at(c));

  const auto& word = lex.beta_words[0];
  ctc::PhonemeSeq expect;
  for (int p : word) expect.insert(expect.end(), lex.pronunciation.at(p).begin(), lex.pronunciation.at(p).end());
  expect.push_back(lex.phonemes.word_boundary());
  CHECK(text_to_phonemes(word, lex) == expect);

  CHECK_THROWS_AS(text_to_phonemes({c, 9999}, lex), InputError);
  try {
    text_to_phonemes({TargetVocab::kEos}, lex);
    FAIL("expected an error");
  } catch (const InputError& e) {
    CHECK(std::string(e.what()).find("<eos>") != std::string::npos);
  }
}

TEST_CASE("greedy inverter recovers sampled text") {
  const auto& lex = lexicon();
  for (std::uint64_t s = 0; s < 500; ++s) {
    const Mix mix = static_cast<Mix>(s % 3);
    const auto text = sample_sentence(s, mix, 1, 10, lex);
    CHECK(invert(text_to_phonemes(text, lex), lex) == text);
  }
}

TEST_CASE("sample_sentence contracts") {
  const auto& lex = lexicon();
  CHECK(sample_sentence(42, Mix::code_switch, 3, 8, lex) == sample_sentence(42, Mix::code_switch, 3, 8, lex));
  for (std::uint64_t s = 0; s < 300; ++s) {
    const auto alpha = unit_languages(sample_sentence(s, Mix::alpha_only, 3, 8, lex), lex);
    CHECK(std::count(alpha.begin(), alpha.end(), Lang::beta) == 0);
    const auto beta = unit_languages(sample_sentence(s, Mix::beta_only, 3, 8, lex), lex);
    CHECK(std::count(beta.begin(), beta.end(), Lang::alpha) == 0);
    const auto cs = unit_languages(sample_sentence(s, Mix::code_switch, 1, 8, lex, 0.05), lex);
    CHECK(std::count(cs.begin(), cs.end(), Lang::alpha) > 0);
    CHECK(std::count(cs.begin(), cs.end(), Lang::beta) > 0);
  }
}

TEST_CASE("unit frequencies are uniform within 3 sigma") {
  // Aggregate check: Pearson chi-square within 3 sigma of its mean (k-1,
  // variance 2(k-1)). Individual counts get a Bonferroni-style 4 sigma bound.
  const auto& lex = lexicon();
  std::map<int, double> alpha_counts;
  std::map<std::vector<int>, double> word_counts;
  const double total = 10000.0;
  for (std::uint64_t s = 0; s < 10000; ++s) {
    alpha_counts[sample_sentence(1000000 + s, Mix::alpha_only, 1, 1, lex).at(0)] += 1.0;
    word_counts[sample_sentence(2000000 + s, Mix::beta_only, 1, 1, lex)] += 1.0;
  }
  auto check = [&](const auto& counts, std::size_t k) {
    REQUIRE(counts.size() == k);
    const double p = 1.0 / static_cast<double>(k);
    const double expect = total * p;
    double chi2 = 0.0;
    for (const auto& [unit, n] : counts) {
      chi2 += (n - expect) * (n - expect) / expect;
      CHECK(std::abs(n - expect) <= 4.0 * std::sqrt(total * p * (1.0 - p)));
    }
    const double dof = static_cast<double>(k - 1);
    CHECK(std::abs(chi2 - dof) <= 3.0 * std::sqrt(2.0 * dof));
  };
  check(alpha_counts, lex.alpha_units.size());
  check(word_counts, lex.beta_words.size());
}

TEST_CASE("prototypes are unit norm and separated") {
  const auto p = make_prototypes(3, 42, 16);
  CHECK(p.vectors.size() == 42);
  for (std::size_t c = 1; c < p.vectors.size(); ++c) {
    double n = 0.0;
    for (double x : p.vectors[c]) n += x * x;
    CHECK(std::abs(n - 1.0) < 1e-12);
    for (std::size_t o = 1; o < c; ++o) {
      double d = 0.0;
      for (std::size_t k = 0; k < 16; ++k) d += (p.vectors[c][k] - p.vectors[o][k]) * (p.vectors[c][k] - p.vectors[o][k]);
      CHECK(std::sqrt(d) >= 0.8);
    }
  }
}

TEST_CASE("synthesize_features") {
  const auto& lex = lexicon();
  const auto protos = make_prototypes(5, lex.phonemes.classes(), 16);
  const auto phon = text_to_phonemes(sample_sentence(3, Mix::code_switch, 3, 8, lex), lex);

  SUBCASE("noise-free frames equal prototypes") {
    const Tensor f = synthesize_features(phon, 11, 0.0, protos);
    ctc::PhonemeSeq frame_labels;
    for (std::size_t t = 0; t < f.rows(); ++t) {
      const std::vector<double> frame(f.data().begin() + static_cast<std::ptrdiff_t>(t * 16),
                                      f.data().begin() + static_cast<std::ptrdiff_t>((t + 1) * 16));
      const auto c = nearest(frame, protos);
      CHECK(frame == protos.vectors[c]);
      frame_labels.push_back(static_cast<int>(c));
    }
    auto merge = [](const ctc::PhonemeSeq& s) {
      ctc::PhonemeSeq out;
      for (int x : s)
        if (out.empty() || out.back() != x) out.push_back(x);
      return out;
    };
    CHECK(merge(frame_labels) == merge(phon));
  }
  SUBCASE("frame count bounds") {
    for (std::uint64_t s = 0; s < 50; ++s) {
      for (std::size_t fps : {1u, 4u}) {
        const Tensor f = synthesize_features(phon, s, 0.3, protos, fps);
        CHECK(f.rows() >= 2 * phon.size() * fps);
        CHECK(f.rows() <= 4 * phon.size() * fps);
        CHECK(f.rows() % fps == 0);
      }
    }
  }
  SUBCASE("same seed, same frames") {
    CHECK(testing::bitwise_equal(synthesize_features(phon, 9, 0.3, protos),
                                 synthesize_features(phon, 9, 0.3, protos)));
  }
  SUBCASE("nearest-prototype frame accuracy at sigma 0.1") {
    std::size_t correct = 0, total = 0;
    for (std::uint64_t s = 0; s < 100; ++s) {
      const auto p = text_to_phonemes(sample_sentence(s, Mix::code_switch, 3, 8, lex), lex);
      const Tensor f = synthesize_features(p, s, 0.1, protos);
      const Tensor clean = synthesize_features(p, s, 0.0, protos);
      for (std::size_t t = 0; t < f.rows(); ++t) {
        std::vector<double> frame(f.data().begin() + static_cast<std::ptrdiff_t>(t * 16),
                                  f.data().begin() + static_cast<std::ptrdiff_t>((t + 1) * 16));
        std::vector<double> truth(clean.data().begin() + static_cast<std::ptrdiff_t>(t * 16),
                                  clean.data().begin() + static_cast<std::ptrdiff_t>((t + 1) * 16));
        correct += nearest(frame, protos) == nearest(truth, protos);
        ++total;
      }
    }
    CHECK(static_cast<double>(correct) / static_cast<double>(total) >= 0.99);
  }
  CHECK_THROWS_AS(synthesize_features({}, 1, 0.1, protos), InputError);
}

TEST_CASE("corpus contracts") {
  const CorpusConfig cfg = small_config();
  const Corpus c = build_corpus(cfg);
  CHECK(c.train_cs.size() == 60);
  CHECK(c.dev.size() == 20);

  std::set<std::vector<int>> seen;
  std::size_t total = 0;
  for (const auto* subset : {&c.train_cs, &c.train_alpha, &c.train_beta, &c.text_cs, &c.dev, &c.test}) {
    for (const auto& u : *subset) {
      seen.insert(u.target);
      ++total;
      CHECK(u.phonemes == text_to_phonemes(u.target, c.lexicon));
      if (subset != &c.text_cs) {
        REQUIRE(u.features.defined());
        // Feasibility for CTC after 4x subsampling.
        const std::size_t frames = ((u.features.rows() - 1) / 2) / 2 + 1;
        CHECK(ctc::feasible(frames, u.phonemes));
      } else {
        CHECK_FALSE(u.features.defined());
      }
    }
  }
  CHECK(seen.size() == total);
  for (const auto& u : c.dev) CHECK(u.mix == Mix::code_switch);
  for (const auto& u : c.test) CHECK(u.mix == Mix::code_switch);

  const Corpus again = build_corpus(cfg);
  REQUIRE(again.dev.size() == c.dev.size());
  for (std::size_t i = 0; i < c.dev.size(); ++i) {
    CHECK(again.dev[i].target == c.dev[i].target);
    CHECK(testing::bitwise_equal(again.dev[i].features, c.dev[i].features));
  }
}

TEST_CASE("manifest and lexicon round-trip") {
  const Corpus c = build_corpus(small_config());
  const auto dir = std::filesystem::temp_directory_path() / "dtx_test_synth";
  std::filesystem::remove_all(dir);
  write_corpus(dir, c);

  const Lexicon lex = read_lexicon(dir / "lexicon.txt");
  CHECK(lex.pronunciation == c.lexicon.pronunciation);
  CHECK(lex.beta_words == c.lexicon.beta_words);
  CHECK(lex.alpha_units == c.lexicon.alpha_units);
  CHECK(lex.phonemes.symbols() == c.lexicon.phonemes.symbols());

  for (const auto& [name, subset] : {std::pair{"train_cs.jsonl", &c.train_cs}, {"text_cs.jsonl", &c.text_cs}}) {
    const auto back = read_manifest(dir / name, lex);
    REQUIRE(back.size() == subset->size());
    for (std::size_t i = 0; i < back.size(); ++i) {
      const auto& a = (*subset)[i];
      CHECK(back[i].id == a.id);
      CHECK(back[i].mix == a.mix);
      CHECK(back[i].target == a.target);
      CHECK(back[i].phonemes == a.phonemes);
      CHECK(back[i].features.defined() == a.features.defined());
      if (a.features.defined()) CHECK(testing::bitwise_equal(back[i].features, a.features));
    }
  }

  SUBCASE("feature file references") {
    std::ofstream(dir / "feat.json") << "[[1.5, 2.0], [3.0, -1.0]]";
    const auto unit = c.lexicon.vocab.unit(c.lexicon.alpha_units[0]);
    std::ofstream(dir / "ref.jsonl") << R"({"id":"x","mix":"alpha","features":"feat.json","target":[")" << unit
                                     << R"("]})" << '\n';
    const auto back = read_manifest(dir / "ref.jsonl", lex);
    REQUIRE(back.size() == 1);
    CHECK(back[0].features.shape() == Shape{2, 2});
    CHECK(back[0].features.at(1, 1) == -1.0);
    CHECK(back[0].phonemes == text_to_phonemes(back[0].target, lex));
  }
  SUBCASE("OOV target is rejected when reading") {
    std::ofstream(dir / "oov.jsonl") << R"({"id":"x","target":["nosuchunit"]})" << '\n';
    try {
      read_manifest(dir / "oov.jsonl", lex);
      FAIL("expected an error");
    } catch (const InputError& e) {
      CHECK(std::string(e.what()).find("nosuchunit") != std::string::npos);
    }
  }
  std::filesystem::remove_all(dir);
}
