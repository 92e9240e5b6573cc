#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <set>

#include "ctc_oracle.hpp"
#include "dtx/ctc.hpp"
#include "dtx/grad_check.hpp"
#include "dtx/ops.hpp"
#include "test_helpers.hpp"

using namespace dtx;
using namespace dtx::ctc;

namespace {

Tensor random_log_probs(std::size_t frames, std::size_t classes, std::mt19937_64& rng, double sigma = 1.5) {
  return log_softmax(testing::random_tensor({frames, classes}, rng, false, sigma));
}

PhonemeSeq random_label(std::size_t len, std::size_t vocab, std::mt19937_64& rng) {
  PhonemeSeq l(len);
  for (int& x : l) x = static_cast<int>(uniform_int(rng, 1, static_cast<std::int64_t>(vocab)));
  return l;
}

}  // namespace

TEST_CASE("phoneme inventory") {
  PhonemeInventory inv({"a", "b", "<wb>", "c"});
  CHECK(inv.id("a") == 1);
  CHECK(inv.word_boundary() == 3);
  CHECK(inv.classes() == 5);
  CHECK(inv.symbol(0) == "<blank>");
  CHECK(inv.decode(inv.encode({"c", "<wb>"})) == std::vector<std::string>{"c", "<wb>"});
  CHECK_THROWS_AS(PhonemeInventory({"a", "a", "<wb>"}), InputError);
  CHECK_THROWS_AS(PhonemeInventory({"a", "b"}), InputError);
  CHECK_THROWS_AS(inv.encode({"zz"}), InputError);
}

TEST_CASE("ctc loss hand cases") {
  SUBCASE("single frame, single symbol") {
    auto lp = Tensor::from({1, 2}, {std::log(0.4), std::log(0.6)});
    CHECK(std::abs(ctc_loss(lp, {1}).item() - (-std::log(0.6))) < 1e-15);
    CHECK(std::abs(ctc_loss(lp, {1}).item() - 0.5108256237659907) < 1e-12);
  }
  SUBCASE("two uniform frames: alignments aa, a_, _a") {
    auto lp = Tensor::full({2, 2}, std::log(0.5));
    CHECK(std::abs(ctc_loss(lp, {1}).item() - (-std::log(0.75))) < 1e-15);
    CHECK(std::abs(ctc_loss(lp, {1}).item() - 0.2876820724517809) < 1e-12);
  }
  SUBCASE("empty label is all blanks") {
    auto lp = Tensor::from({2, 2}, {std::log(0.3), std::log(0.7), std::log(0.9), std::log(0.1)});
    CHECK(std::abs(ctc_loss(lp, {}).item() - (-std::log(0.27))) < 1e-14);
  }
  SUBCASE("infeasible label gives +inf and zero gradient") {
    auto logits = Tensor::zeros({2, 3}, true);
    auto lp = log_softmax(logits);
    auto loss = ctc_loss(lp, {1, 1});  // needs 3 frames
    CHECK(std::isinf(loss.item()));
    CHECK(loss.item() > 0);
    loss.backward();
    for (double g : logits.grad()) CHECK(g == 0.0);
  }
  SUBCASE("bad ids are rejected") {
    auto lp = Tensor::full({3, 3}, std::log(1.0 / 3));
    CHECK_THROWS_AS(ctc_loss(lp, {0}), InputError);
    CHECK_THROWS_AS(ctc_loss(lp, {3}), InputError);
  }
}

TEST_CASE("feasibility rule") {
  CHECK(min_frames({1, 2, 3}) == 3);
  CHECK(min_frames({1, 1, 2, 2}) == 6);
  CHECK(feasible(6, {1, 1, 2, 2}));
  CHECK_FALSE(feasible(5, {1, 1, 2, 2}));
}

TEST_CASE("ctc loss equals exhaustive alignment enumeration") {
  std::mt19937_64 rng(31);
  int compared = 0;
  for (int trial = 0; trial < 120; ++trial) {
    const auto frames = static_cast<std::size_t>(uniform_int(rng, 1, 6));
    const auto vocab = static_cast<std::size_t>(uniform_int(rng, 1, 4));
    if (std::pow(vocab + 1.0, static_cast<double>(frames)) > 20000) continue;
    auto lp = random_log_probs(frames, vocab + 1, rng);
    auto mass = oracle::label_probabilities(lp);
    const auto len = static_cast<std::size_t>(uniform_int(rng, 0, 3));
    auto label = random_label(len, vocab, rng);
    const double loss = ctc_loss(lp, label).item();
    auto it = mass.find(label);
    if (it == mass.end()) {
      CHECK_FALSE(feasible(frames, label));
      CHECK(std::isinf(loss));
    } else {
      CHECK(std::abs(loss - (-std::log(it->second))) < 1e-9);
      ++compared;
    }
  }
  CHECK(compared > 50);
}

TEST_CASE("label probabilities sum to at most one") {
  std::mt19937_64 rng(32);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t frames = 4, vocab = 2;
    auto lp = random_log_probs(frames, vocab + 1, rng);
    // Every label of length <= T over the vocabulary.
    double total = 0.0;
    std::vector<PhonemeSeq> labels{{}};
    for (std::size_t len = 1; len <= frames; ++len) {
      std::vector<PhonemeSeq> grown;
      for (const auto& l : labels)
        if (l.size() == len - 1)
          for (int c = 1; c <= static_cast<int>(vocab); ++c) {
            auto e = l;
            e.push_back(c);
            grown.push_back(e);
          }
      labels.insert(labels.end(), grown.begin(), grown.end());
    }
    for (const auto& l : labels) {
      const double loss = ctc_loss(lp, l).item();
      if (std::isfinite(loss)) total += std::exp(-loss);
    }
    CHECK(total <= 1.0 + 1e-9);
    CHECK(total > 1.0 - 1e-9);
  }
}

TEST_CASE("ctc gradient passes finite differences") {
  std::mt19937_64 rng(33);
  for (int seed = 0; seed < 10; ++seed) {
    auto logits = testing::random_tensor({7, 5}, rng, true);
    auto label = random_label(3, 4, rng);
    auto r = grad_check([&](const Tensor& x) { return ctc_loss(log_softmax(x), label); }, logits);
    INFO("seed " << seed << " err " << r.max_rel_error);
    CHECK(r.passed);
  }
}

TEST_CASE("greedy collapse") {
  CHECK(greedy_collapse(std::vector<int>{0, 1, 1, 0, 2}) == PhonemeSeq{1, 2});
  CHECK(greedy_collapse(std::vector<int>{1, 1, 0, 1}) == PhonemeSeq{1, 1});
  CHECK(greedy_collapse(std::vector<int>{0, 0, 0}).empty());
}

TEST_CASE("prefix beam search") {
  std::mt19937_64 rng(34);
  SUBCASE("single frame top-1 is the collapsed argmax") {
    for (int trial = 0; trial < 20; ++trial) {
      auto lp = random_log_probs(1, 4, rng);
      auto best = prefix_beam_search_nbest(lp, 4, 1);
      CHECK(best[0].phonemes == greedy_collapse(frame_argmax(lp)));
    }
  }
  SUBCASE("top-1 matches the exhaustive argmax when nothing is pruned") {
    for (int trial = 0; trial < 60; ++trial) {
      const auto frames = static_cast<std::size_t>(uniform_int(rng, 1, 5));
      const auto vocab = static_cast<std::size_t>(uniform_int(rng, 1, 3));
      auto lp = random_log_probs(frames, vocab + 1, rng, 2.0);
      auto mass = oracle::label_probabilities(lp);
      auto best = std::max_element(mass.begin(), mass.end(),
                                   [](const auto& a, const auto& b) { return a.second < b.second; });
      auto nbest = prefix_beam_search_nbest(lp, mass.size(), 1);
      CHECK(nbest[0].phonemes == best->first);
      CHECK(std::abs(nbest[0].log_score - std::log(best->second)) < 1e-9);
    }
  }
  SUBCASE("n-best contract: distinct, non-increasing") {
    for (int trial = 0; trial < 20; ++trial) {
      auto lp = random_log_probs(8, 5, rng);
      auto list = prefix_beam_search_nbest(lp, 6, 3);
      CHECK(list.size() == 3);
      std::set<PhonemeSeq> seen;
      for (std::size_t i = 0; i < list.size(); ++i) {
        CHECK(seen.insert(list[i].phonemes).second);
        if (i) CHECK(list[i].log_score <= list[i - 1].log_score);
      }
    }
  }
  SUBCASE("wider beams never lower the top-1 score") {
    for (int trial = 0; trial < 40; ++trial) {
      auto lp = random_log_probs(7, 4, rng, 1.0);
      double prev = -1e300;
      for (std::size_t beam : {1u, 2u, 4u, 8u, 16u, 64u}) {
        const double s = prefix_beam_search_nbest(lp, beam, 1)[0].log_score;
        CHECK(s >= prev - 1e-12);
        prev = s;
      }
    }
  }
  SUBCASE("bad arguments") {
    auto lp = random_log_probs(3, 3, rng);
    CHECK_THROWS_AS(prefix_beam_search_nbest(lp, 2, 3), ContractError);
    CHECK_THROWS_AS(prefix_beam_search_nbest(lp, 2, 0), ContractError);
  }
}
