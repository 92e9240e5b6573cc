#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dtx/grad_check.hpp"
#include "dtx/nn.hpp"
#include "dtx/ops.hpp"
#include "naive_reference.hpp"
#include "test_helpers.hpp"

using namespace dtx;
using namespace dtx::nn;
using dtx::testing::random_tensor;

namespace {

// Registration leaves biases at zero; randomise every parameter so tests see
// non-trivial values everywhere.
void randomise(ParamStore& store, std::mt19937_64& rng, double sigma = 0.5) {
  for (const auto& e : store.entries()) {
    Tensor t = e.tensor;
    for (double& v : t.mutable_data()) v = sigma * standard_normal(rng);
  }
}

std::vector<Tensor> leaves(const ParamStore& store) {
  std::vector<Tensor> out;
  for (const auto& e : store.entries()) out.push_back(e.tensor);
  return out;
}

Tensor weighted_sum(const Tensor& y, std::uint64_t seed) {
  std::mt19937_64 r(seed);
  return sum(mul(y, random_tensor(y.shape(), r)));
}

}  // namespace

TEST_CASE("attention masks") {
  auto m = AttentionMask::causal(5);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j) CHECK(m.is_allowed(i, j) == (j <= i));
  auto p = AttentionMask::padding(2, 4, 3);
  CHECK(p.is_allowed(1, 2));
  CHECK_FALSE(p.is_allowed(1, 3));
  CHECK_THROWS_AS(AttentionMask::padding(2, 4, 0), ContractError);
}

TEST_CASE("scaled dot-product attention") {
  std::mt19937_64 rng(21);
  SUBCASE("identical keys give uniform weights over allowed keys") {
    auto q = random_tensor({3, 4}, rng);
    auto k = Tensor::from({4, 4}, std::vector<double>(16, 0.7));
    auto v = random_tensor({4, 2}, rng);
    auto mask = AttentionMask::causal(4);
    mask.queries = 3;
    mask.allowed.resize(12);
    auto r = scaled_dot_product_attention(q, k, v, mask);
    for (std::size_t i = 0; i < 3; ++i) {
      const double n = static_cast<double>(i + 1);
      for (std::size_t c = 0; c < 2; ++c) {
        double mean = 0.0;
        for (std::size_t j = 0; j <= i; ++j) mean += v.at(j, c) / n;
        CHECK(std::abs(r.context.at(i, c) - mean) < 1e-14);
      }
      for (std::size_t j = 0; j <= i; ++j) CHECK(std::abs(r.weights.at(i, j) - 1.0 / n) < 1e-15);
    }
  }
  SUBCASE("a single allowed key returns its value row") {
    auto q = random_tensor({2, 3}, rng);
    auto k = random_tensor({4, 3}, rng);
    auto v = random_tensor({4, 5}, rng);
    auto mask = AttentionMask::none(2, 4);
    std::fill(mask.allowed.begin(), mask.allowed.end(), 0);
    mask.kind = MaskKind::padding;
    mask.allowed[0 * 4 + 2] = 1;
    mask.allowed[1 * 4 + 0] = 1;
    auto r = scaled_dot_product_attention(q, k, v, mask);
    for (std::size_t c = 0; c < 5; ++c) {
      CHECK(r.context.at(0, c) == v.at(2, c));
      CHECK(r.context.at(1, c) == v.at(0, c));
    }
  }
  SUBCASE("random cases match the naive double loop") {
    for (int trial = 0; trial < 10; ++trial) {
      auto q = random_tensor({3, 4}, rng);
      auto k = random_tensor({5, 4}, rng);
      auto v = random_tensor({5, 3}, rng);
      auto mask = trial % 2 ? AttentionMask::padding(3, 5, 4) : AttentionMask::none(3, 5);
      auto r = scaled_dot_product_attention(q, k, v, mask);
      naive::Matrix v3 = naive::to_matrix(v);
      naive::Matrix expect(3, std::vector<double>(3, 0.0));
      for (std::size_t i = 0; i < 3; ++i) {
        std::vector<double> s(5);
        double mx = -1e300, z = 0.0;
        for (std::size_t j = 0; j < 5; ++j) {
          if (!mask.is_allowed(i, j)) continue;
          s[j] = 0.0;
          for (std::size_t c = 0; c < 4; ++c) s[j] += q.at(i, c) * k.at(j, c);
          s[j] /= 2.0;
          mx = std::max(mx, s[j]);
        }
        for (std::size_t j = 0; j < 5; ++j)
          if (mask.is_allowed(i, j)) z += std::exp(s[j] - mx);
        for (std::size_t j = 0; j < 5; ++j)
          if (mask.is_allowed(i, j))
            for (std::size_t c = 0; c < 3; ++c) expect[i][c] += std::exp(s[j] - mx) / z * v3[j][c];
      }
      CHECK(naive::max_abs_diff(expect, r.context) < 1e-12);
      for (std::size_t i = 0; i < 3; ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < 5; ++j) {
          CHECK(r.weights.at(i, j) >= 0.0);
          if (!mask.is_allowed(i, j)) CHECK(r.weights.at(i, j) == 0.0);
          total += r.weights.at(i, j);
        }
        CHECK(std::abs(total - 1.0) < 1e-12);
      }
    }
  }
  SUBCASE("fully masked query row is a contract error") {
    auto mask = AttentionMask::none(2, 3);
    mask.kind = MaskKind::padding;
    mask.allowed = {1, 1, 1, 0, 0, 0};
    CHECK_THROWS_AS(scaled_dot_product_attention(random_tensor({2, 4}, rng), random_tensor({3, 4}, rng),
                                                 random_tensor({3, 4}, rng), mask),
                    ContractError);
  }
}

TEST_CASE("multi-head attention") {
  std::mt19937_64 rng(22);
  SUBCASE("one head with identity projections is plain attention") {
    ParamStore store;
    auto mha = make_attention(store, "t", 4, 1, rng);
    for (Linear* l : {&mha.query, &mha.key, &mha.value, &mha.output}) {
      auto w = l->weight.mutable_data();
      std::fill(w.begin(), w.end(), 0.0);
      for (std::size_t i = 0; i < 4; ++i) w[i * 4 + i] = 1.0;
    }
    auto q = random_tensor({3, 4}, rng), k = random_tensor({5, 4}, rng), v = random_tensor({5, 4}, rng);
    auto mask = AttentionMask::padding(3, 5, 4);
    CHECK(testing::bitwise_equal(multi_head_attention(q, k, v, mask, mha),
                                 scaled_dot_product_attention(q, k, v, mask).context));
  }
  SUBCASE("random cases match a naive per-head reference") {
    for (std::size_t len : {1u, 4u, 7u}) {
      ParamStore store;
      auto mha = make_attention(store, "t", 8, 4, rng);
      randomise(store, rng);
      auto q = random_tensor({len, 8}, rng), kv = random_tensor({6, 8}, rng);
      auto mask = AttentionMask::padding(len, 6, 5);
      auto out = multi_head_attention(q, kv, kv, mask, mha);
      CHECK(out.shape() == Shape{len, 8});
      auto ref = naive::multi_head(naive::to_matrix(q), naive::to_matrix(kv), naive::to_matrix(kv), mask, mha);
      CHECK(naive::max_abs_diff(ref, out) < 1e-10);
    }
  }
  SUBCASE("indivisible head count is a config error") {
    ParamStore store;
    CHECK_THROWS_AS(make_attention(store, "t", 6, 4, rng), ConfigError);
  }
}

TEST_CASE("position-wise feed-forward") {
  std::mt19937_64 rng(23);
  ParamStore store;
  auto ffn = make_feed_forward(store, "f", 6, 10, rng);
  randomise(store, rng);
  auto x = random_tensor({5, 6}, rng);
  auto y = position_wise_ffn(x, ffn);

  SUBCASE("matches a per-position loop") {
    for (std::size_t r = 0; r < 5; ++r) {
      naive::Matrix row{std::vector<double>(x.data().begin() + r * 6, x.data().begin() + (r + 1) * 6)};
      auto h = naive::linear(row, ffn.first);
      for (double& v : h[0]) v = std::max(0.0, v);
      auto o = naive::linear(h, ffn.second);
      for (std::size_t c = 0; c < 6; ++c) CHECK(std::abs(o[0][c] - y.at(r, c)) < 1e-12);
    }
  }
  SUBCASE("commutes with position permutation") {
    std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    std::vector<double> px;
    for (std::size_t p : perm) px.insert(px.end(), x.data().begin() + p * 6, x.data().begin() + (p + 1) * 6);
    auto yp = position_wise_ffn(Tensor::from({5, 6}, px), ffn);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t c = 0; c < 6; ++c) CHECK(yp.at(i, c) == y.at(perm[i], c));
  }
  SUBCASE("zero weights give the second bias") {
    ParamStore s2;
    auto z = make_feed_forward(s2, "z", 6, 10, rng);
    for (Tensor w : {z.first.weight, z.second.weight}) {
      auto d = w.mutable_data();
      std::fill(d.begin(), d.end(), 0.0);
    }
    auto b = z.second.bias.mutable_data();
    for (std::size_t i = 0; i < b.size(); ++i) b[i] = 0.5 * static_cast<double>(i) - 1.0;
    auto out = position_wise_ffn(x, z);
    for (std::size_t r = 0; r < 5; ++r)
      for (std::size_t c = 0; c < 6; ++c) CHECK(out.at(r, c) == b[c]);
  }
}

TEST_CASE("sinusoidal positional encoding") {
  auto pe = sinusoidal_positional_encoding(50, 8);
  for (std::size_t c = 0; c < 8; ++c) CHECK(pe.at(0, c) == (c % 2 ? 1.0 : 0.0));
  for (std::size_t pos = 0; pos < 50; ++pos) CHECK(pe.at(pos, 0) == std::sin(static_cast<double>(pos)));
  for (double v : pe.data()) CHECK(std::abs(v) <= 1.0);
  CHECK(std::abs(pe.at(7, 5) - std::cos(7.0 / std::pow(10000.0, 4.0 / 8.0))) < 1e-15);
  CHECK_THROWS_AS(sinusoidal_positional_encoding(4, 7), ConfigError);
}

TEST_CASE("convolutional subsampling") {
  std::mt19937_64 rng(24);
  ParamStore store;
  auto conv = make_conv_frontend(store, "c", 8, 3, 6, rng);
  randomise(store, rng, 0.4);

  CHECK(conv_output_length(conv_output_length(16)) == 4);
  for (std::size_t t = 4; t <= 64; ++t) {
    const std::size_t closed_form = (t + 3) / 4;  // ceil(ceil(t/2)/2) = ceil(t/4)
    CHECK(conv_output_length(conv_output_length(t)) == closed_form);
    if (t % 9 == 0) CHECK(conv_subsample(random_tensor({t, 8}, rng), conv).shape() == Shape{closed_form, 6});
  }
  CHECK_THROWS_AS(conv_subsample(random_tensor({3, 8}, rng), conv), InputError);
  CHECK_THROWS_AS(conv_subsample(random_tensor({8, 5}, rng), conv), InputError);

  SUBCASE("zero input gives bias-derived constant rows away from the time edges") {
    auto y = conv_subsample(Tensor::zeros({32, 8}), conv);
    // Rows 1..T'-2 see only interior time positions of the first layer output,
    // which is relu(conv1 bias) everywhere for zero input.
    for (std::size_t r = 2; r + 1 < y.dim(0); ++r)
      for (std::size_t c = 0; c < 6; ++c) CHECK(y.at(r, c) == y.at(1, c));
    // Hand evaluation of an interior row.
    const std::size_t ch = 3, f1 = 4, f2 = 2;
    std::vector<double> h1(ch);
    for (std::size_t k = 0; k < ch; ++k) h1[k] = std::max(0.0, conv.conv1_bias.at(k));
    std::vector<double> flat(f2 * ch);
    for (std::size_t f = 0; f < f2; ++f)
      for (std::size_t o = 0; o < ch; ++o) {
        double s = conv.conv2_bias.at(o);
        for (int kr = 0; kr < 3; ++kr)
          for (int kc = 0; kc < 3; ++kc) {
            const long src_f = static_cast<long>(2 * f) + kc - 1;
            if (src_f < 0 || src_f >= static_cast<long>(f1)) continue;
            for (std::size_t i = 0; i < ch; ++i)
              s += h1[i] * conv.conv2_weight.at(static_cast<std::size_t>(kr * 3 + kc) * ch + i, o);
          }
        flat[f * ch + o] = std::max(0.0, s);
      }
    for (std::size_t c = 0; c < 6; ++c) {
      double s = conv.proj.bias.at(c);
      for (std::size_t i = 0; i < flat.size(); ++i) s += flat[i] * conv.proj.weight.at(i, c);
      CHECK(std::abs(y.at(1, c) - s) < 1e-12);
    }
  }
}

TEST_CASE("label-smoothed loss") {
  std::mt19937_64 rng(25);
  auto logits = random_tensor({4, 6}, rng);
  const std::vector<int> targets{3, 0, 5, 2};

  SUBCASE("epsilon 0 is the mean negative log-likelihood") {
    auto lp = log_softmax(logits);
    double nll = 0.0;
    for (std::size_t i = 0; i < 4; ++i) nll -= lp.at(i, static_cast<std::size_t>(targets[i]));
    CHECK(std::abs(label_smoothing_loss(logits, targets, 0.0, -1).item() - nll / 4.0) < 1e-14);
  }
  SUBCASE("uniform logits give ln V for any epsilon") {
    for (double eps : {0.0, 0.1, 0.5, 0.9})
      CHECK(std::abs(label_smoothing_loss(Tensor::zeros({4, 6}), targets, eps, -1).item() - std::log(6.0)) < 1e-14);
  }
  SUBCASE("random case matches the direct formula, pads excluded") {
    const std::vector<int> padded{3, 0, 5, 0};
    const int pad = 0;
    const double eps = 0.1;
    double total = 0.0;
    int count = 0;
    for (std::size_t i = 0; i < 4; ++i) {
      if (padded[i] == pad) continue;
      double m = -1e300, z = 0.0;
      for (std::size_t v = 0; v < 6; ++v) m = std::max(m, logits.at(i, v));
      for (std::size_t v = 0; v < 6; ++v) z += std::exp(logits.at(i, v) - m);
      for (std::size_t v = 0; v < 6; ++v) {
        const double logp = logits.at(i, v) - m - std::log(z);
        const double q = static_cast<int>(v) == padded[i] ? 1.0 - eps : eps / 5.0;
        total -= q * logp;
      }
      ++count;
    }
    CHECK(std::abs(label_smoothing_loss(logits, padded, eps, pad).item() - total / count) < 1e-12);
  }
  SUBCASE("all-pad targets are a contract error") {
    CHECK_THROWS_AS(label_smoothing_loss(logits, {1, 1, 1, 1}, 0.1, 1), ContractError);
  }
}

TEST_CASE("residual sublayer and encoder block") {
  std::mt19937_64 rng(26);
  auto x = random_tensor({5, 8}, rng);
  SUBCASE("zero sublayer with no dropout is the identity") {
    ParamStore store;
    auto norm = make_layer_norm(store, "n", 8);
    auto y = residual_sublayer(x, norm, [](const Tensor& h) { return scale(h, 0.0); }, Mode::eval());
    CHECK(testing::bitwise_equal(x, y));
  }
  SUBCASE("eval mode is deterministic, train mode dropout is seeded") {
    ParamStore store;
    auto block = make_encoder_block(store, "b", 8, 2, 16, rng);
    auto mask = AttentionMask::none(5, 5);
    CHECK(testing::bitwise_equal(encoder_block(x, mask, block, Mode::eval()),
                                 encoder_block(x, mask, block, Mode::eval())));
    std::mt19937_64 r1(5), r2(5);
    auto a = encoder_block(x, mask, block, Mode{true, 0.1, &r1});
    auto b = encoder_block(x, mask, block, Mode{true, 0.1, &r2});
    CHECK(testing::bitwise_equal(a, b));
    CHECK_FALSE(testing::bitwise_equal(a, encoder_block(x, mask, block, Mode::eval())));
  }
  SUBCASE("causal self-attention stack ignores the future bitwise") {
    ParamStore store;
    std::vector<EncoderBlock> blocks;
    for (int i = 0; i < 3; ++i) blocks.push_back(make_encoder_block(store, "b" + std::to_string(i), 8, 2, 16, rng));
    randomise(store, rng);
    auto mask = AttentionMask::causal(5);
    auto run = [&](const Tensor& in) {
      Tensor h = in;
      for (const auto& b : blocks) h = encoder_block(h, mask, b, Mode::eval());
      return h;
    };
    auto base = run(x);
    for (std::size_t t = 0; t < 4; ++t) {
      std::vector<double> changed(x.data().begin(), x.data().end());
      for (std::size_t i = (t + 1) * 8; i < changed.size(); ++i) changed[i] += 3.0 * standard_normal(rng);
      auto out = run(Tensor::from({5, 8}, changed));
      for (std::size_t r = 0; r <= t; ++r)
        for (std::size_t c = 0; c < 8; ++c) CHECK(out.at(r, c) == base.at(r, c));
    }
  }
}

TEST_CASE("block gradients pass finite differences (10 seeds each)") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    CAPTURE(seed);
    {
      ParamStore store;
      auto mha = make_attention(store, "a", 8, 2, rng);
      randomise(store, rng);
      auto q = random_tensor({3, 8}, rng, true), kv = random_tensor({4, 8}, rng, true);
      auto mask = AttentionMask::padding(3, 4, 3);
      auto inputs = leaves(store);
      inputs.push_back(q);
      inputs.push_back(kv);
      auto r = grad_check([&] { return weighted_sum(multi_head_attention(q, kv, kv, mask, mha), seed); }, inputs);
      INFO("attention " << r.max_rel_error);
      CHECK(r.passed);
    }
    {
      ParamStore store;
      auto ffn = make_feed_forward(store, "f", 6, 12, rng);
      randomise(store, rng);
      auto x = random_tensor({4, 6}, rng, true);
      auto inputs = leaves(store);
      inputs.push_back(x);
      auto r = grad_check([&] { return weighted_sum(position_wise_ffn(x, ffn), seed); }, inputs);
      INFO("ffn " << r.max_rel_error);
      CHECK(r.passed);
    }
    {
      ParamStore store;
      auto conv = make_conv_frontend(store, "c", 6, 2, 4, rng);
      randomise(store, rng);
      auto x = random_tensor({9, 6}, rng, true);
      auto inputs = leaves(store);
      inputs.push_back(x);
      auto r = grad_check([&] { return weighted_sum(conv_subsample(x, conv), seed); }, inputs);
      INFO("conv " << r.max_rel_error);
      CHECK(r.passed);
    }
    {
      auto logits = random_tensor({5, 7}, rng, true);
      auto r = grad_check([&](const Tensor& l) { return label_smoothing_loss(l, {1, 6, 0, 3, 0}, 0.1, 0); }, logits);
      INFO("label smoothing " << r.max_rel_error);
      CHECK(r.passed);
    }
    {
      ParamStore store;
      auto block = make_encoder_block(store, "b", 8, 2, 12, rng);
      randomise(store, rng);
      auto x = random_tensor({4, 8}, rng, true);
      auto mask = AttentionMask::causal(4);
      auto inputs = leaves(store);
      inputs.push_back(x);
      auto r = grad_check([&] { return weighted_sum(encoder_block(x, mask, block, Mode::eval()), seed); }, inputs);
      INFO("encoder block " << r.max_rel_error);
      CHECK(r.passed);
    }
  }
}
