#include "outlier_lab/softmax.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

namespace olab {
namespace {

using testing::random_vector;

double total(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

TEST(VanillaSoftmax, UniformLogits) {
  auto p = vanilla_softmax(std::vector<double>{0, 0, 0, 0});
  for (double v : p) EXPECT_EQ(v, 0.25);
}

TEST(VanillaSoftmax, LargeLogitsDoNotOverflow) {
  auto p = vanilla_softmax(std::vector<double>{1000.0, 0.0});
  EXPECT_EQ(p[0], 1.0);
  EXPECT_TRUE(std::isfinite(p[1]));
  EXPECT_LT(p[1], 1e-300);
}

TEST(VanillaSoftmax, EmptyIsAnError) {
  EXPECT_THROW(vanilla_softmax(std::vector<double>{}), std::invalid_argument);
}

TEST(VanillaSoftmax, MatchesExtendedPrecisionOracle) {
  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = random_vector(8, rng, 3.0);
    long double denom = 0.0L;
    for (double v : x) denom += std::exp(static_cast<long double>(v));
    auto p = vanilla_softmax(x);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const long double ref = std::exp(static_cast<long double>(x[i])) / denom;
      EXPECT_NEAR(p[i], static_cast<double>(ref), 1e-12);
    }
  }
}

TEST(Hyperparameters, GammaFromAlpha) {
  EXPECT_DOUBLE_EQ(gamma_from_alpha(3.2, 128), -0.025);
  EXPECT_DOUBLE_EQ(gamma_from_alpha(12.0, 512), -0.0234375);
  EXPECT_EQ(gamma_from_alpha(0.0, 77), 0.0);
  EXPECT_THROW(gamma_from_alpha(3.2, 0), std::invalid_argument);
}

TEST(Hyperparameters, UnclippedSum) {
  EXPECT_NEAR(cs_unclipped_sum(1.0, gamma_from_alpha(3.2, 128), 128), -2.175, 1e-12);
  EXPECT_NEAR(1.0 - 3.2 + 3.2 / 128.0, -2.175, 1e-12);
  EXPECT_EQ(cs_unclipped_sum(1.0, 0.0, 300), 1.0);
  EXPECT_NEAR(cs_unclipped_sum(1.0, gamma_from_alpha(3.2, 64), 64), -2.15, 1e-12);
}

TEST(Hyperparameters, NcsGamma) {
  EXPECT_NEAR(ncs_gamma(1.0, -2.175, 128), -0.025, 1e-15);
  EXPECT_NEAR(ncs_gamma(1.0, -2.175, 64), -3.175 / 63.0, 1e-15);
  EXPECT_NEAR(ncs_gamma(1.0, -2.175, 64), -0.050397, 1e-6);
  EXPECT_EQ(ncs_gamma(1.0, -2.175, 1), 0.0);
}

TEST(ClippedSoftmax, CollapsesToVanilla) {
  std::vector<double> x{0.3, -1.2, 2.5, 0.0};
  EXPECT_EQ(clipped_softmax(x, 1.0, 0.0), vanilla_softmax(x));
}

TEST(ClippedSoftmax, HandEvaluatedExamples) {
  auto p = clipped_softmax(std::vector<double>{0.0, 0.0}, 1.0, -0.5);
  EXPECT_DOUBLE_EQ(p[0], 0.25);
  EXPECT_DOUBLE_EQ(p[1], 0.25);
  // dominant entry: 1.3 * 1 - 0.1 = 1.2 before clipping
  auto raw = clipped_softmax_preclip(std::vector<double>{800.0, 0.0, 0.0}, 1.2, -0.1);
  EXPECT_NEAR(raw[0], 1.2, 1e-15);
  auto q = clipped_softmax(std::vector<double>{800.0, 0.0, 0.0}, 1.2, -0.1);
  EXPECT_EQ(q[0], 1.0);
  EXPECT_EQ(q[1], 0.0);
}

TEST(NcsSoftmax, HandEvaluatedExamples) {
  auto p = ncs_softmax(std::vector<double>{0.0, 0.0}, 1.0, 0.9, {2});
  EXPECT_NEAR(p[0], 0.45, 1e-15);
  EXPECT_NEAR(total(p), 0.9, 1e-15);

  for (double beta : {0.9, -2.175, 0.0}) {
    auto first = ncs_softmax(std::vector<double>{3.7}, 1.0, beta, {1});
    EXPECT_EQ(first, std::vector<double>{1.0});
  }

  std::vector<double> uniform(128, 0.0);
  EXPECT_LT(1.0 / 128.0 * (1.0 + 0.025) - 0.025, 0.0);
  for (double v : ncs_softmax(uniform, 1.0, -2.175, {128})) EXPECT_EQ(v, 0.0);
}

TEST(AttentionNormalize, VanillaCausalRows) {
  Rng rng(5);
  auto mask = causal_mask(3);
  Tensor scores(Shape{3, 3}, random_vector(9, rng));
  Tensor p = attention_normalize(scores, SoftmaxConfig::vanilla(AttentionDirection::Causal), &mask);
  for (std::size_t q = 0; q < 3; ++q) {
    double s = 0.0;
    for (std::size_t k = 0; k < 3; ++k) {
      if (k > q) EXPECT_EQ(p[q * 3 + k], 0.0);
      s += p[q * 3 + k];
    }
    EXPECT_NEAR(s, 1.0, 1e-15);
  }
}

TEST(AttentionNormalize, CausalNcsPreclipRowSums) {
  auto mask = causal_mask(3);
  Tensor scores(Shape{3, 3}, {0.1, 5.0, -2.0, 0.2, -0.1, 9.0, 0.05, 0.0, -0.05});
  Tensor pre;
  attention_normalize(scores, SoftmaxConfig::normalized(1.0, 0.9, AttentionDirection::Causal),
                      &mask, std::nullopt, &pre);
  const std::vector<double> expected{1.0, 0.9, 0.9};
  for (std::size_t q = 0; q < 3; ++q) {
    double s = 0.0;
    for (std::size_t k = 0; k <= q; ++k) s += pre[q * 3 + k];
    EXPECT_NEAR(s, expected[q], 1e-14);
  }
}

TEST(AttentionNormalize, CausalRequiresMaskAndMatchingShape) {
  Tensor scores = Tensor::zeros({3, 3});
  EXPECT_THROW(attention_normalize(scores, SoftmaxConfig::vanilla(AttentionDirection::Causal)),
               ShapeError);
  auto wrong = causal_mask(2);
  EXPECT_THROW(
      attention_normalize(scores, SoftmaxConfig::vanilla(AttentionDirection::Causal), &wrong),
      ShapeError);
}

TEST(AttentionNormalize, BidirectionalCollapseEqualsVanilla) {
  Rng rng(6);
  Tensor scores(Shape{2, 4, 5}, random_vector(40, rng, 2.0));
  Tensor a = attention_normalize(scores, SoftmaxConfig::vanilla());
  Tensor b = attention_normalize(scores, SoftmaxConfig::clipped(1.0, 0.0));
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(AttentionNormalize, CsAlphaNeedsPretrainLength) {
  Tensor scores = Tensor::zeros({2, 2});
  EXPECT_THROW(attention_normalize(scores, SoftmaxConfig::clipped_alpha(1.0, 3.2)), ConfigError);
  Tensor p = attention_normalize(scores, SoftmaxConfig::clipped_alpha(1.0, 0.4), nullptr, 4);
  // gamma = -0.1: 1.1 * 0.5 - 0.1
  EXPECT_NEAR(p[0], 0.45, 1e-15);
}

// ---- properties over random inputs ----

TEST(SoftmaxProperties, PreclipSumIdentity) {
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t T = 1 + rng.below(300);
    const double zeta = 1.0 + rng.uniform();
    const double gamma = -rng.uniform() * 0.1;
    auto pre = clipped_softmax_preclip(random_vector(T, rng, 3.0), zeta, gamma);
    EXPECT_NEAR(total(pre), cs_unclipped_sum(zeta, gamma, T), 1e-12);
  }
}

TEST(SoftmaxProperties, NcsLengthInvarianceVersusCsDrift) {
  Rng rng(32);
  const double gamma_cs = gamma_from_alpha(3.2, 128);
  for (std::size_t T : {2, 4, 16, 64, 100, 256}) {
    auto x = random_vector(T, rng, 0.05);
    const double gamma = ncs_gamma(1.0, 0.9, T);
    auto pre = clipped_softmax_preclip(x, 1.0, gamma);
    for (double v : pre) ASSERT_GT(v, 0.0) << "constructed input must not clip";
    EXPECT_NEAR(total(pre), 0.9, 1e-10);
    const double cs_sum = total(clipped_softmax_preclip(x, 1.0, gamma_cs));
    EXPECT_NEAR(cs_sum, 1.0 + (static_cast<double>(T) - 1.0) * gamma_cs, 1e-10);
    if (T != 128) EXPECT_GT(std::abs(cs_sum - (-2.175)), 1e-3);
  }
}

TEST(SoftmaxProperties, ClippingMovesSumTowardRangeAndStaysInUnitInterval) {
  Rng rng(33);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t T = 2 + rng.below(64);
    const double zeta = 1.0 + 0.5 * rng.uniform();
    const double gamma = -0.2 * rng.uniform();
    auto x = random_vector(T, rng, 4.0);
    auto pre = clipped_softmax_preclip(x, zeta, gamma);
    auto out = clipped_softmax(x, zeta, gamma);
    double lower_only = 0.0;
    double upper_only = 0.0;
    for (std::size_t i = 0; i < T; ++i) {
      EXPECT_GE(out[i], 0.0);
      EXPECT_LE(out[i], 1.0);
      lower_only += std::max(pre[i], 0.0);
      upper_only += std::min(pre[i], 1.0);
    }
    EXPECT_GE(lower_only, total(pre));
    EXPECT_LE(upper_only, total(pre));
  }
}

TEST(SoftmaxProperties, CausalFirstRowIsOne) {
  Rng rng(34);
  auto mask = causal_mask(6);
  for (int trial = 0; trial < 20; ++trial) {
    const double beta = -3.0 + 3.9 * rng.uniform();
    const double zeta = 1.0 + rng.uniform();
    Tensor scores(Shape{6, 6}, random_vector(36, rng, 3.0));
    Tensor p = attention_normalize(
        scores, SoftmaxConfig::normalized(zeta, beta, AttentionDirection::Causal), &mask);
    EXPECT_EQ(p[0], 1.0);
    for (std::size_t k = 1; k < 6; ++k) EXPECT_EQ(p[k], 0.0);
  }
}

TEST(SoftmaxProperties, GradientMatchesFiniteDifferencesAwayFromClipBoundaries) {
  Rng rng(35);
  auto mask = causal_mask(5);
  const std::vector<SoftmaxConfig> configs{
      SoftmaxConfig::vanilla(), SoftmaxConfig::clipped(1.0, -0.05),
      SoftmaxConfig::normalized(1.0, 0.9), SoftmaxConfig::normalized(1.0, 0.9, AttentionDirection::Causal),
      SoftmaxConfig::clipped(1.1, -0.05, AttentionDirection::Causal)};
  auto w = random_vector(2 * 25, rng);
  for (const auto& cfg : configs) {
    const auto* m = cfg.direction == AttentionDirection::Causal ? &mask : nullptr;
    int checked = 0;
    for (int attempt = 0; attempt < 200 && checked < 5; ++attempt) {
      Tensor x(Shape{2, 5, 5}, random_vector(50, rng, 1.5), true);
      Tensor pre;
      attention_normalize(x, cfg, m, std::nullopt, &pre);
      bool near_boundary = false;
      for (double v : pre.data()) {
        // exact 0 (masked key) and exact 1 (single-key causal row) are
        // constant in the logits, not boundary crossings
        near_boundary = near_boundary || (std::abs(v) < 1e-3 && v != 0.0) ||
                        (std::abs(v - 1.0) < 1e-3 && v != 1.0);
      }
      if (near_boundary) continue;
      ++checked;
      const double err = finite_diff_check(
          [&](const Tensor& t) {
            return ops::sum(ops::mul(attention_normalize(t, cfg, m), Tensor(Shape{2, 5, 5}, w)));
          },
          x);
      EXPECT_LT(err, 1e-5) << to_string(cfg.variant) << " " << to_string(cfg.direction);
    }
    EXPECT_EQ(checked, 5);
  }
}

TEST(SoftmaxProperties, ClippedEntriesPassNoGradient) {
  Rng rng(36);
  Tensor x(Shape{4, 8}, random_vector(32, rng, 3.0), true);
  Tape tape;
  Tensor pre;
  Tensor loss;
  {
    RecordingScope rec(tape);
    Tensor p = attention_normalize(x, SoftmaxConfig::clipped(1.0, -0.1), nullptr, std::nullopt, &pre);
    loss = ops::sum(ops::mul(p, Tensor(Shape{4, 8}, random_vector(32, rng))));
  }
  tape.backward(loss);
  int clipped = 0;
  for (std::size_t i = 0; i < pre.numel(); ++i) {
    if (pre[i] <= 0.0 || pre[i] >= 1.0) {
      ++clipped;
      EXPECT_EQ(pre.grad()[i], 0.0);
    } else {
      EXPECT_NE(pre.grad()[i], 0.0);
    }
  }
  EXPECT_GT(clipped, 0);
}

TEST(SoftmaxConfig, Validation) {
  EXPECT_NO_THROW(SoftmaxConfig::vanilla().validate());
  EXPECT_NO_THROW(SoftmaxConfig::clipped_alpha(1.0, 3.2).validate());
  EXPECT_NO_THROW(SoftmaxConfig::normalized(1.0, -2.175).validate());
  EXPECT_THROW(SoftmaxConfig::clipped(0.9, -0.1).validate(), ConfigError);
  EXPECT_THROW(SoftmaxConfig::clipped(1.0, 0.1).validate(), ConfigError);
  EXPECT_THROW(SoftmaxConfig::normalized(1.0, 1.5).validate(), ConfigError);
  auto both = SoftmaxConfig::clipped(1.0, -0.1);
  both.alpha = 3.2;
  EXPECT_THROW(both.validate(), ConfigError);
  auto stray = SoftmaxConfig::vanilla();
  stray.beta = 0.9;
  EXPECT_THROW(stray.validate(), ConfigError);
}

}  // namespace
}  // namespace olab
