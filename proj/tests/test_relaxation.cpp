#include <gtest/gtest.h>

#include <sstream>

#include "sgnas/cost_model.hpp"
#include "sgnas/grad_check.hpp"
#include "sgnas/relaxation.hpp"

namespace sgnas {
namespace {

template <typename T>
std::vector<T> vec(const BasicTensor<T>& t) {
  return {t.values().begin(), t.values().end()};
}

TEST(Gumbel, UniformLogitsWithoutNoiseGiveUniformWeights) {
  Rng rng(1);
  auto m = gumbel_weights(Tensor64::zeros({3, 4}), 2.0, rng, false);
  for (double v : m.values()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Gumbel, LowTemperatureIsOneHot) {
  Rng rng(1);
  auto m = gumbel_weights(Tensor::from({1, 4}, {0.1f, 0.3f, 0.2f, -1.0f}), 1e-4, rng, false);
  EXPECT_GT(m[1], 0.999f);
}

TEST(Gumbel, NonPositiveTemperatureIsContractError) {
  Rng rng(1);
  EXPECT_THROW(gumbel_weights(Tensor::zeros({1, 4}), 0.0, rng, false), ContractError);
  EXPECT_THROW(gumbel_weights(Tensor::zeros({1, 4}), -1.0, rng, true), ContractError);
}

TEST(Gumbel, WeightsAlwaysSumToOne) {
  Rng rng(4);
  for (int i = 0; i < 200; ++i) {
    auto alpha = Tensor::zeros({5, 4});
    for (auto& v : alpha.mutable_values()) v = static_cast<float>(normal(rng, 0, 10));
    const double tau = std::exp(uniform(rng, std::log(1e-3), std::log(10.0)));
    auto m = gumbel_weights(alpha, tau, rng, true);
    for (std::size_t r = 0; r < 5; ++r) {
      double s = 0;
      for (std::size_t o = 0; o < 4; ++o) s += m[r * 4 + o];
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(Gumbel, ShiftInvariantWithoutNoise) {
  Rng rng(1);
  auto a = Tensor64::from({1, 3}, {0.5, -1.0, 2.0});
  auto b = add_scalar(a, 7.5);
  auto ma = gumbel_weights(a, 0.7, rng, false), mb = gumbel_weights(b, 0.7, rng, false);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(ma[i], mb[i], 1e-12);
}

TEST(Gumbel, SeededNoiseIsReproducible) {
  auto alpha = Tensor::zeros({6, 4});
  Rng a(9), b(9);
  EXPECT_EQ(vec(gumbel_weights(alpha, 1.0, a, true)), vec(gumbel_weights(alpha, 1.0, b, true)));
}

TEST(Gumbel, NoiseMatchesGumbelMoments) {
  Rng rng(3);
  double s = 0, s2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double g = gumbel_noise(rng);
    s += g;
    s2 += g * g;
  }
  const double mean = s / n, var = s2 / n - mean * mean;
  EXPECT_NEAR(mean, 0.5772156649, 0.01);                       // Euler-Mascheroni
  EXPECT_NEAR(var, std::numbers::pi * std::numbers::pi / 6, 0.03);
}

TEST(Gumbel, ComposedWithExpectedCostPassesGradCheck) {
  const auto spec = SearchSpaceSpec::desk();
  const auto t = build_cost_table(spec);
  Rng rng(2);
  auto alpha = ArchParams::zeros(spec);
  for (auto& v : alpha.alpha) v = static_cast<float>(normal(rng));
  const double err = grad_check<double>(
      [&](const Tensor64& a) {
        Rng r(5);
        return expected_cost(gumbel_weights(a, 1.0, r, true), t, 1e6);
      },
      alpha.tensor<double>(), 1e-6);
  EXPECT_LT(err, 1e-4);
}

TEST(Mixture, OneHotSelectsAndIdenticalOutputsPassThrough) {
  Rng rng(1);
  std::vector<Tensor> outs;
  for (int i = 0; i < 3; ++i) {
    auto t = Tensor::zeros({2, 3});
    for (auto& v : t.mutable_values()) v = static_cast<float>(normal(rng));
    outs.push_back(t);
  }
  auto sel = mixture_forward(outs, Tensor::from({3}, {0, 1, 0}));
  EXPECT_EQ(vec(sel), vec(outs[1]));
  auto same = mixture_forward(std::vector<Tensor>{outs[0], outs[0], outs[0]}, Tensor::from({3}, {0.2f, 0.3f, 0.5f}));
  for (std::size_t i = 0; i < same.size(); ++i) EXPECT_NEAR(same[i], outs[0][i], 1e-6);
}

TEST(Mixture, MatchesManualWeightedSumAndRejectsMismatch) {
  Rng rng(2);
  std::vector<Tensor64> outs;
  for (int i = 0; i < 4; ++i) {
    auto t = Tensor64::zeros({5});
    for (auto& v : t.mutable_values()) v = normal(rng);
    outs.push_back(t);
  }
  const std::vector<double> w{0.1, 0.2, 0.3, 0.4};
  auto mix = mixture_forward(outs, Tensor64::from({4}, w));
  for (std::size_t i = 0; i < 5; ++i) {
    double manual = 0;
    for (std::size_t k = 0; k < 4; ++k) manual += w[k] * outs[k][i];
    EXPECT_NEAR(mix[i], manual, 1e-14);
  }
  EXPECT_THROW(mixture_forward(outs, Tensor64::from({3}, {0.3, 0.3, 0.4})), DimensionError);
  outs[2] = Tensor64::zeros({4});
  EXPECT_THROW(mixture_forward(outs, Tensor64::from({4}, w)), DimensionError);
}

TEST(Schedule, AnnealsGeometrically) {
  TemperatureSchedule s;
  EXPECT_DOUBLE_EQ(s.tau(0), 5.0);
  EXPECT_DOUBLE_EQ(s.tau(2), 5.0 * 0.95 * 0.95);
  EXPECT_GT(s.tau(1000), 0.0);
}

TEST(Discretize, OneHotLikeLogitsGiveTheirArgmax) {
  const auto spec = SearchSpaceSpec::desk();
  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    const auto a = sample_uniform(spec, rng);
    auto alpha = ArchParams::zeros(spec);
    for (std::size_t l = 0; l < alpha.layers; ++l)
      for (std::size_t s = 0; s < alpha.slots; ++s) alpha.at(l, s, static_cast<std::size_t>(a.layers[l][s])) = 5.0f;
    EXPECT_EQ(discretize(alpha, spec), a);
  }
}

TEST(Discretize, SurplusSkipWithSmallestMarginIsDemoted) {
  // Slot 0 prefers K5; slots 1..5 prefer SKIP with distinct margins over
  // their best kernel, but e_min = 2 lets only four SKIPs survive.
  const auto spec = SearchSpaceSpec::imagenet();
  auto alpha = ArchParams::zeros(spec);
  const float margins[6] = {0.0f, 3.0f, 2.0f, 0.5f, 4.0f, 1.0f};
  for (std::size_t s = 1; s < 6; ++s) {
    alpha.at(0, s, 1) = 1.0f;
    alpha.at(0, s, 3) = 1.0f + margins[s];
  }
  alpha.at(0, 0, 1) = 2.0f;
  alpha.at(0, 3, 2) = 1.2f;  // slot 3 falls back to K7, the others to K5
  auto enc = discretize(alpha, spec);
  EXPECT_EQ(enc.layers[0], (LayerConfig{2, 1, 3, 3, 3, 3}));
  // Widening slot 3's margin hands the demotion to slot 5 (margin 1.0).
  alpha.at(0, 3, 3) = 10.0f;
  enc = discretize(alpha, spec);
  EXPECT_EQ(enc.layers[0], (LayerConfig{1, 1, 3, 3, 3, 3}));
}

TEST(Discretize, AlwaysCanonicalAndShiftInvariant) {
  const auto spec = SearchSpaceSpec::imagenet();
  Rng rng(12);
  for (int i = 0; i < 100; ++i) {
    auto alpha = ArchParams::zeros(spec);
    for (auto& v : alpha.alpha) v = static_cast<float>(normal(rng, 0, 2));
    const auto enc = discretize(alpha, spec);
    EXPECT_TRUE(is_canonical(spec, enc));
    auto shifted = alpha;
    for (std::size_t l = 0; l < alpha.layers; ++l)
      for (std::size_t s = 0; s < alpha.slots; ++s) {
        const float c = static_cast<float>(uniform(rng, -4, 4));
        for (std::size_t o = 0; o < alpha.ops; ++o) shifted.at(l, s, o) = alpha.at(l, s, o) + c;
      }
    EXPECT_EQ(discretize(shifted, spec), enc);
  }
}

TEST(ArchParamsIo, BinaryRoundTripAndShapeChecks) {
  const auto spec = SearchSpaceSpec::desk();
  Rng rng(5);
  auto alpha = ArchParams::zeros(spec);
  for (auto& v : alpha.alpha) v = static_cast<float>(normal(rng));
  std::stringstream ss;
  alpha.write_binary(ss);
  const auto back = ArchParams::read_binary(ss);
  EXPECT_EQ(back.alpha, alpha.alpha);
  EXPECT_EQ(back.layers, alpha.layers);
  EXPECT_NO_THROW(back.check(spec));
  EXPECT_THROW(back.check(SearchSpaceSpec::imagenet()), DimensionError);
  std::stringstream bad("XXXX");
  EXPECT_THROW(ArchParams::read_binary(bad), FormatError);
  auto nan = alpha;
  nan.alpha[0] = std::nanf("");
  EXPECT_THROW(nan.check(spec), NumericError);
  std::ostringstream csv;
  alpha.write_csv(csv, spec);
  const std::string text = csv.str();
  EXPECT_EQ(static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')),
            alpha.alpha.size() + 1);
}

}  // namespace
}  // namespace sgnas
