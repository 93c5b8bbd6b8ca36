#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "npl/preference.hpp"
#include "npl/testbed.hpp"

using namespace npl;

namespace {

// The mixture after the forward process at time t, built component by component.
MixtureTestbed diffused(const MixtureTestbed& tb, const NoiseSchedule& sched, int t) {
  const double a = sched.alpha(t), s = sched.sigma(t);
  std::vector<ClassMixture> classes;
  for (const auto& cls : tb.classes()) {
    ClassMixture out{cls.prior, {}};
    for (const auto& comp : cls.components) {
      Tensor var = comp.variance;
      for (double& v : var.data()) v = a * a * v + s * s;
      out.components.push_back({comp.weight, a * comp.mean, var});
    }
    classes.push_back(std::move(out));
  }
  return MixtureTestbed(tb.d_side(), std::move(classes));
}

// Mixture density summed directly, no log-sum-exp.
double brute_density(const MixtureTestbed& tb, const Tensor& x, ClassLabel c) {
  double total = 0.0;
  for (std::size_t ci = 0; ci < tb.n_classes(); ++ci) {
    if (!c.is_null() && c.index() != ci) continue;
    const auto& cls = tb.classes()[ci];
    const double prior = c.is_null() ? cls.prior : 1.0;
    for (const auto& comp : cls.components) {
      double dens = prior * comp.weight;
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double v = comp.variance[i], d = x[i] - comp.mean[i];
        dens *= std::exp(-0.5 * d * d / v) / std::sqrt(2.0 * std::numbers::pi * v);
      }
      total += dens;
    }
  }
  return total;
}

MixtureTestbed symmetric_pair(std::size_t d, double shift) {
  Tensor mu({d * d}, shift);
  return MixtureTestbed(d, {{1.0, {presets::component(0.5, mu, 0.3), presets::component(0.5, -1.0 * mu, 0.3)}}});
}

}  // namespace

TEST(Schedule, VariancePreservingAndMonotone) {
  const NoiseSchedule s = NoiseSchedule::cosine();
  EXPECT_EQ(s.alpha(0), 1.0);
  EXPECT_EQ(s.sigma(0), 0.0);
  for (int t = 0; t <= s.big_t(); ++t) {
    EXPECT_NEAR(s.alpha(t) * s.alpha(t) + s.sigma(t) * s.sigma(t), 1.0, 1e-12);
    if (t > 0) {
      EXPECT_LE(s.alpha(t), s.alpha(t - 1));
      EXPECT_GE(s.sigma(t), s.sigma(t - 1));
    }
  }
  EXPECT_GT(s.alpha(s.big_t()), 0.0);
}

TEST(Schedule, FullCosineEndsAtPureNoise) {
  const NoiseSchedule s = NoiseSchedule::cosine(1000, std::numbers::pi / 2);
  EXPECT_EQ(s.alpha(1000), 0.0);
  EXPECT_EQ(s.sigma(1000), 1.0);
  EXPECT_NEAR(s.alpha(500), std::cos(std::numbers::pi / 4), 1e-15);
}

TEST(Schedule, RejectsBadArguments) {
  EXPECT_THROW(NoiseSchedule::cosine(0), std::invalid_argument);
  EXPECT_THROW(NoiseSchedule::cosine(100, 2.0), std::invalid_argument);
  const NoiseSchedule s = NoiseSchedule::cosine(10);
  EXPECT_THROW(s.alpha(11), std::invalid_argument);
  EXPECT_THROW(s.sigma(-1), std::invalid_argument);
}

TEST(Schedule, HashTracksParameters) {
  EXPECT_EQ(NoiseSchedule::cosine().hash(), NoiseSchedule::cosine().hash());
  EXPECT_NE(NoiseSchedule::cosine(1000, 1.4).hash(), NoiseSchedule::cosine(1000, 1.3).hash());
  EXPECT_NE(NoiseSchedule::cosine(1000).hash(), NoiseSchedule::cosine(500).hash());
}

TEST(ForwardDiffuse, EndpointsAndLinearity) {
  const NoiseSchedule s = NoiseSchedule::cosine();
  RngStream rng{1};
  const Tensor x0 = gaussian(rng, {4, 4}), y0 = gaussian(rng, {4, 4}), eps = gaussian(rng, {4, 4});
  EXPECT_EQ(forward_diffuse(s, x0, 0, eps).values(), x0.values());
  const Tensor zero({4, 4});
  EXPECT_LE(max_abs_diff(forward_diffuse(s, x0, 300, zero), s.alpha(300) * x0), 0.0);
  const double a = 0.7, b = -1.3;
  const Tensor lhs = forward_diffuse(s, axpby(a, x0, b, y0), 640, zero);
  const Tensor rhs = axpby(a, forward_diffuse(s, x0, 640, zero), b, forward_diffuse(s, y0, 640, zero));
  EXPECT_LE(max_abs_diff(lhs, rhs), 1e-14);
  EXPECT_THROW(forward_diffuse(s, x0, 1, Tensor({3, 3})), std::invalid_argument);
}

TEST(EpsStar, StandardNormalIsSigmaTimesX) {
  const NoiseSchedule s = NoiseSchedule::cosine();
  const MixtureTestbed tb = presets::standard_normal(4);
  RngStream rng{2};
  for (int trial = 0; trial < 20; ++trial) {
    const int t = 1 + static_cast<int>(uniform(rng) * 999);
    const Tensor x = gaussian(rng, {4, 4});
    EXPECT_LE(max_abs_diff(tb.eps_star(x, t, ClassLabel::of(0), s), s.sigma(t) * x), 1e-12);
  }
}

TEST(EpsStar, SymmetricPairVanishesAtOrigin) {
  const NoiseSchedule s = NoiseSchedule::cosine();
  const MixtureTestbed tb = symmetric_pair(3, 1.2);
  for (int t : {1, 100, 500, 1000}) EXPECT_LE(norm(tb.eps_star(Tensor({9}), t, ClassLabel::of(0), s)), 1e-15);
}

TEST(EpsStar, NullEqualsOnlyClass) {
  const NoiseSchedule s = NoiseSchedule::cosine();
  const MixtureTestbed tb = symmetric_pair(3, 0.8);
  RngStream rng{3};
  const Tensor x = gaussian(rng, {9});
  EXPECT_LE(max_abs_diff(tb.eps_star(x, 400, ClassLabel::null(), s), tb.eps_star(x, 400, ClassLabel::of(0), s)), 1e-15);
}

TEST(EpsStar, MatchesScoreOfDiffusedDensity) {
  // eps* = -sigma_t grad log p_t, with grad taken by central differences.
  const NoiseSchedule s = NoiseSchedule::cosine();
  const MixtureTestbed tb = presets::default_two_class(3);
  RngStream rng{4};
  for (int t : {50, 400, 900}) {
    const MixtureTestbed pt = diffused(tb, s, t);
    for (ClassLabel c : {ClassLabel::of(0), ClassLabel::of(1), ClassLabel::null()}) {
      const Tensor x = gaussian(rng, {9});
      const Tensor eps = tb.eps_star(x, t, c, s);
      const double h = 1e-5;
      for (std::size_t i = 0; i < x.size(); ++i) {
        Tensor up = x, down = x;
        up[i] += h;
        down[i] -= h;
        const double grad = (pt.log_density(up, c) - pt.log_density(down, c)) / (2 * h);
        EXPECT_NEAR(eps[i], -s.sigma(t) * grad, 1e-6) << "t=" << t << " i=" << i;
      }
    }
  }
}

TEST(EpsStar, RejectsBadInputs) {
  const NoiseSchedule s = NoiseSchedule::cosine();
  const MixtureTestbed tb = presets::standard_normal(2);
  EXPECT_THROW(tb.eps_star(Tensor({5}), 3, ClassLabel::of(0), s), std::invalid_argument);
  EXPECT_THROW(tb.eps_star(Tensor({4}), 3, ClassLabel::of(4), s), std::invalid_argument);
}

TEST(LogDensity, StandardNormalAtMode) {
  const MixtureTestbed tb = presets::standard_normal(3);
  EXPECT_NEAR(tb.log_density(Tensor({9}), ClassLabel::of(0)), -4.5 * std::log(2 * std::numbers::pi), 1e-12);
}

TEST(LogDensity, SingleComponentMaximumAtMean) {
  Tensor mu({4});
  for (std::size_t i = 0; i < 4; ++i) mu[i] = 0.3 * static_cast<double>(i) - 0.5;
  const MixtureTestbed tb(2, {{1.0, {presets::component(1.0, mu, 0.7)}}});
  RngStream rng{5};
  const double at_mode = tb.log_density(mu, ClassLabel::of(0));
  for (int i = 0; i < 50; ++i) EXPECT_LT(tb.log_density(mu + 0.1 * gaussian(rng, {4}), ClassLabel::of(0)), at_mode);
}

TEST(LogDensity, MatchesDirectSummation) {
  const MixtureTestbed tb = presets::default_two_class(2);
  RngStream rng{6};
  for (int i = 0; i < 200; ++i) {
    const Tensor x = 1.5 * gaussian(rng, {4});
    for (ClassLabel c : {ClassLabel::of(0), ClassLabel::of(1), ClassLabel::null()}) {
      const double direct = brute_density(tb, x, c);
      ASSERT_GT(direct, 0.0);
      EXPECT_NEAR(tb.log_density(x, c), std::log(direct), 1e-10);
    }
  }
}

TEST(LogDensity, FarTailsStayFinite) {
  const MixtureTestbed tb = presets::default_two_class(8);
  const Tensor x({64}, 40.0);
  const double v = tb.log_density(x, ClassLabel::of(1));
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_THROW(tb.log_density(Tensor({64}, std::nan("")), ClassLabel::of(0)), std::invalid_argument);
}

TEST(Testbed, ValidatesWeightsAndVariances) {
  const Tensor mu({4});
  EXPECT_THROW(MixtureTestbed(2, {{1.0, {presets::component(0.6, mu, 1.0)}}}), std::invalid_argument);
  EXPECT_THROW(MixtureTestbed(2, {{1.0, {presets::component(1.0, mu, 0.0)}}}), std::invalid_argument);
  EXPECT_THROW(MixtureTestbed(2, {{0.5, {presets::component(1.0, mu, 1.0)}}}), std::invalid_argument);
  EXPECT_THROW(MixtureTestbed(2, {{1.0, {presets::component(1.0, Tensor({3}), 1.0)}}}), std::invalid_argument);
}

TEST(Testbed, PresetsAreValidAndBounded) {
  for (const MixtureTestbed& tb : {presets::default_two_class(), presets::smooth_two_class()}) {
    EXPECT_EQ(tb.d_side(), 8u);
    EXPECT_EQ(tb.n_classes(), 2u);
    for (const auto& cls : tb.classes())
      for (const auto& comp : cls.components)
        for (double v : comp.variance.data()) EXPECT_GE(v, 0.05);
  }
}

TEST(Testbed, SampleCleanMatchesMoments) {
  const MixtureTestbed tb = presets::default_two_class(2);
  RngStream rng{7};
  const std::size_t n = 40000;
  Tensor mean({4});
  for (std::size_t i = 0; i < n; ++i) mean = mean + tb.sample_clean(rng, ClassLabel::of(1)).reshaped({4});
  mean = (1.0 / n) * mean;
  Tensor expected({4});
  for (const auto& comp : tb.classes()[1].components) expected = expected + comp.weight * comp.mean;
  EXPECT_LE(max_abs_diff(mean, expected), 0.03);
}

TEST(TestbedFile, RoundTripIsExact) {
  const TestbedDefinition def{presets::default_two_class(4), NoiseSchedule::cosine(500, 1.3)};
  std::ostringstream out;
  write_testbed(out, def.testbed, def.schedule);
  std::istringstream in(out.str());
  const TestbedDefinition back = parse_testbed(in);
  EXPECT_EQ(back.schedule.hash(), def.schedule.hash());
  ASSERT_EQ(back.testbed.n_classes(), 2u);
  for (std::size_t c = 0; c < 2; ++c) {
    const auto& a = def.testbed.classes()[c];
    const auto& b = back.testbed.classes()[c];
    EXPECT_EQ(a.prior, b.prior);
    ASSERT_EQ(a.components.size(), b.components.size());
    for (std::size_t k = 0; k < a.components.size(); ++k) {
      EXPECT_EQ(a.components[k].weight, b.components[k].weight);
      EXPECT_EQ(a.components[k].mean.values(), b.components[k].mean.values());
      EXPECT_EQ(a.components[k].variance.values(), b.components[k].variance.values());
    }
  }
}

TEST(TestbedFile, ShorthandGrammar) {
  std::istringstream in(
      "# two isotropic classes\n"
      "d_side 2\n"
      "class prior 0.25\n  component weight 1\n    mean zero\n    variance iso 0.5\n"
      "class prior 0.75\n  component weight 1\n    mean values 1 2 3 4\n    variance values 1 1 2 2\n");
  const TestbedDefinition def = parse_testbed(in);
  EXPECT_EQ(def.testbed.d_side(), 2u);
  EXPECT_EQ(def.schedule.hash(), NoiseSchedule::cosine().hash());
  EXPECT_EQ(def.testbed.classes()[0].components[0].variance.values(), std::vector<double>(4, 0.5));
  EXPECT_EQ(def.testbed.classes()[1].components[0].mean.values(), (std::vector<double>{1, 2, 3, 4}));
}

TEST(TestbedFile, MalformedInputIsFormatError) {
  for (const char* text : {"d_side 2 class prior 1 component weight 1 mean values 1 2 3",
                           "d_side 2 bogus", "class prior 1 component weight 1", "d_side 2.5",
                           "d_side 2 class prior 1 component weight 1 variance iso abc"}) {
    std::istringstream in(text);
    EXPECT_THROW(parse_testbed(in), FormatError) << text;
  }
}

// --- preference ------------------------------------------------------------

TEST(Preference, ScoreIsConditionalLogDensity) {
  const MixtureTestbed tb = presets::default_two_class(4);
  RngStream rng{8};
  const Tensor x = gaussian(rng, {16});
  const PreferenceScore s = score(x, ClassLabel::of(1), tb);
  EXPECT_EQ(s.value, tb.log_density(x, ClassLabel::of(1)));
  EXPECT_EQ(s.scorer_id, std::string(kScorerId));
  EXPECT_THROW(score(x, ClassLabel::null(), tb), std::invalid_argument);
}

TEST(Preference, GaussianScoreDifference) {
  Tensor mu({4});
  mu[0] = 1.0;
  mu[3] = -2.0;
  const MixtureTestbed tb(2, {{1.0, {presets::component(1.0, mu, 1.0)}}});
  RngStream rng{9};
  const Tensor delta = gaussian(rng, {4});
  const double gap = score(mu + delta, ClassLabel::of(0), tb).value - score(mu, ClassLabel::of(0), tb).value;
  EXPECT_NEAR(gap, -0.5 * dot(delta, delta), 1e-12);
}

TEST(Preference, OrderingAgreesWithDirectDensity) {
  const MixtureTestbed tb = presets::default_two_class(2);
  RngStream rng{10};
  for (int i = 0; i < 500; ++i) {
    const Tensor a = gaussian(rng, {4}), b = gaussian(rng, {4});
    const ClassLabel c = ClassLabel::of(i % 2);
    const bool direct = brute_density(tb, a, c) < brute_density(tb, b, c);
    EXPECT_EQ(score(a, c, tb).value < score(b, c, tb).value, direct);
  }
}

TEST(Selection, Examples) {
  EXPECT_TRUE(select(1.0, 1.1, SelectionRule{0.0}));
  EXPECT_FALSE(select(1.0, 1.0, SelectionRule{0.0}));
  EXPECT_FALSE(select(1.0, 1.009, SelectionRule{0.01}));
  EXPECT_THROW(SelectionRule{-0.1}.validate(), std::invalid_argument);
}

TEST(Selection, AgreesWithBruteForceAndIsMonotone) {
  RngStream rng{11};
  const std::vector<double> ms{0.0, 0.005, 0.01, 0.02};
  for (int i = 0; i < 1000; ++i) {
    const double s0 = uniform(rng) - 0.5;
    // A quarter of the cases are exact ties or exact threshold hits.
    const double m = ms[i % 4];
    const double sp = i % 4 == 0 ? s0 + m : s0 + 0.05 * (uniform(rng) - 0.5);
    const bool expected = !(s0 + m >= sp);
    EXPECT_EQ(select(s0, sp, SelectionRule{m}), expected);
    if (select(s0, sp, SelectionRule{m})) EXPECT_TRUE(select(s0, sp + 0.01, SelectionRule{m}));
    if (!select(s0, sp, SelectionRule{m})) EXPECT_FALSE(select(s0, sp, SelectionRule{m + 0.01}));
  }
}
