#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <npl/eval.hpp>
#include <npl/npd.hpp>
#include <npl/npnet.hpp>

using namespace npl;

namespace {

std::vector<Tensor> draws(std::uint64_t seed, std::size_t n, std::size_t dim, double mean = 0.0, double scale = 1.0) {
  RngStream r{seed, 0};
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < n; ++i) {
    Tensor t = gaussian(r, {dim});
    for (std::size_t j = 0; j < dim; ++j) t[j] = mean + scale * (1.0 + 0.3 * j) * t[j];
    out.push_back(std::move(t));
  }
  return out;
}

// Frechet distance with dense covariance matrices and an eigen-decomposed
// matrix square root.
double dense_frechet(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  auto moments = [](const std::vector<Tensor>& s) {
    const auto n = static_cast<Eigen::Index>(s.size()), d = static_cast<Eigen::Index>(s.front().size());
    Eigen::MatrixXd m(n, d);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < d; ++j) m(i, j) = s[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    const Eigen::RowVectorXd mu = m.colwise().mean();
    const Eigen::MatrixXd c = m.rowwise() - mu;
    const Eigen::VectorXd var = c.array().square().colwise().sum() / double(n - 1);
    return std::pair<Eigen::VectorXd, Eigen::MatrixXd>{mu.transpose(), Eigen::MatrixXd(var.asDiagonal())};
  };
  const auto [ma, ca] = moments(a);
  const auto [mb, cb] = moments(b);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(ca);
  const Eigen::MatrixXd ra = ea.eigenvectors() * ea.eigenvalues().cwiseSqrt().asDiagonal() * ea.eigenvectors().transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> em(ra * cb * ra);
  return (ma - mb).squaredNorm() + ca.trace() + cb.trace() - 2.0 * em.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
}

Tensor noise(std::uint64_t seed, std::size_t d) {
  RngStream r{seed, 0};
  return gaussian(r, {d, d});
}

}  // namespace

TEST(Frechet, IdenticalSetsGiveZero) {
  const auto a = draws(1, 50, 6);
  const FrechetResult r = frechet_gaussian(a, a);
  EXPECT_NEAR(r.value, 0.0, 1e-10);
  EXPECT_FALSE(r.floor_applied);
}

TEST(Frechet, MeanShiftGivesSquaredShift) {
  const auto a = draws(2, 40, 5);
  std::vector<Tensor> b = a;
  const std::vector<double> delta{0.5, -1.0, 0.0, 2.0, 0.25};
  double expect = 0.0;
  for (double v : delta) expect += v * v;
  for (Tensor& t : b)
    for (std::size_t j = 0; j < 5; ++j) t[j] += delta[j];
  EXPECT_NEAR(frechet_gaussian(a, b).value, expect, 1e-8);
}

TEST(Frechet, SymmetricNonnegativeAndMatchesDenseOracle) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto a = draws(10 + s, 30, 6, 0.1 * double(s), 1.0);
    const auto b = draws(50 + s, 25, 6, -0.2, 0.5 + 0.1 * double(s));
    const double ab = frechet_gaussian(a, b).value, ba = frechet_gaussian(b, a).value;
    EXPECT_NEAR(ab, ba, 1e-12);
    EXPECT_GE(ab, 0.0);
    EXPECT_NEAR(ab, dense_frechet(a, b), 1e-9 * std::max(1.0, ab));
  }
}

TEST(Frechet, ConstantSetsHitTheVarianceFloor) {
  const std::vector<Tensor> a(4, Tensor({3}, 1.0));
  const FrechetResult r = frechet_gaussian(a, draws(3, 10, 3));
  EXPECT_TRUE(r.floor_applied);
  EXPECT_TRUE(std::isfinite(r.value));
  EXPECT_NEAR(frechet_gaussian(a, a).value, 0.0, 1e-12);
}

TEST(Frechet, RejectsBadInput) {
  EXPECT_THROW(frechet_gaussian(draws(1, 1, 3), draws(2, 5, 3)), std::invalid_argument);
  EXPECT_THROW(frechet_gaussian(draws(1, 5, 3), draws(2, 5, 4)), std::invalid_argument);
}

TEST(SingularSimilarity, SelfAndNegationAreAllOnes) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Tensor x = noise(s, 8);
    Tensor neg = x;
    for (double& v : neg.data()) v = -v;
    for (const Tensor& y : {x, neg}) {
      const SingularSimilarity r = singular_similarity(x, y);
      for (std::size_t i = 0; i < 8; ++i) {
        EXPECT_NEAR(r.left[i], 1.0, 1e-12);
        EXPECT_NEAR(r.right[i], 1.0, 1e-12);
      }
      EXPECT_NEAR(top_half_similarity(r), 1.0, 1e-12);
    }
  }
}

TEST(SingularSimilarity, ValuesInUnitInterval) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const SingularSimilarity r = singular_similarity(noise(s, 6), noise(s + 100, 6));
    for (std::size_t i = 0; i < 6; ++i) {
      EXPECT_GE(r.left[i], 0.0);
      EXPECT_LE(r.left[i], 1.0);
      EXPECT_GE(r.right[i], 0.0);
      EXPECT_LE(r.right[i], 1.0);
    }
  }
  EXPECT_THROW(singular_similarity(noise(1, 4), noise(1, 6)), std::invalid_argument);
}

TEST(SingularSimilarity, RedenoisePairsAtSmallStepKeepVectors) {
  const MixtureTestbed tb = presets::default_two_class(8);
  const NoiseSchedule sched = NoiseSchedule::cosine();
  const AnalyticPredictor pred(tb, sched);
  GuidanceConfig g;
  g.k = 10;
  double acc = 0.0;
  const int n = 20;
  for (int i = 0; i < n; ++i) {
    const Tensor x = noise(700 + i, 8);
    const Tensor xp = redenoise(pred, sched, x, g, ClassLabel::of(i % 2)).x_prime;
    acc += top_half_similarity(singular_similarity(x, xp));
  }
  EXPECT_GE(acc / n, 0.9);
}

TEST(Wilson, KnownValues) {
  // n = 100, p = 0.5: centre 0.5, half width 1.96 * sqrt(0.25/100 + 1.96^2/40000) / (1 + 1.96^2/100).
  const double z = 1.959963984540054, n = 100;
  const double half = z * std::sqrt(0.25 / n + z * z / (4 * n * n)) / (1 + z * z / n);
  const BinomialInterval ci = wilson_interval(0.5, 100);
  EXPECT_NEAR(ci.low, 0.5 - half, 1e-12);
  EXPECT_NEAR(ci.high, 0.5 + half, 1e-12);
  EXPECT_NEAR(ci.low, 0.4038, 1e-4);

  const BinomialInterval zero = wilson_interval(0.0, 20);
  EXPECT_EQ(zero.low, 0.0);
  EXPECT_GT(zero.high, 0.0);
  const BinomialInterval one = wilson_interval(1.0, 20);
  EXPECT_EQ(one.high, 1.0);
  EXPECT_LT(one.low, 1.0);
  EXPECT_LT(wilson_interval(0.6, 400).high - wilson_interval(0.6, 400).low,
            wilson_interval(0.6, 100).high - wilson_interval(0.6, 100).low);
}

TEST(WinningRate, IdentityModelIsExactlyHalf) {
  const MixtureTestbed tb = presets::default_two_class(8);
  const NoiseSchedule sched = NoiseSchedule::cosine();
  const NpnetParams init = NpnetParams::init({}, 1);
  EvalConfig cfg;
  cfg.n_test = 40;
  const EvalReport r = winning_rate([&](const Tensor& x, ClassLabel c) { return golden(x, c, init); }, tb, sched, cfg);
  EXPECT_EQ(r.winning_rate, 0.5);
  EXPECT_EQ(r.ties, 40u);
  EXPECT_EQ(r.mean_score_delta, 0.0);
  EXPECT_EQ(r.mean_noise_change, 0.0);
  EXPECT_EQ(r.frechet_baseline_vs_true.value, r.frechet_golden_vs_true.value);
  for (double v : r.spectra_summary) EXPECT_NEAR(v, 1.0, 1e-12);
}

TEST(WinningRate, RedenoiseOracleMatchesCollectionKeepFraction) {
  const MixtureTestbed tb = presets::default_two_class(8);
  const NoiseSchedule sched = NoiseSchedule::cosine();
  CollectConfig cc;
  cc.first_seed = 5000;
  cc.n_seeds = 120;
  cc.global_seed = 3;
  const CollectionResult col = collect_records(tb, sched, cc);

  const AnalyticPredictor pred(tb, sched);
  EvalConfig ec;
  ec.omega = cc.guidance.omega_l;
  ec.n_steps = cc.n_steps_eval;
  ec.first_seed = cc.first_seed;
  ec.n_test = cc.n_seeds;
  ec.global_seed = cc.global_seed;
  const EvalReport r = winning_rate(
      [&](const Tensor& x, ClassLabel c) { return redenoise(pred, sched, x, cc.guidance, c).x_prime; }, tb, sched, ec);
  EXPECT_EQ(r.strict_wins, col.stats.kept);
  EXPECT_EQ(r.ties, 0u);
  EXPECT_DOUBLE_EQ(r.winning_rate, col.stats.keep_rate);
}

TEST(WinningRate, CountsAreConsistentAndWorkerInvariant) {
  const MixtureTestbed tb = presets::default_two_class(4);
  const NoiseSchedule sched = NoiseSchedule::cosine();
  const auto shrink = [](const Tensor& x, ClassLabel) {
    Tensor y = x;
    for (double& v : y.data()) v *= 0.9;
    return y;
  };
  EvalConfig cfg;
  cfg.n_test = 60;
  const EvalReport a = winning_rate(shrink, tb, sched, cfg);
  cfg.workers = 4;
  const EvalReport b = winning_rate(shrink, tb, sched, cfg);
  EXPECT_EQ(a.strict_wins + a.ties + a.losses, 60u);
  EXPECT_GE(a.winning_rate, 0.0);
  EXPECT_LE(a.winning_rate, 1.0);
  EXPECT_EQ(a.golden_scores, b.golden_scores);
  EXPECT_EQ(a.baseline_scores, b.baseline_scores);
  EXPECT_EQ(a.winning_rate, b.winning_rate);
  cfg.n_test = 1;
  EXPECT_THROW(winning_rate(shrink, tb, sched, cfg), std::invalid_argument);
}
