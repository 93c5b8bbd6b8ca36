#pragma once

// Evaluation: winning rate of transformed noise against raw noise under the
// preference proxy, a diagonal-Gaussian Frechet distance between sample sets,
// and the singular-vector similarity diagnostic.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

#include "npl/npd.hpp"
#include "npl/parallel.hpp"
#include "npl/preference.hpp"
#include "npl/sampler.hpp"
#include "npl/svd.hpp"
#include "npl/testbed.hpp"

namespace npl {

inline constexpr double kVarianceFloor = 1e-12;

struct FrechetResult {
  double value = 0.0;
  bool floor_applied = false;  // some fitted variance was below the floor
};

struct DiagonalGaussian {
  std::vector<double> mean, var;
  bool floor_applied = false;
};

/// Per-coordinate mean and unbiased variance.
inline DiagonalGaussian fit_diagonal(const std::vector<Tensor>& samples) {
  if (samples.size() < 2) throw std::invalid_argument("frechet_gaussian: at least 2 samples required");
  const std::size_t n = samples.front().size();
  DiagonalGaussian g{std::vector<double>(n, 0.0), std::vector<double>(n, 0.0), false};
  for (const Tensor& s : samples) {
    if (s.size() != n) throw std::invalid_argument("frechet_gaussian: samples differ in size");
    for (std::size_t i = 0; i < n; ++i) g.mean[i] += s[i];
  }
  const double count = static_cast<double>(samples.size());
  for (double& m : g.mean) m /= count;
  for (const Tensor& s : samples)
    for (std::size_t i = 0; i < n; ++i) g.var[i] += (s[i] - g.mean[i]) * (s[i] - g.mean[i]);
  for (double& v : g.var) {
    v /= count - 1.0;
    if (v < kVarianceFloor) {
      v = kVarianceFloor;
      g.floor_applied = true;
    }
  }
  return g;
}

/// |mu_a - mu_b|^2 + sum(va + vb - 2 sqrt(va vb)) on fitted diagonal Gaussians.
inline FrechetResult frechet_gaussian(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  const DiagonalGaussian ga = fit_diagonal(a), gb = fit_diagonal(b);
  if (ga.mean.size() != gb.mean.size()) throw std::invalid_argument("frechet_gaussian: dimension mismatch");
  double d2 = 0.0;
  for (std::size_t i = 0; i < ga.mean.size(); ++i) {
    const double dm = ga.mean[i] - gb.mean[i];
    const double sa = std::sqrt(ga.var[i]), sb = std::sqrt(gb.var[i]);
    d2 += dm * dm + (sa - sb) * (sa - sb);
  }
  return {d2, ga.floor_applied || gb.floor_applied};
}

struct SingularSimilarity {
  std::vector<double> left;   // |cos(u_i, u'_i)| in singular-value order
  std::vector<double> right;  // |cos(v_i, v'_i)|
};

/// Matches singular vectors of x and x' by index (both sorted by descending
/// singular value); the sign ambiguity is removed by the absolute value.
inline SingularSimilarity singular_similarity(const Tensor& x, const Tensor& x_prime) {
  if (x.shape() != x_prime.shape()) throw std::invalid_argument("singular_similarity: shape mismatch");
  const SvdFactors a = svd(x), b = svd(x_prime);
  const std::size_t d = a.dim();
  SingularSimilarity r{std::vector<double>(d), std::vector<double>(d)};
  for (std::size_t j = 0; j < d; ++j) {
    double cu = 0.0, cv = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      cu += a.u(i, j) * b.u(i, j);
      cv += a.v(i, j) * b.v(i, j);
    }
    r.left[j] = std::min(1.0, std::abs(cu));
    r.right[j] = std::min(1.0, std::abs(cv));
  }
  return r;
}

/// Mean of left and right |cos| over the leading half of the spectrum.
inline double top_half_similarity(const SingularSimilarity& s) {
  const std::size_t h = std::max<std::size_t>(1, s.left.size() / 2);
  double acc = 0.0;
  for (std::size_t i = 0; i < h; ++i) acc += s.left[i] + s.right[i];
  return acc / static_cast<double>(2 * h);
}

struct BinomialInterval {
  double low = 0.0, high = 1.0;
};

/// Wilson score interval at z (1.96 for 95%).
inline BinomialInterval wilson_interval(double rate, std::size_t n, double z = 1.959963984540054) {
  if (n == 0) return {};
  const double nn = static_cast<double>(n), z2 = z * z;
  const double centre = (rate + z2 / (2 * nn)) / (1 + z2 / nn);
  const double half = z * std::sqrt(rate * (1 - rate) / nn + z2 / (4 * nn * nn)) / (1 + z2 / nn);
  return {std::max(0.0, centre - half), std::min(1.0, centre + half)};
}

struct EvalConfig {
  double omega = 5.5;  // guidance used to synthesize x_0
  int n_steps = 10;
  std::uint64_t first_seed = 1'000'000;
  std::uint64_t n_test = 400;
  std::uint64_t global_seed = 0;
  unsigned workers = 1;
};

struct EvalReport {
  std::uint64_t n_test = 0;
  double wins = 0.0;  // ties count one half
  std::uint64_t strict_wins = 0, ties = 0, losses = 0;
  double winning_rate = 0.0;
  BinomialInterval ci;
  double mean_score_delta = 0.0;  // mean of score(golden path) - score(baseline path)
  double mean_noise_change = 0.0; // mean |golden - x_T|
  FrechetResult frechet_baseline_vs_true;
  FrechetResult frechet_golden_vs_true;
  std::vector<double> spectra_summary;  // mean |cos| per index, left and right averaged
  std::vector<double> baseline_scores, golden_scores;
};

using NoiseTransform = std::function<Tensor(const Tensor&, ClassLabel)>;

/// For each test seed: synthesize x_0 from x_T and from transform(x_T) and
/// compare preference scores. The reference set for the Frechet proxy is
/// exact draws from p(x_0 | c) with the same classes.
inline EvalReport winning_rate(const NoiseTransform& transform, const MixtureTestbed& tb, const NoiseSchedule& sched,
                               const EvalConfig& cfg) {
  if (cfg.n_test < 2) throw std::invalid_argument("winning_rate: n_test must be >= 2");
  const AnalyticPredictor pred(tb, sched);
  const std::size_t n = static_cast<std::size_t>(cfg.n_test), d = tb.d_side();
  std::vector<Tensor> base_x0(n), gold_x0(n), truth(n);
  std::vector<double> s_base(n), s_gold(n), change(n);
  std::vector<SingularSimilarity> sims(n);
  parallel_for(n, cfg.workers, [&](std::size_t i) {
    const std::uint64_t seed = cfg.first_seed + i;
    const Tensor x = seed_noise(cfg.global_seed, seed, tb.state_shape());
    const ClassLabel c = seed_class(cfg.global_seed, seed, tb);
    const Tensor g = transform(x, c).reshaped(tb.state_shape());
    base_x0[i] = sample_trajectory(pred, sched, x, cfg.n_steps, cfg.omega, c);
    gold_x0[i] = sample_trajectory(pred, sched, g, cfg.n_steps, cfg.omega, c);
    s_base[i] = score(base_x0[i], c, tb).value;
    s_gold[i] = score(gold_x0[i], c, tb).value;
    change[i] = norm(g - x);
    sims[i] = singular_similarity(x, g);
    RngStream truth_rng{derive_seed(cfg.global_seed, "truth", seed), 0};
    truth[i] = tb.sample_clean(truth_rng, c);
  });
  EvalReport r;
  r.n_test = cfg.n_test;
  r.spectra_summary.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (s_gold[i] > s_base[i]) {
      ++r.strict_wins;
      r.wins += 1.0;
    } else if (s_gold[i] == s_base[i]) {
      ++r.ties;
      r.wins += 0.5;
    } else {
      ++r.losses;
    }
    r.mean_score_delta += s_gold[i] - s_base[i];
    r.mean_noise_change += change[i];
    for (std::size_t j = 0; j < d; ++j) r.spectra_summary[j] += 0.5 * (sims[i].left[j] + sims[i].right[j]);
  }
  const double nn = static_cast<double>(n);
  r.winning_rate = r.wins / nn;
  r.ci = wilson_interval(r.winning_rate, n);
  r.mean_score_delta /= nn;
  r.mean_noise_change /= nn;
  for (double& v : r.spectra_summary) v /= nn;
  r.frechet_baseline_vs_true = frechet_gaussian(base_x0, truth);
  r.frechet_golden_vs_true = frechet_gaussian(gold_x0, truth);
  r.baseline_scores = std::move(s_base);
  r.golden_scores = std::move(s_gold);
  return r;
}

}  // namespace npl
