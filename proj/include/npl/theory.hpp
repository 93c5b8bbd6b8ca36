#pragma once

// Numerical check of the closed-form re-denoise delta:
//
//   x'_T - x_T  ~=  coef(k) * (omega_l - omega_w) * (eps_c - eps_null)(x_mid, T - k/2)
//   coef(k)      =  (alpha_T sigma_{T-k} - alpha_{T-k} sigma_T) / alpha_{T-k}
//
// The residual of this first-order expansion should shrink like k^2.

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "npl/errors.hpp"
#include "npl/parallel.hpp"
#include "npl/rng.hpp"
#include "npl/sampler.hpp"
#include "npl/tensor.hpp"
#include "npl/testbed.hpp"

namespace npl {

inline double redenoise_coefficient(double alpha_t, double sigma_t, double alpha_prev, double sigma_prev) {
  if (alpha_prev == 0.0) throw NumericError("redenoise_coefficient: alpha(T-k) = 0");
  return (alpha_t * sigma_prev - alpha_prev * sigma_t) / alpha_prev;
}

inline double redenoise_coefficient(const NoiseSchedule& sched, int k) {
  const int big_t = sched.big_t();
  if (k < 1 || k > big_t) throw std::invalid_argument("redenoise_coefficient: k out of range");
  return redenoise_coefficient(sched.alpha(big_t), sched.sigma(big_t), sched.alpha(big_t - k), sched.sigma(big_t - k));
}

enum class MidpointRule {
  half_step,  // DDIM half-step of the denoise leg
  average,    // (x_T + x_{T-k}) / 2
};

/// First-order prediction of redenoise(x_T) with guidance evaluated at T - k/2.
template <NoisePredictor P>
Tensor rhs_closed_form(const P& pred, const NoiseSchedule& sched, const Tensor& x_big_t, int k, double omega_l,
                       double omega_w, ClassLabel c, MidpointRule rule = MidpointRule::half_step) {
  const int big_t = sched.big_t();
  if (k < 2 || k % 2 != 0 || k > big_t)
    throw std::invalid_argument("rhs_closed_form: k=" + std::to_string(k) + " must be even and <= T");
  const double coef = redenoise_coefficient(sched, k);
  if (c.is_null()) return x_big_t;
  const LatentState start{x_big_t, big_t};
  Tensor x_mid;
  if (rule == MidpointRule::half_step) {
    x_mid = ddim_step(pred, sched, start, k / 2, omega_l, c).x;
  } else {
    x_mid = 0.5 * (x_big_t + ddim_step(pred, sched, start, k, omega_l, c).x);
  }
  const int t_mid = big_t - k / 2;
  const Tensor gap = pred.eps(x_mid, t_mid, c) - pred.eps(x_mid, t_mid, ClassLabel::null());
  return axpby(1.0, x_big_t, coef * (omega_l - omega_w), gap);
}

struct TheoremConfig {
  GuidanceConfig guidance;  // k is ignored; the k sequence below is used
  std::vector<int> k_values{64, 32, 16, 8};
  int n_trials = 20;
  std::uint64_t seed = 0;
  unsigned workers = 1;
};

struct TheoremReport {
  std::vector<int> k_values;
  std::vector<double> residuals;             // mean over trials per k
  std::vector<double> residuals_average_mid; // same with the averaged midpoint
  std::vector<double> predicted_delta_norms; // mean |rhs - x_T|
  std::vector<double> actual_delta_norms;    // mean |x'_T - x_T|
  std::vector<double> max_residuals;
  std::vector<double> ratios;                // residual(k_{i+1}) / residual(k_i)
  double mean_ratio = 0.0;
  double slope = 0.0;                        // least-squares slope of log residual on log k
  double lipschitz_estimate = 0.0;           // max |x_T - x_{T-k}| / k
  int flagged_trials = 0;                    // non-finite results, excluded from the means
  int unconverged_inversions = 0;
};

inline double loglog_slope(const std::vector<int>& ks, const std::vector<double>& values) {
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < ks.size(); ++i) {
    if (values[i] > 0.0 && std::isfinite(values[i])) {
      lx.push_back(std::log(static_cast<double>(ks[i])));
      ly.push_back(std::log(values[i]));
    }
  }
  if (lx.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  const double n = static_cast<double>(lx.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < lx.size(); ++i) mx += lx[i], my += ly[i];
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sxy += (lx[i] - mx) * (ly[i] - my);
    sxx += (lx[i] - mx) * (lx[i] - mx);
  }
  return sxy / sxx;
}

inline TheoremReport verify_theorem(const MixtureTestbed& tb, const NoiseSchedule& sched, const TheoremConfig& cfg) {
  if (cfg.n_trials < 1) throw std::invalid_argument("verify_theorem: n_trials must be >= 1");
  if (cfg.k_values.empty()) throw std::invalid_argument("verify_theorem: empty k sequence");
  for (std::size_t i = 0; i < cfg.k_values.size(); ++i) {
    const int k = cfg.k_values[i];
    if (k < 2 || k % 2 != 0 || k > sched.big_t())
      throw std::invalid_argument("verify_theorem: k=" + std::to_string(k) + " must be even and <= T");
    if (i > 0 && k >= cfg.k_values[i - 1]) throw std::invalid_argument("verify_theorem: k sequence must decrease");
  }
  const AnalyticPredictor pred(tb, sched);
  const std::vector<double> priors = tb.class_priors();
  const std::size_t nk = cfg.k_values.size(), nt = static_cast<std::size_t>(cfg.n_trials);

  struct Cell {
    double residual, residual_avg, predicted, actual, lipschitz;
    bool converged;
  };
  std::vector<Cell> cells(nk * nt);
  parallel_for(nt, cfg.workers, [&](std::size_t trial) {
    RngStream noise{derive_seed(cfg.seed, "theorem-noise", trial), 0};
    RngStream cls{derive_seed(cfg.seed, "theorem-class", trial), 0};
    const Tensor x = gaussian(noise, tb.state_shape());
    const ClassLabel c = ClassLabel::of(categorical(cls, priors));
    for (std::size_t ki = 0; ki < nk; ++ki) {
      GuidanceConfig g = cfg.guidance;
      g.k = cfg.k_values[ki];
      const RedenoiseResult rd = redenoise(pred, sched, x, g, c);
      const Tensor rhs = rhs_closed_form(pred, sched, x, g.k, g.omega_l, g.omega_w, c);
      const Tensor rhs_avg = rhs_closed_form(pred, sched, x, g.k, g.omega_l, g.omega_w, c, MidpointRule::average);
      cells[ki * nt + trial] = {norm(rd.x_prime - rhs),  norm(rd.x_prime - rhs_avg),
                                norm(rhs - x),           norm(rd.x_prime - x),
                                norm(x - rd.x_intermediate) / g.k, rd.inversion.converged};
    }
  });

  TheoremReport r;
  r.k_values = cfg.k_values;
  std::vector<bool> bad(nt, false);
  for (std::size_t trial = 0; trial < nt; ++trial)
    for (std::size_t ki = 0; ki < nk; ++ki) {
      const Cell& cl = cells[ki * nt + trial];
      if (!std::isfinite(cl.residual) || !std::isfinite(cl.residual_avg) || !std::isfinite(cl.lipschitz)) bad[trial] = true;
      if (!cl.converged) ++r.unconverged_inversions;
    }
  for (bool b : bad) r.flagged_trials += b ? 1 : 0;
  if (r.flagged_trials == cfg.n_trials) throw NumericError("verify_theorem: every trial produced non-finite values");

  for (std::size_t ki = 0; ki < nk; ++ki) {
    double res = 0, res_avg = 0, predicted = 0, actual = 0, worst = 0, used = 0;
    for (std::size_t trial = 0; trial < nt; ++trial) {
      if (bad[trial]) continue;
      const Cell& cl = cells[ki * nt + trial];
      res += cl.residual;
      res_avg += cl.residual_avg;
      predicted += cl.predicted;
      actual += cl.actual;
      worst = std::max(worst, cl.residual);
      r.lipschitz_estimate = std::max(r.lipschitz_estimate, cl.lipschitz);
      used += 1;
    }
    r.residuals.push_back(res / used);
    r.residuals_average_mid.push_back(res_avg / used);
    r.predicted_delta_norms.push_back(predicted / used);
    r.actual_delta_norms.push_back(actual / used);
    r.max_residuals.push_back(worst);
  }
  for (std::size_t ki = 1; ki < nk; ++ki) r.ratios.push_back(r.residuals[ki] / r.residuals[ki - 1]);
  if (!r.ratios.empty()) {
    for (double q : r.ratios) r.mean_ratio += q;
    r.mean_ratio /= static_cast<double>(r.ratios.size());
  }
  r.slope = loglog_slope(r.k_values, r.residuals);
  return r;
}

}  // namespace npl
