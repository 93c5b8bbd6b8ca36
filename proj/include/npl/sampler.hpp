#pragma once

// Deterministic DDIM sampling, DDIM inversion, classifier-free guidance and
// the re-denoise operator (one guided denoise step followed by one inversion
// step with a different guidance scale).

#include <Eigen/Dense>
#include <cmath>
#include <concepts>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "npl/errors.hpp"
#include "npl/tensor.hpp"
#include "npl/testbed.hpp"

namespace npl {

template <class P>
concept NoisePredictor = requires(const P& p, const Tensor& x, int t, ClassLabel c) {
  { p.eps(x, t, c) } -> std::convertible_to<Tensor>;
};

/// The exact mixture predictor eps*(x, t | c).
struct AnalyticPredictor {
  const MixtureTestbed* testbed;
  const NoiseSchedule* schedule;

  AnalyticPredictor(const MixtureTestbed& tb, const NoiseSchedule& s) : testbed(&tb), schedule(&s) {}
  Tensor eps(const Tensor& x, int t, ClassLabel c) const { return testbed->eps_star(x, t, c, *schedule); }
};

/// eps == 0 everywhere; isolates the schedule arithmetic in tests.
struct ZeroPredictor {
  Tensor eps(const Tensor& x, int, ClassLabel) const { return Tensor(x.shape()); }
};

struct GuidanceConfig {
  double omega_l = 5.5;  // reverse (denoise) step
  double omega_w = 1.0;  // inversion step
  int k = 100;           // re-denoise step in schedule timesteps
  int fp_iters = 50;
  double fp_tol = 1e-10;

  void validate() const {
    if (k < 1) throw std::invalid_argument("GuidanceConfig: k must be >= 1");
    if (fp_iters < 1) throw std::invalid_argument("GuidanceConfig: fp_iters must be >= 1");
    if (!(fp_tol > 0.0)) throw std::invalid_argument("GuidanceConfig: fp_tol must be > 0");
    if (!std::isfinite(omega_l) || !std::isfinite(omega_w))
      throw std::invalid_argument("GuidanceConfig: guidance scales must be finite");
  }
};

struct LatentState {
  Tensor x;
  int t = 0;
};

/// (omega + 1) eps(x, t | c) - omega eps(x, t | null); a null label returns
/// the unconditional prediction and ignores omega.
template <NoisePredictor P>
Tensor guided_eps(const P& pred, const Tensor& x, int t, double omega, ClassLabel c) {
  if (c.is_null()) return pred.eps(x, t, c);
  Tensor cond = pred.eps(x, t, c);
  if (omega == 0.0) return cond;
  return axpby(omega + 1.0, cond, -omega, pred.eps(x, t, ClassLabel::null()));
}

/// x_{t_prev} = alpha_{t_prev} (x_t - sigma_t eps) / alpha_t + sigma_{t_prev} eps.
inline Tensor ddim_update(const NoiseSchedule& sched, const Tensor& x, int t, int t_prev, const Tensor& eps) {
  const double a_t = sched.alpha(t);
  if (a_t == 0.0) throw NumericError("ddim_update: alpha(" + std::to_string(t) + ") = 0");
  const double a_prev = sched.alpha(t_prev), s_t = sched.sigma(t), s_prev = sched.sigma(t_prev);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = a_prev * ((x[i] - s_t * eps[i]) / a_t) + s_prev * eps[i];
  return out;
}

template <NoisePredictor P>
LatentState ddim_step(const P& pred, const NoiseSchedule& sched, const LatentState& state, int step, double omega,
                      ClassLabel c) {
  if (step < 1 || state.t - step < 0)
    throw std::invalid_argument("ddim_step: step " + std::to_string(step) + " invalid at t=" + std::to_string(state.t));
  const Tensor eps = guided_eps(pred, state.x, state.t, omega, c);
  return {ddim_update(sched, state.x, state.t, state.t - step, eps), state.t - step};
}

struct InversionResult {
  LatentState state;
  int iterations = 0;    // fixed-point iterations
  int newton_steps = 0;  // refinement steps taken after the fixed-point phase
  double residual = 0.0; // norm of the last update
  bool converged = false;
};

/// Newton steps tried when fixed-point iteration stalls. Where the guided
/// eps Jacobian times the inversion coefficient has an eigenvalue above 1
/// the fixed point repels, so plain or damped iteration cannot reach it.
inline constexpr int kInversionNewtonSteps = 20;

/// Solves x_t = (a_t / a_s) x_s + (sigma_t - (a_t / a_s) sigma_s) eps(x_t, t)
/// with s = t - step. The first iterate evaluates eps at (x_s, s), which is
/// the usual one-shot inversion (fp_iters = 1, no refinement). Otherwise
/// fixed-point iteration runs first and, if it has not met fp_tol, Newton
/// steps with a central-difference Jacobian continue from the best iterate.
template <NoisePredictor P>
InversionResult ddim_invert_step(const P& pred, const NoiseSchedule& sched, const LatentState& state, int step,
                                 double omega, ClassLabel c, int fp_iters, double fp_tol) {
  if (step < 1 || state.t + step > sched.big_t())
    throw std::invalid_argument("ddim_invert_step: step " + std::to_string(step) + " invalid at t=" +
                                std::to_string(state.t));
  if (fp_iters < 1) throw std::invalid_argument("ddim_invert_step: fp_iters must be >= 1");
  const int s = state.t, t = state.t + step;
  const double a_s = sched.alpha(s);
  if (a_s == 0.0) throw NumericError("ddim_invert_step: alpha(" + std::to_string(s) + ") = 0");
  const double ratio = sched.alpha(t) / a_s;
  const double coef = sched.sigma(t) - ratio * sched.sigma(s);
  auto update = [&](const Tensor& eps) { return axpby(ratio, state.x, coef, eps); };
  auto map = [&](const Tensor& y) { return update(guided_eps(pred, y, t, omega, c)); };

  InversionResult r;
  Tensor y = update(guided_eps(pred, state.x, s, omega, c));
  r.iterations = 1;
  r.residual = std::numeric_limits<double>::infinity();
  Tensor best = y;
  double best_res = std::numeric_limits<double>::infinity();
  for (int it = 1; it < fp_iters; ++it) {
    Tensor next = map(y);
    r.residual = norm(next - y);
    if (r.residual < best_res) best_res = r.residual, best = y;
    y = std::move(next);
    ++r.iterations;
    if (r.residual <= fp_tol) break;
  }
  if (fp_iters == 1) r.residual = norm(map(y) - y);

  if (fp_iters > 1 && !(r.residual <= fp_tol) && best.all_finite()) {
    const auto n = static_cast<Eigen::Index>(best.size());
    Tensor z = best, fz = map(z);
    double res = norm(fz - z);
    for (int k = 0; k < kInversionNewtonSteps && res > fp_tol && std::isfinite(res); ++k) {
      Eigen::MatrixXd a = Eigen::MatrixXd::Identity(n, n);
      for (Eigen::Index j = 0; j < n; ++j) {
        const auto jj = static_cast<std::size_t>(j);
        const double h = 1e-6 * std::max(1.0, std::abs(z[jj]));
        Tensor zp = z, zm = z;
        zp[jj] += h;
        zm[jj] -= h;
        const Tensor ep = guided_eps(pred, zp, t, omega, c), em = guided_eps(pred, zm, t, omega, c);
        for (Eigen::Index i = 0; i < n; ++i) a(i, j) -= coef * (ep[static_cast<std::size_t>(i)] - em[static_cast<std::size_t>(i)]) / (2 * h);
      }
      Eigen::VectorXd b(n);
      for (Eigen::Index i = 0; i < n; ++i) b(i) = fz[static_cast<std::size_t>(i)] - z[static_cast<std::size_t>(i)];
      const Eigen::VectorXd delta = a.partialPivLu().solve(b);
      for (Eigen::Index i = 0; i < n; ++i) z[static_cast<std::size_t>(i)] += delta(i);
      fz = map(z);
      res = norm(fz - z);
      ++r.newton_steps;
    }
    if (res < best_res) {
      y = std::move(z);
      r.residual = res;
    } else {
      y = std::move(best);
      r.residual = best_res;
    }
  }
  if (!y.all_finite()) throw NumericError("ddim_invert_step: non-finite iterate");
  r.converged = r.residual <= fp_tol;
  r.state = {std::move(y), t};
  return r;
}

/// Runs DDIM from t = T to 0 on a uniform stride of T / n_steps. Returns the
/// visited states (first = input, last = x_0) when `trajectory` is non-null.
template <NoisePredictor P>
Tensor sample_trajectory(const P& pred, const NoiseSchedule& sched, const Tensor& x_big_t, int n_steps, double omega,
                         ClassLabel c, std::vector<LatentState>* trajectory = nullptr) {
  if (n_steps < 1 || sched.big_t() % n_steps != 0)
    throw std::invalid_argument("sample_trajectory: n_steps=" + std::to_string(n_steps) + " must divide T=" +
                                std::to_string(sched.big_t()));
  const int stride = sched.big_t() / n_steps;
  LatentState st{x_big_t, sched.big_t()};
  if (trajectory) trajectory->push_back(st);
  while (st.t > 0) {
    st = ddim_step(pred, sched, st, stride, omega, c);
    if (trajectory) trajectory->push_back(st);
  }
  if (!st.x.all_finite()) throw NumericError("sample_trajectory: non-finite sample");
  return st.x;
}

struct RedenoiseResult {
  Tensor x_prime;
  Tensor x_intermediate;  // state at T - k after the denoise leg
  InversionResult inversion;
};

/// x'_T = DDIM-Inv_{omega_w}(DDIM_{omega_l}(x_T)) with one macro-step of size k.
template <NoisePredictor P>
RedenoiseResult redenoise(const P& pred, const NoiseSchedule& sched, const Tensor& x_big_t, const GuidanceConfig& cfg,
                          ClassLabel c) {
  cfg.validate();
  if (cfg.k > sched.big_t()) throw std::invalid_argument("redenoise: k exceeds T");
  const LatentState down = ddim_step(pred, sched, LatentState{x_big_t, sched.big_t()}, cfg.k, cfg.omega_l, c);
  InversionResult up = ddim_invert_step(pred, sched, down, cfg.k, cfg.omega_w, c, cfg.fp_iters, cfg.fp_tol);
  return {up.state.x, down.x, std::move(up)};
}

}  // namespace npl
