#pragma once

// Preference proxy: the conditional log-density of a synthesized sample under
// the true data distribution. Higher is better.

#include <cmath>
#include <stdexcept>
#include <string>

#include "npl/tensor.hpp"
#include "npl/testbed.hpp"

namespace npl {

inline constexpr const char* kScorerId = "logdensity-v1";

struct PreferenceScore {
  double value = 0.0;
  std::string scorer_id = kScorerId;
};

struct SelectionRule {
  double m = 0.0;

  void validate() const {
    if (!(m >= 0.0) || !std::isfinite(m)) throw std::invalid_argument("SelectionRule: m must be finite and >= 0");
  }
};

inline PreferenceScore score(const Tensor& x0, ClassLabel c, const MixtureTestbed& tb) {
  if (c.is_null()) throw std::invalid_argument("score: a class label is required");
  const double v = tb.log_density(x0, c);
  if (!std::isfinite(v)) throw NumericError("score: non-finite log density");
  return {v, kScorerId};
}

/// Keep the pair iff the re-denoised sample beats the original by more than m.
inline bool select(double s0, double s0_prime, const SelectionRule& rule) { return s0 + rule.m < s0_prime; }

}  // namespace npl
