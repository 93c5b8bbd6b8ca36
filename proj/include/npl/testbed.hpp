#pragma once

// Class-conditional diagonal Gaussian mixtures with a closed-form optimal
// noise predictor, plus the variance-preserving schedule they are diffused
// under. Pushed through x_t = alpha_t x_0 + sigma_t eps, component
// N(mu, diag(g)) becomes N(alpha_t mu, diag(alpha_t^2 g + sigma_t^2)), so
// eps*(x, t | c) = -sigma_t * grad_x log p_t(x | c) is exact.

#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "npl/errors.hpp"
#include "npl/rng.hpp"
#include "npl/tensor.hpp"

namespace npl {

class NoiseSchedule {
 public:
  static constexpr double kDefaultThetaMax = 1.4;

  /// alpha(t) = cos(theta_max * t / T), sigma(t) = sin(theta_max * t / T).
  /// theta_max = pi/2 gives the full cosine with alpha(T) = 0 exactly.
  static NoiseSchedule cosine(int big_t = 1000, double theta_max = kDefaultThetaMax) {
    if (big_t < 1) throw std::invalid_argument("NoiseSchedule: T must be >= 1");
    if (!(theta_max > 0.0 && theta_max <= std::numbers::pi / 2 + 1e-15))
      throw std::invalid_argument("NoiseSchedule: theta_max must lie in (0, pi/2]");
    NoiseSchedule s;
    s.big_t_ = big_t;
    s.theta_max_ = theta_max;
    s.alpha_.resize(big_t + 1);
    s.sigma_.resize(big_t + 1);
    for (int t = 0; t <= big_t; ++t) {
      const double phi = theta_max * static_cast<double>(t) / big_t;
      s.alpha_[t] = std::cos(phi);
      s.sigma_[t] = std::sin(phi);
    }
    s.alpha_[0] = 1.0;
    s.sigma_[0] = 0.0;
    if (std::abs(theta_max - std::numbers::pi / 2) < 1e-15) {
      s.alpha_[big_t] = 0.0;
      s.sigma_[big_t] = 1.0;
    }
    return s;
  }

  int big_t() const { return big_t_; }
  double theta_max() const { return theta_max_; }

  double alpha(int t) const { return alpha_.at(check(t)); }
  double sigma(int t) const { return sigma_.at(check(t)); }

  std::string descriptor() const {
    std::ostringstream os;
    os << "cosine T=" << big_t_ << " theta_max=" << std::setprecision(17) << theta_max_;
    return os.str();
  }

  /// FNV-1a over the little-endian bytes of every alpha and sigma value.
  std::uint64_t hash() const {
    std::uint64_t h = 0xCBF29CE484222325ull;
    auto feed = [&h](double v) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int b = 0; b < 8; ++b) {
        h ^= (bits >> (8 * b)) & 0xFFu;
        h *= 0x100000001B3ull;
      }
    };
    for (int t = 0; t <= big_t_; ++t) {
      feed(alpha_[t]);
      feed(sigma_[t]);
    }
    return h;
  }

 private:
  int check(int t) const {
    if (t < 0 || t > big_t_)
      throw std::invalid_argument("timestep " + std::to_string(t) + " outside [0, " + std::to_string(big_t_) + "]");
    return t;
  }

  int big_t_ = 0;
  double theta_max_ = 0.0;
  std::vector<double> alpha_;
  std::vector<double> sigma_;
};

/// Either the null condition or a class index.
class ClassLabel {
 public:
  static ClassLabel null() { return ClassLabel(); }
  static ClassLabel of(std::size_t index) { return ClassLabel(index); }

  bool is_null() const { return !index_.has_value(); }
  std::size_t index() const {
    if (!index_) throw std::invalid_argument("ClassLabel: null label has no index");
    return *index_;
  }
  bool operator==(const ClassLabel&) const = default;

 private:
  ClassLabel() = default;
  explicit ClassLabel(std::size_t i) : index_(i) {}
  std::optional<std::size_t> index_;
};

struct MixtureComponent {
  double weight = 1.0;
  Tensor mean;      // length d_side^2
  Tensor variance;  // per-coordinate, length d_side^2
};

struct ClassMixture {
  double prior = 1.0;
  std::vector<MixtureComponent> components;
};

/// Forward process: alpha(t) x0 + sigma(t) eps.
inline Tensor forward_diffuse(const NoiseSchedule& sched, const Tensor& x0, int t, const Tensor& eps) {
  require_same_shape(x0, eps, "forward_diffuse");
  return axpby(sched.alpha(t), x0, sched.sigma(t), eps);
}

class MixtureTestbed {
 public:
  static constexpr double kWeightTol = 1e-12;

  MixtureTestbed(std::size_t d_side, std::vector<ClassMixture> classes)
      : d_side_(d_side), classes_(std::move(classes)) {
    validate();
  }

  std::size_t d_side() const { return d_side_; }
  std::size_t dim() const { return d_side_ * d_side_; }
  Shape state_shape() const { return {d_side_, d_side_}; }
  std::size_t n_classes() const { return classes_.size(); }
  const std::vector<ClassMixture>& classes() const { return classes_; }

  std::vector<double> class_priors() const {
    std::vector<double> p;
    for (const auto& c : classes_) p.push_back(c.prior);
    return p;
  }

  /// eps*(x, t | c); a null label uses the prior-weighted marginal.
  Tensor eps_star(const Tensor& x, int t, ClassLabel c, const NoiseSchedule& sched) const {
    check_state(x);
    const double a = sched.alpha(t), s = sched.sigma(t);
    if (t > 0 && s == 0.0) throw NumericError("eps_star: sigma(t) = 0 at t > 0 makes the density degenerate");
    const std::size_t n = dim();
    std::vector<double> logits;
    std::vector<Tensor> scaled;  // (x - a mu) / var per component
    for_each_component(c, [&](double w, const MixtureComponent& comp) {
      Tensor r({n});
      double quad = 0.0, logdet = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double var = a * a * comp.variance[i] + s * s;
        const double diff = x[i] - a * comp.mean[i];
        r[i] = diff / var;
        quad += diff * diff / var;
        logdet += std::log(var);
      }
      logits.push_back(std::log(w) - 0.5 * (quad + logdet));
      scaled.push_back(std::move(r));
    });
    const std::vector<double> resp = softmax(logits);
    Tensor out(x.shape());
    for (std::size_t k = 0; k < resp.size(); ++k)
      for (std::size_t i = 0; i < n; ++i) out[i] += resp[k] * scaled[k][i];
    for (double& v : out.data()) v *= s;
    if (!out.all_finite()) throw NumericError("eps_star: non-finite prediction");
    return out;
  }

  /// log p(x0 | c) under the clean mixture (null label: marginal).
  double log_density(const Tensor& x0, ClassLabel c) const {
    check_state(x0);
    if (!x0.all_finite()) throw std::invalid_argument("log_density: non-finite input");
    const std::size_t n = dim();
    std::vector<double> logits;
    for_each_component(c, [&](double w, const MixtureComponent& comp) {
      double acc = std::log(w);
      for (std::size_t i = 0; i < n; ++i) {
        const double diff = x0[i] - comp.mean[i];
        acc -= 0.5 * (diff * diff / comp.variance[i] + std::log(2.0 * std::numbers::pi * comp.variance[i]));
      }
      logits.push_back(acc);
    });
    return log_sum_exp(logits);
  }

  /// Exact draw from p(x0 | c).
  Tensor sample_clean(RngStream& rng, ClassLabel c) const {
    std::vector<double> weights;
    std::vector<const MixtureComponent*> comps;
    for_each_component(c, [&](double w, const MixtureComponent& comp) {
      weights.push_back(w);
      comps.push_back(&comp);
    });
    const MixtureComponent& comp = *comps[categorical(rng, weights)];
    Tensor z = gaussian(rng, state_shape());
    for (std::size_t i = 0; i < dim(); ++i) z[i] = comp.mean[i] + std::sqrt(comp.variance[i]) * z[i];
    return z;
  }

  static double log_sum_exp(const std::vector<double>& v) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double x : v) mx = std::max(mx, x);
    if (!std::isfinite(mx)) return mx;
    double s = 0.0;
    for (double x : v) s += std::exp(x - mx);
    return mx + std::log(s);
  }

 private:
  static std::vector<double> softmax(const std::vector<double>& logits) {
    const double lse = log_sum_exp(logits);
    std::vector<double> r(logits.size());
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = std::exp(logits[i] - lse);
    return r;
  }

  template <class F>
  void for_each_component(ClassLabel c, F&& f) const {
    if (c.is_null()) {
      for (const auto& cls : classes_)
        for (const auto& comp : cls.components) f(cls.prior * comp.weight, comp);
      return;
    }
    if (c.index() >= classes_.size())
      throw std::invalid_argument("class index " + std::to_string(c.index()) + " out of range");
    for (const auto& comp : classes_[c.index()].components) f(comp.weight, comp);
  }

  void check_state(const Tensor& x) const {
    if (x.size() != dim())
      throw std::invalid_argument("state has " + std::to_string(x.size()) + " entries, testbed expects " +
                                  std::to_string(dim()));
  }

  void validate() const {
    if (d_side_ == 0) throw std::invalid_argument("testbed: d_side must be >= 1");
    if (classes_.empty()) throw std::invalid_argument("testbed: at least one class required");
    double prior_sum = 0.0;
    for (std::size_t ci = 0; ci < classes_.size(); ++ci) {
      const auto& cls = classes_[ci];
      if (!(cls.prior > 0.0)) throw std::invalid_argument("testbed: class priors must be positive");
      prior_sum += cls.prior;
      if (cls.components.empty()) throw std::invalid_argument("testbed: class without components");
      double wsum = 0.0;
      for (const auto& comp : cls.components) {
        if (!(comp.weight > 0.0)) throw std::invalid_argument("testbed: component weights must be positive");
        wsum += comp.weight;
        if (comp.mean.size() != dim() || comp.variance.size() != dim())
          throw std::invalid_argument("testbed: component arrays must have d_side^2 entries");
        if (!comp.mean.all_finite()) throw std::invalid_argument("testbed: non-finite mean");
        for (double v : comp.variance.data())
          if (!(v > 0.0) || !std::isfinite(v)) throw std::invalid_argument("testbed: variances must be positive");
      }
      if (std::abs(wsum - 1.0) > kWeightTol)
        throw std::invalid_argument("testbed: component weights of class " + std::to_string(ci) + " sum to " +
                                    std::to_string(wsum));
    }
    if (std::abs(prior_sum - 1.0) > kWeightTol) throw std::invalid_argument("testbed: class priors must sum to 1");
  }

  std::size_t d_side_;
  std::vector<ClassMixture> classes_;
};

// ---------------------------------------------------------------------------
// Presets

namespace presets {

inline MixtureComponent component(double weight, Tensor mean, double variance) {
  Tensor var(mean.shape(), variance);
  return MixtureComponent{weight, std::move(mean), std::move(var)};
}

/// N(0, I) for every class: p_t stays N(0, I) and eps*(x, t) = sigma_t x.
inline MixtureTestbed standard_normal(std::size_t d_side, std::size_t n_classes = 1) {
  std::vector<ClassMixture> classes;
  for (std::size_t c = 0; c < n_classes; ++c)
    classes.push_back({1.0 / static_cast<double>(n_classes), {component(1.0, Tensor({d_side * d_side}), 1.0)}});
  return MixtureTestbed(d_side, std::move(classes));
}

namespace detail {

// Rank-one d x d patterns built from a half-period cosine/sine profile.
inline Tensor outer(const std::vector<double>& a, const std::vector<double>& b, double scale) {
  Tensor t({a.size() * b.size()});
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) t[i * b.size() + j] = scale * a[i] * b[j];
  return t;
}

struct Profiles {
  std::vector<double> cos_profile, sin_profile, ones;
  explicit Profiles(std::size_t d) : cos_profile(d), sin_profile(d), ones(d, 1.0) {
    const double denom = d > 1 ? static_cast<double>(d - 1) : 1.0;
    for (std::size_t i = 0; i < d; ++i) {
      cos_profile[i] = std::cos(std::numbers::pi * static_cast<double>(i) / denom);
      sin_profile[i] = std::sin(std::numbers::pi * static_cast<double>(i) / denom);
    }
  }
};

struct TwoClassShape {
  double amp = 1.0;
  double own_var = 0.5;     // the class's distinctive mode
  double shared_var = 0.5;  // the mode both classes nearly share
  double own_weight = 0.5;
  double bump = 0.2;
};

inline MixtureTestbed two_class(std::size_t d, const TwoClassShape& s) {
  const Profiles p(d);
  const Tensor rows = outer(p.cos_profile, p.ones, s.amp);  // varies down the rows
  const Tensor cols = outer(p.ones, p.cos_profile, s.amp);  // varies across the columns
  const Tensor bump = outer(p.sin_profile, p.cos_profile, s.bump * s.amp);
  const double wt = s.own_weight, wb = 1.0 - s.own_weight;
  std::vector<ClassMixture> classes;
  // Each class owns one distinctive mode (+-rows) and one mode that nearly
  // overlaps the other class's.
  classes.push_back({0.5, {component(wt, rows, s.own_var), component(wb, cols, s.shared_var)}});
  classes.push_back({0.5, {component(wt, -1.0 * rows, s.own_var), component(wb, cols + bump, s.shared_var)}});
  return MixtureTestbed(d, std::move(classes));
}

}  // namespace detail

/// Default two-class testbed used by the end-to-end pipeline: a narrow
/// distinctive mode and a broad shared one per class.
inline MixtureTestbed default_two_class(std::size_t d_side = 8) {
  return detail::two_class(d_side, {.amp = 2.0, .own_var = 0.2, .shared_var = 1.0});
}

/// Closer modes with equal variances. eps* is smooth enough for the
/// second-order behaviour of re-denoising to show at k <= 64, and the large
/// DDIM step stays invertible.
inline MixtureTestbed smooth_two_class(std::size_t d_side = 8) { return detail::two_class(d_side, {.amp = 0.7}); }

}  // namespace presets

// ---------------------------------------------------------------------------
// Text definition files
//
//   # comment to end of line
//   d_side <int>
//   schedule cosine T <int> theta_max <float>      (optional)
//   class prior <float>                            (starts a class)
//   component weight <float>                       (starts a component)
//   mean zero | mean values <d_side^2 floats>
//   variance iso <float> | variance values <d_side^2 floats>
//
// Tokens are whitespace separated; line breaks carry no meaning.

struct TestbedDefinition {
  MixtureTestbed testbed;
  NoiseSchedule schedule;
};

namespace detail {

class TokenReader {
 public:
  explicit TokenReader(std::istream& in) {
    std::string line;
    while (std::getline(in, line)) {
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      std::istringstream ls(line);
      std::string tok;
      while (ls >> tok) tokens_.push_back(tok);
    }
  }
  bool done() const { return pos_ >= tokens_.size(); }
  std::string next(const char* what) {
    if (done()) throw FormatError(std::string("testbed: unexpected end of input, expected ") + what);
    return tokens_[pos_++];
  }
  void expect(const std::string& kw) {
    const std::string t = next(kw.c_str());
    if (t != kw) throw FormatError("testbed: expected '" + kw + "', got '" + t + "'");
  }
  double number(const char* what) {
    const std::string t = next(what);
    try {
      std::size_t used = 0;
      const double v = std::stod(t, &used);
      if (used != t.size()) throw std::invalid_argument(t);
      return v;
    } catch (const std::exception&) {
      throw FormatError(std::string("testbed: bad number '") + t + "' for " + what);
    }
  }
  long integer(const char* what) {
    const double v = number(what);
    if (v != std::floor(v)) throw FormatError(std::string("testbed: expected integer for ") + what);
    return static_cast<long>(v);
  }

 private:
  std::vector<std::string> tokens_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline TestbedDefinition parse_testbed(std::istream& in) {
  detail::TokenReader rd(in);
  long d_side = -1;
  NoiseSchedule sched = NoiseSchedule::cosine();
  std::vector<ClassMixture> classes;
  while (!rd.done()) {
    const std::string kw = rd.next("keyword");
    if (kw == "d_side") {
      d_side = rd.integer("d_side");
      if (d_side < 1) throw FormatError("testbed: d_side must be >= 1");
    } else if (kw == "schedule") {
      rd.expect("cosine");
      rd.expect("T");
      const long big_t = rd.integer("T");
      rd.expect("theta_max");
      sched = NoiseSchedule::cosine(static_cast<int>(big_t), rd.number("theta_max"));
    } else if (kw == "class") {
      rd.expect("prior");
      classes.push_back({rd.number("prior"), {}});
    } else if (kw == "component") {
      if (classes.empty()) throw FormatError("testbed: component before any class");
      if (d_side < 1) throw FormatError("testbed: d_side must precede components");
      rd.expect("weight");
      const std::size_t n = static_cast<std::size_t>(d_side * d_side);
      classes.back().components.push_back({rd.number("weight"), Tensor({n}), Tensor({n}, 1.0)});
    } else if (kw == "mean" || kw == "variance") {
      if (classes.empty() || classes.back().components.empty())
        throw FormatError("testbed: '" + kw + "' outside a component");
      MixtureComponent& comp = classes.back().components.back();
      Tensor& target = kw == "mean" ? comp.mean : comp.variance;
      const std::string mode = rd.next("mean/variance mode");
      if (kw == "mean" && mode == "zero") {
        target = Tensor(target.shape());
      } else if (kw == "variance" && mode == "iso") {
        target = Tensor(target.shape(), rd.number("variance"));
      } else if (mode == "values") {
        for (std::size_t i = 0; i < target.size(); ++i) target[i] = rd.number(kw.c_str());
      } else {
        throw FormatError("testbed: unknown " + kw + " mode '" + mode + "'");
      }
    } else {
      throw FormatError("testbed: unknown keyword '" + kw + "'");
    }
  }
  if (d_side < 1) throw FormatError("testbed: missing d_side");
  try {
    return {MixtureTestbed(static_cast<std::size_t>(d_side), std::move(classes)), sched};
  } catch (const std::invalid_argument& e) {
    throw FormatError(e.what());
  }
}

inline TestbedDefinition load_testbed(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open testbed file " + path);
  return parse_testbed(in);
}

inline void write_testbed(std::ostream& out, const MixtureTestbed& tb, const NoiseSchedule& sched) {
  out << std::setprecision(17);
  out << "d_side " << tb.d_side() << "\n";
  out << "schedule cosine T " << sched.big_t() << " theta_max " << sched.theta_max() << "\n";
  auto emit = [&out](const char* kw, const Tensor& t) {
    out << "    " << kw << " values";
    for (std::size_t i = 0; i < t.size(); ++i) out << (i % 8 == 0 ? "\n     " : "") << ' ' << t[i];
    out << "\n";
  };
  for (const auto& cls : tb.classes()) {
    out << "class prior " << cls.prior << "\n";
    for (const auto& comp : cls.components) {
      out << "  component weight " << comp.weight << "\n";
      emit("mean", comp.mean);
      const bool iso = std::all_of(comp.variance.data().begin(), comp.variance.data().end(),
                                   [&](double v) { return v == comp.variance[0]; });
      if (iso)
        out << "    variance iso " << comp.variance[0] << "\n";
      else
        emit("variance", comp.variance);
    }
  }
}

}  // namespace npl
