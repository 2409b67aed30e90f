#pragma once

// Distribution specs and the operations on them: cdf, quantile, log_pdf,
// sampling, and the truncated samplers used by the hyperparameter updates.
// cdf/quantile are only defined for the continuous location families that can
// serve as error models (Normal, Laplace, ScaledT); everything else throws.

#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <variant>

#include "pebayes/math.hpp"
#include "pebayes/rng.hpp"

namespace pebayes {

struct Normal {
  double mean = 0.0;
  double sd = 1.0;
  friend bool operator==(const Normal&, const Normal&) = default;
};

struct Laplace {
  double location = 0.0;
  double scale = 1.0;
  friend bool operator==(const Laplace&, const Laplace&) = default;
};

// Student-t scaled so that the distribution has standard deviation `sd`;
// the internal scale is sd * sqrt((dof-2)/dof), which requires dof > 2.
struct ScaledT {
  double dof = 5.0;
  double sd = 1.0;
  friend bool operator==(const ScaledT&, const ScaledT&) = default;
};

struct InverseGamma {
  double shape = 1.0;
  double scale = 1.0;
  friend bool operator==(const InverseGamma&, const InverseGamma&) = default;
};

struct Uniform {
  double lo = 0.0;
  double hi = 1.0;
  friend bool operator==(const Uniform&, const Uniform&) = default;
};

struct Gamma {
  double shape = 1.0;
  double rate = 1.0;
  friend bool operator==(const Gamma&, const Gamma&) = default;
};

class DistSpec;

// Two-component hybrid: `inner` restricted to [-cut, cut] with probability
// weight_inner, `outer` restricted to |x| > cut with the complement.
struct TruncatedHybrid {
  std::shared_ptr<const DistSpec> inner;
  std::shared_ptr<const DistSpec> outer;
  double cut = 1.0;
  double weight_inner = 0.5;
  friend bool operator==(const TruncatedHybrid& a, const TruncatedHybrid& b);
};

class DistSpec {
 public:
  using Variant =
      std::variant<Normal, Laplace, ScaledT, TruncatedHybrid, InverseGamma, Uniform, Gamma>;

  template <class T>
    requires(!std::is_same_v<std::decay_t<T>, DistSpec> &&
             std::is_constructible_v<Variant, T &&>)
  DistSpec(T&& alt) : v_(std::forward<T>(alt)) {}  // NOLINT: implicit by design

  const Variant& v() const { return v_; }

  friend bool operator==(const DistSpec& a, const DistSpec& b) { return a.v_ == b.v_; }

 private:
  Variant v_;
};

inline bool operator==(const TruncatedHybrid& a, const TruncatedHybrid& b) {
  return a.cut == b.cut && a.weight_inner == b.weight_inner && *a.inner == *b.inner &&
         *a.outer == *b.outer;
}

inline TruncatedHybrid make_truncated_hybrid(DistSpec inner, DistSpec outer, double cut,
                                             double weight_inner) {
  return TruncatedHybrid{std::make_shared<const DistSpec>(std::move(inner)),
                         std::make_shared<const DistSpec>(std::move(outer)), cut, weight_inner};
}

namespace detail {

inline double scaled_t_factor(const ScaledT& d) {
  if (!(d.dof > 2.0))
    throw std::invalid_argument("ScaledT: dof must exceed 2 to have a finite sd");
  return d.sd * std::sqrt((d.dof - 2.0) / d.dof);
}

[[noreturn]] inline void unsupported(const char* op, const char* variant) {
  throw std::invalid_argument(std::string(op) + ": unsupported for " + variant);
}

}  // namespace detail

inline double cdf(const DistSpec& d, double x) {
  return std::visit(
      [x](const auto& alt) -> double {
        using T = std::decay_t<decltype(alt)>;
        if constexpr (std::is_same_v<T, Normal>) {
          return normal_cdf((x - alt.mean) / alt.sd);
        } else if constexpr (std::is_same_v<T, Laplace>) {
          const double z = (x - alt.location) / alt.scale;
          return z < 0.0 ? 0.5 * std::exp(z) : 1.0 - 0.5 * std::exp(-z);
        } else if constexpr (std::is_same_v<T, ScaledT>) {
          return student_t_cdf(x / detail::scaled_t_factor(alt), alt.dof);
        } else {
          detail::unsupported("cdf", typeid(T).name());
        }
      },
      d.v());
}

inline double quantile(const DistSpec& d, double u) {
  if (!(u > 0.0) || !(u < 1.0))
    throw std::invalid_argument("quantile: u must lie strictly in (0,1), got " +
                                std::to_string(u));
  return std::visit(
      [u](const auto& alt) -> double {
        using T = std::decay_t<decltype(alt)>;
        if constexpr (std::is_same_v<T, Normal>) {
          return alt.mean + alt.sd * normal_quantile(u);
        } else if constexpr (std::is_same_v<T, Laplace>) {
          return u < 0.5 ? alt.location + alt.scale * std::log(2.0 * u)
                         : alt.location - alt.scale * std::log(2.0 * (1.0 - u));
        } else if constexpr (std::is_same_v<T, ScaledT>) {
          return detail::scaled_t_factor(alt) * student_t_quantile(u, alt.dof);
        } else {
          detail::unsupported("quantile", typeid(T).name());
        }
      },
      d.v());
}

// Natural-log density; -inf outside the support.  TruncatedHybrid has no
// single density here — see truncated_hybrid_log_pdf below.
inline double log_pdf(const DistSpec& d, double x) {
  constexpr double neg_inf = -std::numeric_limits<double>::infinity();
  return std::visit(
      [x, neg_inf](const auto& alt) -> double {
        using T = std::decay_t<decltype(alt)>;
        if constexpr (std::is_same_v<T, Normal>) {
          const double z = (x - alt.mean) / alt.sd;
          return -0.5 * z * z - std::log(alt.sd) - 0.5 * kLogTwoPi;
        } else if constexpr (std::is_same_v<T, Laplace>) {
          return -std::fabs(x - alt.location) / alt.scale - std::log(2.0 * alt.scale);
        } else if constexpr (std::is_same_v<T, ScaledT>) {
          const double c = detail::scaled_t_factor(alt);
          return student_t_log_pdf(x / c, alt.dof) - std::log(c);
        } else if constexpr (std::is_same_v<T, InverseGamma>) {
          if (x <= 0.0) return neg_inf;
          return alt.shape * std::log(alt.scale) - std::lgamma(alt.shape) -
                 (alt.shape + 1.0) * std::log(x) - alt.scale / x;
        } else if constexpr (std::is_same_v<T, Uniform>) {
          return (x < alt.lo || x > alt.hi) ? neg_inf : -std::log(alt.hi - alt.lo);
        } else if constexpr (std::is_same_v<T, Gamma>) {
          if (x <= 0.0) return neg_inf;
          return alt.shape * std::log(alt.rate) - std::lgamma(alt.shape) +
                 (alt.shape - 1.0) * std::log(x) - alt.rate * x;
        } else {
          detail::unsupported("log_pdf", typeid(T).name());
        }
      },
      d.v());
}

// Composite density of a TruncatedHybrid: each component renormalized on its
// truncation region, mixed by weight_inner.  Only data-generation tests need
// a density for this variant; sampling goes through `sample`.
inline double truncated_hybrid_log_pdf(const TruncatedHybrid& h, double x) {
  constexpr double neg_inf = -std::numeric_limits<double>::infinity();
  if (std::fabs(x) <= h.cut) {
    if (h.weight_inner <= 0.0) return neg_inf;
    const double mass = cdf(*h.inner, h.cut) - cdf(*h.inner, -h.cut);
    return std::log(h.weight_inner) + log_pdf(*h.inner, x) - std::log(mass);
  }
  if (h.weight_inner >= 1.0) return neg_inf;
  const double mass = 1.0 - (cdf(*h.outer, h.cut) - cdf(*h.outer, -h.cut));
  return std::log1p(-h.weight_inner) + log_pdf(*h.outer, x) - std::log(mass);
}

inline double sample(const DistSpec& d, Rng& rng);

namespace detail {

// Rejection loops below are all high-acceptance by construction; the guard
// exists to turn a mis-specified region into an error instead of a hang.
constexpr int kMaxRejectionTries = 20'000'000;

inline double rejection_in_region(const DistSpec& d, Rng& rng, bool inside, double cut) {
  for (int t = 0; t < kMaxRejectionTries; ++t) {
    const double x = sample(d, rng);
    if ((std::fabs(x) <= cut) == inside) return x;
  }
  throw std::runtime_error("sample: rejection stalled; truncation region |x|" +
                           std::string(inside ? "<=" : ">") + std::to_string(cut) +
                           " has negligible mass under the component");
}

}  // namespace detail

inline double sample(const DistSpec& d, Rng& rng) {
  return std::visit(
      [&rng](const auto& alt) -> double {
        using T = std::decay_t<decltype(alt)>;
        if constexpr (std::is_same_v<T, Normal>) {
          return alt.mean + alt.sd * normal01(rng);
        } else if constexpr (std::is_same_v<T, Laplace>) {
          double u;
          do { u = uniform01(rng); } while (u <= 0.0);
          return u < 0.5 ? alt.location + alt.scale * std::log(2.0 * u)
                         : alt.location - alt.scale * std::log(2.0 * (1.0 - u));
        } else if constexpr (std::is_same_v<T, ScaledT>) {
          return detail::scaled_t_factor(alt) * std::student_t_distribution<double>(alt.dof)(rng);
        } else if constexpr (std::is_same_v<T, TruncatedHybrid>) {
          const bool inner = uniform01(rng) < alt.weight_inner;
          return detail::rejection_in_region(inner ? *alt.inner : *alt.outer, rng, inner,
                                             alt.cut);
        } else if constexpr (std::is_same_v<T, InverseGamma>) {
          return 1.0 / gamma_draw(rng, alt.shape, alt.scale);
        } else if constexpr (std::is_same_v<T, Uniform>) {
          return alt.lo + (alt.hi - alt.lo) * uniform01(rng);
        } else if constexpr (std::is_same_v<T, Gamma>) {
          return gamma_draw(rng, alt.shape, alt.rate);
        } else {
          detail::unsupported("sample", typeid(T).name());
        }
      },
      d.v());
}

// Draw from Gamma(shape, rate) conditioned on x > lower_bound.  Rejection
// from the untruncated gamma when the tail holds non-negligible mass,
// inverse-cdf on the tail otherwise.
inline double sample_gamma_truncated(double shape, double rate, double lower_bound, Rng& rng) {
  if (!(shape > 0.0) || !std::isfinite(shape) || !(rate > 0.0) || !std::isfinite(rate))
    throw std::invalid_argument("sample_gamma_truncated: shape and rate must be positive finite");
  if (lower_bound <= 0.0) return gamma_draw(rng, shape, rate);

  const double tail = gamma_q(shape, rate * lower_bound);
  if (tail > 1e-6) {
    const long max_tries = 100 + static_cast<long>(50.0 / tail);
    for (long t = 0; t < max_tries; ++t) {
      const double x = gamma_draw(rng, shape, rate);
      if (x > lower_bound) return x;
    }
    throw std::runtime_error("sample_gamma_truncated: rejection stalled at bound " +
                             std::to_string(lower_bound));
  }
  if (tail <= 0.0)
    throw std::runtime_error("sample_gamma_truncated: region x > " + std::to_string(lower_bound) +
                             " has numerically zero mass");
  double v;
  do { v = uniform01(rng); } while (v <= 0.0);
  const double q = std::max(tail * v, std::numeric_limits<double>::denorm_min());
  return gamma_upper_quantile(shape, q) / rate;
}

// Standard normal conditioned on x > a.  Direct rejection for a <= 0,
// inverse-cdf on the upper tail for moderate a, and an exponential-envelope
// rejection (Robert 1995) once the tail probability underflows.
inline double truncated_std_normal_lower(double a, Rng& rng) {
  if (a <= 0.0) {
    for (int t = 0; t < detail::kMaxRejectionTries; ++t) {
      const double z = normal01(rng);
      if (z > a) return z;
    }
    throw std::runtime_error("truncated_std_normal_lower: rejection stalled");
  }
  const double pa = normal_cdf_upper(a);
  if (pa > 0.0) {
    double v;
    do { v = uniform01(rng); } while (v <= 0.0);
    const double q = std::max(pa * v, std::numeric_limits<double>::denorm_min());
    return -normal_quantile(q);
  }
  const double lambda = 0.5 * (a + std::sqrt(a * a + 4.0));
  while (true) {
    double e;
    do { e = uniform01(rng); } while (e <= 0.0);
    const double z = a - std::log(e) / lambda;
    const double dd = z - lambda;
    if (std::log(std::max(uniform01(rng), 1e-300)) <= -0.5 * dd * dd) return z;
  }
}

}  // namespace pebayes
