#pragma once
// Hierarchical working priors and the two Gibbs samplers built on them: the
// standard sampler alternating exact conditional draws in theta-space, and
// the robustified variant whose theta update runs permutation moves in
// error-quantile space instead (see permutation_mh.hpp).
//
// Three prior families are supported, each with a uniform hyperprior:
//   Laplace(0, eta1)  with eta1  ~ U(0, 35.35)
//   Normal(0, eta2^2) with eta2  ~ U(0, 50)
//   lambda * prod Laplace + (1 - lambda) * prod Normal, lambda ~ U(0, 1),
//   where a single latent indicator z picks the component for the whole
//   vector (the mixture is over priors, not per coordinate).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <utility>
#include <variant>
#include <vector>

#include "pebayes/distributions.hpp"
#include "pebayes/math.hpp"
#include "pebayes/permutation_mh.hpp"
#include "pebayes/quantile_map.hpp"
#include "pebayes/rng.hpp"

namespace pebayes {

struct LaplacePrior {
  double scale = 17.675;  // eta1, kept inside (0, scale_max)
  double scale_max = 35.35;
};

struct NormalPrior {
  double sd = 25.0;  // eta2, kept inside (0, sd_max)
  double sd_max = 50.0;
};

enum class MixtureComponent { kLaplace, kNormal };

struct MixturePrior {
  double weight = 0.5;  // lambda = P(Laplace component)
  MixtureComponent active = MixtureComponent::kLaplace;  // latent z
  LaplacePrior laplace;
  NormalPrior normal;
};

using WorkingPrior = std::variant<LaplacePrior, NormalPrior, MixturePrior>;

// Per-coordinate log densities, shared between the conditional samplers and
// the permutation chain's prior evaluator.  Normalization constants are
// precomputed: these run inside the proposal loop, millions of calls per fit.
struct LaplaceLogDensity {
  double scale;
  double inv_scale = 1.0 / scale;
  double log_norm = std::log(2.0 * scale);
  double operator()(double t) const { return -std::fabs(t) * inv_scale - log_norm; }
};

struct NormalLogDensity {
  double sd;
  double inv_two_var = 0.5 / (sd * sd);
  double log_norm = std::log(sd) + 0.5 * kLogTwoPi;
  double operator()(double t) const { return -t * t * inv_two_var - log_norm; }
};

namespace detail {

// Coordinate conditional under a Laplace(0, scale) prior and unit-variance
// normal likelihood at y. The density exp(-(y-t)^2/2 - |t|/scale) splits at
// t = 0 into two normal lobes (complete the square on each side):
//   t > 0: N(y - b, 1),  t < 0: N(y + b, 1),  b = 1/scale,
// with log lobe weights b(b -+ 2y)/2 + log Phi(+-(y -+ b)). Sampling the
// chosen lobe is a one-sided truncated-normal draw, so the conditional is
// exact rather than itself a Markov step.
inline double laplace_conditional_draw(double y, double scale, Rng& rng) {
  const double b = 1.0 / scale;
  const double m_pos = y - b;
  const double m_neg = y + b;
  const double logw_pos = 0.5 * b * (b - 2.0 * y) + log_normal_cdf(m_pos);
  const double logw_neg = 0.5 * b * (b + 2.0 * y) + log_normal_cdf(-m_neg);
  const double hi = std::max(logw_pos, logw_neg);
  const double w_pos = std::exp(logw_pos - hi);
  const double w_neg = std::exp(logw_neg - hi);
  if (uniform01(rng) * (w_pos + w_neg) < w_pos) {
    return m_pos + truncated_std_normal_lower(-m_pos, rng);  // t > 0
  }
  return m_neg - truncated_std_normal_lower(m_neg, rng);  // t < 0
}

inline void require_standard_errors(const ParallelDataset& ds, const char* who) {
  const DistSpec std_normal(Normal{0.0, 1.0});
  for (const auto& e : ds.errors) {
    if (!(e == std_normal))
      throw std::invalid_argument(std::string(who) +
                                  ": conditional formulas require N(0,1) errors");
  }
}

inline double sum_abs(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += std::fabs(x);
  return s;
}

inline double sum_sq(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

// eta1 | theta: the conditional density on (0, scale_max) is proportional to
// eta^(-p) exp(-sum|theta|/eta); substituting x = 1/eta gives
// Gamma(p - 1, sum|theta|) truncated to x > 1/scale_max.
inline void update_laplace_scale(LaplacePrior& prior, const std::vector<double>& theta,
                                 Rng& rng) {
  if (theta.size() < 2)
    throw std::invalid_argument("update_laplace_scale: needs at least two coordinates");
  const double rate = sum_abs(theta);
  if (!(rate > 0.0))
    throw std::invalid_argument(
        "update_laplace_scale: sum |theta| is zero, conditional is degenerate");
  const double shape = static_cast<double>(theta.size()) - 1.0;
  const double x = sample_gamma_truncated(shape, rate, 1.0 / prior.scale_max, rng);
  prior.scale = 1.0 / x;
}

// eta2 | theta: density on (0, sd_max) proportional to
// eta^(-p) exp(-sum theta^2 / (2 eta^2)); substituting w = eta^(-2) gives
// Gamma((p - 1)/2, sum theta^2 / 2) truncated to w > 1/sd_max^2.
inline void update_normal_sd(NormalPrior& prior, const std::vector<double>& theta,
                             Rng& rng) {
  if (theta.size() < 2)
    throw std::invalid_argument("update_normal_sd: needs at least two coordinates");
  const double rate = 0.5 * sum_sq(theta);
  if (!(rate > 0.0))
    throw std::invalid_argument(
        "update_normal_sd: sum theta^2 is zero, conditional is degenerate");
  const double shape = 0.5 * (static_cast<double>(theta.size()) - 1.0);
  const double w =
      sample_gamma_truncated(shape, rate, 1.0 / (prior.sd_max * prior.sd_max), rng);
  prior.sd = 1.0 / std::sqrt(w);
}

inline double uniform_positive(Rng& rng, double hi) {
  double v;
  do {
    v = hi * uniform01(rng);
  } while (!(v > 0.0));
  return v;
}

}  // namespace detail

// One exact draw from theta | eta, y for the standard (unrestricted)
// posterior, coordinate by coordinate.
inline std::vector<double> sample_theta_given_eta_standard(const ParallelDataset& ds,
                                                           const WorkingPrior& prior,
                                                           Rng& rng) {
  detail::require_standard_errors(ds, "sample_theta_given_eta_standard");
  const std::size_t p = ds.p();
  std::vector<double> theta(p);
  const auto laplace_all = [&](double scale) {
    for (std::size_t i = 0; i < p; ++i)
      theta[i] = detail::laplace_conditional_draw(ds.y[i], scale, rng);
  };
  const auto normal_all = [&](double sd) {
    const double s2 = sd * sd;
    const double shrink = s2 / (1.0 + s2);
    const double cond_sd = std::sqrt(shrink);
    for (std::size_t i = 0; i < p; ++i)
      theta[i] = shrink * ds.y[i] + cond_sd * normal01(rng);
  };
  if (const auto* lap = std::get_if<LaplacePrior>(&prior)) {
    laplace_all(lap->scale);
  } else if (const auto* nor = std::get_if<NormalPrior>(&prior)) {
    normal_all(nor->sd);
  } else {
    const auto& mix = std::get<MixturePrior>(prior);
    if (mix.active == MixtureComponent::kLaplace)
      laplace_all(mix.laplace.scale);
    else
      normal_all(mix.normal.sd);
  }
  return theta;
}

// One draw of the hyperparameters given theta, updating the prior in place.
// For the mixture this refreshes z from its posterior odds, lambda from its
// Beta conditional, the active component's scale from its Gamma-form
// conditional, and the inactive component's scale from its uniform prior
// (given z, theta carries no information about the inactive component).
inline void sample_eta_given_theta(WorkingPrior& prior, const std::vector<double>& theta,
                                   Rng& rng) {
  for (double t : theta) {
    if (!std::isfinite(t))
      throw std::invalid_argument("sample_eta_given_theta: theta must be finite");
  }
  if (auto* lap = std::get_if<LaplacePrior>(&prior)) {
    detail::update_laplace_scale(*lap, theta, rng);
    return;
  }
  if (auto* nor = std::get_if<NormalPrior>(&prior)) {
    detail::update_normal_sd(*nor, theta, rng);
    return;
  }
  auto& mix = std::get<MixturePrior>(prior);
  const LaplaceLogDensity lap_dens{mix.laplace.scale};
  const NormalLogDensity nor_dens{mix.normal.sd};
  double log_lap = 0.0, log_nor = 0.0;
  for (double t : theta) {
    log_lap += lap_dens(t);
    log_nor += nor_dens(t);
  }
  const double log_odds =
      std::log(mix.weight) - std::log1p(-mix.weight) + log_lap - log_nor;
  const double p_lap = log_odds >= 0.0 ? 1.0 / (1.0 + std::exp(-log_odds))
                                       : std::exp(log_odds) / (1.0 + std::exp(log_odds));
  mix.active =
      uniform01(rng) < p_lap ? MixtureComponent::kLaplace : MixtureComponent::kNormal;
  const bool lap_active = mix.active == MixtureComponent::kLaplace;
  mix.weight = std::clamp(beta_draw(rng, lap_active ? 2.0 : 1.0, lap_active ? 1.0 : 2.0),
                          1e-12, 1.0 - 1e-12);
  if (lap_active) {
    detail::update_laplace_scale(mix.laplace, theta, rng);
    mix.normal.sd = detail::uniform_positive(rng, mix.normal.sd_max);
  } else {
    detail::update_normal_sd(mix.normal, theta, rng);
    mix.laplace.scale = detail::uniform_positive(rng, mix.laplace.scale_max);
  }
}

// Chain controls shared by both samplers. The standard sampler reads only
// n_scans/burn_in/seed and the test-mode flags; the robustified sampler also
// reads inner_mh_sweeps and the proposal settings nested in `mh` (whose own
// step/burn-in counts are ignored -- scan counts govern here).
struct GibbsConfig {
  std::size_t n_scans = 9000;
  std::size_t burn_in = 1000;
  std::size_t inner_mh_sweeps = 1;  // one sweep = p proposal attempts
  MhConfig mh;
  std::uint64_t seed = 1;
  bool fix_hyper = false;   // test mode: freeze the hyperparameters
  bool keep_draws = false;  // retain per-scan theta draws
};

// The robustified chain costs p proposals per sweep, so it runs fewer scans
// by default than the cheap conjugate sampler.
inline GibbsConfig robustified_defaults() {
  GibbsConfig cfg;
  cfg.n_scans = 4000;
  cfg.burn_in = 1000;
  return cfg;
}

struct GibbsOutput {
  std::vector<double> theta_mean;
  std::vector<double> u_mean;  // robustified runs only
  std::size_t retained = 0;
  double acceptance_rate = 0.0;  // post-burn-in MH acceptance (robustified)
  int final_k = 0;               // proposal window size at the end (robustified)
  WorkingPrior final_prior;
  std::vector<std::vector<double>> theta_draws;  // filled when keep_draws is set
};

inline std::vector<double> posterior_means(const std::vector<std::vector<double>>& draws) {
  if (draws.empty()) throw std::invalid_argument("posterior_means: no retained draws");
  std::vector<double> mean(draws.front().size(), 0.0);
  for (const auto& d : draws) {
    if (d.size() != mean.size())
      throw std::invalid_argument("posterior_means: draws have inconsistent lengths");
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += d[i];
  }
  for (auto& m : mean) m /= static_cast<double>(draws.size());
  return mean;
}

namespace detail {

inline void check_gibbs_config(const ParallelDataset& ds, const GibbsConfig& cfg,
                               const char* who) {
  if (!ds.reordered)
    throw std::invalid_argument(std::string(who) +
                                ": dataset must be reordered (reorder_by_q) first");
  if (cfg.burn_in >= cfg.n_scans)
    throw std::invalid_argument(std::string(who) +
                                ": burn-in must leave at least one retained scan");
}

// Calls fn with the per-coordinate log density of the currently active
// component, resolving the mixture's latent indicator.
template <class Fn>
void with_active_density(const WorkingPrior& prior, Fn&& fn) {
  if (const auto* lap = std::get_if<LaplacePrior>(&prior)) {
    fn(LaplaceLogDensity{lap->scale});
  } else if (const auto* nor = std::get_if<NormalPrior>(&prior)) {
    fn(NormalLogDensity{nor->sd});
  } else {
    const auto& mix = std::get<MixturePrior>(prior);
    if (mix.active == MixtureComponent::kLaplace)
      fn(LaplaceLogDensity{mix.laplace.scale});
    else
      fn(NormalLogDensity{mix.normal.sd});
  }
}

// Which of the (at most two) proposal-tuning regimes the prior's current
// density belongs to.  The mixture's latent component switches the MH target
// between a Laplace-shaped and a normal-shaped posterior whose well-tuned
// window sizes differ, so window adaptation is tracked per component.
inline int active_regime(const WorkingPrior& prior) {
  const auto* mix = std::get_if<MixturePrior>(&prior);
  if (mix == nullptr) return 0;
  return mix->active == MixtureComponent::kLaplace ? 0 : 1;
}

}  // namespace detail

// Standard Gibbs sampler: theta | eta exactly, then eta | theta, repeated.
// The initial hyperparameter state is the passed-in prior.
inline GibbsOutput standard_gibbs(const ParallelDataset& ds, WorkingPrior prior,
                                  const GibbsConfig& cfg) {
  detail::check_gibbs_config(ds, cfg, "standard_gibbs");
  Rng rng(cfg.seed);
  const std::size_t p = ds.p();
  GibbsOutput out;
  out.theta_mean.assign(p, 0.0);
  for (std::size_t scan = 0; scan < cfg.n_scans; ++scan) {
    std::vector<double> theta = sample_theta_given_eta_standard(ds, prior, rng);
    if (!cfg.fix_hyper) sample_eta_given_theta(prior, theta, rng);
    if (scan < cfg.burn_in) continue;
    for (std::size_t i = 0; i < p; ++i) out.theta_mean[i] += theta[i];
    ++out.retained;
    if (cfg.keep_draws) out.theta_draws.push_back(std::move(theta));
  }
  for (auto& m : out.theta_mean) m /= static_cast<double>(out.retained);
  out.final_prior = std::move(prior);
  return out;
}

// Robustified Gibbs sampler: the theta update runs inner_mh_sweeps sweeps of
// window-shuffle proposals on the pinned-quantile state (u persists across
// scans), then eta is refreshed from theta = y - Phi^{-1}(u). The proposal
// window adapts during the Gibbs burn-in only; afterwards one k per density
// regime is frozen and the acceptance rate is tallied for diagnostics. The
// observer is invoked once per retained scan with the underlying chain.
//
// Mixture caution: the permutation update reshapes theta toward whichever
// component is active, which in turn makes that component look better to the
// z update — both components are metastable and the chain can sit in the
// wrong one for the entire run. Start the mixture from a state fitted by
// standard_gibbs (its conjugate theta draws have no such feedback), e.g.
//   prior = standard_gibbs(ds, MixturePrior{}, warm_cfg).final_prior;
// which is what the simulation harness does.
template <class Observer>
GibbsOutput robustified_gibbs(const ParallelDataset& ds, WorkingPrior prior,
                              const GibbsConfig& cfg, Observer&& observe) {
  detail::check_gibbs_config(ds, cfg, "robustified_gibbs");
  if (cfg.inner_mh_sweeps == 0)
    throw std::invalid_argument("robustified_gibbs: needs at least one sweep per scan");
  const std::size_t p = ds.p();
  const ThetaGrid grid(ds);
  Rng hyper_rng(derive_seed(cfg.seed, 2));
  const std::uint64_t chain_seed = derive_seed(cfg.seed, 1);

  std::optional<PermutationChain> chain;
  detail::with_active_density(prior, [&](const auto& dens) {
    chain.emplace(grid, cfg.mh.initial_k, chain_seed, dens);
  });

  GibbsOutput out;
  out.theta_mean.assign(p, 0.0);
  out.u_mean.assign(p, 0.0);
  std::vector<double> theta(p);
  std::size_t accepted = 0, tallied = 0;
  const std::size_t sweep_steps = cfg.inner_mh_sweeps * std::max<std::size_t>(p, 1);

  // Per-regime window bookkeeping (see detail::active_regime): a smoothed
  // log k per regime during burn-in, one frozen k per regime afterwards.
  double ewma_log_k[2] = {0.0, 0.0};
  std::size_t ewma_n[2] = {0, 0};
  std::size_t frozen_k[2] = {0, 0};
  const auto k_from_ewma = [&](int r) {
    return std::clamp<std::size_t>(
        static_cast<std::size_t>(std::lround(std::exp(ewma_log_k[r]))), 2, p);
  };

  for (std::size_t scan = 0; scan < cfg.n_scans; ++scan) {
    const bool adapting = scan < cfg.burn_in;
    const int regime = detail::active_regime(prior);
    if (scan == cfg.burn_in) {
      for (int r = 0; r < 2; ++r) {
        if (ewma_n[r] > 0)
          frozen_k[r] = k_from_ewma(r);
        else if (ewma_n[1 - r] > 0)
          frozen_k[r] = k_from_ewma(1 - r);
        else
          frozen_k[r] = chain->k();
      }
      // A mixture chain can flip components after the freeze.  A regime the
      // burn-in (almost) never visited has only a borrowed k above, and the
      // two component densities are rough on different scales, so the
      // borrowed k breaks the acceptance contract the moment the chain
      // flips.  Close the gap while still inside burn-in: probe virtual
      // proposals against the thin regime's density -- hyperparameter set to
      // its conditional mean given the current effects, since an inactive
      // component's stored value is an arbitrary redraw -- and pick the k
      // whose probed acceptance hits the target.
      if (const auto* mix = std::get_if<MixturePrior>(&prior);
          mix != nullptr && cfg.burn_in > 0 && p >= 2) {
        Rng probe_rng(derive_seed(cfg.seed, 3));
        const auto calibrated_k = [&](const auto& dens, std::size_t k0) {
          double log_k = std::log(static_cast<double>(k0));
          double settled = 0.0;
          int settled_n = 0;
          for (int round = 0; round < 30; ++round) {
            const std::size_t k = std::clamp<std::size_t>(
                static_cast<std::size_t>(std::lround(std::exp(log_k))), 2, p);
            const double est = chain->probe_acceptance(dens, k, 32, probe_rng);
            const double gain = 0.9 / (1.0 + round / 6.0);
            log_k = std::clamp(log_k + gain * (est - cfg.mh.target_acceptance),
                               std::log(2.0), std::log(static_cast<double>(p)));
            if (round >= 22) {
              settled += log_k;
              ++settled_n;
            }
          }
          return std::clamp<std::size_t>(
              static_cast<std::size_t>(std::lround(std::exp(settled / settled_n))), 2,
              p);
        };
        for (int r = 0; r < 2; ++r) {
          if (ewma_n[r] >= 10) continue;
          if (r == 0) {
            const double b = std::clamp(detail::sum_abs(theta) / static_cast<double>(p - 1),
                                        1e-3, mix->laplace.scale_max);
            frozen_k[r] = calibrated_k(LaplaceLogDensity{b}, frozen_k[r]);
          } else {
            const double sd =
                std::clamp(std::sqrt(detail::sum_sq(theta) / static_cast<double>(p - 1)),
                           1e-3, mix->normal.sd_max);
            frozen_k[r] = calibrated_k(NormalLogDensity{sd}, frozen_k[r]);
          }
        }
      }
    }
    if (!adapting) chain->set_k(frozen_k[regime]);
    detail::with_active_density(prior, [&](const auto& dens) {
      chain->reset_prior(dens);
      for (std::size_t s = 0; s < sweep_steps; ++s) {
        const bool ok = chain->step(dens);
        if (!adapting) {
          accepted += ok ? 1 : 0;
          ++tallied;
        }
        if (chain->window_steps() >= cfg.mh.adapt_every) {
          if (adapting) {
            chain->adapt(cfg.mh.target_acceptance);
            const double lk = std::log(static_cast<double>(chain->k()));
            ewma_log_k[regime] =
                ewma_n[regime] == 0 ? lk : 0.95 * ewma_log_k[regime] + 0.05 * lk;
            ++ewma_n[regime];
          } else {
            chain->reset_window();
          }
        }
      }
    });
    for (std::size_t i = 0; i < p; ++i) theta[i] = chain->theta_at(i);
    if (!cfg.fix_hyper) sample_eta_given_theta(prior, theta, hyper_rng);
    if (scan < cfg.burn_in) continue;
    for (std::size_t i = 0; i < p; ++i) {
      out.theta_mean[i] += theta[i];
      out.u_mean[i] += chain->u_at(i);
    }
    ++out.retained;
    if (cfg.keep_draws) out.theta_draws.push_back(theta);
    observe(static_cast<const PermutationChain&>(*chain));
  }
  for (std::size_t i = 0; i < p; ++i) {
    out.theta_mean[i] /= static_cast<double>(out.retained);
    out.u_mean[i] /= static_cast<double>(out.retained);
  }
  out.acceptance_rate =
      tallied > 0 ? static_cast<double>(accepted) / static_cast<double>(tallied) : 0.0;
  out.final_k = chain->k();
  out.final_prior = std::move(prior);
  return out;
}

inline GibbsOutput robustified_gibbs(const ParallelDataset& ds, WorkingPrior prior,
                                     const GibbsConfig& cfg) {
  return robustified_gibbs(ds, std::move(prior), cfg,
                           [](const PermutationChain&) {});
}

}  // namespace pebayes
