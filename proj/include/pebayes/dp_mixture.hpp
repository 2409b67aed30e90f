#pragma once
// Dirichlet-process mixture prior over the effects, fit by a partially
// collapsed Gibbs sampler: cluster assignments are resampled under the
// Chinese-restaurant representation with both the cluster means and theta
// integrated out (everything is conjugate once y_i | mu ~ N(mu, sigma^2 + 1)),
// then means, theta, and the two variances are refreshed from their exact
// conditionals. Collapsing is valid here because the marginalized blocks are
// redrawn immediately after the assignment pass, in this fixed order.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "pebayes/distributions.hpp"
#include "pebayes/hier_gibbs.hpp"
#include "pebayes/math.hpp"
#include "pebayes/quantile_map.hpp"
#include "pebayes/rng.hpp"

namespace pebayes {

// Open state so tests can drive the three update blocks independently.
// Cluster ids are kept compact (0..K-1) at all times: emptied clusters are
// swap-removed on the spot, so no pass ever sees a gap.
struct DpState {
  std::vector<std::uint32_t> cluster_of;  // cluster id per coordinate
  std::vector<double> cluster_mean;       // mu_c, one per active cluster
  std::vector<double> cluster_sum;        // sum of y over members (bookkeeping)
  std::vector<std::size_t> cluster_size;  // n_c
  double sigma2 = 2.5;    // kernel variance, prior InverseGamma(3, 5)
  double sigma_b2 = 5.0;  // base-distribution variance, prior InverseGamma(5, 20)
  double alpha = 1.0;     // concentration
  std::vector<double> theta;

  std::size_t n_clusters() const { return cluster_mean.size(); }
};

// Everyone starts in one cluster; variances start at their prior means and
// theta at the raw observations.
inline DpState make_dp_initial_state(const std::vector<double>& y, double alpha = 1.0) {
  if (y.empty()) throw std::invalid_argument("make_dp_initial_state: empty data");
  if (!(alpha > 0.0)) throw std::invalid_argument("make_dp_initial_state: alpha must be positive");
  DpState st;
  st.cluster_of.assign(y.size(), 0);
  double sum = 0.0;
  for (double v : y) sum += v;
  st.cluster_mean = {0.0};
  st.cluster_sum = {sum};
  st.cluster_size = {y.size()};
  st.alpha = alpha;
  st.theta = y;
  return st;
}

namespace detail {

inline void dp_remove_from_cluster(DpState& st, std::size_t i, double yi) {
  const std::uint32_t c = st.cluster_of[i];
  st.cluster_sum[c] -= yi;
  if (--st.cluster_size[c] > 0) return;
  // Cluster emptied: swap-remove it and relabel the members of the moved one.
  const std::uint32_t last = static_cast<std::uint32_t>(st.n_clusters() - 1);
  if (c != last) {
    st.cluster_mean[c] = st.cluster_mean[last];
    st.cluster_sum[c] = st.cluster_sum[last];
    st.cluster_size[c] = st.cluster_size[last];
    for (auto& id : st.cluster_of)
      if (id == last) id = c;
  }
  st.cluster_mean.pop_back();
  st.cluster_sum.pop_back();
  st.cluster_size.pop_back();
}

inline double dp_log_predictive(double yi, double mean, double var) {
  const double sd = std::sqrt(var);
  return normal_log_pdf((yi - mean) / sd) - std::log(sd);
}

}  // namespace detail

// One Chinese-restaurant sweep: each coordinate leaves its cluster and is
// reseated with weight n_c * N(y_i | m_c, v_c + sigma^2 + 1) for existing
// clusters (m_c, v_c the posterior of mu_c given the remaining members) or
// alpha * N(y_i | 0, sigma_b^2 + sigma^2 + 1) for a fresh one.
inline void update_assignments(DpState& st, const std::vector<double>& y, Rng& rng) {
  const double obs_var = st.sigma2 + 1.0;
  std::vector<double> logw;
  for (std::size_t i = 0; i < y.size(); ++i) {
    detail::dp_remove_from_cluster(st, i, y[i]);
    const std::size_t n_k = st.n_clusters();
    logw.assign(n_k + 1, 0.0);
    for (std::size_t c = 0; c < n_k; ++c) {
      const double v_c =
          1.0 / (1.0 / st.sigma_b2 + static_cast<double>(st.cluster_size[c]) / obs_var);
      const double m_c = v_c * st.cluster_sum[c] / obs_var;
      logw[c] = std::log(static_cast<double>(st.cluster_size[c])) +
                detail::dp_log_predictive(y[i], m_c, v_c + obs_var);
    }
    logw[n_k] =
        std::log(st.alpha) + detail::dp_log_predictive(y[i], 0.0, st.sigma_b2 + obs_var);

    const double hi = *std::max_element(logw.begin(), logw.end());
    double total = 0.0;
    for (auto& w : logw) {
      w = std::exp(w - hi);
      total += w;
    }
    double pick = uniform01(rng) * total;
    std::size_t chosen = n_k;
    for (std::size_t c = 0; c <= n_k; ++c) {
      pick -= logw[c];
      if (pick < 0.0) {
        chosen = c;
        break;
      }
    }
    if (chosen == n_k) {  // open a new cluster; mu is drawn in the next block
      st.cluster_mean.push_back(0.0);
      st.cluster_sum.push_back(0.0);
      st.cluster_size.push_back(0);
    }
    st.cluster_of[i] = static_cast<std::uint32_t>(chosen);
    st.cluster_sum[chosen] += y[i];
    ++st.cluster_size[chosen];
  }
}

// Conjugate refresh of the cluster means, then of theta:
//   mu_c | members ~ N(m_c, v_c) with v_c = 1/(1/sigma_b^2 + n_c/(sigma^2+1)),
//   theta_i | y_i, mu ~ N((y_i sigma^2 + mu_c(i))/(sigma^2+1), sigma^2/(sigma^2+1)).
inline void update_cluster_means_and_theta(DpState& st, const std::vector<double>& y,
                                           Rng& rng) {
  const double obs_var = st.sigma2 + 1.0;
  for (std::size_t c = 0; c < st.n_clusters(); ++c) {
    const double v_c =
        1.0 / (1.0 / st.sigma_b2 + static_cast<double>(st.cluster_size[c]) / obs_var);
    const double m_c = v_c * st.cluster_sum[c] / obs_var;
    st.cluster_mean[c] = m_c + std::sqrt(v_c) * normal01(rng);
  }
  const double shrink = st.sigma2 / obs_var;
  const double cond_sd = std::sqrt(shrink);
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double mu = st.cluster_mean[st.cluster_of[i]];
    st.theta[i] = shrink * y[i] + mu / obs_var + cond_sd * normal01(rng);
  }
}

// Inverse-gamma refreshes of the kernel and base variances.
inline void update_variances(DpState& st, Rng& rng) {
  double within = 0.0;
  for (std::size_t i = 0; i < st.theta.size(); ++i) {
    const double d = st.theta[i] - st.cluster_mean[st.cluster_of[i]];
    within += d * d;
  }
  st.sigma2 = sample(
      DistSpec(InverseGamma{3.0 + 0.5 * static_cast<double>(st.theta.size()),
                            5.0 + 0.5 * within}),
      rng);
  double between = 0.0;
  for (double mu : st.cluster_mean) between += mu * mu;
  st.sigma_b2 = sample(
      DistSpec(InverseGamma{5.0 + 0.5 * static_cast<double>(st.n_clusters()),
                            20.0 + 0.5 * between}),
      rng);
}

struct DpConfig {
  std::size_t n_scans = 4000;
  std::size_t burn_in = 1000;
  double alpha = 1.0;
  std::uint64_t seed = 1;
  bool force_single_cluster = false;  // test mode: skip the assignment pass
  bool fix_variances = false;         // test mode: keep sigma2/sigma_b2 at init
  bool keep_draws = false;
};

struct DpOutput {
  std::vector<double> theta_mean;
  std::size_t retained = 0;
  double mean_clusters = 0.0;  // average K over retained scans
  std::vector<std::vector<double>> theta_draws;
};

// Full fit: assignments -> means/theta -> variances, repeated, posterior
// means over the retained scans.
inline DpOutput dp_fit(const ParallelDataset& ds, const DpConfig& cfg) {
  if (!ds.reordered)
    throw std::invalid_argument("dp_fit: dataset must be reordered (reorder_by_q) first");
  if (cfg.burn_in >= cfg.n_scans)
    throw std::invalid_argument("dp_fit: burn-in must leave at least one retained scan");
  detail::require_standard_errors(ds, "dp_fit");

  Rng rng(cfg.seed);
  DpState st = make_dp_initial_state(ds.y, cfg.alpha);
  const std::size_t p = ds.p();

  DpOutput out;
  out.theta_mean.assign(p, 0.0);
  for (std::size_t scan = 0; scan < cfg.n_scans; ++scan) {
    if (!cfg.force_single_cluster) update_assignments(st, ds.y, rng);
    update_cluster_means_and_theta(st, ds.y, rng);
    if (!cfg.fix_variances) update_variances(st, rng);
    if (scan < cfg.burn_in) continue;
    for (std::size_t i = 0; i < p; ++i) out.theta_mean[i] += st.theta[i];
    out.mean_clusters += static_cast<double>(st.n_clusters());
    ++out.retained;
    if (cfg.keep_draws) out.theta_draws.push_back(st.theta);
  }
  for (auto& m : out.theta_mean) m /= static_cast<double>(out.retained);
  out.mean_clusters /= static_cast<double>(out.retained);
  return out;
}

}  // namespace pebayes
