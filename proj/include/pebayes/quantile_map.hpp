#pragma once

// The error-quantile change of variables u_i = Phi_i(y_i - theta_i) and its
// inverse, the q-values Phi_i(y_i) used to pre-sort coordinates, and the
// q-sorted reordering of a dataset.

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "pebayes/distributions.hpp"

namespace pebayes {

// Per-coordinate error distribution; entries must be continuous location
// families (Normal / Laplace / ScaledT), which is what cdf/quantile support.
using ErrorModel = std::vector<DistSpec>;

struct ParallelDataset {
  std::vector<double> y;
  ErrorModel errors;
  std::vector<double> q_values;                // filled by reorder_by_q
  std::vector<std::size_t> ordering;           // original index -> sorted position
  std::optional<std::vector<double>> true_theta;  // simulation only
  bool reordered = false;

  std::size_t p() const { return y.size(); }
};

inline ParallelDataset make_dataset(std::vector<double> y, ErrorModel errors,
                                    std::optional<std::vector<double>> true_theta = {}) {
  if (y.size() != errors.size())
    throw std::invalid_argument("make_dataset: y and errors must have equal length");
  if (true_theta && true_theta->size() != y.size())
    throw std::invalid_argument("make_dataset: true_theta length mismatch");
  ParallelDataset ds;
  ds.y = std::move(y);
  ds.errors = std::move(errors);
  ds.true_theta = std::move(true_theta);
  return ds;
}

// Dataset with every error N(0,1), the only case the simulation study uses.
inline ParallelDataset make_standard_dataset(std::vector<double> y,
                                             std::optional<std::vector<double>> true_theta = {}) {
  ErrorModel errors(y.size(), DistSpec{Normal{0.0, 1.0}});
  return make_dataset(std::move(y), std::move(errors), std::move(true_theta));
}

namespace detail {

// Quantile inversion blows up at the endpoints, so u is pinched into
// [1e-14, 1-1e-14]; values at exactly 0 or 1 are rejected upstream.
inline double clamp_u(double u) { return std::clamp(u, 1e-14, 1.0 - 1e-14); }

}  // namespace detail

inline std::vector<double> u_from_theta(const ParallelDataset& ds,
                                        const std::vector<double>& theta) {
  if (theta.size() != ds.p())
    throw std::invalid_argument("u_from_theta: theta length != p");
  std::vector<double> u(ds.p());
  for (std::size_t i = 0; i < ds.p(); ++i)
    u[i] = detail::clamp_u(cdf(ds.errors[i], ds.y[i] - theta[i]));
  return u;
}

inline std::vector<double> theta_from_u(const ParallelDataset& ds, const std::vector<double>& u) {
  if (u.size() != ds.p())
    throw std::invalid_argument("theta_from_u: u length != p");
  std::vector<double> theta(ds.p());
  for (std::size_t i = 0; i < ds.p(); ++i) {
    if (!(u[i] > 0.0) || !(u[i] < 1.0))
      throw std::invalid_argument("theta_from_u: u[" + std::to_string(i) +
                                  "] outside (0,1): " + std::to_string(u[i]));
    theta[i] = ds.y[i] - quantile(ds.errors[i], detail::clamp_u(u[i]));
  }
  return theta;
}

// q_i = Phi_i(y_i): the error cdf evaluated at y_i, i.e. the quantile of the
// observation under a zero effect.
inline std::vector<double> q_values(const ParallelDataset& ds) {
  std::vector<double> q(ds.p());
  for (std::size_t i = 0; i < ds.p(); ++i) q[i] = cdf(ds.errors[i], ds.y[i]);
  return q;
}

// Sorts the dataset ascending by q and records the original-index ->
// position map.  q saturates to exactly 0 or 1 in double precision once |y|
// is extreme enough, so ties are broken by y (then by current index), which
// keeps the most extreme coordinates genuinely at the ends.  Reordering an
// already-reordered dataset composes the permutations, which makes the
// operation idempotent.
inline ParallelDataset reorder_by_q(const ParallelDataset& ds) {
  const std::size_t p = ds.p();
  const std::vector<double> q = q_values(ds);
  std::vector<std::size_t> idx(p);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&q, &ds](std::size_t a, std::size_t b) {
    if (q[a] != q[b]) return q[a] < q[b];
    return ds.y[a] < ds.y[b];
  });

  ParallelDataset out;
  out.y.resize(p);
  out.errors.reserve(p);
  out.q_values.resize(p);
  if (ds.true_theta) out.true_theta.emplace(p);
  std::vector<std::size_t> position(p);  // current index -> new position
  for (std::size_t k = 0; k < p; ++k) {
    const std::size_t i = idx[k];
    position[i] = k;
    out.y[k] = ds.y[i];
    out.errors.push_back(ds.errors[i]);
    out.q_values[k] = q[i];
    if (ds.true_theta) (*out.true_theta)[k] = (*ds.true_theta)[i];
  }
  out.ordering.resize(p);
  for (std::size_t orig = 0; orig < p; ++orig) {
    const std::size_t current = ds.reordered ? ds.ordering[orig] : orig;
    out.ordering[orig] = position[current];
  }
  out.reordered = true;
  return out;
}

}  // namespace pebayes
