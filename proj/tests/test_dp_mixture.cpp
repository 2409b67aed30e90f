#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "pebayes/dp_mixture.hpp"
#include "support/oracles.hpp"

using namespace pebayes;

namespace {

// Posterior co-clustering probability for p=2 under fixed variances: the
// partition prior is 1/(1+alpha) for {12}, alpha/(1+alpha) for {1}{2}, and
// the marginal likelihoods are bivariate normals with and without the shared
// cluster mean.
double coclustering_probability(double y1, double y2, double sigma2, double sigma_b2,
                                double alpha) {
  const double v = sigma2 + 1.0;
  // shared mean: covariance [[v+b, b], [b, v+b]]
  const double b = sigma_b2;
  const double det = (v + b) * (v + b) - b * b;
  const double quad =
      ((v + b) * y1 * y1 - 2.0 * b * y1 * y2 + (v + b) * y2 * y2) / det;
  const double log_same = -std::log(2.0 * kPi) - 0.5 * std::log(det) - 0.5 * quad;
  const double marg_var = v + b;
  const double log_split = -std::log(2.0 * kPi) - std::log(marg_var) -
                           0.5 * (y1 * y1 + y2 * y2) / marg_var;
  const double lo = log_same - log_split - std::log(alpha);
  return 1.0 / (1.0 + std::exp(-lo));
}

double fraction_single_cluster(const std::vector<double>& y, double sigma2,
                               double sigma_b2, double alpha, int sweeps,
                               std::uint64_t seed) {
  DpState st = make_dp_initial_state(y, alpha);
  st.sigma2 = sigma2;
  st.sigma_b2 = sigma_b2;
  Rng rng(seed);
  int single = 0;
  for (int s = 0; s < sweeps; ++s) {
    update_assignments(st, y, rng);
    update_cluster_means_and_theta(st, y, rng);
    single += st.n_clusters() == 1;
  }
  return single / static_cast<double>(sweeps);
}

void check_bookkeeping(const DpState& st, const std::vector<double>& y) {
  REQUIRE(st.cluster_mean.size() == st.cluster_size.size());
  REQUIRE(st.cluster_mean.size() == st.cluster_sum.size());
  std::vector<std::size_t> counts(st.n_clusters(), 0);
  std::vector<double> sums(st.n_clusters(), 0.0);
  for (std::size_t i = 0; i < y.size(); ++i) {
    REQUIRE(st.cluster_of[i] < st.n_clusters());
    ++counts[st.cluster_of[i]];
    sums[st.cluster_of[i]] += y[i];
  }
  for (std::size_t c = 0; c < st.n_clusters(); ++c) {
    REQUIRE(counts[c] == st.cluster_size[c]);  // no empty cluster survives
    REQUIRE(counts[c] > 0);
    REQUIRE_THAT(sums[c], Catch::Matchers::WithinAbs(st.cluster_sum[c], 1e-9));
  }
}

}  // namespace

TEST_CASE("far-apart observations split into different clusters", "[dp]") {
  const double frac =
      fraction_single_cluster({0.0, 100.0}, 1.0, 1.0, 1.0, 500, 11);
  CHECK(frac < 0.01);
}

TEST_CASE("near-identical observations co-cluster at the predicted rate", "[dp]") {
  const double sigma2 = 1.0, sigma_b2 = 25.0, alpha = 1.0;
  const double exact = coclustering_probability(0.0, 0.01, sigma2, sigma_b2, alpha);
  REQUIRE(exact > 0.6);  // "same cluster in the large majority of updates"
  const double frac =
      fraction_single_cluster({0.0, 0.01}, sigma2, sigma_b2, alpha, 4000, 13);
  CHECK_THAT(frac, Catch::Matchers::WithinAbs(exact, 0.05));
}

TEST_CASE("vanishing concentration freezes the partition", "[dp]") {
  Rng data_rng(17);
  std::vector<double> y(50);
  for (auto& v : y) v = 2.0 * normal01(data_rng);
  DpState st = make_dp_initial_state(y, 1e-8);
  st.sigma2 = 1.0;
  st.sigma_b2 = 4.0;
  Rng rng(19);
  for (int s = 0; s < 100; ++s) {
    update_assignments(st, y, rng);
    REQUIRE(st.n_clusters() == 1);
  }
}

TEST_CASE("cluster mean conditional approaches the sample mean for a flat base",
          "[dp]") {
  Rng data_rng(23);
  std::vector<double> y(40);
  for (auto& v : y) v = 1.5 + normal01(data_rng);
  const double ybar = oracles::mean(y);

  DpState st = make_dp_initial_state(y);
  st.sigma2 = 1.0;
  st.sigma_b2 = 1e8;  // essentially flat base distribution
  Rng rng(29);
  constexpr int n = 30'000;
  std::vector<double> mu_draws(n);
  for (auto& d : mu_draws) {
    update_cluster_means_and_theta(st, y, rng);
    d = st.cluster_mean[0];
  }
  const double se = std::sqrt(oracles::variance(mu_draws) / n);
  CHECK_THAT(oracles::mean(mu_draws), Catch::Matchers::WithinAbs(ybar, 4.0 * se));
}

TEST_CASE("theta refresh draws from the equal-precision average at unit variance",
          "[dp]") {
  // Condition on each scan's freshly drawn mu: the residual
  // theta - (y sigma^2 + mu)/(sigma^2 + 1) must be N(0, sigma^2/(sigma^2+1)).
  const std::vector<double> y = {3.0};
  DpState st = make_dp_initial_state(y);
  st.sigma2 = 1.0;
  st.sigma_b2 = 2.0;
  Rng rng(31);
  constexpr int n = 200'000;
  std::vector<double> residuals(n);
  for (auto& r : residuals) {
    update_cluster_means_and_theta(st, y, rng);
    r = st.theta[0] - 0.5 * (y[0] + st.cluster_mean[0]);
  }
  const double se = std::sqrt(0.5 / n);
  CHECK(std::fabs(oracles::mean(residuals)) < 4.0 * se);
  CHECK_THAT(oracles::variance(residuals), Catch::Matchers::WithinRel(0.5, 0.02));
}

TEST_CASE("theta conditional formula matches quadrature", "[dp]") {
  const double y = 2.0, mu = 0.0, sigma2 = 0.5;
  const auto dens = [&](double t) {
    return std::exp(-0.5 * (y - t) * (y - t) - 0.5 * (t - mu) * (t - mu) / sigma2);
  };
  const double z = oracles::integrate(dens, -10.0, 12.0);
  const double quad_mean =
      oracles::integrate([&](double t) { return t * dens(t); }, -10.0, 12.0) / z;
  const double quad_m2 =
      oracles::integrate([&](double t) { return t * t * dens(t); }, -10.0, 12.0) / z;
  const double m = (y * sigma2 + mu) / (sigma2 + 1.0);
  const double v = sigma2 / (sigma2 + 1.0);
  CHECK_THAT(quad_mean, Catch::Matchers::WithinAbs(m, 1e-8));
  CHECK_THAT(quad_m2 - quad_mean * quad_mean, Catch::Matchers::WithinAbs(v, 1e-8));
}

TEST_CASE("kernel variance conditional collapses to its prior scale", "[dp]") {
  // With theta pinned at the cluster means the within-cluster sum vanishes
  // and sigma^2 ~ InverseGamma(3 + p/2, 5): mean 5/(2 + p/2) at p=6.
  const std::vector<double> y = {-2.0, -1.0, 0.0, 1.0, 2.0, 3.0};
  DpState st = make_dp_initial_state(y);
  Rng seed_rng(37);
  update_cluster_means_and_theta(st, y, seed_rng);
  for (std::size_t i = 0; i < y.size(); ++i)
    st.theta[i] = st.cluster_mean[st.cluster_of[i]];

  Rng rng(41);
  constexpr int n = 40'000;
  std::vector<double> draws(n);
  const DpState frozen = st;
  for (auto& d : draws) {
    DpState tmp = frozen;
    update_variances(tmp, rng);
    d = tmp.sigma2;
  }
  const double se = std::sqrt(oracles::variance(draws) / n);
  CHECK_THAT(oracles::mean(draws), Catch::Matchers::WithinAbs(1.0, 4.0 * se));
}

TEST_CASE("variance conditionals match quadrature", "[dp]") {
  // p=5 with within-cluster sum 3: sigma^2 ~ InverseGamma(5.5, 6.5). The
  // x-space density is too stiff for the Simpson oracle (sharp peak inside a
  // wide tail), so the moments are integrated on the precision scale
  // w = 1/sigma^2, where the kernel w^4.5 exp(-6.5 w) is smooth:
  // E[sigma^(2k)] = int w^(4.5-k) exp(-6.5 w) dw / int w^4.5 exp(-6.5 w) dw.
  const auto kernel = [](double w, double pow_shift) {
    return std::pow(w, 4.5 - pow_shift) * std::exp(-6.5 * w);
  };
  const double z = oracles::integrate([&](double w) { return kernel(w, 0.0); }, 0.0, 8.0);
  const double exact_mean =
      oracles::integrate([&](double w) { return kernel(w, 1.0); }, 0.0, 8.0) / z;
  const double exact_m2 =
      oracles::integrate([&](double w) { return kernel(w, 2.0); }, 0.0, 8.0) / z;

  std::vector<double> y(5, 1.0);
  DpState base = make_dp_initial_state(y);
  base.cluster_mean = {0.0};
  for (auto& t : base.theta) t = std::sqrt(3.0 / 5.0);  // sum of squares = 3

  Rng rng(43);
  constexpr int n = 300'000;
  std::vector<double> draws(n);
  for (auto& d : draws) {
    DpState tmp = base;
    update_variances(tmp, rng);
    d = tmp.sigma2;
  }
  const double emp_mean = oracles::mean(draws);
  CHECK_THAT(emp_mean, Catch::Matchers::WithinRel(exact_mean, 0.01));
  CHECK_THAT(oracles::variance(draws),
             Catch::Matchers::WithinRel(exact_m2 - exact_mean * exact_mean, 0.03));
}

TEST_CASE("base variance conditional uses the active cluster means", "[dp]") {
  // Four clusters with means summing squares to 10: InverseGamma(7, 25),
  // mean 25/6.
  std::vector<double> y = {-2.0, -1.0, 1.0, 2.0};
  DpState st = make_dp_initial_state(y);
  st.cluster_of = {0, 1, 2, 3};
  st.cluster_mean = {-2.0, -1.0, 1.0, 2.0};
  st.cluster_sum = {-2.0, -1.0, 1.0, 2.0};
  st.cluster_size = {1, 1, 1, 1};
  st.theta = st.cluster_mean;

  Rng rng(47);
  constexpr int n = 60'000;
  std::vector<double> draws(n);
  for (auto& d : draws) {
    DpState tmp = st;
    update_variances(tmp, rng);
    d = tmp.sigma_b2;
  }
  const double se = std::sqrt(oracles::variance(draws) / n);
  CHECK_THAT(oracles::mean(draws), Catch::Matchers::WithinAbs(25.0 / 6.0, 4.0 * se));
}

TEST_CASE("cluster bookkeeping survives full scans", "[dp]") {
  Rng data_rng(53);
  std::vector<double> y(80);
  for (std::size_t i = 0; i < y.size(); ++i)
    y[i] = (i % 2 == 0 ? -4.0 : 4.0) + normal01(data_rng);

  DpState st = make_dp_initial_state(y);
  Rng rng(59);
  for (int scan = 0; scan < 40; ++scan) {
    update_assignments(st, y, rng);
    update_cluster_means_and_theta(st, y, rng);
    update_variances(st, rng);
    check_bookkeeping(st, y);
    REQUIRE(st.sigma2 > 0.0);
    REQUIRE(st.sigma_b2 > 0.0);
  }
}

TEST_CASE("input order does not matter after reordering", "[dp]") {
  Rng data_rng(61);
  std::vector<double> y(60);
  for (auto& v : y) v = 3.0 * normal01(data_rng);
  std::vector<double> shuffled = y;
  std::shuffle(shuffled.begin(), shuffled.end(), data_rng);

  DpConfig cfg;
  cfg.n_scans = 400;
  cfg.burn_in = 100;
  cfg.seed = 7;
  const DpOutput a = dp_fit(reorder_by_q(make_standard_dataset(y)), cfg);
  const DpOutput b = dp_fit(reorder_by_q(make_standard_dataset(shuffled)), cfg);
  CHECK(a.theta_mean == b.theta_mean);
}

TEST_CASE("tightly clustered data is shrunk toward the common center", "[dp]") {
  Rng data_rng(67);
  std::vector<double> y(200);
  for (auto& v : y) v = normal01(data_rng);  // true effects all zero
  DpConfig cfg;
  cfg.n_scans = 800;
  cfg.burn_in = 200;
  cfg.seed = 9;
  const DpOutput out = dp_fit(reorder_by_q(make_standard_dataset(y)), cfg);
  const ParallelDataset ds = reorder_by_q(make_standard_dataset(y));
  double mean_abs_fit = 0.0, mean_abs_raw = 0.0;
  for (std::size_t i = 0; i < ds.p(); ++i) {
    mean_abs_fit += std::fabs(out.theta_mean[i]);
    mean_abs_raw += std::fabs(ds.y[i]);
  }
  CHECK(mean_abs_fit < mean_abs_raw);
}

TEST_CASE("single-cluster mode reduces to the conjugate hierarchy", "[dp]") {
  Rng data_rng(71);
  std::vector<double> y(100);
  for (auto& v : y) {
    const double th = 2.0 * normal01(data_rng);
    v = th + normal01(data_rng);
  }
  const ParallelDataset ds = reorder_by_q(make_standard_dataset(y));

  DpConfig cfg;
  cfg.force_single_cluster = true;
  cfg.fix_variances = true;  // sigma^2 = 2.5, sigma_b^2 = 5 from the initial state
  cfg.seed = 77;
  const DpOutput out = dp_fit(ds, cfg);

  // Exact posterior mean: mu | y ~ N(m, v) with v = 1/(1/5 + p/3.5),
  // m = v * sum(y)/3.5; E[theta_i] = (2.5 y_i + m)/3.5.
  const double obs_var = 3.5;
  const double v = 1.0 / (1.0 / 5.0 + ds.p() / obs_var);
  double sum_y = std::accumulate(ds.y.begin(), ds.y.end(), 0.0);
  const double m = v * sum_y / obs_var;
  const double draw_sd = std::sqrt(2.5 / obs_var);
  const double se = draw_sd / std::sqrt(static_cast<double>(out.retained));
  for (std::size_t i = 0; i < ds.p(); ++i) {
    const double oracle = (2.5 * ds.y[i] + m) / obs_var;
    REQUIRE_THAT(out.theta_mean[i], Catch::Matchers::WithinAbs(oracle, 5.5 * se));
  }
}

TEST_CASE("well-separated groups recover their centers", "[dp]") {
  Rng data_rng(79);
  std::vector<double> y(60);
  for (std::size_t i = 0; i < y.size(); ++i)
    y[i] = (i < 30 ? -5.0 : 5.0) + normal01(data_rng);
  const ParallelDataset ds = reorder_by_q(make_standard_dataset(y));

  DpConfig cfg;
  cfg.n_scans = 1000;
  cfg.burn_in = 300;
  cfg.seed = 83;
  const DpOutput out = dp_fit(ds, cfg);
  CHECK(out.mean_clusters > 1.8);

  // Reordered data is ascending, so the halves are the two groups.
  double lo = 0.0, hi = 0.0;
  for (std::size_t i = 0; i < 30; ++i) lo += out.theta_mean[i] / 30.0;
  for (std::size_t i = 30; i < 60; ++i) hi += out.theta_mean[i] / 30.0;
  CHECK_THAT(lo, Catch::Matchers::WithinAbs(-5.0, 0.7));
  CHECK_THAT(hi, Catch::Matchers::WithinAbs(5.0, 0.7));
}

TEST_CASE("dp_fit is deterministic in the seed and validates input", "[dp]") {
  Rng data_rng(89);
  std::vector<double> y(40);
  for (auto& v : y) v = 2.0 * normal01(data_rng);
  const ParallelDataset ds = reorder_by_q(make_standard_dataset(y));

  DpConfig cfg;
  cfg.n_scans = 300;
  cfg.burn_in = 100;
  cfg.seed = 97;
  const DpOutput a = dp_fit(ds, cfg);
  const DpOutput b = dp_fit(ds, cfg);
  CHECK(a.theta_mean == b.theta_mean);
  cfg.seed = 98;
  const DpOutput c = dp_fit(ds, cfg);
  CHECK(a.theta_mean != c.theta_mean);

  CHECK_THROWS_AS(dp_fit(make_standard_dataset(y), cfg), std::invalid_argument);
  DpConfig bad = cfg;
  bad.burn_in = bad.n_scans;
  CHECK_THROWS_AS(dp_fit(ds, bad), std::invalid_argument);
  CHECK_THROWS_AS(make_dp_initial_state({}), std::invalid_argument);
  CHECK_THROWS_AS(make_dp_initial_state({1.0}, 0.0), std::invalid_argument);
}
