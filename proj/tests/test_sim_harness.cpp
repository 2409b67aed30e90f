#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "pebayes/sim_harness.hpp"
#include "support/oracles.hpp"

using namespace pebayes;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "pebayes_harness" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

// Small-but-real configuration for end-to-end tests: conjugate chains and a
// short DP run keep each replication around a millisecond.
SimulationConfig tiny_config() {
  SimulationConfig cfg;
  cfg.p = 20;
  cfg.n_reps = 3;
  cfg.true_prior = TruePrior::kNormal;
  cfg.methods = {Method::kNormal, Method::kDp};
  cfg.base_seed = 424242;
  cfg.standard_chain.n_scans = 300;
  cfg.standard_chain.burn_in = 100;
  cfg.dp_chain.n_scans = 200;
  cfg.dp_chain.burn_in = 50;
  return cfg;
}

MethodResult ok_result(Method m, std::vector<double> low, std::vector<double> high) {
  MethodResult r;
  r.method = m;
  r.ok = true;
  r.err_low = std::move(low);
  r.err_high = std::move(high);
  return r;
}

}  // namespace

TEST_CASE("generated effects follow the requested true prior", "[harness]") {
  constexpr std::size_t p = 100'000;

  const ParallelDataset normal_ds = generate_dataset(TruePrior::kNormal, p, 7);
  REQUIRE(normal_ds.reordered);
  REQUIRE(normal_ds.true_theta.has_value());
  const double sd = std::sqrt(oracles::variance(*normal_ds.true_theta));
  CHECK_THAT(sd, Catch::Matchers::WithinRel(2.0, 0.01));

  const ParallelDataset hybrid_ds = generate_dataset(TruePrior::kHybrid, p, 11);
  std::size_t tail = 0;
  for (double t : *hybrid_ds.true_theta) tail += std::fabs(t) > 4.0;
  const double frac = tail / static_cast<double>(p);
  const double se = std::sqrt(0.1 * 0.9 / p);
  CHECK_THAT(frac, Catch::Matchers::WithinAbs(0.1, 3.0 * se));
}

TEST_CASE("reordering keeps each observation paired with its effect", "[harness]") {
  // If the reorder mispaired y and theta, the residuals y - theta would stop
  // being standard normal; a KS check against U(0,1) after the probability
  // transform catches that immediately.
  const ParallelDataset ds = generate_dataset(TruePrior::kT, 50'000, 13);
  REQUIRE(std::is_sorted(ds.y.begin(), ds.y.end()));
  std::vector<double> u(ds.p());
  for (std::size_t i = 0; i < ds.p(); ++i) u[i] = normal_cdf(ds.y[i] - (*ds.true_theta)[i]);
  CHECK(oracles::ks_uniform(u) < 1.95 / std::sqrt(static_cast<double>(ds.p())));
}

TEST_CASE("dataset generation is deterministic in the seed", "[harness]") {
  const ParallelDataset a = generate_dataset(TruePrior::kHybrid, 500, 99);
  const ParallelDataset b = generate_dataset(TruePrior::kHybrid, 500, 99);
  CHECK(a.y == b.y);
  CHECK(*a.true_theta == *b.true_theta);
  CHECK(a.q_values == b.q_values);
  const ParallelDataset c = generate_dataset(TruePrior::kHybrid, 500, 100);
  CHECK(a.y != c.y);
}

TEST_CASE("raw observations carry unit error variance over all coordinates",
          "[harness]") {
  // Self-check baseline for the no-shrinkage estimator theta_hat = y: its
  // squared error averaged over every coordinate is the error variance 1.
  // (At the extremes alone it is selection-biased above 1, which is exactly
  // the regime where shrinkage pays.)
  const ParallelDataset ds = generate_dataset(TruePrior::kNormal, 100'000, 17);
  double mse = 0.0;
  for (std::size_t i = 0; i < ds.p(); ++i) {
    const double e = ds.y[i] - (*ds.true_theta)[i];
    mse += e * e / static_cast<double>(ds.p());
  }
  // var(eps^2) = 2, so the standard error of the average is sqrt(2/p).
  CHECK_THAT(mse, Catch::Matchers::WithinAbs(1.0, 4.0 * std::sqrt(2.0 / 100'000.0)));
}

TEST_CASE("config parsing covers every documented key", "[harness]") {
  const std::string text = R"({
    "p": 64,
    "nReps": 4,
    "truePrior": "hybrid",
    "methods": ["Normal", "RNormal", "DP"],
    "baseSeed": 987654321,
    "workers": 2,
    "chains": {
      "standard": {"nScans": 1200, "burnIn": 200},
      "robustified": {"nScans": 900, "burnIn": 150, "innerMhSweeps": 2,
                      "initialK": 12, "adaptEvery": 250},
      "dp": {"nScans": 700, "burnIn": 100, "alpha": 0.5}
    }
  })";
  const SimulationConfig cfg = parse_simulation_config(text);
  CHECK(cfg.p == 64);
  CHECK(cfg.n_reps == 4);
  CHECK(cfg.true_prior == TruePrior::kHybrid);
  CHECK(cfg.methods == std::vector<Method>{Method::kNormal, Method::kRNormal, Method::kDp});
  CHECK(cfg.base_seed == 987654321);
  CHECK(cfg.workers == 2);
  CHECK(cfg.standard_chain.n_scans == 1200);
  CHECK(cfg.standard_chain.burn_in == 200);
  CHECK(cfg.robustified_chain.n_scans == 900);
  CHECK(cfg.robustified_chain.inner_mh_sweeps == 2);
  CHECK(cfg.robustified_chain.mh.initial_k == 12);
  CHECK(cfg.robustified_chain.mh.adapt_every == 250);
  CHECK(cfg.dp_chain.n_scans == 700);
  CHECK(cfg.dp_chain.alpha == 0.5);
}

TEST_CASE("config defaults fill everything but what is given", "[harness]") {
  const SimulationConfig cfg = parse_simulation_config(R"({"p": 50})");
  CHECK(cfg.p == 50);
  CHECK(cfg.n_reps == 20);
  CHECK(cfg.true_prior == TruePrior::kNormal);
  CHECK(cfg.methods.size() == 7);
  CHECK(cfg.standard_chain.n_scans == 9000);
  CHECK(cfg.robustified_chain.n_scans == 4000);
  CHECK(cfg.dp_chain.n_scans == 4000);
  CHECK(cfg.workers == 1);
}

TEST_CASE("config errors name the offending line", "[harness]") {
  using Catch::Matchers::ContainsSubstring;

  // Syntax error on line 3 (trailing comma).
  CHECK_THROWS_WITH(parse_simulation_config("{\n\"p\": 10,\n\"nReps\": 2,\n}"),
                    ContainsSubstring("line 4"));
  // Unknown key on line 2.
  CHECK_THROWS_WITH(parse_simulation_config("{\n\"reps\": 5\n}"),
                    ContainsSubstring("line 2") && ContainsSubstring("reps"));
  // Semantic errors carry the key's line too.
  CHECK_THROWS_WITH(parse_simulation_config("{\n\"truePrior\": \"cauchy\"\n}"),
                    ContainsSubstring("line 2") && ContainsSubstring("cauchy"));
  CHECK_THROWS_WITH(parse_simulation_config(R"({"methods": ["Ridge"]})"),
                    ContainsSubstring("Ridge"));
  CHECK_THROWS_WITH(
      parse_simulation_config(R"({"chains": {"standard": {"nScans": 100, "burnIn": 100}}})"),
      ContainsSubstring("burnIn"));
  CHECK_THROWS_AS(parse_simulation_config(R"({"p": 4})"), std::invalid_argument);
  CHECK_THROWS_AS(parse_simulation_config(R"({"nReps": 0})"), std::invalid_argument);
  CHECK_THROWS_AS(parse_simulation_config(R"({"methods": []})"), std::invalid_argument);
  CHECK_THROWS_AS(parse_simulation_config(R"({"methods": ["DP", "DP"]})"),
                  std::invalid_argument);
  CHECK_THROWS_AS(parse_simulation_config(R"({"chains": {"dp": {"alpha": 0.0}}})"),
                  std::invalid_argument);
}

TEST_CASE("records survive the serialization round trip", "[harness]") {
  ReplicationRecord rec;
  rec.rep_index = 5;
  rec.seed = 0xDEADBEEFCAFEF00DULL;
  rec.results.push_back(ok_result(Method::kNormal, {0.1, -0.25, 1e-17}, {0.5, 0.0, -3.75}));
  MethodResult rob = ok_result(Method::kRNormal, {0.2, 0.3, 0.4}, {-0.1, -0.2, -0.3});
  rob.acceptance = 0.2718281828459045;
  rob.final_k = 233;
  rec.results.push_back(rob);
  MethodResult failed;
  failed.method = Method::kDp;
  failed.error = "synthetic failure";
  rec.results.push_back(failed);

  const std::string line = record_line(rec);
  // Keys come out sorted, which is what makes reruns byte-comparable.
  CHECK(line.rfind("{\"methods\"", 0) == 0);
  CHECK(line.find('\n') == std::string::npos);

  const ReplicationRecord back = record_from_json(nlohmann::json::parse(line));
  REQUIRE(back.results.size() == 3);
  CHECK(back.rep_index == 5);
  CHECK(back.seed == rec.seed);
  CHECK(back.results[0].ok);
  CHECK(back.results[0].err_low == rec.results[0].err_low);    // exact doubles
  CHECK(back.results[0].err_high == rec.results[0].err_high);
  CHECK(back.results[1].acceptance == rob.acceptance);
  CHECK(back.results[1].final_k == 233);
  CHECK_FALSE(back.results[2].ok);
  CHECK(back.results[2].error == "synthetic failure");
}

TEST_CASE("mse table pools the two extreme errors per replication", "[harness]") {
  ReplicationRecord rec;
  rec.rep_index = 0;
  rec.results.push_back(ok_result(Method::kNormal, {1.0, 0.0, 0.0}, {-1.0, 0.0, 0.0}));
  const std::vector<MseCell> cells = mse_table({rec}, "normal");
  REQUIRE(cells.size() == 3);  // i = 1..3, one method
  CHECK(cells[0].i == 1);
  CHECK(cells[0].method == "Normal");
  REQUIRE(cells[0].mse.has_value());
  CHECK(*cells[0].mse == 1.0);  // mean of {1, 1}
  CHECK(cells[0].n_errors == 2);
  CHECK(*cells[1].mse == 0.0);
  CHECK(*cells[2].mse == 0.0);
}

TEST_CASE("a failed method leaves its cell absent, not zero", "[harness]") {
  ReplicationRecord good;
  good.rep_index = 0;
  good.results.push_back(ok_result(Method::kNormal, {2.0, 0.0, 0.0}, {2.0, 0.0, 0.0}));
  good.results.push_back(ok_result(Method::kDp, {1.0, 0.0, 0.0}, {1.0, 0.0, 0.0}));
  ReplicationRecord bad = good;
  bad.rep_index = 1;
  bad.results[1].ok = false;
  bad.results[1].error = "chain stalled";
  bad.results[1].err_low.clear();
  bad.results[1].err_high.clear();

  const std::vector<MseCell> cells = mse_table({good, bad}, "t", 1);
  REQUIRE(cells.size() == 2);
  CHECK(*cells[0].mse == 4.0);
  CHECK(cells[0].n_errors == 4);
  CHECK_FALSE(cells[1].mse.has_value());  // DP missing in rep 1
  CHECK(cells[1].n_errors == 2);
  CHECK_THROWS_AS(mse_table({}, "t"), std::invalid_argument);
}

TEST_CASE("boxplot export emits two rows per replication and method", "[harness]") {
  std::vector<ReplicationRecord> records;
  for (int r = 0; r < 100; ++r) {
    ReplicationRecord rec;
    rec.rep_index = r;
    rec.results.push_back(
        ok_result(Method::kNormal, {0.01 * r, 0, 0}, {-0.01 * r, 0, 0}));
    records.push_back(std::move(rec));
  }
  const std::vector<BoxplotRow> rows = boxplot_rows(records, "normal");
  REQUIRE(rows.size() == 200);  // 100 reps x {low, high}

  const std::vector<FiveNumber> summary = boxplot_summary(rows);
  REQUIRE(summary.size() == 1);
  CHECK(summary[0].n == 200);

  // The summary median must agree exactly with direct recomputation.
  std::vector<double> all;
  for (const BoxplotRow& row : rows) all.push_back(row.error);
  std::sort(all.begin(), all.end());
  const double direct = 0.5 * (all[99] + all[100]);
  CHECK(summary[0].median == direct);
  CHECK(summary[0].min == all.front());
  CHECK(summary[0].max == all.back());
}

TEST_CASE("five-number quartiles interpolate linearly", "[harness]") {
  std::vector<BoxplotRow> rows;
  for (int v = 0; v < 5; ++v) rows.push_back({v, "low", "t", "DP", static_cast<double>(v)});
  const std::vector<FiveNumber> s = boxplot_summary(rows);
  REQUIRE(s.size() == 1);
  CHECK(s[0].q1 == 1.0);
  CHECK(s[0].median == 2.0);
  CHECK(s[0].q3 == 3.0);
}

TEST_CASE("experiment produces one record per replication", "[harness]") {
  SimulationConfig cfg = tiny_config();
  cfg.n_reps = 2;
  cfg.methods = {Method::kNormal};
  const std::vector<ReplicationRecord> records = run_experiment(cfg);  // in-memory
  REQUIRE(records.size() == 2);
  for (const ReplicationRecord& rec : records) {
    REQUIRE(rec.results.size() == 1);
    CHECK(rec.results[0].method == Method::kNormal);
    CHECK(rec.results[0].ok);
    CHECK(rec.results[0].err_low.size() == 3);
    CHECK(rec.results[0].err_high.size() == 3);
  }
  CHECK(records[0].seed != records[1].seed);
}

TEST_CASE("persisted experiments rerun byte-identically", "[harness]") {
  SimulationConfig cfg = tiny_config();
  cfg.out_dir = fresh_dir("redo_a").string();
  run_experiment(cfg);
  const std::string first = slurp(ExperimentPaths{cfg.out_dir}.records());

  SimulationConfig again = tiny_config();
  again.out_dir = fresh_dir("redo_b").string();
  run_experiment(again);
  CHECK(slurp(ExperimentPaths{again.out_dir}.records()) == first);

  // Re-running over the existing directory recomputes nothing and the file
  // keeps its exact bytes.
  run_experiment(cfg);
  CHECK(slurp(ExperimentPaths{cfg.out_dir}.records()) == first);
}

TEST_CASE("worker count changes nothing about the record bytes", "[harness]") {
  SimulationConfig cfg = tiny_config();
  cfg.n_reps = 5;
  cfg.out_dir = fresh_dir("workers_1").string();
  run_experiment(cfg);

  SimulationConfig par = cfg;
  par.workers = 3;
  par.out_dir = fresh_dir("workers_3").string();
  run_experiment(par);

  CHECK(slurp(ExperimentPaths{par.out_dir}.records()) ==
        slurp(ExperimentPaths{cfg.out_dir}.records()));
}

TEST_CASE("an interrupted run resumes without touching finished records", "[harness]") {
  SimulationConfig cfg = tiny_config();
  cfg.out_dir = fresh_dir("resume").string();

  SimulationConfig first = cfg;
  first.n_reps = 1;  // "crash" after the first replication
  run_experiment(first);
  const ExperimentPaths paths{cfg.out_dir};
  const std::string after_one = slurp(paths.records());

  // Simulate a torn write from the crash: a partial line with no newline.
  {
    std::ofstream out(paths.records(), std::ios::binary | std::ios::app);
    out << "{\"rep\": 1, \"seed\"";
  }

  const std::vector<ReplicationRecord> records = run_experiment(cfg);
  REQUIRE(records.size() == 3);
  const std::string final_text = slurp(paths.records());
  CHECK(final_text.rfind(after_one, 0) == 0);  // rep 0 bytes untouched

  // And the resumed file equals a from-scratch run of the same config.
  SimulationConfig scratch = cfg;
  scratch.out_dir = fresh_dir("resume_scratch").string();
  run_experiment(scratch);
  CHECK(slurp(ExperimentPaths{scratch.out_dir}.records()) == final_text);
}

TEST_CASE("a directory made by a different configuration is refused", "[harness]") {
  SimulationConfig cfg = tiny_config();
  cfg.out_dir = fresh_dir("mismatch").string();
  run_experiment(cfg);
  SimulationConfig other = cfg;
  other.base_seed += 1;
  CHECK_THROWS_WITH(run_experiment(other),
                    Catch::Matchers::ContainsSubstring("different configuration"));
  // nReps is allowed to change: raising it just computes the missing reps.
  SimulationConfig more = cfg;
  more.n_reps = 4;
  CHECK(run_experiment(more).size() == 4);
}

TEST_CASE("method failures are recorded, not thrown", "[harness]") {
  SimulationConfig cfg = tiny_config();
  cfg.methods = {Method::kNormal, Method::kDp};
  cfg.standard_chain.burn_in = cfg.standard_chain.n_scans;  // invalid on purpose
  const std::vector<ReplicationRecord> records = run_experiment(cfg);
  REQUIRE(records.size() == 3);
  for (const ReplicationRecord& rec : records) {
    CHECK_FALSE(rec.results[0].ok);
    CHECK_FALSE(rec.results[0].error.empty());
    CHECK(rec.results[1].ok);  // DP unaffected
  }
  const std::vector<MseCell> cells = mse_table(records, "normal", 1);
  CHECK_FALSE(cells[0].mse.has_value());
  CHECK(cells[1].mse.has_value());
}

TEST_CASE("robustified diagnostics are persisted with the record", "[harness]") {
  SimulationConfig cfg;
  cfg.p = 12;
  cfg.n_reps = 1;
  cfg.methods = {Method::kRNormal};
  cfg.base_seed = 5150;
  cfg.robustified_chain.n_scans = 300;
  cfg.robustified_chain.burn_in = 100;
  cfg.out_dir = fresh_dir("diag").string();
  const std::vector<ReplicationRecord> records = run_experiment(cfg);
  REQUIRE(records.size() == 1);
  const MethodResult& r = records[0].results[0];
  REQUIRE(r.ok);
  CHECK(r.acceptance > 0.0);
  CHECK(r.acceptance <= 1.0);
  CHECK(r.final_k >= 2);

  const std::string text = slurp(ExperimentPaths{cfg.out_dir}.records());
  CHECK(text.find("\"acceptance\":") != std::string::npos);
  CHECK(text.find("\"finalK\":") != std::string::npos);

  const std::string timings = slurp(ExperimentPaths{cfg.out_dir}.timings());
  CHECK(timings.rfind("rep,method,seconds\n", 0) == 0);
  CHECK(timings.find("0,RNormal,") != std::string::npos);
}

TEST_CASE("low and high extreme errors share a distribution under symmetry",
          "[harness]") {
  // Symmetric true prior + symmetric method: the two pooled extreme-error
  // samples must look alike.  Uses the conjugate sampler so 60 replications
  // stay cheap.
  SimulationConfig cfg;
  cfg.p = 60;
  cfg.n_reps = 60;
  cfg.true_prior = TruePrior::kNormal;
  cfg.methods = {Method::kNormal};
  cfg.base_seed = 31337;
  cfg.standard_chain.n_scans = 600;
  cfg.standard_chain.burn_in = 150;
  const std::vector<ReplicationRecord> records = run_experiment(cfg);

  std::vector<double> low, high;
  for (const ReplicationRecord& rec : records) {
    REQUIRE(rec.results[0].ok);
    low.push_back(rec.results[0].err_low[0]);
    high.push_back(rec.results[0].err_high[0]);
  }
  const double d = oracles::ks_two_sample(low, high);
  CHECK(oracles::ks_two_sample_pvalue(d, low.size(), high.size()) > 0.01);
}

TEST_CASE("csv writers emit the documented headers", "[harness]") {
  const fs::path dir = fresh_dir("csv");
  ReplicationRecord rec;
  rec.rep_index = 0;
  rec.results.push_back(ok_result(Method::kMixture, {0.5, 0, 0}, {0.25, 0, 0}));

  write_mse_csv(mse_table({rec}, "hybrid"), dir / "mse_table.csv");
  const std::string mse_text = slurp(dir / "mse_table.csv");
  CHECK(mse_text.rfind("i,prior,method,mse,nErrors\n", 0) == 0);
  CHECK(mse_text.find("1,hybrid,Mixture,0.15625,2") != std::string::npos);

  const std::vector<BoxplotRow> rows = boxplot_rows({rec}, "hybrid");
  write_boxplot_csv(rows, dir / "boxplot.csv");
  const std::string box_text = slurp(dir / "boxplot.csv");
  CHECK(box_text.rfind("rep,side,prior,method,error\n", 0) == 0);
  CHECK(box_text.find("0,low,hybrid,Mixture,0.5") != std::string::npos);
  CHECK(box_text.find("0,high,hybrid,Mixture,0.25") != std::string::npos);

  write_boxplot_summary_csv(boxplot_summary(rows), dir / "boxplot_summary.csv");
  CHECK(slurp(dir / "boxplot_summary.csv").rfind("prior,method,n,min,q1,median,q3,max\n", 0) ==
        0);
}
