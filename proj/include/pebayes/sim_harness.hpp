#pragma once

// End-to-end simulation study: generate effects under a chosen true prior,
// fit the seven estimators to each replication, persist per-replication
// records, and post-process them into MSE tables and boxplot exports.
//
// Persistence is line-delimited JSON (one record per line, keys sorted by the
// serializer), which makes runs resumable: completed replications are loaded
// from the record file and skipped, and a rerun with the same base seed
// reproduces the remaining lines byte for byte.  Per-method wall-clock goes
// to a separate timings.csv so the record file stays deterministic.

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "pebayes/dp_mixture.hpp"
#include "pebayes/hier_gibbs.hpp"
#include "pebayes/quantile_map.hpp"
#include "pebayes/rng.hpp"

namespace pebayes {

// ---------------------------------------------------------------------------
// True priors of the study

enum class TruePrior { kNormal, kT, kHybrid };

inline DistSpec true_prior_dist(TruePrior tp) {
  switch (tp) {
    case TruePrior::kNormal:
      return Normal{0.0, 2.0};
    case TruePrior::kT:
      return ScaledT{5.0, 2.0};
    case TruePrior::kHybrid:
      // Normal body on [-4, 4], heavy t tails outside, 9:1 mix.
      return make_truncated_hybrid(Normal{0.0, 2.0}, ScaledT{5.0, 2.0}, 4.0, 0.9);
  }
  throw std::logic_error("true_prior_dist: unreachable");
}

inline const char* true_prior_name(TruePrior tp) {
  switch (tp) {
    case TruePrior::kNormal: return "normal";
    case TruePrior::kT: return "t";
    case TruePrior::kHybrid: return "hybrid";
  }
  throw std::logic_error("true_prior_name: unreachable");
}

inline TruePrior parse_true_prior(const std::string& s) {
  if (s == "normal") return TruePrior::kNormal;
  if (s == "t") return TruePrior::kT;
  if (s == "hybrid") return TruePrior::kHybrid;
  throw std::invalid_argument("truePrior must be one of normal/t/hybrid, got '" + s + "'");
}

// ---------------------------------------------------------------------------
// Methods

// Numbering matches the study's method order and doubles as the per-method
// seed stream id, so adding or removing methods from a run never changes the
// draws of the others.
enum class Method : int {
  kLaplace = 1,
  kRLaplace = 2,
  kNormal = 3,
  kRNormal = 4,
  kMixture = 5,
  kRMixture = 6,
  kDp = 7,
};

inline constexpr Method kAllMethods[] = {
    Method::kLaplace, Method::kRLaplace, Method::kNormal,  Method::kRNormal,
    Method::kMixture, Method::kRMixture, Method::kDp,
};

inline int method_id(Method m) { return static_cast<int>(m); }

inline const char* method_name(Method m) {
  switch (m) {
    case Method::kLaplace: return "Laplace";
    case Method::kRLaplace: return "RLaplace";
    case Method::kNormal: return "Normal";
    case Method::kRNormal: return "RNormal";
    case Method::kMixture: return "Mixture";
    case Method::kRMixture: return "RMixture";
    case Method::kDp: return "DP";
  }
  throw std::logic_error("method_name: unreachable");
}

inline Method parse_method(const std::string& s) {
  for (Method m : kAllMethods)
    if (s == method_name(m)) return m;
  throw std::invalid_argument("unknown method '" + s +
                              "' (expected Laplace/RLaplace/Normal/RNormal/"
                              "Mixture/RMixture/DP)");
}

inline bool is_robustified(Method m) {
  return m == Method::kRLaplace || m == Method::kRNormal || m == Method::kRMixture;
}

// ---------------------------------------------------------------------------
// Configuration

struct SimulationConfig {
  std::size_t p = 1000;
  int n_reps = 20;
  TruePrior true_prior = TruePrior::kNormal;
  std::vector<Method> methods{std::begin(kAllMethods), std::end(kAllMethods)};
  std::uint64_t base_seed = 1;
  int workers = 1;
  GibbsConfig standard_chain;                         // Laplace / Normal / Mixture
  GibbsConfig robustified_chain = robustified_defaults();  // R-variants
  DpConfig dp_chain;
  std::string out_dir;  // empty = in-memory run, nothing persisted
};

inline void validate(const SimulationConfig& cfg) {
  if (cfg.p < 6)
    throw std::invalid_argument("config: p must be at least 6 (three extremes per side)");
  if (cfg.n_reps < 1) throw std::invalid_argument("config: nReps must be positive");
  if (cfg.methods.empty()) throw std::invalid_argument("config: methods must be nonempty");
  for (std::size_t a = 0; a < cfg.methods.size(); ++a)
    for (std::size_t b = a + 1; b < cfg.methods.size(); ++b)
      if (cfg.methods[a] == cfg.methods[b])
        throw std::invalid_argument(std::string("config: duplicate method ") +
                                    method_name(cfg.methods[a]));
  if (cfg.workers < 1) throw std::invalid_argument("config: workers must be positive");
}

namespace detail {

inline std::size_t line_of_byte(const std::string& text, std::size_t byte) {
  std::size_t line = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i)
    if (text[i] == '\n') ++line;
  return line;
}

// Best-effort line lookup for semantic errors: the first occurrence of the
// quoted key.  Configs are small and the parser rejects duplicate sections,
// so this is reliable in practice.
inline std::string at_key(const std::string& text, const std::string& key) {
  const std::size_t pos = text.find("\"" + key + "\"");
  if (pos == std::string::npos) return "config: ";
  return "config line " + std::to_string(line_of_byte(text, pos)) + ": ";
}

[[noreturn]] inline void config_error(const std::string& text, const std::string& key,
                                      const std::string& message) {
  throw std::invalid_argument(at_key(text, key) + message);
}

inline void require_known_keys(const std::string& text, const nlohmann::json& obj,
                               const std::string& where,
                               std::initializer_list<const char*> known) {
  if (!obj.is_object()) config_error(text, where, where + " must be an object");
  for (const auto& [key, value] : obj.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) config_error(text, key, "unknown key '" + key + "' in " + where);
  }
}

template <class T>
T get_field(const std::string& text, const nlohmann::json& obj, const std::string& key,
            T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    config_error(text, key, "key '" + key + "' has the wrong type");
  }
}

inline void parse_chain_common(const std::string& text, const nlohmann::json& obj,
                               const std::string& where, std::size_t& n_scans,
                               std::size_t& burn_in) {
  n_scans = get_field<std::size_t>(text, obj, "nScans", n_scans);
  burn_in = get_field<std::size_t>(text, obj, "burnIn", burn_in);
  if (burn_in >= n_scans)
    config_error(text, "burnIn", where + ": burnIn must be smaller than nScans");
}

}  // namespace detail

// Parses the JSON config text.  Unknown keys are rejected so that typos fail
// loudly; errors carry the line of the offending token.
inline SimulationConfig parse_simulation_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument("config line " +
                                std::to_string(detail::line_of_byte(text, e.byte)) + ": " +
                                e.what());
  }
  if (!j.is_object()) throw std::invalid_argument("config line 1: top level must be an object");
  detail::require_known_keys(text, j, "config",
                             {"p", "nReps", "truePrior", "methods", "baseSeed", "workers",
                              "chains"});

  SimulationConfig cfg;
  cfg.p = detail::get_field<std::size_t>(text, j, "p", cfg.p);
  cfg.n_reps = detail::get_field<int>(text, j, "nReps", cfg.n_reps);
  cfg.base_seed = detail::get_field<std::uint64_t>(text, j, "baseSeed", cfg.base_seed);
  cfg.workers = detail::get_field<int>(text, j, "workers", cfg.workers);
  if (j.contains("truePrior")) {
    try {
      cfg.true_prior = parse_true_prior(j.at("truePrior").get<std::string>());
    } catch (const std::invalid_argument& e) {
      detail::config_error(text, "truePrior", e.what());
    } catch (const nlohmann::json::exception&) {
      detail::config_error(text, "truePrior", "truePrior must be a string");
    }
  }
  if (j.contains("methods")) {
    if (!j.at("methods").is_array())
      detail::config_error(text, "methods", "methods must be an array of names");
    cfg.methods.clear();
    for (const auto& entry : j.at("methods")) {
      if (!entry.is_string())
        detail::config_error(text, "methods", "methods entries must be strings");
      try {
        cfg.methods.push_back(parse_method(entry.get<std::string>()));
      } catch (const std::invalid_argument& e) {
        detail::config_error(text, "methods", e.what());
      }
    }
  }
  if (j.contains("chains")) {
    const auto& chains = j.at("chains");
    if (!chains.is_object()) detail::config_error(text, "chains", "chains must be an object");
    detail::require_known_keys(text, chains, "chains", {"standard", "robustified", "dp"});
    if (chains.contains("standard")) {
      const auto& c = chains.at("standard");
      detail::require_known_keys(text, c, "chains.standard", {"nScans", "burnIn"});
      detail::parse_chain_common(text, c, "chains.standard", cfg.standard_chain.n_scans,
                                 cfg.standard_chain.burn_in);
    }
    if (chains.contains("robustified")) {
      const auto& c = chains.at("robustified");
      detail::require_known_keys(
          text, c, "chains.robustified",
          {"nScans", "burnIn", "innerMhSweeps", "initialK", "adaptEvery"});
      detail::parse_chain_common(text, c, "chains.robustified", cfg.robustified_chain.n_scans,
                                 cfg.robustified_chain.burn_in);
      cfg.robustified_chain.inner_mh_sweeps = detail::get_field<std::size_t>(
          text, c, "innerMhSweeps", cfg.robustified_chain.inner_mh_sweeps);
      cfg.robustified_chain.mh.initial_k =
          detail::get_field<std::size_t>(text, c, "initialK", cfg.robustified_chain.mh.initial_k);
      cfg.robustified_chain.mh.adapt_every = detail::get_field<std::size_t>(
          text, c, "adaptEvery", cfg.robustified_chain.mh.adapt_every);
    }
    if (chains.contains("dp")) {
      const auto& c = chains.at("dp");
      detail::require_known_keys(text, c, "chains.dp", {"nScans", "burnIn", "alpha"});
      detail::parse_chain_common(text, c, "chains.dp", cfg.dp_chain.n_scans, cfg.dp_chain.burn_in);
      cfg.dp_chain.alpha = detail::get_field<double>(text, c, "alpha", cfg.dp_chain.alpha);
      if (!(cfg.dp_chain.alpha > 0.0))
        detail::config_error(text, "alpha", "chains.dp: alpha must be positive");
    }
  }
  validate(cfg);
  return cfg;
}

inline SimulationConfig load_simulation_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("cannot open config file '" + path + "'");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_simulation_config(text);
}

// ---------------------------------------------------------------------------
// Data generation

// Draws all p effects from the true prior, then all p unit-normal errors,
// and returns the q-sorted dataset with the true effects attached.
inline ParallelDataset generate_dataset(TruePrior spec, std::size_t p, std::uint64_t seed) {
  if (p == 0) throw std::invalid_argument("generate_dataset: p must be positive");
  Rng rng(seed);
  const DistSpec prior = true_prior_dist(spec);
  std::vector<double> theta(p);
  for (auto& t : theta) t = sample(prior, rng);
  std::vector<double> y(p);
  for (std::size_t i = 0; i < p; ++i) y[i] = theta[i] + normal01(rng);
  return reorder_by_q(make_standard_dataset(std::move(y), std::move(theta)));
}

// ---------------------------------------------------------------------------
// Replication records

inline constexpr int kExtremesPerSide = 3;  // i in {1, 2, 3}

struct MethodResult {
  Method method = Method::kLaplace;
  bool ok = false;
  std::string error;             // failure reason when !ok
  std::vector<double> err_low;   // theta_hat_i - theta_i, i = 1..3 (smallest side)
  std::vector<double> err_high;  // theta_{p+1-i} - theta_hat_{p+1-i} (largest side)
  double acceptance = 0.0;       // robustified methods only
  int final_k = 0;               // robustified methods only
  double seconds = 0.0;          // wall clock; persisted to timings.csv, not the record
};

struct ReplicationRecord {
  int rep_index = 0;
  std::uint64_t seed = 0;
  std::vector<MethodResult> results;  // one per requested method, in config order
};

inline MethodResult run_single_method(Method m, const ParallelDataset& ds,
                                      const SimulationConfig& cfg, std::uint64_t seed) {
  MethodResult res;
  res.method = m;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    std::vector<double> theta_hat;
    switch (m) {
      case Method::kLaplace:
      case Method::kNormal:
      case Method::kMixture: {
        GibbsConfig c = cfg.standard_chain;
        c.seed = seed;
        WorkingPrior prior = m == Method::kLaplace ? WorkingPrior(LaplacePrior{})
                             : m == Method::kNormal ? WorkingPrior(NormalPrior{})
                                                    : WorkingPrior(MixturePrior{});
        theta_hat = standard_gibbs(ds, std::move(prior), c).theta_mean;
        break;
      }
      case Method::kRLaplace:
      case Method::kRNormal:
      case Method::kRMixture: {
        GibbsConfig c = cfg.robustified_chain;
        c.seed = seed;
        WorkingPrior prior = m == Method::kRLaplace ? WorkingPrior(LaplacePrior{})
                             : m == Method::kRNormal ? WorkingPrior(NormalPrior{})
                                                     : WorkingPrior(MixturePrior{});
        if (m == Method::kRMixture) {
          // The robustified chain reinforces whichever mixture component is
          // active (see robustified_gibbs), so let the conjugate sampler
          // settle the latent component first and start from its state.
          GibbsConfig warm = cfg.standard_chain;
          warm.n_scans = std::max<std::size_t>(cfg.standard_chain.burn_in, 2);
          warm.burn_in = warm.n_scans - 1;
          warm.seed = derive_seed(seed, 4);
          prior = standard_gibbs(ds, std::move(prior), warm).final_prior;
        }
        const GibbsOutput out = robustified_gibbs(ds, std::move(prior), c);
        res.acceptance = out.acceptance_rate;
        res.final_k = out.final_k;
        theta_hat = out.theta_mean;
        break;
      }
      case Method::kDp: {
        DpConfig c = cfg.dp_chain;
        c.seed = seed;
        theta_hat = dp_fit(ds, c).theta_mean;
        break;
      }
    }
    if (!ds.true_theta) throw std::logic_error("dataset carries no true effects");
    const std::vector<double>& truth = *ds.true_theta;
    const std::size_t p = ds.p();
    for (int i = 0; i < kExtremesPerSide; ++i) {
      res.err_low.push_back(theta_hat[i] - truth[i]);
      res.err_high.push_back(truth[p - 1 - i] - theta_hat[p - 1 - i]);
    }
    res.ok = true;
  } catch (const std::exception& e) {
    res.ok = false;
    res.error = e.what();
    res.err_low.clear();
    res.err_high.clear();
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

// One full replication: one shared dataset, every requested method on it.
// Method failures are recorded, never thrown.
inline ReplicationRecord run_replication(const SimulationConfig& cfg, int rep) {
  ReplicationRecord rec;
  rec.rep_index = rep;
  rec.seed = derive_seed(cfg.base_seed, static_cast<std::uint64_t>(rep));

  ParallelDataset ds;
  std::string generation_error;
  try {
    ds = generate_dataset(cfg.true_prior, cfg.p, rec.seed);
  } catch (const std::exception& e) {
    generation_error = std::string("dataset generation failed: ") + e.what();
  }
  for (Method m : cfg.methods) {
    if (!generation_error.empty()) {
      MethodResult res;
      res.method = m;
      res.error = generation_error;
      rec.results.push_back(std::move(res));
      continue;
    }
    rec.results.push_back(
        run_single_method(m, ds, cfg, derive_seed(rec.seed, static_cast<std::uint64_t>(method_id(m)))));
  }
  return rec;
}

// ---------------------------------------------------------------------------
// Record serialization (line-delimited JSON, keys sorted by the serializer)

inline nlohmann::json record_to_json(const ReplicationRecord& rec) {
  nlohmann::json methods = nlohmann::json::array();
  for (const MethodResult& r : rec.results) {
    nlohmann::json m;
    m["method"] = method_name(r.method);
    m["ok"] = r.ok;
    if (r.ok) {
      m["errLow"] = r.err_low;
      m["errHigh"] = r.err_high;
      if (is_robustified(r.method)) {
        m["acceptance"] = r.acceptance;
        m["finalK"] = r.final_k;
      }
    } else {
      m["error"] = r.error;
    }
    methods.push_back(std::move(m));
  }
  return nlohmann::json{{"rep", rec.rep_index}, {"seed", rec.seed}, {"methods", methods}};
}

inline ReplicationRecord record_from_json(const nlohmann::json& j) {
  ReplicationRecord rec;
  rec.rep_index = j.at("rep").get<int>();
  rec.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& m : j.at("methods")) {
    MethodResult res;
    res.method = parse_method(m.at("method").get<std::string>());
    res.ok = m.at("ok").get<bool>();
    if (res.ok) {
      res.err_low = m.at("errLow").get<std::vector<double>>();
      res.err_high = m.at("errHigh").get<std::vector<double>>();
      if (m.contains("acceptance")) res.acceptance = m.at("acceptance").get<double>();
      if (m.contains("finalK")) res.final_k = m.at("finalK").get<int>();
    } else {
      res.error = m.value("error", std::string());
    }
    rec.results.push_back(std::move(res));
  }
  return rec;
}

inline std::string record_line(const ReplicationRecord& rec) { return record_to_json(rec).dump(); }

// ---------------------------------------------------------------------------
// Experiment directory layout and persistence

struct ExperimentPaths {
  std::filesystem::path dir;
  std::filesystem::path records() const { return dir / "records.ndjson"; }
  std::filesystem::path manifest() const { return dir / "manifest.json"; }
  std::filesystem::path timings() const { return dir / "timings.csv"; }
  std::filesystem::path mse_csv() const { return dir / "mse_table.csv"; }
  std::filesystem::path boxplot_csv() const { return dir / "boxplot.csv"; }
  std::filesystem::path boxplot_summary_csv() const { return dir / "boxplot_summary.csv"; }
};

namespace detail {

// The seed-relevant part of the config: everything that determines record
// bytes except nReps and workers, which may grow or shrink across resumes.
inline nlohmann::json manifest_json(const SimulationConfig& cfg) {
  nlohmann::json methods = nlohmann::json::array();
  for (Method m : cfg.methods) methods.push_back(method_name(m));
  return nlohmann::json{
      {"baseSeed", cfg.base_seed},
      {"p", cfg.p},
      {"truePrior", true_prior_name(cfg.true_prior)},
      {"methods", methods},
      {"chains",
       {{"standard",
         {{"nScans", cfg.standard_chain.n_scans}, {"burnIn", cfg.standard_chain.burn_in}}},
        {"robustified",
         {{"nScans", cfg.robustified_chain.n_scans},
          {"burnIn", cfg.robustified_chain.burn_in},
          {"innerMhSweeps", cfg.robustified_chain.inner_mh_sweeps},
          {"initialK", cfg.robustified_chain.mh.initial_k},
          {"adaptEvery", cfg.robustified_chain.mh.adapt_every}}},
        {"dp",
         {{"nScans", cfg.dp_chain.n_scans},
          {"burnIn", cfg.dp_chain.burn_in},
          {"alpha", cfg.dp_chain.alpha}}}}}};
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace detail

// Loads persisted records.  A trailing line without a newline is a torn
// write from a crashed run; it is dropped (and the file truncated to the
// last complete line) so that resuming can append cleanly.
inline std::vector<ReplicationRecord> load_records(const std::filesystem::path& records_path) {
  std::vector<ReplicationRecord> out;
  if (!std::filesystem::exists(records_path)) return out;
  std::string text = detail::read_text_file(records_path);
  const std::size_t complete = text.rfind('\n');
  if (complete == std::string::npos) {
    if (!text.empty()) std::filesystem::resize_file(records_path, 0);
    return out;
  }
  if (complete + 1 != text.size()) {
    std::filesystem::resize_file(records_path, complete + 1);
    text.resize(complete + 1);
  }
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t eol = text.find('\n', pos);
    const std::string line = text.substr(pos, eol - pos);
    pos = eol + 1;
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw std::runtime_error("corrupt record in '" + records_path.string() + "': " + e.what());
    }
  }
  return out;
}

// Runs (or resumes) the experiment.  Completed replications found in the
// output directory are kept as-is; missing ones are computed in ascending
// order and appended.  The record writer is the single serialization point,
// and it flushes strictly in replication order, so the file bytes do not
// depend on the worker count.
inline std::vector<ReplicationRecord> run_experiment(const SimulationConfig& cfg) {
  validate(cfg);

  const bool persist = !cfg.out_dir.empty();
  ExperimentPaths paths{cfg.out_dir};
  std::map<int, ReplicationRecord> records;

  if (persist) {
    std::filesystem::create_directories(paths.dir);
    const nlohmann::json manifest = detail::manifest_json(cfg);
    if (std::filesystem::exists(paths.manifest())) {
      const nlohmann::json existing =
          nlohmann::json::parse(detail::read_text_file(paths.manifest()));
      if (existing != manifest)
        throw std::runtime_error(
            "output directory '" + cfg.out_dir +
            "' was created with a different configuration; use a fresh directory");
    } else {
      std::ofstream out(paths.manifest(), std::ios::binary);
      out << manifest.dump(2) << '\n';
      if (!out) throw std::runtime_error("cannot write '" + paths.manifest().string() + "'");
    }
    for (ReplicationRecord& rec : load_records(paths.records()))
      records.emplace(rec.rep_index, std::move(rec));
  }

  std::vector<int> todo;
  for (int r = 0; r < cfg.n_reps; ++r)
    if (!records.count(r)) todo.push_back(r);

  std::ofstream record_out, timing_out;
  if (persist && !todo.empty()) {
    record_out.open(paths.records(), std::ios::binary | std::ios::app);
    const bool fresh_timings = !std::filesystem::exists(paths.timings());
    timing_out.open(paths.timings(), std::ios::binary | std::ios::app);
    if (!record_out || !timing_out)
      throw std::runtime_error("cannot open output files in '" + cfg.out_dir + "'");
    if (fresh_timings) timing_out << "rep,method,seconds\n";
  }

  const int worker_count = std::min<int>(cfg.workers, static_cast<int>(todo.size()));
  std::map<int, ReplicationRecord> ready;
  std::mutex mu;
  std::condition_variable cv;
  std::atomic<std::size_t> next{0};

  auto work = [&] {
    while (true) {
      const std::size_t t = next.fetch_add(1);
      if (t >= todo.size()) return;
      ReplicationRecord rec = run_replication(cfg, todo[t]);
      {
        std::lock_guard<std::mutex> lock(mu);
        ready.emplace(todo[t], std::move(rec));
      }
      cv.notify_all();
    }
  };

  std::vector<std::thread> threads;
  for (int w = 0; w < worker_count; ++w) threads.emplace_back(work);

  for (int rep : todo) {
    ReplicationRecord rec;
    {
      std::unique_lock<std::mutex> lock(mu);
      cv.wait(lock, [&] { return ready.count(rep) != 0; });
      rec = std::move(ready.at(rep));
      ready.erase(rep);
    }
    if (persist) {
      record_out << record_line(rec) << '\n' << std::flush;
      for (const MethodResult& r : rec.results)
        timing_out << rec.rep_index << ',' << method_name(r.method) << ',' << r.seconds << '\n';
      timing_out.flush();
    }
    records.emplace(rec.rep_index, std::move(rec));
  }
  for (std::thread& t : threads) t.join();

  std::vector<ReplicationRecord> out;
  out.reserve(records.size());
  for (auto& [rep, rec] : records) out.push_back(std::move(rec));
  return out;
}

// ---------------------------------------------------------------------------
// Post-processing: MSE table

struct MseCell {
  int i = 1;                  // extremeness rank, 1 = most extreme
  std::string prior;          // true prior name
  std::string method;
  std::optional<double> mse;  // absent when any record lacks the method
  std::size_t n_errors = 0;   // squared errors pooled (2 per complete rep)
};

// Pools the i-th smallest and i-th largest errors across replications.  A
// method missing or failed in any record makes the cell absent rather than
// silently averaging over a subset.
inline std::vector<MseCell> mse_table(const std::vector<ReplicationRecord>& records,
                                      const std::string& prior_name,
                                      int i_max = kExtremesPerSide) {
  if (records.empty()) throw std::invalid_argument("mse_table: no records");
  if (i_max < 1 || i_max > kExtremesPerSide)
    throw std::invalid_argument("mse_table: i_max must lie in [1, 3]");

  std::vector<Method> methods;
  for (const MethodResult& r : records.front().results) methods.push_back(r.method);

  std::vector<MseCell> cells;
  for (int i = 1; i <= i_max; ++i) {
    for (Method m : methods) {
      MseCell cell;
      cell.i = i;
      cell.prior = prior_name;
      cell.method = method_name(m);
      double sum = 0.0;
      std::size_t n = 0;
      bool complete = true;
      for (const ReplicationRecord& rec : records) {
        const MethodResult* found = nullptr;
        for (const MethodResult& r : rec.results)
          if (r.method == m) found = &r;
        if (!found || !found->ok) {
          complete = false;
          continue;
        }
        sum += found->err_low[i - 1] * found->err_low[i - 1];
        sum += found->err_high[i - 1] * found->err_high[i - 1];
        n += 2;
      }
      cell.n_errors = n;
      if (complete && n > 0) cell.mse = sum / static_cast<double>(n);
      cells.push_back(std::move(cell));
    }
  }
  return cells;
}

namespace detail {

// Shortest round-trip decimal form, so CSV outputs are deterministic and
// parse back to the exact double.
inline std::string format_double(double x) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

}  // namespace detail

inline void write_mse_csv(const std::vector<MseCell>& cells, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << "i,prior,method,mse,nErrors\n";
  for (const MseCell& c : cells) {
    out << c.i << ',' << c.prior << ',' << c.method << ','
        << (c.mse ? detail::format_double(*c.mse) : "NA") << ',' << c.n_errors << '\n';
  }
  if (!out) throw std::runtime_error("error writing '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// Post-processing: boxplot export of the most extreme errors (i = 1)

struct BoxplotRow {
  int rep = 0;
  std::string side;  // "low" or "high"
  std::string prior;
  std::string method;
  double error = 0.0;
};

struct FiveNumber {
  std::string prior;
  std::string method;
  std::size_t n = 0;
  double min = 0.0, q1 = 0.0, median = 0.0, q3 = 0.0, max = 0.0;
};

namespace detail {

// Linear-interpolation quantile of a sorted sample (the common "type 7").
inline double sorted_quantile(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  if (lo + 1 >= sorted.size()) return sorted.back();
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + (sorted[lo + 1] - sorted[lo]) * frac;
}

}  // namespace detail

inline std::vector<BoxplotRow> boxplot_rows(const std::vector<ReplicationRecord>& records,
                                            const std::string& prior_name) {
  if (records.empty()) throw std::invalid_argument("boxplot_rows: no records");
  std::vector<BoxplotRow> rows;
  for (const ReplicationRecord& rec : records) {
    for (const MethodResult& r : rec.results) {
      if (!r.ok) continue;
      rows.push_back({rec.rep_index, "low", prior_name, method_name(r.method), r.err_low[0]});
      rows.push_back({rec.rep_index, "high", prior_name, method_name(r.method), r.err_high[0]});
    }
  }
  return rows;
}

inline std::vector<FiveNumber> boxplot_summary(const std::vector<BoxplotRow>& rows) {
  std::map<std::pair<std::string, std::string>, std::vector<double>> cells;
  for (const BoxplotRow& r : rows) cells[{r.prior, r.method}].push_back(r.error);
  std::vector<FiveNumber> out;
  for (auto& [key, values] : cells) {
    std::sort(values.begin(), values.end());
    FiveNumber f;
    f.prior = key.first;
    f.method = key.second;
    f.n = values.size();
    f.min = values.front();
    f.q1 = detail::sorted_quantile(values, 0.25);
    f.median = detail::sorted_quantile(values, 0.5);
    f.q3 = detail::sorted_quantile(values, 0.75);
    f.max = values.back();
    out.push_back(std::move(f));
  }
  return out;
}

inline void write_boxplot_csv(const std::vector<BoxplotRow>& rows,
                              const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << "rep,side,prior,method,error\n";
  for (const BoxplotRow& r : rows)
    out << r.rep << ',' << r.side << ',' << r.prior << ',' << r.method << ','
        << detail::format_double(r.error) << '\n';
  if (!out) throw std::runtime_error("error writing '" + path.string() + "'");
}

inline void write_boxplot_summary_csv(const std::vector<FiveNumber>& cells,
                                      const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << "prior,method,n,min,q1,median,q3,max\n";
  for (const FiveNumber& f : cells)
    out << f.prior << ',' << f.method << ',' << f.n << ',' << detail::format_double(f.min) << ','
        << detail::format_double(f.q1) << ',' << detail::format_double(f.median) << ','
        << detail::format_double(f.q3) << ',' << detail::format_double(f.max) << '\n';
  if (!out) throw std::runtime_error("error writing '" + path.string() + "'");
}

}  // namespace pebayes
