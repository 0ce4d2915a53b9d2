#pragma once

// Experiment orchestration behind the CLI: config parsing, dataset generation, evaluation sweeps,
// kernel dumps and step-size sweeps. All outputs are tidy CSV or key=value text.

#include "spectral_dice/baselines.hpp"
#include "spectral_dice/envs.hpp"
#include "spectral_dice/io.hpp"

#include <atomic>
#include <ctime>
#include <functional>
#include <mutex>
#include <thread>

namespace sdice::harness {

namespace fs = std::filesystem;

struct ConfigError : ArgumentError {
  using ArgumentError::ArgumentError;
};

/// Flattened config: "section.key" -> raw value.
using RawConfig = std::map<std::string, std::string>;

inline RawConfig parse_config_text(const std::string& text, const std::string& origin = "<config>") {
  RawConfig raw;
  std::istringstream in(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = origin + ":" + std::to_string(lineno);
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = io::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3) throw ConfigError(where + ": malformed section header");
      section = io::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    if (section.empty()) throw ConfigError(where + ": key outside of any section");
    const std::string key = section + "." + io::trim(line.substr(0, eq));
    if (raw.count(key)) throw ConfigError(where + ": duplicate key " + key);
    raw[key] = io::trim(line.substr(eq + 1));
  }
  return raw;
}

inline RawConfig load_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path.string() + ": cannot open config");
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config_text(text.str(), path.string());
}

/// Sorted key=value lines; the hash input. output.* keys only say where files go, so they are left out.
inline std::string canonical(const RawConfig& raw) {
  std::string out;
  for (const auto& [k, v] : raw)
    if (k.rfind("output.", 0) != 0) out += k + "=" + v + "\n";
  return out;
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

struct ExperimentConfig {
  RawConfig raw;
  std::uint64_t hash = 0;
  fs::path base_dir = ".";  ///< relative paths in the config resolve against this

  std::string env_kind = "lowrank";  ///< lowrank | four_rooms | file
  int states = 8;
  int actions = 2;
  int rank = 2;
  std::uint64_t env_seed = 0;
  bool reward_linear = false;
  double gamma = 0.9;
  double noise = 0.1;
  int goal = -1;  ///< -1 picks the last cell
  std::string env_path;

  std::string target_spec = "greedy:0.1";
  std::string behavior_spec = "uniform";

  std::vector<std::size_t> n_list{1024};
  std::vector<std::uint64_t> seeds{0};
  SamplingMode sampling = SamplingMode::geometric;
  std::size_t horizon = 100;

  std::string rep_method = "ols";  ///< svd | ols | nce | truth | identity
  std::vector<int> d_list{2};
  ReplearnConfig replearn;
  bool empirical_q_pib = false;

  Regularizer reg = Regularizer::half_square(1e-3);
  SolverConfig solver;
  std::optional<double> c_inf_bound;  ///< empty means 2 x concentratability

  bool run_direct_dice = false;
  bool run_model_based = true;
  bool run_importance_sampling = true;
  double mb_alpha = 0.1;
  std::size_t is_horizon = 100;

  fs::path out_dir = "out";
  bool save_reps = false;
  bool save_solutions = false;
  int kernel_state = 0;

  std::vector<std::pair<std::string, std::vector<std::string>>> sweep;
};

namespace detail {

inline std::vector<std::string> list_items(const std::string& v) {
  std::vector<std::string> out;
  for (auto& item : io::split(v, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

/// Integer with optional "2^k" notation.
inline long long parse_count(const std::string& s, const std::string& key) {
  try {
    const auto caret = s.find('^');
    if (caret != std::string::npos) {
      const long long base = io::parse_int(io::trim(s.substr(0, caret)), key);
      const long long exp = io::parse_int(io::trim(s.substr(caret + 1)), key);
      if (exp < 0 || exp > 62) throw ConfigError(key + ": exponent out of range");
      long long v = 1;
      for (long long i = 0; i < exp; ++i) v *= base;
      return v;
    }
    return io::parse_int(s, key);
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
}

inline double parse_real(const std::string& s, const std::string& key) {
  try {
    return io::parse_double(s, key);
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
}

inline bool parse_bool(const std::string& s, const std::string& key) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError(key + ": expected a boolean, got '" + s + "'");
}

inline const std::vector<std::string>& known_keys() {
  static const std::vector<std::string> keys = {
      "env.kind", "env.states", "env.actions", "env.rank", "env.seed", "env.reward_linear", "env.gamma",
      "env.noise", "env.goal", "env.path",
      "policy.target", "policy.behavior",
      "data.n", "data.seeds", "data.sampling", "data.horizon",
      "replearn.method", "replearn.d", "replearn.steps", "replearn.step_size", "replearn.batch_size",
      "replearn.nce_clamp", "replearn.q_pib",
      "solver.regularizer", "solver.lambda", "solver.steps", "solver.step_q", "solver.step_w",
      "solver.batch_size", "solver.c_inf_bound", "solver.projection_passes", "solver.trace_every",
      "solver.gap_probes",
      "baselines.direct_dice", "baselines.model_based", "baselines.importance_sampling", "baselines.mb_alpha",
      "baselines.is_horizon",
      "output.dir", "output.save_reps", "output.save_solutions", "output.kernel_state"};
  return keys;
}

}  // namespace detail

inline ExperimentConfig parse_experiment(const RawConfig& raw, const fs::path& base_dir = ".") {
  ExperimentConfig c;
  c.raw = raw;
  c.hash = fnv1a(canonical(raw));
  c.base_dir = base_dir;
  const auto& known = detail::known_keys();
  for (const auto& [k, v] : raw) {
    if (k.rfind("sweep.", 0) == 0) {
      const std::string target = k.substr(6);
      if (std::find(known.begin(), known.end(), target) == known.end())
        throw ConfigError("sweep: unknown key " + target);
      const auto values = detail::list_items(v);
      if (values.empty()) throw ConfigError(k + ": empty value list");
      c.sweep.emplace_back(target, values);
      continue;
    }
    if (std::find(known.begin(), known.end(), k) == known.end()) throw ConfigError("unknown config key " + k);
  }
  auto get = [&](const std::string& k) -> const std::string* {
    const auto it = raw.find(k);
    return it == raw.end() ? nullptr : &it->second;
  };
  auto count = [&](const std::string& k, auto& dst) {
    if (const auto* v = get(k)) dst = static_cast<std::remove_reference_t<decltype(dst)>>(detail::parse_count(*v, k));
  };
  auto real = [&](const std::string& k, double& dst) {
    if (const auto* v = get(k)) dst = detail::parse_real(*v, k);
  };
  auto flag = [&](const std::string& k, bool& dst) {
    if (const auto* v = get(k)) dst = detail::parse_bool(*v, k);
  };
  auto text = [&](const std::string& k, std::string& dst) {
    if (const auto* v = get(k)) dst = *v;
  };

  text("env.kind", c.env_kind);
  if (c.env_kind != "lowrank" && c.env_kind != "four_rooms" && c.env_kind != "file")
    throw ConfigError("env.kind must be lowrank, four_rooms or file");
  count("env.states", c.states);
  count("env.actions", c.actions);
  count("env.rank", c.rank);
  count("env.seed", c.env_seed);
  flag("env.reward_linear", c.reward_linear);
  real("env.gamma", c.gamma);
  real("env.noise", c.noise);
  count("env.goal", c.goal);
  text("env.path", c.env_path);
  if (c.env_kind == "file" && c.env_path.empty()) throw ConfigError("env.path is required for kind = file");

  text("policy.target", c.target_spec);
  text("policy.behavior", c.behavior_spec);

  if (const auto* v = get("data.n")) {
    c.n_list.clear();
    for (const auto& item : detail::list_items(*v)) {
      const long long n = detail::parse_count(item, "data.n");
      if (n < 1) throw ConfigError("data.n: values must be >= 1");
      c.n_list.push_back(static_cast<std::size_t>(n));
    }
  }
  if (const auto* v = get("data.seeds")) {
    c.seeds.clear();
    for (const auto& item : detail::list_items(*v)) {
      const long long s = detail::parse_count(item, "data.seeds");
      if (s < 0) throw ConfigError("data.seeds: values must be >= 0");
      c.seeds.push_back(static_cast<std::uint64_t>(s));
    }
  }
  if (const auto* v = get("data.sampling")) {
    if (*v == "geometric") c.sampling = SamplingMode::geometric;
    else if (*v == "trajectory") c.sampling = SamplingMode::trajectory;
    else throw ConfigError("data.sampling must be geometric or trajectory");
  }
  count("data.horizon", c.horizon);

  text("replearn.method", c.rep_method);
  if (c.rep_method != "svd" && c.rep_method != "ols" && c.rep_method != "nce" && c.rep_method != "truth" &&
      c.rep_method != "identity")
    throw ConfigError("replearn.method must be svd, ols, nce, truth or identity");
  if (const auto* v = get("replearn.d")) {
    c.d_list.clear();
    for (const auto& item : detail::list_items(*v)) c.d_list.push_back(static_cast<int>(detail::parse_count(item, "replearn.d")));
  }
  count("replearn.steps", c.replearn.steps);
  real("replearn.step_size", c.replearn.step_size);
  count("replearn.batch_size", c.replearn.batch_size);
  real("replearn.nce_clamp", c.replearn.nce_clamp);
  if (const auto* v = get("replearn.q_pib")) {
    if (*v != "exact" && *v != "empirical") throw ConfigError("replearn.q_pib must be exact or empirical");
    c.empirical_q_pib = *v == "empirical";
  }

  std::string reg_kind = "half_square";
  text("solver.regularizer", reg_kind);
  double lambda = 1e-3;
  real("solver.lambda", lambda);
  if (reg_kind == "none") c.reg = Regularizer::none();
  else if (reg_kind == "half_square") c.reg = Regularizer::half_square(lambda);
  else throw ConfigError("solver.regularizer must be none or half_square");
  count("solver.steps", c.solver.steps);
  real("solver.step_q", c.solver.step_q);
  real("solver.step_w", c.solver.step_w);
  count("solver.batch_size", c.solver.batch_size);
  if (const auto* v = get("solver.c_inf_bound"); v && *v != "auto")
    c.c_inf_bound = detail::parse_real(*v, "solver.c_inf_bound");
  count("solver.projection_passes", c.solver.projection_passes);
  count("solver.trace_every", c.solver.trace_every);
  count("solver.gap_probes", c.solver.gap_probes);

  flag("baselines.direct_dice", c.run_direct_dice);
  flag("baselines.model_based", c.run_model_based);
  flag("baselines.importance_sampling", c.run_importance_sampling);
  real("baselines.mb_alpha", c.mb_alpha);
  count("baselines.is_horizon", c.is_horizon);

  if (const auto* v = get("output.dir")) c.out_dir = *v;
  flag("output.save_reps", c.save_reps);
  flag("output.save_solutions", c.save_solutions);
  count("output.kernel_state", c.kernel_state);

  if (c.n_list.empty() || c.seeds.empty() || c.d_list.empty()) throw ConfigError("data.n, data.seeds and replearn.d must be nonempty");
  for (int d : c.d_list)
    if (d < 1) throw ConfigError("replearn.d: values must be >= 1");
  if (c.horizon < 1 || c.is_horizon < 1) throw ConfigError("horizons must be >= 1");
  if (!(c.gamma > 0.0 && c.gamma < 1.0)) throw ConfigError("env.gamma must lie in (0,1)");
  if (c.c_inf_bound && *c.c_inf_bound < 1.0) throw ConfigError("solver.c_inf_bound must be >= 1");
  try {
    c.reg.validate();
    c.solver.validate();
    c.replearn.validate();
  } catch (const ArgumentError& e) {
    throw ConfigError(e.what());
  }
  if (c.mb_alpha <= 0.0) throw ConfigError("baselines.mb_alpha must be positive");
  if (c.out_dir.is_relative()) c.out_dir = c.base_dir / c.out_dir;
  return c;
}

inline ExperimentConfig load_experiment(const fs::path& path) {
  return parse_experiment(load_config(path), path.has_parent_path() ? path.parent_path() : fs::path("."));
}

/// MDP, optional ground truth and the policy pair an experiment runs on.
struct Environment {
  TabularMdp mdp;
  std::optional<LowRankGroundTruth> truth;
  Policy target;
  Policy behavior;
  bool grid = false;
};

/// Policy specs: uniform | random:SEED | greedy:EPS | file:PATH.
inline Policy build_policy(const std::string& spec, const TabularMdp& mdp, const fs::path& base_dir) {
  const auto colon = spec.find(':');
  const std::string kind = spec.substr(0, colon);
  const std::string arg = colon == std::string::npos ? "" : spec.substr(colon + 1);
  Policy pi;
  if (kind == "uniform") pi = uniform_policy(mdp.n_states, mdp.n_actions);
  else if (kind == "random")
    pi = random_policy(mdp.n_states, mdp.n_actions, static_cast<std::uint64_t>(detail::parse_count(arg, spec)));
  else if (kind == "greedy") {
    const double eps = detail::parse_real(arg, spec);
    if (!(eps >= 0.0 && eps <= 1.0)) throw ConfigError(spec + ": epsilon must lie in [0,1]");
    pi = epsilon_greedy_optimal(mdp, eps);
  } else if (kind == "file") {
    fs::path p = arg;
    if (p.is_relative()) p = base_dir / p;
    pi = io::read_policy(p);
  } else {
    throw ConfigError("unknown policy spec '" + spec + "'");
  }
  if (pi.n_states() != mdp.n_states || pi.n_actions() != mdp.n_actions)
    throw ConfigError(spec + ": policy shape does not match the environment");
  return pi;
}

inline Environment build_environment(const ExperimentConfig& c) {
  Environment env;
  try {
    if (c.env_kind == "lowrank") {
      auto [mdp, gt] = random_lowrank_mdp(c.states, c.actions, c.rank, c.env_seed, {c.gamma, c.reward_linear});
      env.mdp = std::move(mdp);
      env.truth = std::move(gt);
    } else if (c.env_kind == "four_rooms") {
      const int n = static_cast<int>(four_rooms_layout().cells.size());
      env.mdp = four_rooms(c.noise, c.goal < 0 ? n - 1 : c.goal, c.gamma);
      env.grid = true;
    } else {
      fs::path p = c.env_path;
      if (p.is_relative()) p = c.base_dir / p;
      env.mdp = io::read_mdp(p);
    }
  } catch (const ArgumentError& e) {
    throw ConfigError(std::string("env: ") + e.what());
  }
  env.target = build_policy(c.target_spec, env.mdp, c.base_dir);
  env.behavior = build_policy(c.behavior_spec, env.mdp, c.base_dir);
  return env;
}

/// Independent RNG streams keyed by (seed, N, d, stage). Generation and evaluation use the same keys,
/// so an evaluated dataset is byte-identical to the one `generate` writes.
enum class Stream : std::uint64_t { data = 1, trajectories = 2, replearn = 3, solver = 4, baseline = 5 };

inline std::uint64_t stream_seed(std::uint64_t seed, std::size_t n, int d, Stream s) {
  return mix_seed(mix_seed(mix_seed(seed, n), static_cast<std::uint64_t>(d)), static_cast<std::uint64_t>(s));
}

struct RunOptions {
  int jobs = 1;
  std::uint64_t seed_offset = 0;
};

inline TransitionDataset make_dataset(const ExperimentConfig& c, const Environment& env, std::size_t n,
                                      std::uint64_t seed) {
  const std::uint64_t s = stream_seed(seed, n, 0, Stream::data);
  if (c.sampling == SamplingMode::trajectory)
    return sample_trajectory_dataset(env.mdp, env.behavior, n, c.horizon, s, c.behavior_spec);
  return sample_dataset(env.mdp, env.behavior, n, s, c.behavior_spec);
}

inline std::string dataset_stem(std::size_t n, std::uint64_t seed) {
  return "n" + std::to_string(n) + "_seed" + std::to_string(seed);
}

/// Runs `fn(i)` for i in [0, count) on a bounded pool of worker threads.
inline void parallel_for(std::size_t count, int jobs, const std::function<void(std::size_t)>& fn) {
  const int workers = std::max(1, std::min<int>(jobs, static_cast<int>(count)));
  if (workers == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

struct GenerateSummary {
  std::vector<fs::path> datasets;
  fs::path manifest;
};

/// Writes mdp.txt, one dataset per (N, seed) under datasets/, and manifest.txt listing them.
inline GenerateSummary cmd_generate(const ExperimentConfig& c, const RunOptions& opts = {}) {
  const Environment env = build_environment(c);
  GenerateSummary out;
  io::write_mdp(c.out_dir / "mdp.txt", env.mdp);
  std::vector<std::pair<std::size_t, std::uint64_t>> jobs;
  for (std::size_t n : c.n_list)
    for (std::uint64_t seed : c.seeds) jobs.emplace_back(n, seed + opts.seed_offset);
  out.datasets.resize(jobs.size());
  parallel_for(jobs.size(), opts.jobs, [&](std::size_t i) {
    const auto [n, seed] = jobs[i];
    const fs::path path = c.out_dir / "datasets" / (dataset_stem(n, seed) + ".csv");
    io::write_dataset(path, make_dataset(c, env, n, seed));
    out.datasets[i] = path;
  });
  out.manifest = c.out_dir / "manifest.txt";
  auto m = io::open_out(out.manifest);
  for (const auto& p : out.datasets) m << fs::relative(p, c.out_dir).generic_string() << '\n';
  if (!m) throw IoError(out.manifest.string() + ": write failed");
  return out;
}

struct ResultRow {
  std::string config_hash;
  std::size_t cell = 0;
  std::string method;
  std::string replearn;
  std::string env;
  std::size_t n = 0;
  int d = 0;  ///< 0 for estimators without features
  std::uint64_t seed = 0;
  double rho_hat = std::numeric_limits<double>::quiet_NaN();
  double rho_true = 0.0;
  double abs_error = std::numeric_limits<double>::quiet_NaN();
  double relative_error = std::numeric_limits<double>::quiet_NaN();
  double replearn_error = std::numeric_limits<double>::quiet_NaN();
  double final_gap = std::numeric_limits<double>::quiet_NaN();
  std::string status = "ok";
  std::string message;
};

inline const char* kResultsHeader =
    "config_hash,cell,method,replearn,env,N,d,seed,rho_hat,rho_true,abs_error,relative_error,replearn_error,"
    "final_gap,status,message";

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += "\"\"";
    else if (ch == '\n' || ch == '\r') out += ' ';
    else out += ch;
  }
  return out + "\"";
}

inline std::string format_row(const ResultRow& r) {
  std::ostringstream o;
  o << r.config_hash << ',' << r.cell << ',' << r.method << ',' << r.replearn << ',' << r.env << ',' << r.n << ','
    << (r.d > 0 ? std::to_string(r.d) : "") << ',' << r.seed << ',' << io::format_double(r.rho_hat) << ','
    << io::format_double(r.rho_true) << ',' << io::format_double(r.abs_error) << ','
    << io::format_double(r.relative_error) << ',' << io::format_double(r.replearn_error) << ','
    << io::format_double(r.final_gap) << ',' << r.status << ',' << csv_field(r.message);
  return o.str();
}

struct EvaluateSummary {
  std::vector<ResultRow> rows;
  std::size_t failed_cells = 0;
  fs::path results_csv;
};

namespace detail {

struct Cell {
  std::size_t n;
  int d;
  std::uint64_t seed;
  bool with_baselines;
};

template <typename Fn>
void guarded(ResultRow& row, Fn&& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    row.status = "error";
    row.message = e.what();
  }
}

}  // namespace detail

/// Builds the representation a cell asks for. Returns the effective dimension through `rep.d`.
inline SpectralRep cell_representation(const ExperimentConfig& c, const Environment& env, const TransitionDataset& ds,
                                       const Vec& d_behavior, int d, std::uint64_t seed) {
  const int ns = env.mdp.n_states;
  const int na = env.mdp.n_actions;
  if (c.rep_method == "svd") return svd_representation(env.mdp, env.target, env.behavior, d);
  if (c.rep_method == "truth") {
    if (!env.truth) throw ArgumentError("replearn.method = truth needs env.kind = lowrank");
    return ground_truth_rep(env.mdp, *env.truth, env.target, env.behavior);
  }
  const Vec freq = pair_frequencies(ds, ns, na);
  if (c.rep_method == "identity") return identity_rep(ns, na, freq);
  ReplearnConfig rc = c.replearn;
  rc.method = c.rep_method == "nce" ? ReplearnMethod::nce : ReplearnMethod::ols;
  rc.d = d;
  rc.seed = stream_seed(seed, ds.n(), d, Stream::replearn);
  return learn_representation(ds, env.target, rc, c.empirical_q_pib ? freq : d_behavior);
}

/// Runs every (N, d, seed) cell, writes results.csv (deterministic bytes) and run_info.txt (timestamped).
inline EvaluateSummary cmd_evaluate(const ExperimentConfig& c, const RunOptions& opts = {}) {
  const Environment env = build_environment(c);
  const std::string env_label = c.env_kind;
  const std::string hash = hex(c.hash);
  const double rho_true = policy_value_exact(env.mdp, env.target);
  const double rho_behavior = policy_value_exact(env.mdp, env.behavior);
  const double value_gap = std::abs(rho_behavior - rho_true);
  const Vec d_behavior = occupancy_measure(env.mdp, env.behavior).values;
  double c_inf = 10.0;
  if (c.c_inf_bound) {
    c_inf = *c.c_inf_bound;
  } else {
    try {
      c_inf = std::max(1.0, 2.0 * concentratability(env.mdp, env.target, env.behavior));
    } catch (const CoverageError&) {
      // Keep the fallback bound; rows still report whatever the solver produces.
    }
  }

  std::vector<detail::Cell> cells;
  for (std::size_t n : c.n_list)
    for (std::size_t di = 0; di < c.d_list.size(); ++di)
      for (std::uint64_t seed : c.seeds) cells.push_back({n, c.d_list[di], seed + opts.seed_offset, di == 0});

  std::vector<std::vector<ResultRow>> per_cell(cells.size());
  std::vector<char> failed(cells.size(), 0);
  parallel_for(cells.size(), opts.jobs, [&](std::size_t ci) {
    const auto& cell = cells[ci];
    auto base = [&](const std::string& method) {
      ResultRow r;
      r.config_hash = hash;
      r.cell = ci;
      r.method = method;
      r.env = env_label;
      r.n = cell.n;
      r.seed = cell.seed;
      r.rho_true = rho_true;
      return r;
    };
    auto finish = [&](ResultRow& r) {
      if (r.status == "ok") {
        r.abs_error = std::abs(r.rho_hat - rho_true);
        r.relative_error = value_gap > 0.0 ? r.abs_error / value_gap : std::numeric_limits<double>::quiet_NaN();
      } else {
        failed[ci] = 1;
      }
      per_cell[ci].push_back(std::move(r));
    };

    std::optional<TransitionDataset> ds;
    ResultRow main = base("spectral_dice");
    main.replearn = c.rep_method;
    main.d = cell.d;
    detail::guarded(main, [&] {
      ds = make_dataset(c, env, cell.n, cell.seed);
      const SpectralRep rep = cell_representation(c, env, *ds, d_behavior, cell.d, cell.seed);
      main.d = rep.d;
      main.replearn_error = replearn_error(rep, env.mdp, env.target, env.behavior);
      SolverConfig sc = c.solver;
      sc.c_inf_bound = c_inf;
      sc.seed = stream_seed(cell.seed, cell.n, cell.d, Stream::solver);
      const DiceSolution sol = spectral_dice(rep, *ds, env.target, env.mdp.mu0, env.mdp.reward, c.reg, sc);
      main.rho_hat = sol.rho_hat;
      main.final_gap = sol.final_gap;
      const std::string tag = "n" + std::to_string(cell.n) + "_d" + std::to_string(cell.d) + "_seed" +
                              std::to_string(cell.seed);
      if (c.save_reps)
        io::write_rep(c.out_dir / "reps" / tag, rep, {{"method", c.rep_method}, {"seed", std::to_string(cell.seed)},
                                                     {"steps", std::to_string(c.replearn.steps)}});
      if (c.save_solutions) io::write_solution(c.out_dir / "solutions" / tag, sol);
    });
    finish(main);
    if (!cell.with_baselines) return;

    if (c.run_direct_dice) {
      ResultRow r = base("direct_dice");
      detail::guarded(r, [&] {
        if (!ds) ds = make_dataset(c, env, cell.n, cell.seed);
        SolverConfig sc = c.solver;
        sc.c_inf_bound = c_inf;
        sc.seed = stream_seed(cell.seed, cell.n, 0, Stream::solver);
        const BaselineResult b = direct_dice(*ds, env.target, env.mdp.mu0, env.mdp.reward, c.reg, sc);
        r.rho_hat = b.rho_hat;
        r.final_gap = b.diagnostics.at("final_gap");
      });
      finish(r);
    }
    if (c.run_model_based) {
      ResultRow r = base("model_based");
      detail::guarded(r, [&] {
        if (!ds) ds = make_dataset(c, env, cell.n, cell.seed);
        r.rho_hat = model_based(*ds, env.target, env.mdp.n_states, env.mdp.n_actions, env.mdp.mu0, env.mdp.reward,
                                env.mdp.gamma, c.mb_alpha)
                        .rho_hat;
      });
      finish(r);
    }
    if (c.run_importance_sampling) {
      ResultRow r = base("importance_sampling");
      detail::guarded(r, [&] {
        const std::size_t count = (cell.n + c.is_horizon - 1) / c.is_horizon;
        const auto trajs = sample_trajectories(env.mdp, env.behavior, count, c.is_horizon,
                                               stream_seed(cell.seed, cell.n, 0, Stream::trajectories));
        const BaselineResult b = importance_sampling(trajs, env.target, env.behavior, env.mdp.gamma, env.mdp.reward);
        r.rho_hat = b.rho_hat;
        r.message = "weight_variance=" + io::format_double(b.diagnostics.at("weight_variance"));
      });
      finish(r);
    }
  });

  EvaluateSummary out;
  for (auto& rows : per_cell)
    for (auto& r : rows) out.rows.push_back(std::move(r));
  out.failed_cells = static_cast<std::size_t>(std::count(failed.begin(), failed.end(), 1));
  out.results_csv = c.out_dir / "results.csv";
  {
    auto f = io::open_out(out.results_csv);
    f << kResultsHeader << '\n';
    for (const auto& r : out.rows) f << format_row(r) << '\n';
    if (!f) throw IoError(out.results_csv.string() + ": write failed");
  }
  char stamp[32];
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", &tm);
  io::write_key_values(c.out_dir / "run_info.txt", {{"timestamp", stamp},
                                                    {"config_hash", hash},
                                                    {"jobs", std::to_string(opts.jobs)},
                                                    {"seed_offset", std::to_string(opts.seed_offset)},
                                                    {"rows", std::to_string(out.rows.size())},
                                                    {"failed_cells", std::to_string(out.failed_cells)},
                                                    {"c_inf_bound", io::format_double(c_inf)}});
  return out;
}

/// P_hat(s' | s, a) for one state, one row per action: the reconstruction marginalized over a'.
inline Mat model_next_state_rows(const SpectralRep& rep, int state) {
  sdice::detail::require(state >= 0 && state < rep.n_states,
                  "dump-kernel: state " + std::to_string(state) + " out of range [0, " +
                      std::to_string(rep.n_states) + ")");
  const int na = rep.n_actions;
  Mat rows = Mat::Zero(na, rep.n_states);
  for (int a = 0; a < na; ++a) {
    const Vec row = (rep.mu_pi * rep.phi.row(state * na + a).transpose()).cwiseProduct(rep.q_pib);
    for (int sp = 0; sp < rep.n_states; ++sp) rows(a, sp) = row.segment(sp * na, na).sum();
  }
  return rows;
}

/// Writes the tidy CSV `action,s_next,grid_row,grid_col,prob` (grid columns only for Four Rooms).
inline Mat cmd_dump_kernel(const ExperimentConfig& c, const fs::path& rep_dir, int state, const fs::path& out_path) {
  const SpectralRep rep = io::read_rep(rep_dir);
  const Mat rows = model_next_state_rows(rep, state);
  const bool grid = c.env_kind == "four_rooms" && rep.n_states == static_cast<int>(four_rooms_layout().cells.size());
  auto f = io::open_out(out_path);
  f << (grid ? "action,s_next,grid_row,grid_col,prob\n" : "action,s_next,prob\n");
  for (int a = 0; a < rows.rows(); ++a)
    for (int sp = 0; sp < rows.cols(); ++sp) {
      f << a << ',' << sp << ',';
      if (grid) {
        const auto [r, col] = four_rooms_layout().cells[sp];
        f << r << ',' << col << ',';
      }
      f << io::format_double(rows(a, sp)) << '\n';
    }
  if (!f) throw IoError(out_path.string() + ": write failed");
  return rows;
}

struct SweepSummary {
  std::size_t combos = 0;
  std::size_t failed_cells = 0;
  fs::path summary_csv;
};

/// Cartesian product over the [sweep] lists. Each combination runs cmd_evaluate into
/// sweep/combo_<k>/; sweep_summary.csv holds the median absolute error per method.
inline SweepSummary cmd_sweep(const ExperimentConfig& c, const RunOptions& opts = {}) {
  if (c.sweep.empty()) throw ConfigError("sweep: the config has no [sweep] section");
  std::size_t total = 1;
  for (const auto& [key, values] : c.sweep) total *= values.size();

  SweepSummary out;
  out.combos = total;
  out.summary_csv = c.out_dir / "sweep_summary.csv";
  std::ostringstream summary;
  summary << "combo,overrides,method,rows,failed,median_abs_error\n";
  for (std::size_t k = 0; k < total; ++k) {
    RawConfig raw;
    for (const auto& [key, v] : c.raw)
      if (key.rfind("sweep.", 0) != 0) raw[key] = v;
    std::string overrides;
    std::size_t rest = k;
    for (const auto& [key, values] : c.sweep) {
      const std::string& v = values[rest % values.size()];
      rest /= values.size();
      raw[key] = v;
      overrides += (overrides.empty() ? "" : ";") + key + "=" + v;
    }
    const fs::path combo_dir = c.out_dir / "sweep" / ("combo_" + std::to_string(k));
    raw["output.dir"] = fs::absolute(combo_dir).string();
    const ExperimentConfig sub = parse_experiment(raw, c.base_dir);
    const EvaluateSummary res = cmd_evaluate(sub, opts);
    out.failed_cells += res.failed_cells;

    std::map<std::string, std::vector<double>> errors;
    std::map<std::string, std::size_t> failures;
    std::vector<std::string> order;
    for (const auto& r : res.rows) {
      if (!errors.count(r.method)) order.push_back(r.method);
      auto& e = errors[r.method];
      if (r.status == "ok") e.push_back(r.abs_error);
      else ++failures[r.method];
    }
    for (const auto& m : order) {
      auto e = errors[m];
      double med = std::numeric_limits<double>::quiet_NaN();
      if (!e.empty()) {
        std::sort(e.begin(), e.end());
        med = e.size() % 2 ? e[e.size() / 2] : 0.5 * (e[e.size() / 2 - 1] + e[e.size() / 2]);
      }
      summary << k << ',' << csv_field(overrides) << ',' << m << ',' << e.size() + failures[m] << ','
              << failures[m] << ',' << io::format_double(med) << '\n';
    }
  }
  auto f = io::open_out(out.summary_csv);
  f << summary.str();
  if (!f) throw IoError(out.summary_csv.string() + ": write failed");
  return out;
}

}  // namespace sdice::harness
