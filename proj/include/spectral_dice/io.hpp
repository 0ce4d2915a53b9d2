#pragma once

// Plain-text persistence: MDPs, datasets, representations and solutions. Numbers are written with
// 17 significant digits so every double round-trips exactly.

#include "spectral_dice/dice.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace sdice::io {

namespace fs = std::filesystem;

using KeyValues = std::map<std::string, std::string>;

inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& s, const std::string& context) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw IoError(context + ": cannot parse number '" + s + "'");
  }
}

inline long long parse_int(const std::string& s, const std::string& context) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw IoError(context + ": cannot parse integer '" + s + "'");
  }
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(trim(cur));
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

inline std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError(path.parent_path().string() + ": " + ec.message());
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path.string() + ": cannot open for writing");
  return out;
}

inline std::ifstream open_in(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path.string() + ": cannot open for reading");
  return in;
}

inline void write_key_values(const fs::path& path, const KeyValues& kv) {
  auto out = open_out(path);
  for (const auto& [k, v] : kv) out << k << '=' << v << '\n';
  if (!out) throw IoError(path.string() + ": write failed");
}

inline KeyValues read_key_values(const fs::path& path) {
  auto in = open_in(path);
  KeyValues kv;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": expected key=value");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline const std::string& require_key(const KeyValues& kv, const std::string& key, const fs::path& path) {
  const auto it = kv.find(key);
  if (it == kv.end()) throw IoError(path.string() + ": missing key '" + key + "'");
  return it->second;
}

/// Dense matrix as headerless CSV, one row per line.
inline void write_matrix_csv(const fs::path& path, const Mat& m) {
  auto out = open_out(path);
  for (int i = 0; i < m.rows(); ++i) {
    for (int j = 0; j < m.cols(); ++j) out << (j ? "," : "") << format_double(m(i, j));
    out << '\n';
  }
  if (!out) throw IoError(path.string() + ": write failed");
}

inline Mat read_matrix_csv(const fs::path& path) {
  auto in = open_in(path);
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    std::vector<double> row;
    for (const auto& cell : split(line, ',')) row.push_back(parse_double(cell, path.string()));
    if (!rows.empty() && row.size() != rows.front().size()) throw IoError(path.string() + ": ragged rows");
    rows.push_back(std::move(row));
  }
  Mat m(static_cast<int>(rows.size()), rows.empty() ? 0 : static_cast<int>(rows.front().size()));
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) m(i, j) = rows[i][j];
  return m;
}

inline void write_vector_csv(const fs::path& path, const Vec& v) { write_matrix_csv(path, Mat(v)); }

inline Vec read_vector_csv(const fs::path& path) {
  const Mat m = read_matrix_csv(path);
  if (m.cols() > 1) throw IoError(path.string() + ": expected a single column");
  return m.cols() == 0 ? Vec() : Vec(m.col(0));
}

// MDP text format:
//   tabular_mdp <S> <A>
//   gamma <g>
//   transition      followed by S*A lines of S numbers
//   reward          followed by S*A numbers, one per line
//   mu0             followed by S numbers, one per line

inline void write_mdp(const fs::path& path, const TabularMdp& mdp) {
  auto out = open_out(path);
  out << "tabular_mdp " << mdp.n_states << ' ' << mdp.n_actions << '\n';
  out << "gamma " << format_double(mdp.gamma) << '\n';
  out << "transition\n";
  for (int x = 0; x < mdp.n_pairs(); ++x) {
    for (int s = 0; s < mdp.n_states; ++s) out << (s ? " " : "") << format_double(mdp.transition(x, s));
    out << '\n';
  }
  out << "reward\n";
  for (int x = 0; x < mdp.n_pairs(); ++x) out << format_double(mdp.reward(x)) << '\n';
  out << "mu0\n";
  for (int s = 0; s < mdp.n_states; ++s) out << format_double(mdp.mu0(s)) << '\n';
  if (!out) throw IoError(path.string() + ": write failed");
}

inline TabularMdp read_mdp(const fs::path& path) {
  auto in = open_in(path);
  const std::string ctx = path.string();
  std::string tok;
  auto expect = [&](const std::string& word) {
    if (!(in >> tok) || tok != word) throw IoError(ctx + ": expected '" + word + "'");
  };
  auto number = [&] {
    if (!(in >> tok)) throw IoError(ctx + ": unexpected end of file");
    return parse_double(tok, ctx);
  };
  TabularMdp mdp;
  expect("tabular_mdp");
  mdp.n_states = static_cast<int>(number());
  mdp.n_actions = static_cast<int>(number());
  if (mdp.n_states <= 0 || mdp.n_actions <= 0) throw IoError(ctx + ": dimensions must be positive");
  expect("gamma");
  mdp.gamma = number();
  expect("transition");
  mdp.transition.resize(mdp.n_pairs(), mdp.n_states);
  for (int x = 0; x < mdp.n_pairs(); ++x)
    for (int s = 0; s < mdp.n_states; ++s) mdp.transition(x, s) = number();
  expect("reward");
  mdp.reward.resize(mdp.n_pairs());
  for (int x = 0; x < mdp.n_pairs(); ++x) mdp.reward(x) = number();
  expect("mu0");
  mdp.mu0.resize(mdp.n_states);
  for (int s = 0; s < mdp.n_states; ++s) mdp.mu0(s) = number();
  try {
    mdp.validate();
  } catch (const ArgumentError& e) {
    throw IoError(ctx + ": " + e.what());
  }
  return mdp;
}

/// Policy table as CSV, one row per state.
inline void write_policy(const fs::path& path, const Policy& pi) { write_matrix_csv(path, pi.probs); }

inline Policy read_policy(const fs::path& path) {
  Policy pi{read_matrix_csv(path)};
  try {
    pi.validate(1e-9);
  } catch (const ArgumentError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  return pi;
}

/// Dataset as `<stem>.csv` with header `s,a,s_next` plus `<stem>.meta`.
inline void write_dataset(const fs::path& csv_path, const TransitionDataset& ds) {
  auto out = open_out(csv_path);
  out << "s,a,s_next\n";
  for (const auto& t : ds.transitions) out << t.s << ',' << t.a << ',' << t.s_next << '\n';
  if (!out) throw IoError(csv_path.string() + ": write failed");
  fs::path meta = csv_path;
  meta.replace_extension(".meta");
  write_key_values(meta, {{"n", std::to_string(ds.n())},
                          {"gamma", format_double(ds.gamma_used)},
                          {"behavior_id", ds.behavior_id},
                          {"seed", std::to_string(ds.seed)}});
}

inline TransitionDataset read_dataset(const fs::path& csv_path) {
  fs::path meta = csv_path;
  meta.replace_extension(".meta");
  const KeyValues kv = read_key_values(meta);
  TransitionDataset ds;
  ds.gamma_used = parse_double(require_key(kv, "gamma", meta), meta.string());
  ds.behavior_id = require_key(kv, "behavior_id", meta);
  ds.seed = static_cast<std::uint64_t>(std::stoull(require_key(kv, "seed", meta)));
  const long long n = parse_int(require_key(kv, "n", meta), meta.string());

  auto in = open_in(csv_path);
  std::string line;
  if (!std::getline(in, line) || trim(line) != "s,a,s_next") throw IoError(csv_path.string() + ": bad header");
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto cells = split(line, ',');
    const std::string ctx = csv_path.string() + ":" + std::to_string(lineno);
    if (cells.size() != 3) throw IoError(ctx + ": expected 3 columns");
    ds.transitions.push_back({static_cast<int>(parse_int(cells[0], ctx)), static_cast<int>(parse_int(cells[1], ctx)),
                              static_cast<int>(parse_int(cells[2], ctx))});
  }
  if (static_cast<long long>(ds.n()) != n) throw IoError(csv_path.string() + ": row count does not match metadata");
  return ds;
}

/// Representation directory: phi.csv, mu_pi.csv, q_pib.csv and rep.meta.
inline void write_rep(const fs::path& dir, const SpectralRep& rep, KeyValues meta = {}) {
  write_matrix_csv(dir / "phi.csv", rep.phi);
  write_matrix_csv(dir / "mu_pi.csv", rep.mu_pi);
  write_vector_csv(dir / "q_pib.csv", rep.q_pib);
  meta["d"] = std::to_string(rep.d);
  meta["n_states"] = std::to_string(rep.n_states);
  meta["n_actions"] = std::to_string(rep.n_actions);
  write_key_values(dir / "rep.meta", meta);
}

inline SpectralRep read_rep(const fs::path& dir) {
  const fs::path meta_path = dir / "rep.meta";
  if (!fs::exists(meta_path)) throw IoError(dir.string() + ": not a representation directory (missing rep.meta)");
  const KeyValues kv = read_key_values(meta_path);
  SpectralRep rep;
  rep.d = static_cast<int>(parse_int(require_key(kv, "d", meta_path), meta_path.string()));
  rep.n_states = static_cast<int>(parse_int(require_key(kv, "n_states", meta_path), meta_path.string()));
  rep.n_actions = static_cast<int>(parse_int(require_key(kv, "n_actions", meta_path), meta_path.string()));
  rep.phi = read_matrix_csv(dir / "phi.csv");
  rep.mu_pi = read_matrix_csv(dir / "mu_pi.csv");
  rep.q_pib = read_vector_csv(dir / "q_pib.csv");
  try {
    rep.validate();
  } catch (const ArgumentError& e) {
    throw IoError(dir.string() + ": " + e.what());
  }
  return rep;
}

/// Solution directory: solution.txt (key=value), theta_q.csv, omega_d.csv, gap_trace.csv.
inline void write_solution(const fs::path& dir, const DiceSolution& sol) {
  write_key_values(dir / "solution.txt", {{"rho_hat", format_double(sol.rho_hat)},
                                          {"iterations", std::to_string(sol.iterations)},
                                          {"final_gap", format_double(sol.final_gap)},
                                          {"box_violation", format_double(sol.box_violation)}});
  write_vector_csv(dir / "theta_q.csv", sol.theta_q);
  write_vector_csv(dir / "omega_d.csv", sol.omega_d);
  write_vector_csv(dir / "gap_trace.csv", Eigen::Map<const Vec>(sol.gap_trace.data(),
                                                                static_cast<int>(sol.gap_trace.size())));
}

inline DiceSolution read_solution(const fs::path& dir) {
  const fs::path meta = dir / "solution.txt";
  const KeyValues kv = read_key_values(meta);
  DiceSolution sol;
  sol.rho_hat = parse_double(require_key(kv, "rho_hat", meta), meta.string());
  sol.iterations = static_cast<int>(parse_int(require_key(kv, "iterations", meta), meta.string()));
  sol.final_gap = parse_double(require_key(kv, "final_gap", meta), meta.string());
  if (kv.count("box_violation")) sol.box_violation = parse_double(kv.at("box_violation"), meta.string());
  sol.theta_q = read_vector_csv(dir / "theta_q.csv");
  sol.omega_d = read_vector_csv(dir / "omega_d.csv");
  const Vec trace = read_vector_csv(dir / "gap_trace.csv");
  sol.gap_trace.assign(trace.data(), trace.data() + trace.size());
  return sol;
}

}  // namespace sdice::io
