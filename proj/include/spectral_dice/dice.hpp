#pragma once

// DICE estimation in a learned primal-dual feature space:
//
//   min_theta max_omega  (1 - gamma) E_{s~mu0, a~pi}[phi^T theta]
//                        + E_D[(mu^T omega)(r + gamma phi(s',a')^T theta - phi(s,a)^T theta)]
//                        - lambda E_D[f(mu^T omega)]
//
// Q = phi^T theta and zeta = mu^T omega are linear in the parameters, so the problem is
// convex-concave. The stochastic solver is projected gradient descent-ascent; the exact solver
// replaces every expectation with a table sum and solves the resulting quadratic in closed form.

#include "spectral_dice/mdp.hpp"
#include "spectral_dice/replearn.hpp"

#include <algorithm>
#include <optional>

namespace sdice {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class RegularizerKind { none, half_square };

/// f(x) = 0.5 (x - 1)^2 scaled by lambda, or nothing. f* (y) = y + y^2 / 2.
struct Regularizer {
  RegularizerKind kind = RegularizerKind::half_square;
  double lambda = 1e-3;

  static Regularizer none() { return {RegularizerKind::none, 0.0}; }
  static Regularizer half_square(double lambda) { return {RegularizerKind::half_square, lambda}; }

  void validate() const {
    detail::require(lambda >= 0.0 && std::isfinite(lambda), "regularizer: lambda must be >= 0");
    detail::require(kind != RegularizerKind::none || lambda == 0.0, "regularizer: kind none forces lambda = 0");
  }
  double weight() const { return kind == RegularizerKind::none ? 0.0 : lambda; }
  double f(double x) const { return kind == RegularizerKind::none ? 0.0 : 0.5 * (x - 1.0) * (x - 1.0); }
  double df(double x) const { return kind == RegularizerKind::none ? 0.0 : x - 1.0; }
  /// Fenchel conjugate sup_x { x y - f(x) }.
  double conjugate(double y) const {
    if (kind == RegularizerKind::none) return y == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    return y + 0.5 * y * y;
  }
};

struct SolverConfig {
  int steps = 20000;
  double step_q = 0.5;
  double step_w = 0.5;
  int batch_size = 256;
  double c_inf_bound = 10.0;  ///< upper bound on zeta
  std::uint64_t seed = 0;
  int projection_passes = 5;
  int trace_every = 0;  ///< 0 picks steps / 100
  int gap_probes = 20;

  void validate() const {
    detail::require(steps >= 1 && batch_size >= 1, "solver: steps and batch_size must be positive");
    detail::require(step_q > 0.0 && step_w > 0.0, "solver: step sizes must be positive");
    detail::require(c_inf_bound >= 1.0, "solver: c_inf_bound must be >= 1");
    detail::require(projection_passes >= 1, "solver: projection_passes must be positive");
  }
};

struct DiceSolution {
  Vec theta_q;
  Vec omega_d;
  double rho_hat = 0.0;
  std::vector<double> gap_trace;
  int iterations = 0;
  double final_gap = 0.0;
  double box_violation = 0.0;  ///< residual constraint violation left by the approximate projection
};

/// Polyhedron {v : lower <= row_i^T v <= upper} over a finite set of feature rows. Projection sweeps the
/// rows cyclically (Hildreth's method): each row keeps a scalar multiplier, so a constraint clipped in one
/// sweep can be released in the next and the sweeps converge to the Euclidean projection.
struct FeatureBox {
  RowMat rows;
  Vec row_sq_norms;
  double lower = 0.0;
  double upper = 1.0;
  int passes = 5;

  FeatureBox() = default;
  FeatureBox(RowMat r, double lo, double hi, int n_passes)
      : rows(std::move(r)), lower(lo), upper(hi), passes(n_passes) {
    row_sq_norms = rows.rowwise().squaredNorm();
  }

  bool empty() const { return rows.rows() == 0; }

  /// `v` holds the point to project on entry and the result on exit. `multipliers` carries the row
  /// multipliers of a previous call on a nearby point (or zeros) and is updated in place. Runs at most
  /// `passes` sweeps, which is enough when the multipliers are warm.
  void project_inplace(Vec& v, Vec& multipliers) const { sweep(v, multipliers, passes); }

  /// Cold start; sweeps until the multipliers settle, at most kMaxColdPasses times. Rows that span a
  /// low-dimensional space converge slowly, so the result can still be slightly infeasible there.
  void project_inplace(Vec& v) const {
    Vec multipliers = Vec::Zero(rows.rows());
    sweep(v, multipliers, std::max(passes, kMaxColdPasses));
  }

  Vec project(Vec v) const {
    project_inplace(v);
    return v;
  }

  double max_violation(const Vec& v) const {
    double worst = 0.0;
    for (int i = 0; i < rows.rows(); ++i) {
      const double val = rows.row(i).dot(v);
      worst = std::max({worst, val - upper, lower - val});
    }
    return worst;
  }

 private:
  static constexpr int kMaxColdPasses = 2000;

  void sweep(Vec& v, Vec& multipliers, int max_passes) const {
    if (multipliers.size() != rows.rows()) multipliers = Vec::Zero(rows.rows());
    v.noalias() -= rows.transpose() * multipliers;
    const double tol = 1e-14 * (1.0 + std::max(std::abs(lower), std::abs(upper)));
    for (int pass = 0; pass < max_passes; ++pass) {
      double moved = 0.0;
      for (int i = 0; i < rows.rows(); ++i) {
        if (row_sq_norms(i) <= 0.0) continue;
        const double old = multipliers(i);
        const double t = rows.row(i).dot(v) + old * row_sq_norms(i);
        const double next = (t - std::clamp(t, lower, upper)) / row_sq_norms(i);
        if (next == old) continue;
        v.noalias() -= (next - old) * rows.row(i).transpose();
        multipliers(i) = next;
        moved = std::max(moved, std::abs(next - old) * std::sqrt(row_sq_norms(i)));
      }
      if (moved <= tol) break;
    }
  }
};

/// The saddle objective after aggregating its data-dependent terms. With a quadratic f,
///   L(theta, omega) = c0^T theta + omega^T (b + A theta) - lambda (omega^T H omega / 2 - omega^T m1 + mass / 2)
/// where A = E[mu (gamma phi' - phi)^T], b = E[r mu], H = E[mu mu^T], m1 = E[mu].
struct SaddleObjective {
  Vec c0;
  Mat a;
  Vec b;
  Mat h;
  Vec m1;
  double mass = 0.0;
  Regularizer reg;

  int dim() const { return static_cast<int>(c0.size()); }

  double value(const Vec& theta, const Vec& omega) const {
    const double lam = reg.weight();
    return c0.dot(theta) + omega.dot(b + a * theta) -
           lam * (0.5 * omega.dot(h * omega) - omega.dot(m1) + 0.5 * mass);
  }
  Vec grad_theta(const Vec& omega) const { return c0 + a.transpose() * omega; }
  Vec grad_omega(const Vec& theta, const Vec& omega) const {
    return b + a * theta - reg.weight() * (h * omega - m1);
  }
};

namespace detail {

inline Vec initial_feature_mean(const SpectralRep& rep, const Vec& mu0, const Policy& target) {
  Vec c = Vec::Zero(rep.d);
  for (int s = 0; s < rep.n_states; ++s) {
    if (mu0(s) == 0.0) continue;
    for (int a = 0; a < rep.n_actions; ++a)
      if (target(s, a) > 0.0) c += mu0(s) * target(s, a) * rep.phi.row(s * rep.n_actions + a).transpose();
  }
  return c;
}

/// E_{a' ~ pi(.|s')} phi(s', a') for every state.
inline Mat next_feature_means(const SpectralRep& rep, const Policy& target) {
  Mat out = Mat::Zero(rep.n_states, rep.d);
  for (int s = 0; s < rep.n_states; ++s)
    for (int a = 0; a < rep.n_actions; ++a)
      out.row(s) += target(s, a) * rep.phi.row(s * rep.n_actions + a);
  return out;
}

inline void check_inputs(const SpectralRep& rep, const TransitionDataset& ds, const Policy& target, const Vec& mu0,
                         const Vec& rewards) {
  require(ds.n() >= 1, "dice: dataset must be nonempty");
  require(rep.phi.cols() == rep.d && rep.mu_pi.cols() == rep.d, "dice: feature dimension mismatch");
  require(rep.phi.rows() == rep.n_pairs() && rep.mu_pi.rows() == rep.n_pairs(), "dice: feature table size mismatch");
  require(target.n_states() == rep.n_states && target.n_actions() == rep.n_actions,
          "dice: target policy shape does not match representation");
  require(mu0.size() == rep.n_states, "dice: mu0 size mismatch");
  require(rewards.size() == rep.n_pairs(), "dice: reward table size mismatch");
  require(ds.gamma_used > 0.0 && ds.gamma_used < 1.0, "dice: dataset gamma must lie in (0,1)");
  ds.validate(rep.n_states, rep.n_actions);
}

inline std::vector<int> sorted_unique(std::vector<int> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

inline RowMat gather_rows(const Mat& table, const std::vector<int>& idx) {
  RowMat out(static_cast<int>(idx.size()), table.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<int>(i)) = table.row(idx[i]);
  return out;
}

}  // namespace detail

/// Empirical objective on a dataset with exact averaging over a' ~ pi(.|s') and exact mu0 summation.
inline SaddleObjective empirical_objective(const SpectralRep& rep, const TransitionDataset& ds, const Policy& target,
                                           const Vec& mu0, const Vec& rewards, const Regularizer& reg) {
  detail::check_inputs(rep, ds, target, mu0, rewards);
  reg.validate();
  const double gamma = ds.gamma_used;
  const Mat next_mean = detail::next_feature_means(rep, target);
  const int d = rep.d;
  // Aggregate by (x, s') so the cost is independent of N beyond one pass.
  const int na = rep.n_actions;
  Mat counts = Mat::Zero(rep.n_pairs(), rep.n_states);
  for (const auto& t : ds.transitions) counts(t.s * na + t.a, t.s_next) += 1.0;
  counts /= static_cast<double>(ds.n());

  SaddleObjective obj;
  obj.reg = reg;
  obj.c0 = (1.0 - gamma) * detail::initial_feature_mean(rep, mu0, target);
  obj.a = Mat::Zero(d, d);
  obj.b = Vec::Zero(d);
  obj.h = Mat::Zero(d, d);
  obj.m1 = Vec::Zero(d);
  for (int x = 0; x < rep.n_pairs(); ++x) {
    const double wx = counts.row(x).sum();
    if (wx == 0.0) continue;
    const Vec mu = rep.mu_pi.row(x).transpose();
    const Vec next = (counts.row(x) * next_mean).transpose() / wx;
    obj.a += wx * mu * (gamma * next - rep.phi.row(x).transpose()).transpose();
    obj.b += wx * rewards(x) * mu;
    obj.h += wx * mu * mu.transpose();
    obj.m1 += wx * mu;
    obj.mass += wx;
  }
  return obj;
}

/// Population objective: data weights d^{pi_b}(s,a), next features E_{P^pi}[phi], exact mu0.
inline SaddleObjective exact_objective(const SpectralRep& rep, const TabularMdp& mdp, const Policy& target,
                                       const Policy& behavior, const Regularizer& reg) {
  reg.validate();
  detail::require(rep.n_states == mdp.n_states && rep.n_actions == mdp.n_actions,
                  "exact_objective: representation shape does not match mdp");
  const Vec db = occupancy_measure(mdp, behavior).values;
  const Mat k = state_action_kernel(mdp, target);
  const Mat next = k * rep.phi;
  const Mat wmu = db.asDiagonal() * rep.mu_pi;
  SaddleObjective obj;
  obj.reg = reg;
  obj.c0 = (1.0 - mdp.gamma) * detail::initial_feature_mean(rep, mdp.mu0, target);
  obj.a = wmu.transpose() * (mdp.gamma * next - rep.phi);
  obj.b = wmu.transpose() * mdp.reward;
  obj.h = wmu.transpose() * rep.mu_pi;
  obj.m1 = wmu.colwise().sum().transpose();
  obj.mass = db.sum();
  return obj;
}

/// Omega box: 0 <= mu(s,a)^T omega <= c_inf_bound over the dataset's (s,a) pairs.
inline FeatureBox omega_box(const SpectralRep& rep, const TransitionDataset& ds, double c_inf_bound, int passes) {
  std::vector<int> pairs;
  pairs.reserve(ds.n());
  for (const auto& t : ds.transitions) pairs.push_back(t.s * rep.n_actions + t.a);
  return {detail::gather_rows(rep.mu_pi, detail::sorted_unique(std::move(pairs))), 0.0, c_inf_bound, passes};
}

/// Theta box: 0 <= phi(s,a)^T theta <= 1 / (1 - gamma) wherever Q is evaluated: dataset pairs,
/// next pairs reachable under pi, and initial pairs.
inline FeatureBox theta_box(const SpectralRep& rep, const TransitionDataset& ds, const Policy& target, const Vec& mu0,
                            int passes) {
  const int na = rep.n_actions;
  std::vector<int> pairs;
  std::vector<char> next_seen(rep.n_states, 0);
  for (const auto& t : ds.transitions) {
    pairs.push_back(t.s * na + t.a);
    next_seen[t.s_next] = 1;
  }
  for (int s = 0; s < rep.n_states; ++s)
    for (int a = 0; a < na; ++a)
      if ((next_seen[s] || mu0(s) > 0.0) && target(s, a) > 0.0) pairs.push_back(s * na + a);
  return {detail::gather_rows(rep.phi, detail::sorted_unique(std::move(pairs))), 0.0, 1.0 / (1.0 - ds.gamma_used),
          passes};
}

/// Estimated duality gap max_omega' L(theta, omega') - min_theta' L(theta', omega) over the boxes.
/// The omega side uses the closed-form maximizer of the concave quadratic, projected onto the box;
/// both sides then refine with `probes` projected gradient steps. Each side is bounded by the value at
/// the current point, so the estimate is never negative.
inline double duality_gap(const SaddleObjective& obj, const Vec& theta, const Vec& omega, const FeatureBox& tbox,
                          const FeatureBox& wbox, int probes) {
  const double base = obj.value(theta, omega);
  const double lam = obj.reg.weight();

  // Probes move a little at a time, so each projection reuses the previous multipliers.
  double best_max = base;
  Vec w = omega;
  Vec w_mult, t_mult;
  if (lam > 0.0) {
    const Eigen::LDLT<Mat> ldlt(obj.h);
    Vec cand = ldlt.solve(obj.m1 + (obj.b + obj.a * theta) / lam);
    if (cand.allFinite()) {
      wbox.project_inplace(cand, w_mult);
      const double v = obj.value(theta, cand);
      if (v > best_max) {
        best_max = v;
        w = cand;
      }
    }
  }
  const double h_norm = lam > 0.0 ? lam * obj.h.norm() : 0.0;
  for (int k = 0; k < probes; ++k) {
    const Vec g = obj.grad_omega(theta, w);
    const double scale = wbox.empty() ? g.norm() : (wbox.rows * g).cwiseAbs().maxCoeff();
    if (scale <= 0.0) break;
    double eta = (wbox.empty() ? 1.0 : wbox.upper / 4.0) / scale;
    if (h_norm > 0.0) eta = std::min(eta, 1.0 / h_norm);
    w += eta * g;
    wbox.project_inplace(w, w_mult);
    best_max = std::max(best_max, obj.value(theta, w));
  }

  double best_min = base;
  const Vec g = obj.grad_theta(omega);
  const double scale = tbox.empty() ? g.norm() : (tbox.rows * g).cwiseAbs().maxCoeff();
  if (scale > 1e-300 && !tbox.empty()) {
    const double eta = tbox.upper / (4.0 * scale);
    Vec t = theta;
    for (int k = 0; k < probes; ++k) {
      t -= eta * g;
      tbox.project_inplace(t, t_mult);
      best_min = std::min(best_min, obj.value(t, omega));
    }
  }
  return best_max - best_min;
}

/// Duality gap of the empirical objective on a dataset, boxes as in spectral_dice.
inline double duality_gap(const SpectralRep& rep, const TransitionDataset& ds, const Policy& target, const Vec& mu0,
                          const Vec& rewards, const Regularizer& reg, const Vec& theta, const Vec& omega,
                          int probe_count, double c_inf_bound = 10.0, int passes = 5) {
  detail::require(theta.size() == rep.d && omega.size() == rep.d, "duality_gap: parameter dimension mismatch");
  const SaddleObjective obj = empirical_objective(rep, ds, target, mu0, rewards, reg);
  return duality_gap(obj, theta, omega, theta_box(rep, ds, target, mu0, passes),
                     omega_box(rep, ds, c_inf_bound, passes), probe_count);
}

/// zeta(s,a) = mu_pi(s,a)^T omega for every pair.
inline Vec zeta_table(const SpectralRep& rep, const Vec& omega) { return rep.mu_pi * omega; }

/// rho_hat = mean over the dataset of zeta(s,a) r(s,a).
inline double value_from_zeta(const SpectralRep& rep, const Vec& omega, const TransitionDataset& ds,
                              const Vec& rewards) {
  detail::require(omega.size() == rep.d, "value_from_zeta: omega dimension mismatch");
  detail::require(rewards.size() == rep.n_pairs(), "value_from_zeta: reward table size mismatch");
  detail::require(ds.n() >= 1, "value_from_zeta: dataset must be nonempty");
  const Vec zeta = zeta_table(rep, omega);
  double acc = 0.0;
  for (const auto& t : ds.transitions) {
    const int x = t.s * rep.n_actions + t.a;
    acc += zeta(x) * rewards(x);
  }
  return acc / static_cast<double>(ds.n());
}

/// Stochastic solve of the regularized saddle problem by alternating projected SGDA. Each epoch walks a
/// fresh permutation of the data and redraws a' ~ pi(.|s') for every sample. Minibatch gradients are
/// recentered at a per-epoch snapshot (SVRG) so their variance vanishes near the saddle. The returned
/// parameters are uniform averages over the last half of the iterates.
inline DiceSolution spectral_dice(const SpectralRep& rep, const TransitionDataset& ds, const Policy& target,
                                  const Vec& mu0, const Vec& rewards, const Regularizer& reg,
                                  const SolverConfig& cfg) {
  detail::check_inputs(rep, ds, target, mu0, rewards);
  reg.validate();
  cfg.validate();
  const int d = rep.d;
  const int na = rep.n_actions;
  const double gamma = ds.gamma_used;
  const double lam = reg.weight();
  const std::size_t n = ds.n();
  const RowMat phi = rep.phi;
  const RowMat mu = rep.mu_pi;

  std::vector<int> cur(n), s_next(n), nxt(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& t = ds.transitions[i];
    cur[i] = t.s * na + t.a;
    s_next[i] = t.s_next;
  }

  const SaddleObjective obj = empirical_objective(rep, ds, target, mu0, rewards, reg);
  const FeatureBox tbox = theta_box(rep, ds, target, mu0, cfg.projection_passes);
  const FeatureBox wbox = omega_box(rep, ds, cfg.c_inf_bound, cfg.projection_passes);

  // omega starts from the least-squares fit of zeta == 1, theta from the instrumented TD fit b + A theta = 0.
  // From theta = 0, zeta saturates and can stay stuck when Q touches the upper face of Theta.
  Vec omega = obj.h.completeOrthogonalDecomposition().solve(obj.m1);
  if (!omega.allFinite()) omega.setZero();
  wbox.project_inplace(omega);
  Vec theta = obj.a.completeOrthogonalDecomposition().solve(Vec(-obj.b));
  if (!theta.allFinite()) theta.setZero();
  tbox.project_inplace(theta);

  Rng rng(cfg.seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = n;  // forces a new epoch on the first step

  const int trace_every = cfg.trace_every > 0 ? cfg.trace_every : std::max(1, cfg.steps / 100);
  const int avg_start = cfg.steps / 2;
  Vec theta_sum = Vec::Zero(d);
  Vec omega_sum = Vec::Zero(d);
  int averaged = 0;

  DiceSolution sol;
  Vec g_theta(d), g_omega(d);
  Vec theta_mult = Vec::Zero(tbox.rows.rows());
  Vec omega_mult = Vec::Zero(wbox.rows.rows());
  const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), n);
  Vec theta_snap = theta, omega_snap = omega, full_theta(d), full_omega(d);
  for (int step = 0; step < cfg.steps; ++step) {
    if (cursor + batch > n) {
      shuffle(rng, order);
      for (std::size_t i = 0; i < n; ++i) nxt[i] = s_next[i] * na + sample_categorical(rng, target.probs.row(s_next[i]));
      cursor = 0;
      theta_snap = theta;
      omega_snap = omega;
      full_theta = obj.grad_theta(omega_snap);
      full_omega = obj.grad_omega(theta_snap, omega_snap);
    }
    const double inv_b = 1.0 / static_cast<double>(batch);

    // Minibatch gradients carry the control variate batch(snapshot) - full(snapshot), refreshed every epoch.
    g_theta = full_theta;
    const Vec dw = omega - omega_snap;
    for (std::size_t j = cursor; j < cursor + batch; ++j) {
      const std::size_t i = order[j];
      const double dz = mu.row(cur[i]).dot(dw);
      g_theta.noalias() += (inv_b * dz) * (gamma * phi.row(nxt[i]) - phi.row(cur[i])).transpose();
    }
    theta -= cfg.step_q * g_theta;
    tbox.project_inplace(theta, theta_mult);

    g_omega = full_omega;
    const Vec dt = theta - theta_snap;
    for (std::size_t j = cursor; j < cursor + batch; ++j) {
      const std::size_t i = order[j];
      const double zeta = mu.row(cur[i]).dot(omega);
      const double zeta_snap = mu.row(cur[i]).dot(omega_snap);
      const double dtd = gamma * phi.row(nxt[i]).dot(dt) - phi.row(cur[i]).dot(dt);
      g_omega.noalias() += (inv_b * (dtd - lam * (reg.df(zeta) - reg.df(zeta_snap)))) * mu.row(cur[i]).transpose();
    }
    omega += cfg.step_w * g_omega;
    wbox.project_inplace(omega, omega_mult);
    cursor += batch;

    if (!theta.allFinite() || !omega.allFinite())
      throw DivergenceError("spectral_dice: iterates became non-finite at step " + std::to_string(step));

    if (step >= avg_start) {
      theta_sum += theta;
      omega_sum += omega;
      ++averaged;
    }
    if ((step + 1) % trace_every == 0) {
      const Vec t = averaged > 0 ? Vec(theta_sum / averaged) : theta;
      const Vec w = averaged > 0 ? Vec(omega_sum / averaged) : omega;
      const double gap = duality_gap(obj, t, w, tbox, wbox, cfg.gap_probes);
      if (!std::isfinite(gap)) throw DivergenceError("spectral_dice: objective became non-finite");
      sol.gap_trace.push_back(gap);
    }
  }
  sol.theta_q = theta_sum / std::max(averaged, 1);
  sol.omega_d = omega_sum / std::max(averaged, 1);
  sol.iterations = cfg.steps;
  sol.final_gap = duality_gap(obj, sol.theta_q, sol.omega_d, tbox, wbox, cfg.gap_probes);
  sol.box_violation = std::max(tbox.max_violation(sol.theta_q), wbox.max_violation(sol.omega_d));
  sol.rho_hat = value_from_zeta(rep, sol.omega_d, ds, rewards);
  if (!std::isfinite(sol.rho_hat)) throw DivergenceError("spectral_dice: non-finite estimate");
  return sol;
}

/// Exact saddle point of the regularized objective with every expectation taken from the tables.
/// The inner maximization is an unconstrained concave quadratic; the outer minimization is the
/// resulting convex quadratic, solved by a dense linear system. rho_hat = E_{d^pi_b}[zeta r].
inline DiceSolution exact_regularized_solve(const SpectralRep& rep, const TabularMdp& mdp, const Policy& target,
                                            const Policy& behavior, const Regularizer& reg) {
  detail::require(reg.kind == RegularizerKind::half_square && reg.lambda > 0.0,
                  "exact_regularized_solve: requires a half_square regularizer with lambda > 0");
  const SaddleObjective obj = exact_objective(rep, mdp, target, behavior, reg);
  const double lam = reg.lambda;
  const int d = rep.d;

  Eigen::FullPivLU<Mat> h_lu(obj.h);
  if (h_lu.rank() < d)
    throw RankDeficiencyError("exact_regularized_solve: dual second-moment matrix is singular", d - h_lu.rank());
  const Mat hinv_a = h_lu.solve(obj.a);
  const Mat normal = obj.a.transpose() * hinv_a;
  Eigen::FullPivLU<Mat> n_lu(normal);
  if (n_lu.rank() < d)
    throw RankDeficiencyError("exact_regularized_solve: normal-equation matrix is singular", d - n_lu.rank());
  const Vec rhs = -lam * obj.c0 - obj.a.transpose() * h_lu.solve(obj.b + lam * obj.m1);

  DiceSolution sol;
  sol.theta_q = n_lu.solve(rhs);
  sol.omega_d = h_lu.solve(obj.m1 + (obj.b + obj.a * sol.theta_q) / lam);
  sol.iterations = 0;
  const Vec db = occupancy_measure(mdp, behavior).values;
  sol.rho_hat = db.dot(zeta_table(rep, sol.omega_d).cwiseProduct(mdp.reward));
  sol.final_gap = duality_gap(obj, sol.theta_q, sol.omega_d, FeatureBox{}, FeatureBox{}, 0);
  sol.gap_trace = {sol.final_gap};
  return sol;
}

/// Simulation-lemma diagnostic for the model MDP built from a representation.
/// lhs = V_model - V_true and rhs = gamma / (1 - gamma) E_{d^pi}[E_{P_model^pi} Q_model - E_{P^pi} Q_model],
/// where V = E_{s~mu0}[V^pi(s)] is the unnormalized value (rho / (1 - gamma)).
struct SimulationLemmaResult {
  double lhs = 0.0;
  double rhs = 0.0;
  double clipped_mass = 0.0;           ///< total negative mass removed from the reconstruction
  double max_row_mass_deviation = 0.0; ///< max |row sum - 1| of the reconstruction before renormalizing
  bool clipped = false;                ///< the model differs from the raw reconstruction by clipping
};

inline SimulationLemmaResult simulation_lemma_check(const TabularMdp& mdp, const SpectralRep& rep,
                                                    const Policy& target) {
  detail::require(rep.n_states == mdp.n_states && rep.n_actions == mdp.n_actions,
                  "simulation_lemma_check: representation shape does not match mdp");
  const Mat khat = reconstruct_kernel(rep);
  const int na = mdp.n_actions;
  SimulationLemmaResult out;
  TabularMdp model = mdp;
  for (int x = 0; x < mdp.n_pairs(); ++x) {
    double row_sum = 0.0;
    for (int sp = 0; sp < mdp.n_states; ++sp) {
      double p = khat.row(x).segment(sp * na, na).sum();
      row_sum += p;
      if (p < 0.0) {
        out.clipped_mass += -p;
        p = 0.0;
      }
      model.transition(x, sp) = p;
    }
    out.max_row_mass_deviation = std::max(out.max_row_mass_deviation, std::abs(row_sum - 1.0));
    const double kept = model.transition.row(x).sum();
    if (!(kept > 0.0))
      throw DegenerateRowError("simulation_lemma_check: reconstructed row " + std::to_string(x) +
                               " has no positive mass");
    model.transition.row(x) /= kept;
  }
  out.clipped = out.clipped_mass > 0.0;

  const Vec nu0 = initial_pair_distribution(mdp, target);
  const Vec q_model = q_values(model, target);
  const Vec q_true = q_values(mdp, target);
  out.lhs = nu0.dot(q_model) - nu0.dot(q_true);
  const Vec dpi = occupancy_measure(mdp, target).values;
  const Vec diff = state_action_kernel(model, target) * q_model - state_action_kernel(mdp, target) * q_model;
  out.rhs = mdp.gamma / (1.0 - mdp.gamma) * dpi.dot(diff);
  return out;
}

}  // namespace sdice
