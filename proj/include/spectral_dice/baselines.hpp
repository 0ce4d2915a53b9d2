#pragma once

// Reference estimators: tabular DICE, a count-based model, and trajectory-wise importance sampling.

#include "spectral_dice/dice.hpp"

#include <map>

namespace sdice {

struct BaselineResult {
  std::string method;
  double rho_hat = 0.0;
  std::size_t n_used = 0;
  std::map<std::string, double> diagnostics;
};

/// Tabular DICE: the spectral solver with one-hot features, so Q and zeta are free tables.
inline BaselineResult direct_dice(const TransitionDataset& ds, const Policy& target, const Vec& mu0,
                                  const Vec& rewards, const Regularizer& reg, const SolverConfig& cfg) {
  detail::require(ds.n() >= 1, "direct_dice: dataset must be nonempty");
  const int ns = target.n_states();
  const int na = target.n_actions();
  const SpectralRep rep = identity_rep(ns, na, pair_frequencies(ds, ns, na));
  const DiceSolution sol = spectral_dice(rep, ds, target, mu0, rewards, reg, cfg);
  BaselineResult out;
  out.method = "direct_dice";
  out.rho_hat = sol.rho_hat;
  out.n_used = ds.n();
  out.diagnostics = {{"final_gap", sol.final_gap}, {"iterations", static_cast<double>(sol.iterations)}};
  return out;
}

/// Empirical transition model from counts. Rows never observed in the data get `alpha` added to
/// every next state, which makes them uniform; observed rows are pure frequencies.
inline Mat empirical_transitions(const TransitionDataset& ds, int n_states, int n_actions, double alpha) {
  Mat p = Mat::Zero(n_states * n_actions, n_states);
  for (const auto& t : ds.transitions) p(t.s * n_actions + t.a, t.s_next) += 1.0;
  for (int x = 0; x < p.rows(); ++x) {
    if (p.row(x).sum() == 0.0) p.row(x).setConstant(alpha);
    p.row(x) /= p.row(x).sum();
  }
  return p;
}

inline BaselineResult model_based(const TransitionDataset& ds, const Policy& target, int n_states, int n_actions,
                                  const Vec& mu0, const Vec& rewards, double gamma, double alpha = 0.1) {
  detail::require(ds.n() >= 1, "model_based: dataset must be nonempty");
  detail::require(alpha > 0.0, "model_based: smoothing alpha must be positive");
  ds.validate(n_states, n_actions);
  TabularMdp model;
  model.n_states = n_states;
  model.n_actions = n_actions;
  model.gamma = gamma;
  model.transition = empirical_transitions(ds, n_states, n_actions, alpha);
  model.reward = rewards;
  model.mu0 = mu0;
  int unobserved = 0;
  const Vec freq = pair_frequencies(ds, n_states, n_actions);
  for (int x = 0; x < freq.size(); ++x) unobserved += freq(x) == 0.0;

  BaselineResult out;
  out.method = "model_based";
  out.rho_hat = policy_value_exact(model, target);
  out.n_used = ds.n();
  out.diagnostics = {{"unobserved_rows", static_cast<double>(unobserved)}, {"alpha", alpha}};
  return out;
}

/// Trajectory-wise importance sampling. Each rollout contributes
///   W * (1 - gamma) / (1 - gamma^H) * sum_t gamma^t r(s_t, a_t),   W = prod_t pi(a_t|s_t) / pi_b(a_t|s_t).
inline BaselineResult importance_sampling(const std::vector<Trajectory>& trajs, const Policy& target,
                                          const Policy& behavior, double gamma, const Vec& rewards) {
  detail::require(!trajs.empty(), "importance_sampling: no trajectories");
  detail::require(gamma > 0.0 && gamma < 1.0, "importance_sampling: gamma must lie in (0,1)");
  const std::size_t horizon = trajs.front().horizon();
  detail::require(horizon >= 1, "importance_sampling: empty trajectory");
  const int na = target.n_actions();
  const double norm = (1.0 - gamma) / (1.0 - std::pow(gamma, static_cast<double>(horizon)));

  std::vector<double> weights;
  weights.reserve(trajs.size());
  double total = 0.0;
  for (const auto& tr : trajs) {
    detail::require(tr.horizon() == horizon && tr.states.size() == horizon + 1,
                    "importance_sampling: trajectories must share one horizon");
    double w = 1.0;
    double ret = 0.0;
    double disc = 1.0;
    for (std::size_t t = 0; t < horizon; ++t) {
      const int s = tr.states[t];
      const int a = tr.actions[t];
      const double pb = behavior(s, a);
      if (pb <= 0.0)
        throw CoverageError("importance_sampling: behavior probability is zero for a realized action at state " +
                            std::to_string(s));
      w *= target(s, a) / pb;
      ret += disc * rewards(s * na + a);
      disc *= gamma;
    }
    weights.push_back(w);
    total += w * ret * norm;
  }
  const double n = static_cast<double>(trajs.size());
  const double mean_w = std::accumulate(weights.begin(), weights.end(), 0.0) / n;
  double var_w = 0.0;
  for (double w : weights) var_w += (w - mean_w) * (w - mean_w);
  var_w /= n;

  BaselineResult out;
  out.method = "importance_sampling";
  out.rho_hat = total / n;
  out.n_used = trajs.size() * horizon;
  out.diagnostics = {{"weight_mean", mean_w}, {"weight_variance", var_w}, {"horizon", static_cast<double>(horizon)}};
  return out;
}

}  // namespace sdice
