#pragma once

// Exact finite-MDP machinery: values, occupancies, the state-action kernel, concentratability
// and dataset sampling. Everything here is dense and exact; it is the oracle layer for the rest
// of the library.

#include "spectral_dice/common.hpp"

#include <algorithm>
#include <string>
#include <vector>

namespace sdice {

/// Finite discounted MDP. State-action pairs are flattened as `s * n_actions + a`.
struct TabularMdp {
  int n_states = 0;
  int n_actions = 0;
  Mat transition;  ///< (S*A) x S, row (s,a) is P(. | s,a)
  Vec reward;      ///< S*A, entries in [0,1]
  Vec mu0;         ///< S
  double gamma = 0.9;

  int n_pairs() const { return n_states * n_actions; }
  int pair(int s, int a) const { return s * n_actions + a; }

  void validate(double tol = 1e-12) const {
    detail::require(n_states > 0 && n_actions > 0, "mdp: dimensions must be positive");
    detail::require(transition.rows() == n_pairs() && transition.cols() == n_states,
                    "mdp: transition must be (S*A) x S");
    detail::require(reward.size() == n_pairs(), "mdp: reward must have S*A entries");
    detail::require(mu0.size() == n_states, "mdp: mu0 must have S entries");
    detail::require(gamma > 0.0 && gamma < 1.0, "mdp: gamma must lie in (0,1)");
    detail::require(transition.allFinite() && transition.minCoeff() >= 0.0, "mdp: negative transition entry");
    for (int i = 0; i < n_pairs(); ++i)
      detail::require(std::abs(transition.row(i).sum() - 1.0) <= tol,
                      "mdp: transition row " + std::to_string(i) + " does not sum to 1");
    detail::require(reward.allFinite() && reward.minCoeff() >= 0.0 && reward.maxCoeff() <= 1.0,
                    "mdp: rewards must lie in [0,1]");
    detail::require(mu0.allFinite() && mu0.minCoeff() >= 0.0 && std::abs(mu0.sum() - 1.0) <= tol,
                    "mdp: mu0 must be a distribution");
  }
};

/// Stationary Markov policy, probs(s, a) = pi(a | s).
struct Policy {
  Mat probs;

  int n_states() const { return static_cast<int>(probs.rows()); }
  int n_actions() const { return static_cast<int>(probs.cols()); }
  double operator()(int s, int a) const { return probs(s, a); }

  void validate(double tol = 1e-12) const {
    detail::require(probs.rows() > 0 && probs.cols() > 0, "policy: empty table");
    detail::require(probs.allFinite() && probs.minCoeff() >= 0.0, "policy: negative probability");
    for (int s = 0; s < probs.rows(); ++s)
      detail::require(std::abs(probs.row(s).sum() - 1.0) <= tol,
                      "policy: row " + std::to_string(s) + " does not sum to 1");
  }
};

/// Normalized discounted state-action occupancy, pair-indexed.
struct OccupancyTable {
  int n_states = 0;
  int n_actions = 0;
  Vec values;

  double operator()(int s, int a) const { return values(s * n_actions + a); }

  Vec state_marginal() const {
    Vec m = Vec::Zero(n_states);
    for (int s = 0; s < n_states; ++s) m(s) = values.segment(s * n_actions, n_actions).sum();
    return m;
  }
};

struct Transition {
  int s = 0;
  int a = 0;
  int s_next = 0;
  friend bool operator==(const Transition&, const Transition&) = default;
};

/// Bag of (s, a, s') transitions. The next action a' is not stored; estimators draw it from the
/// target policy when they need it.
struct TransitionDataset {
  std::vector<Transition> transitions;
  double gamma_used = 0.0;
  std::string behavior_id = "behavior";
  std::uint64_t seed = 0;

  std::size_t n() const { return transitions.size(); }

  void validate(int n_states, int n_actions) const {
    for (const auto& t : transitions) {
      detail::require(t.s >= 0 && t.s < n_states && t.s_next >= 0 && t.s_next < n_states &&
                          t.a >= 0 && t.a < n_actions,
                      "dataset: index out of range");
    }
  }
};

/// One fixed-horizon rollout: states has horizon+1 entries, actions has horizon entries.
struct Trajectory {
  std::vector<int> states;
  std::vector<int> actions;
  std::size_t horizon() const { return actions.size(); }
};

namespace detail {

inline void check_policy_shape(const TabularMdp& mdp, const Policy& pi) {
  require(pi.n_states() == mdp.n_states && pi.n_actions() == mdp.n_actions,
          "policy shape does not match mdp");
}

}  // namespace detail

/// nu0(s,a) = mu0(s) pi(a|s).
inline Vec initial_pair_distribution(const TabularMdp& mdp, const Policy& pi) {
  detail::check_policy_shape(mdp, pi);
  Vec nu(mdp.n_pairs());
  for (int s = 0; s < mdp.n_states; ++s)
    for (int a = 0; a < mdp.n_actions; ++a) nu(mdp.pair(s, a)) = mdp.mu0(s) * pi(s, a);
  return nu;
}

/// P^pi((s',a') | (s,a)) = P(s'|s,a) pi(a'|s'), as a dense (S*A) x (S*A) matrix.
inline Mat state_action_kernel(const TabularMdp& mdp, const Policy& pi) {
  detail::check_policy_shape(mdp, pi);
  const int na = mdp.n_actions;
  Mat k(mdp.n_pairs(), mdp.n_pairs());
  for (int x = 0; x < mdp.n_pairs(); ++x)
    for (int sp = 0; sp < mdp.n_states; ++sp)
      for (int ap = 0; ap < na; ++ap) k(x, sp * na + ap) = mdp.transition(x, sp) * pi(sp, ap);
  return k;
}

/// Q^pi solving Q = r + gamma P^pi Q.
inline Vec q_values(const TabularMdp& mdp, const Policy& pi) {
  const Mat k = state_action_kernel(mdp, pi);
  const Mat system = Mat::Identity(mdp.n_pairs(), mdp.n_pairs()) - mdp.gamma * k;
  return system.partialPivLu().solve(mdp.reward);
}

/// Max-norm Bellman residual of a candidate Q.
inline double bellman_residual(const TabularMdp& mdp, const Policy& pi, const Vec& q) {
  const Mat k = state_action_kernel(mdp, pi);
  return (mdp.reward + mdp.gamma * k * q - q).cwiseAbs().maxCoeff();
}

/// Normalized policy value rho = (1 - gamma) E_{s~mu0, a~pi}[Q(s,a)].
inline double policy_value_exact(const TabularMdp& mdp, const Policy& pi) {
  return (1.0 - mdp.gamma) * initial_pair_distribution(mdp, pi).dot(q_values(mdp, pi));
}

/// d^pi solving d = (1 - gamma) nu0 + gamma (P^pi)^T d.
inline OccupancyTable occupancy_measure(const TabularMdp& mdp, const Policy& pi) {
  const Mat k = state_action_kernel(mdp, pi);
  const Mat system = Mat::Identity(mdp.n_pairs(), mdp.n_pairs()) - mdp.gamma * k.transpose();
  Vec d = system.partialPivLu().solve((1.0 - mdp.gamma) * initial_pair_distribution(mdp, pi));
  // LU round-off can leave -1e-17 on unreachable pairs.
  d = d.cwiseMax(0.0);
  return {mdp.n_states, mdp.n_actions, d};
}

/// Pairs with occupancy at or below this are treated as unvisited.
inline constexpr double kZeroMass = 1e-14;

/// C_inf = max d^pi / d^pi_b over pairs the target visits. 0/0 counts as 0.
inline double concentratability(const TabularMdp& mdp, const Policy& target, const Policy& behavior) {
  const Vec dt = occupancy_measure(mdp, target).values;
  const Vec db = occupancy_measure(mdp, behavior).values;
  double c = 0.0;
  for (int x = 0; x < mdp.n_pairs(); ++x) {
    if (dt(x) <= kZeroMass) continue;
    if (db(x) <= kZeroMass)
      throw CoverageError("concentratability: target visits pair " + std::to_string(x) +
                          " which the behavior policy never visits");
    c = std::max(c, dt(x) / db(x));
  }
  return c;
}

/// How transitions are drawn.
enum class SamplingMode {
  geometric,   ///< i.i.d. geometric horizons; exact d^{pi_b} marginal
  trajectory,  ///< consecutive steps of fixed-horizon rollouts from mu0
};

/// Draws n transitions whose (s,a) marginal is exactly d^{pi_b}: for each sample, t ~ Geometric(1-gamma)
/// on {0,1,...}, roll out t steps from mu0 under the behavior policy and record (s_t, a_t, s_{t+1}).
inline TransitionDataset sample_dataset(const TabularMdp& mdp, const Policy& behavior, std::size_t n,
                                        std::uint64_t seed, std::string behavior_id = "behavior") {
  detail::require(n >= 1, "sample_dataset: n must be at least 1");
  detail::check_policy_shape(mdp, behavior);
  Rng rng(seed);
  TransitionDataset ds;
  ds.gamma_used = mdp.gamma;
  ds.behavior_id = std::move(behavior_id);
  ds.seed = seed;
  ds.transitions.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int t = sample_geometric(rng, 1.0 - mdp.gamma);
    int s = sample_categorical(rng, mdp.mu0);
    int a = sample_categorical(rng, behavior.probs.row(s));
    for (int step = 0; step < t; ++step) {
      s = sample_categorical(rng, mdp.transition.row(mdp.pair(s, a)));
      a = sample_categorical(rng, behavior.probs.row(s));
    }
    const int s_next = sample_categorical(rng, mdp.transition.row(mdp.pair(s, a)));
    ds.transitions.push_back({s, a, s_next});
  }
  return ds;
}

/// Fixed-horizon rollouts from mu0 under the given policy.
inline std::vector<Trajectory> sample_trajectories(const TabularMdp& mdp, const Policy& behavior,
                                                   std::size_t count, std::size_t horizon, std::uint64_t seed) {
  detail::require(count >= 1 && horizon >= 1, "sample_trajectories: count and horizon must be positive");
  detail::check_policy_shape(mdp, behavior);
  Rng rng(seed);
  std::vector<Trajectory> out(count);
  for (auto& tr : out) {
    tr.states.reserve(horizon + 1);
    tr.actions.reserve(horizon);
    int s = sample_categorical(rng, mdp.mu0);
    tr.states.push_back(s);
    for (std::size_t t = 0; t < horizon; ++t) {
      const int a = sample_categorical(rng, behavior.probs.row(s));
      s = sample_categorical(rng, mdp.transition.row(mdp.pair(s, a)));
      tr.actions.push_back(a);
      tr.states.push_back(s);
    }
  }
  return out;
}

/// Trajectory-protocol dataset: all steps of ceil(n / horizon) fixed-horizon rollouts, truncated
/// to n transitions. The (s,a) marginal is the undiscounted average over the horizon, not d^{pi_b}.
inline TransitionDataset sample_trajectory_dataset(const TabularMdp& mdp, const Policy& behavior, std::size_t n,
                                                   std::size_t horizon, std::uint64_t seed,
                                                   std::string behavior_id = "behavior") {
  detail::require(n >= 1, "sample_trajectory_dataset: n must be at least 1");
  const std::size_t count = (n + horizon - 1) / horizon;
  const auto trajs = sample_trajectories(mdp, behavior, count, horizon, seed);
  TransitionDataset ds;
  ds.gamma_used = mdp.gamma;
  ds.behavior_id = std::move(behavior_id);
  ds.seed = seed;
  ds.transitions.reserve(n);
  for (const auto& tr : trajs)
    for (std::size_t t = 0; t < tr.horizon() && ds.transitions.size() < n; ++t)
      ds.transitions.push_back({tr.states[t], tr.actions[t], tr.states[t + 1]});
  return ds;
}

/// Empirical (s,a) frequencies of a dataset, pair-indexed.
inline Vec pair_frequencies(const TransitionDataset& ds, int n_states, int n_actions) {
  Vec f = Vec::Zero(n_states * n_actions);
  for (const auto& t : ds.transitions) f(t.s * n_actions + t.a) += 1.0;
  if (ds.n() > 0) f /= static_cast<double>(ds.n());
  return f;
}

}  // namespace sdice
