#pragma once

// Benchmark environments: the Four Rooms gridworld and random low-rank MDPs with known spectral
// factors, plus the policy constructors used with them.

#include "spectral_dice/mdp.hpp"

#include <array>
#include <optional>
#include <string_view>
#include <utility>

namespace sdice {

/// Geometry of the Four Rooms grid: 11x11 interior, '#' walls, 104 open cells.
struct GridLayout {
  int rows = 0;
  int cols = 0;
  std::vector<std::pair<int, int>> cells;  ///< state index -> (row, col)
  std::vector<int> index;                  ///< row * cols + col -> state index or -1

  int state_at(int r, int c) const {
    if (r < 0 || c < 0 || r >= rows || c >= cols) return -1;
    return index[r * cols + c];
  }
};

inline const GridLayout& four_rooms_layout() {
  static const GridLayout layout = [] {
    static constexpr std::array<std::string_view, 11> kMap = {
        ".....#.....",  //
        ".....#.....",  //
        "...........",  //
        ".....#.....",  //
        ".....#.....",  //
        "#.####.....",  //
        ".....###.##",  //
        ".....#.....",  //
        ".....#.....",  //
        "...........",  //
        ".....#.....",  //
    };
    GridLayout g;
    g.rows = 11;
    g.cols = 11;
    g.index.assign(g.rows * g.cols, -1);
    for (int r = 0; r < g.rows; ++r)
      for (int c = 0; c < g.cols; ++c)
        if (kMap[r][c] == '.') {
          g.index[r * g.cols + c] = static_cast<int>(g.cells.size());
          g.cells.emplace_back(r, c);
        }
    return g;
  }();
  return layout;
}

/// Four Rooms: actions up/down/left/right; the intended move succeeds with probability
/// 1 - noise, otherwise one of the three other directions is taken uniformly. Moves into walls
/// leave the agent in place. Reward 1 for every action at the goal, which is absorbing.
/// mu0 is uniform over non-goal cells.
inline TabularMdp four_rooms(double noise, int goal, double gamma) {
  const auto& g = four_rooms_layout();
  const int n = static_cast<int>(g.cells.size());
  detail::require(noise >= 0.0 && noise < 1.0, "four_rooms: noise must lie in [0,1)");
  detail::require(goal >= 0 && goal < n, "four_rooms: goal index out of range");
  static constexpr std::array<std::pair<int, int>, 4> kMoves = {{{-1, 0}, {1, 0}, {0, -1}, {0, 1}}};

  TabularMdp mdp;
  mdp.n_states = n;
  mdp.n_actions = 4;
  mdp.gamma = gamma;
  mdp.transition = Mat::Zero(n * 4, n);
  mdp.reward = Vec::Zero(n * 4);
  mdp.mu0 = Vec::Constant(n, 1.0 / (n - 1));
  mdp.mu0(goal) = 0.0;
  if (n == 1) mdp.mu0(0) = 1.0;

  for (int s = 0; s < n; ++s) {
    const auto [r, c] = g.cells[s];
    for (int a = 0; a < 4; ++a) {
      const int x = mdp.pair(s, a);
      if (s == goal) {
        mdp.transition(x, s) = 1.0;
        mdp.reward(x) = 1.0;
        continue;
      }
      for (int dir = 0; dir < 4; ++dir) {
        const double p = dir == a ? 1.0 - noise : noise / 3.0;
        if (p == 0.0) continue;
        const int nxt = g.state_at(r + kMoves[dir].first, c + kMoves[dir].second);
        mdp.transition(x, nxt < 0 ? s : nxt) += p;
      }
    }
  }
  return mdp;
}

/// Ground-truth spectral factors of a generated low-rank MDP:
/// P(s'|s,a) = sum_k phi_star(x,k) w_star(k,s'), mu0 = sum_k omega0(k) w_star(k,.).
struct LowRankGroundTruth {
  int d = 0;
  Mat phi_star;  ///< (S*A) x d, rows on the simplex
  Mat w_star;    ///< d x S, rows are distributions
  Vec omega0;    ///< d, convex weights
  Vec theta_r;   ///< d, reward cofactor when the reward is linear in phi_star; empty otherwise

  Mat kernel() const { return phi_star * w_star; }
};

struct LowRankOptions {
  double gamma = 0.9;
  bool reward_linear = false;
};

/// Random MDP whose transition matrix factors through a rank-d simplex representation.
inline std::pair<TabularMdp, LowRankGroundTruth> random_lowrank_mdp(int n_states, int n_actions, int d,
                                                                    std::uint64_t seed,
                                                                    LowRankOptions opts = {}) {
  detail::require(n_states > 0 && n_actions > 0, "random_lowrank_mdp: dimensions must be positive");
  detail::require(d >= 1 && d <= std::min(n_states * n_actions, n_states),
                  "random_lowrank_mdp: rank must satisfy 1 <= d <= min(S*A, S)");
  Rng rng(seed);
  const int np = n_states * n_actions;
  LowRankGroundTruth gt;
  gt.d = d;
  gt.phi_star.resize(np, d);
  gt.w_star.resize(d, n_states);
  for (int x = 0; x < np; ++x) gt.phi_star.row(x) = sample_simplex(rng, d).transpose();
  for (int k = 0; k < d; ++k) gt.w_star.row(k) = sample_simplex(rng, n_states).transpose();
  gt.omega0 = sample_simplex(rng, d);

  TabularMdp mdp;
  mdp.n_states = n_states;
  mdp.n_actions = n_actions;
  mdp.gamma = opts.gamma;
  mdp.transition = gt.kernel();
  // Exact renormalization against accumulated round-off.
  for (int x = 0; x < np; ++x) mdp.transition.row(x) /= mdp.transition.row(x).sum();
  mdp.mu0 = gt.w_star.transpose() * gt.omega0;
  mdp.mu0 /= mdp.mu0.sum();
  if (opts.reward_linear) {
    gt.theta_r = Vec(d);
    for (int k = 0; k < d; ++k) gt.theta_r(k) = uniform01(rng);
    mdp.reward = (gt.phi_star * gt.theta_r).cwiseMax(0.0).cwiseMin(1.0);
  } else {
    mdp.reward = Vec(np);
    for (int x = 0; x < np; ++x) mdp.reward(x) = uniform01(rng);
  }
  return {std::move(mdp), std::move(gt)};
}

// Policy constructors.

inline Policy uniform_policy(int n_states, int n_actions) {
  return {Mat::Constant(n_states, n_actions, 1.0 / n_actions)};
}

/// Rows drawn uniformly from the action simplex.
inline Policy random_policy(int n_states, int n_actions, std::uint64_t seed) {
  Rng rng(seed);
  Policy p{Mat(n_states, n_actions)};
  for (int s = 0; s < n_states; ++s) p.probs.row(s) = sample_simplex(rng, n_actions).transpose();
  return p;
}

inline Policy deterministic_policy(const std::vector<int>& actions, int n_actions) {
  Policy p{Mat::Zero(static_cast<int>(actions.size()), n_actions)};
  for (std::size_t s = 0; s < actions.size(); ++s) p.probs(static_cast<int>(s), actions[s]) = 1.0;
  return p;
}

/// (1 - eps) * base + eps * uniform.
inline Policy epsilon_mix(const Policy& base, double eps) {
  detail::require(eps >= 0.0 && eps <= 1.0, "epsilon_mix: eps must lie in [0,1]");
  const double u = 1.0 / base.n_actions();
  return {(1.0 - eps) * base.probs + Mat::Constant(base.n_states(), base.n_actions(), eps * u)};
}

/// Greedy optimal policy by policy iteration with exact evaluation. Ties go to the lowest action.
inline Policy optimal_policy(const TabularMdp& mdp, int max_iters = 1000) {
  std::vector<int> act(mdp.n_states, 0);
  for (int it = 0; it < max_iters; ++it) {
    const Policy pi = deterministic_policy(act, mdp.n_actions);
    const Vec q = q_values(mdp, pi);
    bool changed = false;
    for (int s = 0; s < mdp.n_states; ++s) {
      int best = act[s];
      for (int a = 0; a < mdp.n_actions; ++a)
        if (q(mdp.pair(s, a)) > q(mdp.pair(s, best)) + 1e-12) best = a;
      if (best != act[s]) {
        act[s] = best;
        changed = true;
      }
    }
    if (!changed) break;
  }
  return deterministic_policy(act, mdp.n_actions);
}

/// eps-greedy around the optimal policy.
inline Policy epsilon_greedy_optimal(const TabularMdp& mdp, double eps) {
  return epsilon_mix(optimal_policy(mdp), eps);
}

}  // namespace sdice
