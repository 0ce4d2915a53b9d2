#include "test_util.hpp"

using namespace sdice;
using testutil::median;
using testutil::single_state_mdp;

TEST(DirectDice, SingleStateConstantReward) {
  const TabularMdp m = single_state_mdp(1);
  const Policy pi = uniform_policy(1, 1);
  SolverConfig cfg;
  cfg.steps = 2000;
  const auto res = direct_dice(sample_dataset(m, pi, 512, 1), pi, m.mu0, m.reward, Regularizer::half_square(1e-3), cfg);
  EXPECT_EQ(res.method, "direct_dice");
  EXPECT_NEAR(res.rho_hat, 1.0, 1e-3);
}

TEST(DirectDice, LowRankMdpLargeSample) {
  auto [m, gt] = random_lowrank_mdp(8, 2, 2, 7);
  const Policy b = uniform_policy(8, 2);
  const Policy t = epsilon_greedy_optimal(m, 0.2);
  SolverConfig cfg;
  cfg.c_inf_bound = 2.0 * concentratability(m, t, b);
  const auto res = direct_dice(sample_dataset(m, b, 1 << 15, 2), t, m.mu0, m.reward, Regularizer::half_square(1e-3), cfg);
  EXPECT_LE(std::abs(res.rho_hat - policy_value_exact(m, t)), 0.05);
  EXPECT_TRUE(std::isfinite(res.rho_hat));
}

TEST(DirectDice, IdenticalToSpectralDiceWithOneHotFeatures) {
  auto [m, gt] = random_lowrank_mdp(6, 2, 2, 3);
  const Policy b = uniform_policy(6, 2);
  const Policy t = random_policy(6, 2, 4);
  const auto ds = sample_dataset(m, b, 3000, 5);
  SolverConfig cfg;
  cfg.steps = 3000;
  cfg.seed = 11;
  const Regularizer reg = Regularizer::half_square(1e-3);
  const auto base = direct_dice(ds, t, m.mu0, m.reward, reg, cfg);
  const auto spec = spectral_dice(identity_rep(6, 2, pair_frequencies(ds, 6, 2)), ds, t, m.mu0, m.reward, reg, cfg);
  EXPECT_EQ(base.rho_hat, spec.rho_hat);
  EXPECT_EQ(base.diagnostics.at("final_gap"), spec.final_gap);
}

TEST(ModelBased, RecoversDeterministicMdpExactly) {
  TabularMdp m;
  m.n_states = 3;
  m.n_actions = 2;
  m.gamma = 0.8;
  m.transition = Mat::Zero(6, 3);
  for (int x = 0; x < 6; ++x) m.transition(x, (x / 2 + 1 + x % 2) % 3) = 1.0;
  m.reward = (Vec(6) << 0.1, 0.5, 0.0, 1.0, 0.3, 0.7).finished();
  m.mu0 = Vec::Constant(3, 1.0 / 3);
  TransitionDataset ds;
  ds.gamma_used = m.gamma;
  for (int s = 0; s < 3; ++s)
    for (int a = 0; a < 2; ++a)
      for (int rep = 0; rep < 2; ++rep) ds.transitions.push_back({s, a, (s + 1 + a) % 3});
  const Policy t = random_policy(3, 2, 1);
  const auto res = model_based(ds, t, 3, 2, m.mu0, m.reward, m.gamma);
  EXPECT_NEAR(res.rho_hat, policy_value_exact(m, t), 1e-10);
  EXPECT_EQ(res.diagnostics.at("unobserved_rows"), 0.0);
}

TEST(ModelBased, UnvisitedRowsAreUniform) {
  TransitionDataset ds;
  ds.gamma_used = 0.9;
  ds.transitions = {{0, 0, 1}, {0, 0, 1}, {1, 1, 0}};
  const Mat p = empirical_transitions(ds, 3, 2, 0.1);
  EXPECT_EQ(p(0, 1), 1.0);
  EXPECT_EQ(p(3, 0), 1.0);
  for (int x : {1, 2, 4, 5})
    for (int s = 0; s < 3; ++s) EXPECT_NEAR(p(x, s), 1.0 / 3, 1e-15);
  const auto res = model_based(ds, uniform_policy(3, 2), 3, 2, Vec::Constant(3, 1.0 / 3), Vec::Ones(6), 0.9);
  EXPECT_EQ(res.diagnostics.at("unobserved_rows"), 4.0);
  EXPECT_NEAR(res.rho_hat, 1.0, 1e-12);
}

TEST(ModelBased, LowRankErrorSmallAndConsistent) {
  auto [m, gt] = random_lowrank_mdp(8, 2, 2, 7);
  const Policy b = uniform_policy(8, 2);
  const Policy t = epsilon_greedy_optimal(m, 0.2);
  const double rho = policy_value_exact(m, t);
  std::vector<double> small, large;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto fit = [&](std::size_t n) {
      const auto res = model_based(sample_dataset(m, b, n, 10 + seed), t, 8, 2, m.mu0, m.reward, m.gamma);
      return std::abs(res.rho_hat - rho);
    };
    small.push_back(fit(1 << 10));
    large.push_back(fit(1 << 16));
    if (seed == 0) EXPECT_LE(fit(1 << 14), 0.05);
  }
  EXPECT_LT(median(large), median(small));
}

TEST(ImportanceSampling, OnPolicyWeightsAreOne) {
  const TabularMdp m = testutil::random_mdp(4, 2, 1);
  const Policy b = random_policy(4, 2, 2);
  const auto trajs = sample_trajectories(m, b, 50, 20, 3);
  const auto res = importance_sampling(trajs, b, b, m.gamma, m.reward);
  EXPECT_NEAR(res.diagnostics.at("weight_mean"), 1.0, 1e-12);
  EXPECT_NEAR(res.diagnostics.at("weight_variance"), 0.0, 1e-12);
  double expected = 0.0;
  for (const auto& tr : trajs) {
    double ret = 0.0, disc = 1.0;
    for (std::size_t k = 0; k < 20; ++k) {
      ret += disc * m.reward(tr.states[k] * 2 + tr.actions[k]);
      disc *= m.gamma;
    }
    expected += ret * (1 - m.gamma) / (1 - std::pow(m.gamma, 20));
  }
  EXPECT_NEAR(res.rho_hat, expected / 50, 1e-12);
  EXPECT_EQ(res.n_used, 1000u);
}

TEST(ImportanceSampling, DeterministicSingleStateIsExact) {
  TabularMdp m = single_state_mdp(2, 0.0, 0.9);
  m.reward(1) = 0.6;
  const Policy t = deterministic_policy({1}, 2);
  const auto trajs = sample_trajectories(m, t, 10, 3, 4);
  const auto res = importance_sampling(trajs, t, t, m.gamma, m.reward);
  EXPECT_NEAR(res.rho_hat, policy_value_exact(m, t), 1e-12);
}

TEST(ImportanceSampling, ZeroBehaviorProbabilityRaises) {
  const TabularMdp m = single_state_mdp(2);
  const auto trajs = sample_trajectories(m, deterministic_policy({1}, 2), 3, 4, 1);
  EXPECT_THROW(importance_sampling(trajs, uniform_policy(1, 2), deterministic_policy({0}, 2), 0.9, m.reward),
               CoverageError);
}

TEST(ImportanceSampling, WeightVarianceGrowsWithHorizon) {
  const TabularMdp m = four_rooms(0.1, 103, 0.9);
  const Policy t = epsilon_greedy_optimal(m, 0.1);
  const Policy b = epsilon_greedy_optimal(m, 0.3);
  const auto short_res = importance_sampling(sample_trajectories(m, b, 400, 5, 1), t, b, m.gamma, m.reward);
  const auto long_res = importance_sampling(sample_trajectories(m, b, 400, 100, 1), t, b, m.gamma, m.reward);
  EXPECT_GT(long_res.diagnostics.at("weight_variance"), short_res.diagnostics.at("weight_variance"));
}
