#include "test_util.hpp"

using namespace sdice;

TEST(FourRooms, LayoutHasFourRoomsWorthOfCells) {
  const auto& g = four_rooms_layout();
  EXPECT_EQ(g.cells.size(), 104u);
  const TabularMdp m = four_rooms(0.1, 103, 0.9);
  EXPECT_EQ(m.n_states, 104);
  EXPECT_EQ(m.n_actions, 4);
  EXPECT_NO_THROW(m.validate());
}

TEST(FourRooms, NoiselessDynamicsAreDeterministic) {
  const TabularMdp m = four_rooms(0.0, 50, 0.9);
  for (int x = 0; x < m.n_pairs(); ++x) {
    EXPECT_EQ(m.transition.row(x).maxCoeff(), 1.0);
    EXPECT_EQ((m.transition.row(x).array() > 0).count(), 1);
  }
}

TEST(FourRooms, RewardOnlyAtGoal) {
  const int goal = 17;
  const TabularMdp m = four_rooms(0.2, goal, 0.9);
  for (int s = 0; s < m.n_states; ++s)
    for (int a = 0; a < 4; ++a) EXPECT_EQ(m.reward(m.pair(s, a)), s == goal ? 1.0 : 0.0);
  for (int a = 0; a < 4; ++a) EXPECT_EQ(m.transition(m.pair(goal, a), goal), 1.0);
  EXPECT_EQ(m.mu0(goal), 0.0);
}

TEST(FourRooms, NoisyRowsSumToOne) {
  const TabularMdp m = four_rooms(0.1, 103, 0.9);
  for (int x = 0; x < m.n_pairs(); ++x) EXPECT_NEAR(m.transition.row(x).sum(), 1.0, 1e-12);
}

TEST(FourRooms, WallsKeepTheAgentInPlace) {
  const auto& g = four_rooms_layout();
  const TabularMdp m = four_rooms(0.0, 103, 0.9);
  const int corner = g.state_at(0, 0);
  ASSERT_GE(corner, 0);
  EXPECT_EQ(m.transition(m.pair(corner, 0), corner), 1.0);  // up
  EXPECT_EQ(m.transition(m.pair(corner, 2), corner), 1.0);  // left
  EXPECT_EQ(m.transition(m.pair(corner, 1), g.state_at(1, 0)), 1.0);
  EXPECT_EQ(m.transition(m.pair(corner, 3), g.state_at(0, 1)), 1.0);
}

TEST(FourRooms, InvalidArgumentsRejected) {
  EXPECT_THROW(four_rooms(0.1, 104, 0.9), ArgumentError);
  EXPECT_THROW(four_rooms(0.1, -1, 0.9), ArgumentError);
  EXPECT_THROW(four_rooms(1.0, 0, 0.9), ArgumentError);
}

TEST(LowRank, KernelIsValidAndMatchesFactors) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto [m, gt] = random_lowrank_mdp(8, 2, 3, seed);
    EXPECT_NO_THROW(m.validate());
    const Mat k = gt.phi_star * gt.w_star;
    EXPECT_LE((k - m.transition).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_GE(k.minCoeff(), 0.0);
    for (int x = 0; x < k.rows(); ++x) EXPECT_NEAR(k.row(x).sum(), 1.0, 1e-12);
  }
}

TEST(LowRank, NumericalRankEqualsD) {
  for (int d : {1, 2, 3, 5}) {
    auto [m, gt] = random_lowrank_mdp(8, 2, d, 40 + d);
    const Vec sv = Eigen::JacobiSVD<Mat>(m.transition).singularValues();
    EXPECT_EQ((sv.array() > 1e-10).count(), d) << "d=" << d;
  }
}

TEST(LowRank, RankOneSharesOneNextStateDistribution) {
  auto [m, gt] = random_lowrank_mdp(6, 3, 1, 9);
  for (int x = 1; x < m.n_pairs(); ++x) EXPECT_LE((m.transition.row(x) - m.transition.row(0)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(LowRank, FullRankWithIdentityLikeFactorsIsArbitrary) {
  auto [m, gt] = random_lowrank_mdp(4, 1, 4, 3);
  EXPECT_EQ((Eigen::JacobiSVD<Mat>(m.transition).singularValues().array() > 1e-10).count(), 4);
}

TEST(LowRank, RankBoundsEnforced) {
  EXPECT_THROW(random_lowrank_mdp(4, 2, 0, 1), ArgumentError);
  EXPECT_THROW(random_lowrank_mdp(4, 2, 5, 1), ArgumentError);
}

TEST(LowRank, InitialDistributionIsInTheDualSpan) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto [m, gt] = random_lowrank_mdp(8, 2, 3, seed);
    EXPECT_LE(initial_representation_residual(m, gt), 1e-10);
  }
}

TEST(LowRank, DualFeatureRepresentsInitialDistributionThroughOccupancy) {
  // mu0(s) = q(s) <w(., s) / q(s), omega0> with q the behavior state occupancy.
  auto [m, gt] = random_lowrank_mdp(8, 2, 3, 77);
  const Vec q = occupancy_measure(m, uniform_policy(8, 2)).state_marginal();
  ASSERT_GT(q.minCoeff(), 0.0);
  Vec rebuilt(8);
  for (int s = 0; s < 8; ++s) rebuilt(s) = q(s) * (gt.w_star.col(s) / q(s)).dot(gt.omega0);
  EXPECT_LE((rebuilt - m.mu0).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(LowRank, LinearRewardFlag) {
  auto [m, gt] = random_lowrank_mdp(8, 2, 3, 5, {0.9, true});
  ASSERT_EQ(gt.theta_r.size(), 3);
  EXPECT_LE((gt.phi_star * gt.theta_r - m.reward).cwiseAbs().maxCoeff(), 1e-15);
  auto [m2, gt2] = random_lowrank_mdp(8, 2, 3, 5);
  EXPECT_EQ(gt2.theta_r.size(), 0);
}

TEST(LowRank, LinearityIdentitiesWithGroundTruthFeatures) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto [m, gt] = random_lowrank_mdp(8, 2, 3, seed, {0.9, true});
    const Policy target = random_policy(8, 2, seed + 10);
    const Policy behavior = random_policy(8, 2, seed + 20);
    const auto res = linear_representation_residuals(ground_truth_rep(m, gt, target, behavior), m, target, behavior);
    EXPECT_LE(res.q_residual, 1e-8);
    EXPECT_LE(res.zeta_residual, 1e-8);
  }
}

TEST(Policies, ConstructorsProduceValidTables) {
  const TabularMdp m = four_rooms(0.1, 103, 0.9);
  for (const Policy& p : {uniform_policy(104, 4), random_policy(104, 4, 1), optimal_policy(m),
                          epsilon_greedy_optimal(m, 0.3)})
    EXPECT_NO_THROW(p.validate());
  EXPECT_THROW(epsilon_mix(uniform_policy(2, 2), 1.5), ArgumentError);
}

TEST(Policies, OptimalPolicyBeatsPerturbations) {
  const TabularMdp m = four_rooms(0.1, 103, 0.9);
  const double best = policy_value_exact(m, optimal_policy(m));
  EXPECT_GT(best, policy_value_exact(m, epsilon_greedy_optimal(m, 0.3)));
  EXPECT_GT(best, policy_value_exact(m, uniform_policy(104, 4)));
  // Greedy with respect to its own Q: no single-state improvement exists.
  const Policy opt = optimal_policy(m);
  const Vec q = q_values(m, opt);
  for (int s = 0; s < m.n_states; ++s) {
    double v = 0.0;
    for (int a = 0; a < 4; ++a) v += opt(s, a) * q(m.pair(s, a));
    for (int a = 0; a < 4; ++a) EXPECT_LE(q(m.pair(s, a)), v + 1e-9);
  }
}
