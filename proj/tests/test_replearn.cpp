#include "test_util.hpp"

using namespace sdice;
using testutil::median;
using testutil::single_state_mdp;

namespace {

struct LowRankCase {
  TabularMdp mdp;
  LowRankGroundTruth gt;
  Policy target;
  Policy behavior;
};

LowRankCase make_case(int d, std::uint64_t seed) {
  auto [m, gt] = random_lowrank_mdp(8, 2, d, seed);
  return {m, gt, random_policy(8, 2, seed + 1000), uniform_policy(8, 2)};
}

// Claim-1 error by an explicit quadruple loop over (s, a, s', a').
double loop_error(const SpectralRep& rep, const TabularMdp& m, const Policy& target, const Policy& behavior) {
  const Vec db = occupancy_measure(m, behavior).values;
  double total = 0.0;
  for (int s = 0; s < m.n_states; ++s)
    for (int a = 0; a < m.n_actions; ++a) {
      const int x = s * m.n_actions + a;
      double row = 0.0;
      for (int sp = 0; sp < m.n_states; ++sp)
        for (int ap = 0; ap < m.n_actions; ++ap) {
          const int y = sp * m.n_actions + ap;
          double f = 0.0;
          for (int k = 0; k < rep.d; ++k) f += rep.phi(x, k) * rep.mu_pi(y, k);
          row += std::abs(rep.q_pib(y) * f - m.transition(x, sp) * target(sp, ap));
        }
      total += db(x) * row;
    }
  return total;
}

}  // namespace

TEST(Reconstruct, ZeroDualFeaturesGiveZeroKernel) {
  auto c = make_case(2, 1);
  SpectralRep rep = svd_representation(c.mdp, c.target, c.behavior, 2);
  rep.mu_pi.setZero();
  EXPECT_EQ(reconstruct_kernel(rep).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_NEAR(replearn_error(rep, c.mdp, c.target, c.behavior), 1.0, 1e-12);
}

TEST(Reconstruct, GroundTruthFeaturesRebuildTheKernel) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto c = make_case(3, seed);
    const SpectralRep rep = ground_truth_rep(c.mdp, c.gt, c.target, c.behavior);
    EXPECT_NO_THROW(rep.validate());
    EXPECT_LE((reconstruct_kernel(rep) - state_action_kernel(c.mdp, c.target)).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Svd, ExactRankRecovery) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto c = make_case(3, seed);
    const SpectralRep rep = svd_representation(c.mdp, c.target, c.behavior, 3);
    EXPECT_LE(replearn_error(rep, c.mdp, c.target, c.behavior), 1e-8);
    const Mat diff = reconstruct_kernel(rep) - state_action_kernel(c.mdp, c.target);
    EXPECT_LE(diff.cwiseAbs().rowwise().sum().maxCoeff(), 1e-8);
  }
}

TEST(Svd, FullRankReconstructsAnyKernel) {
  const TabularMdp m = testutil::random_mdp(5, 2, 4);
  const Policy t = random_policy(5, 2, 5), b = random_policy(5, 2, 6);
  EXPECT_LE(replearn_error(svd_representation(m, t, b, 10), m, t, b), 1e-8);
}

TEST(Svd, RankOneTruncationMatchesTheSvdTail) {
  auto c = make_case(3, 8);
  const SpectralRep rep = svd_representation(c.mdp, c.target, c.behavior, 1);
  const double err = replearn_error(rep, c.mdp, c.target, c.behavior);
  EXPECT_GT(err, 1e-3);
  // Independent oracle: truncate a Jacobi SVD of the same weighted matrix and weight the L1 rows.
  const Mat k = state_action_kernel(c.mdp, c.target);
  const Vec db = occupancy_measure(c.mdp, c.behavior).values;
  const Mat g = k * db.cwiseInverse().asDiagonal();
  Eigen::JacobiSVD<Mat> svd(g, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Mat g1 = svd.singularValues()(0) * svd.matrixU().col(0) * svd.matrixV().col(0).transpose();
  const double oracle = db.dot((g1 * db.asDiagonal() - k).cwiseAbs().rowwise().sum());
  EXPECT_NEAR(err, oracle, 1e-10);
}

TEST(Svd, DualFeaturesAreOrthonormal) {
  auto c = make_case(3, 2);
  const SpectralRep rep = svd_representation(c.mdp, c.target, c.behavior, 3);
  EXPECT_LE((rep.mu_pi.transpose() * rep.mu_pi - Mat::Identity(3, 3)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Svd, UncoveredColumnRaisesCoverageError) {
  const TabularMdp m = single_state_mdp(2);
  EXPECT_THROW(svd_representation(m, uniform_policy(1, 2), deterministic_policy({0}, 2), 1), CoverageError);
}

TEST(ReplearnError, MatchesExplicitLoop) {
  auto c = make_case(2, 3);
  const auto ds = sample_dataset(c.mdp, c.behavior, 4096, 5);
  ReplearnConfig cfg;
  cfg.method = ReplearnMethod::ols;
  cfg.steps = 300;
  const SpectralRep rep = ols_replearn(ds, c.target, cfg, occupancy_measure(c.mdp, c.behavior).values);
  EXPECT_NEAR(replearn_error(rep, c.mdp, c.target, c.behavior), loop_error(rep, c.mdp, c.target, c.behavior), 1e-12);
}

TEST(Ols, ConvexInOneFactorOnSingleState) {
  // With phi pinned at its optimum the loss is a convex quadratic in mu; SGD drives the error to 0.
  const TabularMdp m = single_state_mdp(1);
  const Policy pi = uniform_policy(1, 1);
  const auto ds = sample_dataset(m, pi, 256, 1);
  ReplearnConfig cfg;
  cfg.method = ReplearnMethod::ols;
  cfg.d = 1;
  double prev = 1e9;
  for (int steps : {10, 100, 1000}) {
    cfg.steps = steps;
    const SpectralRep rep = ols_replearn(ds, pi, cfg, Vec::Ones(1));
    const double err = replearn_error(rep, m, pi, pi);
    EXPECT_LE(err, prev + 1e-15);
    prev = err;
  }
  EXPECT_LE(prev, 1e-6);
}

TEST(Ols, EmptyDatasetRejected) {
  TransitionDataset ds;
  ds.gamma_used = 0.9;
  ReplearnConfig cfg;
  cfg.method = ReplearnMethod::ols;
  EXPECT_THROW(ols_replearn(ds, uniform_policy(2, 2), cfg, Vec::Constant(4, 0.25)), ArgumentError);
}

TEST(Ols, HugeStepDiverges) {
  auto c = make_case(2, 4);
  const auto ds = sample_dataset(c.mdp, c.behavior, 1024, 5);
  ReplearnConfig cfg;
  cfg.method = ReplearnMethod::ols;
  cfg.step_size = 1e6;
  EXPECT_THROW(ols_replearn(ds, c.target, cfg, occupancy_measure(c.mdp, c.behavior).values), DivergenceError);
}

TEST(Ols, DeterministicGivenSeed) {
  auto c = make_case(2, 5);
  const auto ds = sample_dataset(c.mdp, c.behavior, 2048, 6);
  const Vec db = occupancy_measure(c.mdp, c.behavior).values;
  ReplearnConfig cfg;
  cfg.method = ReplearnMethod::ols;
  cfg.steps = 200;
  cfg.batch_size = 256;
  const SpectralRep a = ols_replearn(ds, c.target, cfg, db);
  const SpectralRep b = ols_replearn(ds, c.target, cfg, db);
  EXPECT_EQ(a.phi, b.phi);
  EXPECT_EQ(a.mu_pi, b.mu_pi);
  cfg.seed = 1;
  EXPECT_NE(ols_replearn(ds, c.target, cfg, db).phi, a.phi);
}

TEST(Nce, SingleStateFixedPointIsOne) {
  const TabularMdp m = single_state_mdp(1);
  const Policy pi = uniform_policy(1, 1);
  const auto ds = sample_dataset(m, pi, 512, 2);
  ReplearnConfig cfg;
  cfg.method = ReplearnMethod::nce;
  cfg.d = 1;
  cfg.steps = 3000;
  const SpectralRep rep = nce_replearn(ds, pi, cfg, Vec::Ones(1));
  EXPECT_NEAR(rep.phi(0, 0) * rep.mu_pi(0, 0), 1.0, 1e-2);
}

TEST(Nce, ZeroClampWithZeroInnerProductDiverges) {
  const TabularMdp m = single_state_mdp(1);
  const Policy pi = uniform_policy(1, 1);
  const auto ds = sample_dataset(m, pi, 16, 2);
  ReplearnConfig cfg;
  cfg.method = ReplearnMethod::nce;
  cfg.d = 1;
  cfg.nce_clamp = 0.0;
  SpectralRep init = identity_rep(1, 1, Vec::Ones(1));
  init.mu_pi.setZero();
  // phi^T mu = 0 makes the positive term log(1 + 1/0).
  EXPECT_THROW(nce_replearn(ds, pi, cfg, Vec::Ones(1), init), DivergenceError);
  cfg.nce_clamp = 1e-6;
  EXPECT_NO_THROW(nce_replearn(ds, pi, cfg, Vec::Ones(1), init));
}

TEST(Nce, DeterministicGivenSeed) {
  auto c = make_case(2, 6);
  const auto ds = sample_dataset(c.mdp, c.behavior, 2048, 7);
  const Vec db = occupancy_measure(c.mdp, c.behavior).values;
  ReplearnConfig cfg;
  cfg.method = ReplearnMethod::nce;
  cfg.steps = 200;
  const SpectralRep a = nce_replearn(ds, c.target, cfg, db);
  const SpectralRep b = nce_replearn(ds, c.target, cfg, db);
  EXPECT_EQ(a.phi, b.phi);
  EXPECT_EQ(a.mu_pi, b.mu_pi);
}

TEST(Replearn, MethodMismatchAndSvdDispatchRejected) {
  auto c = make_case(2, 7);
  const auto ds = sample_dataset(c.mdp, c.behavior, 64, 1);
  const Vec db = occupancy_measure(c.mdp, c.behavior).values;
  ReplearnConfig cfg;
  cfg.method = ReplearnMethod::nce;
  EXPECT_THROW(ols_replearn(ds, c.target, cfg, db), ArgumentError);
  cfg.method = ReplearnMethod::svd;
  EXPECT_THROW(learn_representation(ds, c.target, cfg, db), ArgumentError);
  cfg.method = ReplearnMethod::ols;
  cfg.step_size = 0.0;
  EXPECT_THROW(learn_representation(ds, c.target, cfg, db), ArgumentError);
}

class DecayTest : public ::testing::TestWithParam<ReplearnMethod> {};

TEST_P(DecayTest, MedianErrorShrinksWithData) {
  auto c = make_case(2, 7);
  const Vec db = occupancy_measure(c.mdp, c.behavior).values;
  const double svd_err = replearn_error(svd_representation(c.mdp, c.target, c.behavior, 2), c.mdp, c.target, c.behavior);
  std::vector<double> small, large;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    ReplearnConfig cfg;
    cfg.method = GetParam();
    cfg.seed = seed;
    for (int logn : {10, 14}) {
      const auto ds = sample_dataset(c.mdp, c.behavior, std::size_t{1} << logn, 100 + seed);
      const double err = replearn_error(learn_representation(ds, c.target, cfg, db), c.mdp, c.target, c.behavior);
      EXPECT_GE(err, svd_err - 1e-9);  // exact SVD lower-bounds sampled learners at the true rank
      (logn == 10 ? small : large).push_back(err);
    }
  }
  EXPECT_LT(median(large), median(small));
}

INSTANTIATE_TEST_SUITE_P(Learners, DecayTest, ::testing::Values(ReplearnMethod::ols, ReplearnMethod::nce),
                         [](const auto& info) { return to_string(info.param); });

TEST(Svd, LowerBoundsLearnersAtTrueRank) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto c = make_case(3, 200 + seed);
    const Vec db = occupancy_measure(c.mdp, c.behavior).values;
    const double svd_err = replearn_error(svd_representation(c.mdp, c.target, c.behavior, 3), c.mdp, c.target, c.behavior);
    const auto ds = sample_dataset(c.mdp, c.behavior, 4096, seed);
    ReplearnConfig cfg;
    cfg.method = ReplearnMethod::ols;
    cfg.d = 3;
    cfg.seed = seed;
    cfg.steps = 1000;
    EXPECT_GE(replearn_error(ols_replearn(ds, c.target, cfg, db), c.mdp, c.target, c.behavior), svd_err - 1e-9);
  }
}

TEST(Svd, ExactOnDeterministicGrid) {
  // Repeated kernel rows; the factorization must still reconstruct the kernel at full rank.
  const TabularMdp m = four_rooms(0.0, 103, 0.9);
  const Policy t = epsilon_greedy_optimal(m, 0.1);
  const Policy b = epsilon_greedy_optimal(m, 0.5);
  EXPECT_LE(replearn_error(svd_representation(m, t, b, 104), m, t, b), 1e-9);
}
