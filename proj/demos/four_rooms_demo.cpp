// Four Rooms: SpectralDICE with exact SVD features at rank 1 and at full numerical rank, against
// the model-based baseline, for a nearby and a distant behavior policy.

#include "spectral_dice/spectral_dice.hpp"

#include <cstdio>

using namespace sdice;

int main() {
  const TabularMdp mdp = four_rooms(0.1, 103, 0.9);
  const Policy target = epsilon_greedy_optimal(mdp, 0.1);
  const double rho = policy_value_exact(mdp, target);
  std::printf("target value %.4f\n", rho);

  for (double eps : {0.3, 0.8}) {
    const Policy behavior = epsilon_greedy_optimal(mdp, eps);
    const TransitionDataset ds = sample_dataset(mdp, behavior, 1 << 14, 1);
    SolverConfig cfg;
    cfg.c_inf_bound = 2.0 * concentratability(mdp, target, behavior);
    std::printf("behavior eps=%.1f value %.4f C_inf %.2f\n", eps, policy_value_exact(mdp, behavior),
                cfg.c_inf_bound / 2.0);
    for (int d : {1, 104}) {
      const SpectralRep rep = svd_representation(mdp, target, behavior, d);
      const DiceSolution sol = spectral_dice(rep, ds, target, mdp.mu0, mdp.reward, Regularizer::half_square(1e-3), cfg);
      std::printf("  d=%-3d  rho_hat %.4f  |error| %.4f\n", d, sol.rho_hat, std::abs(sol.rho_hat - rho));
    }
    const BaselineResult mb = model_based(ds, target, mdp.n_states, mdp.n_actions, mdp.mu0, mdp.reward, mdp.gamma);
    std::printf("  model-based  rho_hat %.4f  |error| %.4f\n", mb.rho_hat, std::abs(mb.rho_hat - rho));
  }
}
