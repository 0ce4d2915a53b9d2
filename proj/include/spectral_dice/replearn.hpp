#pragma once

// Primal-dual spectral representation of the policy-conditioned kernel
//   P^pi((s',a') | (s,a)) ~= q_pib(s',a') <phi(s,a), mu_pi(s',a')>,
// learned exactly (SVD of the tabular kernel), by least squares, or by noise-contrastive estimation.

#include "spectral_dice/envs.hpp"
#include "spectral_dice/mdp.hpp"

#include <optional>
#include <string>

namespace sdice {

/// Smallest inner product at which the NCE positive-term gradient is evaluated.
inline constexpr double kNceGradFloor = 1e-2;

struct SpectralRep {
  int n_states = 0;
  int n_actions = 0;
  int d = 0;
  Mat phi;     ///< (S*A) x d primal features
  Mat mu_pi;   ///< (S*A) x d dual features
  Vec q_pib;   ///< (S*A) reference weights, q(s) pi_b(a|s) = d^{pi_b}(s,a)

  int n_pairs() const { return n_states * n_actions; }

  void validate() const {
    detail::require(d >= 1, "rep: dimension must be positive");
    detail::require(phi.rows() == n_pairs() && phi.cols() == d, "rep: phi must be (S*A) x d");
    detail::require(mu_pi.rows() == n_pairs() && mu_pi.cols() == d, "rep: mu_pi must be (S*A) x d");
    detail::require(q_pib.size() == n_pairs(), "rep: q_pib must have S*A entries");
    detail::require(phi.allFinite() && mu_pi.allFinite() && q_pib.allFinite(), "rep: non-finite entry");
    detail::require(q_pib.minCoeff() >= 0.0 && std::abs(q_pib.sum() - 1.0) <= 1e-10,
                    "rep: q_pib must be a distribution");
  }
};

enum class ReplearnMethod { svd, ols, nce };

inline std::string to_string(ReplearnMethod m) {
  switch (m) {
    case ReplearnMethod::svd: return "svd";
    case ReplearnMethod::ols: return "ols";
    case ReplearnMethod::nce: return "nce";
  }
  return "?";
}

struct ReplearnConfig {
  ReplearnMethod method = ReplearnMethod::ols;
  int d = 2;
  int steps = 4000;
  double step_size = 0.3;
  int batch_size = 1024;
  std::uint64_t seed = 0;
  double nce_clamp = 1e-6;

  void validate() const {
    detail::require(d >= 1, "replearn: d must be at least 1");
    detail::require(step_size > 0.0, "replearn: step_size must be positive");
    detail::require(steps >= 0 && batch_size >= 1, "replearn: steps >= 0 and batch_size >= 1 required");
    detail::require(nce_clamp >= 0.0, "replearn: nce_clamp must be non-negative");
  }
};

/// Entry ((s,a),(s',a')) = q_pib(s',a') <phi(s,a), mu_pi(s',a')>. Not clipped.
inline Mat reconstruct_kernel(const SpectralRep& rep) {
  return (rep.phi * rep.mu_pi.transpose()) * rep.q_pib.asDiagonal();
}

/// Representation error E_{(s,a) ~ d^{pi_b}} || P_hat^pi(.|s,a) - P^pi(.|s,a) ||_1, computed exactly.
inline double replearn_error(const SpectralRep& rep, const TabularMdp& mdp, const Policy& target,
                             const Policy& behavior) {
  const Mat k = state_action_kernel(mdp, target);
  const Vec db = occupancy_measure(mdp, behavior).values;
  const Mat diff = reconstruct_kernel(rep) - k;
  return db.dot(diff.cwiseAbs().rowwise().sum());
}

/// Exact representation from the top-d SVD of G((s,a),(s',a')) = P^pi((s',a')|(s,a)) / d^{pi_b}(s',a').
/// phi = U_d Sigma_d, mu_pi = V_d, q_pib = d^{pi_b}. Columns with zero behavior mass must carry no
/// kernel mass; they are left at zero.
inline SpectralRep svd_representation(const TabularMdp& mdp, const Policy& target, const Policy& behavior, int d) {
  detail::require(d >= 1 && d <= mdp.n_pairs(), "svd_representation: d must lie in [1, S*A]");
  const Mat k = state_action_kernel(mdp, target);
  const Vec db = occupancy_measure(mdp, behavior).values;
  Mat g = Mat::Zero(k.rows(), k.cols());
  for (int y = 0; y < k.cols(); ++y) {
    if (db(y) <= kZeroMass) {
      if (k.col(y).cwiseAbs().maxCoeff() > kZeroMass)
        throw CoverageError("svd_representation: pair " + std::to_string(y) +
                            " has kernel mass but zero behavior occupancy");
      continue;
    }
    g.col(y) = k.col(y) / db(y);
  }
  Mat u, v;
  Vec sv;
  {
    Eigen::BDCSVD<Mat> svd(g, Eigen::ComputeThinU | Eigen::ComputeThinV);
    u = svd.matrixU();
    v = svd.matrixV();
    sv = svd.singularValues();
  }
  // Eigen 3.4.0's divide-and-conquer SVD can return a wrong factorization with info() == Success on
  // kernels with many repeated rows (e.g. a deterministic grid). Verify and fall back to Jacobi.
  const double scale = std::max(1.0, g.cwiseAbs().maxCoeff());
  const Mat residual = u * sv.asDiagonal() * v.transpose() - g;
  if (!residual.allFinite() || residual.cwiseAbs().maxCoeff() > 1e-9 * scale) {
    Eigen::JacobiSVD<Mat> svd(g, Eigen::ComputeThinU | Eigen::ComputeThinV);
    u = svd.matrixU();
    v = svd.matrixV();
    sv = svd.singularValues();
  }
  SpectralRep rep;
  rep.n_states = mdp.n_states;
  rep.n_actions = mdp.n_actions;
  rep.d = d;
  rep.phi = u.leftCols(d) * sv.head(d).asDiagonal();
  rep.mu_pi = v.leftCols(d);
  rep.q_pib = db / db.sum();
  return rep;
}

/// Ground-truth primal-dual factors of a generated low-rank MDP for a target/behavior pair:
/// phi = phi_star, mu_pi(s',a') = pi(a'|s') / pi_b(a'|s') * w_star(., s') / q(s') with q = d^{pi_b}(s).
inline SpectralRep ground_truth_rep(const TabularMdp& mdp, const LowRankGroundTruth& gt, const Policy& target,
                                    const Policy& behavior) {
  const OccupancyTable db = occupancy_measure(mdp, behavior);
  const Vec q = db.state_marginal();
  SpectralRep rep;
  rep.n_states = mdp.n_states;
  rep.n_actions = mdp.n_actions;
  rep.d = gt.d;
  rep.phi = gt.phi_star;
  rep.mu_pi = Mat::Zero(mdp.n_pairs(), gt.d);
  for (int s = 0; s < mdp.n_states; ++s)
    for (int a = 0; a < mdp.n_actions; ++a) {
      if (q(s) <= kZeroMass || behavior(s, a) <= 0.0) {
        if (target(s, a) > 0.0 && q(s) > kZeroMass)
          throw CoverageError("ground_truth_rep: target action not covered by behavior");
        continue;
      }
      rep.mu_pi.row(mdp.pair(s, a)) = (target(s, a) / behavior(s, a) / q(s)) * gt.w_star.col(s).transpose();
    }
  rep.q_pib = db.values / db.values.sum();
  return rep;
}

/// Max-norm least-squares residuals of Q^pi on span(phi) and of d^pi / d^{pi_b} on span(mu_pi).
/// Both vanish when the representation is exact and the reward is linear in phi.
struct LinearityResiduals {
  double q_residual = 0.0;
  double zeta_residual = 0.0;
};

inline LinearityResiduals linear_representation_residuals(const SpectralRep& rep, const TabularMdp& mdp,
                                                          const Policy& target, const Policy& behavior) {
  const Vec q = q_values(mdp, target);
  const Vec dt = occupancy_measure(mdp, target).values;
  const Vec db = occupancy_measure(mdp, behavior).values;
  LinearityResiduals out;
  const Vec theta = rep.phi.completeOrthogonalDecomposition().solve(q);
  out.q_residual = (rep.phi * theta - q).cwiseAbs().maxCoeff();

  std::vector<int> support;
  for (int x = 0; x < mdp.n_pairs(); ++x)
    if (db(x) > kZeroMass) support.push_back(x);
  Mat m(static_cast<int>(support.size()), rep.d);
  Vec zeta(static_cast<int>(support.size()));
  for (std::size_t i = 0; i < support.size(); ++i) {
    m.row(static_cast<int>(i)) = rep.mu_pi.row(support[i]);
    zeta(static_cast<int>(i)) = dt(support[i]) / db(support[i]);
  }
  const Vec omega = m.completeOrthogonalDecomposition().solve(zeta);
  out.zeta_residual = (m * omega - zeta).cwiseAbs().maxCoeff();
  return out;
}

/// Residual of the initial-distribution representation mu0(s) = <w_star(., s), omega0>.
inline double initial_representation_residual(const TabularMdp& mdp, const LowRankGroundTruth& gt) {
  return (gt.w_star.transpose() * gt.omega0 - mdp.mu0).cwiseAbs().maxCoeff();
}

namespace detail {

inline void init_factor(Rng& rng, Mat& m) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(m.cols()));
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) m(i, j) = scale * (0.5 + uniform01(rng));
}

struct SgdState {
  SpectralRep rep;
  std::vector<int> cur;     // pair index of (s,a) per sample
  std::vector<int> s_next;  // next state per sample
};

inline SgdState sgd_setup(const TransitionDataset& ds, const Policy& target, const ReplearnConfig& cfg,
                          const Vec& q_pib, Rng& rng, const std::optional<SpectralRep>& init) {
  require(ds.n() >= 1, "replearn: dataset must be nonempty");
  cfg.validate();
  const int na = target.n_actions();
  const int ns = target.n_states();
  ds.validate(ns, na);
  require(q_pib.size() == ns * na, "replearn: q_pib must have S*A entries");
  SgdState st;
  st.rep.n_states = ns;
  st.rep.n_actions = na;
  st.rep.d = cfg.d;
  st.rep.phi.resize(ns * na, cfg.d);
  st.rep.mu_pi.resize(ns * na, cfg.d);
  init_factor(rng, st.rep.phi);
  init_factor(rng, st.rep.mu_pi);
  if (init) {
    require(init->d == cfg.d && init->phi.rows() == ns * na && init->phi.cols() == cfg.d &&
                init->mu_pi.rows() == ns * na && init->mu_pi.cols() == cfg.d,
            "replearn: warm start does not match the configured shape");
    st.rep.phi = init->phi;
    st.rep.mu_pi = init->mu_pi;
  }
  st.rep.q_pib = q_pib;
  st.cur.reserve(ds.n());
  st.s_next.reserve(ds.n());
  for (const auto& t : ds.transitions) {
    st.cur.push_back(t.s * na + t.a);
    st.s_next.push_back(t.s_next);
  }
  return st;
}

/// Batch of sample indices: the whole dataset when batch_size >= N, otherwise uniform draws.
inline void draw_batch(Rng& rng, std::size_t n, int batch_size, std::vector<std::size_t>& out) {
  out.clear();
  if (static_cast<std::size_t>(batch_size) >= n) {
    out.resize(n);
    std::iota(out.begin(), out.end(), std::size_t{0});
    return;
  }
  for (int i = 0; i < batch_size; ++i) out.push_back(uniform_index(rng, n));
}

}  // namespace detail

/// Least-squares spectral learning by mini-batch SGD on
///   E_{x ~ d^pi_b, y~ ~ d^pi_b}[(phi(x)^T mu(y~))^2] - 2 E_{x ~ d^pi_b, y ~ P^pi(.|x)}[phi(x)^T mu(y)].
/// Positive pairs take (s,a,s') from the data with a' ~ pi(.|s'); independent pairs match each batch
/// element with its successor in a random permutation of the batch (no self-pairs).
inline SpectralRep ols_replearn(const TransitionDataset& ds, const Policy& target, const ReplearnConfig& cfg,
                                const Vec& q_pib, const std::optional<SpectralRep>& init = std::nullopt) {
  detail::require(cfg.method == ReplearnMethod::ols, "ols_replearn: config method must be ols");
  Rng rng(cfg.seed);
  auto st = detail::sgd_setup(ds, target, cfg, q_pib, rng, init);
  Mat& phi = st.rep.phi;
  Mat& mu = st.rep.mu_pi;
  const int na = target.n_actions();
  Mat gphi(phi.rows(), phi.cols());
  Mat gmu(mu.rows(), mu.cols());
  std::vector<std::size_t> batch;
  std::vector<int> order;
  for (int step = 0; step < cfg.steps; ++step) {
    detail::draw_batch(rng, ds.n(), cfg.batch_size, batch);
    const int b = static_cast<int>(batch.size());
    gphi.setZero();
    gmu.setZero();
    double loss = 0.0;
    for (int i = 0; i < b; ++i) {
      const std::size_t k = batch[i];
      const int x = st.cur[k];
      const int sp = st.s_next[k];
      const int y = sp * na + sample_categorical(rng, target.probs.row(sp));
      const double f = phi.row(x).dot(mu.row(y));
      loss -= 2.0 * f;
      gphi.row(x) -= 2.0 * mu.row(y);
      gmu.row(y) -= 2.0 * phi.row(x);
    }
    if (b > 1) {
      order.resize(b);
      std::iota(order.begin(), order.end(), 0);
      shuffle(rng, order);
      for (int i = 0; i < b; ++i) {
        const int x = st.cur[batch[order[i]]];
        const int y = st.cur[batch[order[(i + 1) % b]]];
        const double f = phi.row(x).dot(mu.row(y));
        loss += f * f;
        gphi.row(x) += 2.0 * f * mu.row(y);
        gmu.row(y) += 2.0 * f * phi.row(x);
      }
    }
    if (!std::isfinite(loss)) throw DivergenceError("ols_replearn: objective became non-finite at step " +
                                                    std::to_string(step));
    const double eta = cfg.step_size / b;
    phi -= eta * gphi;
    mu -= eta * gmu;
  }
  if (!phi.allFinite() || !mu.allFinite()) throw DivergenceError("ols_replearn: features became non-finite");
  return st.rep;
}

/// Binary noise-contrastive spectral learning by mini-batch SGD on
///   E_pos[log(1 + 1/f)] + E_neg[log(1 + f)],   f = max(phi(x)^T mu(y), nce_clamp),
/// with one negative per positive, its (s',a') resampled from the dataset's (s,a) pairs.
/// The positive term's gradient is taken at max(f, kNceGradFloor), so collapsed pairs keep a bounded push
/// upward instead of a 1/f spike; the negative term is differentiated exactly. A warm start replaces the
/// random initial factors.
inline SpectralRep nce_replearn(const TransitionDataset& ds, const Policy& target, const ReplearnConfig& cfg,
                                const Vec& q_pib, const std::optional<SpectralRep>& init = std::nullopt) {
  detail::require(cfg.method == ReplearnMethod::nce, "nce_replearn: config method must be nce");
  Rng rng(cfg.seed);
  auto st = detail::sgd_setup(ds, target, cfg, q_pib, rng, init);
  Mat& phi = st.rep.phi;
  Mat& mu = st.rep.mu_pi;
  const int na = target.n_actions();
  Mat gphi(phi.rows(), phi.cols());
  Mat gmu(mu.rows(), mu.cols());
  std::vector<std::size_t> batch;
  for (int step = 0; step < cfg.steps; ++step) {
    detail::draw_batch(rng, ds.n(), cfg.batch_size, batch);
    const int b = static_cast<int>(batch.size());
    gphi.setZero();
    gmu.setZero();
    double loss = 0.0;
    for (int i = 0; i < b; ++i) {
      const std::size_t k = batch[i];
      const int x = st.cur[k];
      const int sp = st.s_next[k];
      const int y_pos = sp * na + sample_categorical(rng, target.probs.row(sp));
      const int y_neg = st.cur[uniform_index(rng, ds.n())];

      const double raw_pos = phi.row(x).dot(mu.row(y_pos));
      const double f_pos = std::max(raw_pos, cfg.nce_clamp);
      loss += std::log1p(1.0 / f_pos);
      const double f_grad = std::max(raw_pos, std::max(cfg.nce_clamp, kNceGradFloor));
      const double g_pos = -1.0 / (f_grad * (1.0 + f_grad));
      gphi.row(x) += g_pos * mu.row(y_pos);
      gmu.row(y_pos) += g_pos * phi.row(x);

      const double raw_neg = phi.row(x).dot(mu.row(y_neg));
      const double f_neg = std::max(raw_neg, cfg.nce_clamp);
      loss += std::log1p(f_neg);
      if (raw_neg > cfg.nce_clamp) {
        const double g_neg = 1.0 / (1.0 + f_neg);
        gphi.row(x) += g_neg * mu.row(y_neg);
        gmu.row(y_neg) += g_neg * phi.row(x);
      }
    }
    if (!std::isfinite(loss) || !gphi.allFinite() || !gmu.allFinite())
      throw DivergenceError("nce_replearn: loss became non-finite at step " + std::to_string(step));
    const double eta = cfg.step_size / b;
    phi -= eta * gphi;
    mu -= eta * gmu;
  }
  if (!phi.allFinite() || !mu.allFinite()) throw DivergenceError("nce_replearn: features became non-finite");
  return st.rep;
}

/// Dispatches on cfg.method. The svd method needs the exact tables and is not available here.
inline SpectralRep learn_representation(const TransitionDataset& ds, const Policy& target,
                                        const ReplearnConfig& cfg, const Vec& q_pib) {
  switch (cfg.method) {
    case ReplearnMethod::ols: return ols_replearn(ds, target, cfg, q_pib);
    case ReplearnMethod::nce: return nce_replearn(ds, target, cfg, q_pib);
    case ReplearnMethod::svd: break;
  }
  throw ArgumentError("learn_representation: svd requires exact tables, use svd_representation");
}

/// One-hot features: phi = mu_pi = I. Turns the spectral estimator into tabular DICE.
inline SpectralRep identity_rep(int n_states, int n_actions, const Vec& q_pib) {
  SpectralRep rep;
  rep.n_states = n_states;
  rep.n_actions = n_actions;
  rep.d = n_states * n_actions;
  rep.phi = Mat::Identity(rep.d, rep.d);
  rep.mu_pi = Mat::Identity(rep.d, rep.d);
  rep.q_pib = q_pib;
  return rep;
}

}  // namespace sdice
