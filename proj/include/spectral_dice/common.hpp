#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sdice {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Error hierarchy. Every failure in the library is reported by throwing one of these.

struct ArgumentError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// The target policy visits a state-action pair the behavior data never covers.
struct CoverageError : std::domain_error {
  using std::domain_error::domain_error;
};

/// An iterative learner or solver produced a non-finite objective.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RankDeficiencyError : std::runtime_error {
  RankDeficiencyError(const std::string& what, int null_dim)
      : std::runtime_error(what + " (null-space dimension " + std::to_string(null_dim) + ")"),
        null_space_dim(null_dim) {}
  int null_space_dim;
};

struct DegenerateRowError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ArgumentError(msg);
}

inline bool all_finite(const Mat& m) { return m.allFinite(); }

}  // namespace detail

/// Random source used throughout. All draws go through the helpers below, which only rely on
/// the raw 64-bit output of mt19937_64, so sequences are identical across standard libraries.
using Rng = std::mt19937_64;

/// Uniform double in [0, 1).
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Uniform double in (0, 1].
inline double uniform01_open_low(Rng& rng) { return 1.0 - uniform01(rng); }

/// Unbiased integer in [0, n).
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t x = rng();
  while (x >= limit) x = rng();
  return static_cast<std::size_t>(x % bound);
}

/// Draws an index from a discrete distribution given as a row of weights summing to 1.
template <typename Row>
int sample_categorical(Rng& rng, const Row& probs) {
  const double u = uniform01(rng);
  double acc = 0.0;
  const int n = static_cast<int>(probs.size());
  int last_positive = 0;
  for (int i = 0; i < n; ++i) {
    const double p = probs(i);
    if (p <= 0.0) continue;
    last_positive = i;
    acc += p;
    if (u < acc) return i;
  }
  return last_positive;  // rounding slack
}

/// Number of failures before the first success, success probability p: P(t) = p (1-p)^t.
inline int sample_geometric(Rng& rng, double p) {
  if (p >= 1.0) return 0;
  const double u = uniform01_open_low(rng);
  return static_cast<int>(std::floor(std::log(u) / std::log1p(-p)));
}

/// Uniform draw from the probability simplex of dimension n (Dirichlet with unit concentration).
inline Vec sample_simplex(Rng& rng, int n) {
  Vec v(n);
  for (int i = 0; i < n; ++i) v(i) = -std::log(uniform01_open_low(rng));
  return v / v.sum();
}

/// Fisher-Yates shuffle with the portable index sampler.
template <typename T>
void shuffle(Rng& rng, std::vector<T>& items) {
  for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[uniform_index(rng, i)]);
}

/// SplitMix64 finalizer; used to derive independent stream seeds from structured keys.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) { return mix_seed(mix_seed(a) ^ (b + 0x632be59bd9b4e019ULL)); }

}  // namespace sdice
