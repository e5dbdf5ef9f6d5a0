// SPDX-License-Identifier: Apache-2.0
//
// Numerics and statistics primitives shared by the model, the analyses and
// the intervention harness. Statistics always run in double precision; the
// routing primitives are templated so the model can use them in float.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "stmoe/error.hpp"

namespace stmoe {

using Vec = std::vector<double>;

inline constexpr double kNormEps = 1e-8;
inline constexpr double kKlFloor = 1e-10;

// splitmix64-based generator. Every draw is defined bit-for-bit here so
// seeded runs do not depend on the standard library's distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n), unbiased via rejection.
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t r = next_u64();
    while (r >= limit) r = next_u64();
    return r % n;
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * M_PI * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * M_PI * u2);
  }

  template <class It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      const auto j = below(i);
      std::iter_swap(first + (i - 1), first + j);
    }
  }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Named sub-seed: derive_seed(seed, "bootstrap") etc.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view name);

// ---------------------------------------------------------------------------
// Vector primitives (templated for model use)

template <class T>
T dot(std::span<const T> a, std::span<const T> b) {
  T acc = 0;
  const std::size_t n = a.size();
#pragma omp simd reduction(+ : acc)
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <class T>
T norm2(std::span<const T> a) {
  return std::sqrt(dot(a, a));
}

template <class T>
std::vector<T> l2_normalize(std::span<const T> v) {
  const T n = norm2(v);
  if (!(static_cast<double>(n) > kNormEps)) {
    throw Error(Errc::NearZeroNorm, "l2_normalize: norm " + std::to_string(static_cast<double>(n)));
  }
  std::vector<T> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / n;
  return out;
}

template <class T>
T cosine_sim(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw Error(Errc::LengthMismatch, "cosine_sim");
  const T na = norm2(a);
  const T nb = norm2(b);
  if (!(static_cast<double>(na) > kNormEps) || !(static_cast<double>(nb) > kNormEps)) {
    throw Error(Errc::NearZeroNorm, "cosine_sim");
  }
  const T c = dot(a, b) / (na * nb);
  return std::clamp(c, T(-1), T(1));
}

// softmax(tau * scores). tau multiplies: cosine scores live in [-1, 1], so
// tau sharpens. tau == 0 gives an exactly uniform distribution.
template <class T>
std::vector<T> softmax_temp(std::span<const T> scores, double tau) {
  std::vector<T> out(scores.size());
  if (scores.empty()) return out;
  if (tau < 0) throw Error(Errc::OutOfRange, "softmax_temp: tau < 0");
  if (tau == 0.0) {
    std::fill(out.begin(), out.end(), T(1) / static_cast<T>(scores.size()));
    return out;
  }
  const T mx = *std::max_element(scores.begin(), scores.end());
  T sum = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out[i] = std::exp(static_cast<T>(tau) * (scores[i] - mx));
    sum += out[i];
  }
  for (auto& v : out) v /= sum;
  return out;
}

template <class T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <class T>
T silu(T x) {
  return x * sigmoid(x);
}

// d/dx silu(x) = s + x s (1 - s)
template <class T>
T silu_grad(T x) {
  const T s = sigmoid(x);
  return s + x * s * (T(1) - s);
}

// Indices of the k largest unblocked scores, descending, ties to the lower
// index. `blocked` is a per-index mask (empty means nothing blocked).
template <class T>
std::vector<int> top_k(std::span<const T> scores, int k, std::span<const char> blocked = {}) {
  std::vector<int> cand;
  cand.reserve(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!blocked.empty() && blocked[i]) continue;
    cand.push_back(static_cast<int>(i));
  }
  if (k < 0 || static_cast<std::size_t>(k) > cand.size()) {
    throw Error(Errc::InsufficientCandidates,
                "top_k: need " + std::to_string(k) + ", have " + std::to_string(cand.size()));
  }
  auto better = [&](int a, int b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  };
  std::partial_sort(cand.begin(), cand.begin() + k, cand.end(), better);
  cand.resize(static_cast<std::size_t>(k));
  return cand;
}

// Convenience overload taking an explicit blocked index list.
std::vector<int> top_k_blocked(std::span<const double> scores, int k, std::span<const int> blocked);

// ---------------------------------------------------------------------------
// Double-precision numerics and statistics

Vec layer_norm(std::span<const double> v, std::span<const double> gain, std::span<const double> bias,
               double eps = 1e-5);

// KL(p || q) with both arguments floored at 1e-10 inside the log, so
// KL(p, p) is exactly 0. Result is clamped at 0.
double kl_divergence(std::span<const double> p, std::span<const double> q);

// G = sum_ij |x_i - x_j| / (2 n sum x)
double gini(std::span<const double> counts);

double entropy_nats(std::span<const double> p);

// |A ∩ B| / |A ∪ B|; duplicates ignored, jaccard({}, {}) = 1.
double jaccard(std::span<const int> a, std::span<const int> b);

enum class Metric { Cosine, Euclidean };

double distance(std::span<const double> a, std::span<const double> b, Metric metric);

// Mean silhouette; points with no same-label neighbour score 0.
double silhouette(const std::vector<Vec>& points, std::span<const int> labels, Metric metric);

// Same as above over a precomputed row-major n x n distance matrix.
double silhouette_from_distances(std::span<const double> dist, std::size_t n, std::span<const int> labels);

struct PermutationResult {
  double observed = 0.0;
  double p_value = 1.0;
  int n_perm = 0;
};

// p = (1 + #{stat(permuted labels) >= observed}) / (1 + n_perm)
PermutationResult permutation_test(const std::function<double(std::span<const int>)>& stat,
                                   std::span<const int> labels, int n_perm, std::uint64_t seed);

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

// Percentile bootstrap with the inverted-CDF quantile, so both endpoints are
// realised resample statistics. `stat` receives resampled indices.
Interval bootstrap_ci(std::size_t n, const std::function<double(std::span<const std::size_t>)>& stat,
                      int n_boot, double level, std::uint64_t seed);
Interval bootstrap_ci(std::span<const double> values, int n_boot = 500, double level = 0.95,
                      std::uint64_t seed = 0);

// Inverted-CDF (type 1) quantile of sorted data.
double quantile_sorted_type1(std::span<const double> sorted, double q);
// Linear-interpolation (type 7) quantile; used for medians and IQRs.
double quantile(std::vector<double> values, double q);
double median(std::vector<double> values);

Vec average_ranks(std::span<const double> x);
double pearson(std::span<const double> x, std::span<const double> y);
double spearman(std::span<const double> x, std::span<const double> y);

struct SpearmanResult {
  double rho = 0.0;
  double p_value = 1.0;
};
// Two-sided permutation p-value: exact enumeration up to n = 8, seeded
// Monte Carlo (10000 shuffles) above.
SpearmanResult spearman_test(std::span<const double> x, std::span<const double> y, std::uint64_t seed = 0);

struct Contingency2x2 {
  std::int64_t a = 0, b = 0, c = 0, d = 0;
};

struct OddsRatio {
  double odds_ratio = 1.0;
  double p_value = 1.0;
};

// Haldane-Anscombe corrected OR, Fisher exact two-sided p.
OddsRatio odds_ratio(const Contingency2x2& t);
double fisher_exact_two_sided(std::int64_t a, std::int64_t b, std::int64_t c, std::int64_t d);

// Benjamini-Hochberg step-up; returns rejection flags.
std::vector<bool> bh_fdr(std::span<const double> pvals, double alpha);
// BH adjusted p-values (q-values), monotone and capped at 1.
Vec bh_adjust(std::span<const double> pvals);

Vec finite_diff_grad(const std::function<double(std::span<const double>)>& f, std::span<const double> x,
                     double h = 1e-4);

}  // namespace stmoe
