// SPDX-License-Identifier: Apache-2.0
#include "stmoe/core_math.hpp"

#include <map>
#include <set>
#include <string>

#include "stmoe/kernels.hpp"

namespace stmoe {

const char* errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::NearZeroNorm: return "NearZeroNorm";
    case Errc::InsufficientCandidates: return "InsufficientCandidates";
    case Errc::LengthMismatch: return "LengthMismatch";
    case Errc::SupportMismatch: return "SupportMismatch";
    case Errc::EmptyInput: return "EmptyInput";
    case Errc::AllZero: return "AllZero";
    case Errc::SingleGroup: return "SingleGroup";
    case Errc::ZeroVariance: return "ZeroVariance";
    case Errc::OutOfRange: return "OutOfRange";
    case Errc::BadIndex: return "BadIndex";
    case Errc::OutOfVocab: return "OutOfVocab";
    case Errc::SequenceTooLong: return "SequenceTooLong";
    case Errc::NonFiniteLoss: return "NonFiniteLoss";
    case Errc::VersionMismatch: return "VersionMismatch";
    case Errc::Truncated: return "Truncated";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::Io: return "Io";
    case Errc::Config: return "Config";
    case Errc::TokenAbsent: return "TokenAbsent";
    case Errc::NoSeedsInVocab: return "NoSeedsInVocab";
    case Errc::SingletonCluster: return "SingletonCluster";
    case Errc::InsufficientClassCounts: return "InsufficientClassCounts";
    case Errc::InvalidSpec: return "InvalidSpec";
  }
  return "Unknown";
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view name) {
  // FNV-1a over the name, mixed with the parent seed through splitmix.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const char ch : name) {
    h ^= static_cast<unsigned char>(ch);
    h *= 0x100000001b3ULL;
  }
  Rng mix(seed ^ h);
  return mix.next_u64();
}

std::vector<int> top_k_blocked(std::span<const double> scores, int k, std::span<const int> blocked) {
  std::vector<char> mask(scores.size(), 0);
  for (const int b : blocked) {
    if (b < 0 || static_cast<std::size_t>(b) >= scores.size()) throw Error(Errc::BadIndex, "top_k blocked index");
    mask[static_cast<std::size_t>(b)] = 1;
  }
  return top_k<double>(scores, k, mask);
}

Vec layer_norm(std::span<const double> v, std::span<const double> gain, std::span<const double> bias, double eps) {
  if (v.size() != gain.size() || v.size() != bias.size()) throw Error(Errc::LengthMismatch, "layer_norm");
  if (!(eps > 0.0)) throw Error(Errc::OutOfRange, "layer_norm: eps must be positive");
  if (v.empty()) return {};
  const double n = static_cast<double>(v.size());
  double mean = 0.0;
  for (const double x : v) mean += x;
  mean /= n;
  double var = 0.0;
  for (const double x : v) var += (x - mean) * (x - mean);
  var /= n;
  const double rstd = 1.0 / std::sqrt(var + eps);
  Vec out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - mean) * rstd * gain[i] + bias[i];
  return out;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw Error(Errc::SupportMismatch, "kl_divergence");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    kl += p[i] * (std::log(std::max(p[i], kKlFloor)) - std::log(std::max(q[i], kKlFloor)));
  }
  return std::max(kl, 0.0);
}

double gini(std::span<const double> counts) {
  if (counts.empty()) throw Error(Errc::EmptyInput, "gini");
  double total = 0.0;
  for (const double c : counts) {
    if (c < 0.0) throw Error(Errc::OutOfRange, "gini: negative count");
    total += c;
  }
  if (!(total > 0.0)) throw Error(Errc::AllZero, "gini");
  // Sorted form of sum_ij |x_i - x_j|: 2 * sum_i (2i - n + 1) x_(i).
  Vec sorted(counts.begin(), counts.end());
  std::sort(sorted.begin(), sorted.end());
  const double n = static_cast<double>(sorted.size());
  double pair_sum = 0.0;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    pair_sum += (2.0 * static_cast<double>(i) - n + 1.0) * sorted[i];
  }
  pair_sum *= 2.0;
  return pair_sum / (2.0 * n * total);
}

double entropy_nats(std::span<const double> p) {
  double h = 0.0;
  for (const double x : p) {
    if (x > 0.0) h -= x * std::log(x);
  }
  return std::max(h, 0.0);
}

double jaccard(std::span<const int> a, std::span<const int> b) {
  const std::set<int> sa(a.begin(), a.end());
  const std::set<int> sb(b.begin(), b.end());
  if (sa.empty() && sb.empty()) return 1.0;
  std::size_t inter = 0;
  for (const int x : sa) inter += sb.count(x);
  const std::size_t uni = sa.size() + sb.size() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double distance(std::span<const double> a, std::span<const double> b, Metric metric) {
  if (a.size() != b.size()) throw Error(Errc::LengthMismatch, "distance");
  if (metric == Metric::Cosine) return 1.0 - cosine_sim<double>(a, b);
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(acc);
}

namespace {

// Maps arbitrary labels onto 0..g-1 in order of first appearance.
std::vector<int> dense_labels(std::span<const int> labels, int& n_groups) {
  std::map<int, int> remap;
  std::vector<int> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto [it, inserted] = remap.try_emplace(labels[i], static_cast<int>(remap.size()));
    out[i] = it->second;
  }
  n_groups = static_cast<int>(remap.size());
  return out;
}

}  // namespace

double silhouette_from_distances(std::span<const double> dist, std::size_t n, std::span<const int> labels) {
  if (labels.size() != n || dist.size() != n * n) throw Error(Errc::LengthMismatch, "silhouette");
  int groups = 0;
  const auto dense = dense_labels(labels, groups);
  if (groups < 2) throw Error(Errc::SingleGroup, "silhouette needs at least two groups");
  Vec per_point(n);
  if (kernels::use_parallel(n * n))
    kernels::parallel::silhouette_samples(dist, n, dense, groups, {}, per_point);
  else
    kernels::serial::silhouette_samples(dist, n, dense, groups, {}, per_point);
  double sum = 0.0;
  for (const double s : per_point) sum += s;
  return sum / static_cast<double>(n);
}

double silhouette(const std::vector<Vec>& points, std::span<const int> labels, Metric metric) {
  const std::size_t n = points.size();
  if (labels.size() != n) throw Error(Errc::LengthMismatch, "silhouette");
  if (n == 0) throw Error(Errc::EmptyInput, "silhouette");
  const std::size_t dim = points.front().size();
  Vec flat(n * dim);
  for (std::size_t i = 0; i < n; ++i) {
    if (points[i].size() != dim) throw Error(Errc::LengthMismatch, "silhouette point dims");
    if (metric == Metric::Cosine && !(norm2<double>(points[i]) > kNormEps))
      throw Error(Errc::NearZeroNorm, "silhouette point");
    std::copy(points[i].begin(), points[i].end(), flat.begin() + static_cast<std::ptrdiff_t>(i * dim));
  }
  Vec dist(n * n);
  const bool par = kernels::use_parallel(n * n * dim);
  if (metric == Metric::Cosine) {
    par ? kernels::parallel::cosine_distance_matrix(flat, n, dim, dist)
        : kernels::serial::cosine_distance_matrix(flat, n, dim, dist);
  } else {
    par ? kernels::parallel::euclidean_distance_matrix(flat, n, dim, dist)
        : kernels::serial::euclidean_distance_matrix(flat, n, dim, dist);
  }
  return silhouette_from_distances(dist, n, labels);
}

PermutationResult permutation_test(const std::function<double(std::span<const int>)>& stat,
                                   std::span<const int> labels, int n_perm, std::uint64_t seed) {
  if (n_perm < 1) throw Error(Errc::OutOfRange, "permutation_test: n_perm < 1");
  PermutationResult res;
  res.n_perm = n_perm;
  res.observed = stat(labels);
  std::vector<int> perm(labels.begin(), labels.end());
  Rng rng(seed);
  int at_least = 0;
  for (int i = 0; i < n_perm; ++i) {
    rng.shuffle(perm.begin(), perm.end());
    if (stat(perm) >= res.observed) ++at_least;
  }
  res.p_value = (1.0 + at_least) / (1.0 + n_perm);
  return res;
}

double quantile_sorted_type1(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw Error(Errc::EmptyInput, "quantile");
  const double n = static_cast<double>(sorted.size());
  auto rank = static_cast<long>(std::ceil(q * n - 1e-12));
  rank = std::clamp(rank, 1L, static_cast<long>(sorted.size()));
  return sorted[static_cast<std::size_t>(rank - 1)];
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw Error(Errc::EmptyInput, "quantile");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

double median(std::vector<double> values) { return quantile(std::move(values), 0.5); }

Interval bootstrap_ci(std::size_t n, const std::function<double(std::span<const std::size_t>)>& stat, int n_boot,
                      double level, std::uint64_t seed) {
  if (n == 0) throw Error(Errc::EmptyInput, "bootstrap_ci");
  if (n_boot < 1) throw Error(Errc::OutOfRange, "bootstrap_ci: n_boot < 1");
  if (!(level > 0.0 && level < 1.0)) throw Error(Errc::OutOfRange, "bootstrap_ci: level");
  Rng rng(seed);
  std::vector<std::size_t> idx(n);
  Vec stats(static_cast<std::size_t>(n_boot));
  for (auto& s : stats) {
    for (auto& i : idx) i = static_cast<std::size_t>(rng.below(n));
    s = stat(idx);
  }
  std::sort(stats.begin(), stats.end());
  const double tail = (1.0 - level) / 2.0;
  return {quantile_sorted_type1(stats, tail), quantile_sorted_type1(stats, 1.0 - tail)};
}

Interval bootstrap_ci(std::span<const double> values, int n_boot, double level, std::uint64_t seed) {
  const Vec copy(values.begin(), values.end());
  return bootstrap_ci(
      copy.size(),
      [&copy](std::span<const std::size_t> idx) {
        double s = 0.0;
        for (const auto i : idx) s += copy[i];
        return s / static_cast<double>(idx.size());
      },
      n_boot, level, seed);
}

Vec average_ranks(std::span<const double> x) {
  const std::size_t n = x.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  Vec ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw Error(Errc::LengthMismatch, "pearson");
  const double n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw Error(Errc::ZeroVariance, "pearson");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw Error(Errc::LengthMismatch, "spearman");
  if (x.size() < 3) throw Error(Errc::LengthMismatch, "spearman needs at least 3 points");
  const Vec rx = average_ranks(x);
  const Vec ry = average_ranks(y);
  return pearson(rx, ry);
}

SpearmanResult spearman_test(std::span<const double> x, std::span<const double> y, std::uint64_t seed) {
  SpearmanResult res;
  res.rho = spearman(x, y);
  const Vec rx = average_ranks(x);
  Vec ry = average_ranks(y);
  const double obs = std::abs(res.rho) - 1e-12;
  long hits = 0, total = 0;
  if (x.size() <= 8) {
    std::sort(ry.begin(), ry.end());
    do {
      ++total;
      if (std::abs(pearson(rx, ry)) >= obs) ++hits;
    } while (std::next_permutation(ry.begin(), ry.end()));
    // next_permutation enumerates distinct arrangements; ties shrink the set
    // uniformly so the ratio is still the exact permutation p-value.
    res.p_value = static_cast<double>(hits) / static_cast<double>(total);
  } else {
    Rng rng(seed);
    constexpr int kShuffles = 10000;
    for (int i = 0; i < kShuffles; ++i) {
      rng.shuffle(ry.begin(), ry.end());
      if (std::abs(pearson(rx, ry)) >= obs) ++hits;
    }
    res.p_value = (1.0 + static_cast<double>(hits)) / (1.0 + kShuffles);
  }
  return res;
}

namespace {

double log_choose(std::int64_t n, std::int64_t k) {
  return std::lgamma(static_cast<double>(n) + 1.0) - std::lgamma(static_cast<double>(k) + 1.0) -
         std::lgamma(static_cast<double>(n - k) + 1.0);
}

}  // namespace

double fisher_exact_two_sided(std::int64_t a, std::int64_t b, std::int64_t c, std::int64_t d) {
  if (a < 0 || b < 0 || c < 0 || d < 0) throw Error(Errc::OutOfRange, "fisher: negative count");
  const std::int64_t r1 = a + b;
  const std::int64_t r2 = c + d;
  const std::int64_t c1 = a + c;
  const std::int64_t n = r1 + r2;
  if (n == 0) return 1.0;
  const std::int64_t lo = std::max<std::int64_t>(0, c1 - r2);
  const std::int64_t hi = std::min(r1, c1);
  const double log_denom = log_choose(n, c1);
  auto log_p = [&](std::int64_t x) { return log_choose(r1, x) + log_choose(r2, c1 - x) - log_denom; };
  const double lp_obs = log_p(a);
  double p = 0.0;
  for (std::int64_t x = lo; x <= hi; ++x) {
    const double lp = log_p(x);
    if (lp <= lp_obs + 1e-7) p += std::exp(lp);
  }
  return std::clamp(p, 0.0, 1.0);
}

OddsRatio odds_ratio(const Contingency2x2& t) {
  if (t.a < 0 || t.b < 0 || t.c < 0 || t.d < 0) throw Error(Errc::OutOfRange, "odds_ratio: negative count");
  double a = static_cast<double>(t.a), b = static_cast<double>(t.b);
  double c = static_cast<double>(t.c), d = static_cast<double>(t.d);
  if (t.a == 0 || t.b == 0 || t.c == 0 || t.d == 0) {
    a += 0.5;
    b += 0.5;
    c += 0.5;
    d += 0.5;
  }
  OddsRatio out;
  out.odds_ratio = (a * d) / (b * c);
  out.p_value = fisher_exact_two_sided(t.a, t.b, t.c, t.d);
  if (out.p_value <= 0.0) out.p_value = std::numeric_limits<double>::min();
  return out;
}

Vec bh_adjust(std::span<const double> pvals) {
  const std::size_t m = pvals.size();
  for (const double p : pvals)
    if (!(p >= 0.0 && p <= 1.0)) throw Error(Errc::OutOfRange, "bh: p-value outside [0,1]");
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return pvals[a] < pvals[b]; });
  Vec q(m);
  double running = 1.0;
  for (std::size_t r = m; r-- > 0;) {
    const double v = pvals[order[r]] * static_cast<double>(m) / static_cast<double>(r + 1);
    running = std::min(running, v);
    q[order[r]] = std::min(running, 1.0);
  }
  return q;
}

std::vector<bool> bh_fdr(std::span<const double> pvals, double alpha) {
  const std::size_t m = pvals.size();
  for (const double p : pvals)
    if (!(p >= 0.0 && p <= 1.0)) throw Error(Errc::OutOfRange, "bh: p-value outside [0,1]");
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return pvals[a] < pvals[b]; });
  // Largest rank r with p_(r) <= r/m * alpha; reject ranks 1..r.
  std::size_t cutoff = 0;
  for (std::size_t r = 1; r <= m; ++r) {
    if (pvals[order[r - 1]] <= static_cast<double>(r) / static_cast<double>(m) * alpha) cutoff = r;
  }
  std::vector<bool> reject(m, false);
  for (std::size_t r = 0; r < cutoff; ++r) reject[order[r]] = true;
  return reject;
}

Vec finite_diff_grad(const std::function<double(std::span<const double>)>& f, std::span<const double> x, double h) {
  if (!(h > 0.0)) throw Error(Errc::OutOfRange, "finite_diff_grad: h must be positive");
  Vec xp(x.begin(), x.end());
  Vec g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = xp[i];
    xp[i] = orig + h;
    const double fp = f(xp);
    xp[i] = orig - h;
    const double fm = f(xp);
    xp[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

}  // namespace stmoe
