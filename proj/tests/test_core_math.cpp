// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <map>
#include <set>

#include "doctest.h"
#include "oracles.hpp"
#include "stmoe/core_math.hpp"

using namespace stmoe;

namespace {

Vec random_vec(Rng& rng, std::size_t n, double scale = 1.0) {
  Vec v(n);
  for (auto& x : v) x = rng.normal() * scale;
  return v;
}

Vec random_dist(Rng& rng, std::size_t n) {
  Vec v(n);
  double s = 0;
  for (auto& x : v) {
    x = rng.uniform() + 1e-3;
    s += x;
  }
  for (auto& x : v) x /= s;
  return v;
}

template <class Fn>
void require_errc(Errc code, Fn&& fn) {
  try {
    fn();
    FAIL("expected stmoe::Error");
  } catch (const Error& e) {
    CHECK(e.code() == code);
  }
}

}  // namespace

TEST_CASE("l2_normalize") {
  const auto v = l2_normalize<double>(Vec{3, 4});
  CHECK(v[0] == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(v[1] == doctest::Approx(0.8).epsilon(1e-12));
  const Vec unit{0, 1, 0};
  CHECK(l2_normalize<double>(unit) == unit);
  require_errc(Errc::NearZeroNorm, [] { l2_normalize<double>(Vec{0, 0}); });
}

TEST_CASE("cosine_sim basic cases") {
  const Vec a{1, 2, 3};
  const Vec neg{-1, -2, -3};
  CHECK(cosine_sim<double>(a, a) == doctest::Approx(1.0));
  CHECK(cosine_sim<double>(Vec{1, 0}, Vec{0, 1}) == 0.0);
  CHECK(cosine_sim<double>(a, neg) == doctest::Approx(-1.0));
  require_errc(Errc::NearZeroNorm, [] { cosine_sim<double>(Vec{0, 0}, Vec{1, 0}); });
}

TEST_CASE("softmax_temp") {
  for (double tau : {0.0, 1.0, 30.0}) {
    const auto p = softmax_temp<double>(Vec{0.3, 0.3, 0.3, 0.3}, tau);
    for (double x : p) CHECK(x == doctest::Approx(0.25));
  }
  const auto u = softmax_temp<double>(Vec{5, -2, 1}, 0.0);
  for (double x : u) CHECK(x == 1.0 / 3.0);
  const auto p = softmax_temp<double>(Vec{1, 0}, 1.0);
  CHECK(p[0] == doctest::Approx(std::exp(1.0) / (std::exp(1.0) + 1.0)).epsilon(1e-14));
  CHECK(p[1] == doctest::Approx(1.0 / (std::exp(1.0) + 1.0)).epsilon(1e-14));

  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const Vec s = random_vec(rng, 6);
    Vec shifted = s;
    for (auto& x : shifted) x += 12.5;
    const auto a = softmax_temp<double>(s, 30.0);
    const auto b = softmax_temp<double>(shifted, 30.0);
    double sum = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i] >= 0.0);
      CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-9));
      sum += a[i];
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("silu") {
  CHECK(silu(0.0) == 0.0);
  CHECK(std::fabs(silu(40.0) - 40.0) < 1e-6);
  CHECK(silu(1.0) == doctest::Approx(0.7310585786300049).epsilon(1e-12));
  // derivative against central differences
  for (double x : {-3.0, -0.5, 0.0, 0.7, 4.0}) {
    const double fd = (silu(x + 1e-6) - silu(x - 1e-6)) / 2e-6;
    CHECK(silu_grad(x) == doctest::Approx(fd).epsilon(1e-6));
  }
}

TEST_CASE("layer_norm") {
  const Vec ones(4, 1.0), zeros(4, 0.0);
  for (double x : layer_norm(Vec{2, 2, 2, 2}, ones, zeros)) CHECK(x == 0.0);
  const Vec z{-1.3416407864998738, -0.4472135954999579, 0.4472135954999579, 1.3416407864998738};
  const auto y = layer_norm(z, ones, zeros);
  for (std::size_t i = 0; i < 4; ++i) CHECK(y[i] == doctest::Approx(z[i]).epsilon(1e-5));
  // [1,3]: mean 2, variance 1, so (x-2)/sqrt(1+eps)
  const auto two = layer_norm(Vec{1, 3}, Vec{1, 1}, Vec{0, 0});
  CHECK(two[0] == doctest::Approx(-1.0 / std::sqrt(1.0 + 1e-5)).epsilon(1e-12));
  CHECK(two[1] == doctest::Approx(1.0 / std::sqrt(1.0 + 1e-5)).epsilon(1e-12));
  require_errc(Errc::LengthMismatch, [] { layer_norm(Vec{1, 2}, Vec{1}, Vec{0, 0}); });
}

TEST_CASE("top_k") {
  CHECK(top_k<double>(Vec{1, 1, 1, 1}, 2) == std::vector<int>{0, 1});
  const Vec s{0.1, 0.9, 0.5, 0.7};
  CHECK(top_k_blocked(s, 2, std::vector<int>{1}) == std::vector<int>{3, 2});
  require_errc(Errc::InsufficientCandidates, [&] { top_k_blocked(s, 4, std::vector<int>{0}); });

  Rng rng(11);
  for (int trial = 0; trial < 500; ++trial) {
    Vec v = random_vec(rng, 8);
    // introduce ties now and then
    if (trial % 3 == 0) v[3] = v[5];
    std::set<int> blocked;
    if (trial % 4 == 0) blocked.insert(static_cast<int>(rng.below(8)));
    const std::vector<int> bl(blocked.begin(), blocked.end());
    CHECK(top_k_blocked(v, 3, bl) == oracle::topk_by_full_sort(v, 3, blocked));
  }
}

TEST_CASE("kl_divergence") {
  Rng rng(3);
  const Vec p = random_dist(rng, 5);
  CHECK(kl_divergence(p, p) == 0.0);
  CHECK(kl_divergence(Vec{1, 0}, Vec{0.5, 0.5}) == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  // zero in q is floored, stays finite
  CHECK(std::isfinite(kl_divergence(Vec{0.5, 0.5}, Vec{1.0, 0.0})));
  for (int i = 0; i < 1000; ++i) {
    const Vec a = random_dist(rng, 7), b = random_dist(rng, 7);
    CHECK(kl_divergence(a, b) >= 0.0);
  }
  require_errc(Errc::SupportMismatch, [] { kl_divergence(Vec{1}, Vec{0.5, 0.5}); });
}

TEST_CASE("gini") {
  CHECK(gini(Vec{3, 3, 3, 3}) == 0.0);
  CHECK(gini(Vec{1, 0, 0, 0}) == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(gini(Vec{5}) == 0.0);
  require_errc(Errc::AllZero, [] { gini(Vec{0, 0}); });
  Rng rng(5);
  for (int trial = 0; trial < 300; ++trial) {
    Vec c(1 + rng.below(8));
    for (auto& x : c) x = static_cast<double>(rng.below(20));
    c[0] += 1;
    CHECK(std::fabs(gini(c) - oracle::gini_pairwise(c)) < 1e-12);
    Vec scaled = c;
    for (auto& x : scaled) x *= 3.7;
    CHECK(gini(scaled) == doctest::Approx(gini(c)).epsilon(1e-12));
  }
}

TEST_CASE("entropy_nats") {
  const Vec uniform(1024, 1.0 / 1024.0);
  CHECK(entropy_nats(uniform) == doctest::Approx(6.9315).epsilon(1e-4));
  CHECK(entropy_nats(Vec{0, 1, 0}) == 0.0);
  CHECK(entropy_nats(Vec{0.5, 0.5}) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
}

TEST_CASE("jaccard") {
  const std::vector<int> a{1, 2, 3, 4};
  CHECK(jaccard(a, a) == 1.0);
  CHECK(jaccard(a, std::vector<int>{5, 6}) == 0.0);
  CHECK(jaccard(a, std::vector<int>{4, 7, 8, 9}) == doctest::Approx(1.0 / 7.0).epsilon(1e-15));
  CHECK(jaccard(std::vector<int>{}, std::vector<int>{}) == 1.0);
}

TEST_CASE("silhouette") {
  Rng rng(21);
  std::vector<Vec> pts;
  std::vector<int> lab;
  for (int i = 0; i < 20; ++i) {
    pts.push_back({100.0 + rng.normal() * 0.01, rng.normal() * 0.01});
    lab.push_back(0);
    pts.push_back({-100.0 + rng.normal() * 0.01, rng.normal() * 0.01});
    lab.push_back(1);
  }
  CHECK(silhouette(pts, lab, Metric::Euclidean) > 0.95);

  std::vector<Vec> blob;
  std::vector<int> rl;
  for (int i = 0; i < 200; ++i) {
    blob.push_back(random_vec(rng, 3));
    rl.push_back(static_cast<int>(rng.below(2)));
  }
  CHECK(std::fabs(silhouette(blob, rl, Metric::Euclidean)) < 0.1);

  require_errc(Errc::SingleGroup, [] {
    silhouette(std::vector<Vec>{{1, 0}, {0, 1}}, std::vector<int>{4, 4}, Metric::Euclidean);
  });
}

TEST_CASE("silhouette matches definition oracle on small instances") {
  Rng rng(99);
  for (int trial = 0; trial < 400; ++trial) {
    const std::size_t n = 2 + rng.below(7);  // 2..8
    std::vector<Vec> pts;
    std::vector<int> lab(n);
    for (std::size_t i = 0; i < n; ++i) pts.push_back(random_vec(rng, 3));
    for (std::size_t i = 0; i < n; ++i) lab[i] = static_cast<int>(rng.below(3));
    lab[0] = 0;
    lab[1] = 1;
    const bool cos = trial % 2 == 0;
    const double got = silhouette(pts, lab, cos ? Metric::Cosine : Metric::Euclidean);
    CHECK(std::fabs(got - oracle::silhouette(pts, lab, cos)) < 1e-12);
  }
}

TEST_CASE("permutation_test") {
  // perfectly separated groups, no permutation can beat the observed silhouette
  std::vector<Vec> pts;
  std::vector<int> lab;
  for (int i = 0; i < 10; ++i) {
    pts.push_back({10.0 + 0.01 * i, 0.0});
    lab.push_back(0);
    pts.push_back({-10.0 - 0.01 * i, 0.0});
    lab.push_back(1);
  }
  auto stat = [&](std::span<const int> l) { return silhouette(pts, l, Metric::Euclidean); };
  const auto r = permutation_test(stat, lab, 200, 42);
  CHECK(r.p_value == doctest::Approx(1.0 / 201.0).epsilon(1e-15));

  // determinism
  CHECK(permutation_test(stat, lab, 50, 9).p_value == permutation_test(stat, lab, 50, 9).p_value);

  // null labels: p large in the median
  Rng rng(1234);
  std::vector<double> ps;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Vec> blob;
    std::vector<int> rl;
    for (int i = 0; i < 30; ++i) {
      blob.push_back(random_vec(rng, 2));
      rl.push_back(i % 2);
    }
    auto s2 = [&](std::span<const int> l) { return silhouette(blob, l, Metric::Euclidean); };
    ps.push_back(permutation_test(s2, rl, 49, 100 + trial).p_value);
  }
  CHECK(median(ps) > 0.3);
}

TEST_CASE("permutation_test count matches oracle replay on small instances") {
  Rng rng(5150);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t n = 4 + rng.below(5);  // 4..8
    std::vector<Vec> pts;
    std::vector<int> lab(n);
    for (std::size_t i = 0; i < n; ++i) pts.push_back(random_vec(rng, 2));
    for (std::size_t i = 0; i < n; ++i) lab[i] = static_cast<int>(i % 2);
    std::vector<std::vector<int>> seen;
    auto spy = [&](std::span<const int> l) {
      seen.emplace_back(l.begin(), l.end());
      return silhouette(pts, l, Metric::Euclidean);
    };
    const auto r = permutation_test(spy, lab, 30, rng.next_u64());
    REQUIRE(seen.size() == 31);
    const double obs = oracle::silhouette(pts, seen[0], false);
    int ge = 0;
    for (std::size_t i = 1; i < seen.size(); ++i) {
      auto a = seen[i], b = lab;
      std::sort(a.begin(), a.end());
      std::sort(b.begin(), b.end());
      CHECK(a == b);  // each draw is a permutation of the labels
      if (oracle::silhouette(pts, seen[i], false) >= obs) ++ge;
    }
    CHECK(r.p_value == doctest::Approx((1.0 + ge) / 31.0).epsilon(1e-12));
  }
}

TEST_CASE("bootstrap_ci") {
  const Vec c(10, 2.5);
  const auto ci = bootstrap_ci(c, 500, 0.95, 1);
  CHECK(ci.lo == 2.5);
  CHECK(ci.hi == 2.5);
  const Vec v{1, 4, 2, 8, 5, 7};
  const auto a = bootstrap_ci(v, 300, 0.9, 77);
  const auto b = bootstrap_ci(v, 300, 0.9, 77);
  CHECK(a.lo == b.lo);
  CHECK(a.hi == b.hi);
  CHECK(a.lo <= a.hi);
  require_errc(Errc::EmptyInput, [] { bootstrap_ci(Vec{}, 10, 0.95, 0); });
}

TEST_CASE("bootstrap_ci agrees with exhaustive resample enumeration") {
  // All 5^5 resamples of 5 values, weighted equally, give the exact
  // bootstrap distribution of the mean.
  const Vec v{0.3, 1.1, 2.9, 4.2, 7.5};
  std::vector<double> all;
  for (int i0 = 0; i0 < 5; ++i0)
    for (int i1 = 0; i1 < 5; ++i1)
      for (int i2 = 0; i2 < 5; ++i2)
        for (int i3 = 0; i3 < 5; ++i3)
          for (int i4 = 0; i4 < 5; ++i4) all.push_back((v[i0] + v[i1] + v[i2] + v[i3] + v[i4]) / 5.0);
  std::sort(all.begin(), all.end());
  auto achievable = [&](double x) {
    return std::any_of(all.begin(), all.end(), [&](double y) { return std::fabs(x - y) < 1e-12; });
  };
  for (std::uint64_t seed = 0; seed < 16; ++seed) {
    const auto ci = bootstrap_ci(v, 16, 0.95, seed);
    CHECK(achievable(ci.lo));
    CHECK(achievable(ci.hi));
    CHECK(ci.lo >= all.front());
    CHECK(ci.hi <= all.back());
  }
  // With many resamples the endpoints converge to the exact type-1 quantiles.
  const double exact_lo = all[static_cast<std::size_t>(std::ceil(0.025 * all.size())) - 1];
  const double exact_hi = all[static_cast<std::size_t>(std::ceil(0.975 * all.size())) - 1];
  const auto big = bootstrap_ci(v, 200000, 0.95, 3);
  auto neighbour_index = [&](double x) {
    return std::lower_bound(all.begin(), all.end(), x - 1e-12) - all.begin();
  };
  CHECK(std::labs(neighbour_index(big.lo) - neighbour_index(exact_lo)) <= 40);
  CHECK(std::labs(neighbour_index(big.hi) - neighbour_index(exact_hi)) <= 40);
  CHECK(big.lo == doctest::Approx(exact_lo).epsilon(0.02));
  CHECK(big.hi == doctest::Approx(exact_hi).epsilon(0.02));
}

TEST_CASE("spearman") {
  const Vec x{1, 2, 3, 4, 5};
  CHECK(spearman(x, Vec{2, 4, 9, 10, 30}) == doctest::Approx(1.0));
  CHECK(spearman(x, Vec{5, 4, 3, 2, 1}) == doctest::Approx(-1.0));
  const Vec tx{1, 2, 2, 3, 4, 4}, ty{3, 1, 2, 2, 5, 6};
  CHECK(std::fabs(spearman(tx, ty) - oracle::spearman(tx, ty)) < 1e-12);
  require_errc(Errc::LengthMismatch, [] { spearman(Vec{1, 2, 3}, Vec{1, 2}); });
  require_errc(Errc::ZeroVariance, [] { spearman(Vec{1, 1, 1}, Vec{1, 2, 3}); });

  Rng rng(8);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 3 + rng.below(6);
    Vec a(n), b(n);
    for (auto& e : a) e = static_cast<double>(rng.below(5));
    for (auto& e : b) e = static_cast<double>(rng.below(5));
    a[0] = 0;
    a[1] = 4;
    b[0] = 1;
    b[1] = 3;
    CHECK(std::fabs(spearman(a, b) - oracle::spearman(a, b)) < 1e-12);
  }
  const auto res = spearman_test(x, Vec{1, 2, 3, 4, 5});
  CHECK(res.rho == doctest::Approx(1.0));
  CHECK(res.p_value == doctest::Approx(2.0 / 120.0).epsilon(1e-12));
}

TEST_CASE("odds_ratio and Fisher") {
  const auto sym = odds_ratio({5, 5, 5, 5});
  CHECK(sym.odds_ratio == 1.0);
  CHECK(sym.p_value == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(odds_ratio({10, 0, 0, 10}).odds_ratio == doctest::Approx(441.0).epsilon(1e-14));
  // (3,1,1,3): table probabilities 1,16,36,16,1 over 70
  CHECK(odds_ratio({3, 1, 1, 3}).p_value == doctest::Approx(34.0 / 70.0).epsilon(1e-12));

  Rng rng(31);
  for (int trial = 0; trial < 500; ++trial) {
    const auto a = static_cast<std::int64_t>(rng.below(5));
    const auto b = static_cast<std::int64_t>(rng.below(4));
    const auto c = static_cast<std::int64_t>(rng.below(4));
    const auto d = static_cast<std::int64_t>(rng.below(3));
    if (a + b + c + d == 0) continue;
    CHECK(std::fabs(fisher_exact_two_sided(a, b, c, d) - oracle::fisher(a, b, c, d)) < 1e-12);
  }
}

TEST_CASE("bh_fdr") {
  CHECK(bh_fdr(Vec{0.01}, 0.05) == std::vector<bool>{true});
  CHECK(bh_fdr(Vec{1, 1, 1}, 0.05) == std::vector<bool>{false, false, false});
  // step-up trace: 0.01 <= 0.0125, 0.02 <= 0.025, 0.04 > 0.0375, 0.8 > 0.05
  CHECK(bh_fdr(Vec{0.01, 0.02, 0.04, 0.8}, 0.05) == std::vector<bool>{true, true, false, false});
  require_errc(Errc::OutOfRange, [] { bh_fdr(Vec{1.5}, 0.05); });

  Rng rng(17);
  for (int trial = 0; trial < 500; ++trial) {
    Vec p(1 + rng.below(8));
    for (auto& x : p) x = rng.uniform() * 0.2;
    if (trial % 5 == 0) p[0] = p.back();
    const auto got = bh_fdr(p, 0.05);
    CHECK(got == oracle::bh(p, 0.05));
    // monotone in alpha
    const auto looser = bh_fdr(p, 0.1);
    for (std::size_t i = 0; i < p.size(); ++i)
      if (got[i]) CHECK(looser[i]);
    // adjusted p-values agree with the flags
    const auto q = bh_adjust(p);
    for (std::size_t i = 0; i < p.size(); ++i) CHECK((q[i] <= 0.05) == got[i]);
  }
}

TEST_CASE("finite_diff_grad") {
  const auto g = finite_diff_grad([](std::span<const double> x) { return x[0] * x[0]; }, Vec{3.0});
  CHECK(std::fabs(g[0] - 6.0) < 1e-6);
  for (double v : finite_diff_grad([](std::span<const double>) { return 4.2; }, Vec{1, 2, 3})) CHECK(v == 0.0);
  Rng rng(4);
  const Vec x = random_vec(rng, 10);
  const auto gs = finite_diff_grad(
      [](std::span<const double> y) {
        double s = 0;
        for (double e : y) s += e * e;
        return s;
      },
      x);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::fabs(gs[i] - 2 * x[i]) < 1e-5);
}

TEST_CASE("Rng determinism and derive_seed") {
  Rng a(5), b(5);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  CHECK(derive_seed(1, "bootstrap") != derive_seed(1, "permutation"));
  CHECK(derive_seed(1, "bootstrap") == derive_seed(1, "bootstrap"));
  Rng r(3);
  for (int i = 0; i < 1000; ++i) {
    const auto v = r.below(7);
    CHECK(v < 7);
  }
}
