// SPDX-License-Identifier: Apache-2.0
#include "stmoe/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace stmoe::kernels {

namespace {

template <class T>
inline void matmul_row(const T* xr, const T* w, T* yr, std::size_t k, std::size_t m, bool accumulate) {
  if (!accumulate) std::fill(yr, yr + m, T(0));
  for (std::size_t kk = 0; kk < k; ++kk) {
    const T a = xr[kk];
    if (a == T(0)) continue;
    const T* wr = w + kk * m;
#pragma omp simd
    for (std::size_t j = 0; j < m; ++j) yr[j] += a * wr[j];
  }
}

template <class T>
inline void matmul_bt_row(const T* xr, const T* w, T* yr, std::size_t k, std::size_t m, bool accumulate) {
  for (std::size_t j = 0; j < m; ++j) {
    const T* wr = w + j * k;
    T acc = 0;
#pragma omp simd reduction(+ : acc)
    for (std::size_t kk = 0; kk < k; ++kk) acc += xr[kk] * wr[kk];
    yr[j] = accumulate ? yr[j] + acc : acc;
  }
}

template <class T>
inline void matmul_at_row(const T* x, const T* d, T* gr, std::size_t i, std::size_t n, std::size_t k,
                          std::size_t m) {
  for (std::size_t t = 0; t < n; ++t) {
    const T a = x[t * k + i];
    if (a == T(0)) continue;
    const T* dr = d + t * m;
#pragma omp simd
    for (std::size_t j = 0; j < m; ++j) gr[j] += a * dr[j];
  }
}

inline double cosine_distance_entry(const double* a, const double* b, std::size_t dim, double na, double nb) {
  double acc = 0.0;
  for (std::size_t i = 0; i < dim; ++i) acc += a[i] * b[i];
  const double c = std::clamp(acc / (na * nb), -1.0, 1.0);
  return 1.0 - c;
}

inline double euclidean_entry(const double* a, const double* b, std::size_t dim) {
  double acc = 0.0;
  for (std::size_t i = 0; i < dim; ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

std::vector<double> row_norms(std::span<const double> points, std::size_t n, std::size_t dim) {
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < dim; ++j) acc += points[i * dim + j] * points[i * dim + j];
    norms[i] = std::sqrt(acc);
  }
  return norms;
}

inline double silhouette_point(std::span<const double> dist, std::size_t n_dist, std::span<const int> labels,
                               int n_groups, std::span<const std::size_t> index, std::size_t i,
                               std::vector<double>& sums, std::vector<std::size_t>& counts) {
  const std::size_t n = labels.size();
  std::fill(sums.begin(), sums.end(), 0.0);
  std::fill(counts.begin(), counts.end(), 0);
  const std::size_t ri = index.empty() ? i : index[i];
  const double* drow = dist.data() + ri * n_dist;
  for (std::size_t j = 0; j < n; ++j) {
    if (j == i) continue;
    const std::size_t rj = index.empty() ? j : index[j];
    sums[static_cast<std::size_t>(labels[j])] += drow[rj];
    counts[static_cast<std::size_t>(labels[j])] += 1;
  }
  const auto own = static_cast<std::size_t>(labels[i]);
  if (counts[own] == 0) return 0.0;
  const double a = sums[own] / static_cast<double>(counts[own]);
  double b = std::numeric_limits<double>::infinity();
  for (int g = 0; g < n_groups; ++g) {
    const auto gi = static_cast<std::size_t>(g);
    if (gi == own || counts[gi] == 0) continue;
    b = std::min(b, sums[gi] / static_cast<double>(counts[gi]));
  }
  if (!std::isfinite(b)) return 0.0;
  const double denom = std::max(a, b);
  return denom > 0.0 ? (b - a) / denom : 0.0;
}

}  // namespace

namespace serial {

template <class T>
void matmul(std::span<const T> x, std::span<const T> w, std::span<T> y, std::size_t n, std::size_t k,
            std::size_t m, bool accumulate) {
  for (std::size_t r = 0; r < n; ++r) matmul_row(x.data() + r * k, w.data(), y.data() + r * m, k, m, accumulate);
}

template <class T>
void matmul_bt(std::span<const T> x, std::span<const T> w, std::span<T> y, std::size_t n, std::size_t k,
               std::size_t m, bool accumulate) {
  for (std::size_t r = 0; r < n; ++r)
    matmul_bt_row(x.data() + r * k, w.data(), y.data() + r * m, k, m, accumulate);
}

template <class T>
void matmul_at_acc(std::span<const T> x, std::span<const T> d, std::span<T> g, std::size_t n, std::size_t k,
                   std::size_t m) {
  for (std::size_t i = 0; i < k; ++i) matmul_at_row(x.data(), d.data(), g.data() + i * m, i, n, k, m);
}

void cosine_distance_matrix(std::span<const double> points, std::size_t n, std::size_t dim,
                            std::span<double> out) {
  const auto norms = row_norms(points, n, dim);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out[i * n + j] = i == j ? 0.0
                              : cosine_distance_entry(points.data() + i * dim, points.data() + j * dim, dim,
                                                      norms[i], norms[j]);
}

void euclidean_distance_matrix(std::span<const double> points, std::size_t n, std::size_t dim,
                               std::span<double> out) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      out[i * n + j] = euclidean_entry(points.data() + i * dim, points.data() + j * dim, dim);
}

void silhouette_samples(std::span<const double> dist, std::size_t n_dist, std::span<const int> labels,
                        int n_groups, std::span<const std::size_t> index, std::span<double> out) {
  std::vector<double> sums(static_cast<std::size_t>(n_groups));
  std::vector<std::size_t> counts(static_cast<std::size_t>(n_groups));
  for (std::size_t i = 0; i < labels.size(); ++i)
    out[i] = silhouette_point(dist, n_dist, labels, n_groups, index, i, sums, counts);
}

}  // namespace serial

namespace parallel {

template <class T>
void matmul(std::span<const T> x, std::span<const T> w, std::span<T> y, std::size_t n, std::size_t k,
            std::size_t m, bool accumulate) {
  const auto rows = static_cast<long>(n);
#pragma omp parallel for schedule(static)
  for (long r = 0; r < rows; ++r) {
    const auto ur = static_cast<std::size_t>(r);
    matmul_row(x.data() + ur * k, w.data(), y.data() + ur * m, k, m, accumulate);
  }
}

template <class T>
void matmul_bt(std::span<const T> x, std::span<const T> w, std::span<T> y, std::size_t n, std::size_t k,
               std::size_t m, bool accumulate) {
  const auto rows = static_cast<long>(n);
#pragma omp parallel for schedule(static)
  for (long r = 0; r < rows; ++r) {
    const auto ur = static_cast<std::size_t>(r);
    matmul_bt_row(x.data() + ur * k, w.data(), y.data() + ur * m, k, m, accumulate);
  }
}

template <class T>
void matmul_at_acc(std::span<const T> x, std::span<const T> d, std::span<T> g, std::size_t n, std::size_t k,
                   std::size_t m) {
  const auto rows = static_cast<long>(k);
#pragma omp parallel for schedule(static)
  for (long i = 0; i < rows; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    matmul_at_row(x.data(), d.data(), g.data() + ui * m, ui, n, k, m);
  }
}

void cosine_distance_matrix(std::span<const double> points, std::size_t n, std::size_t dim,
                            std::span<double> out) {
  const auto norms = row_norms(points, n, dim);
  const auto rows = static_cast<long>(n);
#pragma omp parallel for schedule(static)
  for (long i = 0; i < rows; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    for (std::size_t j = 0; j < n; ++j)
      out[ui * n + j] = ui == j ? 0.0
                                : cosine_distance_entry(points.data() + ui * dim, points.data() + j * dim, dim,
                                                        norms[ui], norms[j]);
  }
}

void euclidean_distance_matrix(std::span<const double> points, std::size_t n, std::size_t dim,
                               std::span<double> out) {
  const auto rows = static_cast<long>(n);
#pragma omp parallel for schedule(static)
  for (long i = 0; i < rows; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    for (std::size_t j = 0; j < n; ++j)
      out[ui * n + j] = euclidean_entry(points.data() + ui * dim, points.data() + j * dim, dim);
  }
}

void silhouette_samples(std::span<const double> dist, std::size_t n_dist, std::span<const int> labels,
                        int n_groups, std::span<const std::size_t> index, std::span<double> out) {
  const auto rows = static_cast<long>(labels.size());
#pragma omp parallel
  {
    std::vector<double> sums(static_cast<std::size_t>(n_groups));
    std::vector<std::size_t> counts(static_cast<std::size_t>(n_groups));
#pragma omp for schedule(static)
    for (long i = 0; i < rows; ++i) {
      const auto ui = static_cast<std::size_t>(i);
      out[ui] = silhouette_point(dist, n_dist, labels, n_groups, index, ui, sums, counts);
    }
  }
}

}  // namespace parallel

bool use_parallel(std::size_t work) { return work >= (1u << 16) && !omp_in_parallel() && omp_get_max_threads() > 1; }

template <class T>
void matmul(std::span<const T> x, std::span<const T> w, std::span<T> y, std::size_t n, std::size_t k,
            std::size_t m, bool accumulate) {
  if (use_parallel(n * k * m))
    parallel::matmul(x, w, y, n, k, m, accumulate);
  else
    serial::matmul(x, w, y, n, k, m, accumulate);
}

template <class T>
void matmul_bt(std::span<const T> x, std::span<const T> w, std::span<T> y, std::size_t n, std::size_t k,
               std::size_t m, bool accumulate) {
  if (use_parallel(n * k * m))
    parallel::matmul_bt(x, w, y, n, k, m, accumulate);
  else
    serial::matmul_bt(x, w, y, n, k, m, accumulate);
}

template <class T>
void matmul_at_acc(std::span<const T> x, std::span<const T> d, std::span<T> g, std::size_t n, std::size_t k,
                   std::size_t m) {
  if (use_parallel(n * k * m))
    parallel::matmul_at_acc(x, d, g, n, k, m);
  else
    serial::matmul_at_acc(x, d, g, n, k, m);
}

#define STMOE_INSTANTIATE(T)                                                                                   \
  template void serial::matmul<T>(std::span<const T>, std::span<const T>, std::span<T>, std::size_t,           \
                                  std::size_t, std::size_t, bool);                                             \
  template void serial::matmul_bt<T>(std::span<const T>, std::span<const T>, std::span<T>, std::size_t,        \
                                     std::size_t, std::size_t, bool);                                          \
  template void serial::matmul_at_acc<T>(std::span<const T>, std::span<const T>, std::span<T>, std::size_t,    \
                                         std::size_t, std::size_t);                                            \
  template void parallel::matmul<T>(std::span<const T>, std::span<const T>, std::span<T>, std::size_t,         \
                                    std::size_t, std::size_t, bool);                                           \
  template void parallel::matmul_bt<T>(std::span<const T>, std::span<const T>, std::span<T>, std::size_t,      \
                                       std::size_t, std::size_t, bool);                                        \
  template void parallel::matmul_at_acc<T>(std::span<const T>, std::span<const T>, std::span<T>, std::size_t,  \
                                           std::size_t, std::size_t);                                          \
  template void matmul<T>(std::span<const T>, std::span<const T>, std::span<T>, std::size_t, std::size_t,      \
                          std::size_t, bool);                                                                  \
  template void matmul_bt<T>(std::span<const T>, std::span<const T>, std::span<T>, std::size_t, std::size_t,   \
                             std::size_t, bool);                                                               \
  template void matmul_at_acc<T>(std::span<const T>, std::span<const T>, std::span<T>, std::size_t,            \
                                 std::size_t, std::size_t);

STMOE_INSTANTIATE(float)
STMOE_INSTANTIATE(double)

#undef STMOE_INSTANTIATE

}  // namespace stmoe::kernels
