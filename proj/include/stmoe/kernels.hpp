// SPDX-License-Identifier: Apache-2.0
//
// Dense inner loops. Each kernel has a serial reference and an OpenMP
// variant; the OpenMP variant splits only the outer loop, so both produce
// bit-identical results and the serial one stays the test oracle.
#pragma once

#include <cstddef>
#include <span>

namespace stmoe::kernels {

// Row-major shapes throughout.
//   matmul:        Y[n x m]  (+)= X[n x k] * W[k x m]
//   matmul_bt:     Y[n x m]  (+)= X[n x k] * W[m x k]^T
//   matmul_at_acc: G[k x m]  +=   X[n x k]^T * D[n x m]
namespace serial {
template <class T>
void matmul(std::span<const T> x, std::span<const T> w, std::span<T> y, std::size_t n, std::size_t k,
            std::size_t m, bool accumulate = false);
template <class T>
void matmul_bt(std::span<const T> x, std::span<const T> w, std::span<T> y, std::size_t n, std::size_t k,
               std::size_t m, bool accumulate = false);
template <class T>
void matmul_at_acc(std::span<const T> x, std::span<const T> d, std::span<T> g, std::size_t n, std::size_t k,
                   std::size_t m);

// D[n x n], D_ij = 1 - cos(p_i, p_j) over unit-normalised rows of P[n x dim].
void cosine_distance_matrix(std::span<const double> points, std::size_t n, std::size_t dim,
                            std::span<double> out);
void euclidean_distance_matrix(std::span<const double> points, std::size_t n, std::size_t dim,
                               std::span<double> out);

// Per-point silhouette values for dense labels in [0, n_groups). `index`
// optionally maps sample slots to rows of the distance matrix (bootstrap).
void silhouette_samples(std::span<const double> dist, std::size_t n_dist, std::span<const int> labels,
                        int n_groups, std::span<const std::size_t> index, std::span<double> out);
}  // namespace serial

namespace parallel {
template <class T>
void matmul(std::span<const T> x, std::span<const T> w, std::span<T> y, std::size_t n, std::size_t k,
            std::size_t m, bool accumulate = false);
template <class T>
void matmul_bt(std::span<const T> x, std::span<const T> w, std::span<T> y, std::size_t n, std::size_t k,
               std::size_t m, bool accumulate = false);
template <class T>
void matmul_at_acc(std::span<const T> x, std::span<const T> d, std::span<T> g, std::size_t n, std::size_t k,
                   std::size_t m);
void cosine_distance_matrix(std::span<const double> points, std::size_t n, std::size_t dim,
                            std::span<double> out);
void euclidean_distance_matrix(std::span<const double> points, std::size_t n, std::size_t dim,
                               std::span<double> out);
void silhouette_samples(std::span<const double> dist, std::size_t n_dist, std::span<const int> labels,
                        int n_groups, std::span<const std::size_t> index, std::span<double> out);
}  // namespace parallel

// Dispatch: OpenMP when not already inside a parallel region and the work is
// large enough to amortise the fork.
template <class T>
void matmul(std::span<const T> x, std::span<const T> w, std::span<T> y, std::size_t n, std::size_t k,
            std::size_t m, bool accumulate = false);
template <class T>
void matmul_bt(std::span<const T> x, std::span<const T> w, std::span<T> y, std::size_t n, std::size_t k,
               std::size_t m, bool accumulate = false);
template <class T>
void matmul_at_acc(std::span<const T> x, std::span<const T> d, std::span<T> g, std::size_t n, std::size_t k,
                   std::size_t m);

bool use_parallel(std::size_t work);

}  // namespace stmoe::kernels
