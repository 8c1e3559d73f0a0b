#pragma once

// Data-parallel kernels shared by the tensor ops and the geometry module.
// Every kernel parallelizes over independent output elements with a static
// schedule, so results are bit-identical for any thread count. Cross-element
// reductions (argmax scans, loss sums) stay serial.
//
// rae::serial holds straightforward single-threaded reference
// implementations of the same kernels; tests cross-check against them and
// bench/ compares their throughput.

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <vector>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace rae {

// Squared Euclidean distance in R^3. Shared by every neighbor kernel (both
// parallel and serial paths) so distance ties resolve identically everywhere.
inline double dist2_3d(const double* a, const double* b) {
  const double dx = a[0] - b[0];
  const double dy = a[1] - b[1];
  const double dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

namespace kernels {

// C[m,n] = A[m,k] * B[k,n]. Rows of C are independent; each row accumulates
// over k in ascending order.
template <class T>
void matmul(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  const std::ptrdiff_t mm = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static) if (mm > 1)
  for (std::ptrdiff_t i = 0; i < mm; ++i) {
    T* ci = c + i * n;
    std::fill(ci, ci + n, T{});
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = ai[p];
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

template <class T>
void transpose(const T* a, T* at, std::size_t m, std::size_t n) {
  const std::ptrdiff_t mm = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static) if (mm > 1)
  for (std::ptrdiff_t i = 0; i < mm; ++i)
    for (std::size_t j = 0; j < n; ++j) at[j * m + i] = a[i * n + j];
}

// For each row of a [na,3], nearest squared distance into b [nb,3] and the
// index attaining it (lowest index on ties).
template <class T>
void nearest_in_set(const T* a, std::size_t na, const T* b, std::size_t nb, T* min_d, std::size_t* argmin) {
  const std::ptrdiff_t nn = static_cast<std::ptrdiff_t>(na);
#pragma omp parallel for schedule(static) if (nn > 1)
  for (std::ptrdiff_t i = 0; i < nn; ++i) {
    const T* pi = a + 3 * i;
    T best = T{};
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < nb; ++j) {
      const T* pj = b + 3 * j;
      const T dx = pi[0] - pj[0], dy = pi[1] - pj[1], dz = pi[2] - pj[2];
      const T d = dx * dx + dy * dy + dz * dz;
      if (j == 0 || d < best) {
        best = d;
        best_j = j;
      }
    }
    min_d[i] = best;
    argmin[i] = best_j;
  }
}

// Greedy farthest point sampling over points [n,3] starting from first.
// Min-distance updates run in parallel; the argmax pick (ties to the lowest
// index) is a serial scan.
inline std::vector<std::size_t> fps_select(const double* points, std::size_t n, std::size_t count,
                                           std::size_t first) {
  std::vector<std::size_t> picked;
  picked.reserve(count);
  std::vector<double> min_d(n);
  const double* p0 = points + 3 * first;
  const std::ptrdiff_t nn = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(static) if (nn > 64)
  for (std::ptrdiff_t i = 0; i < nn; ++i) min_d[i] = dist2_3d(points + 3 * i, p0);
  picked.push_back(first);
  while (picked.size() < count) {
    std::size_t best = 0;
    double best_d = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (min_d[i] > best_d) {
        best_d = min_d[i];
        best = i;
      }
    }
    picked.push_back(best);
    const double* pb = points + 3 * best;
#pragma omp parallel for schedule(static) if (nn > 64)
    for (std::ptrdiff_t i = 0; i < nn; ++i) min_d[i] = std::min(min_d[i], dist2_3d(points + 3 * i, pb));
  }
  return picked;
}

// k nearest neighbors of each listed center among all n points, sorted by
// (squared distance, index). Centers are independent.
inline void knn_indices(const double* points, std::size_t n, const std::size_t* centers, std::size_t s,
                        std::size_t k, std::size_t* out /* s*k */) {
  const std::ptrdiff_t ss = static_cast<std::ptrdiff_t>(s);
#pragma omp parallel for schedule(static) if (ss > 1)
  for (std::ptrdiff_t c = 0; c < ss; ++c) {
    const double* pc = points + 3 * centers[c];
    std::vector<std::pair<double, std::size_t>> d(n);
    for (std::size_t i = 0; i < n; ++i) d[i] = {dist2_3d(points + 3 * i, pc), i};
    std::partial_sort(d.begin(), d.begin() + k, d.end());
    for (std::size_t j = 0; j < k; ++j) out[c * k + j] = d[j].second;
  }
}

}  // namespace kernels

namespace serial {

// Reference matmul: per-element dot products, same k-ascending accumulation
// order as the parallel kernel.
template <class T>
void matmul(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T acc{};
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
}

// Reference greedy FPS: recomputes every min-distance from scratch each
// round instead of maintaining a running array.
inline std::vector<std::size_t> fps_select(const double* points, std::size_t n, std::size_t count,
                                           std::size_t first) {
  std::vector<std::size_t> picked{first};
  while (picked.size() < count) {
    std::size_t best = 0;
    double best_d = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      double nearest = dist2_3d(points + 3 * i, points + 3 * picked[0]);
      for (std::size_t j = 1; j < picked.size(); ++j)
        nearest = std::min(nearest, dist2_3d(points + 3 * i, points + 3 * picked[j]));
      if (nearest > best_d) {
        best_d = nearest;
        best = i;
      }
    }
    picked.push_back(best);
  }
  return picked;
}

// Reference kNN: full stable sort of every (distance, index) pair.
inline void knn_indices(const double* points, std::size_t n, const std::size_t* centers, std::size_t s,
                        std::size_t k, std::size_t* out) {
  for (std::size_t c = 0; c < s; ++c) {
    const double* pc = points + 3 * centers[c];
    std::vector<std::pair<double, std::size_t>> d(n);
    for (std::size_t i = 0; i < n; ++i) d[i] = {dist2_3d(points + 3 * i, pc), i};
    std::stable_sort(d.begin(), d.end());
    for (std::size_t j = 0; j < k; ++j) out[c * k + j] = d[j].second;
  }
}

// Reference Chamfer core: materializes the full |A| x |B| distance matrix,
// then reduces row and column minima.
inline double chamfer_l2(const double* a, std::size_t na, const double* b, std::size_t nb) {
  std::vector<double> d(na * nb);
  for (std::size_t i = 0; i < na; ++i)
    for (std::size_t j = 0; j < nb; ++j) d[i * nb + j] = dist2_3d(a + 3 * i, b + 3 * j);
  double sum_a = 0.0;
  for (std::size_t i = 0; i < na; ++i) {
    double m = d[i * nb];
    for (std::size_t j = 1; j < nb; ++j) m = std::min(m, d[i * nb + j]);
    sum_a += m;
  }
  double sum_b = 0.0;
  for (std::size_t j = 0; j < nb; ++j) {
    double m = d[j];
    for (std::size_t i = 1; i < na; ++i) m = std::min(m, d[i * nb + j]);
    sum_b += m;
  }
  return sum_a / static_cast<double>(na) + sum_b / static_cast<double>(nb);
}

}  // namespace serial
}  // namespace rae
