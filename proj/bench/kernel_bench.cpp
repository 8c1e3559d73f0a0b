// Times the OpenMP kernels against their serial references and reports the
// speedup plus the largest numeric deviation between the two paths.
//
//   ./rae_bench [threads]

#include <cstdio>
#include <cstdlib>
#include <string>
#include <vector>

#if defined(_OPENMP)
#include <omp.h>
#endif

#include "rae/autodiff.hpp"
#include "rae/kernels.hpp"
#include "rae/rng.hpp"
#include "rae/tensor.hpp"

using namespace rae;

namespace {

double now() {
#if defined(_OPENMP)
  return omp_get_wtime();
#else
  return static_cast<double>(clock()) / CLOCKS_PER_SEC;
#endif
}

template <class F>
double time_best_of(const F& fn, int reps) {
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    const double t0 = now();
    fn();
    best = std::min(best, now() - t0);
  }
  return best;
}

void report(const char* name, const std::string& size, double serial_s, double parallel_s,
            double max_dev) {
  std::printf("%-12s %-18s %10.3f ms %10.3f ms %7.2fx %10.2e\n", name, size.c_str(),
              serial_s * 1e3, parallel_s * 1e3, serial_s / parallel_s, max_dev);
}

}  // namespace

int main(int argc, char** argv) {
#if defined(_OPENMP)
  if (argc > 1) omp_set_num_threads(std::atoi(argv[1]));
  std::printf("threads: %d\n", omp_get_max_threads());
#else
  (void)argc;
  (void)argv;
  std::printf("built without OpenMP; both columns run serial code\n");
#endif
  g_finite_checks = false;
  Rng rng(7);

  std::printf("%-12s %-18s %13s %13s %8s %10s\n", "kernel", "size", "serial", "parallel", "speedup",
              "max|diff|");

  {
    const std::size_t m = 384, k = 384, n = 1536;
    Tensor<double> a = Tensor<double>::randn({m, k}, rng);
    Tensor<double> b = Tensor<double>::randn({k, n}, rng);
    Tensor<double> c_ser({m, n}), c_par({m, n});
    const double ts = time_best_of([&] { serial::matmul(a.data(), b.data(), c_ser.data(), m, k, n); }, 3);
    const double tp = time_best_of([&] { kernels::matmul(a.data(), b.data(), c_par.data(), m, k, n); }, 3);
    report("matmul", "384x384x1536", ts, tp, max_abs_diff(c_ser, c_par));
  }

  {
    const std::size_t na = 4096, nb = 4096;
    Tensor<double> a = Tensor<double>::uniform({na, 3}, rng, -1, 1);
    Tensor<double> b = Tensor<double>::uniform({nb, 3}, rng, -1, 1);
    double chamfer_par = 0, chamfer_ser = 0;
    const double ts =
        time_best_of([&] { chamfer_ser = serial::chamfer_l2(a.data(), na, b.data(), nb); }, 3);
    const double tp = time_best_of(
        [&] {
          std::vector<double> da(na), db(nb);
          std::vector<std::size_t> ja(na), jb(nb);
          kernels::nearest_in_set(a.data(), na, b.data(), nb, da.data(), ja.data());
          kernels::nearest_in_set(b.data(), nb, a.data(), na, db.data(), jb.data());
          double sa = 0, sb = 0;
          for (double d : da) sa += d;
          for (double d : db) sb += d;
          chamfer_par = sa / na + sb / nb;
        },
        3);
    report("chamfer", "4096 vs 4096", ts, tp, std::abs(chamfer_par - chamfer_ser));
  }

  {
    const std::size_t n = 8192, s = 128, k = 32;
    Tensor<double> pts = Tensor<double>::uniform({n, 3}, rng, -1, 1);
    std::vector<std::size_t> centers(s);
    for (std::size_t i = 0; i < s; ++i) centers[i] = rng.randint(n);
    std::vector<std::size_t> out_ser(s * k), out_par(s * k);
    const double ts = time_best_of(
        [&] { serial::knn_indices(pts.data(), n, centers.data(), s, k, out_ser.data()); }, 3);
    const double tp = time_best_of(
        [&] { kernels::knn_indices(pts.data(), n, centers.data(), s, k, out_par.data()); }, 3);
    std::size_t mismatches = 0;
    for (std::size_t i = 0; i < s * k; ++i) mismatches += out_ser[i] != out_par[i];
    report("knn", "8192 pts, 128x32", ts, tp, static_cast<double>(mismatches));
  }

  {
    const std::size_t n = 8192, count = 512;
    Tensor<double> pts = Tensor<double>::uniform({n, 3}, rng, -1, 1);
    std::vector<std::size_t> out_ser, out_par;
    const double ts = time_best_of([&] { out_ser = serial::fps_select(pts.data(), n, count, 0); }, 3);
    const double tp = time_best_of([&] { out_par = kernels::fps_select(pts.data(), n, count, 0); }, 3);
    std::size_t mismatches = 0;
    for (std::size_t i = 0; i < count; ++i) mismatches += out_ser[i] != out_par[i];
    report("fps", "8192 -> 512", ts, tp, static_cast<double>(mismatches));
  }

  return 0;
}
