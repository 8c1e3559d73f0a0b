#pragma once

// Point-cloud primitives: farthest point sampling, k-NN patch grouping,
// Chamfer distance and train-time augmentations. All functions are pure and
// operate on double-precision coordinates regardless of the model precision.

#include <array>
#include <cstdint>
#include <vector>

#include "rae/tensor.hpp"

namespace rae {

using Vec3 = std::array<double, 3>;

struct PointCloud {
  std::vector<Vec3> points;
  int label = -1;

  std::size_t size() const { return points.size(); }
};

// S centered local patches. Patch rows are the k nearest cloud points to the
// patch center (ties to the lowest point index), shifted by -center.
struct PatchSet {
  Tensor<double> centers;  // [S, 3]
  Tensor<double> patches;  // [S, k, 3], center-relative

  std::size_t patch_count() const { return centers.dim(0); }
  std::size_t neighbors() const { return patches.dim(1); }
};

// Greedy max-min selection starting from an explicit first index.
std::vector<std::size_t> farthest_point_sample_from(const PointCloud& cloud, std::size_t count,
                                                    std::size_t first);

// Seeded variant: the first index is drawn uniformly from the seed.
std::vector<std::size_t> farthest_point_sample(const PointCloud& cloud, std::size_t count,
                                               std::uint64_t seed);

PatchSet knn_group(const PointCloud& cloud, const std::vector<std::size_t>& center_indices,
                   std::size_t k);

// Symmetric squared Chamfer distance: mean over A of the nearest squared
// distance into B, plus the mean over B of the nearest squared distance
// into A.
double chamfer_l2(const std::vector<Vec3>& a, const std::vector<Vec3>& b);

enum class AugmentKind { none, scale_translate, rotate };

struct AugmentSpec {
  AugmentKind kind = AugmentKind::none;
  // Per-axis uniform scale and translation ranges for scale_translate.
  double scale_lo = 2.0 / 3.0;
  double scale_hi = 1.5;
  double translate = 0.2;
};

// Deterministic per seed. Draw order: scales x,y,z then translations x,y,z;
// rotate draws a single angle about the z (up) axis.
PointCloud augment(const PointCloud& cloud, const AugmentSpec& spec, std::uint64_t seed);

// Rotation by an explicit angle about the up axis; exposed for tests.
PointCloud rotate_z(const PointCloud& cloud, double angle);

}  // namespace rae
