#include "rae/geometry.hpp"

#include <cmath>

#include "rae/error.hpp"
#include "rae/kernels.hpp"
#include "rae/rng.hpp"

namespace rae {

static void require_cloud(const PointCloud& cloud, const char* op) {
  if (cloud.size() == 0) throw ContractError(std::string(op) + ": empty cloud");
}

std::vector<std::size_t> farthest_point_sample_from(const PointCloud& cloud, std::size_t count,
                                                    std::size_t first) {
  require_cloud(cloud, "farthest_point_sample");
  if (count < 1 || count > cloud.size())
    throw ContractError("farthest_point_sample: count " + std::to_string(count) + " out of range for " +
                        std::to_string(cloud.size()) + " points");
  if (first >= cloud.size()) throw ContractError("farthest_point_sample: first index out of range");
  return kernels::fps_select(cloud.points[0].data(), cloud.size(), count, first);
}

std::vector<std::size_t> farthest_point_sample(const PointCloud& cloud, std::size_t count,
                                               std::uint64_t seed) {
  require_cloud(cloud, "farthest_point_sample");
  Rng rng(seed);
  const std::size_t first = static_cast<std::size_t>(rng.randint(cloud.size()));
  return farthest_point_sample_from(cloud, count, first);
}

PatchSet knn_group(const PointCloud& cloud, const std::vector<std::size_t>& center_indices,
                   std::size_t k) {
  require_cloud(cloud, "knn_group");
  if (k < 1 || k > cloud.size())
    throw ContractError("knn_group: k " + std::to_string(k) + " out of range for " +
                        std::to_string(cloud.size()) + " points");
  if (center_indices.empty()) throw ContractError("knn_group: no centers");
  const std::size_t s = center_indices.size();
  std::vector<std::size_t> idx(s * k);
  kernels::knn_indices(cloud.points[0].data(), cloud.size(), center_indices.data(), s, k, idx.data());

  PatchSet set;
  set.centers = Tensor<double>({s, 3});
  set.patches = Tensor<double>({s, k, 3});
  for (std::size_t c = 0; c < s; ++c) {
    const Vec3& center = cloud.points[center_indices[c]];
    for (std::size_t d = 0; d < 3; ++d) set.centers[c * 3 + d] = center[d];
    for (std::size_t j = 0; j < k; ++j) {
      const Vec3& p = cloud.points[idx[c * k + j]];
      for (std::size_t d = 0; d < 3; ++d) set.patches[(c * k + j) * 3 + d] = p[d] - center[d];
    }
  }
  return set;
}

double chamfer_l2(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
  if (a.empty() || b.empty()) throw ContractError("chamfer_l2: empty point set");
  const std::size_t na = a.size(), nb = b.size();
  std::vector<double> da(na), db(nb);
  std::vector<std::size_t> ja(na), jb(nb);
  kernels::nearest_in_set(a[0].data(), na, b[0].data(), nb, da.data(), ja.data());
  kernels::nearest_in_set(b[0].data(), nb, a[0].data(), na, db.data(), jb.data());
  double sum_a = 0.0, sum_b = 0.0;
  for (double d : da) sum_a += d;
  for (double d : db) sum_b += d;
  return sum_a / static_cast<double>(na) + sum_b / static_cast<double>(nb);
}

PointCloud rotate_z(const PointCloud& cloud, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  PointCloud out = cloud;
  for (Vec3& p : out.points) {
    const double x = p[0], y = p[1];
    p[0] = c * x - s * y;
    p[1] = s * x + c * y;
  }
  return out;
}

PointCloud augment(const PointCloud& cloud, const AugmentSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  switch (spec.kind) {
    case AugmentKind::none:
      return cloud;
    case AugmentKind::scale_translate: {
      double scale[3], shift[3];
      for (double& v : scale) v = rng.uniform(spec.scale_lo, spec.scale_hi);
      for (double& v : shift) v = rng.uniform(-spec.translate, spec.translate);
      PointCloud out = cloud;
      for (Vec3& p : out.points)
        for (std::size_t d = 0; d < 3; ++d) p[d] = p[d] * scale[d] + shift[d];
      return out;
    }
    case AugmentKind::rotate:
      return rotate_z(cloud, rng.uniform(0.0, 2.0 * M_PI));
  }
  throw ContractError("augment: unknown augmentation kind");
}

}  // namespace rae
