#pragma once

// Dataset ingestion: procedural synthetic shapes, xyz / ASCII-PLY loaders,
// resampling and manifests.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "rae/geometry.hpp"

namespace rae {

enum class ShapeClass { sphere, cube, torus, cylinder, cone, plane };

const char* shape_class_name(ShapeClass c);
std::optional<ShapeClass> shape_class_from(const std::string& name);
std::vector<ShapeClass> parse_shape_classes(const std::string& comma_list);

// Uniform surface sample of the parametric shape with isotropic Gaussian
// noise, normalized so the centroid sits at the origin and the farthest
// point at radius 1. Symmetric shapes are sampled in +/- pairs, which pins
// the sample centroid at the origin (for even counts) instead of letting it
// wander by O(1/sqrt(n)).
PointCloud gen_shape(ShapeClass cls, std::size_t n_points, double noise_sigma, std::uint64_t seed);

enum class CloudFormat { xyz, ply_ascii };

PointCloud load_cloud(const std::string& path, CloudFormat format);
// Format inferred from the extension (.xyz / .ply).
PointCloud load_cloud(const std::string& path);

// 17 significant digits, enough to round-trip doubles exactly.
void save_xyz(const PointCloud& cloud, const std::string& path);
void save_ply_ascii(const PointCloud& cloud, const std::string& path);

// FPS-downsample when larger, pad by sampling existing points with
// replacement when smaller, identity when equal.
PointCloud resample(const PointCloud& cloud, std::size_t n_points, std::uint64_t seed);

struct Dataset {
  std::string name;
  std::vector<PointCloud> clouds;
  std::vector<std::string> class_names;
  std::string split;  // train | test

  std::size_t size() const { return clouds.size(); }
  std::size_t n_classes() const { return class_names.size(); }
};

// Labeled synthetic dataset; per_class clouds per listed class, seeds
// disjoint across (class, index, split tag).
Dataset make_synthetic_dataset(const std::vector<ShapeClass>& classes, std::size_t per_class,
                               std::size_t n_points, double noise_sigma, std::uint64_t seed,
                               const std::string& split);

struct ManifestEntry {
  std::string path;  // relative to the manifest directory
  int label = 0;
  std::string split;
};

void save_manifest(const std::string& dir, const std::vector<ManifestEntry>& entries,
                   const std::vector<std::string>& class_names);

// Reads dir/manifest.csv and loads the clouds tagged with `split`.
Dataset load_dataset_dir(const std::string& dir, const std::string& split);

}  // namespace rae
