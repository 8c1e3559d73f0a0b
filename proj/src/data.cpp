#include "rae/data.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "rae/error.hpp"
#include "rae/rng.hpp"

namespace fs = std::filesystem;

namespace rae {

const char* shape_class_name(ShapeClass c) {
  switch (c) {
    case ShapeClass::sphere: return "sphere";
    case ShapeClass::cube: return "cube";
    case ShapeClass::torus: return "torus";
    case ShapeClass::cylinder: return "cylinder";
    case ShapeClass::cone: return "cone";
    case ShapeClass::plane: return "plane";
  }
  return "?";
}

std::optional<ShapeClass> shape_class_from(const std::string& name) {
  for (ShapeClass c : {ShapeClass::sphere, ShapeClass::cube, ShapeClass::torus, ShapeClass::cylinder,
                       ShapeClass::cone, ShapeClass::plane})
    if (name == shape_class_name(c)) return c;
  return std::nullopt;
}

std::vector<ShapeClass> parse_shape_classes(const std::string& comma_list) {
  std::vector<ShapeClass> out;
  std::stringstream ss(comma_list);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    auto c = shape_class_from(tok);
    if (!c) throw ConfigError("data.classes: unknown shape class '" + tok + "'");
    out.push_back(*c);
  }
  if (out.empty()) throw ConfigError("data.classes: empty class list");
  return out;
}

namespace {

// One uniform point on the surface; shapes are centered at the origin.
Vec3 surface_point(ShapeClass cls, Rng& rng) {
  switch (cls) {
    case ShapeClass::sphere: {
      while (true) {
        Vec3 p{rng.normal(), rng.normal(), rng.normal()};
        const double n = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
        if (n > 1e-12) return {p[0] / n, p[1] / n, p[2] / n};
      }
    }
    case ShapeClass::cube: {
      // Pair sampling covers the opposite face, so drawing only the +1 face
      // of a random axis stays uniform over all six faces.
      const std::size_t axis = rng.randint(3);
      const double u = rng.uniform(-1.0, 1.0), v = rng.uniform(-1.0, 1.0);
      Vec3 p{};
      p[axis] = 1.0;
      p[(axis + 1) % 3] = u;
      p[(axis + 2) % 3] = v;
      return p;
    }
    case ShapeClass::torus: {
      const double major = 1.0, minor = 0.4;
      const double theta = rng.uniform(0.0, 2.0 * M_PI);
      double phi;
      // Rejection keeps the sample uniform in surface area rather than in
      // the (theta, phi) parameter square.
      while (true) {
        phi = rng.uniform(0.0, 2.0 * M_PI);
        if (rng.uniform() * (major + minor) <= major + minor * std::cos(phi)) break;
      }
      const double ring = major + minor * std::cos(phi);
      return {ring * std::cos(theta), ring * std::sin(theta), minor * std::sin(phi)};
    }
    case ShapeClass::cylinder: {
      const double radius = 0.5, height = 1.0;
      const double lateral = 2.0 * M_PI * radius * height;
      const double caps = 2.0 * M_PI * radius * radius;
      const double theta = rng.uniform(0.0, 2.0 * M_PI);
      if (rng.uniform() * (lateral + caps) < lateral) {
        const double z = rng.uniform(-height / 2.0, height / 2.0);
        return {radius * std::cos(theta), radius * std::sin(theta), z};
      }
      const double rho = radius * std::sqrt(rng.uniform());
      const double z = rng.uniform() < 0.5 ? height / 2.0 : -height / 2.0;
      return {rho * std::cos(theta), rho * std::sin(theta), z};
    }
    case ShapeClass::cone: {
      const double radius = 0.6, height = 1.2;
      const double slant = std::sqrt(radius * radius + height * height);
      const double lateral = M_PI * radius * slant;
      const double base = M_PI * radius * radius;
      const double theta = rng.uniform(0.0, 2.0 * M_PI);
      if (rng.uniform() * (lateral + base) < lateral) {
        const double s = std::sqrt(rng.uniform());  // area element grows with slant distance
        const double rho = s * radius;
        const double z = height / 2.0 - s * height;
        return {rho * std::cos(theta), rho * std::sin(theta), z};
      }
      const double rho = radius * std::sqrt(rng.uniform());
      return {rho * std::cos(theta), rho * std::sin(theta), -height / 2.0};
    }
    case ShapeClass::plane: {
      return {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), 0.0};
    }
  }
  throw ContractError("gen_shape: unknown class");
}

bool origin_symmetric(ShapeClass cls) { return cls != ShapeClass::cone; }

}  // namespace

PointCloud gen_shape(ShapeClass cls, std::size_t n_points, double noise_sigma, std::uint64_t seed) {
  if (n_points < 8) throw ContractError("gen_shape: need at least 8 points");
  Rng rng(fold_seed(seed, {0x5Eu, static_cast<std::uint64_t>(cls)}));
  PointCloud cloud;
  cloud.points.reserve(n_points);
  if (origin_symmetric(cls)) {
    while (cloud.points.size() + 2 <= n_points) {
      const Vec3 p = surface_point(cls, rng);
      cloud.points.push_back(p);
      cloud.points.push_back({-p[0], -p[1], -p[2]});
    }
    if (cloud.points.size() < n_points) cloud.points.push_back(surface_point(cls, rng));
  } else {
    while (cloud.points.size() < n_points) cloud.points.push_back(surface_point(cls, rng));
  }
  if (noise_sigma > 0.0)
    for (Vec3& p : cloud.points)
      for (double& v : p) v += rng.normal(0.0, noise_sigma);

  Vec3 centroid{};
  for (const Vec3& p : cloud.points)
    for (std::size_t d = 0; d < 3; ++d) centroid[d] += p[d];
  for (double& v : centroid) v /= static_cast<double>(cloud.points.size());
  double max_r2 = 0.0;
  for (Vec3& p : cloud.points) {
    for (std::size_t d = 0; d < 3; ++d) p[d] -= centroid[d];
    max_r2 = std::max(max_r2, p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
  }
  const double inv = 1.0 / std::sqrt(max_r2);
  for (Vec3& p : cloud.points)
    for (double& v : p) v *= inv;
  return cloud;
}

// ---------------------------------------------------------------------------
// file formats
// ---------------------------------------------------------------------------

namespace {

double parse_coord(const std::string& tok, const std::string& path, std::size_t line_no) {
  std::size_t pos = 0;
  double v;
  try {
    v = std::stod(tok, &pos);
  } catch (const std::exception&) {
    throw IoError(path + ": line " + std::to_string(line_no) + ": bad number '" + tok + "'");
  }
  if (pos != tok.size())
    throw IoError(path + ": line " + std::to_string(line_no) + ": bad number '" + tok + "'");
  if (!std::isfinite(v))
    throw IoError(path + ": line " + std::to_string(line_no) + ": non-finite coordinate");
  return v;
}

std::vector<std::string> split_ws(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

PointCloud load_xyz(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  PointCloud cloud;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto toks = split_ws(line);
    if (toks.empty()) continue;
    if (toks.size() != 3)
      throw IoError(path + ": line " + std::to_string(line_no) + ": expected 3 values, got " +
                    std::to_string(toks.size()));
    cloud.points.push_back(
        {parse_coord(toks[0], path, line_no), parse_coord(toks[1], path, line_no),
         parse_coord(toks[2], path, line_no)});
  }
  if (cloud.points.empty()) throw IoError(path + ": no points");
  return cloud;
}

PointCloud load_ply(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::string line;
  std::size_t line_no = 0;
  auto next_line = [&]() {
    if (!std::getline(in, line)) throw IoError(path + ": unexpected end of file");
    ++line_no;
  };
  next_line();
  if (line != "ply") throw IoError(path + ": line 1: not a PLY file");
  next_line();
  if (line.rfind("format ascii", 0) != 0)
    throw IoError(path + ": line " + std::to_string(line_no) + ": only ASCII PLY is supported");

  std::size_t vertex_count = 0;
  bool in_vertex_element = false;
  int x_col = -1, y_col = -1, z_col = -1;
  int prop_idx = 0;
  while (true) {
    next_line();
    const auto toks = split_ws(line);
    if (toks.empty()) continue;
    if (toks[0] == "comment") continue;
    if (toks[0] == "element") {
      if (toks.size() < 3) throw IoError(path + ": line " + std::to_string(line_no) + ": bad element");
      in_vertex_element = toks[1] == "vertex";
      if (in_vertex_element) vertex_count = std::stoul(toks[2]);
      continue;
    }
    if (toks[0] == "property") {
      if (in_vertex_element) {
        if (toks.size() != 3)
          throw IoError(path + ": line " + std::to_string(line_no) + ": bad vertex property");
        const std::string& type = toks[1];
        const std::string& name = toks[2];
        if (name == "x" || name == "y" || name == "z") {
          if (type != "float" && type != "double" && type != "float32" && type != "float64")
            throw IoError(path + ": line " + std::to_string(line_no) + ": property " + name +
                          " must be float or double");
          (name == "x" ? x_col : name == "y" ? y_col : z_col) = prop_idx;
        }
        ++prop_idx;
      }
      continue;
    }
    if (toks[0] == "end_header") break;
    throw IoError(path + ": line " + std::to_string(line_no) + ": unexpected header line '" + line + "'");
  }
  if (vertex_count == 0) throw IoError(path + ": no vertex element");
  if (x_col < 0 || y_col < 0 || z_col < 0) throw IoError(path + ": missing x/y/z vertex properties");

  PointCloud cloud;
  cloud.points.reserve(vertex_count);
  for (std::size_t i = 0; i < vertex_count; ++i) {
    next_line();
    const auto toks = split_ws(line);
    if (static_cast<int>(toks.size()) < prop_idx)
      throw IoError(path + ": line " + std::to_string(line_no) + ": expected " + std::to_string(prop_idx) +
                    " values, got " + std::to_string(toks.size()));
    cloud.points.push_back({parse_coord(toks[x_col], path, line_no),
                            parse_coord(toks[y_col], path, line_no),
                            parse_coord(toks[z_col], path, line_no)});
  }
  return cloud;
}

}  // namespace

PointCloud load_cloud(const std::string& path, CloudFormat format) {
  return format == CloudFormat::xyz ? load_xyz(path) : load_ply(path);
}

PointCloud load_cloud(const std::string& path) {
  const auto ext = fs::path(path).extension().string();
  if (ext == ".ply") return load_ply(path);
  return load_xyz(path);
}

void save_xyz(const PointCloud& cloud, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  char buf[128];
  for (const Vec3& p : cloud.points) {
    std::snprintf(buf, sizeof(buf), "%.17g %.17g %.17g\n", p[0], p[1], p[2]);
    out << buf;
  }
}

void save_ply_ascii(const PointCloud& cloud, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << "ply\nformat ascii 1.0\nelement vertex " << cloud.points.size()
      << "\nproperty double x\nproperty double y\nproperty double z\nend_header\n";
  char buf[128];
  for (const Vec3& p : cloud.points) {
    std::snprintf(buf, sizeof(buf), "%.17g %.17g %.17g\n", p[0], p[1], p[2]);
    out << buf;
  }
}

PointCloud resample(const PointCloud& cloud, std::size_t n_points, std::uint64_t seed) {
  if (cloud.size() == 0) throw ContractError("resample: empty cloud");
  if (cloud.size() == n_points) return cloud;
  PointCloud out;
  out.label = cloud.label;
  if (cloud.size() > n_points) {
    const auto idx = farthest_point_sample(cloud, n_points, seed);
    out.points.reserve(n_points);
    for (std::size_t i : idx) out.points.push_back(cloud.points[i]);
    return out;
  }
  out.points = cloud.points;
  Rng rng(fold_seed(seed, {0xADDu}));
  while (out.points.size() < n_points)
    out.points.push_back(cloud.points[rng.randint(cloud.size())]);
  return out;
}

Dataset make_synthetic_dataset(const std::vector<ShapeClass>& classes, std::size_t per_class,
                               std::size_t n_points, double noise_sigma, std::uint64_t seed,
                               const std::string& split) {
  Dataset ds;
  ds.name = "synthetic";
  ds.split = split;
  for (ShapeClass c : classes) ds.class_names.push_back(shape_class_name(c));
  const std::uint64_t split_tag = split == "test" ? 0x7E57u : 0x7124u;
  for (std::size_t ci = 0; ci < classes.size(); ++ci) {
    for (std::size_t i = 0; i < per_class; ++i) {
      PointCloud cloud =
          gen_shape(classes[ci], n_points, noise_sigma, fold_seed(seed, {split_tag, ci, i}));
      cloud.label = static_cast<int>(ci);
      ds.clouds.push_back(std::move(cloud));
    }
  }
  return ds;
}

void save_manifest(const std::string& dir, const std::vector<ManifestEntry>& entries,
                   const std::vector<std::string>& class_names) {
  fs::create_directories(dir);
  std::ofstream out(fs::path(dir) / "manifest.csv");
  if (!out) throw IoError("cannot write manifest in '" + dir + "'");
  out << "# classes:";
  for (std::size_t i = 0; i < class_names.size(); ++i) out << (i ? "," : " ") << class_names[i];
  out << "\npath,label,split\n";
  for (const auto& e : entries) out << e.path << "," << e.label << "," << e.split << "\n";
}

Dataset load_dataset_dir(const std::string& dir, const std::string& split) {
  const fs::path manifest = fs::path(dir) / "manifest.csv";
  std::ifstream in(manifest);
  if (!in) throw IoError("cannot open '" + manifest.string() + "'");
  Dataset ds;
  ds.name = dir;
  ds.split = split;
  std::string line;
  std::size_t line_no = 0;
  int max_label = -1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line[0] == '#') {
      const std::string tag = "# classes:";
      if (line.rfind(tag, 0) == 0) {
        std::stringstream ss(line.substr(tag.size()));
        std::string tok;
        while (std::getline(ss, tok, ',')) {
          while (!tok.empty() && tok.front() == ' ') tok.erase(tok.begin());
          if (!tok.empty()) ds.class_names.push_back(tok);
        }
      }
      continue;
    }
    if (line.rfind("path,", 0) == 0) continue;  // header
    std::stringstream ss(line);
    std::string path_tok, label_tok, split_tok;
    if (!std::getline(ss, path_tok, ',') || !std::getline(ss, label_tok, ',') ||
        !std::getline(ss, split_tok))
      throw IoError(manifest.string() + ": line " + std::to_string(line_no) + ": expected path,label,split");
    const int label = std::stoi(label_tok);
    max_label = std::max(max_label, label);
    if (split_tok != split) continue;
    PointCloud cloud = load_cloud((fs::path(dir) / path_tok).string());
    cloud.label = label;
    ds.clouds.push_back(std::move(cloud));
  }
  if (ds.class_names.empty())
    for (int i = 0; i <= max_label; ++i) ds.class_names.push_back("class" + std::to_string(i));
  return ds;
}

}  // namespace rae
