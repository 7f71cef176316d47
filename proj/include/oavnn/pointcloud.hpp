#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "oavnn/tensor.hpp"

namespace oavnn {

/// N x 3 positions in normalized model space, optionally with per-point
/// binary left/right labels.
struct PointCloud {
  Tensor points;            // [N,3]
  std::vector<int> labels;  // empty, or N entries of 0/1
  std::string name;

  int64_t size() const { return points.size() == 0 ? 0 : points.shape()[0]; }
  bool labeled() const { return !labels.empty(); }
};

/// Orthogonal 3x3 transform with its determinant sign (+1 rotation,
/// -1 reflection). Applied to row-vector points as X * matrix.
struct TransformO3 {
  Tensor matrix;  // [3,3]
  double det = 1.0;
};

struct IndexMatrix {
  int64_t rows = 0, cols = 0;
  std::vector<int64_t> data;  // row-major

  int64_t operator()(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * cols + j)]; }
};

enum class ShapeKind { kAirplane, kChair, kCap, kTable };

ShapeKind shape_kind_from_string(const std::string& s);
std::string to_string(ShapeKind k);

/// Synthetic stand-ins for the desk-scale segmentation experiments. Built by
/// sampling a half (or quarter, for tables) object and mirroring across x=0,
/// so jitter_sigma == 0 gives bitwise-exact mirror pairs.
struct ShapeSpec {
  ShapeKind kind = ShapeKind::kAirplane;
  int64_t n_points = 256;
  uint64_t seed = 0;
  double jitter_sigma = 0.0;
};

/// Text format: "x y z" or "x y z label" per line, '#' comments. A file must
/// be uniformly labeled or uniformly unlabeled.
PointCloud load_xyz(const std::string& path);
void save_xyz(const PointCloud& cloud, const std::string& path);

/// Translate centroid to origin and scale so the farthest point has norm 1.
PointCloud center_unit_scale(const PointCloud& cloud);

/// Row i: the k nearest neighbors of point i by Euclidean distance, self
/// excluded, ordered by (distance, index).
IndexMatrix knn(const Tensor& points, int64_t k);

/// [N,k,2,3] edge features: (neighbor - point, point) per neighbor.
Tensor nn_embedding(const PointCloud& cloud, int64_t k);

/// Haar-uniform rotation from a seeded quaternion draw; composed with
/// diag(-1,1,1) when improper.
TransformO3 random_o3(uint64_t seed, bool improper);

PointCloud gen_shape(const ShapeSpec& spec);

PointCloud apply_transform(const PointCloud& cloud, const TransformO3& t);

/// Max over points of the distance to the nearest exact mirror partner
/// across x=0; zero for exactly mirror-symmetric clouds.
double mirror_residual(const PointCloud& cloud);

/// Same, reflecting across the plane through the origin orthogonal to
/// `normal` (any nonzero 3-vector).
double mirror_residual_about(const PointCloud& cloud, const Tensor& normal);

}  // namespace oavnn
