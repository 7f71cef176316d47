#pragma once

#include <cstdint>
#include <vector>

#include "oavnn/pointcloud.hpp"
#include "oavnn/tensor.hpp"

namespace oavnn {

/// Per-point distance-ranked neighbor shells and their mean displacement
/// vectors. Shell j's members are all nearer than shell j+1's (ties broken by
/// index); the self point is excluded from its own neighbor list.
struct ShellDecomposition {
  int64_t n_points = 0;
  int64_t n_shells = 0;
  // per point, per shell: [start, end) into the point's sorted neighbor list
  std::vector<std::vector<int64_t>> shells;  // flattened member lists per point
  std::vector<int64_t> shell_offsets;        // (n_shells+1) offsets into each point's list
  Tensor shell_vectors;                      // [N, n, 3]
};

/// Output of the planar symmetry detector: per-point cross vectors, their
/// mean, and the unit direction when the mean is non-degenerate.
struct SymmetryEstimate {
  Tensor per_point;      // [N,3]
  Tensor direction;      // [3]
  Tensor unit_direction; // [3]; zeros when degenerate
  double magnitude = 0.0;
  bool degenerate = false;  // multi-plane or isotropic input
};

/// Distance-based shells: the sorted neighbor list (self excluded) is split
/// into n groups of floor((N-1)/n), the remainder joining the outermost
/// shell; v[i][j] is the mean displacement from point i to shell j.
ShellDecomposition shell_vectors(const PointCloud& cloud, int64_t n_shells);

/// Mean of the n(n-1)/2 directed cross products v_j x v_k (j < k, nearer
/// crossed with further) for one point's shell vectors [n,3].
Tensor cross_features(const Tensor& shell_vecs_one_point);

/// The full detector: per-point cross vectors averaged into a single
/// direction-of-symmetry estimate. Degenerate (near-zero) means are flagged,
/// not raised; the threshold is 1e-9 times the cloud's max point norm.
SymmetryEstimate planar_symmetry_direction(const PointCloud& cloud, int64_t n_shells);

/// Labels points by the sign of their projection on `direction`: 1 for
/// positive, 0 otherwise (ties |proj| < 1e-12 go to 0). The cloud must be
/// centered; the plane passes through the origin.
std::vector<int> plane_classifier(const PointCloud& cloud, const Tensor& direction);

/// max(acc, 1-acc): label agreement up to the estimate's sign ambiguity.
double accuracy_best_sign(const std::vector<int>& predicted, const std::vector<int>& truth);

}  // namespace oavnn
