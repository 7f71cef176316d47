#include "oavnn/symmetry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace oavnn {

ShellDecomposition shell_vectors(const PointCloud& cloud, int64_t n_shells) {
  int64_t n = cloud.size();
  if (n_shells < 2 || n_shells > n - 1)
    throw ContractError("shell_vectors: need 2 <= n_shells <= N-1, got n_shells=" +
                        std::to_string(n_shells) + " for N=" + std::to_string(n));
  if (!cloud.points.all_finite()) throw ContractError("shell_vectors: non-finite cloud");

  int64_t n_nbr = n - 1;
  int64_t base = n_nbr / n_shells;

  ShellDecomposition d;
  d.n_points = n;
  d.n_shells = n_shells;
  d.shells.resize(static_cast<size_t>(n));
  d.shell_offsets.resize(static_cast<size_t>(n_shells) + 1);
  for (int64_t j = 0; j <= n_shells; ++j)
    d.shell_offsets[static_cast<size_t>(j)] = j < n_shells ? j * base : n_nbr;
  d.shell_vectors = Tensor({n, n_shells, 3});

  std::vector<std::pair<double, int64_t>> order(static_cast<size_t>(n_nbr));
#pragma omp parallel for schedule(static) firstprivate(order)
  for (int64_t i = 0; i < n; ++i) {
    const double* pi = cloud.points.data() + 3 * i;
    size_t m = 0;
    for (int64_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double* pj = cloud.points.data() + 3 * j;
      order[m++] = {sq(pj[0] - pi[0]) + sq(pj[1] - pi[1]) + sq(pj[2] - pi[2]), j};
    }
    std::sort(order.begin(), order.end());
    auto& members = d.shells[static_cast<size_t>(i)];
    members.resize(static_cast<size_t>(n_nbr));
    for (int64_t m2 = 0; m2 < n_nbr; ++m2) members[static_cast<size_t>(m2)] = order[static_cast<size_t>(m2)].second;
    for (int64_t s = 0; s < n_shells; ++s) {
      int64_t lo = d.shell_offsets[static_cast<size_t>(s)];
      int64_t hi = d.shell_offsets[static_cast<size_t>(s) + 1];
      double acc[3] = {0, 0, 0};
      for (int64_t m2 = lo; m2 < hi; ++m2) {
        const double* pj = cloud.points.data() + 3 * members[static_cast<size_t>(m2)];
        acc[0] += pj[0] - pi[0];
        acc[1] += pj[1] - pi[1];
        acc[2] += pj[2] - pi[2];
      }
      double inv = 1.0 / static_cast<double>(hi - lo);
      double* v = d.shell_vectors.data() + (i * n_shells + s) * 3;
      v[0] = acc[0] * inv;
      v[1] = acc[1] * inv;
      v[2] = acc[2] * inv;
    }
  }
  return d;
}

Tensor cross_features(const Tensor& shell_vecs_one_point) {
  const Shape& s = shell_vecs_one_point.shape();
  if (s.size() != 2 || s[1] != 3 || s[0] < 2)
    throw ContractError("cross_features expects [n,3] with n >= 2");
  int64_t n = s[0];
  double acc[3] = {0, 0, 0};
  int64_t pairs = 0;
  for (int64_t j = 0; j < n; ++j) {
    const double* a = shell_vecs_one_point.data() + 3 * j;
    for (int64_t k = j + 1; k < n; ++k) {
      const double* b = shell_vecs_one_point.data() + 3 * k;
      acc[0] += a[1] * b[2] - a[2] * b[1];
      acc[1] += a[2] * b[0] - a[0] * b[2];
      acc[2] += a[0] * b[1] - a[1] * b[0];
      ++pairs;
    }
  }
  double inv = 1.0 / static_cast<double>(pairs);
  return Tensor::vec3(acc[0] * inv, acc[1] * inv, acc[2] * inv);
}

SymmetryEstimate planar_symmetry_direction(const PointCloud& cloud, int64_t n_shells) {
  ShellDecomposition d = shell_vectors(cloud, n_shells);
  int64_t n = d.n_points;

  SymmetryEstimate est;
  est.per_point = Tensor({n, 3});
  for (int64_t i = 0; i < n; ++i) {
    Tensor ci = cross_features(
        Tensor({n_shells, 3},
               std::vector<double>(d.shell_vectors.data() + i * n_shells * 3,
                                   d.shell_vectors.data() + (i + 1) * n_shells * 3)));
    for (int j = 0; j < 3; ++j) est.per_point[3 * i + j] = ci[j];
  }

  double acc[3] = {0, 0, 0};
  for (int64_t i = 0; i < n; ++i)
    for (int j = 0; j < 3; ++j) acc[j] += est.per_point[3 * i + j];
  est.direction = Tensor::vec3(acc[0] / static_cast<double>(n), acc[1] / static_cast<double>(n),
                               acc[2] / static_cast<double>(n));
  est.magnitude = std::sqrt(sq(est.direction[0]) + sq(est.direction[1]) + sq(est.direction[2]));

  double scale = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double* p = cloud.points.data() + 3 * i;
    scale = std::max(scale, sq(p[0]) + sq(p[1]) + sq(p[2]));
  }
  scale = std::sqrt(scale);
  double eps0 = 1e-9 * scale;

  if (est.magnitude > eps0) {
    double inv = 1.0 / est.magnitude;
    est.unit_direction = Tensor::vec3(est.direction[0] * inv, est.direction[1] * inv,
                                      est.direction[2] * inv);
    est.degenerate = false;
  } else {
    est.unit_direction = Tensor::vec3(0, 0, 0);
    est.degenerate = true;
  }
  return est;
}

std::vector<int> plane_classifier(const PointCloud& cloud, const Tensor& direction) {
  if (direction.size() != 3) throw ContractError("plane_classifier expects a 3-vector direction");
  double nn = std::sqrt(sq(direction[0]) + sq(direction[1]) + sq(direction[2]));
  if (nn <= 0.0) throw DegenerateError("plane_classifier: zero direction");
  int64_t n = cloud.size();
  double c[3] = {0, 0, 0};
  for (int64_t i = 0; i < n; ++i)
    for (int j = 0; j < 3; ++j) c[j] += cloud.points[3 * i + j];
  double cnorm = std::sqrt(sq(c[0]) + sq(c[1]) + sq(c[2])) / static_cast<double>(n);
  if (cnorm >= 1e-9) throw ContractError("plane_classifier: cloud is not centered");

  double u[3] = {direction[0] / nn, direction[1] / nn, direction[2] / nn};
  std::vector<int> labels(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const double* p = cloud.points.data() + 3 * i;
    double proj = p[0] * u[0] + p[1] * u[1] + p[2] * u[2];
    labels[static_cast<size_t>(i)] = (proj > 0.0 && std::abs(proj) >= 1e-12) ? 1 : 0;
  }
  return labels;
}

double accuracy_best_sign(const std::vector<int>& predicted, const std::vector<int>& truth) {
  if (predicted.size() != truth.size())
    throw ContractError("accuracy_best_sign: length mismatch");
  if (predicted.empty()) throw ContractError("accuracy_best_sign: empty labels");
  int64_t match = 0;
  for (size_t i = 0; i < truth.size(); ++i)
    if (predicted[i] == truth[i]) ++match;
  double acc = static_cast<double>(match) / static_cast<double>(truth.size());
  return std::max(acc, 1.0 - acc);
}

}  // namespace oavnn
