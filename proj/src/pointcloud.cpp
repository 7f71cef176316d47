#include "oavnn/pointcloud.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "oavnn/kernels.hpp"
#include "oavnn/rng.hpp"

namespace oavnn {

ShapeKind shape_kind_from_string(const std::string& s) {
  if (s == "airplane") return ShapeKind::kAirplane;
  if (s == "chair") return ShapeKind::kChair;
  if (s == "cap") return ShapeKind::kCap;
  if (s == "table") return ShapeKind::kTable;
  throw ContractError("unknown shape kind '" + s + "'");
}

std::string to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::kAirplane: return "airplane";
    case ShapeKind::kChair: return "chair";
    case ShapeKind::kCap: return "cap";
    case ShapeKind::kTable: return "table";
  }
  return "?";
}

PointCloud load_xyz(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path + "'");
  std::vector<double> pts;
  std::vector<int> labels;
  bool saw_labeled = false, saw_unlabeled = false;
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::vector<std::string> tok;
    std::string t;
    while (ls >> t) tok.push_back(t);
    if (tok.empty()) continue;
    if (tok.size() != 3 && tok.size() != 4)
      throw ParseError("expected 3 or 4 fields, got " + std::to_string(tok.size()), lineno);
    double xyz[3];
    for (int i = 0; i < 3; ++i) {
      size_t used = 0;
      try {
        xyz[i] = std::stod(tok[static_cast<size_t>(i)], &used);
      } catch (const std::exception&) {
        throw ParseError("bad number '" + tok[static_cast<size_t>(i)] + "'", lineno);
      }
      if (used != tok[static_cast<size_t>(i)].size())
        throw ParseError("bad number '" + tok[static_cast<size_t>(i)] + "'", lineno);
      if (!std::isfinite(xyz[i])) throw ParseError("non-finite coordinate", lineno);
    }
    if (tok.size() == 4) {
      if (tok[3] != "0" && tok[3] != "1")
        throw ParseError("label must be 0 or 1, got '" + tok[3] + "'", lineno);
      labels.push_back(tok[3] == "1" ? 1 : 0);
      saw_labeled = true;
    } else {
      saw_unlabeled = true;
    }
    if (saw_labeled && saw_unlabeled)
      throw ParseError("mixed labeled and unlabeled lines", lineno);
    pts.insert(pts.end(), xyz, xyz + 3);
  }
  int64_t n = static_cast<int64_t>(pts.size()) / 3;
  if (n < 2) throw ParseError("point cloud needs at least 2 points, got " + std::to_string(n));
  PointCloud c;
  c.points = Tensor({n, 3}, std::move(pts));
  c.labels = std::move(labels);
  c.name = path;
  return c;
}

void save_xyz(const PointCloud& cloud, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write '" + path + "'");
  char buf[96];
  int64_t n = cloud.size();
  bool lab = cloud.labeled();
  if (lab && static_cast<int64_t>(cloud.labels.size()) != n)
    throw ContractError("label count does not match point count");
  for (int64_t i = 0; i < n; ++i) {
    const double* p = cloud.points.data() + 3 * i;
    if (lab)
      std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g %d\n", p[0], p[1], p[2],
                    cloud.labels[static_cast<size_t>(i)]);
    else
      std::snprintf(buf, sizeof buf, "%.17g %.17g %.17g\n", p[0], p[1], p[2]);
    out << buf;
  }
  if (!out) throw ParseError("write failed for '" + path + "'");
}

PointCloud center_unit_scale(const PointCloud& cloud) {
  int64_t n = cloud.size();
  if (n < 2) throw ContractError("center_unit_scale needs at least 2 points");
  double c[3] = {0, 0, 0};
  for (int64_t i = 0; i < n; ++i)
    for (int j = 0; j < 3; ++j) c[j] += cloud.points[3 * i + j];
  for (int j = 0; j < 3; ++j) c[j] /= static_cast<double>(n);
  PointCloud out = cloud;
  double max_sq = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double sq_sum = 0.0;
    for (int j = 0; j < 3; ++j) {
      double v = cloud.points[3 * i + j] - c[j];
      out.points[3 * i + j] = v;
      sq_sum += v * v;
    }
    max_sq = std::max(max_sq, sq_sum);
  }
  if (max_sq <= 0.0) throw DegenerateError("all points identical");
  double inv = 1.0 / std::sqrt(max_sq);
  for (int64_t i = 0; i < 3 * n; ++i) out.points[i] *= inv;
  return out;
}

IndexMatrix knn(const Tensor& points, int64_t k) {
  if (points.ndim() != 2 || points.shape()[1] != 3)
    throw ContractError("knn expects an [N,3] tensor");
  int64_t n = points.shape()[0];
  if (k < 1 || k > n - 1)
    throw ContractError("knn: k=" + std::to_string(k) + " out of range for N=" +
                        std::to_string(n));
  IndexMatrix m;
  m.rows = n;
  m.cols = k;
  m.data.resize(static_cast<size_t>(n * k));
  kernels::knn_brute(points.data(), n, k, m.data.data());
  return m;
}

Tensor nn_embedding(const PointCloud& cloud, int64_t k) {
  IndexMatrix nbr = knn(cloud.points, k);
  int64_t n = cloud.size();
  Tensor emb({n, k, 2, 3});
  for (int64_t i = 0; i < n; ++i) {
    const double* pi = cloud.points.data() + 3 * i;
    for (int64_t m = 0; m < k; ++m) {
      const double* pj = cloud.points.data() + 3 * nbr(i, m);
      double* e = emb.data() + ((i * k + m) * 2) * 3;
      e[0] = pj[0] - pi[0];
      e[1] = pj[1] - pi[1];
      e[2] = pj[2] - pi[2];
      e[3] = pi[0];
      e[4] = pi[1];
      e[5] = pi[2];
    }
  }
  return emb;
}

TransformO3 random_o3(uint64_t seed, bool improper) {
  Rng rng(seed);
  double q[4], nsq = 0.0;
  do {
    nsq = 0.0;
    for (double& v : q) {
      v = rng.normal();
      nsq += v * v;
    }
  } while (nsq < 1e-12);
  double inv = 1.0 / std::sqrt(nsq);
  double w = q[0] * inv, x = q[1] * inv, y = q[2] * inv, z = q[3] * inv;
  Tensor m({3, 3});
  m[0] = 1 - 2 * (y * y + z * z);
  m[1] = 2 * (x * y - w * z);
  m[2] = 2 * (x * z + w * y);
  m[3] = 2 * (x * y + w * z);
  m[4] = 1 - 2 * (x * x + z * z);
  m[5] = 2 * (y * z - w * x);
  m[6] = 2 * (x * z - w * y);
  m[7] = 2 * (y * z + w * x);
  m[8] = 1 - 2 * (x * x + y * y);
  TransformO3 t;
  if (improper) {
    // compose with the x-mirror: negate the first row
    for (int j = 0; j < 3; ++j) m[j] = -m[j];
    t.det = -1.0;
  } else {
    t.det = 1.0;
  }
  t.matrix = std::move(m);
  return t;
}

namespace {

// One random point on the right (x >= 0) half of a shape, in raw model
// coordinates. Surfaces are unions of primitive patches; the fixed weights
// just apportion sample counts. The tiny x floor keeps samples strictly off
// the mirror plane so label construction never produces duplicate points
// with opposing labels.
std::array<double, 3> half_point(ShapeKind kind, Rng& rng) {
  auto unit_dir = [&rng]() {
    double d[3], nsq;
    do {
      nsq = 0.0;
      for (double& v : d) {
        v = rng.normal();
        nsq += v * v;
      }
    } while (nsq < 1e-12);
    double inv = 1.0 / std::sqrt(nsq);
    return std::array<double, 3>{d[0] * inv, d[1] * inv, d[2] * inv};
  };
  double r = rng.uniform();
  std::array<double, 3> p{0, 0, 0};
  switch (kind) {
    case ShapeKind::kAirplane: {
      if (r < 0.35) {  // fuselage ellipsoid, long axis = y
        auto d = unit_dir();
        p = {0.12 * std::abs(d[0]), 0.85 * d[1], 0.12 * d[2]};
      } else if (r < 0.80) {  // swept wing
        double s = rng.uniform(), u = rng.uniform(), v = rng.uniform();
        double chord = 0.30 * (1.0 - 0.55 * s);
        p = {0.08 + 0.82 * s, 0.10 - 0.45 * s + chord * (u - 0.5), 0.02 * (v - 0.5)};
      } else {  // vertical tail fin at the rear; breaks up-down symmetry
        double u = rng.uniform(), v = rng.uniform(), w = rng.uniform();
        p = {0.012 * w, -0.86 + 0.22 * u, 0.05 + 0.33 * v};
      }
      break;
    }
    case ShapeKind::kChair: {
      if (r < 0.35) {  // seat
        p = {0.45 * rng.uniform(), -0.40 + 0.80 * rng.uniform(), 0.06 * rng.uniform()};
      } else if (r < 0.70) {  // back rest, +y side only
        p = {0.45 * rng.uniform(), 0.34 + 0.06 * rng.uniform(), 0.06 + 0.84 * rng.uniform()};
      } else {  // front and rear leg on this side
        double yc = rng.uniform() < 0.5 ? -0.34 : 0.34;
        p = {0.33 + 0.10 * rng.uniform(), yc - 0.05 + 0.10 * rng.uniform(),
             -0.50 + 0.50 * rng.uniform()};
      }
      break;
    }
    case ShapeKind::kCap: {
      if (r < 0.70) {  // dome
        auto d = unit_dir();
        p = {0.5 * std::abs(d[0]), 0.5 * d[1], 0.5 * std::abs(d[2])};
      } else {  // one-sided brim toward -y; breaks front-back symmetry
        double rr = 0.50 + 0.35 * rng.uniform();
        double phi = 65.0 * M_PI / 180.0 * rng.uniform();
        p = {rr * std::sin(phi), -rr * std::cos(phi), 0.012 * (rng.uniform() - 0.5)};
      }
      break;
    }
    case ShapeKind::kTable: {  // quarter: x >= 0 and y >= 0
      if (r < 0.55) {          // top slab
        p = {0.70 * rng.uniform(), 0.45 * rng.uniform(), 0.38 + 0.06 * rng.uniform()};
      } else {  // leg
        p = {0.55 + 0.10 * rng.uniform(), 0.30 + 0.10 * rng.uniform(),
             -0.44 + 0.82 * rng.uniform()};
      }
      p[1] = std::max(p[1], 1e-6);
      break;
    }
  }
  p[0] = std::max(p[0], 1e-6);
  return p;
}

}  // namespace

PointCloud gen_shape(const ShapeSpec& spec) {
  if (spec.n_points < 2 || spec.n_points % 2 != 0)
    throw ContractError("gen_shape: n_points must be even and >= 2");
  if (spec.kind == ShapeKind::kTable && spec.n_points % 4 != 0)
    throw ContractError("gen_shape: table needs n_points divisible by 4");
  if (spec.jitter_sigma < 0) throw ContractError("gen_shape: jitter_sigma must be >= 0");

  Rng rng(spec.seed);
  PointCloud c;
  c.points = Tensor({spec.n_points, 3});
  c.labels.resize(static_cast<size_t>(spec.n_points));
  c.name = to_string(spec.kind) + "_" + std::to_string(spec.seed);

  int64_t i = 0;
  auto emit = [&](double x, double y, double z, int label) {
    c.points[3 * i + 0] = x;
    c.points[3 * i + 1] = y;
    c.points[3 * i + 2] = z;
    c.labels[static_cast<size_t>(i)] = label;
    ++i;
  };
  if (spec.kind == ShapeKind::kTable) {
    for (int64_t d = 0; d < spec.n_points / 4; ++d) {
      auto p = half_point(spec.kind, rng);
      emit(p[0], p[1], p[2], 1);
      emit(-p[0], p[1], p[2], 0);
      emit(p[0], -p[1], p[2], 1);
      emit(-p[0], -p[1], p[2], 0);
    }
  } else {
    for (int64_t d = 0; d < spec.n_points / 2; ++d) {
      auto p = half_point(spec.kind, rng);
      emit(p[0], p[1], p[2], 1);
      emit(-p[0], p[1], p[2], 0);
    }
  }

  if (spec.jitter_sigma > 0) {
    for (int64_t j = 0; j < c.points.size(); ++j)
      c.points[j] += spec.jitter_sigma * rng.normal();
  }
  return center_unit_scale(c);
}

PointCloud apply_transform(const PointCloud& cloud, const TransformO3& t) {
  if (t.matrix.ndim() != 2 || t.matrix.shape()[0] != 3 || t.matrix.shape()[1] != 3)
    throw ContractError("apply_transform expects a 3x3 matrix");
  PointCloud out = cloud;
  const double* m = t.matrix.data();
  for (int64_t i = 0; i < cloud.size(); ++i) {
    const double* p = cloud.points.data() + 3 * i;
    double* q = out.points.data() + 3 * i;
    for (int j = 0; j < 3; ++j) q[j] = p[0] * m[0 * 3 + j] + p[1] * m[1 * 3 + j] + p[2] * m[2 * 3 + j];
  }
  return out;
}

double mirror_residual(const PointCloud& cloud) {
  return mirror_residual_about(cloud, Tensor::vec3(1, 0, 0));
}

double mirror_residual_about(const PointCloud& cloud, const Tensor& normal) {
  if (normal.size() != 3) throw ContractError("mirror_residual_about expects a 3-vector normal");
  double nn = 0.0;
  for (int i = 0; i < 3; ++i) nn += normal[i] * normal[i];
  if (nn <= 0.0) throw ContractError("mirror_residual_about: zero normal");
  double inv = 1.0 / std::sqrt(nn);
  double nh[3] = {normal[0] * inv, normal[1] * inv, normal[2] * inv};
  int64_t n = cloud.size();
  double worst = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double* p = cloud.points.data() + 3 * i;
    double proj = 2.0 * (p[0] * nh[0] + p[1] * nh[1] + p[2] * nh[2]);
    double m[3] = {p[0] - proj * nh[0], p[1] - proj * nh[1], p[2] - proj * nh[2]};
    double best = std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < n; ++j) {
      const double* q = cloud.points.data() + 3 * j;
      double d = sq(q[0] - m[0]) + sq(q[1] - m[1]) + sq(q[2] - m[2]);
      best = std::min(best, d);
    }
    worst = std::max(worst, best);
  }
  return std::sqrt(worst);
}

}  // namespace oavnn
