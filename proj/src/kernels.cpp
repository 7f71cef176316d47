#include "oavnn/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <utility>
#include <vector>

namespace oavnn::kernels {

namespace {
std::atomic<bool> g_parallel{true};

constexpr double kTiny = 1e-300;  // guards 0/0 in norm derivatives

inline void cross3(const double* a, const double* b, double* c) {
  c[0] = a[1] * b[2] - a[2] * b[1];
  c[1] = a[2] * b[0] - a[0] * b[2];
  c[2] = a[0] * b[1] - a[1] * b[0];
}

inline double dot3(const double* a, const double* b) {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}
}  // namespace

bool parallel_enabled() { return g_parallel.load(std::memory_order_relaxed); }
void set_parallel(bool on) { g_parallel.store(on, std::memory_order_relaxed); }

// ---------------------------------------------------------------- contract

void contract_fwd_serial(const double* w, const double* x, double* y, int64_t rows, int64_t cout,
                         int64_t cin, int64_t inner) {
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = x + r * cin * inner;
    double* yr = y + r * cout * inner;
    for (int64_t j = 0; j < cout; ++j) {
      double* yj = yr + j * inner;
      for (int64_t t = 0; t < inner; ++t) yj[t] = 0.0;
      const double* wj = w + j * cin;
      for (int64_t k = 0; k < cin; ++k) {
        const double wjk = wj[k];
        const double* xk = xr + k * inner;
        for (int64_t t = 0; t < inner; ++t) yj[t] += wjk * xk[t];
      }
    }
  }
}

void contract_fwd_parallel(const double* w, const double* x, double* y, int64_t rows, int64_t cout,
                           int64_t cin, int64_t inner) {
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = x + r * cin * inner;
    double* yr = y + r * cout * inner;
    for (int64_t j = 0; j < cout; ++j) {
      double* yj = yr + j * inner;
      for (int64_t t = 0; t < inner; ++t) yj[t] = 0.0;
      const double* wj = w + j * cin;
      for (int64_t k = 0; k < cin; ++k) {
        const double wjk = wj[k];
        const double* xk = xr + k * inner;
        for (int64_t t = 0; t < inner; ++t) yj[t] += wjk * xk[t];
      }
    }
  }
}

void contract_fwd(const double* w, const double* x, double* y, int64_t rows, int64_t cout,
                  int64_t cin, int64_t inner) {
  if (parallel_enabled())
    contract_fwd_parallel(w, x, y, rows, cout, cin, inner);
  else
    contract_fwd_serial(w, x, y, rows, cout, cin, inner);
}

void contract_bwd_w_serial(const double* g, const double* x, double* gw, int64_t rows,
                           int64_t cout, int64_t cin, int64_t inner) {
  for (int64_t j = 0; j < cout; ++j) {
    for (int64_t k = 0; k < cin; ++k) {
      double acc = 0.0;
      for (int64_t r = 0; r < rows; ++r) {
        const double* gr = g + (r * cout + j) * inner;
        const double* xr = x + (r * cin + k) * inner;
        for (int64_t t = 0; t < inner; ++t) acc += gr[t] * xr[t];
      }
      gw[j * cin + k] += acc;
    }
  }
}

void contract_bwd_w_parallel(const double* g, const double* x, double* gw, int64_t rows,
                             int64_t cout, int64_t cin, int64_t inner) {
#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t j = 0; j < cout; ++j) {
    for (int64_t k = 0; k < cin; ++k) {
      double acc = 0.0;
      for (int64_t r = 0; r < rows; ++r) {
        const double* gr = g + (r * cout + j) * inner;
        const double* xr = x + (r * cin + k) * inner;
        for (int64_t t = 0; t < inner; ++t) acc += gr[t] * xr[t];
      }
      gw[j * cin + k] += acc;
    }
  }
}

void contract_bwd_w(const double* g, const double* x, double* gw, int64_t rows, int64_t cout,
                    int64_t cin, int64_t inner) {
  if (parallel_enabled())
    contract_bwd_w_parallel(g, x, gw, rows, cout, cin, inner);
  else
    contract_bwd_w_serial(g, x, gw, rows, cout, cin, inner);
}

void contract_bwd_x_serial(const double* g, const double* w, double* gx, int64_t rows,
                           int64_t cout, int64_t cin, int64_t inner) {
  for (int64_t r = 0; r < rows; ++r) {
    const double* gr = g + r * cout * inner;
    double* gxr = gx + r * cin * inner;
    for (int64_t j = 0; j < cout; ++j) {
      const double* gj = gr + j * inner;
      const double* wj = w + j * cin;
      for (int64_t k = 0; k < cin; ++k) {
        const double wjk = wj[k];
        double* gk = gxr + k * inner;
        for (int64_t t = 0; t < inner; ++t) gk[t] += wjk * gj[t];
      }
    }
  }
}

void contract_bwd_x_parallel(const double* g, const double* w, double* gx, int64_t rows,
                             int64_t cout, int64_t cin, int64_t inner) {
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < rows; ++r) {
    const double* gr = g + r * cout * inner;
    double* gxr = gx + r * cin * inner;
    for (int64_t j = 0; j < cout; ++j) {
      const double* gj = gr + j * inner;
      const double* wj = w + j * cin;
      for (int64_t k = 0; k < cin; ++k) {
        const double wjk = wj[k];
        double* gk = gxr + k * inner;
        for (int64_t t = 0; t < inner; ++t) gk[t] += wjk * gj[t];
      }
    }
  }
}

void contract_bwd_x(const double* g, const double* w, double* gx, int64_t rows, int64_t cout,
                    int64_t cin, int64_t inner) {
  if (parallel_enabled())
    contract_bwd_x_parallel(g, w, gx, rows, cout, cin, inner);
  else
    contract_bwd_x_serial(g, w, gx, rows, cout, cin, inner);
}

// ------------------------------------------------------------- vector rows

void cross_rows_serial(const double* a, const double* b, double* c, int64_t rows) {
  for (int64_t i = 0; i < rows; ++i) cross3(a + 3 * i, b + 3 * i, c + 3 * i);
}

void cross_rows_parallel(const double* a, const double* b, double* c, int64_t rows) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < rows; ++i) cross3(a + 3 * i, b + 3 * i, c + 3 * i);
}

void cross_rows(const double* a, const double* b, double* c, int64_t rows) {
  if (parallel_enabled())
    cross_rows_parallel(a, b, c, rows);
  else
    cross_rows_serial(a, b, c, rows);
}

void dot_rows_serial(const double* a, const double* b, double* d, int64_t rows, int64_t len) {
  for (int64_t i = 0; i < rows; ++i) {
    double acc = 0.0;
    for (int64_t t = 0; t < len; ++t) acc += a[i * len + t] * b[i * len + t];
    d[i] = acc;
  }
}

void dot_rows_parallel(const double* a, const double* b, double* d, int64_t rows, int64_t len) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < rows; ++i) {
    double acc = 0.0;
    for (int64_t t = 0; t < len; ++t) acc += a[i * len + t] * b[i * len + t];
    d[i] = acc;
  }
}

void dot_rows(const double* a, const double* b, double* d, int64_t rows, int64_t len) {
  if (parallel_enabled())
    dot_rows_parallel(a, b, d, rows, len);
  else
    dot_rows_serial(a, b, d, rows, len);
}

void norm_rows_serial(const double* a, double* n, int64_t rows, int64_t len) {
  for (int64_t i = 0; i < rows; ++i) {
    double acc = 0.0;
    for (int64_t t = 0; t < len; ++t) acc += a[i * len + t] * a[i * len + t];
    n[i] = std::sqrt(acc);
  }
}

void norm_rows_parallel(const double* a, double* n, int64_t rows, int64_t len) {
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < rows; ++i) {
    double acc = 0.0;
    for (int64_t t = 0; t < len; ++t) acc += a[i * len + t] * a[i * len + t];
    n[i] = std::sqrt(acc);
  }
}

void norm_rows(const double* a, double* n, int64_t rows, int64_t len) {
  if (parallel_enabled())
    norm_rows_parallel(a, n, rows, len);
  else
    norm_rows_serial(a, n, rows, len);
}

// ----------------------------------------------------------------- softmax

namespace {
inline void softmax_one(const double* x, double* y, int64_t len, int64_t stride) {
  double m = x[0];
  for (int64_t l = 1; l < len; ++l) m = std::max(m, x[l * stride]);
  double sum = 0.0;
  for (int64_t l = 0; l < len; ++l) {
    double e = std::exp(x[l * stride] - m);
    y[l * stride] = e;
    sum += e;
  }
  double inv = 1.0 / sum;
  for (int64_t l = 0; l < len; ++l) y[l * stride] *= inv;
}
}  // namespace

void softmax_strided_serial(const double* x, double* y, int64_t outer, int64_t len,
                            int64_t inner) {
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < inner; ++i)
      softmax_one(x + o * len * inner + i, y + o * len * inner + i, len, inner);
}

void softmax_strided_parallel(const double* x, double* y, int64_t outer, int64_t len,
                              int64_t inner) {
#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < inner; ++i)
      softmax_one(x + o * len * inner + i, y + o * len * inner + i, len, inner);
}

void softmax_strided(const double* x, double* y, int64_t outer, int64_t len, int64_t inner) {
  if (parallel_enabled())
    softmax_strided_parallel(x, y, outer, len, inner);
  else
    softmax_strided_serial(x, y, outer, len, inner);
}

// --------------------------------------------------------------------- knn

namespace {
inline void knn_point(const double* pts, int64_t n, int64_t k, int64_t i, int64_t* row,
                      std::vector<std::pair<double, int64_t>>& scratch) {
  scratch.clear();
  const double* pi = pts + 3 * i;
  for (int64_t j = 0; j < n; ++j) {
    if (j == i) continue;
    const double* pj = pts + 3 * j;
    double dx = pj[0] - pi[0], dy = pj[1] - pi[1], dz = pj[2] - pi[2];
    scratch.emplace_back(dx * dx + dy * dy + dz * dz, j);
  }
  std::partial_sort(scratch.begin(), scratch.begin() + k, scratch.end());
  for (int64_t m = 0; m < k; ++m) row[m] = scratch[static_cast<size_t>(m)].second;
}
}  // namespace

void knn_brute_serial(const double* pts, int64_t n, int64_t k, int64_t* out) {
  std::vector<std::pair<double, int64_t>> scratch;
  scratch.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) knn_point(pts, n, k, i, out + i * k, scratch);
}

void knn_brute_parallel(const double* pts, int64_t n, int64_t k, int64_t* out) {
#pragma omp parallel
  {
    std::vector<std::pair<double, int64_t>> scratch;
    scratch.reserve(static_cast<size_t>(n));
#pragma omp for schedule(static)
    for (int64_t i = 0; i < n; ++i) knn_point(pts, n, k, i, out + i * k, scratch);
  }
}

void knn_brute(const double* pts, int64_t n, int64_t k, int64_t* out) {
  if (parallel_enabled())
    knn_brute_parallel(pts, n, k, out);
  else
    knn_brute_serial(pts, n, k, out);
}

// --------------------------------------------------------------- attention

namespace {
// One (channel, query) pair: logits over all keys, softmax, then the
// normalized-cross value combination.
inline void attention_fwd_one(const double* q, const double* k, const double* v, double* out,
                              double* alpha_row, int64_t n, int64_t c, double eps, int64_t ch,
                              int64_t p) {
  const double* qp = q + (p * c + ch) * 3;
  double m = -std::numeric_limits<double>::infinity();
  for (int64_t j = 0; j < n; ++j) {
    double cr[3];
    cross3(qp, k + (j * c + ch) * 3, cr);
    double l = std::sqrt(dot3(cr, cr));
    alpha_row[j] = l;
    m = std::max(m, l);
  }
  double sum = 0.0;
  for (int64_t j = 0; j < n; ++j) {
    double e = std::exp(alpha_row[j] - m);
    alpha_row[j] = e;
    sum += e;
  }
  double inv = 1.0 / sum;
  double acc[3] = {0.0, 0.0, 0.0};
  for (int64_t j = 0; j < n; ++j) {
    alpha_row[j] *= inv;
    double cr[3];
    cross3(qp, v + (j * c + ch) * 3, cr);
    double s = alpha_row[j] / (std::sqrt(dot3(cr, cr)) + eps);
    acc[0] += s * cr[0];
    acc[1] += s * cr[1];
    acc[2] += s * cr[2];
  }
  double* op = out + (p * c + ch) * 3;
  op[0] = acc[0];
  op[1] = acc[1];
  op[2] = acc[2];
}
}  // namespace

void attention_fwd_serial(const double* q, const double* k, const double* v, double* out,
                          double* alpha, int64_t n, int64_t c, double eps) {
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t p = 0; p < n; ++p)
      attention_fwd_one(q, k, v, out, alpha + (ch * n + p) * n, n, c, eps, ch, p);
}

void attention_fwd_parallel(const double* q, const double* k, const double* v, double* out,
                            double* alpha, int64_t n, int64_t c, double eps) {
#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t p = 0; p < n; ++p)
      attention_fwd_one(q, k, v, out, alpha + (ch * n + p) * n, n, c, eps, ch, p);
}

void attention_fwd(const double* q, const double* k, const double* v, double* out, double* alpha,
                   int64_t n, int64_t c, double eps) {
  if (parallel_enabled())
    attention_fwd_parallel(q, k, v, out, alpha, n, c, eps);
  else
    attention_fwd_serial(q, k, v, out, alpha, n, c, eps);
}

namespace {
// Per-channel backward. gk/gv rows accumulate across all queries, so the
// parallel split is across channels only.
inline void attention_bwd_channel(const double* q, const double* k, const double* v,
                                  const double* alpha, const double* out, const double* g,
                                  double* gq, double* gk, double* gv, int64_t n, int64_t c,
                                  double eps, int64_t ch) {
  for (int64_t p = 0; p < n; ++p) {
    const double* qp = q + (p * c + ch) * 3;
    const double* gp = g + (p * c + ch) * 3;
    const double* op = out + (p * c + ch) * 3;
    const double* arow = alpha + (ch * n + p) * n;
    double* gqp = gq + (p * c + ch) * 3;
    // softmax pullback needs sum_j alpha_j * (g . u_j) = g . out
    const double gdotout = dot3(gp, op);
    for (int64_t j = 0; j < n; ++j) {
      const double* kj = k + (j * c + ch) * 3;
      const double* vj = v + (j * c + ch) * 3;
      const double a = arow[j];

      // value path: u = (q x v) / (|q x v| + eps), du = a * g
      double crv[3];
      cross3(qp, vj, crv);
      double nv = std::sqrt(dot3(crv, crv));
      double s = 1.0 / (nv + eps);
      double gdotcr = dot3(gp, crv);
      double coef = nv > kTiny ? a * s * s * gdotcr / nv : 0.0;
      double dcrv[3] = {a * s * gp[0] - coef * crv[0], a * s * gp[1] - coef * crv[1],
                        a * s * gp[2] - coef * crv[2]};

      // logit path: l = |q x k|, dl via softmax pullback
      double u0 = s * crv[0], u1 = s * crv[1], u2 = s * crv[2];
      double gdotu = gp[0] * u0 + gp[1] * u1 + gp[2] * u2;
      double dl = a * (gdotu - gdotout);
      double crk[3];
      cross3(qp, kj, crk);
      double lk = std::sqrt(dot3(crk, crk));
      double fl = lk > kTiny ? dl / lk : 0.0;
      double dcrk[3] = {fl * crk[0], fl * crk[1], fl * crk[2]};

      // cross pullbacks: c = a x b  =>  da += b x gc, db += gc x a
      double t[3];
      cross3(vj, dcrv, t);
      gqp[0] += t[0];
      gqp[1] += t[1];
      gqp[2] += t[2];
      cross3(dcrv, qp, t);
      double* gvj = gv + (j * c + ch) * 3;
      gvj[0] += t[0];
      gvj[1] += t[1];
      gvj[2] += t[2];
      cross3(kj, dcrk, t);
      gqp[0] += t[0];
      gqp[1] += t[1];
      gqp[2] += t[2];
      cross3(dcrk, qp, t);
      double* gkj = gk + (j * c + ch) * 3;
      gkj[0] += t[0];
      gkj[1] += t[1];
      gkj[2] += t[2];
    }
  }
}
}  // namespace

void attention_bwd_serial(const double* q, const double* k, const double* v, const double* alpha,
                          const double* out, const double* g, double* gq, double* gk, double* gv,
                          int64_t n, int64_t c, double eps) {
  for (int64_t ch = 0; ch < c; ++ch)
    attention_bwd_channel(q, k, v, alpha, out, g, gq, gk, gv, n, c, eps, ch);
}

void attention_bwd_parallel(const double* q, const double* k, const double* v, const double* alpha,
                            const double* out, const double* g, double* gq, double* gk, double* gv,
                            int64_t n, int64_t c, double eps) {
#pragma omp parallel for schedule(static)
  for (int64_t ch = 0; ch < c; ++ch)
    attention_bwd_channel(q, k, v, alpha, out, g, gq, gk, gv, n, c, eps, ch);
}

void attention_bwd(const double* q, const double* k, const double* v, const double* alpha,
                   const double* out, const double* g, double* gq, double* gk, double* gv,
                   int64_t n, int64_t c, double eps) {
  if (parallel_enabled())
    attention_bwd_parallel(q, k, v, alpha, out, g, gq, gk, gv, n, c, eps);
  else
    attention_bwd_serial(q, k, v, alpha, out, g, gq, gk, gv, n, c, eps);
}

}  // namespace oavnn::kernels
