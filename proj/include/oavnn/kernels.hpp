#pragma once

#include <cstdint>

namespace oavnn::kernels {

/// Runtime switch between the OpenMP kernels and the serial references.
/// Both paths produce bit-identical results: parallel loops only ever split
/// across independent output elements, never across a reduction.
bool parallel_enabled();
void set_parallel(bool on);

// ---- channel contraction: y[r,j,t] = sum_k w[j,k] * x[r,k,t] ----
// r indexes the flattened leading axes, t the flattened trailing axes.
void contract_fwd_serial(const double* w, const double* x, double* y, int64_t rows, int64_t cout,
                         int64_t cin, int64_t inner);
void contract_fwd_parallel(const double* w, const double* x, double* y, int64_t rows, int64_t cout,
                           int64_t cin, int64_t inner);
void contract_fwd(const double* w, const double* x, double* y, int64_t rows, int64_t cout,
                  int64_t cin, int64_t inner);

// gw[j,k] += sum_{r,t} g[r,j,t] * x[r,k,t]
void contract_bwd_w_serial(const double* g, const double* x, double* gw, int64_t rows,
                           int64_t cout, int64_t cin, int64_t inner);
void contract_bwd_w_parallel(const double* g, const double* x, double* gw, int64_t rows,
                             int64_t cout, int64_t cin, int64_t inner);
void contract_bwd_w(const double* g, const double* x, double* gw, int64_t rows, int64_t cout,
                    int64_t cin, int64_t inner);

// gx[r,k,t] += sum_j w[j,k] * g[r,j,t]
void contract_bwd_x_serial(const double* g, const double* w, double* gx, int64_t rows,
                           int64_t cout, int64_t cin, int64_t inner);
void contract_bwd_x_parallel(const double* g, const double* w, double* gx, int64_t rows,
                             int64_t cout, int64_t cin, int64_t inner);
void contract_bwd_x(const double* g, const double* w, double* gx, int64_t rows, int64_t cout,
                    int64_t cin, int64_t inner);

// ---- batched 3-vector ops over `rows` rows ----
void cross_rows_serial(const double* a, const double* b, double* c, int64_t rows);
void cross_rows_parallel(const double* a, const double* b, double* c, int64_t rows);
void cross_rows(const double* a, const double* b, double* c, int64_t rows);

void dot_rows_serial(const double* a, const double* b, double* d, int64_t rows, int64_t len);
void dot_rows_parallel(const double* a, const double* b, double* d, int64_t rows, int64_t len);
void dot_rows(const double* a, const double* b, double* d, int64_t rows, int64_t len);

void norm_rows_serial(const double* a, double* n, int64_t rows, int64_t len);
void norm_rows_parallel(const double* a, double* n, int64_t rows, int64_t len);
void norm_rows(const double* a, double* n, int64_t rows, int64_t len);

// ---- softmax along the middle axis of an [outer, len, inner] view ----
// Max-subtracted for stability.
void softmax_strided_serial(const double* x, double* y, int64_t outer, int64_t len, int64_t inner);
void softmax_strided_parallel(const double* x, double* y, int64_t outer, int64_t len,
                              int64_t inner);
void softmax_strided(const double* x, double* y, int64_t outer, int64_t len, int64_t inner);

// ---- brute-force k nearest neighbors ----
// out is n*k row-major; row i holds the k nearest neighbors of point i
// (self excluded) ordered by (squared distance, index).
void knn_brute_serial(const double* pts, int64_t n, int64_t k, int64_t* out);
void knn_brute_parallel(const double* pts, int64_t n, int64_t k, int64_t* out);
void knn_brute(const double* pts, int64_t n, int64_t k, int64_t* out);

// ---- fused cross-product attention ----
// q,k,v: n*c*3.  out: n*c*3.  alpha: c*n*n with alpha[ch,p,:] the softmax over
// keys of ||q[p,ch] x k[:,ch]||.  out[p,ch] = sum_q alpha * (q[p,ch] x v[q,ch])
// normalized by (||q x v|| + eps).
void attention_fwd_serial(const double* q, const double* k, const double* v, double* out,
                          double* alpha, int64_t n, int64_t c, double eps);
void attention_fwd_parallel(const double* q, const double* k, const double* v, double* out,
                            double* alpha, int64_t n, int64_t c, double eps);
void attention_fwd(const double* q, const double* k, const double* v, double* out, double* alpha,
                   int64_t n, int64_t c, double eps);

// Accumulates (+=) into gq, gk, gv. g is dL/dout, alpha comes from the
// forward pass, out is the stored forward output.
void attention_bwd_serial(const double* q, const double* k, const double* v, const double* alpha,
                          const double* out, const double* g, double* gq, double* gk, double* gv,
                          int64_t n, int64_t c, double eps);
void attention_bwd_parallel(const double* q, const double* k, const double* v, const double* alpha,
                            const double* out, const double* g, double* gq, double* gk, double* gv,
                            int64_t n, int64_t c, double eps);
void attention_bwd(const double* q, const double* k, const double* v, const double* alpha,
                   const double* out, const double* g, double* gq, double* gk, double* gv,
                   int64_t n, int64_t c, double eps);

}  // namespace oavnn::kernels
