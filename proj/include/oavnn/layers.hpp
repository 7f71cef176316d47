#pragma once

#include <cstdint>
#include <vector>

#include "oavnn/autodiff.hpp"
#include "oavnn/tensor.hpp"

namespace oavnn {

// Feature tensors are [..., C, 3]: vector-valued channels with the spatial
// axis last. All layers here commute with right-multiplication by O(3)
// matrices unless stated otherwise.

/// out[..., j, :] = sum_k w[j,k] x[..., k, :]
Var vn_linear(Var x, Var w);

/// Projection ReLU: q = Wx, k = Ux; q passes through where <q,k> >= 0, else
/// the component along k is removed. Zero-norm k (< 1e-12) passes q through.
Var vn_relu(Var x, Var w, Var u);

/// Arithmetic mean along `axis` (kept out of the shape).
Var vn_mean_pool(Var x, int axis);

/// Mean over the leading point axis, reshaped to [1, C, 3].
Var vn_global_mean(Var x);

/// Invariant head: D = vn_linear([x || broadcast global mean], t_params) with
/// 3 output channels; returns the C x 3 inner products <x[i,c], D[i,d]>
/// flattened to [N, 3C]. t_params is [3, 2C].
Var vn_invariant(Var x, Var t_params);

/// Per-point, per-channel positively oriented orthonormal bases with the
/// third row along J. Rows are (U1, U2, Jhat); zero-norm J yields the
/// identity basis and a degenerate flag.
struct BasisField {
  Tensor bases;                    // [N, C, 3, 3]
  std::vector<uint8_t> degenerate; // N*C flags
};
BasisField orient_basis(const Tensor& j);

/// Orientation-aware linear layer. For each input channel k with unit axis
/// jhat = J[i,k]/|J[i,k]| and vector v = V[i,k]:
///   out[i,j] = sum_k A[j,k](v - (v.jhat)jhat) + B[j,k](jhat x v) + C[j,k](v.jhat)jhat
/// Channels with |J| < 1e-12 contribute A[j,k] v only. This closed form
/// equals the rotate-dilate-rotate-back basis formulation for every valid
/// right-handed orthonormal basis completion (gauge freedom drops out).
Var complex_linear(Var v, Var j, Var a, Var b, Var c);

/// Reference evaluation through an explicit basis field:
///   out[i,j] = sum_k R_ik Z(A,B,C)_jk R_ik^T v_ik
/// with R_ik the transpose of bases[i,k]. Used to check gauge invariance
/// against the closed form; flagged-degenerate channels contribute A v.
Tensor complex_linear_basis_form(const Tensor& v, const BasisField& basis, const Tensor& a,
                                 const Tensor& b, const Tensor& c);

/// Cross-product attention over points, per channel: softmax_q |Q_p x K_q|
/// weights combine normalized Q_p x V_q directions. weights is [C, N, N].
struct AttentionResult {
  Var out;         // [N, C, 3]
  Tensor weights;  // [C, N, N], rows sum to 1
};
AttentionResult cross_attention_layer(Var q, Var k, Var v, double eps = 1e-8);

}  // namespace oavnn
