#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "oavnn/tensor.hpp"

namespace oavnn {

class Tape;

enum class Op : uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kScalarScale,
  kMul,
  kChannelContract,
  kCross,
  kDot,
  kNormLast,
  kSoftmaxAxis,
  kMeanAxis,
  kConcatAxis,
  kGatherRows,
  kSelectWhere,
  kMat3Apply,
  kTransposeLast2,
  kSquare,
  kSqrt,
  kLog,
  kSigmoid,
  kRecip,
  kCrossAttention,
};

const char* op_name(Op op);

/// Handle to a value recorded on a tape. The shape lives on the handle, so
/// reshaping is metadata-only: the flat buffer and its gradient stay keyed by
/// the node id and row-major order is preserved.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id, Shape shape) : tape_(tape), id_(id), shape_(std::move(shape)) {}

  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  const Shape& shape() const { return shape_; }
  int64_t size() const { return shape_numel(shape_); }
  int64_t extent(int axis) const { return shape_[resolve_axis(shape_, axis)]; }

  /// The forward value under this handle's shape.
  Tensor value() const;

  Var reshaped(Shape s) const;
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
  Shape shape_;
};

struct Node {
  Op op = Op::kLeaf;
  std::vector<int> inputs;
  Tensor value;
  bool requires_grad = false;
  // static attributes, meaning depends on op
  int64_t axis = 0;
  double scalar = 0.0;
  std::vector<int64_t> indices;  // gather_rows
  Shape index_shape;             // gather_rows
  Tensor aux;                    // select_where mask / attention alpha
};

using GradMap = std::unordered_map<int, Tensor>;

/// Records an eagerly-evaluated primitive graph and replays it in reverse.
/// Nodes are appended in topological order by construction; backward walks
/// them once, back to front. Single-threaded per instance.
class Tape {
 public:
  Var leaf(Tensor v, bool requires_grad = false);
  Var constant(Tensor v) { return leaf(std::move(v), false); }
  /// Trainable leaf; included in the map backward() returns.
  Var param(Tensor v);

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var scalar_scale(Var a, double s);
  /// Elementwise product. b may have a prefix of a's shape; its value is then
  /// broadcast across a's trailing axes.
  Var mul(Var a, Var b);
  /// w is [C_out, C_in]; contracts x's `axis` (extent C_in) against w.
  Var channel_contract(Var w, Var x, int axis = -2);
  Var cross(Var a, Var b);
  Var dot(Var a, Var b);
  Var norm_last(Var a);
  Var softmax_axis(Var x, int axis);
  /// Arithmetic mean along `axis`; the axis is dropped from the shape.
  Var mean_axis(Var x, int axis);
  Var concat_axis(const std::vector<Var>& xs, int axis);
  /// out[m, ...] = x[idx[m], ...]; output shape is index_shape + x.shape[1:].
  /// An empty index_shape means {len(idx)}.
  Var gather_rows(Var x, const std::vector<int64_t>& idx, Shape index_shape = {});
  /// mask!=0 picks a, else b. mask shape equals a's shape or a prefix of it.
  Var select_where(Tensor mask, Var a, Var b);
  /// m: [P,3,3], v: [P,...,3] -> out[p,...,r] = sum_t m[p,r,t] v[p,...,t].
  Var mat3_apply(Var m, Var v);
  Var transpose_last2(Var x);
  Var square(Var x);
  Var sqrt(Var x);
  Var log(Var x);
  Var sigmoid(Var x);
  Var recip(Var x);
  /// Fused cross-product attention over points (see kernels::attention_fwd).
  /// Returns the combined output; attention_weights(out) exposes alpha.
  Var cross_attention(Var q, Var k, Var v, double eps = 1e-8);

  /// alpha of a cross_attention result, laid out [C, N, N].
  Tensor attention_weights(Var attention_out) const;

  /// Reverse pass from a scalar loss. Returns gradients for every param leaf;
  /// params the loss does not reach get zeros.
  GradMap backward(Var loss);

  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
  size_t size() const { return nodes_.size(); }
  const std::vector<int>& params() const { return params_; }

 private:
  friend class Var;
  int push(Node n);
  Var result(Node n, Shape out_shape);
  void check_same_tape(const Var& v) const;

  std::vector<Node> nodes_;
  std::vector<int> params_;
};

/// Max relative error between analytic gradients and central finite
/// differences of `f` at `point`:  max_i |analytic_i - fd_i| / max(1, |analytic_i|).
double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& point, double step);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected adaptive-moment updates, one slot pair per named parameter.
class AdamState {
 public:
  explicit AdamState(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(std::map<std::string, Tensor>& params, const std::map<std::string, Tensor>& grads);

  int64_t step_count() const { return step_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  int64_t step_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

}  // namespace oavnn
