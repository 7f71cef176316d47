#include "oavnn/autodiff.hpp"

#include <cmath>
#include <cstring>

#include "oavnn/kernels.hpp"

namespace oavnn {

namespace {
constexpr double kTiny = 1e-300;

// [outer, axis extent, inner] view of a row-major tensor around `ax`
struct AxisView {
  int64_t outer, len, inner;
};

AxisView axis_view(const Shape& s, int64_t ax) {
  AxisView v{1, s[static_cast<size_t>(ax)], 1};
  for (int64_t i = 0; i < ax; ++i) v.outer *= s[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(ax) + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}
}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kScalarScale: return "scalar_scale";
    case Op::kMul: return "elementwise_mul";
    case Op::kChannelContract: return "channel_contract";
    case Op::kCross: return "batched_cross";
    case Op::kDot: return "batched_dot";
    case Op::kNormLast: return "l2_norm_lastaxis";
    case Op::kSoftmaxAxis: return "softmax_axis";
    case Op::kMeanAxis: return "mean_axis";
    case Op::kConcatAxis: return "concat_axis";
    case Op::kGatherRows: return "gather_rows";
    case Op::kSelectWhere: return "select_where";
    case Op::kMat3Apply: return "mat3_apply";
    case Op::kTransposeLast2: return "transpose_last2";
    case Op::kSquare: return "square";
    case Op::kSqrt: return "sqrt";
    case Op::kLog: return "log";
    case Op::kSigmoid: return "sigmoid";
    case Op::kRecip: return "recip";
    case Op::kCrossAttention: return "cross_attention";
  }
  return "?";
}

Tensor Var::value() const {
  const Tensor& v = tape_->node(id_).value;
  return shape_eq(v.shape(), shape_) ? v : v.reshaped(shape_);
}

Var Var::reshaped(Shape s) const {
  if (shape_numel(s) != size())
    throw ContractError("reshape " + shape_str(shape_) + " -> " + shape_str(s) +
                        " changes element count");
  return Var(tape_, id_, std::move(s));
}

int Tape::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Var Tape::result(Node n, Shape out_shape) {
  if (!n.value.all_finite())
    throw DomainError(std::string(op_name(n.op)) + " produced a non-finite value");
  int id = push(std::move(n));
  return Var(this, id, std::move(out_shape));
}

void Tape::check_same_tape(const Var& v) const {
  if (v.tape() != this) throw ContractError("variable belongs to a different tape");
}

Var Tape::leaf(Tensor v, bool requires_grad) {
  if (!v.all_finite()) throw DomainError("leaf holds a non-finite value");
  Node n;
  n.op = Op::kLeaf;
  n.requires_grad = requires_grad;
  Shape s = v.shape();
  n.value = std::move(v);
  int id = push(std::move(n));
  return Var(this, id, std::move(s));
}

Var Tape::param(Tensor v) {
  Var p = leaf(std::move(v), true);
  params_.push_back(p.id());
  return p;
}

namespace {
bool is_prefix(const Shape& pre, const Shape& full) {
  if (pre.size() > full.size()) return false;
  for (size_t i = 0; i < pre.size(); ++i)
    if (pre[i] != full[i]) return false;
  return true;
}
}  // namespace

Var Tape::add(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  if (!shape_eq(a.shape(), b.shape()))
    throw ContractError("add shapes differ: " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
  Node n;
  n.op = Op::kAdd;
  n.inputs = {a.id(), b.id()};
  n.requires_grad = node(a.id()).requires_grad || node(b.id()).requires_grad;
  n.value = Tensor(a.shape());
  const Tensor& av = node(a.id()).value;
  const Tensor& bv = node(b.id()).value;
  for (int64_t i = 0; i < n.value.size(); ++i) n.value[i] = av[i] + bv[i];
  return result(std::move(n), a.shape());
}

Var Tape::sub(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  if (!shape_eq(a.shape(), b.shape()))
    throw ContractError("sub shapes differ: " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
  Node n;
  n.op = Op::kSub;
  n.inputs = {a.id(), b.id()};
  n.requires_grad = node(a.id()).requires_grad || node(b.id()).requires_grad;
  n.value = Tensor(a.shape());
  const Tensor& av = node(a.id()).value;
  const Tensor& bv = node(b.id()).value;
  for (int64_t i = 0; i < n.value.size(); ++i) n.value[i] = av[i] - bv[i];
  return result(std::move(n), a.shape());
}

Var Tape::scalar_scale(Var a, double s) {
  check_same_tape(a);
  Node n;
  n.op = Op::kScalarScale;
  n.inputs = {a.id()};
  n.requires_grad = node(a.id()).requires_grad;
  n.scalar = s;
  const Tensor& av = node(a.id()).value;
  n.value = Tensor(a.shape());
  for (int64_t i = 0; i < n.value.size(); ++i) n.value[i] = s * av[i];
  return result(std::move(n), a.shape());
}

Var Tape::mul(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  if (!is_prefix(b.shape(), a.shape()))
    throw ContractError("elementwise_mul: " + shape_str(b.shape()) + " is not a prefix of " +
                        shape_str(a.shape()));
  Node n;
  n.op = Op::kMul;
  n.inputs = {a.id(), b.id()};
  n.requires_grad = node(a.id()).requires_grad || node(b.id()).requires_grad;
  const Tensor& av = node(a.id()).value;
  const Tensor& bv = node(b.id()).value;
  int64_t block = a.size() / b.size();
  n.value = Tensor(a.shape());
  for (int64_t i = 0; i < b.size(); ++i) {
    double bi = bv[i];
    for (int64_t t = 0; t < block; ++t) n.value[i * block + t] = av[i * block + t] * bi;
  }
  return result(std::move(n), a.shape());
}

Var Tape::channel_contract(Var w, Var x, int axis) {
  check_same_tape(w);
  check_same_tape(x);
  if (w.shape().size() != 2) throw ContractError("channel_contract weight must be 2-D");
  int64_t ax = resolve_axis(x.shape(), axis);
  int64_t cin = x.shape()[static_cast<size_t>(ax)];
  int64_t cout = w.shape()[0];
  if (w.shape()[1] != cin)
    throw ContractError("channel_contract: weight " + shape_str(w.shape()) +
                        " does not match axis extent " + std::to_string(cin));
  AxisView vw = axis_view(x.shape(), ax);
  Shape out = x.shape();
  out[static_cast<size_t>(ax)] = cout;
  Node n;
  n.op = Op::kChannelContract;
  n.inputs = {w.id(), x.id()};
  n.requires_grad = node(w.id()).requires_grad || node(x.id()).requires_grad;
  n.axis = ax;
  n.value = Tensor(out);
  kernels::contract_fwd(node(w.id()).value.data(), node(x.id()).value.data(), n.value.data(),
                        vw.outer, cout, cin, vw.inner);
  return result(std::move(n), out);
}

Var Tape::cross(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  if (!shape_eq(a.shape(), b.shape()) || a.shape().empty() || a.shape().back() != 3)
    throw ContractError("batched_cross needs equal shapes with last extent 3");
  Node n;
  n.op = Op::kCross;
  n.inputs = {a.id(), b.id()};
  n.requires_grad = node(a.id()).requires_grad || node(b.id()).requires_grad;
  n.value = Tensor(a.shape());
  kernels::cross_rows(node(a.id()).value.data(), node(b.id()).value.data(), n.value.data(),
                      a.size() / 3);
  return result(std::move(n), a.shape());
}

Var Tape::dot(Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  if (!shape_eq(a.shape(), b.shape()) || a.shape().empty())
    throw ContractError("batched_dot needs equal non-scalar shapes");
  int64_t len = a.shape().back();
  Shape out(a.shape().begin(), a.shape().end() - 1);
  Node n;
  n.op = Op::kDot;
  n.inputs = {a.id(), b.id()};
  n.requires_grad = node(a.id()).requires_grad || node(b.id()).requires_grad;
  n.value = Tensor(out);
  kernels::dot_rows(node(a.id()).value.data(), node(b.id()).value.data(), n.value.data(),
                    a.size() / len, len);
  return result(std::move(n), out);
}

Var Tape::norm_last(Var a) {
  check_same_tape(a);
  if (a.shape().empty()) throw ContractError("l2_norm_lastaxis needs at least one axis");
  int64_t len = a.shape().back();
  Shape out(a.shape().begin(), a.shape().end() - 1);
  Node n;
  n.op = Op::kNormLast;
  n.inputs = {a.id()};
  n.requires_grad = node(a.id()).requires_grad;
  n.value = Tensor(out);
  kernels::norm_rows(node(a.id()).value.data(), n.value.data(), a.size() / len, len);
  return result(std::move(n), out);
}

Var Tape::softmax_axis(Var x, int axis) {
  check_same_tape(x);
  int64_t ax = resolve_axis(x.shape(), axis);
  AxisView vw = axis_view(x.shape(), ax);
  Node n;
  n.op = Op::kSoftmaxAxis;
  n.inputs = {x.id()};
  n.requires_grad = node(x.id()).requires_grad;
  n.axis = ax;
  n.value = Tensor(x.shape());
  kernels::softmax_strided(node(x.id()).value.data(), n.value.data(), vw.outer, vw.len, vw.inner);
  return result(std::move(n), x.shape());
}

Var Tape::mean_axis(Var x, int axis) {
  check_same_tape(x);
  int64_t ax = resolve_axis(x.shape(), axis);
  AxisView vw = axis_view(x.shape(), ax);
  if (vw.len == 0) throw ContractError("mean_axis over empty axis");
  Shape out;
  for (int64_t i = 0; i < static_cast<int64_t>(x.shape().size()); ++i)
    if (i != ax) out.push_back(x.shape()[static_cast<size_t>(i)]);
  Node n;
  n.op = Op::kMeanAxis;
  n.inputs = {x.id()};
  n.requires_grad = node(x.id()).requires_grad;
  n.axis = ax;
  n.value = Tensor(out);
  const Tensor& xv = node(x.id()).value;
  double inv = 1.0 / static_cast<double>(vw.len);
  for (int64_t o = 0; o < vw.outer; ++o)
    for (int64_t i = 0; i < vw.inner; ++i) {
      double acc = 0.0;
      for (int64_t l = 0; l < vw.len; ++l) acc += xv[(o * vw.len + l) * vw.inner + i];
      n.value[o * vw.inner + i] = acc * inv;
    }
  return result(std::move(n), out);
}

Var Tape::concat_axis(const std::vector<Var>& xs, int axis) {
  if (xs.empty()) throw ContractError("concat_axis of nothing");
  for (const Var& x : xs) check_same_tape(x);
  const Shape& s0 = xs[0].shape();
  int64_t ax = resolve_axis(s0, axis);
  int64_t total = 0;
  for (const Var& x : xs) {
    const Shape& s = x.shape();
    if (s.size() != s0.size()) throw ContractError("concat_axis rank mismatch");
    for (size_t i = 0; i < s.size(); ++i)
      if (static_cast<int64_t>(i) != ax && s[i] != s0[i])
        throw ContractError("concat_axis extent mismatch at axis " + std::to_string(i));
    total += s[static_cast<size_t>(ax)];
  }
  Shape out = s0;
  out[static_cast<size_t>(ax)] = total;
  Node n;
  n.op = Op::kConcatAxis;
  n.axis = ax;
  for (const Var& x : xs) {
    n.inputs.push_back(x.id());
    n.requires_grad = n.requires_grad || node(x.id()).requires_grad;
  }
  n.value = Tensor(out);
  AxisView vo = axis_view(out, ax);
  int64_t offset = 0;
  for (const Var& x : xs) {
    AxisView vx = axis_view(x.shape(), ax);
    const Tensor& xv = node(x.id()).value;
    for (int64_t o = 0; o < vx.outer; ++o)
      for (int64_t l = 0; l < vx.len; ++l)
        std::memcpy(n.value.data() + (o * vo.len + offset + l) * vo.inner,
                    xv.data() + (o * vx.len + l) * vx.inner,
                    static_cast<size_t>(vx.inner) * sizeof(double));
    offset += vx.len;
  }
  return result(std::move(n), out);
}

Var Tape::gather_rows(Var x, const std::vector<int64_t>& idx, Shape index_shape) {
  check_same_tape(x);
  if (x.shape().empty()) throw ContractError("gather_rows needs at least one axis");
  if (index_shape.empty()) index_shape = {static_cast<int64_t>(idx.size())};
  if (shape_numel(index_shape) != static_cast<int64_t>(idx.size()))
    throw ContractError("gather_rows index_shape does not match index count");
  int64_t rows = x.shape()[0];
  int64_t rsz = x.size() / std::max<int64_t>(rows, 1);
  for (int64_t i : idx)
    if (i < 0 || i >= rows) throw ContractError("gather_rows index out of range");
  Shape out = index_shape;
  out.insert(out.end(), x.shape().begin() + 1, x.shape().end());
  Node n;
  n.op = Op::kGatherRows;
  n.inputs = {x.id()};
  n.requires_grad = node(x.id()).requires_grad;
  n.indices = idx;
  n.index_shape = index_shape;
  n.value = Tensor(out);
  const Tensor& xv = node(x.id()).value;
  for (size_t m = 0; m < idx.size(); ++m)
    std::memcpy(n.value.data() + static_cast<int64_t>(m) * rsz, xv.data() + idx[m] * rsz,
                static_cast<size_t>(rsz) * sizeof(double));
  return result(std::move(n), out);
}

Var Tape::select_where(Tensor mask, Var a, Var b) {
  check_same_tape(a);
  check_same_tape(b);
  if (!shape_eq(a.shape(), b.shape()))
    throw ContractError("select_where branch shapes differ");
  if (!is_prefix(mask.shape(), a.shape()))
    throw ContractError("select_where mask shape " + shape_str(mask.shape()) +
                        " is not a prefix of " + shape_str(a.shape()));
  Node n;
  n.op = Op::kSelectWhere;
  n.inputs = {a.id(), b.id()};
  n.requires_grad = node(a.id()).requires_grad || node(b.id()).requires_grad;
  const Tensor& av = node(a.id()).value;
  const Tensor& bv = node(b.id()).value;
  int64_t block = a.size() / mask.size();
  n.value = Tensor(a.shape());
  for (int64_t i = 0; i < mask.size(); ++i) {
    bool pick_a = mask[i] != 0.0;
    for (int64_t t = 0; t < block; ++t)
      n.value[i * block + t] = pick_a ? av[i * block + t] : bv[i * block + t];
  }
  n.aux = std::move(mask);
  return result(std::move(n), a.shape());
}

Var Tape::mat3_apply(Var m, Var v) {
  check_same_tape(m);
  check_same_tape(v);
  const Shape& ms = m.shape();
  const Shape& vs = v.shape();
  if (ms.size() != 3 || ms[1] != 3 || ms[2] != 3)
    throw ContractError("mat3_apply matrix must be [P,3,3]");
  if (vs.size() < 2 || vs.back() != 3 || vs[0] != ms[0])
    throw ContractError("mat3_apply vector must be [P,...,3] with matching P");
  int64_t p = ms[0];
  int64_t bsz = v.size() / (p * 3);
  Node n;
  n.op = Op::kMat3Apply;
  n.inputs = {m.id(), v.id()};
  n.requires_grad = node(m.id()).requires_grad || node(v.id()).requires_grad;
  n.value = Tensor(vs);
  const Tensor& mv = node(m.id()).value;
  const Tensor& vv = node(v.id()).value;
  for (int64_t i = 0; i < p; ++i) {
    const double* mi = mv.data() + i * 9;
    for (int64_t b = 0; b < bsz; ++b) {
      const double* x = vv.data() + (i * bsz + b) * 3;
      double* y = n.value.data() + (i * bsz + b) * 3;
      for (int64_t r = 0; r < 3; ++r)
        y[r] = mi[r * 3 + 0] * x[0] + mi[r * 3 + 1] * x[1] + mi[r * 3 + 2] * x[2];
    }
  }
  return result(std::move(n), vs);
}

Var Tape::transpose_last2(Var x) {
  check_same_tape(x);
  const Shape& s = x.shape();
  if (s.size() < 2) throw ContractError("transpose_last2 needs rank >= 2");
  int64_t a = s[s.size() - 2], b = s[s.size() - 1];
  Shape out = s;
  std::swap(out[out.size() - 2], out[out.size() - 1]);
  Node n;
  n.op = Op::kTransposeLast2;
  n.inputs = {x.id()};
  n.requires_grad = node(x.id()).requires_grad;
  n.value = Tensor(out);
  const Tensor& xv = node(x.id()).value;
  int64_t outer = x.size() / (a * b);
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < a; ++i)
      for (int64_t j = 0; j < b; ++j)
        n.value[(o * b + j) * a + i] = xv[(o * a + i) * b + j];
  return result(std::move(n), out);
}

namespace {
Node unary_node(Op op, const Tape& t, Var x) {
  Node n;
  n.op = op;
  n.inputs = {x.id()};
  n.requires_grad = t.node(x.id()).requires_grad;
  n.value = Tensor(x.shape());
  return n;
}
}  // namespace

Var Tape::square(Var x) {
  check_same_tape(x);
  Node n = unary_node(Op::kSquare, *this, x);
  const Tensor& xv = node(x.id()).value;
  for (int64_t i = 0; i < n.value.size(); ++i) n.value[i] = xv[i] * xv[i];
  return result(std::move(n), x.shape());
}

Var Tape::sqrt(Var x) {
  check_same_tape(x);
  const Tensor& xv = node(x.id()).value;
  for (int64_t i = 0; i < xv.size(); ++i)
    if (xv[i] < 0.0) throw DomainError("sqrt of negative value");
  Node n = unary_node(Op::kSqrt, *this, x);
  for (int64_t i = 0; i < n.value.size(); ++i) n.value[i] = std::sqrt(xv[i]);
  return result(std::move(n), x.shape());
}

Var Tape::log(Var x) {
  check_same_tape(x);
  const Tensor& xv = node(x.id()).value;
  for (int64_t i = 0; i < xv.size(); ++i)
    if (xv[i] <= 0.0) throw DomainError("log of non-positive value");
  Node n = unary_node(Op::kLog, *this, x);
  for (int64_t i = 0; i < n.value.size(); ++i) n.value[i] = std::log(xv[i]);
  return result(std::move(n), x.shape());
}

Var Tape::sigmoid(Var x) {
  check_same_tape(x);
  Node n = unary_node(Op::kSigmoid, *this, x);
  const Tensor& xv = node(x.id()).value;
  for (int64_t i = 0; i < n.value.size(); ++i) {
    double v = xv[i];
    n.value[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  return result(std::move(n), x.shape());
}

Var Tape::recip(Var x) {
  check_same_tape(x);
  const Tensor& xv = node(x.id()).value;
  for (int64_t i = 0; i < xv.size(); ++i)
    if (xv[i] == 0.0) throw DomainError("recip of zero");
  Node n = unary_node(Op::kRecip, *this, x);
  for (int64_t i = 0; i < n.value.size(); ++i) n.value[i] = 1.0 / xv[i];
  return result(std::move(n), x.shape());
}

Var Tape::cross_attention(Var q, Var k, Var v, double eps) {
  check_same_tape(q);
  check_same_tape(k);
  check_same_tape(v);
  const Shape& s = q.shape();
  if (s.size() != 3 || s[2] != 3 || !shape_eq(s, k.shape()) || !shape_eq(s, v.shape()))
    throw ContractError("cross_attention needs equal [N,C,3] inputs");
  int64_t npts = s[0], c = s[1];
  Node n;
  n.op = Op::kCrossAttention;
  n.inputs = {q.id(), k.id(), v.id()};
  n.requires_grad = node(q.id()).requires_grad || node(k.id()).requires_grad ||
                    node(v.id()).requires_grad;
  n.scalar = eps;
  n.value = Tensor(s);
  n.aux = Tensor({c, npts, npts});
  kernels::attention_fwd(node(q.id()).value.data(), node(k.id()).value.data(),
                         node(v.id()).value.data(), n.value.data(), n.aux.data(), npts, c, eps);
  return result(std::move(n), s);
}

Tensor Tape::attention_weights(Var attention_out) const {
  check_same_tape(attention_out);
  const Node& n = node(attention_out.id());
  if (n.op != Op::kCrossAttention)
    throw ContractError("attention_weights expects a cross_attention result");
  return n.aux;
}

GradMap Tape::backward(Var loss) {
  check_same_tape(loss);
  if (loss.size() != 1) throw ContractError("backward needs a scalar loss");

  std::vector<Tensor> grads(nodes_.size());
  std::vector<char> present(nodes_.size(), 0);
  auto ensure = [&](int id) -> Tensor& {
    if (!present[static_cast<size_t>(id)]) {
      grads[static_cast<size_t>(id)] = Tensor(nodes_[static_cast<size_t>(id)].value.shape());
      present[static_cast<size_t>(id)] = 1;
    }
    return grads[static_cast<size_t>(id)];
  };
  auto wants = [&](int id) { return nodes_[static_cast<size_t>(id)].requires_grad; };

  ensure(loss.id())[0] = 1.0;

  for (int id = loss.id(); id >= 0; --id) {
    if (!present[static_cast<size_t>(id)] || !wants(id)) continue;
    const Node& n = nodes_[static_cast<size_t>(id)];
    const Tensor& g = grads[static_cast<size_t>(id)];
    switch (n.op) {
      case Op::kLeaf:
        break;
      case Op::kAdd: {
        for (int side = 0; side < 2; ++side) {
          int in = n.inputs[static_cast<size_t>(side)];
          if (!wants(in)) continue;
          Tensor& gi = ensure(in);
          for (int64_t i = 0; i < g.size(); ++i) gi[i] += g[i];
        }
        break;
      }
      case Op::kSub: {
        if (wants(n.inputs[0])) {
          Tensor& ga = ensure(n.inputs[0]);
          for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (wants(n.inputs[1])) {
          Tensor& gb = ensure(n.inputs[1]);
          for (int64_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
        break;
      }
      case Op::kScalarScale: {
        if (!wants(n.inputs[0])) break;
        Tensor& ga = ensure(n.inputs[0]);
        for (int64_t i = 0; i < g.size(); ++i) ga[i] += n.scalar * g[i];
        break;
      }
      case Op::kMul: {
        const Tensor& av = nodes_[static_cast<size_t>(n.inputs[0])].value;
        const Tensor& bv = nodes_[static_cast<size_t>(n.inputs[1])].value;
        int64_t block = av.size() / bv.size();
        if (wants(n.inputs[0])) {
          Tensor& ga = ensure(n.inputs[0]);
          for (int64_t i = 0; i < bv.size(); ++i)
            for (int64_t t = 0; t < block; ++t)
              ga[i * block + t] += g[i * block + t] * bv[i];
        }
        if (wants(n.inputs[1])) {
          Tensor& gb = ensure(n.inputs[1]);
          for (int64_t i = 0; i < bv.size(); ++i) {
            double acc = 0.0;
            for (int64_t t = 0; t < block; ++t) acc += g[i * block + t] * av[i * block + t];
            gb[i] += acc;
          }
        }
        break;
      }
      case Op::kChannelContract: {
        const Tensor& wv = nodes_[static_cast<size_t>(n.inputs[0])].value;
        const Tensor& xv = nodes_[static_cast<size_t>(n.inputs[1])].value;
        AxisView vw = axis_view(xv.shape(), n.axis);
        int64_t cout = wv.shape()[0], cin = wv.shape()[1];
        if (wants(n.inputs[0]))
          kernels::contract_bwd_w(g.data(), xv.data(), ensure(n.inputs[0]).data(), vw.outer,
                                  cout, cin, vw.inner);
        if (wants(n.inputs[1]))
          kernels::contract_bwd_x(g.data(), wv.data(), ensure(n.inputs[1]).data(), vw.outer,
                                  cout, cin, vw.inner);
        break;
      }
      case Op::kCross: {
        const Tensor& av = nodes_[static_cast<size_t>(n.inputs[0])].value;
        const Tensor& bv = nodes_[static_cast<size_t>(n.inputs[1])].value;
        int64_t rows = av.size() / 3;
        // c = a x b:  da += b x g,  db += g x a
        if (wants(n.inputs[0])) {
          Tensor& ga = ensure(n.inputs[0]);
          for (int64_t r = 0; r < rows; ++r) {
            const double* b = bv.data() + 3 * r;
            const double* gg = g.data() + 3 * r;
            double* d = ga.data() + 3 * r;
            d[0] += b[1] * gg[2] - b[2] * gg[1];
            d[1] += b[2] * gg[0] - b[0] * gg[2];
            d[2] += b[0] * gg[1] - b[1] * gg[0];
          }
        }
        if (wants(n.inputs[1])) {
          Tensor& gb = ensure(n.inputs[1]);
          for (int64_t r = 0; r < rows; ++r) {
            const double* a = av.data() + 3 * r;
            const double* gg = g.data() + 3 * r;
            double* d = gb.data() + 3 * r;
            d[0] += gg[1] * a[2] - gg[2] * a[1];
            d[1] += gg[2] * a[0] - gg[0] * a[2];
            d[2] += gg[0] * a[1] - gg[1] * a[0];
          }
        }
        break;
      }
      case Op::kDot: {
        const Tensor& av = nodes_[static_cast<size_t>(n.inputs[0])].value;
        const Tensor& bv = nodes_[static_cast<size_t>(n.inputs[1])].value;
        int64_t len = av.shape().back();
        int64_t rows = av.size() / len;
        if (wants(n.inputs[0])) {
          Tensor& ga = ensure(n.inputs[0]);
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t t = 0; t < len; ++t) ga[r * len + t] += g[r] * bv[r * len + t];
        }
        if (wants(n.inputs[1])) {
          Tensor& gb = ensure(n.inputs[1]);
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t t = 0; t < len; ++t) gb[r * len + t] += g[r] * av[r * len + t];
        }
        break;
      }
      case Op::kNormLast: {
        if (!wants(n.inputs[0])) break;
        const Tensor& av = nodes_[static_cast<size_t>(n.inputs[0])].value;
        int64_t len = av.shape().back();
        int64_t rows = av.size() / len;
        Tensor& ga = ensure(n.inputs[0]);
        for (int64_t r = 0; r < rows; ++r) {
          double nv = n.value[r];
          if (nv <= kTiny) continue;  // subgradient 0 at the kink
          double s = g[r] / nv;
          for (int64_t t = 0; t < len; ++t) ga[r * len + t] += s * av[r * len + t];
        }
        break;
      }
      case Op::kSoftmaxAxis: {
        if (!wants(n.inputs[0])) break;
        AxisView vw = axis_view(n.value.shape(), n.axis);
        Tensor& gx = ensure(n.inputs[0]);
        for (int64_t o = 0; o < vw.outer; ++o)
          for (int64_t i = 0; i < vw.inner; ++i) {
            double s = 0.0;
            for (int64_t l = 0; l < vw.len; ++l) {
              int64_t at = (o * vw.len + l) * vw.inner + i;
              s += g[at] * n.value[at];
            }
            for (int64_t l = 0; l < vw.len; ++l) {
              int64_t at = (o * vw.len + l) * vw.inner + i;
              gx[at] += n.value[at] * (g[at] - s);
            }
          }
        break;
      }
      case Op::kMeanAxis: {
        if (!wants(n.inputs[0])) break;
        const Tensor& xv = nodes_[static_cast<size_t>(n.inputs[0])].value;
        AxisView vw = axis_view(xv.shape(), n.axis);
        double inv = 1.0 / static_cast<double>(vw.len);
        Tensor& gx = ensure(n.inputs[0]);
        for (int64_t o = 0; o < vw.outer; ++o)
          for (int64_t l = 0; l < vw.len; ++l)
            for (int64_t i = 0; i < vw.inner; ++i)
              gx[(o * vw.len + l) * vw.inner + i] += g[o * vw.inner + i] * inv;
        break;
      }
      case Op::kConcatAxis: {
        AxisView vo = axis_view(n.value.shape(), n.axis);
        int64_t offset = 0;
        for (int in : n.inputs) {
          const Tensor& xv = nodes_[static_cast<size_t>(in)].value;
          AxisView vx = axis_view(xv.shape(), n.axis);
          if (wants(in)) {
            Tensor& gx = ensure(in);
            for (int64_t o = 0; o < vx.outer; ++o)
              for (int64_t l = 0; l < vx.len; ++l)
                for (int64_t i = 0; i < vx.inner; ++i)
                  gx[(o * vx.len + l) * vx.inner + i] +=
                      g[(o * vo.len + offset + l) * vo.inner + i];
          }
          offset += vx.len;
        }
        break;
      }
      case Op::kGatherRows: {
        if (!wants(n.inputs[0])) break;
        const Tensor& xv = nodes_[static_cast<size_t>(n.inputs[0])].value;
        int64_t rsz = xv.size() / xv.shape()[0];
        Tensor& gx = ensure(n.inputs[0]);
        // scatter-add stays serial: repeated indices must accumulate in a
        // fixed order
        for (size_t m = 0; m < n.indices.size(); ++m) {
          double* dst = gx.data() + n.indices[m] * rsz;
          const double* src = g.data() + static_cast<int64_t>(m) * rsz;
          for (int64_t t = 0; t < rsz; ++t) dst[t] += src[t];
        }
        break;
      }
      case Op::kSelectWhere: {
        const Tensor& mask = n.aux;
        int64_t block = n.value.size() / mask.size();
        if (wants(n.inputs[0])) {
          Tensor& ga = ensure(n.inputs[0]);
          for (int64_t i = 0; i < mask.size(); ++i)
            if (mask[i] != 0.0)
              for (int64_t t = 0; t < block; ++t) ga[i * block + t] += g[i * block + t];
        }
        if (wants(n.inputs[1])) {
          Tensor& gb = ensure(n.inputs[1]);
          for (int64_t i = 0; i < mask.size(); ++i)
            if (mask[i] == 0.0)
              for (int64_t t = 0; t < block; ++t) gb[i * block + t] += g[i * block + t];
        }
        break;
      }
      case Op::kMat3Apply: {
        const Tensor& mv = nodes_[static_cast<size_t>(n.inputs[0])].value;
        const Tensor& vv = nodes_[static_cast<size_t>(n.inputs[1])].value;
        int64_t p = mv.shape()[0];
        int64_t bsz = vv.size() / (p * 3);
        if (wants(n.inputs[0])) {
          Tensor& gm = ensure(n.inputs[0]);
          for (int64_t i = 0; i < p; ++i)
            for (int64_t r = 0; r < 3; ++r)
              for (int64_t t = 0; t < 3; ++t) {
                double acc = 0.0;
                for (int64_t b = 0; b < bsz; ++b)
                  acc += g[(i * bsz + b) * 3 + r] * vv[(i * bsz + b) * 3 + t];
                gm[(i * 3 + r) * 3 + t] += acc;
              }
        }
        if (wants(n.inputs[1])) {
          Tensor& gv = ensure(n.inputs[1]);
          for (int64_t i = 0; i < p; ++i) {
            const double* mi = mv.data() + i * 9;
            for (int64_t b = 0; b < bsz; ++b) {
              const double* gg = g.data() + (i * bsz + b) * 3;
              double* d = gv.data() + (i * bsz + b) * 3;
              for (int64_t t = 0; t < 3; ++t)
                d[t] += mi[0 * 3 + t] * gg[0] + mi[1 * 3 + t] * gg[1] + mi[2 * 3 + t] * gg[2];
            }
          }
        }
        break;
      }
      case Op::kTransposeLast2: {
        if (!wants(n.inputs[0])) break;
        const Shape& os = n.value.shape();
        int64_t b = os[os.size() - 2], a = os[os.size() - 1];
        int64_t outer = n.value.size() / (a * b);
        Tensor& gx = ensure(n.inputs[0]);
        for (int64_t o = 0; o < outer; ++o)
          for (int64_t j = 0; j < b; ++j)
            for (int64_t i = 0; i < a; ++i)
              gx[(o * a + i) * b + j] += g[(o * b + j) * a + i];
        break;
      }
      case Op::kSquare: {
        if (!wants(n.inputs[0])) break;
        const Tensor& xv = nodes_[static_cast<size_t>(n.inputs[0])].value;
        Tensor& gx = ensure(n.inputs[0]);
        for (int64_t i = 0; i < g.size(); ++i) gx[i] += 2.0 * xv[i] * g[i];
        break;
      }
      case Op::kSqrt: {
        if (!wants(n.inputs[0])) break;
        Tensor& gx = ensure(n.inputs[0]);
        for (int64_t i = 0; i < g.size(); ++i)
          if (n.value[i] > kTiny) gx[i] += 0.5 * g[i] / n.value[i];
        break;
      }
      case Op::kLog: {
        if (!wants(n.inputs[0])) break;
        const Tensor& xv = nodes_[static_cast<size_t>(n.inputs[0])].value;
        Tensor& gx = ensure(n.inputs[0]);
        for (int64_t i = 0; i < g.size(); ++i) gx[i] += g[i] / xv[i];
        break;
      }
      case Op::kSigmoid: {
        if (!wants(n.inputs[0])) break;
        Tensor& gx = ensure(n.inputs[0]);
        for (int64_t i = 0; i < g.size(); ++i)
          gx[i] += g[i] * n.value[i] * (1.0 - n.value[i]);
        break;
      }
      case Op::kRecip: {
        if (!wants(n.inputs[0])) break;
        Tensor& gx = ensure(n.inputs[0]);
        for (int64_t i = 0; i < g.size(); ++i) gx[i] -= g[i] * n.value[i] * n.value[i];
        break;
      }
      case Op::kCrossAttention: {
        const Tensor& qv = nodes_[static_cast<size_t>(n.inputs[0])].value;
        const Tensor& kv = nodes_[static_cast<size_t>(n.inputs[1])].value;
        const Tensor& vv = nodes_[static_cast<size_t>(n.inputs[2])].value;
        int64_t npts = qv.shape()[0], c = qv.shape()[1];
        // the kernel accumulates into all three at once; materialize each
        Tensor& gq = ensure(n.inputs[0]);
        Tensor& gk = ensure(n.inputs[1]);
        Tensor& gv = ensure(n.inputs[2]);
        kernels::attention_bwd(qv.data(), kv.data(), vv.data(), n.aux.data(), n.value.data(),
                               g.data(), gq.data(), gk.data(), gv.data(), npts, c, n.scalar);
        break;
      }
    }
  }

  GradMap out;
  for (int pid : params_) {
    if (present[static_cast<size_t>(pid)])
      out.emplace(pid, std::move(grads[static_cast<size_t>(pid)]));
    else
      out.emplace(pid, Tensor(nodes_[static_cast<size_t>(pid)].value.shape()));
  }
  return out;
}

double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& point, double step) {
  if (!(step > 0.0)) throw ContractError("grad_check needs step > 0");

  Tape tape;
  Var x = tape.param(point);
  Var loss = f(tape, x);
  if (loss.size() != 1) throw ContractError("grad_check function must return a scalar");
  if (!std::isfinite(loss.value()[0])) throw DomainError("grad_check: non-finite value at point");
  GradMap grads = tape.backward(loss);
  const Tensor& analytic = grads.at(x.id());

  auto eval = [&](const Tensor& at) {
    Tape t;
    Var v = t.leaf(at, false);
    Var l = f(t, v);
    double out = l.value()[0];
    if (!std::isfinite(out)) throw DomainError("grad_check: non-finite value at probe point");
    return out;
  };

  double max_err = 0.0;
  Tensor probe = point;
  for (int64_t i = 0; i < point.size(); ++i) {
    double saved = probe[i];
    probe[i] = saved + step;
    double fp = eval(probe);
    probe[i] = saved - step;
    double fm = eval(probe);
    probe[i] = saved;
    double fd = (fp - fm) / (2.0 * step);
    double err = std::abs(analytic[i] - fd) / std::max(1.0, std::abs(analytic[i]));
    max_err = std::max(max_err, err);
  }
  return max_err;
}

void AdamState::step(std::map<std::string, Tensor>& params,
                     const std::map<std::string, Tensor>& grads) {
  ++step_;
  double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  for (auto& [name, p] : params) {
    auto git = grads.find(name);
    if (git == grads.end()) throw ContractError("adam: missing gradient for " + name);
    const Tensor& g = git->second;
    if (!shape_eq(g.shape(), p.shape()))
      throw ContractError("adam: gradient shape mismatch for " + name);
    Tensor& m = m_.try_emplace(name, Tensor(p.shape())).first->second;
    Tensor& v = v_.try_emplace(name, Tensor(p.shape())).first->second;
    for (int64_t i = 0; i < p.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      p[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

}  // namespace oavnn
