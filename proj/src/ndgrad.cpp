#include "navgen/ndgrad.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "navgen/error.hpp"

namespace navgen::ndgrad {
namespace {

std::size_t checked_axis(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.rank())
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for shape " + s.str());
  return axis;
}

// Splits a shape around an axis into (outer, length, inner) extents.
struct AxisView {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisView axis_view(const Shape& s, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  v.len = s[axis];
  for (std::size_t i = axis + 1; i < s.rank(); ++i) v.inner *= s[i];
  return v;
}

Shape reduced(const Shape& s, std::size_t axis) {
  auto d = s.dims();
  d[axis] = 1;
  return Shape(d);
}

Tape& same_tape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.valid() || !b.valid()) throw ShapeError(std::string(op) + ": invalid tensor");
  if (&a.tape() != &b.tape()) throw ShapeError(std::string(op) + ": tensors live on different tapes");
  return a.tape();
}

enum class Broadcast { kSame, kScalar, kRow };

Broadcast broadcast_kind(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return Broadcast::kSame;
  if (b.numel() == 1) return Broadcast::kScalar;
  if (a.rank() == 2 && b.rank() == 2 && b[0] == 1 && b[1] == a[1]) return Broadcast::kRow;
  if (a.rank() == 2 && b.rank() == 1 && b[0] == a[1]) return Broadcast::kRow;
  throw ShapeError(std::string(op) + ": incompatible shapes " + a.str() + " and " + b.str());
}

// Index into b for element i of a under broadcasting.
inline std::size_t bidx(Broadcast k, std::size_t i, std::size_t cols) {
  switch (k) {
    case Broadcast::kSame:
      return i;
    case Broadcast::kScalar:
      return 0;
    case Broadcast::kRow:
      return i % cols;
  }
  return i;
}

template <typename Fwd, typename DA, typename DB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
  Tape& tape = same_tape(a, b, op);
  const Shape shape = a.shape();
  const auto kind = broadcast_kind(shape, b.shape(), op);
  const auto n = shape.numel();
  const auto cols = shape.cols();
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[bidx(kind, i, cols)]);
  Tensor r = tape.push(op, shape, std::move(out), {a, b});
  if (r.requires_grad()) {
    const int ia = a.id(), ib = b.id(), ir = r.id();
    Tape* tp = &tape;
    tape.set_backward(r, [tp, ia, ib, ir, kind, n, cols, da, db] {
      const auto& g = tp->node(ir).grad;
      const auto& x = tp->node(ia).value;
      const auto& y = tp->node(ib).value;
      if (tp->node(ia).requires_grad) {
        auto& ga = tp->grad(ia);
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * da(x[i], y[bidx(kind, i, cols)]);
      }
      if (tp->node(ib).requires_grad) {
        auto& gb = tp->grad(ib);
        for (std::size_t i = 0; i < n; ++i) {
          const auto j = bidx(kind, i, cols);
          gb[j] += g[i] * db(x[i], y[j]);
        }
      }
    });
  }
  return r;
}

template <typename Fwd, typename Deriv>
Tensor unary(const char* op, const Tensor& a, Fwd fwd, Deriv deriv_from_output) {
  Tape& tape = a.tape();
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  Tensor r = tape.push(op, a.shape(), std::move(out), {a});
  if (r.requires_grad()) {
    const int ia = a.id(), ir = r.id();
    Tape* tp = &tape;
    tape.set_backward(r, [tp, ia, ir, deriv_from_output] {
      const auto& g = tp->node(ir).grad;
      const auto& y = tp->node(ir).value;
      const auto& x = tp->node(ia).value;
      auto& ga = tp->grad(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv_from_output(x[i], y[i]);
    });
  }
  return r;
}

inline double sigmoid_scalar(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

using v8d = double __attribute__((vector_size(64)));

inline v8d load8(const double* p) {
  v8d v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline void store8(double* p, v8d v) { std::memcpy(p, &v, sizeof v); }

// C[n x m] += X * B with X[n x k] read through x(i, p). 4x16 register tile;
// each output accumulates over p in increasing order.
template <typename X>
void gemm_panel(X x, const double* B, double* C, std::size_t n, std::size_t k, std::size_t m) {
  constexpr std::size_t MR = 4, NR = 16;
  std::size_t i0 = 0;
  for (; i0 + MR <= n; i0 += MR) {
    std::size_t j0 = 0;
    for (; j0 + NR <= m; j0 += NR) {
      double* c0 = C + i0 * m + j0;
      double* c1 = c0 + m;
      double* c2 = c1 + m;
      double* c3 = c2 + m;
      v8d a00 = load8(c0), a01 = load8(c0 + 8), a10 = load8(c1), a11 = load8(c1 + 8);
      v8d a20 = load8(c2), a21 = load8(c2 + 8), a30 = load8(c3), a31 = load8(c3 + 8);
      for (std::size_t p = 0; p < k; ++p) {
        const double* b = B + p * m + j0;
        const v8d b0 = load8(b), b1 = load8(b + 8);
        const double s0 = x(i0, p), s1 = x(i0 + 1, p), s2 = x(i0 + 2, p), s3 = x(i0 + 3, p);
        a00 += s0 * b0;
        a01 += s0 * b1;
        a10 += s1 * b0;
        a11 += s1 * b1;
        a20 += s2 * b0;
        a21 += s2 * b1;
        a30 += s3 * b0;
        a31 += s3 * b1;
      }
      store8(c0, a00);
      store8(c0 + 8, a01);
      store8(c1, a10);
      store8(c1 + 8, a11);
      store8(c2, a20);
      store8(c2 + 8, a21);
      store8(c3, a30);
      store8(c3 + 8, a31);
    }
    for (std::size_t r = 0; r < MR; ++r) {
      double* c = C + (i0 + r) * m;
      for (std::size_t p = 0; p < k; ++p) {
        const double s = x(i0 + r, p);
        const double* b = B + p * m;
        for (std::size_t j = j0; j < m; ++j) c[j] += s * b[j];
      }
    }
  }
  for (; i0 < n; ++i0) {
    double* c = C + i0 * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = x(i0, p);
      const double* b = B + p * m;
      for (std::size_t j = 0; j < m; ++j) c[j] += s * b[j];
    }
  }
}

// Splits long reductions so the B panel stays in cache.
template <typename X>
void gemm_blocked(X x, const double* B, double* C, std::size_t n, std::size_t k, std::size_t m) {
  constexpr std::size_t KC = 256;
  for (std::size_t p0 = 0; p0 < k; p0 += KC) {
    const std::size_t kc = std::min(KC, k - p0);
    gemm_panel([&](std::size_t i, std::size_t p) { return x(i, p0 + p); }, B + p0 * m, C, n, kc, m);
  }
}

// C[n x m] += A[n x k] * B[k x m]
void gemm_nn(const double* A, const double* B, double* C, std::size_t n, std::size_t k, std::size_t m) {
  gemm_blocked([A, k](std::size_t i, std::size_t p) { return A[i * k + p]; }, B, C, n, k, m);
}

// C[n x k] += G[n x m] * B[k x m]^T
void gemm_nt(const double* G, const double* B, double* C, std::size_t n, std::size_t k, std::size_t m) {
  std::vector<double> bt(m * k);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < m; ++j) bt[j * k + p] = B[p * m + j];
  gemm_nn(G, bt.data(), C, n, m, k);
}

// C[k x m] += A[n x k]^T * G[n x m]
void gemm_tn(const double* A, const double* G, double* C, std::size_t n, std::size_t k, std::size_t m) {
  gemm_blocked([A, k](std::size_t p, std::size_t i) { return A[i * k + p]; }, G, C, k, n, m);
}

}  // namespace

// ---------------------------------------------------------------- Shape

Shape::Shape(std::initializer_list<std::size_t> dims) : Shape(std::vector<std::size_t>(dims)) {}

Shape::Shape(const std::vector<std::size_t>& dims) {
  if (dims.empty() || dims.size() > 3)
    throw ShapeError("tensor rank must be 1..3, got " + std::to_string(dims.size()));
  rank_ = dims.size();
  for (std::size_t i = 0; i < rank_; ++i) dims_[i] = dims[i];
}

std::size_t Shape::numel() const {
  std::size_t n = rank_ == 0 ? 0 : 1;
  for (std::size_t i = 0; i < rank_; ++i) n *= dims_[i];
  return n;
}

std::size_t Shape::rows() const {
  if (rank_ <= 1) return 1;
  std::size_t n = 1;
  for (std::size_t i = 0; i + 1 < rank_; ++i) n *= dims_[i];
  return n;
}

std::size_t Shape::cols() const { return rank_ == 0 ? 0 : dims_[rank_ - 1]; }

std::string Shape::str() const {
  std::string s = "[";
  for (std::size_t i = 0; i < rank_; ++i) {
    if (i) s += "x";
    s += std::to_string(dims_[i]);
  }
  return s + "]";
}

bool Shape::operator==(const Shape& o) const {
  if (rank_ != o.rank_) return false;
  for (std::size_t i = 0; i < rank_; ++i) {
    if (dims_[i] != o.dims_[i]) return false;
  }
  return true;
}

// ---------------------------------------------------------------- Parameter

Parameter::Parameter(std::string name, Shape shape)
    : name_(std::move(name)), shape_(shape), value_(shape.numel(), 0.0), grad_(shape.numel(), 0.0) {}

void Parameter::zero_grad() { std::fill(grad_.begin(), grad_.end(), 0.0); }

Parameter& ParameterStore::add(const std::string& name, Shape shape) {
  if (contains(name)) throw ConfigError("duplicate parameter '" + name + "'");
  index_.emplace(name, params_.size());
  params_.push_back(std::make_unique<Parameter>(name, shape));
  return *params_.back();
}

Parameter& ParameterStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw LookupError("unknown parameter '" + name + "'");
  return *params_[it->second];
}

const Parameter& ParameterStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw LookupError("unknown parameter '" + name + "'");
  return *params_[it->second];
}

std::vector<Parameter*> ParameterStore::all() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> ParameterStore::all() const {
  std::vector<const Parameter*> out;
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

nlohmann::json ParameterStore::to_json() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& p : params_) {
    arr.push_back({{"name", p->name()}, {"shape", p->shape().dims()}, {"values", p->value()}});
  }
  return arr;
}

void ParameterStore::load_json(const nlohmann::json& j) {
  try {
    if (j.size() != params_.size())
      throw DataError("checkpoint has " + std::to_string(j.size()) + " parameters, model expects " +
                      std::to_string(params_.size()));
    for (const auto& jp : j) {
      auto& p = get(jp.at("name").get<std::string>());
      const Shape shape(jp.at("shape").get<std::vector<std::size_t>>());
      if (!(shape == p.shape()))
        throw DataError("parameter '" + p.name() + "' shape " + shape.str() + " does not match " + p.shape().str());
      auto values = jp.at("values").get<std::vector<double>>();
      if (values.size() != shape.numel()) throw DataError("parameter '" + p.name() + "' has wrong value count");
      p.value() = std::move(values);
      p.zero_grad();
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed checkpoint parameters: ") + e.what());
  } catch (const LookupError& e) {
    throw DataError(std::string("checkpoint does not match model: ") + e.what());
  }
}

// ---------------------------------------------------------------- Tensor

const Shape& Tensor::shape() const { return tape_->node(id_).shape; }
std::span<const double> Tensor::values() const { return tape_->node(id_).value; }
std::span<const double> Tensor::grad() const { return tape_->node(id_).grad; }
bool Tensor::requires_grad() const { return tape_->node(id_).requires_grad; }

double Tensor::item() const {
  const auto v = values();
  if (v.size() != 1) throw ShapeError("item() on tensor of shape " + shape().str());
  return v[0];
}

double Tensor::at(std::size_t i) const {
  const auto v = values();
  if (i >= v.size()) throw ShapeError("index " + std::to_string(i) + " out of range for " + shape().str());
  return v[i];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  const auto& s = shape();
  if (r >= s.rows() || c >= s.cols()) throw ShapeError("index out of range for " + s.str());
  return values()[r * s.cols() + c];
}

// ---------------------------------------------------------------- Tape

Tape::Tape(bool record_gradients) : record_(record_gradients) {}

Tensor Tape::push(const char* op, Shape shape, std::vector<double> value, std::initializer_list<Tensor> inputs) {
  return push(op, shape, std::move(value), std::span<const Tensor>(inputs.begin(), inputs.size()));
}

Tensor Tape::push(const char* op, Shape shape, std::vector<double> value, std::span<const Tensor> inputs) {
  if (value.size() != shape.numel())
    throw ShapeError(std::string(op) + ": value count " + std::to_string(value.size()) + " does not match shape " +
                     shape.str());
  for (double v : value) {
    if (!std::isfinite(v)) throw NumericalError(std::string(op) + " produced a non-finite value");
  }
  bool needs = false;
  if (record_) {
    for (const auto& t : inputs) {
      if (&t.tape() != this) throw ShapeError(std::string(op) + ": input from a different tape");
      needs = needs || t.requires_grad();
    }
  }
  Node n;
  n.shape = shape;
  n.value = std::move(value);
  n.requires_grad = needs;
  nodes_.push_back(std::move(n));
  return Tensor(this, static_cast<int>(nodes_.size() - 1));
}

void Tape::set_backward(const Tensor& t, std::function<void()> fn) { node(t.id()).backward = std::move(fn); }

std::vector<double>& Tape::grad(int id) {
  auto& n = node(id);
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

Tensor Tape::constant(Shape shape, std::vector<double> values) { return push("constant", shape, std::move(values), {}); }

Tensor Tape::import(const Tensor& other) {
  const auto v = other.values();
  return constant(other.shape(), std::vector<double>(v.begin(), v.end()));
}

Tensor Tape::param(Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Tensor(this, it->second);
  Tensor t = push("param", p.shape(), p.value(), {});
  auto& n = node(t.id());
  n.param = &p;
  n.requires_grad = record_;
  param_nodes_.emplace(&p, t.id());
  return t;
}

void Tape::backward(const Tensor& loss) {
  if (&loss.tape() != this) throw ShapeError("backward: loss belongs to a different tape");
  if (!record_) throw ConfigError("backward called on a tape that does not record gradients");
  if (loss.shape().numel() != 1) throw ShapeError("backward requires a scalar loss, got " + loss.shape().str());
  if (backward_done_) throw ConfigError("backward already ran on this tape; clear() it before reuse");
  backward_done_ = true;
  if (!loss.requires_grad()) return;
  grad(loss.id())[0] = 1.0;
  for (int id = loss.id(); id >= 0; --id) {
    auto& n = node(id);
    if (n.grad.empty()) continue;
    if (n.backward) n.backward();
    if (n.param) {
      auto& pg = n.param->grad();
      for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad[i];
    }
  }
}

void Tape::clear() {
  nodes_.clear();
  param_nodes_.clear();
  backward_done_ = false;
}

// ---------------------------------------------------------------- ops

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor scale(const Tensor& a, double c) {
  return unary(
      "scale", a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  Tape& tape = same_tape(a, b, "matmul");
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.rank() != 2 || sb.rank() != 2 || sa[1] != sb[0])
    throw ShapeError("matmul: incompatible shapes " + sa.str() + " and " + sb.str());
  const auto n = sa[0], k = sa[1], m = sb[1];
  std::vector<double> out(n * m, 0.0);
  gemm_nn(a.values().data(), b.values().data(), out.data(), n, k, m);
  Tensor r = tape.push("matmul", Shape{n, m}, std::move(out), {a, b});
  if (r.requires_grad()) {
    const int ia = a.id(), ib = b.id(), ir = r.id();
    Tape* tp = &tape;
    tape.set_backward(r, [tp, ia, ib, ir, n, k, m] {
      const auto& g = tp->node(ir).grad;
      if (tp->node(ia).requires_grad) gemm_nt(g.data(), tp->node(ib).value.data(), tp->grad(ia).data(), n, k, m);
      if (tp->node(ib).requires_grad) gemm_tn(tp->node(ia).value.data(), g.data(), tp->grad(ib).data(), n, k, m);
    });
  }
  return r;
}

Tensor transpose(const Tensor& a) {
  const auto& s = a.shape();
  if (s.rank() != 2) throw ShapeError("transpose: expected a matrix, got " + s.str());
  const auto n = s[0], m = s[1];
  const auto av = a.values();
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j * n + i] = av[i * m + j];
  Tape& tape = a.tape();
  Tensor r = tape.push("transpose", Shape{m, n}, std::move(out), {a});
  if (r.requires_grad()) {
    const int ia = a.id(), ir = r.id();
    Tape* tp = &tape;
    tape.set_backward(r, [tp, ia, ir, n, m] {
      const auto& g = tp->node(ir).grad;
      auto& ga = tp->grad(ia);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) ga[i * m + j] += g[j * n + i];
    });
  }
  return r;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape.numel() != a.shape().numel())
    throw ShapeError("reshape: cannot view " + a.shape().str() + " as " + shape.str());
  const auto av = a.values();
  Tape& tape = a.tape();
  Tensor r = tape.push("reshape", shape, std::vector<double>(av.begin(), av.end()), {a});
  if (r.requires_grad()) {
    const int ia = a.id(), ir = r.id();
    Tape* tp = &tape;
    tape.set_backward(r, [tp, ia, ir] {
      const auto& g = tp->node(ir).grad;
      auto& ga = tp->grad(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return r;
}

Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const auto& s0 = parts[0].shape();
  checked_axis(s0, axis, "concat");
  auto dims = s0.dims();
  std::size_t total = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if (s.rank() != s0.rank()) throw ShapeError("concat: rank mismatch " + s0.str() + " and " + s.str());
    for (std::size_t d = 0; d < s.rank(); ++d) {
      if (d != axis && s[d] != s0[d]) throw ShapeError("concat: incompatible shapes " + s0.str() + " and " + s.str());
    }
    if (&p.tape() != &parts[0].tape()) throw ShapeError("concat: tensors live on different tapes");
    total += s[axis];
  }
  dims[axis] = total;
  const Shape out_shape(dims);
  const auto view = axis_view(out_shape, axis);
  std::vector<double> out(out_shape.numel());
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const auto len = p.shape()[axis];
    const auto pv = p.values();
    for (std::size_t o = 0; o < view.outer; ++o) {
      std::copy_n(pv.data() + o * len * view.inner, len * view.inner,
                  out.data() + (o * view.len + offset) * view.inner);
    }
    offsets.push_back(offset);
    offset += len;
  }
  Tape& tape = parts[0].tape();
  Tensor r = tape.push("concat", out_shape, std::move(out), parts);
  if (r.requires_grad()) {
    std::vector<std::pair<int, std::size_t>> ids;
    for (const auto& p : parts) ids.emplace_back(p.id(), p.shape()[axis]);
    const int ir = r.id();
    Tape* tp = &tape;
    tape.set_backward(r, [tp, ir, ids, offsets, view] {
      const auto& g = tp->node(ir).grad;
      for (std::size_t q = 0; q < ids.size(); ++q) {
        const auto [id, len] = ids[q];
        if (!tp->node(id).requires_grad) continue;
        auto& gp = tp->grad(id);
        for (std::size_t o = 0; o < view.outer; ++o) {
          const double* src = g.data() + (o * view.len + offsets[q]) * view.inner;
          double* dst = gp.data() + o * len * view.inner;
          for (std::size_t i = 0; i < len * view.inner; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return r;
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto& s = a.shape();
  checked_axis(s, axis, "slice");
  if (begin >= end || end > s[axis])
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid for axis " +
                     std::to_string(axis) + " of " + s.str());
  const auto view = axis_view(s, axis);
  auto dims = s.dims();
  dims[axis] = end - begin;
  const Shape out_shape(dims);
  const auto len = end - begin;
  const auto av = a.values();
  std::vector<double> out(out_shape.numel());
  for (std::size_t o = 0; o < view.outer; ++o) {
    std::copy_n(av.data() + (o * view.len + begin) * view.inner, len * view.inner, out.data() + o * len * view.inner);
  }
  Tape& tape = a.tape();
  Tensor r = tape.push("slice", out_shape, std::move(out), {a});
  if (r.requires_grad()) {
    const int ia = a.id(), ir = r.id();
    Tape* tp = &tape;
    tape.set_backward(r, [tp, ia, ir, view, begin, len] {
      const auto& g = tp->node(ir).grad;
      auto& ga = tp->grad(ia);
      for (std::size_t o = 0; o < view.outer; ++o) {
        const double* src = g.data() + o * len * view.inner;
        double* dst = ga.data() + (o * view.len + begin) * view.inner;
        for (std::size_t i = 0; i < len * view.inner; ++i) dst[i] += src[i];
      }
    });
  }
  return r;
}

Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
  const auto& s = table.shape();
  if (s.rank() != 2) throw ShapeError("embedding_lookup: table must be a matrix, got " + s.str());
  const auto rows = s[0], dim = s[1];
  const auto tv = table.values();
  std::vector<double> out(ids.size() * dim);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows)
      throw ShapeError("embedding_lookup: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(rows));
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * dim, dim, out.data() + i * dim);
  }
  Tape& tape = table.tape();
  Tensor r = tape.push("embedding_lookup", Shape{ids.size(), dim}, std::move(out), {table});
  if (r.requires_grad()) {
    const int it = table.id(), ir = r.id();
    Tape* tp = &tape;
    std::vector<int> idv(ids.begin(), ids.end());
    tape.set_backward(r, [tp, it, ir, idv, dim] {
      const auto& g = tp->node(ir).grad;
      auto& gt = tp->grad(it);
      for (std::size_t i = 0; i < idv.size(); ++i) {
        double* dst = gt.data() + static_cast<std::size_t>(idv[i]) * dim;
        for (std::size_t d = 0; d < dim; ++d) dst[d] += g[i * dim + d];
      }
    });
  }
  return r;
}

Tensor gather(const Tensor& a, std::span<const int> index) {
  const auto& s = a.shape();
  const auto rows = s.rows(), cols = s.cols();
  if (index.size() != rows)
    throw ShapeError("gather: " + std::to_string(index.size()) + " indices for shape " + s.str());
  const auto av = a.values();
  std::vector<double> out(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    if (index[i] < 0 || static_cast<std::size_t>(index[i]) >= cols)
      throw ShapeError("gather: index " + std::to_string(index[i]) + " out of range for " + s.str());
    out[i] = av[i * cols + static_cast<std::size_t>(index[i])];
  }
  Tape& tape = a.tape();
  Tensor r = tape.push("gather", Shape{rows, 1}, std::move(out), {a});
  if (r.requires_grad()) {
    const int ia = a.id(), ir = r.id();
    Tape* tp = &tape;
    std::vector<int> idx(index.begin(), index.end());
    tape.set_backward(r, [tp, ia, ir, idx, cols] {
      const auto& g = tp->node(ir).grad;
      auto& ga = tp->grad(ia);
      for (std::size_t i = 0; i < idx.size(); ++i) ga[i * cols + static_cast<std::size_t>(idx[i])] += g[i];
    });
  }
  return r;
}

Tensor tanh(const Tensor& a) {
  return unary(
      "tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
  return unary("sigmoid", a, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& a) {
  return unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor log_softmax(const Tensor& a, std::size_t axis) {
  const auto& s = a.shape();
  checked_axis(s, axis, "log_softmax");
  const auto v = axis_view(s, axis);
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t in = 0; in < v.inner; ++in) {
      const auto base = o * v.len * v.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < v.len; ++l) mx = std::max(mx, av[base + l * v.inner]);
      double acc = 0.0;
      for (std::size_t l = 0; l < v.len; ++l) acc += std::exp(av[base + l * v.inner] - mx);
      const double lse = mx + std::log(acc);
      for (std::size_t l = 0; l < v.len; ++l) out[base + l * v.inner] = av[base + l * v.inner] - lse;
    }
  }
  Tape& tape = a.tape();
  Tensor r = tape.push("log_softmax", s, std::move(out), {a});
  if (r.requires_grad()) {
    const int ia = a.id(), ir = r.id();
    Tape* tp = &tape;
    tape.set_backward(r, [tp, ia, ir, v] {
      const auto& g = tp->node(ir).grad;
      const auto& y = tp->node(ir).value;
      auto& ga = tp->grad(ia);
      for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t in = 0; in < v.inner; ++in) {
          const auto base = o * v.len * v.inner + in;
          double gs = 0.0;
          for (std::size_t l = 0; l < v.len; ++l) gs += g[base + l * v.inner];
          for (std::size_t l = 0; l < v.len; ++l) {
            const auto i = base + l * v.inner;
            ga[i] += g[i] - std::exp(y[i]) * gs;
          }
        }
      }
    });
  }
  return r;
}

Tensor softmax(const Tensor& a, std::size_t axis) {
  const auto& s = a.shape();
  checked_axis(s, axis, "softmax");
  const auto v = axis_view(s, axis);
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t in = 0; in < v.inner; ++in) {
      const auto base = o * v.len * v.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < v.len; ++l) mx = std::max(mx, av[base + l * v.inner]);
      double acc = 0.0;
      for (std::size_t l = 0; l < v.len; ++l) {
        const auto i = base + l * v.inner;
        out[i] = std::exp(av[i] - mx);
        acc += out[i];
      }
      for (std::size_t l = 0; l < v.len; ++l) out[base + l * v.inner] /= acc;
    }
  }
  Tape& tape = a.tape();
  Tensor r = tape.push("softmax", s, std::move(out), {a});
  if (r.requires_grad()) {
    const int ia = a.id(), ir = r.id();
    Tape* tp = &tape;
    tape.set_backward(r, [tp, ia, ir, v] {
      const auto& g = tp->node(ir).grad;
      const auto& y = tp->node(ir).value;
      auto& ga = tp->grad(ia);
      for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t in = 0; in < v.inner; ++in) {
          const auto base = o * v.len * v.inner + in;
          double dot = 0.0;
          for (std::size_t l = 0; l < v.len; ++l) dot += g[base + l * v.inner] * y[base + l * v.inner];
          for (std::size_t l = 0; l < v.len; ++l) {
            const auto i = base + l * v.inner;
            ga[i] += y[i] * (g[i] - dot);
          }
        }
      }
    });
  }
  return r;
}

Tensor logsumexp(const Tensor& a, std::size_t axis) {
  const auto& s = a.shape();
  checked_axis(s, axis, "logsumexp");
  const auto v = axis_view(s, axis);
  const auto av = a.values();
  std::vector<double> out(v.outer * v.inner);
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t in = 0; in < v.inner; ++in) {
      const auto base = o * v.len * v.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < v.len; ++l) mx = std::max(mx, av[base + l * v.inner]);
      double acc = 0.0;
      for (std::size_t l = 0; l < v.len; ++l) acc += std::exp(av[base + l * v.inner] - mx);
      out[o * v.inner + in] = mx + std::log(acc);
    }
  }
  Tape& tape = a.tape();
  Tensor r = tape.push("logsumexp", reduced(s, axis), std::move(out), {a});
  if (r.requires_grad()) {
    const int ia = a.id(), ir = r.id();
    Tape* tp = &tape;
    tape.set_backward(r, [tp, ia, ir, v] {
      const auto& g = tp->node(ir).grad;
      const auto& y = tp->node(ir).value;
      const auto& x = tp->node(ia).value;
      auto& ga = tp->grad(ia);
      for (std::size_t o = 0; o < v.outer; ++o) {
        for (std::size_t in = 0; in < v.inner; ++in) {
          const auto ri = o * v.inner + in;
          const auto base = o * v.len * v.inner + in;
          for (std::size_t l = 0; l < v.len; ++l) {
            const auto i = base + l * v.inner;
            ga[i] += g[ri] * std::exp(x[i] - y[ri]);
          }
        }
      }
    });
  }
  return r;
}

Tensor nll(const Tensor& logits, std::size_t target) {
  const auto n = logits.shape().numel();
  if (target >= n)
    throw ShapeError("nll: target " + std::to_string(target) + " out of range for " + logits.shape().str());
  Tensor flat = logits.shape().rank() == 1 ? logits : reshape(logits, Shape{n});
  Tensor lp = log_softmax(flat, 0);
  return scale(slice(lp, 0, target, target + 1), -1.0);
}

Tensor sum(const Tensor& a) {
  const auto av = a.values();
  double acc = 0.0;
  for (double x : av) acc += x;
  Tape& tape = a.tape();
  Tensor r = tape.push("sum", Shape{1}, {acc}, {a});
  if (r.requires_grad()) {
    const int ia = a.id(), ir = r.id();
    Tape* tp = &tape;
    tape.set_backward(r, [tp, ia, ir] {
      const double g = tp->node(ir).grad[0];
      for (auto& x : tp->grad(ia)) x += g;
    });
  }
  return r;
}

Tensor sum(const Tensor& a, std::size_t axis) {
  const auto& s = a.shape();
  checked_axis(s, axis, "sum");
  const auto v = axis_view(s, axis);
  const auto av = a.values();
  std::vector<double> out(v.outer * v.inner, 0.0);
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t l = 0; l < v.len; ++l)
      for (std::size_t in = 0; in < v.inner; ++in) out[o * v.inner + in] += av[(o * v.len + l) * v.inner + in];
  Tape& tape = a.tape();
  Tensor r = tape.push("sum", reduced(s, axis), std::move(out), {a});
  if (r.requires_grad()) {
    const int ia = a.id(), ir = r.id();
    Tape* tp = &tape;
    tape.set_backward(r, [tp, ia, ir, v] {
      const auto& g = tp->node(ir).grad;
      auto& ga = tp->grad(ia);
      for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t l = 0; l < v.len; ++l)
          for (std::size_t in = 0; in < v.inner; ++in) ga[(o * v.len + l) * v.inner + in] += g[o * v.inner + in];
    });
  }
  return r;
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.shape().numel())); }

Tensor gru_cell(const Tensor& x_proj, const Tensor& h, const Tensor& w_h, const Tensor& b_h) {
  Tape& tape = same_tape(h, w_h, "gru_cell");
  same_tape(h, x_proj, "gru_cell");
  same_tape(h, b_h, "gru_cell");
  const auto& sh = h.shape();
  if (sh.rank() != 2) throw ShapeError("gru_cell: hidden state must be a matrix, got " + sh.str());
  const auto rows = sh[0], H = sh[1], G = 3 * H;
  if (!(w_h.shape() == Shape{H, G})) throw ShapeError("gru_cell: w_h must be " + Shape{H, G}.str() + ", got " + w_h.shape().str());
  if (b_h.shape().numel() != G) throw ShapeError("gru_cell: b_h must have " + std::to_string(G) + " entries");
  const auto& sx = x_proj.shape();
  if (sx.cols() != G || (sx.rows() != rows && sx.rows() != 1))
    throw ShapeError("gru_cell: x_proj " + sx.str() + " incompatible with hidden " + sh.str());
  const bool shared_x = sx.rows() == 1 && rows != 1;

  const auto hv = h.values();
  const auto xv = x_proj.values();
  const auto wv = w_h.values();
  const auto bv = b_h.values();

  // hh = h W + b
  std::vector<double> hh(rows * G);
  for (std::size_t i = 0; i < rows; ++i) std::copy_n(bv.data(), G, hh.data() + i * G);
  gemm_nn(hv.data(), wv.data(), hh.data(), rows, H, G);

  // gates: r, z, n stored for backward
  std::vector<double> gates(rows * G);
  std::vector<double> out(rows * H);
  for (std::size_t i = 0; i < rows; ++i) {
    const double* x = xv.data() + (shared_x ? 0 : i * G);
    const double* hp = hh.data() + i * G;
    double* gr = gates.data() + i * G;
    for (std::size_t j = 0; j < H; ++j) {
      const double r = sigmoid_scalar(x[j] + hp[j]);
      const double z = sigmoid_scalar(x[H + j] + hp[H + j]);
      const double n = std::tanh(x[2 * H + j] + r * hp[2 * H + j]);
      gr[j] = r;
      gr[H + j] = z;
      gr[2 * H + j] = n;
      out[i * H + j] = (1.0 - z) * n + z * hv[i * H + j];
    }
  }
  Tensor res = tape.push("gru_cell", Shape{rows, H}, std::move(out), {x_proj, h, w_h, b_h});
  if (res.requires_grad()) {
    const int ix = x_proj.id(), ih = h.id(), iw = w_h.id(), ib = b_h.id(), ir = res.id();
    Tape* tp = &tape;
    tape.set_backward(res, [tp, ix, ih, iw, ib, ir, rows, H, G, shared_x, hh = std::move(hh),
                            gates = std::move(gates)] {
      const auto& g = tp->node(ir).grad;
      const auto& hv = tp->node(ih).value;
      std::vector<double> dx(rows * G);
      std::vector<double> dhh(rows * G);
      std::vector<double> dh_direct(rows * H);
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < H; ++j) {
          const auto k = i * G;
          const double r = gates[k + j], z = gates[k + H + j], n = gates[k + 2 * H + j];
          const double go = g[i * H + j];
          const double dz = go * (hv[i * H + j] - n);
          const double dn = go * (1.0 - z) * (1.0 - n * n);
          const double hn = hh[k + 2 * H + j];
          const double dr = dn * hn * r * (1.0 - r);
          const double dzp = dz * z * (1.0 - z);
          dh_direct[i * H + j] = go * z;
          dx[k + j] = dr;
          dx[k + H + j] = dzp;
          dx[k + 2 * H + j] = dn;
          dhh[k + j] = dr;
          dhh[k + H + j] = dzp;
          dhh[k + 2 * H + j] = dn * r;
        }
      }
      if (tp->node(ix).requires_grad) {
        auto& gx = tp->grad(ix);
        if (shared_x) {
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t c = 0; c < G; ++c) gx[c] += dx[i * G + c];
        } else {
          for (std::size_t i = 0; i < rows * G; ++i) gx[i] += dx[i];
        }
      }
      if (tp->node(ih).requires_grad) {
        auto& gh = tp->grad(ih);
        for (std::size_t i = 0; i < rows * H; ++i) gh[i] += dh_direct[i];
        gemm_nt(dhh.data(), tp->node(iw).value.data(), gh.data(), rows, H, G);
      }
      if (tp->node(iw).requires_grad) gemm_tn(hv.data(), dhh.data(), tp->grad(iw).data(), rows, H, G);
      if (tp->node(ib).requires_grad) {
        auto& gb = tp->grad(ib);
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t c = 0; c < G; ++c) gb[c] += dhh[i * G + c];
      }
    });
  }
  return res;
}

// ---------------------------------------------------------------- optimizers

void sgd_step(std::span<Parameter* const> params, double lr) {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  for (Parameter* p : params) {
    auto& v = p->value();
    const auto& g = p->grad();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
  }
}

Adam::Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) throw ConfigError("adam betas must be in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("adam epsilon must be positive");
}

void Adam::step(std::span<Parameter* const> params) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, t_);
  const double c2 = 1.0 - std::pow(beta2_, t_);
  for (Parameter* p : params) {
    auto& [m, v] = moments_[p];
    auto& w = p->value();
    const auto& g = p->grad();
    if (m.empty()) {
      m.assign(w.size(), 0.0);
      v.assign(w.size(), 0.0);
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      w[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

double clip_grad_norm(std::span<Parameter* const> params, double max_norm) {
  double sq = 0.0;
  for (const Parameter* p : params)
    for (double g : p->grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double f = max_norm / norm;
    for (Parameter* p : params)
      for (double& g : p->grad()) g *= f;
  }
  return norm;
}

// ---------------------------------------------------------------- checkpoints

nlohmann::json checkpoint_json(const ParameterStore& store, const nlohmann::json& meta) {
  return {{"schema", kCheckpointSchema}, {"meta", meta}, {"params", store.to_json()}};
}

void save_checkpoint(const std::string& path, const ParameterStore& store, const nlohmann::json& meta) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write checkpoint " + path);
  out << checkpoint_json(store, meta).dump() << '\n';
}

nlohmann::json load_checkpoint(const std::string& path, ParameterStore& store) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read checkpoint " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
  if (j.value("schema", std::string()) != kCheckpointSchema)
    throw DataError(path + ": checkpoint schema mismatch, expected '" + std::string(kCheckpointSchema) + "'");
  store.load_json(j.at("params"));
  return j.value("meta", nlohmann::json::object());
}

}  // namespace navgen::ndgrad
