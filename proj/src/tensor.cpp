#include "codecsep/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <numeric>

namespace codecsep {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool has_grad = false;
  bool requires_grad = false;
  std::uint64_t tape_id = 0;  // 0: leaf or untracked constant
};

// Receives the op's output values and the gradient flowing into them.
using BackwardFn = std::function<void(const std::vector<double>& out, const std::vector<double>& g)>;

struct Tape::Entry {
  OpKind kind;
  std::shared_ptr<TensorImpl> output;
  BackwardFn backward;
};

struct TapeAccess {
  static void push(Tape& tape, std::unique_ptr<Tape::Entry> e) { tape.entries_.push_back(std::move(e)); }
  static std::vector<std::unique_ptr<Tape::Entry>>& entries(Tape& tape) { return tape.entries_; }
};

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

thread_local Tape* t_tape = nullptr;
thread_local MacCounter* t_counter = nullptr;
thread_local std::vector<std::string> t_scopes;
thread_local Precision t_precision = Precision::f64;
std::atomic<std::uint64_t> g_next_tape_id{1};

using ImplPtr = std::shared_ptr<TensorImpl>;

std::size_t product(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

void validate_shape(const Shape& s) {
  if (s.empty()) throw ShapeError("tensor shape must have at least one axis");
  for (auto e : s)
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(s));
}

void round_to_precision(std::vector<double>& v) {
  if (t_precision != Precision::f32) return;
  for (auto& x : v) x = static_cast<double>(static_cast<float>(x));
}

bool tracked(const TensorImpl& t) {
  return t.requires_grad || (t_tape != nullptr && t.tape_id == t_tape->id());
}

std::vector<double>& grad_buf(TensorImpl& t) {
  if (!t.has_grad) {
    t.grad.assign(t.data.size(), 0.0);
    t.has_grad = true;
  }
  return t.grad;
}

void account(OpKind kind, std::uint64_t macs) {
  if (t_counter == nullptr) return;
  t_counter->add(t_scopes.empty() ? std::string(kUnscoped) : t_scopes.back(), kind, macs);
}

// Builds the op result, checks finiteness, and records onto the active tape
// when any input participates in differentiation. `make_backward` is only
// invoked when recording.
template <class MakeBackward>
Tensor emit(OpKind kind, Shape shape, std::vector<double> values, bool participates, MakeBackward&& make_backward) {
  round_to_precision(values);
  for (double v : values)
    if (!std::isfinite(v))
      throw NumericError(std::string("non-finite value produced by op '") + std::string(op_name(kind)) + "'");
  auto out = std::make_shared<TensorImpl>();
  out->shape = std::move(shape);
  out->data = std::move(values);
  if (participates && t_tape != nullptr && !t_tape->consumed()) {
    auto entry = std::make_unique<Tape::Entry>();
    entry->kind = kind;
    entry->output = out;
    entry->backward = make_backward();
    out->tape_id = t_tape->id();
    TapeAccess::push(*t_tape, std::move(entry));
  }
  return Tensor(out);
}

template <class MakeBackward>
Tensor emit(OpKind kind, Shape shape, std::vector<double> values, std::initializer_list<const Tensor*> inputs,
            MakeBackward&& make_backward) {
  bool participates = false;
  for (const Tensor* in : inputs) participates = participates || tracked(*in->impl());
  return emit(kind, std::move(shape), std::move(values), participates, std::forward<MakeBackward>(make_backward));
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ShapeError(std::string(op) + ": undefined tensor");
}

// Index maps for numpy-style broadcasting of two operands.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> ia, ib;
  bool same = false;
};

Broadcast broadcast(const Shape& a, const Shape& b) {
  Broadcast r;
  if (a == b) {
    r.out = a;
    r.same = true;
    return r;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  Shape pa(rank, 1), pb(rank, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(rank - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(rank - b.size()));
  r.out.resize(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    if (pa[d] != pb[d] && pa[d] != 1 && pb[d] != 1)
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    r.out[d] = std::max(pa[d], pb[d]);
  }
  std::vector<std::size_t> sa(rank), sb(rank);
  std::size_t acc_a = 1, acc_b = 1;
  for (std::size_t d = rank; d-- > 0;) {
    sa[d] = pa[d] == 1 ? 0 : acc_a;
    sb[d] = pb[d] == 1 ? 0 : acc_b;
    acc_a *= pa[d];
    acc_b *= pb[d];
  }
  const std::size_t n = product(r.out);
  r.ia.resize(n);
  r.ib.resize(n);
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t oa = 0, ob = 0;
    for (std::size_t d = 0; d < rank; ++d) {
      oa += idx[d] * sa[d];
      ob += idx[d] * sb[d];
    }
    r.ia[i] = oa;
    r.ib[i] = ob;
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < r.out[d]) break;
      idx[d] = 0;
    }
  }
  return r;
}

// f(a, b) -> value; da(a, b) and db(a, b) -> partial derivatives.
template <class F, class DA, class DB>
Tensor binary(OpKind kind, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  require_defined(a, "binary op");
  require_defined(b, "binary op");
  auto bc = std::make_shared<Broadcast>(broadcast(a.shape(), b.shape()));
  const auto& av = a.impl()->data;
  const auto& bv = b.impl()->data;
  const std::size_t n = product(bc->out);
  std::vector<double> out(n);
  if (bc->same) {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i], bv[i]);
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = f(av[bc->ia[i]], bv[bc->ib[i]]);
  }
  account(kind, 0);
  ImplPtr pa = a.impl(), pb = b.impl();
  return emit(kind, bc->out, std::move(out), {&a, &b}, [=] {
    return BackwardFn([=](const std::vector<double>&, const std::vector<double>& g) {
      const auto& x = pa->data;
      const auto& y = pb->data;
      if (tracked(*pa)) {
        auto& ga = grad_buf(*pa);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const std::size_t ia = bc->same ? i : bc->ia[i];
          const std::size_t ib = bc->same ? i : bc->ib[i];
          ga[ia] += g[i] * da(x[ia], y[ib]);
        }
      }
      if (tracked(*pb)) {
        auto& gb = grad_buf(*pb);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const std::size_t ia = bc->same ? i : bc->ia[i];
          const std::size_t ib = bc->same ? i : bc->ib[i];
          gb[ib] += g[i] * db(x[ia], y[ib]);
        }
      }
    });
  });
}

// f(x) -> y; df(x, y) -> dy/dx.
template <class F, class DF>
Tensor unary(OpKind kind, const Tensor& x, F f, DF df) {
  require_defined(x, "unary op");
  const auto& xv = x.impl()->data;
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  account(kind, 0);
  ImplPtr px = x.impl();
  return emit(kind, x.shape(), std::move(out), {&x}, [=] {
    return BackwardFn([=](const std::vector<double>& y, const std::vector<double>& g) {
      auto& gx = grad_buf(*px);
      const auto& xs = px->data;
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xs[i], y[i]);
    });
  });
}

// Pure data movement: out[i] = x[src[i]], or 0 where src[i] == npos.
Tensor gather_op(OpKind kind, const Tensor& x, Shape shape, std::shared_ptr<std::vector<std::size_t>> src) {
  constexpr auto npos = static_cast<std::size_t>(-1);
  const auto& xv = x.impl()->data;
  std::vector<double> out(src->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*src)[i] == npos ? 0.0 : xv[(*src)[i]];
  account(kind, 0);
  ImplPtr px = x.impl();
  return emit(kind, std::move(shape), std::move(out), {&x}, [=] {
    return BackwardFn([=](const std::vector<double>&, const std::vector<double>& g) {
      auto& gx = grad_buf(*px);
      for (std::size_t i = 0; i < g.size(); ++i)
        if ((*src)[i] != npos) gx[(*src)[i]] += g[i];
    });
  });
}

}  // namespace

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::matmul: return "matmul";
    case OpKind::conv1d: return "conv1d";
    case OpKind::conv_transpose1d: return "conv_transpose1d";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::add_scalar: return "add_scalar";
    case OpKind::mul_scalar: return "mul_scalar";
    case OpKind::sin: return "sin";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::reciprocal: return "reciprocal";
    case OpKind::sqrt: return "sqrt";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::layer_norm: return "layer_norm";
    case OpKind::softmax: return "softmax";
    case OpKind::transpose: return "transpose";
    case OpKind::reshape: return "reshape";
    case OpKind::slice: return "slice";
    case OpKind::concat: return "concat";
    case OpKind::pad: return "pad";
    case OpKind::gather_rows: return "gather_rows";
    case OpKind::elu: return "elu";
    case OpKind::snake: return "snake";
  }
  return "unknown";
}

Precision current_precision() { return t_precision; }

PrecisionScope::PrecisionScope(Precision p) : saved_(t_precision) { t_precision = p; }
PrecisionScope::~PrecisionScope() { t_precision = saved_; }

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  validate_shape(shape);
  std::vector<double> values(product(shape), value);
  return from(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  validate_shape(shape);
  if (product(shape) != values.size())
    throw ShapeError("shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) + " values");
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

const Shape& Tensor::shape() const {
  if (!impl_) throw ShapeError("shape() on undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw ShapeError("axis out of range");
  return s[axis];
}

std::size_t Tensor::numel() const { return impl_ ? impl_->data.size() : 0; }

std::span<const double> Tensor::data() const {
  if (!impl_) return {};
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  if (!impl_) throw ShapeError("mutable_data() on undefined tensor");
  if (impl_->tape_id != 0) throw TapeError("only leaf tensors may be written in place");
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() requires a single-element tensor, got " + shape_str(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (!impl_) throw ShapeError("set_requires_grad on undefined tensor");
  if (impl_->tape_id != 0) throw TapeError("requires_grad can only be set on leaves");
  impl_->requires_grad = on;
}

bool Tensor::has_grad() const { return impl_ && impl_->has_grad; }

std::span<const double> Tensor::grad() const {
  if (!impl_) return {};
  return grad_buf(*impl_);
}

void Tensor::zero_grad() {
  if (!impl_) return;
  impl_->grad.assign(impl_->data.size(), 0.0);
  impl_->has_grad = true;
}

Tensor Tensor::detach() const {
  if (!impl_) return {};
  return from(impl_->shape, impl_->data);
}

bool Tensor::is_leaf() const { return impl_ && impl_->tape_id == 0; }

// ---------------------------------------------------------------------------
// Tape

Tape::Tape() : id_(g_next_tape_id.fetch_add(1)) {}
Tape::~Tape() = default;

std::size_t Tape::size() const { return entries_.size(); }

std::vector<OpKind> Tape::op_kinds() const {
  std::vector<OpKind> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e->kind);
  return out;
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw TapeError("tape already consumed by a previous backward()");
  if (!loss.defined() || loss.numel() != 1)
    throw ShapeError("backward() requires a scalar loss");
  auto& li = *loss.impl();
  if (li.tape_id != 0 && li.tape_id != id_) throw TapeError("loss was recorded on a different tape");
  consumed_ = true;

  Tape* saved = t_tape;
  t_tape = this;
  if (li.tape_id == id_ || li.requires_grad) grad_buf(li)[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    auto& e = **it;
    if (e.output->has_grad) {
      round_to_precision(e.output->grad);
      e.backward(e.output->data, e.output->grad);
    }
    e.backward = nullptr;
  }
  t_tape = saved;
}

TapeScope::TapeScope(Tape& tape) : saved_(t_tape) { t_tape = &tape; }
TapeScope::~TapeScope() { t_tape = saved_; }

NoGradScope::NoGradScope() : saved_(t_tape) { t_tape = nullptr; }
NoGradScope::~NoGradScope() { t_tape = saved_; }

Tape* active_tape() { return t_tape; }

void backward(const Tensor& loss) {
  if (t_tape == nullptr) throw TapeError("backward() without an active tape");
  t_tape->backward(loss);
}

// ---------------------------------------------------------------------------
// MAC accounting

void MacCounter::add(const std::string& scope, OpKind kind, std::uint64_t macs) {
  auto& tally = scopes_[scope][kind];
  tally.calls += 1;
  tally.macs += macs;
}

void MacCounter::add_tally(const std::string& scope, OpKind kind, const OpTally& tally) {
  auto& t = scopes_[scope][kind];
  t.calls += tally.calls;
  t.macs += tally.macs;
}

std::uint64_t MacCounter::total() const {
  std::uint64_t t = 0;
  for (const auto& [name, table] : scopes_)
    for (const auto& [kind, tally] : table) t += tally.macs;
  return t;
}

std::uint64_t MacCounter::scope_total(const std::string& scope) const {
  auto it = scopes_.find(scope);
  if (it == scopes_.end()) return 0;
  std::uint64_t t = 0;
  for (const auto& [kind, tally] : it->second) t += tally.macs;
  return t;
}

std::uint64_t MacCounter::calls(const std::string& scope, OpKind kind) const {
  auto it = scopes_.find(scope);
  if (it == scopes_.end()) return 0;
  auto jt = it->second.find(kind);
  return jt == it->second.end() ? 0 : jt->second.calls;
}

std::uint64_t MacCounter::calls(OpKind kind) const {
  std::uint64_t t = 0;
  for (const auto& [name, table] : scopes_) {
    auto jt = table.find(kind);
    if (jt != table.end()) t += jt->second.calls;
  }
  return t;
}

void MacCounter::merge(const MacCounter& other) {
  for (const auto& [name, table] : other.scopes_)
    for (const auto& [kind, tally] : table) {
      auto& mine = scopes_[name][kind];
      mine.calls += tally.calls;
      mine.macs += tally.macs;
    }
}

CountingScope::CountingScope(MacCounter& counter) : saved_(t_counter) { t_counter = &counter; }
CountingScope::~CountingScope() { t_counter = saved_; }

MacScope::MacScope(std::string label) { t_scopes.push_back(std::move(label)); }
MacScope::~MacScope() { t_scopes.pop_back(); }

MacCounter count_macs(const std::string& scope, const std::function<void()>& fn) {
  MacCounter counter;
  CountingScope cs(counter);
  MacScope ms(scope);
  fn();
  return counter;
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      OpKind::add, a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      OpKind::sub, a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      OpKind::mul, a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor add_scalar(const Tensor& x, double c) {
  return unary(OpKind::add_scalar, x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& x, double c) {
  return unary(OpKind::mul_scalar, x, [c](double v) { return v * c; }, [c](double, double) { return c; });
}

Tensor neg(const Tensor& x) { return mul_scalar(x, -1.0); }

Tensor sin(const Tensor& x) {
  return unary(OpKind::sin, x, [](double v) { return std::sin(v); }, [](double v, double) { return std::cos(v); });
}

Tensor exp(const Tensor& x) {
  return unary(OpKind::exp, x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(OpKind::log, x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor reciprocal(const Tensor& x) {
  return unary(
      OpKind::reciprocal, x, [](double v) { return 1.0 / v; }, [](double, double y) { return -y * y; });
}

Tensor sqrt(const Tensor& x) {
  return unary(OpKind::sqrt, x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

Tensor square(const Tensor& x) { return mul(x, x); }

Tensor elu(const Tensor& x, double alpha) {
  return unary(
      OpKind::elu, x, [alpha](double v) { return v >= 0.0 ? v : alpha * std::expm1(v); },
      [alpha](double v, double) { return v >= 0.0 ? 1.0 : alpha * std::exp(v); });
}

Tensor snake(const Tensor& x, double alpha) {
  if (!(alpha > 0.0)) throw std::invalid_argument("snake: alpha must be positive");
  return unary(
      OpKind::snake, x,
      [alpha](double v) {
        const double s = std::sin(alpha * v);
        return v + s * s / alpha;
      },
      [alpha](double v, double) { return 1.0 + std::sin(2.0 * alpha * v); });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
  require_defined(x, "sum");
  double s = 0.0;
  for (double v : x.data()) s += v;
  account(OpKind::sum, 0);
  ImplPtr px = x.impl();
  return emit(OpKind::sum, {1}, {s}, {&x}, [=] {
    return BackwardFn([=](const std::vector<double>&, const std::vector<double>& g) {
      auto& gx = grad_buf(*px);
      for (auto& v : gx) v += g[0];
    });
  });
}

Tensor mean(const Tensor& x) {
  require_defined(x, "mean");
  double s = 0.0;
  for (double v : x.data()) s += v;
  const double n = static_cast<double>(x.numel());
  account(OpKind::mean, 0);
  ImplPtr px = x.impl();
  return emit(OpKind::mean, {1}, {s / n}, {&x}, [=] {
    return BackwardFn([=](const std::vector<double>&, const std::vector<double>& g) {
      auto& gx = grad_buf(*px);
      for (auto& v : gx) v += g[0] / n;
    });
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  MutMap(out.data(), m, n).noalias() = ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
  account(OpKind::matmul, static_cast<std::uint64_t>(m) * n * k);
  ImplPtr pa = a.impl(), pb = b.impl();
  return emit(OpKind::matmul, {m, n}, std::move(out), {&a, &b}, [=] {
    return BackwardFn([=](const std::vector<double>&, const std::vector<double>& g) {
      ConstMap gm(g.data(), m, n);
      if (tracked(*pa)) {
        auto& ga = grad_buf(*pa);
        MutMap(ga.data(), m, k).noalias() += gm * ConstMap(pb->data.data(), k, n).transpose();
      }
      if (tracked(*pb)) {
        auto& gb = grad_buf(*pb);
        MutMap(gb.data(), k, n).noalias() += ConstMap(pa->data.data(), m, k).transpose() * gm;
      }
    });
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add(matmul(x, w), b); }

namespace {

// cols[(c*K + k), t] = x[c, t*stride + k]
void im2col(const double* x, std::size_t channels, std::size_t len, std::size_t kernel, std::size_t stride,
            std::size_t out_len, double* cols) {
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t k = 0; k < kernel; ++k) {
      double* row = cols + (c * kernel + k) * out_len;
      const double* src = x + c * len + k;
      for (std::size_t t = 0; t < out_len; ++t) row[t] = src[t * stride];
    }
}

// Adjoint of im2col: x[c, t*stride + k] += cols[(c*K + k), t]
void col2im(const double* cols, std::size_t channels, std::size_t len, std::size_t kernel, std::size_t stride,
            std::size_t out_len, double* x) {
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t k = 0; k < kernel; ++k) {
      const double* row = cols + (c * kernel + k) * out_len;
      double* dst = x + c * len + k;
      for (std::size_t t = 0; t < out_len; ++t) dst[t * stride] += row[t];
    }
}

}  // namespace

Tensor conv1d(const Tensor& x, const Tensor& w, std::size_t stride) {
  require_defined(x, "conv1d");
  require_defined(w, "conv1d");
  if (x.rank() != 2 || w.rank() != 3 || w.dim(1) != x.dim(0))
    throw ShapeError("conv1d: incompatible shapes " + shape_str(x.shape()) + " and " + shape_str(w.shape()));
  if (stride < 1) throw ShapeError("conv1d: stride must be >= 1");
  const std::size_t cin = x.dim(0), len = x.dim(1), cout = w.dim(0), kernel = w.dim(2);
  if (len < kernel)
    throw ShapeError("conv1d: input length " + std::to_string(len) + " shorter than kernel " + std::to_string(kernel));
  const std::size_t out_len = (len - kernel) / stride + 1;
  auto cols = std::make_shared<std::vector<double>>(cin * kernel * out_len);
  im2col(x.data().data(), cin, len, kernel, stride, out_len, cols->data());
  std::vector<double> out(cout * out_len);
  MutMap(out.data(), cout, out_len).noalias() =
      ConstMap(w.data().data(), cout, cin * kernel) * ConstMap(cols->data(), cin * kernel, out_len);
  account(OpKind::conv1d, static_cast<std::uint64_t>(out_len) * cout * cin * kernel);
  ImplPtr px = x.impl(), pw = w.impl();
  return emit(OpKind::conv1d, {cout, out_len}, std::move(out), {&x, &w}, [=] {
    return BackwardFn([=](const std::vector<double>&, const std::vector<double>& g) {
      ConstMap gm(g.data(), cout, out_len);
      if (tracked(*pw)) {
        auto& gw = grad_buf(*pw);
        MutMap(gw.data(), cout, cin * kernel).noalias() += gm * ConstMap(cols->data(), cin * kernel, out_len).transpose();
      }
      if (tracked(*px)) {
        std::vector<double> gcols(cin * kernel * out_len);
        MutMap(gcols.data(), cin * kernel, out_len).noalias() =
            ConstMap(pw->data.data(), cout, cin * kernel).transpose() * gm;
        col2im(gcols.data(), cin, len, kernel, stride, out_len, grad_buf(*px).data());
      }
    });
  });
}

Tensor conv_transpose1d(const Tensor& x, const Tensor& w, std::size_t stride) {
  require_defined(x, "conv_transpose1d");
  require_defined(w, "conv_transpose1d");
  if (x.rank() != 2 || w.rank() != 3 || w.dim(0) != x.dim(0))
    throw ShapeError("conv_transpose1d: incompatible shapes " + shape_str(x.shape()) + " and " +
                     shape_str(w.shape()));
  if (stride < 1) throw ShapeError("conv_transpose1d: stride must be >= 1");
  const std::size_t cin = x.dim(0), len = x.dim(1), cout = w.dim(1), kernel = w.dim(2);
  const std::size_t out_len = (len - 1) * stride + kernel;
  // cols [(cout*K) x len] = W^T x, then scatter.
  std::vector<double> cols(cout * kernel * len);
  MutMap(cols.data(), cout * kernel, len).noalias() =
      ConstMap(w.data().data(), cin, cout * kernel).transpose() * ConstMap(x.data().data(), cin, len);
  std::vector<double> out(cout * out_len, 0.0);
  col2im(cols.data(), cout, out_len, kernel, stride, len, out.data());
  account(OpKind::conv_transpose1d, static_cast<std::uint64_t>(len) * cin * cout * kernel);
  ImplPtr px = x.impl(), pw = w.impl();
  return emit(OpKind::conv_transpose1d, {cout, out_len}, std::move(out), {&x, &w}, [=] {
    return BackwardFn([=](const std::vector<double>&, const std::vector<double>& g) {
      std::vector<double> gcols(cout * kernel * len);
      im2col(g.data(), cout, out_len, kernel, stride, len, gcols.data());
      ConstMap gc(gcols.data(), cout * kernel, len);
      if (tracked(*px)) {
        auto& gx = grad_buf(*px);
        MutMap(gx.data(), cin, len).noalias() += ConstMap(pw->data.data(), cin, cout * kernel) * gc;
      }
      if (tracked(*pw)) {
        auto& gw = grad_buf(*pw);
        MutMap(gw.data(), cin, cout * kernel).noalias() += ConstMap(px->data.data(), cin, len) * gc.transpose();
      }
    });
  });
}

// ---------------------------------------------------------------------------
// Normalization

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_defined(x, "layer_norm");
  const std::size_t n = x.shape().back();
  if (gamma.numel() != n || beta.numel() != n) throw ShapeError("layer_norm: gamma/beta must match the last axis");
  const std::size_t rows = x.numel() / n;
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (row[j] - mu) * rs;
      (*xhat)[r * n + j] = h;
      out[r * n + j] = h * gv[j] + bv[j];
    }
  }
  account(OpKind::layer_norm, 0);
  ImplPtr px = x.impl(), pg = gamma.impl(), pb = beta.impl();
  return emit(OpKind::layer_norm, x.shape(), std::move(out), {&x, &gamma, &beta}, [=] {
    return BackwardFn([=](const std::vector<double>&, const std::vector<double>& g) {
      const auto& xh = *xhat;
      if (tracked(*pb)) {
        auto& gb = grad_buf(*pb);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
      }
      if (tracked(*pg)) {
        auto& gg = grad_buf(*pg);
        for (std::size_t i = 0; i < g.size(); ++i) gg[i % n] += g[i] * xh[i];
      }
      if (tracked(*px)) {
        auto& gx = grad_buf(*px);
        const auto& gam = pg->data;
        for (std::size_t r = 0; r < rows; ++r) {
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double gh = g[r * n + j] * gam[j];
            m1 += gh;
            m2 += gh * xh[r * n + j];
          }
          m1 /= static_cast<double>(n);
          m2 /= static_cast<double>(n);
          for (std::size_t j = 0; j < n; ++j) {
            const double gh = g[r * n + j] * gam[j];
            gx[r * n + j] += (*rstd)[r] * (gh - m1 - xh[r * n + j] * m2);
          }
        }
      }
    });
  });
}

Tensor softmax(const Tensor& x) {
  require_defined(x, "softmax");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  const auto xv = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[r * n + j] = std::exp(row[j] - mx);
      z += out[r * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] /= z;
  }
  account(OpKind::softmax, 0);
  ImplPtr px = x.impl();
  return emit(OpKind::softmax, x.shape(), std::move(out), {&x}, [=] {
    return BackwardFn([=](const std::vector<double>& y, const std::vector<double>& g) {
      auto& gx = grad_buf(*px);
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
        for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
      }
    });
  });
}

// ---------------------------------------------------------------------------
// Shape plumbing

Tensor transpose(const Tensor& x) {
  require_defined(x, "transpose");
  if (x.rank() != 2) throw ShapeError("transpose: expected a matrix, got " + shape_str(x.shape()));
  const std::size_t m = x.dim(0), n = x.dim(1);
  auto src = std::make_shared<std::vector<std::size_t>>(m * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) (*src)[i * m + j] = j * n + i;
  return gather_op(OpKind::transpose, x, {n, m}, src);
}

Tensor reshape(const Tensor& x, Shape shape) {
  require_defined(x, "reshape");
  validate_shape(shape);
  if (product(shape) != x.numel())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  account(OpKind::reshape, 0);
  ImplPtr px = x.impl();
  std::vector<double> values(px->data);
  return emit(OpKind::reshape, std::move(shape), std::move(values), {&x}, [=] {
    return BackwardFn([=](const std::vector<double>&, const std::vector<double>& g) {
      auto& gx = grad_buf(*px);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  });
}

Tensor slice_last(const Tensor& x, std::size_t begin, std::size_t end) {
  require_defined(x, "slice_last");
  const std::size_t n = x.shape().back();
  if (begin >= end || end > n)
    throw ShapeError("slice_last: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") invalid for extent " + std::to_string(n));
  const std::size_t rows = x.numel() / n, w = end - begin;
  auto src = std::make_shared<std::vector<std::size_t>>(rows * w);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < w; ++j) (*src)[r * w + j] = r * n + begin + j;
  Shape shape = x.shape();
  shape.back() = w;
  return gather_op(OpKind::slice, x, std::move(shape), src);
}

Tensor pad_last(const Tensor& x, std::size_t left, std::size_t right) {
  require_defined(x, "pad_last");
  constexpr auto npos = static_cast<std::size_t>(-1);
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n, w = left + n + right;
  auto src = std::make_shared<std::vector<std::size_t>>(rows * w, npos);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) (*src)[r * w + left + j] = r * n + j;
  Shape shape = x.shape();
  shape.back() = w;
  return gather_op(OpKind::pad, x, std::move(shape), src);
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> rows) {
  require_defined(table, "gather_rows");
  if (table.rank() != 2) throw ShapeError("gather_rows: table must be a matrix");
  if (rows.empty()) throw ShapeError("gather_rows: no rows requested");
  const std::size_t n = table.dim(0), d = table.dim(1);
  auto src = std::make_shared<std::vector<std::size_t>>(rows.size() * d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) throw ShapeError("gather_rows: row index out of range");
    for (std::size_t j = 0; j < d; ++j) (*src)[i * d + j] = rows[i] * d + j;
  }
  return gather_op(OpKind::gather_rows, table, {rows.size(), d}, src);
}

Tensor concat_last(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_last: nothing to concatenate");
  Shape lead = parts[0].shape();
  lead.pop_back();
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape l = p.shape();
    l.pop_back();
    if (l != lead) throw ShapeError("concat_last: leading shapes differ");
    total += p.shape().back();
  }
  const std::size_t rows = product(lead.empty() ? Shape{1} : lead);
  std::vector<double> out(rows * total);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape().back();
    const auto pv = p.data();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(pv.data() + r * w, w, out.data() + r * total + offset);
    offset += w;
  }
  account(OpKind::concat, 0);
  Shape shape = lead;
  shape.push_back(total);
  std::vector<ImplPtr> impls;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    impls.push_back(p.impl());
    widths.push_back(p.shape().back());
  }
  const bool participates = std::any_of(impls.begin(), impls.end(), [](const ImplPtr& p) { return tracked(*p); });
  return emit(OpKind::concat, std::move(shape), std::move(out), participates, [=] {
    return BackwardFn([=](const std::vector<double>&, const std::vector<double>& g) {
      std::size_t off = 0;
      for (std::size_t k = 0; k < impls.size(); ++k) {
        const std::size_t w = widths[k];
        if (tracked(*impls[k])) {
          auto& gp = grad_buf(*impls[k]);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < w; ++j) gp[r * w + j] += g[r * total + off + j];
        }
        off += w;
      }
    });
  });
}

// ---------------------------------------------------------------------------
// Gradient checking

double grad_check(const std::function<Tensor()>& f, std::span<Tensor> leaves, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("grad_check: eps must be positive");
  std::vector<bool> saved_flags;
  for (auto& leaf : leaves) {
    if (!leaf.is_leaf()) throw TapeError("grad_check: inputs must be leaves");
    saved_flags.push_back(leaf.requires_grad());
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor y = f();
    if (y.numel() != 1) throw ShapeError("grad_check: function must be scalar-valued");
    tape.backward(y);
  }
  for (auto& leaf : leaves) analytic.emplace_back(leaf.grad().begin(), leaf.grad().end());

  // Numerical derivatives are always taken in f64.
  double worst = 0.0;
  NoGradScope no_grad;
  PrecisionScope reference(Precision::f64);
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    auto values = leaves[l].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + eps;
      const double up = f().item();
      values[i] = orig - eps;
      const double down = f().item();
      values[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[l][i];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-12});
      worst = std::max(worst, err);
    }
  }
  for (std::size_t l = 0; l < leaves.size(); ++l) leaves[l].set_requires_grad(saved_flags[l]);
  return worst;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  Tensor leaf = x.detach();
  std::array<Tensor, 1> leaves{leaf};
  return grad_check([&] { return f(leaves[0]); }, leaves, eps);
}

}  // namespace codecsep
