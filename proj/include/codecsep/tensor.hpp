// Dense tensors with tape-based reverse-mode differentiation and
// multiply-accumulate accounting.
//
// Forward ops record onto the thread's active Tape (see TapeScope) whenever
// any input takes part in differentiation. MACs are attributed to the
// innermost MacScope label of the thread's active MacCounter.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace codecsep {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an op produces NaN/Inf from finite inputs, or on bad gradients.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

enum class OpKind : std::uint8_t {
  matmul,
  conv1d,
  conv_transpose1d,
  add,
  sub,
  mul,
  add_scalar,
  mul_scalar,
  sin,
  exp,
  log,
  reciprocal,
  sqrt,
  sum,
  mean,
  layer_norm,
  softmax,
  transpose,
  reshape,
  slice,
  concat,
  pad,
  gather_rows,
  elu,
  snake,
};

std::string_view op_name(OpKind kind);

/// Storage precision of op results. f32 rounds every op output and gradient
/// to single precision.
enum class Precision { f64, f32 };

Precision current_precision();

class PrecisionScope {
 public:
  explicit PrecisionScope(Precision p);
  ~PrecisionScope();
  PrecisionScope(const PrecisionScope&) = delete;
  PrecisionScope& operator=(const PrecisionScope&) = delete;

 private:
  Precision saved_;
};

class Tape;
struct TensorImpl;

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Writable view; only valid on leaves (tensors not produced by a recorded op).
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t i) const { return data()[i]; }

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  /// Copy of the values with no tape linkage.
  Tensor detach() const;
  bool is_leaf() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Ordered record of differentiable ops for one forward pass. Consumed by a
/// single backward(); a second backward raises.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void backward(const Tensor& loss);

  std::size_t size() const;
  std::vector<OpKind> op_kinds() const;
  bool consumed() const { return consumed_; }
  std::uint64_t id() const { return id_; }

  struct Entry;

 private:
  friend struct TapeAccess;
  std::vector<std::unique_ptr<Entry>> entries_;
  std::uint64_t id_;
  bool consumed_ = false;
};

/// Makes a tape the thread's active recording target for its lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* saved_;
};

/// Suspends recording (inference on differentiable parameters).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* saved_;
};

Tape* active_tape();

/// Backpropagates through the active tape.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// MAC accounting

struct OpTally {
  std::uint64_t calls = 0;
  std::uint64_t macs = 0;
  bool operator==(const OpTally&) const = default;
};

class MacCounter {
 public:
  using ScopeTable = std::map<OpKind, OpTally>;

  void add(const std::string& scope, OpKind kind, std::uint64_t macs);
  /// Merges a previously recorded tally (used when reading ledgers back).
  void add_tally(const std::string& scope, OpKind kind, const OpTally& tally);

  std::uint64_t total() const;
  std::uint64_t scope_total(const std::string& scope) const;
  std::uint64_t calls(const std::string& scope, OpKind kind) const;
  /// Op evaluations of `kind` summed over every scope.
  std::uint64_t calls(OpKind kind) const;
  const std::map<std::string, ScopeTable>& scopes() const { return scopes_; }
  void merge(const MacCounter& other);
  void clear() { scopes_.clear(); }

  bool operator==(const MacCounter&) const = default;

 private:
  std::map<std::string, ScopeTable> scopes_;
};

/// Routes op accounting on this thread into `counter`.
class CountingScope {
 public:
  explicit CountingScope(MacCounter& counter);
  ~CountingScope();
  CountingScope(const CountingScope&) = delete;
  CountingScope& operator=(const CountingScope&) = delete;

 private:
  MacCounter* saved_;
};

/// Labels ops executed during its lifetime. Nested scopes: innermost wins.
class MacScope {
 public:
  explicit MacScope(std::string label);
  ~MacScope();
  MacScope(const MacScope&) = delete;
  MacScope& operator=(const MacScope&) = delete;
};

inline constexpr std::string_view kUnscoped = "unscoped";

/// Runs `fn` under a fresh counter and scope label and returns the tallies.
MacCounter count_macs(const std::string& scope, const std::function<void()>& fn);

// ---------------------------------------------------------------------------
// Ops. Binary elementwise ops broadcast numpy-style.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& x, double c);
Tensor mul_scalar(const Tensor& x, double c);
Tensor neg(const Tensor& x);

Tensor sin(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor reciprocal(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor square(const Tensor& x);

/// Full reductions to shape {1}.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor matmul(const Tensor& a, const Tensor& b);
/// x [C_in x L], w [C_out x C_in x K]; no implicit padding.
Tensor conv1d(const Tensor& x, const Tensor& w, std::size_t stride);
/// x [C_in x L], w [C_in x C_out x K]; L_out = (L-1)*stride + K.
Tensor conv_transpose1d(const Tensor& x, const Tensor& w, std::size_t stride);

/// Normalizes over the last axis, then scales by gamma and shifts by beta
/// (both shaped like the last axis).
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
/// Softmax over the last axis.
Tensor softmax(const Tensor& x);

Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
/// Columns [begin, end) of the last axis.
Tensor slice_last(const Tensor& x, std::size_t begin, std::size_t end);
Tensor concat_last(std::span<const Tensor> parts);
/// Zero padding on the last axis.
Tensor pad_last(const Tensor& x, std::size_t left, std::size_t right);
/// Rows of `table` [N x D] picked by `rows`; result [rows.size() x D].
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> rows);

Tensor elu(const Tensor& x, double alpha = 1.0);
/// x + sin^2(alpha x) / alpha.
Tensor snake(const Tensor& x, double alpha);

/// x W + b with x [M x K], W [K x N], b [N].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// ---------------------------------------------------------------------------
// Gradient checking

/// Central-difference check of backward() against numerical derivatives of a
/// scalar function of the given leaves. Backward runs at the active precision,
/// the finite differences at f64. Returns max |a-n| / max(|a|,|n|,1e-12).
double grad_check(const std::function<Tensor()>& f, std::span<Tensor> leaves, double eps);
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps);

}  // namespace codecsep
