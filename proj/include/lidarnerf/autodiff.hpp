#pragma once

// Dense row-major tensors with a reverse-mode tape.
//
// Tensors are immutable values; their storage is shared between copies.  A
// tensor that requires gradients carries a pointer to the Tape it was recorded
// on and its node id there.  Every op checks whether any input requires
// gradients; if so the result is recorded on that tape together with a
// backward rule, otherwise the op is a plain computation.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lnerf::ad {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class Tape;

class Tensor {
 public:
  /// Scalar zero of shape [1].
  Tensor();
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape);
  static Tensor filled(Shape shape, double value);
  static Tensor scalar(double value);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_->size(); }
  /// Leading extent.
  std::size_t rows() const noexcept { return shape_.front(); }
  /// Product of the trailing extents (1 for rank-1 tensors).
  std::size_t cols() const noexcept { return size() / rows(); }

  std::span<const double> values() const noexcept { return *data_; }
  double operator[](std::size_t i) const { return (*data_)[i]; }
  double at(std::size_t r, std::size_t c) const { return (*data_)[r * cols() + c]; }
  double item() const;

  bool requires_grad() const noexcept { return tape_ != nullptr; }
  int node_id() const noexcept { return node_; }
  Tape* tape() const noexcept { return tape_; }

  /// Same values, no tape link.
  Tensor detach() const;

  const std::shared_ptr<const std::vector<double>>& storage() const noexcept { return data_; }

 private:
  friend class Tape;
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

using GradBuffer = std::vector<double>;

/// Backward rule: receives d(loss)/d(output) and accumulates (+=) into the
/// buffers of each input.  A null buffer means that input needs no gradient.
using BackwardRule =
    std::function<void(std::span<const double> upstream, std::span<GradBuffer* const> input_grads)>;

class GradientMap {
 public:
  /// Gradient for a leaf created by Tape::watch; zeros if the leaf was unused.
  const Tensor& operator[](const Tensor& leaf) const;
  const Tensor& at(int node_id) const;
  bool contains(int node_id) const { return grads_.count(node_id) != 0; }
  std::size_t size() const { return grads_.size(); }

 private:
  friend class Tape;
  std::map<int, Tensor> grads_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers a copy of `value` as a gradient-requiring leaf.
  Tensor watch(const Tensor& value);
  std::vector<Tensor> watch_all(const std::vector<Tensor>& values);

  /// Records `result` as produced from `inputs` by `rule`.  Inputs that do not
  /// require gradients are stored as constants.
  Tensor record(Tensor result, std::initializer_list<const Tensor*> inputs, BackwardRule rule);
  Tensor record(Tensor result, std::span<const Tensor> inputs, BackwardRule rule);

  /// Reverse sweep from a scalar loss.
  GradientMap backward(const Tensor& loss) const;

  void clear() { nodes_.clear(); }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    std::size_t size = 0;
    Shape shape;
    std::vector<int> inputs;
    BackwardRule rule;
    bool leaf = false;
  };
  Tensor attach(Tensor result, std::vector<int> inputs, BackwardRule rule);
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Ops.
//
// Elementwise binary ops accept equal shapes or broadcasting of one operand
// over the leading (batch) dimension of the other: [1, n...] or [n...] against
// [m, n...].

Tensor matmul(const Tensor& a, const Tensor& b);

/// Arithmetic used inside matmul (forward and backward).  f32 rounds the
/// operands to single precision for the product and accumulates the result
/// back into double tensors; every other op stays in double.
enum class MatmulPrecision { f64, f32 };
void set_matmul_precision(MatmulPrecision precision) noexcept;
MatmulPrecision matmul_precision() noexcept;

class MatmulPrecisionScope {
 public:
  explicit MatmulPrecisionScope(MatmulPrecision p) : saved_(matmul_precision()) { set_matmul_precision(p); }
  ~MatmulPrecisionScope() { set_matmul_precision(saved_); }
  MatmulPrecisionScope(const MatmulPrecisionScope&) = delete;
  MatmulPrecisionScope& operator=(const MatmulPrecisionScope&) = delete;

 private:
  MatmulPrecision saved_;
};

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor sin(const Tensor& x);
Tensor cos(const Tensor& x);
/// exp(min(x, kExpClamp)).
Tensor exp(const Tensor& x);
Tensor square(const Tensor& x);
/// Sum of all elements, shape [1].
Tensor sum(const Tensor& x);
/// Mean of all elements, shape [1].
Tensor mean(const Tensor& x);
/// Per-row sum of a rank-2 tensor, shape [m, 1].
Tensor row_sum(const Tensor& x);
/// Concatenation along the last axis (rank-1 or rank-2 inputs, equal rows).
Tensor concat(const std::vector<Tensor>& parts);
/// Exclusive prefix sum along each row of a rank-2 tensor.
Tensor cumsum_exclusive(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
/// Columns [begin, end) of a rank-2 tensor.
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end);

inline constexpr double kExpClamp = 80.0;

enum class OpKind {
  matmul, add, mul, sub, relu, sigmoid, sin, cos, exp, neg, sum, mean, square, concat,
  softplus, row_sum, cumsum_exclusive
};

/// Dispatches by op kind; arity errors throw ShapeError.
Tensor forward(OpKind kind, const std::vector<Tensor>& inputs);
std::string_view op_name(OpKind kind);

// ---------------------------------------------------------------------------
// Optimizer.

struct AdamHyper {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class AdamState {
 public:
  AdamState() = default;
  AdamState(const std::vector<Tensor>& params, AdamHyper hyper);

  const AdamHyper& hyper() const noexcept { return hyper_; }
  long step() const noexcept { return step_; }
  const std::vector<std::vector<double>>& first_moment() const noexcept { return m_; }
  const std::vector<std::vector<double>>& second_moment() const noexcept { return v_; }

 private:
  friend std::vector<Tensor> adam_step(const std::vector<Tensor>&, const std::vector<Tensor>&,
                                       AdamState&, std::optional<double>);
  AdamHyper hyper_;
  long step_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

/// One bias-corrected Adam update.  `lr` overrides the state's learning rate
/// for this step (used by schedules).
std::vector<Tensor> adam_step(const std::vector<Tensor>& params, const std::vector<Tensor>& grads,
                              AdamState& state, std::optional<double> lr = std::nullopt);

// ---------------------------------------------------------------------------
// Gradient checking.

using ScalarFunction = std::function<Tensor(const Tensor& x)>;

/// max_j |analytic_j - central_j| / max(1, |analytic_j|); infinity when any
/// evaluation is non-finite.
double finite_difference_check(const ScalarFunction& f, const Tensor& x, double eps = 1e-5);

}  // namespace lnerf::ad
