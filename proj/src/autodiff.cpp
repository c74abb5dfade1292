#include "lidarnerf/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#if defined(__SSE__)
#include <xmmintrin.h>
#endif

namespace lnerf::ad {

namespace {

// Single-precision products of near-zero gradients (rays far behind a
// surface) land in the subnormal range, which runs several times slower.
// Flushing them is invisible at float precision.
class FlushSubnormals {
 public:
#if defined(__SSE__)
  FlushSubnormals() : saved_(_mm_getcsr()) { _mm_setcsr(saved_ | 0x8040); }
  ~FlushSubnormals() { _mm_setcsr(saved_); }

 private:
  unsigned saved_;
#endif
};

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

using Data = std::shared_ptr<const std::vector<double>>;

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

[[noreturn]] void shape_fail(std::string_view op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_to_string(a) + " and " +
                   shape_to_string(b));
}

[[noreturn]] void shape_fail(std::string_view op, const Shape& a, std::string_view why) {
  throw ShapeError(std::string(op) + ": shape " + shape_to_string(a) + " " + std::string(why));
}

Tape* common_tape(std::string_view op, std::initializer_list<const Tensor*> inputs) {
  Tape* tape = nullptr;
  for (const Tensor* t : inputs) {
    if (!t->requires_grad()) continue;
    if (tape != nullptr && tape != t->tape()) {
      throw std::logic_error(std::string(op) + ": inputs recorded on different tapes");
    }
    tape = t->tape();
  }
  return tape;
}

Tensor make(Shape shape, std::vector<double> values) {
  return Tensor(std::move(shape), std::move(values));
}

// Elementwise unary op with derivative expressed through input x and output y.
template <class Fwd, class Deriv>
Tensor unary(std::string_view op, const Tensor& x, Fwd fwd, Deriv deriv) {
  const auto in = x.values();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
  Tensor result = make(x.shape(), std::move(out));
  Tape* tape = common_tape(op, {&x});
  if (tape == nullptr) return result;
  Data xd = x.storage();
  Data yd = result.storage();
  return tape->record(result, {&x},
                      [xd, yd, deriv](std::span<const double> g, std::span<GradBuffer* const> gi) {
                        if (gi[0] == nullptr) return;
                        auto& dst = *gi[0];
                        const auto& xv = *xd;
                        const auto& yv = *yd;
                        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * deriv(xv[i], yv[i]);
                      });
}

struct Broadcast {
  Shape out_shape;
  std::size_t rows = 1;
  std::size_t cols = 1;
  bool a_bcast = false;  // a is a single row repeated over rows
  bool b_bcast = false;
};

bool row_of(const Shape& small, const Shape& big) {
  if (big.empty()) return false;
  const Shape tail(big.begin() + 1, big.end());
  if (small.size() == big.size() && small.front() == 1 &&
      Shape(small.begin() + 1, small.end()) == tail) {
    return true;
  }
  return small == tail && !tail.empty();
}

Broadcast broadcast(std::string_view op, const Tensor& a, const Tensor& b) {
  Broadcast bc;
  if (a.shape() == b.shape()) {
    bc.out_shape = a.shape();
    bc.rows = 1;
    bc.cols = a.size();
    return bc;
  }
  if (row_of(b.shape(), a.shape())) {
    bc.out_shape = a.shape();
    bc.b_bcast = true;
  } else if (row_of(a.shape(), b.shape())) {
    bc.out_shape = b.shape();
    bc.a_bcast = true;
  } else {
    shape_fail(op, a.shape(), b.shape());
  }
  bc.rows = bc.out_shape.front();
  bc.cols = shape_size(bc.out_shape) / bc.rows;
  return bc;
}

enum class BinKind { add, sub, mul };

Tensor binary(std::string_view op, BinKind kind, const Tensor& a, const Tensor& b) {
  const Broadcast bc = broadcast(op, a, b);
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(bc.rows * bc.cols);
  for (std::size_t r = 0; r < bc.rows; ++r) {
    const double* pa = av.data() + (bc.a_bcast ? 0 : r * bc.cols);
    const double* pb = bv.data() + (bc.b_bcast ? 0 : r * bc.cols);
    double* po = out.data() + r * bc.cols;
    switch (kind) {
      case BinKind::add:
        for (std::size_t c = 0; c < bc.cols; ++c) po[c] = pa[c] + pb[c];
        break;
      case BinKind::sub:
        for (std::size_t c = 0; c < bc.cols; ++c) po[c] = pa[c] - pb[c];
        break;
      case BinKind::mul:
        for (std::size_t c = 0; c < bc.cols; ++c) po[c] = pa[c] * pb[c];
        break;
    }
  }
  Tensor result = make(bc.out_shape, std::move(out));
  Tape* tape = common_tape(op, {&a, &b});
  if (tape == nullptr) return result;
  Data ad = a.storage();
  Data bd = b.storage();
  return tape->record(
      result, {&a, &b},
      [bc, kind, ad, bd](std::span<const double> g, std::span<GradBuffer* const> gi) {
        for (std::size_t r = 0; r < bc.rows; ++r) {
          const double* pg = g.data() + r * bc.cols;
          const std::size_t ao = bc.a_bcast ? 0 : r * bc.cols;
          const std::size_t bo = bc.b_bcast ? 0 : r * bc.cols;
          if (gi[0] != nullptr) {
            double* da = gi[0]->data() + ao;
            if (kind == BinKind::mul) {
              const double* pb = bd->data() + bo;
              for (std::size_t c = 0; c < bc.cols; ++c) da[c] += pg[c] * pb[c];
            } else {
              for (std::size_t c = 0; c < bc.cols; ++c) da[c] += pg[c];
            }
          }
          if (gi[1] != nullptr) {
            double* db = gi[1]->data() + bo;
            switch (kind) {
              case BinKind::add:
                for (std::size_t c = 0; c < bc.cols; ++c) db[c] += pg[c];
                break;
              case BinKind::sub:
                for (std::size_t c = 0; c < bc.cols; ++c) db[c] -= pg[c];
                break;
              case BinKind::mul: {
                const double* pa = ad->data() + ao;
                for (std::size_t c = 0; c < bc.cols; ++c) db[c] += pg[c] * pa[c];
                break;
              }
            }
          }
        }
      });
}

double stable_sigmoid(double x) {
  if (x >= 0) {
    const double z = std::exp(-x);
    return 1.0 / (1.0 + z);
  }
  const double z = std::exp(x);
  return z / (1.0 + z);
}

void require_rank2(std::string_view op, const Tensor& x) {
  if (x.rank() != 2) shape_fail(op, x.shape(), "must be rank 2");
}

}  // namespace

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor() : shape_{1}, data_(std::make_shared<const std::vector<double>>(1, 0.0)) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
  if (shape_.empty()) throw ShapeError("tensor: empty shape");
  for (std::size_t e : shape_) {
    if (e == 0) throw ShapeError("tensor: zero extent in " + shape_to_string(shape_));
  }
  if (shape_size(shape_) != values.size()) {
    throw ShapeError("tensor: shape " + shape_to_string(shape_) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  data_ = std::make_shared<const std::vector<double>>(std::move(values));
}

Tensor Tensor::zeros(Shape shape) { return filled(std::move(shape), 0.0); }

Tensor Tensor::filled(Shape shape, double value) {
  const std::size_t n = shape_size(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item: tensor of shape " + shape_to_string(shape_) + " is not scalar");
  return (*data_)[0];
}

Tensor Tensor::detach() const {
  Tensor t = *this;
  t.tape_ = nullptr;
  t.node_ = -1;
  return t;
}

// ---------------------------------------------------------------------------
// Tape

Tensor Tape::attach(Tensor result, std::vector<int> inputs, BackwardRule rule) {
  Node node;
  node.size = result.size();
  node.shape = result.shape();
  node.inputs = std::move(inputs);
  node.leaf = !rule;
  node.rule = std::move(rule);
  nodes_.push_back(std::move(node));
  result.tape_ = this;
  result.node_ = static_cast<int>(nodes_.size() - 1);
  return result;
}

Tensor Tape::watch(const Tensor& value) { return attach(value.detach(), {}, {}); }

std::vector<Tensor> Tape::watch_all(const std::vector<Tensor>& values) {
  std::vector<Tensor> out;
  out.reserve(values.size());
  for (const auto& v : values) out.push_back(watch(v));
  return out;
}

Tensor Tape::record(Tensor result, std::initializer_list<const Tensor*> inputs, BackwardRule rule) {
  std::vector<int> ids;
  ids.reserve(inputs.size());
  for (const Tensor* t : inputs) ids.push_back(t->tape() == this ? t->node_id() : -1);
  return attach(result.detach(), std::move(ids), std::move(rule));
}

Tensor Tape::record(Tensor result, std::span<const Tensor> inputs, BackwardRule rule) {
  std::vector<int> ids;
  ids.reserve(inputs.size());
  for (const Tensor& t : inputs) ids.push_back(t.tape() == this ? t.node_id() : -1);
  return attach(result.detach(), std::move(ids), std::move(rule));
}

GradientMap Tape::backward(const Tensor& loss) const {
  if (loss.size() != 1) {
    throw ShapeError("backward: loss of shape " + shape_to_string(loss.shape()) + " is not scalar");
  }
  if (nodes_.empty()) throw std::logic_error("backward: tape is empty");
  GradientMap result;
  std::vector<GradBuffer> grads(nodes_.size());
  if (loss.tape() == this) {
    grads[static_cast<std::size_t>(loss.node_id())].assign(1, 1.0);
    std::vector<GradBuffer*> slots;
    for (std::size_t n = static_cast<std::size_t>(loss.node_id()) + 1; n-- > 0;) {
      const Node& node = nodes_[n];
      if (node.leaf || grads[n].empty()) continue;
      slots.clear();
      for (int in : node.inputs) {
        if (in < 0) {
          slots.push_back(nullptr);
          continue;
        }
        auto& buf = grads[static_cast<std::size_t>(in)];
        if (buf.empty()) buf.assign(nodes_[static_cast<std::size_t>(in)].size, 0.0);
        slots.push_back(&buf);
      }
      node.rule(grads[n], slots);
      GradBuffer().swap(grads[n]);
    }
  }
  for (std::size_t n = 0; n < nodes_.size(); ++n) {
    if (!nodes_[n].leaf) continue;
    if (grads[n].empty()) grads[n].assign(nodes_[n].size, 0.0);
    result.grads_.emplace(static_cast<int>(n), Tensor(nodes_[n].shape, std::move(grads[n])));
  }
  return result;
}

const Tensor& GradientMap::operator[](const Tensor& leaf) const { return at(leaf.node_id()); }

const Tensor& GradientMap::at(int node_id) const {
  auto it = grads_.find(node_id);
  if (it == grads_.end()) throw std::out_of_range("gradient: node " + std::to_string(node_id) + " is not a leaf");
  return it->second;
}

// ---------------------------------------------------------------------------
// Ops

namespace {

std::atomic<MatmulPrecision> g_matmul_precision{MatmulPrecision::f64};

using RowMajorF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace

void set_matmul_precision(MatmulPrecision precision) noexcept { g_matmul_precision.store(precision); }
MatmulPrecision matmul_precision() noexcept { return g_matmul_precision.load(); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    shape_fail("matmul", a.shape(), b.shape());
  }
  const auto m = static_cast<Eigen::Index>(a.shape()[0]);
  const auto k = static_cast<Eigen::Index>(a.shape()[1]);
  const auto n = static_cast<Eigen::Index>(b.shape()[1]);
  const bool f32 = matmul_precision() == MatmulPrecision::f32;
  std::vector<double> out(static_cast<std::size_t>(m * n));
  if (f32) {
    const FlushSubnormals flush;
    const RowMajorF af = ConstMap(a.values().data(), m, k).cast<float>();
    const RowMajorF bf = ConstMap(b.values().data(), k, n).cast<float>();
    RowMajorF of(m, n);
    of.noalias() = af * bf;
    MutMap(out.data(), m, n) = of.cast<double>();
  } else {
    MutMap(out.data(), m, n).noalias() = ConstMap(a.values().data(), m, k) * ConstMap(b.values().data(), k, n);
  }
  Tensor result = make({static_cast<std::size_t>(m), static_cast<std::size_t>(n)}, std::move(out));
  Tape* tape = common_tape("matmul", {&a, &b});
  if (tape == nullptr) return result;
  Data ad = a.storage();
  Data bd = b.storage();
  return tape->record(result, {&a, &b},
                      [ad, bd, m, k, n, f32](std::span<const double> g, std::span<GradBuffer* const> gi) {
                        ConstMap gm(g.data(), m, n);
                        if (f32) {
                          const FlushSubnormals flush;
                          const RowMajorF gf = gm.cast<float>();
                          if (gi[0] != nullptr) {
                            const RowMajorF bf = ConstMap(bd->data(), k, n).cast<float>();
                            RowMajorF da(m, k);
                            da.noalias() = gf * bf.transpose();
                            MutMap(gi[0]->data(), m, k) += da.cast<double>();
                          }
                          if (gi[1] != nullptr) {
                            const RowMajorF af = ConstMap(ad->data(), m, k).cast<float>();
                            RowMajorF db(k, n);
                            db.noalias() = af.transpose() * gf;
                            MutMap(gi[1]->data(), k, n) += db.cast<double>();
                          }
                          return;
                        }
                        if (gi[0] != nullptr) {
                          MutMap(gi[0]->data(), m, k).noalias() += gm * ConstMap(bd->data(), k, n).transpose();
                        }
                        if (gi[1] != nullptr) {
                          MutMap(gi[1]->data(), k, n).noalias() += ConstMap(ad->data(), m, k).transpose() * gm;
                        }
                      });
}

Tensor add(const Tensor& a, const Tensor& b) { return binary("add", BinKind::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary("sub", BinKind::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary("mul", BinKind::mul, a, b); }

Tensor neg(const Tensor& x) {
  return unary("neg", x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor relu(const Tensor& x) {
  // Written out so both passes vectorize; a branch per element on random
  // signs mispredicts half the time.
  const auto in = x.values();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = std::max(in[i], 0.0);
  Tensor result = make(x.shape(), std::move(out));
  Tape* tape = common_tape("relu", {&x});
  if (tape == nullptr) return result;
  Data yd = result.storage();
  return tape->record(result, {&x}, [yd](std::span<const double> g, std::span<GradBuffer* const> gi) {
    if (gi[0] == nullptr) return;
    double* dst = gi[0]->data();
    const double* y = yd->data();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += y[i] > 0.0 ? g[i] : 0.0;
  });
}

Tensor sigmoid(const Tensor& x) {
  return unary("sigmoid", x, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& x) {
  return unary(
      "softplus", x, [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
      [](double v, double) { return stable_sigmoid(v); });
}

Tensor sin(const Tensor& x) {
  return unary("sin", x, [](double v) { return std::sin(v); }, [](double v, double) { return std::cos(v); });
}

Tensor cos(const Tensor& x) {
  return unary("cos", x, [](double v) { return std::cos(v); }, [](double v, double) { return -std::sin(v); });
}

Tensor exp(const Tensor& x) {
  return unary("exp", x, [](double v) { return std::exp(std::min(v, kExpClamp)); },
               [](double v, double y) { return v > kExpClamp ? 0.0 : y; });
}

Tensor square(const Tensor& x) {
  return unary("square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor scale(const Tensor& x, double factor) {
  return unary("scale", x, [factor](double v) { return v * factor; },
               [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double value) {
  return unary("add_scalar", x, [value](double v) { return v + value; }, [](double, double) { return 1.0; });
}

Tensor sum(const Tensor& x) {
  const auto v = x.values();
  Tensor result = Tensor::scalar(std::accumulate(v.begin(), v.end(), 0.0));
  Tape* tape = common_tape("sum", {&x});
  if (tape == nullptr) return result;
  return tape->record(result, {&x}, [](std::span<const double> g, std::span<GradBuffer* const> gi) {
    if (gi[0] == nullptr) return;
    for (double& d : *gi[0]) d += g[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Tensor row_sum(const Tensor& x) {
  require_rank2("row_sum", x);
  const std::size_t m = x.shape()[0];
  const std::size_t n = x.shape()[1];
  const auto v = x.values();
  std::vector<double> out(m, 0.0);
  for (std::size_t r = 0; r < m; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < n; ++c) s += v[r * n + c];
    out[r] = s;
  }
  Tensor result = make({m, 1}, std::move(out));
  Tape* tape = common_tape("row_sum", {&x});
  if (tape == nullptr) return result;
  return tape->record(result, {&x}, [m, n](std::span<const double> g, std::span<GradBuffer* const> gi) {
    if (gi[0] == nullptr) return;
    auto& d = *gi[0];
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c) d[r * n + c] += g[r];
  });
}

Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::size_t rank = parts.front().rank();
  if (rank > 2) shape_fail("concat", parts.front().shape(), "must be rank 1 or 2");
  const std::size_t rows = rank == 1 ? 1 : parts.front().shape()[0];
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != rank || (rank == 2 && p.shape()[0] != rows)) {
      shape_fail("concat", parts.front().shape(), p.shape());
    }
    widths.push_back(p.size() / rows);
    total += widths.back();
  }
  std::vector<double> out(rows * total);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto v = parts[k].values();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(v.data() + r * widths[k], widths[k], out.data() + r * total + offset);
    }
    offset += widths[k];
  }
  Shape shape = rank == 1 ? Shape{total} : Shape{rows, total};
  Tensor result = make(std::move(shape), std::move(out));
  Tape* tape = nullptr;
  for (const auto& p : parts) {
    if (!p.requires_grad()) continue;
    if (tape != nullptr && tape != p.tape()) throw std::logic_error("concat: inputs recorded on different tapes");
    tape = p.tape();
  }
  if (tape == nullptr) return result;
  return tape->record(result, std::span<const Tensor>(parts),
                      [rows, total, widths](std::span<const double> g, std::span<GradBuffer* const> gi) {
                        std::size_t off = 0;
                        for (std::size_t k = 0; k < widths.size(); ++k) {
                          if (gi[k] != nullptr) {
                            double* d = gi[k]->data();
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t c = 0; c < widths[k]; ++c) d[r * widths[k] + c] += g[r * total + off + c];
                          }
                          off += widths[k];
                        }
                      });
}

Tensor cumsum_exclusive(const Tensor& x) {
  require_rank2("cumsum_exclusive", x);
  const std::size_t m = x.shape()[0];
  const std::size_t n = x.shape()[1];
  const auto v = x.values();
  std::vector<double> out(m * n);
  for (std::size_t r = 0; r < m; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      out[r * n + c] = acc;
      acc += v[r * n + c];
    }
  }
  Tensor result = make(x.shape(), std::move(out));
  Tape* tape = common_tape("cumsum_exclusive", {&x});
  if (tape == nullptr) return result;
  return tape->record(result, {&x}, [m, n](std::span<const double> g, std::span<GradBuffer* const> gi) {
    if (gi[0] == nullptr) return;
    auto& d = *gi[0];
    for (std::size_t r = 0; r < m; ++r) {
      double acc = 0.0;
      for (std::size_t c = n; c-- > 0;) {
        d[r * n + c] += acc;
        acc += g[r * n + c];
      }
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size()) shape_fail("reshape", x.shape(), shape);
  Tensor result(std::move(shape), std::vector<double>(x.values().begin(), x.values().end()));
  Tape* tape = common_tape("reshape", {&x});
  if (tape == nullptr) return result;
  return tape->record(result, {&x}, [](std::span<const double> g, std::span<GradBuffer* const> gi) {
    if (gi[0] == nullptr) return;
    auto& d = *gi[0];
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  require_rank2("slice_cols", x);
  const std::size_t m = x.shape()[0];
  const std::size_t n = x.shape()[1];
  if (begin >= end || end > n) shape_fail("slice_cols", x.shape(), "cannot be sliced to the requested columns");
  const std::size_t w = end - begin;
  const auto v = x.values();
  std::vector<double> out(m * w);
  for (std::size_t r = 0; r < m; ++r) std::copy_n(v.data() + r * n + begin, w, out.data() + r * w);
  Tensor result = make({m, w}, std::move(out));
  Tape* tape = common_tape("slice_cols", {&x});
  if (tape == nullptr) return result;
  return tape->record(result, {&x}, [m, n, w, begin](std::span<const double> g, std::span<GradBuffer* const> gi) {
    if (gi[0] == nullptr) return;
    auto& d = *gi[0];
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < w; ++c) d[r * n + begin + c] += g[r * w + c];
  });
}

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::sub: return "sub";
    case OpKind::relu: return "relu";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::sin: return "sin";
    case OpKind::cos: return "cos";
    case OpKind::exp: return "exp";
    case OpKind::neg: return "neg";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::square: return "square";
    case OpKind::concat: return "concat";
    case OpKind::softplus: return "softplus";
    case OpKind::row_sum: return "row_sum";
    case OpKind::cumsum_exclusive: return "cumsum_exclusive";
  }
  return "unknown";
}

Tensor forward(OpKind kind, const std::vector<Tensor>& inputs) {
  const auto arity = [&](std::size_t n) {
    if (inputs.size() != n) {
      throw ShapeError(std::string(op_name(kind)) + ": expected " + std::to_string(n) + " inputs, got " +
                       std::to_string(inputs.size()));
    }
  };
  switch (kind) {
    case OpKind::matmul: arity(2); return matmul(inputs[0], inputs[1]);
    case OpKind::add: arity(2); return add(inputs[0], inputs[1]);
    case OpKind::mul: arity(2); return mul(inputs[0], inputs[1]);
    case OpKind::sub: arity(2); return sub(inputs[0], inputs[1]);
    case OpKind::relu: arity(1); return relu(inputs[0]);
    case OpKind::sigmoid: arity(1); return sigmoid(inputs[0]);
    case OpKind::sin: arity(1); return sin(inputs[0]);
    case OpKind::cos: arity(1); return cos(inputs[0]);
    case OpKind::exp: arity(1); return exp(inputs[0]);
    case OpKind::neg: arity(1); return neg(inputs[0]);
    case OpKind::sum: arity(1); return sum(inputs[0]);
    case OpKind::mean: arity(1); return mean(inputs[0]);
    case OpKind::square: arity(1); return square(inputs[0]);
    case OpKind::concat: return concat(inputs);
    case OpKind::softplus: arity(1); return softplus(inputs[0]);
    case OpKind::row_sum: arity(1); return row_sum(inputs[0]);
    case OpKind::cumsum_exclusive: arity(1); return cumsum_exclusive(inputs[0]);
  }
  throw ShapeError("forward: unknown op kind");
}

// ---------------------------------------------------------------------------
// Adam

AdamState::AdamState(const std::vector<Tensor>& params, AdamHyper hyper) : hyper_(hyper) {
  for (const auto& p : params) {
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

std::vector<Tensor> adam_step(const std::vector<Tensor>& params, const std::vector<Tensor>& grads,
                              AdamState& state, std::optional<double> lr) {
  if (params.size() != grads.size() || params.size() != state.m_.size()) {
    throw ShapeError("adam_step: " + std::to_string(params.size()) + " params, " + std::to_string(grads.size()) +
                     " grads, " + std::to_string(state.m_.size()) + " accumulators");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k].shape() != grads[k].shape() || state.m_[k].size() != params[k].size()) {
      shape_fail("adam_step", params[k].shape(), grads[k].shape());
    }
  }
  const AdamHyper& h = state.hyper_;
  const double rate = lr.value_or(h.lr);
  state.step_ += 1;
  const double t = static_cast<double>(state.step_);
  const double c1 = 1.0 - std::pow(h.beta1, t);
  const double c2 = 1.0 - std::pow(h.beta2, t);
  std::vector<Tensor> updated;
  updated.reserve(params.size());
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto p = params[k].values();
    const auto g = grads[k].values();
    auto& m = state.m_[k];
    auto& v = state.v_[k];
    std::vector<double> out(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
      v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      out[i] = p[i] - rate * mhat / (std::sqrt(vhat) + h.eps);
    }
    updated.emplace_back(params[k].shape(), std::move(out));
  }
  return updated;
}

// ---------------------------------------------------------------------------
// Finite differences

double finite_difference_check(const ScalarFunction& f, const Tensor& x, double eps) {
  Tape tape;
  const Tensor leaf = tape.watch(x);
  const Tensor loss = f(leaf);
  if (!std::isfinite(loss.item())) return std::numeric_limits<double>::infinity();
  const GradientMap grads = tape.backward(loss);
  const auto analytic = grads[leaf].values();
  const auto base = x.values();
  double worst = 0.0;
  std::vector<double> probe(base.begin(), base.end());
  for (std::size_t j = 0; j < probe.size(); ++j) {
    const double orig = probe[j];
    probe[j] = orig + eps;
    const double up = f(Tensor(x.shape(), probe)).item();
    probe[j] = orig - eps;
    const double down = f(Tensor(x.shape(), probe)).item();
    probe[j] = orig;
    const double numeric = (up - down) / (2.0 * eps);
    if (!std::isfinite(numeric) || !std::isfinite(analytic[j])) return std::numeric_limits<double>::infinity();
    worst = std::max(worst, std::abs(analytic[j] - numeric) / std::max(1.0, std::abs(analytic[j])));
  }
  return worst;
}

}  // namespace lnerf::ad
