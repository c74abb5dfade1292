#pragma once

// Fully connected networks on top of the autodiff tensors, plus the sinusoidal
// input encoding shared by the field and the ray-drop surrogate.

#include "lidarnerf/autodiff.hpp"

#include <cstddef>
#include <iosfwd>
#include <random>
#include <span>
#include <vector>

namespace lnerf::nn {

using Rng = std::mt19937_64;

/// Width of the encoding of an n-vector with frequencies 2^0..2^max_exp.
constexpr std::size_t encoded_size(std::size_t n, int max_exp) {
  return n * (2 * static_cast<std::size_t>(max_exp + 1) + 1);
}

/// Encodes v as (v, sin(2^0 pi v), ..., sin(2^K pi v), cos(2^0 pi v), ..., cos(2^K pi v)),
/// each block n wide.
std::vector<double> positional_encode(std::span<const double> v, int max_exp);

/// Encodes `count` rows of width n stored contiguously, writing rows of
/// encoded_size(n, max_exp) into `out` starting at column `out_offset` of an
/// output matrix with `out_stride` columns.
void positional_encode_rows(std::span<const double> rows, std::size_t n, int max_exp, double* out,
                            std::size_t out_stride, std::size_t out_offset);

/// Multi-layer perceptron: ReLU between layers, linear output.
/// Parameters are stored as (W0, b0, W1, b1, ...), W_k of shape [in_k, out_k]
/// and b_k of shape [1, out_k].
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::vector<std::size_t> dims, std::vector<ad::Tensor> params);

  /// Weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  static Mlp create(std::vector<std::size_t> dims, Rng& rng);

  const std::vector<std::size_t>& dims() const noexcept { return dims_; }
  std::size_t input_size() const { return dims_.front(); }
  std::size_t output_size() const { return dims_.back(); }
  std::size_t layer_count() const { return dims_.size() - 1; }
  std::size_t parameter_count() const;

  const std::vector<ad::Tensor>& params() const noexcept { return params_; }
  std::vector<ad::Tensor>& params() noexcept { return params_; }

  ad::Tensor forward(const ad::Tensor& x) const { return forward(params_, x); }
  /// Forward with externally supplied parameters (e.g. tape-watched copies).
  static ad::Tensor forward(std::span<const ad::Tensor> params, const ad::Tensor& x);

  /// Replaces the last layer's weights by zeros and its bias by `bias`.
  void set_output_layer_constant(double bias);

  void write(std::ostream& os) const;
  static Mlp read(std::istream& is);

 private:
  std::vector<std::size_t> dims_;
  std::vector<ad::Tensor> params_;
};

}  // namespace lnerf::nn
