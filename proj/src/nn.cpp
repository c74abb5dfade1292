#include "lidarnerf/nn.hpp"

#include "lidarnerf/binary_io.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace lnerf::nn {

std::vector<double> positional_encode(std::span<const double> v, int max_exp) {
  if (max_exp < 0) throw std::invalid_argument("positional_encode: max_exp must be >= 0");
  std::vector<double> out(encoded_size(v.size(), max_exp));
  positional_encode_rows(v, v.size(), max_exp, out.data(), out.size(), 0);
  return out;
}

void positional_encode_rows(std::span<const double> rows, std::size_t n, int max_exp, double* out,
                            std::size_t out_stride, std::size_t out_offset) {
  const std::size_t count = n == 0 ? 0 : rows.size() / n;
  const std::size_t bands = static_cast<std::size_t>(max_exp + 1);
  for (std::size_t r = 0; r < count; ++r) {
    const double* v = rows.data() + r * n;
    double* o = out + r * out_stride + out_offset;
    for (std::size_t j = 0; j < n; ++j) o[j] = v[j];
    double* sin_block = o + n;
    double* cos_block = o + n + bands * n;
    for (std::size_t k = 0; k < bands; ++k) {
      const double freq = std::ldexp(std::numbers::pi, static_cast<int>(k));
      for (std::size_t j = 0; j < n; ++j) {
        const double a = freq * v[j];
        sin_block[k * n + j] = std::sin(a);
        cos_block[k * n + j] = std::cos(a);
      }
    }
  }
}

Mlp::Mlp(std::vector<std::size_t> dims, std::vector<ad::Tensor> params)
    : dims_(std::move(dims)), params_(std::move(params)) {
  if (dims_.size() < 2) throw std::invalid_argument("Mlp: need at least input and output dims");
  if (params_.size() != 2 * layer_count()) throw std::invalid_argument("Mlp: parameter count mismatch");
  for (std::size_t l = 0; l < layer_count(); ++l) {
    if (params_[2 * l].shape() != ad::Shape{dims_[l], dims_[l + 1]} ||
        params_[2 * l + 1].shape() != ad::Shape{1, dims_[l + 1]}) {
      throw std::invalid_argument("Mlp: layer " + std::to_string(l) + " parameter shapes do not match dims");
    }
  }
}

Mlp Mlp::create(std::vector<std::size_t> dims, Rng& rng) {
  std::vector<ad::Tensor> params;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(dims[l]));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> w(dims[l] * dims[l + 1]);
    for (double& x : w) x = dist(rng);
    std::vector<double> b(dims[l + 1]);
    for (double& x : b) x = dist(rng);
    params.emplace_back(ad::Shape{dims[l], dims[l + 1]}, std::move(w));
    params.emplace_back(ad::Shape{1, dims[l + 1]}, std::move(b));
  }
  return Mlp(std::move(dims), std::move(params));
}

std::size_t Mlp::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.size();
  return n;
}

ad::Tensor Mlp::forward(std::span<const ad::Tensor> params, const ad::Tensor& x) {
  ad::Tensor h = x;
  const std::size_t layers = params.size() / 2;
  for (std::size_t l = 0; l < layers; ++l) {
    h = ad::add(ad::matmul(h, params[2 * l]), params[2 * l + 1]);
    if (l + 1 < layers) h = ad::relu(h);
  }
  return h;
}

void Mlp::set_output_layer_constant(double bias) {
  const std::size_t l = layer_count() - 1;
  params_[2 * l] = ad::Tensor::zeros(params_[2 * l].shape());
  params_[2 * l + 1] = ad::Tensor::filled(params_[2 * l + 1].shape(), bias);
}

void Mlp::write(std::ostream& os) const {
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(dims_.size()));
  for (std::size_t d : dims_) io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  for (const auto& p : params_)
    for (double v : p.values()) io::write_le<double>(os, v);
}

Mlp Mlp::read(std::istream& is) {
  const auto count = io::read_le<std::uint32_t>(is, "layer count");
  if (count < 2 || count > 64) {
    throw io::FormatError(io::FormatError::Kind::malformed, static_cast<std::uint64_t>(is.tellg()),
                          "implausible layer count " + std::to_string(count));
  }
  std::vector<std::size_t> dims;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto d = io::read_le<std::uint32_t>(is, "layer dim");
    if (d == 0 || d > (1u << 16)) {
      throw io::FormatError(io::FormatError::Kind::malformed, static_cast<std::uint64_t>(is.tellg()),
                            "implausible layer width " + std::to_string(d));
    }
    dims.push_back(d);
  }
  std::vector<ad::Tensor> params;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    for (const ad::Shape& shape : {ad::Shape{dims[l], dims[l + 1]}, ad::Shape{1, dims[l + 1]}}) {
      std::vector<double> v(shape[0] * shape[1]);
      for (double& x : v) {
        x = io::read_le<double>(is, "parameter");
        if (!std::isfinite(x)) {
          throw io::FormatError(io::FormatError::Kind::non_finite, static_cast<std::uint64_t>(is.tellg()) - 8,
                                "non-finite parameter");
        }
      }
      params.emplace_back(shape, std::move(v));
    }
  }
  return Mlp(std::move(dims), std::move(params));
}

}  // namespace lnerf::nn
