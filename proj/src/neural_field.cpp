#include "lidarnerf/neural_field.hpp"

#include "lidarnerf/binary_io.hpp"
#include "lidarnerf/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <sstream>

namespace lnerf {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// Inverse standard normal CDF by bisection on erfc; only used for a handful
// of deterministic sample positions.
double normal_quantile(double p) {
  double lo = -12.0, hi = 12.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    const double cdf = 0.5 * std::erfc(-mid / std::numbers::sqrt2);
    (cdf < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

std::map<std::string, std::string> parse_kv(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    auto strip = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    kv[strip(line.substr(0, eq))] = strip(line.substr(eq + 1));
  }
  return kv;
}

double to_double(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || v.empty()) throw std::invalid_argument("config: bad number '" + v + "' for " + key);
  return out;
}

std::size_t to_count(const std::string& key, const std::string& v) {
  const double d = to_double(key, v);
  if (d < 0 || d != std::floor(d)) throw std::invalid_argument("config: " + key + " must be a non-negative integer");
  return static_cast<std::size_t>(d);
}

Eigen::Vector3d field_position(const NormalizationTransform& tf, const Ray& ray, double t) {
  return tf.field_input(ray.at(t));
}

// Packs a set of equally sized sample lists into the flat arrays consumed by
// NeuralField::forward and volume_render_tensors.
struct PackedSamples {
  std::size_t rays = 0;
  std::size_t per_ray = 0;
  std::vector<double> t;
  std::vector<double> delta;
  std::vector<double> positions;
  std::vector<double> directions;
};

PackedSamples pack(const std::vector<RaySamples>& samples, const NormalizationTransform& tf) {
  PackedSamples p;
  p.rays = samples.size();
  p.per_ray = samples.empty() ? 0 : samples.front().size();
  const std::size_t n = p.rays * p.per_ray;
  p.t.reserve(n);
  p.delta.reserve(n);
  p.positions.reserve(3 * n);
  p.directions.reserve(3 * n);
  for (const auto& s : samples) {
    if (s.size() != p.per_ray) throw std::logic_error("pack: ragged sample counts");
    for (std::size_t k = 0; k < s.size(); ++k) {
      p.t.push_back(s.t[k]);
      p.delta.push_back(s.delta[k]);
      const Eigen::Vector3d x = field_position(tf, s.ray, s.t[k]);
      p.positions.insert(p.positions.end(), {x.x(), x.y(), x.z()});
      p.directions.insert(p.directions.end(), {s.ray.direction.x(), s.ray.direction.y(), s.ray.direction.z()});
    }
  }
  return p;
}

RenderTensors render_packed(const NeuralField& field, std::span<const ad::Tensor> params, const PackedSamples& p) {
  const auto out = field.forward(params, p.positions, p.directions);
  const ad::Shape rs{p.rays, p.per_ray};
  return volume_render_tensors(ad::reshape(out.sigma, rs), ad::reshape(out.intensity, rs), ad::reshape(out.raydrop, rs),
                               p.t, p.delta);
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

std::string sampling_name(SamplingMode mode) { return mode == SamplingMode::guided ? "guided" : "hierarchical"; }

SamplingMode parse_sampling(const std::string& name) {
  if (name == "guided") return SamplingMode::guided;
  if (name == "hierarchical") return SamplingMode::hierarchical;
  throw std::invalid_argument("unknown sampling mode '" + name + "'");
}

void FieldConfig::validate() const {
  const auto positive = [](std::size_t v, const char* name) {
    if (v < 1) throw std::invalid_argument(std::string("field config: ") + name + " must be >= 1");
  };
  positive(layers, "layers");
  positive(width, "width");
  positive(feature_dim, "feature_dim");
  positive(head_layers, "head_layers");
  positive(head_width, "head_width");
  positive(n_coarse, "n_coarse");
  positive(n_fine, "n_fine");
  positive(n_guided, "n_guided");
  positive(batch, "batch");
  positive(chunk_rays, "chunk_rays");
  if (pos_max_exp < 0 || dir_max_exp < 0) throw std::invalid_argument("field config: encoding exponents must be >= 0");
  if (!(near >= 0.0)) throw std::invalid_argument("field config: near must be >= 0");
  if (far != 0.0 && !(near < far)) throw std::invalid_argument("field config: near must be < far");
  if (!(lambda_intensity >= 0.0 && lambda_raydrop >= 0.0)) throw std::invalid_argument("field config: lambdas must be >= 0");
  if (!(lr > 0.0)) throw std::invalid_argument("field config: lr must be > 0");
  if (!(guided_std >= 0.0)) throw std::invalid_argument("field config: guided_std must be >= 0");
}

std::string FieldConfig::to_text() const {
  std::ostringstream os;
  os << "pos_max_exp = " << pos_max_exp << '\n'
     << "dir_max_exp = " << dir_max_exp << '\n'
     << "layers = " << layers << '\n'
     << "width = " << width << '\n'
     << "feature_dim = " << feature_dim << '\n'
     << "head_layers = " << head_layers << '\n'
     << "head_width = " << head_width << '\n'
     << "n_coarse = " << n_coarse << '\n'
     << "n_fine = " << n_fine << '\n'
     << "n_guided = " << n_guided << '\n'
     << "sampling = " << sampling_name(sampling) << '\n'
     << "guided_std = " << fmt_double(guided_std) << '\n'
     << "near = " << fmt_double(near) << '\n'
     << "far = " << fmt_double(far) << '\n'
     << "lambda_intensity = " << fmt_double(lambda_intensity) << '\n'
     << "lambda_raydrop = " << fmt_double(lambda_raydrop) << '\n'
     << "lr = " << fmt_double(lr) << '\n'
     << "batch = " << batch << '\n'
     << "iterations = " << iterations << '\n'
     << "warmup = " << warmup << '\n'
     << "normalization = " << mode_name(normalization.mode) << '\n'
     << "margin = " << fmt_double(normalization.margin) << '\n'
     << "contract_radius = " << fmt_double(normalization.contract_radius) << '\n'
     << "contract_blend = " << fmt_double(normalization.contract_blend) << '\n'
     << "seed = " << seed << '\n'
     << "chunk_rays = " << chunk_rays << '\n'
     << "threads = " << threads << '\n'
     << "fast_matmul = " << (fast_matmul ? 1 : 0) << '\n'
     << "time_budget_s = " << fmt_double(time_budget_s) << '\n';
  return os.str();
}

FieldConfig FieldConfig::parse(const std::string& text) { return parse(text, FieldConfig{}); }

FieldConfig FieldConfig::parse(const std::string& text, FieldConfig c) {
  for (const auto& [k, v] : parse_kv(text)) {
    if (k == "pos_max_exp") c.pos_max_exp = static_cast<int>(to_count(k, v));
    else if (k == "dir_max_exp") c.dir_max_exp = static_cast<int>(to_count(k, v));
    else if (k == "layers") c.layers = to_count(k, v);
    else if (k == "width") c.width = to_count(k, v);
    else if (k == "feature_dim") c.feature_dim = to_count(k, v);
    else if (k == "head_layers") c.head_layers = to_count(k, v);
    else if (k == "head_width") c.head_width = to_count(k, v);
    else if (k == "n_coarse") c.n_coarse = to_count(k, v);
    else if (k == "n_fine") c.n_fine = to_count(k, v);
    else if (k == "n_guided") c.n_guided = to_count(k, v);
    else if (k == "sampling") c.sampling = parse_sampling(v);
    else if (k == "guided_std") c.guided_std = to_double(k, v);
    else if (k == "near") c.near = to_double(k, v);
    else if (k == "far") c.far = to_double(k, v);
    else if (k == "lambda_intensity") c.lambda_intensity = to_double(k, v);
    else if (k == "lambda_raydrop") c.lambda_raydrop = to_double(k, v);
    else if (k == "lr") c.lr = to_double(k, v);
    else if (k == "batch") c.batch = to_count(k, v);
    else if (k == "iterations") c.iterations = to_count(k, v);
    else if (k == "warmup") c.warmup = to_count(k, v);
    else if (k == "normalization") c.normalization.mode = parse_mode(v);
    else if (k == "margin") c.normalization.margin = to_double(k, v);
    else if (k == "contract_radius") c.normalization.contract_radius = to_double(k, v);
    else if (k == "contract_blend") c.normalization.contract_blend = to_double(k, v);
    else if (k == "seed") c.seed = to_count(k, v);
    else if (k == "chunk_rays") c.chunk_rays = to_count(k, v);
    else if (k == "threads") c.threads = static_cast<int>(to_count(k, v));
    else if (k == "fast_matmul") c.fast_matmul = to_count(k, v) != 0;
    else if (k == "time_budget_s") c.time_budget_s = to_double(k, v);
    else throw std::invalid_argument("field config: unknown key " + k);
  }
  c.validate();
  return c;
}

double learning_rate(const FieldConfig& c, std::size_t it) {
  if (it < c.warmup) return c.lr * static_cast<double>(it + 1) / static_cast<double>(c.warmup + 1);
  if (c.iterations <= c.warmup) return c.lr;
  const double progress =
      std::min(1.0, static_cast<double>(it - c.warmup) / static_cast<double>(c.iterations - c.warmup));
  return c.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------------------
// Field

NeuralField::NeuralField(FieldConfig config, NormalizationTransform transform, nn::Mlp density, nn::Mlp head)
    : config_(std::move(config)), transform_(transform), density_(std::move(density)), head_(std::move(head)) {
  const std::size_t pos_in = nn::encoded_size(3, config_.pos_max_exp);
  const std::size_t dir_in = nn::encoded_size(3, config_.dir_max_exp);
  if (density_.input_size() != pos_in || density_.output_size() != 1 + config_.feature_dim) {
    throw std::invalid_argument("NeuralField: density network dims do not match config");
  }
  if (head_.input_size() != config_.feature_dim + dir_in || head_.output_size() != 2) {
    throw std::invalid_argument("NeuralField: head network dims do not match config");
  }
}

NeuralField NeuralField::create(const FieldConfig& config, const NormalizationTransform& transform, nn::Rng& rng) {
  config.validate();
  std::vector<std::size_t> d1{nn::encoded_size(3, config.pos_max_exp)};
  for (std::size_t l = 0; l < config.layers; ++l) d1.push_back(config.width);
  d1.push_back(1 + config.feature_dim);
  std::vector<std::size_t> d2{config.feature_dim + nn::encoded_size(3, config.dir_max_exp)};
  for (std::size_t l = 0; l < config.head_layers; ++l) d2.push_back(config.head_width);
  d2.push_back(2);
  nn::Mlp density = nn::Mlp::create(d1, rng);
  nn::Mlp head = nn::Mlp::create(d2, rng);
  return NeuralField(config, transform, std::move(density), std::move(head));
}

std::vector<ad::Tensor> NeuralField::parameters() const {
  std::vector<ad::Tensor> p = density_.params();
  p.insert(p.end(), head_.params().begin(), head_.params().end());
  return p;
}

void NeuralField::set_parameters(const std::vector<ad::Tensor>& params) {
  const std::size_t nd = density_.params().size();
  if (params.size() != nd + head_.params().size()) throw std::invalid_argument("set_parameters: count mismatch");
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& dst = k < nd ? density_.params()[k] : head_.params()[k - nd];
    if (dst.shape() != params[k].shape()) throw std::invalid_argument("set_parameters: shape mismatch");
    dst = params[k].detach();
  }
}

void NeuralField::zero_output_layers() {
  density_.set_output_layer_constant(0.0);
  head_.set_output_layer_constant(0.0);
}

NeuralField::Outputs NeuralField::forward(std::span<const ad::Tensor> params, std::span<const double> positions,
                                          std::span<const double> directions) const {
  const std::size_t n = positions.size() / 3;
  const std::size_t pos_w = nn::encoded_size(3, config_.pos_max_exp);
  const std::size_t dir_w = nn::encoded_size(3, config_.dir_max_exp);
  std::vector<double> pos_enc(n * pos_w), dir_enc(n * dir_w);
  nn::positional_encode_rows(positions, 3, config_.pos_max_exp, pos_enc.data(), pos_w, 0);
  nn::positional_encode_rows(directions, 3, config_.dir_max_exp, dir_enc.data(), dir_w, 0);
  const std::size_t nd = density_.params().size();
  const ad::Tensor stage1 = nn::Mlp::forward(params.subspan(0, nd), ad::Tensor({n, pos_w}, std::move(pos_enc)));
  const ad::Tensor sigma = ad::softplus(ad::slice_cols(stage1, 0, 1));
  const ad::Tensor feature = ad::slice_cols(stage1, 1, 1 + config_.feature_dim);
  const ad::Tensor head_in = ad::concat({feature, ad::Tensor({n, dir_w}, std::move(dir_enc))});
  const ad::Tensor attrs = ad::sigmoid(nn::Mlp::forward(params.subspan(nd), head_in));
  return {sigma, ad::slice_cols(attrs, 0, 1), ad::slice_cols(attrs, 1, 2)};
}

FieldSample NeuralField::eval(const Eigen::Vector3d& x, const Eigen::Vector3d& theta) const {
  const double pos[3] = {x.x(), x.y(), x.z()};
  const double dir[3] = {theta.x(), theta.y(), theta.z()};
  const auto params = parameters();
  const auto out = forward(params, pos, dir);
  return {out.sigma[0], out.intensity[0], out.raydrop[0]};
}

double NeuralField::far_plane() const {
  if (config_.far > 0.0) return config_.far;
  return std::max(2.0 * transform_.radius, config_.near + 1e-6);
}

void NeuralField::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io::FormatError(io::FormatError::Kind::io, 0, "cannot write " + path.string());
  std::ostringstream text;
  text << config_.to_text() << "transform_mode = " << mode_name(transform_.mode) << '\n'
       << "center_x = " << fmt_double(transform_.center.x()) << '\n'
       << "center_y = " << fmt_double(transform_.center.y()) << '\n'
       << "center_z = " << fmt_double(transform_.center.z()) << '\n'
       << "scale = " << fmt_double(transform_.scale) << '\n'
       << "transform_radius = " << fmt_double(transform_.radius) << '\n'
       << "transform_contract_radius = " << fmt_double(transform_.contract_radius) << '\n'
       << "transform_contract_blend = " << fmt_double(transform_.contract_blend) << '\n';
  const std::string block = text.str();
  io::write_magic(out, "LNNF");
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(block.size()));
  out.write(block.data(), static_cast<std::streamsize>(block.size()));
  density_.write(out);
  head_.write(out);
  if (!out) throw io::FormatError(io::FormatError::Kind::io, 0, "write failed for " + path.string());
}

NeuralField NeuralField::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io::FormatError(io::FormatError::Kind::io, 0, "cannot open " + path.string());
  io::expect_magic(in, "LNNF");
  const auto len = io::read_le<std::uint32_t>(in, "config length");
  if (len > (1u << 20)) throw io::FormatError(io::FormatError::Kind::malformed, 4, "config block too large");
  std::string block(len, '\0');
  in.read(block.data(), len);
  if (static_cast<std::uint32_t>(in.gcount()) != len) {
    throw io::FormatError(io::FormatError::Kind::truncated, 8, "truncated config block");
  }
  auto kv = parse_kv(block);
  NormalizationTransform tf;
  std::ostringstream cfg_text;
  for (const auto& [k, v] : kv) {
    if (k == "transform_mode") tf.mode = parse_mode(v);
    else if (k == "center_x") tf.center.x() = to_double(k, v);
    else if (k == "center_y") tf.center.y() = to_double(k, v);
    else if (k == "center_z") tf.center.z() = to_double(k, v);
    else if (k == "scale") tf.scale = to_double(k, v);
    else if (k == "transform_radius") tf.radius = to_double(k, v);
    else if (k == "transform_contract_radius") tf.contract_radius = to_double(k, v);
    else if (k == "transform_contract_blend") tf.contract_blend = to_double(k, v);
    else cfg_text << k << " = " << v << '\n';
  }
  FieldConfig config;
  try {
    config = FieldConfig::parse(cfg_text.str());
  } catch (const std::invalid_argument& e) {
    throw io::FormatError(io::FormatError::Kind::malformed, 8, e.what());
  }
  nn::Mlp density = nn::Mlp::read(in);
  nn::Mlp head = nn::Mlp::read(in);
  return NeuralField(config, tf, std::move(density), std::move(head));
}

// ---------------------------------------------------------------------------
// Sampling

RaySamples make_samples(const Ray& ray, std::vector<double> t, double far) {
  RaySamples s;
  s.ray = ray;
  s.far = far;
  s.delta.resize(t.size());
  for (std::size_t k = 0; k < t.size(); ++k) {
    const double next = k + 1 < t.size() ? t[k + 1] : far;
    s.delta[k] = std::max(0.0, next - t[k]);
  }
  s.t = std::move(t);
  return s;
}

RaySamples sample_uniform(const Ray& ray, double near, double far, std::size_t n, nn::Rng* rng) {
  if (!(near < far) || n == 0) throw std::invalid_argument("sample_uniform: need near < far and n >= 1");
  std::vector<double> t(n);
  const double bin = (far - near) / static_cast<double>(n);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t k = 0; k < n; ++k) {
    const double offset = rng != nullptr ? u(*rng) : 0.5;
    t[k] = std::min(far, near + (static_cast<double>(k) + offset) * bin);
  }
  return make_samples(ray, std::move(t), far);
}

RaySamples sample_distance_guided(const Ray& ray, double prior, std::size_t n, double std, double near, double far,
                                  nn::Rng* rng) {
  if (!(near < far) || n == 0) throw std::invalid_argument("sample_distance_guided: need near < far and n >= 1");
  std::vector<double> t(n);
  if (rng != nullptr && std > 0.0) {
    std::normal_distribution<double> g(prior, std);
    for (double& v : t) v = g(*rng);
  } else {
    for (std::size_t k = 0; k < n; ++k) {
      t[k] = prior + std * normal_quantile((static_cast<double>(k) + 0.5) / static_cast<double>(n));
    }
  }
  for (double& v : t) v = std::clamp(v, near, far);
  std::sort(t.begin(), t.end());
  return make_samples(ray, std::move(t), far);
}

RaySamples hierarchical_resample(std::span<const double> weights, std::span<const double> t, std::size_t n_fine,
                                 double near, double far, const Ray& ray, nn::Rng* rng) {
  if (weights.size() != t.size() || t.empty()) throw std::invalid_argument("hierarchical_resample: size mismatch");
  const std::size_t n = t.size();
  double total = 0.0;
  for (double w : weights) {
    if (w < 0.0) throw std::invalid_argument("hierarchical_resample: negative weight");
    total += w;
  }
  if (!(total > 0.0)) return sample_uniform(ray, near, far, n_fine, rng);
  std::vector<double> edges(n + 1);
  edges[0] = near;
  for (std::size_t k = 1; k < n; ++k) edges[k] = 0.5 * (t[k - 1] + t[k]);
  edges[n] = far;
  std::vector<double> cdf(n + 1, 0.0);
  for (std::size_t k = 0; k < n; ++k) cdf[k + 1] = cdf[k] + weights[k] / total;
  std::vector<double> u(n_fine);
  if (rng != nullptr) {
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    for (double& v : u) v = dist(*rng);
    std::sort(u.begin(), u.end());
  } else {
    for (std::size_t j = 0; j < n_fine; ++j) u[j] = (static_cast<double>(j) + 0.5) / static_cast<double>(n_fine);
  }
  std::vector<double> out(n_fine);
  for (std::size_t j = 0; j < n_fine; ++j) {
    const double uj = std::min(u[j], cdf[n] * (1.0 - 1e-15));
    const auto it = std::upper_bound(cdf.begin() + 1, cdf.end(), uj);
    const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()) - 1, n - 1);
    const double mass = cdf[k + 1] - cdf[k];
    const double frac = mass > 0.0 ? (uj - cdf[k]) / mass : 0.5;
    out[j] = std::clamp(edges[k] + frac * (edges[k + 1] - edges[k]), near, far);
  }
  std::sort(out.begin(), out.end());
  return make_samples(ray, std::move(out), far);
}

RaySamples merge_samples(const RaySamples& a, const RaySamples& b) {
  std::vector<double> t;
  t.reserve(a.size() + b.size());
  std::merge(a.t.begin(), a.t.end(), b.t.begin(), b.t.end(), std::back_inserter(t));
  return make_samples(a.ray, std::move(t), std::max(a.far, b.far));
}

VolumeRender volume_render(const RaySamples& samples, std::span<const double> sigma,
                           std::span<const double> intensity, std::span<const double> raydrop) {
  const std::size_t n = samples.size();
  if (sigma.size() != n || intensity.size() != n || raydrop.size() != n || n == 0) {
    throw std::invalid_argument("volume_render: sample and attribute counts must match and be >= 1");
  }
  VolumeRender r;
  r.weights.resize(n);
  r.transmittance.resize(n + 1);
  double optical = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    if (sigma[k] < 0.0) throw std::invalid_argument("volume_render: negative density");
    const double tk = std::exp(-optical);
    const double sd = sigma[k] * samples.delta[k];
    r.transmittance[k] = tk;
    r.weights[k] = tk * (1.0 - std::exp(-sd));
    optical += sd;
    r.distance += r.weights[k] * samples.t[k];
    r.intensity += r.weights[k] * intensity[k];
    r.raydrop += r.weights[k] * raydrop[k];
  }
  r.transmittance[n] = std::exp(-optical);
  return r;
}

RenderTensors volume_render_tensors(const ad::Tensor& sigma, const ad::Tensor& intensity, const ad::Tensor& raydrop,
                                    std::span<const double> t, std::span<const double> delta) {
  const ad::Shape shape = sigma.shape();
  const ad::Tensor sd = ad::mul(sigma, ad::Tensor(shape, std::vector<double>(delta.begin(), delta.end())));
  const ad::Tensor alpha = ad::add_scalar(ad::neg(ad::exp(ad::neg(sd))), 1.0);
  const ad::Tensor trans = ad::exp(ad::neg(ad::cumsum_exclusive(sd)));
  const ad::Tensor w = ad::mul(trans, alpha);
  RenderTensors out;
  out.weights = w;
  out.distance = ad::row_sum(ad::mul(w, ad::Tensor(shape, std::vector<double>(t.begin(), t.end()))));
  out.intensity = ad::row_sum(ad::mul(w, intensity));
  out.raydrop = ad::row_sum(ad::mul(w, raydrop));
  return out;
}

// ---------------------------------------------------------------------------
// Loss

LossTerms compute_loss(std::span<const double> pd, std::span<const double> pi, std::span<const double> pp,
                       std::span<const double> gd, std::span<const double> gi, std::span<const double> gp,
                       std::span<const std::uint8_t> valid, double l1, double l2) {
  const std::size_t b = pd.size();
  if (b == 0) throw std::invalid_argument("compute_loss: empty batch");
  if (pi.size() != b || pp.size() != b || gd.size() != b || gi.size() != b || gp.size() != b || valid.size() != b) {
    throw std::invalid_argument("compute_loss: batch lengths differ");
  }
  LossTerms l;
  for (std::size_t k = 0; k < b; ++k) {
    if (valid[k]) {
      l.distance += (pd[k] - gd[k]) * (pd[k] - gd[k]);
      l.intensity += (pi[k] - gi[k]) * (pi[k] - gi[k]);
    }
    l.raydrop += (pp[k] - gp[k]) * (pp[k] - gp[k]);
  }
  const double inv = 1.0 / static_cast<double>(b);
  l.distance *= inv;
  l.intensity *= inv;
  l.raydrop *= inv;
  l.total = l.distance + l1 * l.intensity + l2 * l.raydrop;
  return l;
}

LossTensors loss_tensors(const ad::Tensor& pred_d, const ad::Tensor& pred_i, const ad::Tensor& pred_p,
                         std::span<const double> gt_d, std::span<const double> gt_i, std::span<const double> gt_p,
                         std::span<const std::uint8_t> valid, double l1, double l2, double batch) {
  const std::size_t r = pred_d.size();
  if (r == 0 || !(batch > 0)) throw std::invalid_argument("loss: empty batch");
  const ad::Shape shape{r, 1};
  std::vector<double> mask(r);
  for (std::size_t k = 0; k < r; ++k) mask[k] = valid[k] ? 1.0 : 0.0;
  const ad::Tensor m(shape, mask);
  const auto term = [&](const ad::Tensor& pred, std::span<const double> gt, bool masked) {
    ad::Tensor sq = ad::square(ad::sub(pred, ad::Tensor(shape, std::vector<double>(gt.begin(), gt.end()))));
    if (masked) sq = ad::mul(sq, m);
    return ad::scale(ad::sum(sq), 1.0 / batch);
  };
  LossTensors out;
  out.distance = term(pred_d, gt_d, true);
  out.intensity = term(pred_i, gt_i, true);
  out.raydrop = term(pred_p, gt_p, false);
  out.total = ad::add(out.distance, ad::add(ad::scale(out.intensity, l1), ad::scale(out.raydrop, l2)));
  return out;
}

// ---------------------------------------------------------------------------
// Training

RayPool build_ray_pool(const Scene& scene, const NormalizationTransform& tf) {
  RayPool pool;
  const LidarSpec& spec = scene.spec;
  for (const auto& f : scene.frames) {
    if (f.split != Split::train) continue;
    const RangeImage img = cloud_to_range_image(spec, f.cloud).image;
    const Pose pose = tf.to_ray_space(f.pose);
    for (int h = 0; h < spec.H; ++h) {
      for (int w = 0; w < spec.W; ++w) {
        const Ray ray = ray_for_pixel(spec, pose, h + 0.5, w + 0.5);
        pool.origin.push_back(ray.origin);
        pool.direction.push_back(ray.direction);
        const bool v = img.valid(h, w);
        pool.valid.push_back(v ? 1 : 0);
        pool.distance.push_back(v ? img.distance(h, w) * tf.scale : 0.0);
        pool.intensity.push_back(v ? img.intensity(h, w) : 0.0);
      }
    }
  }
  return pool;
}

std::string TrainLog::to_csv() const {
  std::ostringstream os;
  os << "iteration,lr,loss,distance,intensity,raydrop,elapsed_s\n";
  os << std::setprecision(10);
  for (const auto& r : records) {
    os << r.iteration << ',' << r.lr << ',' << r.loss.total << ',' << r.loss.distance << ',' << r.loss.intensity << ','
       << r.loss.raydrop << ',' << r.elapsed_s << '\n';
  }
  return os.str();
}

TrainingDiverged::TrainingDiverged(std::size_t iteration, NeuralField checkpoint, TrainLog log)
    : std::runtime_error("training diverged at iteration " + std::to_string(iteration)),
      iteration_(iteration),
      checkpoint_(std::move(checkpoint)),
      log_(std::move(log)) {}

namespace {

struct ChunkResult {
  std::vector<std::vector<double>> grads;
  LossTerms loss;
};

ChunkResult run_chunk(const NeuralField& field, const RayPool& pool, std::span<const std::size_t> rays,
                      std::uint64_t seed, double batch, const std::vector<ad::Tensor>& params) {
  const FieldConfig& c = field.config();
  const NormalizationTransform& tf = field.transform();
  const double near = c.near;
  const double far = field.far_plane();
  nn::Rng rng(seed);

  std::vector<double> gd, gi, gp;
  std::vector<std::uint8_t> valid;
  std::vector<RaySamples> coarse;
  for (std::size_t idx : rays) {
    const Ray ray{pool.origin[idx], pool.direction[idx]};
    gd.push_back(pool.distance[idx]);
    gi.push_back(pool.intensity[idx]);
    gp.push_back(pool.valid[idx] ? 1.0 : 0.0);
    valid.push_back(pool.valid[idx]);
    coarse.push_back(sample_uniform(ray, near, far, c.n_coarse, &rng));
  }

  ad::Tape tape;
  const auto bound = tape.watch_all(params);
  ad::Tensor total;
  LossTerms terms;
  const auto add_loss = [&](const RenderTensors& r, bool report) {
    const auto l = loss_tensors(r.distance, r.intensity, r.raydrop, gd, gi, gp, valid, c.lambda_intensity,
                                c.lambda_raydrop, batch);
    total = total.requires_grad() ? ad::add(total, l.total) : l.total;
    if (report) terms = {l.total.item(), l.distance.item(), l.intensity.item(), l.raydrop.item()};
  };

  if (c.sampling == SamplingMode::guided) {
    std::vector<RaySamples> merged;
    merged.reserve(coarse.size());
    for (std::size_t k = 0; k < coarse.size(); ++k) {
      const Ray& ray = coarse[k].ray;
      const RaySamples extra = valid[k] ? sample_distance_guided(ray, gd[k], c.n_guided, c.guided_std, near, far, &rng)
                                        : sample_uniform(ray, near, far, c.n_guided, &rng);
      merged.push_back(merge_samples(coarse[k], extra));
    }
    add_loss(render_packed(field, bound, pack(merged, tf)), true);
  } else {
    const PackedSamples pc = pack(coarse, tf);
    const RenderTensors rc = render_packed(field, bound, pc);
    add_loss(rc, false);
    std::vector<RaySamples> merged;
    merged.reserve(coarse.size());
    const auto w = rc.weights.values();
    for (std::size_t k = 0; k < coarse.size(); ++k) {
      const auto wk = w.subspan(k * c.n_coarse, c.n_coarse);
      const RaySamples fine = hierarchical_resample(wk, coarse[k].t, c.n_fine, near, far, coarse[k].ray, &rng);
      merged.push_back(merge_samples(coarse[k], fine));
    }
    const LossTerms coarse_terms{total.item(), 0, 0, 0};
    add_loss(render_packed(field, bound, pack(merged, tf)), true);
    terms.total += coarse_terms.total;
  }

  const auto grads = tape.backward(total);
  ChunkResult out;
  out.loss = terms;
  out.grads.reserve(bound.size());
  for (const auto& b : bound) {
    const auto v = grads[b].values();
    out.grads.emplace_back(v.begin(), v.end());
  }
  return out;
}

}  // namespace

TrainResult train_from(NeuralField field, const RayPool& pool, const TrainHooks& hooks) {
  const FieldConfig& c = field.config();
  c.validate();
  if (pool.size() == 0) throw std::invalid_argument("train: ray pool is empty");
  nn::Rng rng(c.seed);
  std::vector<ad::Tensor> params = field.parameters();
  ad::AdamState adam(params, ad::AdamHyper{c.lr});
  TrainResult result;
  TrainLog& log = result.log;
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
  const ad::MatmulPrecisionScope precision(c.fast_matmul ? ad::MatmulPrecision::f32 : ad::MatmulPrecision::f64);

  const std::size_t n_chunks = (c.batch + c.chunk_rays - 1) / c.chunk_rays;
  std::vector<std::size_t> batch_rays(c.batch);
  std::vector<std::uint64_t> seeds(n_chunks);
  std::vector<ChunkResult> chunks(n_chunks);
  double train_seconds = 0.0;
  log.stop_reason = "completed";

  for (std::size_t it = 0; it < c.iterations; ++it) {
    if (c.time_budget_s > 0.0 && train_seconds >= c.time_budget_s) {
      log.stop_reason = "time budget";
      break;
    }
    const auto t0 = Clock::now();
    const double lr = learning_rate(c, it);
    for (auto& r : batch_rays) r = pick(rng);
    for (auto& s : seeds) s = rng();
    parallel_for(n_chunks, c.threads, [&](std::size_t k) {
      const std::size_t b = k * c.chunk_rays;
      const std::size_t e = std::min(c.batch, b + c.chunk_rays);
      chunks[k] = run_chunk(field, pool, std::span(batch_rays).subspan(b, e - b), seeds[k],
                            static_cast<double>(c.batch), params);
    });
    LossTerms loss;
    std::vector<ad::Tensor> grads;
    grads.reserve(params.size());
    for (std::size_t p = 0; p < params.size(); ++p) {
      std::vector<double> g(params[p].size(), 0.0);
      for (const auto& ch : chunks) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += ch.grads[p][i];
      }
      grads.emplace_back(params[p].shape(), std::move(g));
    }
    for (const auto& ch : chunks) {
      loss.total += ch.loss.total;
      loss.distance += ch.loss.distance;
      loss.intensity += ch.loss.intensity;
      loss.raydrop += ch.loss.raydrop;
    }
    if (!std::isfinite(loss.total)) {
      log.iterations_run = it;
      log.train_seconds = train_seconds;
      log.stop_reason = "diverged";
      throw TrainingDiverged(it, field, log);
    }
    params = ad::adam_step(params, grads, adam, lr);
    field.set_parameters(params);
    train_seconds += seconds_since(t0);
    log.iterations_run = it + 1;
    if (hooks.log_every > 0 && (it % hooks.log_every == 0 || it + 1 == c.iterations)) {
      log.records.push_back({it, lr, loss, train_seconds});
    }
    if (hooks.on_progress && hooks.every > 0 && (it + 1) % hooks.every == 0) {
      TrainProgress progress{it + 1, train_seconds, log.records.empty() ? nullptr : &log.records.back()};
      if (!hooks.on_progress(progress, field)) {
        log.stop_reason = "stopped by hook";
        break;
      }
    }
  }
  log.train_seconds = train_seconds;
  result.field = std::move(field);
  return result;
}

TrainResult train(const Scene& scene, const FieldConfig& config, const TrainHooks& hooks) {
  config.validate();
  if (scene.count(Split::train) == 0) throw std::invalid_argument("train: scene has no train frames");
  const NormalizationTransform tf = fit_normalization(scene, config.normalization);
  nn::Rng init_rng(config.seed ^ 0x9e3779b97f4a7c15ull);
  NeuralField field = NeuralField::create(config, tf, init_rng);
  const RayPool pool = build_ray_pool(scene, tf);
  return train_from(std::move(field), pool, hooks);
}

// ---------------------------------------------------------------------------
// Rendering

FieldRender render_view(const NeuralField& field, const LidarSpec& spec, const Pose& pose, const RangeImage* prior,
                        const RenderOptions& options) {
  if (prior != nullptr && !prior->spec().same_grid(spec)) throw std::invalid_argument("render_view: prior grid differs");
  const FieldConfig& c = field.config();
  const NormalizationTransform& tf = field.transform();
  const double near = c.near;
  const double far = field.far_plane();
  const Pose ray_pose = tf.to_ray_space(pose);
  const auto params = field.parameters();

  const std::size_t n_pix = static_cast<std::size_t>(spec.H) * static_cast<std::size_t>(spec.W);
  const auto ray_of = [&](std::size_t i) {
    const int h = static_cast<int>(i / static_cast<std::size_t>(spec.W));
    const int w = static_cast<int>(i % static_cast<std::size_t>(spec.W));
    return ray_for_pixel(spec, ray_pose, h + 0.5, w + 0.5);
  };
  // Per-pixel sampling interval, optionally clipped to the fitted ball.
  std::vector<double> near_of(n_pix, near), far_of(n_pix, far);
  std::vector<std::size_t> guided, hier;
  const double bound = tf.radius * (1.0 + options.bounds_margin);
  for (std::size_t i = 0; i < n_pix; ++i) {
    if (options.clip_to_bounds) {
      const Ray ray = ray_of(i);
      const double b = ray.origin.dot(ray.direction);
      const double disc = b * b - (ray.origin.squaredNorm() - bound * bound);
      if (disc <= 0.0) continue;
      near_of[i] = std::max(near, -b - std::sqrt(disc));
      far_of[i] = -b + std::sqrt(disc);
      if (!(far_of[i] > near_of[i])) continue;
    }
    if (prior != nullptr && prior->mask()[i]) {
      guided.push_back(i);
    } else {
      hier.push_back(i);
    }
  }

  FieldRender out{RangeImage(spec), std::vector<double>(n_pix, 0.0), std::vector<double>(n_pix, 0.0),
                  std::vector<double>(n_pix, 0.0)};
  const auto store = [&](std::span<const std::size_t> pixels, const RenderTensors& r) {
    for (std::size_t k = 0; k < pixels.size(); ++k) {
      const std::size_t i = pixels[k];
      out.distance[i] = r.distance[k] / tf.scale;
      out.intensity[i] = std::clamp(r.intensity[k], 0.0, 1.0);
      out.raydrop[i] = r.raydrop[k];
    }
  };

  const ad::MatmulPrecisionScope precision(field.config().fast_matmul ? ad::MatmulPrecision::f32
                                                                     : ad::MatmulPrecision::f64);
  const std::size_t chunk = std::max<std::size_t>(1, options.chunk_rays);
  const std::size_t n_guided_chunks = (guided.size() + chunk - 1) / chunk;
  const std::size_t n_hier_chunks = (hier.size() + chunk - 1) / chunk;
  parallel_for(n_guided_chunks + n_hier_chunks, options.threads, [&](std::size_t job) {
    nn::Rng rng(options.seed + 0x51ed27u * job);
    nn::Rng* r = options.deterministic ? nullptr : &rng;
    const bool is_guided = job < n_guided_chunks;
    const auto& list = is_guided ? guided : hier;
    const std::size_t k0 = (is_guided ? job : job - n_guided_chunks) * chunk;
    const std::size_t k1 = std::min(list.size(), k0 + chunk);
    const std::span<const std::size_t> pixels(list.data() + k0, k1 - k0);
    std::vector<RaySamples> coarse;
    for (std::size_t i : pixels) coarse.push_back(sample_uniform(ray_of(i), near_of[i], far_of[i], c.n_coarse, r));
    std::vector<RaySamples> merged;
    if (is_guided) {
      for (std::size_t k = 0; k < pixels.size(); ++k) {
        const std::size_t i = pixels[k];
        const double prior_d = std::clamp(prior->distances()[i] * tf.scale, near_of[i], far_of[i]);
        merged.push_back(merge_samples(coarse[k], sample_distance_guided(coarse[k].ray, prior_d, c.n_guided,
                                                                         c.guided_std, near_of[i], far_of[i], r)));
      }
    } else {
      const RenderTensors rc = render_packed(field, params, pack(coarse, tf));
      const auto w = rc.weights.values();
      for (std::size_t k = 0; k < pixels.size(); ++k) {
        merged.push_back(merge_samples(
            coarse[k], hierarchical_resample(w.subspan(k * c.n_coarse, c.n_coarse), coarse[k].t, c.n_fine,
                                             near_of[pixels[k]], far_of[pixels[k]], coarse[k].ray, r)));
      }
    }
    store(pixels, render_packed(field, params, pack(merged, tf)));
  });

  for (std::size_t i = 0; i < n_pix; ++i) {
    const double d = out.distance[i];
    if (out.raydrop[i] < options.threshold || !(d > 0.0) || d > spec.max_range) continue;
    const int h = static_cast<int>(i / static_cast<std::size_t>(spec.W));
    const int w = static_cast<int>(i % static_cast<std::size_t>(spec.W));
    out.image.set(h, w, d, out.intensity[i]);
  }
  return out;
}

}  // namespace lnerf
