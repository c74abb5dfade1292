#include "lidarnerf/scene_store.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

namespace lnerf {

namespace {

using io::FormatError;
using Kind = io::FormatError::Kind;

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(Kind::io, 0, "cannot open " + path.string());
  return in;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(Kind::io, 0, "cannot write " + path.string());
  return out;
}

float read_finite(std::istream& in, const char* what) {
  const auto offset = static_cast<std::uint64_t>(in.tellg());
  const float v = io::read_le<float>(in, what);
  if (!std::isfinite(v)) throw FormatError(Kind::non_finite, offset, std::string("non-finite ") + what);
  return v;
}

std::string trim(std::string s) {
  const auto ws = [](unsigned char c) { return std::isspace(c) != 0; };
  s.erase(s.begin(), std::find_if_not(s.begin(), s.end(), ws));
  s.erase(std::find_if_not(s.rbegin(), s.rend(), ws).base(), s.end());
  return s;
}

double parse_double(const std::string& text, const std::string& key) {
  double v = 0.0;
  const char* first = text.data();
  const char* last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || !std::isfinite(v)) {
    throw std::invalid_argument("spec: bad value '" + text + "' for key " + key);
  }
  return v;
}

}  // namespace

// ---------------------------------------------------------------------------
// Point clouds and range images

void save_cloud(const PointCloud& cloud, const std::filesystem::path& path) {
  auto out = open_out(path);
  io::write_magic(out, "LNPC");
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(cloud.size()));
  for (const auto& p : cloud.points) {
    io::write_le<float>(out, static_cast<float>(p.position.x()));
    io::write_le<float>(out, static_cast<float>(p.position.y()));
    io::write_le<float>(out, static_cast<float>(p.position.z()));
    io::write_le<float>(out, static_cast<float>(p.intensity));
  }
  if (!out) throw FormatError(Kind::io, 0, "write failed for " + path.string());
}

PointCloud load_cloud(const std::filesystem::path& path) {
  auto in = open_in(path);
  io::expect_magic(in, "LNPC");
  const auto count = io::read_le<std::uint32_t>(in, "point count");
  PointCloud cloud;
  cloud.points.reserve(std::min<std::uint32_t>(count, 1u << 24));
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto offset = static_cast<std::uint64_t>(in.tellg());
    in.peek();
    if (in.eof()) {
      throw FormatError(Kind::truncated, offset,
                        "truncated payload at record " + std::to_string(k) + " of " + std::to_string(count));
    }
    LidarPoint p;
    const float x = read_finite(in, "x");
    const float y = read_finite(in, "y");
    const float z = read_finite(in, "z");
    p.intensity = read_finite(in, "intensity");
    p.position = {x, y, z};
    cloud.points.push_back(p);
  }
  return cloud;
}

void save_range_image(const RangeImage& img, const std::filesystem::path& path) {
  auto out = open_out(path);
  io::write_magic(out, "LNRI");
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(img.rows()));
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(img.cols()));
  for (std::size_t i = 0; i < img.pixel_count(); ++i) {
    io::write_le<float>(out, static_cast<float>(img.distances()[i]));
    io::write_le<float>(out, static_cast<float>(img.intensities()[i]));
    io::write_le<float>(out, img.mask()[i] ? 1.0f : 0.0f);
  }
  if (!out) throw FormatError(Kind::io, 0, "write failed for " + path.string());
}

RangeImage load_range_image(const std::filesystem::path& path, const LidarSpec& spec) {
  auto in = open_in(path);
  io::expect_magic(in, "LNRI");
  const auto h = io::read_le<std::uint32_t>(in, "H");
  const auto w = io::read_le<std::uint32_t>(in, "W");
  if (static_cast<int>(h) != spec.H || static_cast<int>(w) != spec.W) {
    throw FormatError(Kind::malformed, 4,
                      path.string() + ": image is " + std::to_string(h) + "x" + std::to_string(w) +
                          " but the sensor spec is " + std::to_string(spec.H) + "x" + std::to_string(spec.W));
  }
  RangeImage img(spec);
  for (int r = 0; r < spec.H; ++r) {
    for (int c = 0; c < spec.W; ++c) {
      const auto offset = static_cast<std::uint64_t>(in.tellg());
      const float d = read_finite(in, "distance");
      const float i = read_finite(in, "intensity");
      const float m = read_finite(in, "mask");
      if (m != 0.0f && m != 1.0f) throw FormatError(Kind::malformed, offset + 8, "mask value must be 0 or 1");
      if (m == 1.0f) {
        if (!(d > 0.0f) || d > spec.max_range) {
          throw FormatError(Kind::malformed, offset, "valid pixel distance outside (0, max_range]");
        }
        img.set(r, c, d, i);
      } else if (d != 0.0f || i != 0.0f) {
        throw FormatError(Kind::malformed, offset, "dropped pixel carries distance or intensity");
      }
    }
  }
  return img;
}

// ---------------------------------------------------------------------------
// Poses and specs

void save_pose(const Pose& pose, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError(Kind::io, 0, "cannot write " + path.string());
  out.precision(17);
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) out << pose.matrix()(r, c) << (c == 3 ? '\n' : ' ');
  }
}

Pose load_pose(const std::filesystem::path& path, double tol) {
  std::ifstream in(path);
  if (!in) throw FormatError(Kind::io, 0, "cannot open " + path.string());
  std::vector<double> values;
  std::string token;
  while (in >> token) {
    values.push_back(parse_double(token, "pose"));
  }
  if (values.size() != 16) {
    throw FormatError(Kind::malformed, 0,
                      path.string() + ": pose needs 16 numbers, found " + std::to_string(values.size()));
  }
  Eigen::Matrix4d m;
  for (int k = 0; k < 16; ++k) m(k / 4, k % 4) = values[static_cast<std::size_t>(k)];
  try {
    return Pose(m, tol);
  } catch (const std::invalid_argument& e) {
    throw FormatError(Kind::malformed, 0, path.string() + ": " + e.what());
  }
}

LidarSpec parse_spec(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("spec line " + std::to_string(lineno) + ": expected key = value");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  LidarSpec spec;
  const auto need = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw std::invalid_argument(std::string("spec: missing key ") + key);
    return it->second;
  };
  spec.H = static_cast<int>(parse_double(need("H"), "H"));
  spec.W = static_cast<int>(parse_double(need("W"), "W"));
  spec.f_up = deg_to_rad(std::abs(parse_double(need("f_up_deg"), "f_up_deg")));
  spec.f_down = deg_to_rad(std::abs(parse_double(need("f_down_deg"), "f_down_deg")));
  spec.max_range = parse_double(need("max_range"), "max_range");
  if (kv.count("yaw_sign")) spec.yaw_sign = static_cast<int>(parse_double(kv["yaw_sign"], "yaw_sign"));
  for (const auto& [k, v] : kv) {
    static const char* known[] = {"H", "W", "f_up_deg", "f_down_deg", "max_range", "yaw_sign"};
    if (std::find_if(std::begin(known), std::end(known), [&](const char* n) { return k == n; }) == std::end(known)) {
      throw std::invalid_argument("spec: unknown key " + k);
    }
  }
  spec.validate();
  return spec;
}

LidarSpec load_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(Kind::io, 0, "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_spec(ss.str());
  } catch (const std::invalid_argument& e) {
    throw FormatError(Kind::malformed, 0, path.string() + ": " + e.what());
  }
}

std::string format_spec(const LidarSpec& spec) {
  std::ostringstream os;
  os.precision(17);
  os << "H = " << spec.H << "\nW = " << spec.W << "\nf_up_deg = " << spec.f_up * 180.0 / std::numbers::pi
     << "\nf_down_deg = " << spec.f_down * 180.0 / std::numbers::pi << "\nmax_range = " << spec.max_range
     << "\nyaw_sign = " << spec.yaw_sign << '\n';
  return os.str();
}

void save_spec(const LidarSpec& spec, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError(Kind::io, 0, "cannot write " + path.string());
  out << format_spec(spec);
}

// ---------------------------------------------------------------------------
// Manifests

std::vector<std::size_t> Scene::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < frames.size(); ++i)
    if (frames[i].split == split) out.push_back(i);
  return out;
}

ManifestError::ManifestError(const std::filesystem::path& path, int line, const std::string& what)
    : std::runtime_error(path.string() + ":" + std::to_string(line) + ": " + what), line_(line) {}

Scene load_manifest(const std::filesystem::path& path, const LidarSpec& spec) {
  std::ifstream in(path);
  if (!in) throw FormatError(Kind::io, 0, "cannot open " + path.string());
  const auto base = path.parent_path();
  const auto resolve = [&](const std::string& p) {
    std::filesystem::path fp(p);
    return fp.is_absolute() ? fp : base / fp;
  };
  Scene scene;
  scene.spec = spec;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string cloud, pose, tag, extra;
    if (!(ls >> cloud)) continue;
    if (!(ls >> pose >> tag) || (ls >> extra)) {
      throw ManifestError(path, lineno, "expected '<cloud-path> <pose-path> <train|eval>'");
    }
    Frame f;
    if (tag == "train") {
      f.split = Split::train;
    } else if (tag == "eval") {
      f.split = Split::eval;
    } else {
      throw ManifestError(path, lineno, "unknown split tag '" + tag + "'");
    }
    f.cloud_path = resolve(cloud);
    f.pose_path = resolve(pose);
    try {
      f.cloud = load_cloud(f.cloud_path);
      f.pose = load_pose(f.pose_path);
    } catch (const std::exception& e) {
      throw ManifestError(path, lineno, e.what());
    }
    scene.frames.push_back(std::move(f));
  }
  if (scene.count(Split::train) == 0) throw ManifestError(path, lineno, "manifest has no train frames");
  return scene;
}

void save_manifest(const Scene& scene, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError(Kind::io, 0, "cannot write " + path.string());
  const auto base = path.parent_path();
  out << "# cloud pose split\n";
  for (const auto& f : scene.frames) {
    out << std::filesystem::relative(f.cloud_path, base).generic_string() << ' '
        << std::filesystem::relative(f.pose_path, base).generic_string() << ' '
        << (f.split == Split::train ? "train" : "eval") << '\n';
  }
}

PointCloud aggregate_frames(const Scene& scene, FrameFilter filter) {
  PointCloud out;
  out.frame = "world";
  for (std::size_t k = 0; k < scene.frames.size(); ++k) {
    const Frame& f = scene.frames[k];
    if (filter == FrameFilter::train_only && f.split != Split::train) continue;
    const Eigen::Matrix3d r = f.pose.rotation();
    const Eigen::Vector3d t = f.pose.origin();
    for (const auto& p : f.cloud.points) {
      out.points.push_back({r * p.position + t, p.intensity});
      out.provenance.push_back(static_cast<std::uint32_t>(k));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization

Eigen::Vector3d contract_point(const Eigen::Vector3d& x, double r, double b) {
  const double n = x.norm();
  if (n <= r) return x / r;
  return (1.0 + b - b * r / n) * (x / n);
}

Eigen::Vector3d uncontract_point(const Eigen::Vector3d& y, double r, double b) {
  const double n = y.norm();
  if (n <= 1.0) return y * r;
  if (!(n < 1.0 + b)) throw std::domain_error("uncontract_point: |y| must be < 1 + b");
  const double xn = b * r / (1.0 + b - n);
  return y / n * xn;
}

Eigen::Vector3d NormalizationTransform::field_input(const Eigen::Vector3d& ray_space) const {
  if (mode == NormalizationMode::contract) return contract_point(ray_space, contract_radius, contract_blend);
  return ray_space;
}

Pose NormalizationTransform::to_ray_space(const Pose& pose) const {
  return Pose::from_rt(pose.rotation(), to_ray_space(pose.origin()));
}

NormalizationTransform fit_normalization(const Scene& scene, const NormalizationParams& params) {
  if (scene.frames.empty()) throw std::invalid_argument("normalize: scene has no frames");
  if (params.mode == NormalizationMode::contract && !(params.contract_radius > 0 && params.contract_blend > 0)) {
    throw std::invalid_argument("normalize: contract radius and blend must be > 0");
  }
  NormalizationTransform tf;
  tf.mode = params.mode;
  tf.contract_radius = params.contract_radius;
  tf.contract_blend = params.contract_blend;
  tf.center = scene.frames[scene.frames.size() / 2].pose.origin();

  Eigen::Vector3d lo = Eigen::Vector3d::Constant(std::numeric_limits<double>::infinity());
  Eigen::Vector3d hi = -lo;
  double max_abs = 0.0;
  double max_norm = 0.0;
  std::size_t n = 0;
  for (const auto& f : scene.frames) {
    if (f.split != Split::train) continue;
    for (const auto& p : f.cloud.points) {
      const Eigen::Vector3d w = f.pose.apply(p.position) - tf.center;
      lo = lo.cwiseMin(w);
      hi = hi.cwiseMax(w);
      max_abs = std::max(max_abs, w.cwiseAbs().maxCoeff());
      max_norm = std::max(max_norm, w.norm());
      ++n;
    }
  }
  if (n == 0 || (hi - lo).maxCoeff() <= 0.0 || max_abs <= 0.0) {
    throw std::invalid_argument("normalize: degenerate scene (training points are coincident)");
  }
  if (params.mode == NormalizationMode::scale) {
    tf.scale = 1.0 / (max_abs * (1.0 + params.margin));
  } else {
    tf.scale = 1.0;
  }
  tf.radius = max_norm * tf.scale;
  return tf;
}

Scene apply_normalization(const Scene& scene, const NormalizationTransform& tf) {
  Scene out = scene;
  for (auto& f : out.frames) {
    for (auto& p : f.cloud.points) p.position *= tf.scale;
    f.pose = tf.to_ray_space(f.pose);
  }
  out.spec.max_range = scene.spec.max_range * tf.scale;
  return out;
}

NormalizedScene normalize_scene(const Scene& scene, const NormalizationParams& params) {
  NormalizedScene ns;
  ns.transform = fit_normalization(scene, params);
  ns.scene = apply_normalization(scene, ns.transform);
  return ns;
}

std::string mode_name(NormalizationMode mode) { return mode == NormalizationMode::scale ? "scale" : "contract"; }

NormalizationMode parse_mode(const std::string& name) {
  if (name == "scale") return NormalizationMode::scale;
  if (name == "contract") return NormalizationMode::contract;
  throw std::invalid_argument("unknown normalization mode '" + name + "'");
}

}  // namespace lnerf
