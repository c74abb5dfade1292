#include "lidarnerf/lidar_model.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>

namespace lnerf {

void LidarSpec::validate() const {
  if (H < 1) throw std::invalid_argument("lidar spec: H must be >= 1");
  if (W < 2) throw std::invalid_argument("lidar spec: W must be >= 2");
  if (!(f_up >= 0.0 && f_down >= 0.0)) throw std::invalid_argument("lidar spec: FOV bounds are stored as magnitudes");
  if (!(vertical_fov() > 0.0)) throw std::invalid_argument("lidar spec: f_up + f_down must be > 0");
  if (!(max_range > 0.0)) throw std::invalid_argument("lidar spec: max_range must be > 0");
  if (yaw_sign != 1 && yaw_sign != -1) throw std::invalid_argument("lidar spec: yaw_sign must be +1 or -1");
}

bool LidarSpec::same_grid(const LidarSpec& other) const noexcept { return H == other.H && W == other.W; }

double deg_to_rad(double deg) { return deg * std::numbers::pi / 180.0; }

// ---------------------------------------------------------------------------

RangeImage::RangeImage(const LidarSpec& spec) : spec_(spec) {
  spec_.validate();
  const std::size_t n = static_cast<std::size_t>(spec.H) * static_cast<std::size_t>(spec.W);
  distance_.assign(n, 0.0);
  intensity_.assign(n, 0.0);
  mask_.assign(n, 0);
}

void RangeImage::set(int h, int w, double d, double intensity) {
  if (!(d > 0.0) || d > spec_.max_range) {
    throw std::invalid_argument("range image: distance " + std::to_string(d) + " outside (0, max_range]");
  }
  const std::size_t i = index(h, w);
  distance_[i] = d;
  intensity_[i] = intensity;
  mask_[i] = 1;
}

void RangeImage::clear(int h, int w) {
  const std::size_t i = index(h, w);
  distance_[i] = 0.0;
  intensity_[i] = 0.0;
  mask_[i] = 0;
}

std::size_t RangeImage::valid_count() const noexcept {
  std::size_t n = 0;
  for (auto m : mask_) n += m != 0;
  return n;
}

void RangeImage::check_invariants() const {
  for (std::size_t i = 0; i < distance_.size(); ++i) {
    const bool m = mask_[i] != 0;
    if (m != (distance_[i] > 0.0)) throw std::invalid_argument("range image: mask/distance disagree at pixel " + std::to_string(i));
    if (m && distance_[i] > spec_.max_range) throw std::invalid_argument("range image: distance beyond max_range at pixel " + std::to_string(i));
    if (!m && intensity_[i] != 0.0) throw std::invalid_argument("range image: intensity on dropped pixel " + std::to_string(i));
  }
}

// ---------------------------------------------------------------------------

Pose::Pose(const Eigen::Matrix4d& m, double tol) : m_(m) {
  if ((m.row(3) - Eigen::RowVector4d(0, 0, 0, 1)).cwiseAbs().maxCoeff() > tol) {
    throw std::invalid_argument("pose: bottom row must be (0, 0, 0, 1)");
  }
  const Eigen::Matrix3d r = m.topLeftCorner<3, 3>();
  const double err = (r * r.transpose() - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  if (!(err <= tol)) throw std::invalid_argument("pose: rotation block is not orthonormal (error " + std::to_string(err) + ")");
  if (r.determinant() < 0) throw std::invalid_argument("pose: rotation block is a reflection");
}

Pose Pose::from_rt(const Eigen::Matrix3d& r, const Eigen::Vector3d& t) {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = r;
  m.topRightCorner<3, 1>() = t;
  return Pose(m);
}

Pose Pose::inverse() const {
  const Eigen::Matrix3d rt = rotation().transpose();
  Pose p;
  p.m_.topLeftCorner<3, 3>() = rt;
  p.m_.topRightCorner<3, 1>() = -rt * origin();
  return p;
}

Pose Pose::operator*(const Pose& other) const {
  Pose p;
  p.m_ = m_ * other.m_;
  return p;
}

// ---------------------------------------------------------------------------

Eigen::Vector3d pixel_to_direction(const LidarSpec& spec, double h, double w) {
  if (!(h >= 0.0 && h < spec.H) || !(w >= 0.0 && w < spec.W)) {
    throw OutOfBounds("pixel (" + std::to_string(h) + ", " + std::to_string(w) + ") outside " +
                      std::to_string(spec.H) + "x" + std::to_string(spec.W) + " image");
  }
  const double alpha = spec.f_up - h * spec.vertical_fov() / spec.H;
  const double beta = spec.yaw_sign * (-(2.0 * w - spec.W) * std::numbers::pi / spec.W);
  const double ca = std::cos(alpha);
  return {ca * std::cos(beta), ca * std::sin(beta), std::sin(alpha)};
}

std::optional<PixelCoord> point_to_pixel(const LidarSpec& spec, const Eigen::Vector3d& p) {
  const double d = p.norm();
  if (!(d > 0.0) || d > spec.max_range) return std::nullopt;
  const double pitch = std::asin(std::clamp(p.z() / d, -1.0, 1.0));
  const double h = (1.0 - (pitch + spec.f_down) / spec.vertical_fov()) * spec.H;
  if (!(h >= 0.0 && h < spec.H)) return std::nullopt;
  const double yaw = std::atan2(p.y(), p.x());
  double w = 0.5 * (1.0 - spec.yaw_sign * yaw / std::numbers::pi) * spec.W;
  if (w >= spec.W) w -= spec.W;
  if (w < 0.0) w += spec.W;
  // Rounding can land exactly on W after the wrap.
  if (w >= spec.W) w = 0.0;
  return PixelCoord{h, w, d};
}

Projection cloud_to_range_image(const LidarSpec& spec, const PointCloud& cloud) {
  Projection out{RangeImage(spec), 0};
  std::vector<double> best(out.image.pixel_count(), 0.0);
  for (const auto& pt : cloud.points) {
    const auto px = point_to_pixel(spec, pt.position);
    if (!px) {
      ++out.skipped;
      continue;
    }
    const int h = std::min(static_cast<int>(std::floor(px->h)), spec.H - 1);
    const int w = std::min(static_cast<int>(std::floor(px->w)), spec.W - 1);
    const std::size_t i = out.image.index(h, w);
    if (best[i] == 0.0 || px->distance < best[i]) {
      best[i] = px->distance;
      out.image.set(h, w, px->distance, pt.intensity);
    }
  }
  return out;
}

PointCloud range_image_to_cloud(const RangeImage& img, PixelConvention convention) {
  PointCloud cloud;
  const double off = convention == PixelConvention::center ? 0.5 : 0.0;
  const LidarSpec& spec = img.spec();
  for (int h = 0; h < spec.H; ++h) {
    for (int w = 0; w < spec.W; ++w) {
      if (!img.valid(h, w)) continue;
      const Eigen::Vector3d dir = pixel_to_direction(spec, h + off, w + off);
      cloud.points.push_back({img.distance(h, w) * dir, img.intensity(h, w)});
    }
  }
  return cloud;
}

Ray ray_for_pixel(const LidarSpec& spec, const Pose& pose, double h, double w) {
  Ray r;
  r.origin = pose.origin();
  r.direction = (pose.rotation() * pixel_to_direction(spec, h, w)).normalized();
  return r;
}

}  // namespace lnerf
