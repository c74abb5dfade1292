#pragma once

// Spinning LiDAR sensor model and the range pseudo-image representation.
//
// Pixel (h, w) of an H x W image maps to pitch alpha and yaw beta:
//   alpha = |f_up| - h * f_v / H,      f_v = |f_up| + |f_down|
//   beta  = -(2w - W) * pi / W
// and direction (cos a cos b, cos a sin b, sin a).  Row 0 is the top beam.

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace lnerf {

struct LidarSpec {
  int H = 32;
  int W = 256;
  double f_up = 0.0;    ///< radians, magnitude
  double f_down = 0.0;  ///< radians, magnitude
  double max_range = 80.0;
  /// +1 follows the image-column convention above, -1 mirrors yaw.
  int yaw_sign = 1;

  double vertical_fov() const noexcept { return f_up + f_down; }
  void validate() const;
  bool same_grid(const LidarSpec& other) const noexcept;
  friend bool operator==(const LidarSpec&, const LidarSpec&) = default;
};

struct LidarPoint {
  Eigen::Vector3d position = Eigen::Vector3d::Zero();
  double intensity = 0.0;
};

struct PointCloud {
  std::string frame = "sensor";
  std::vector<LidarPoint> points;
  /// Source frame index per point; empty unless produced by aggregation.
  std::vector<std::uint32_t> provenance;

  std::size_t size() const noexcept { return points.size(); }
  bool empty() const noexcept { return points.empty(); }
};

class RangeImage {
 public:
  RangeImage() = default;
  explicit RangeImage(const LidarSpec& spec);

  const LidarSpec& spec() const noexcept { return spec_; }
  int rows() const noexcept { return spec_.H; }
  int cols() const noexcept { return spec_.W; }
  std::size_t pixel_count() const noexcept { return distance_.size(); }
  std::size_t index(int h, int w) const noexcept {
    return static_cast<std::size_t>(h) * static_cast<std::size_t>(spec_.W) + static_cast<std::size_t>(w);
  }

  double distance(int h, int w) const { return distance_[index(h, w)]; }
  double intensity(int h, int w) const { return intensity_[index(h, w)]; }
  bool valid(int h, int w) const { return mask_[index(h, w)] != 0; }

  /// Stores a return; d must be in (0, max_range].
  void set(int h, int w, double d, double intensity);
  void clear(int h, int w);

  const std::vector<double>& distances() const noexcept { return distance_; }
  const std::vector<double>& intensities() const noexcept { return intensity_; }
  const std::vector<std::uint8_t>& mask() const noexcept { return mask_; }
  std::size_t valid_count() const noexcept;

  /// Throws std::invalid_argument naming the first violated invariant.
  void check_invariants() const;

  friend bool operator==(const RangeImage&, const RangeImage&) = default;

 private:
  LidarSpec spec_;
  std::vector<double> distance_;
  std::vector<double> intensity_;
  std::vector<std::uint8_t> mask_;
};

struct Ray {
  Eigen::Vector3d origin = Eigen::Vector3d::Zero();
  Eigen::Vector3d direction = Eigen::Vector3d::UnitX();
  Eigen::Vector3d at(double t) const { return origin + t * direction; }
};

/// Rigid lidar-to-world transform.
class Pose {
 public:
  Pose() = default;
  /// Throws std::invalid_argument unless bottom row is (0,0,0,1) and the
  /// rotation block is orthonormal within `tol`.
  explicit Pose(const Eigen::Matrix4d& m, double tol = 1e-6);
  static Pose from_rt(const Eigen::Matrix3d& r, const Eigen::Vector3d& t);
  static Pose translation(const Eigen::Vector3d& t) { return from_rt(Eigen::Matrix3d::Identity(), t); }

  const Eigen::Matrix4d& matrix() const noexcept { return m_; }
  Eigen::Matrix3d rotation() const { return m_.topLeftCorner<3, 3>(); }
  Eigen::Vector3d origin() const { return m_.topRightCorner<3, 1>(); }
  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return rotation() * p + origin(); }
  Pose inverse() const;
  Pose operator*(const Pose& other) const;

 private:
  Eigen::Matrix4d m_ = Eigen::Matrix4d::Identity();
};

class OutOfBounds : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// Continuous pixel coordinates of a projected point.
struct PixelCoord {
  double h = 0.0;
  double w = 0.0;
  double distance = 0.0;
};

/// Unit direction in the sensor frame for real-valued pixel coordinates
/// 0 <= h < H, 0 <= w < W.  Pass (h + 0.5, w + 0.5) for cell centres.
Eigen::Vector3d pixel_to_direction(const LidarSpec& spec, double h, double w);

/// Real-valued pixel coordinates of a sensor-frame point, or nullopt when the
/// point is at the origin, beyond max_range, or outside the vertical FOV.
std::optional<PixelCoord> point_to_pixel(const LidarSpec& spec, const Eigen::Vector3d& p);

enum class PixelConvention { center, corner };

struct Projection {
  RangeImage image;
  std::size_t skipped = 0;
};

/// Z-buffer projection: nearest point per cell wins, exact ties go to the
/// lower point index.
Projection cloud_to_range_image(const LidarSpec& spec, const PointCloud& cloud);

/// One point per valid pixel, at the cell centre (or corner) direction.
PointCloud range_image_to_cloud(const RangeImage& img, PixelConvention convention = PixelConvention::center);

/// World-frame ray for real-valued pixel coordinates.
Ray ray_for_pixel(const LidarSpec& spec, const Pose& pose, double h, double w);

double deg_to_rad(double deg);

}  // namespace lnerf
