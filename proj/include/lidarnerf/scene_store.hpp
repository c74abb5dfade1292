#pragma once

// File formats, scene manifests, world-frame aggregation and normalization.
//
//   point cloud  "LNPC" u32 count, count x (f32 x, y, z, intensity)
//   range image  "LNRI" u32 H, u32 W, H*W x (f32 distance, intensity, mask)
//   pose         16 whitespace separated decimals, row-major lidar2world
//   manifest     lines "<cloud> <pose> <train|eval>", '#' comments
//   sensor spec  lines "key = value" (H, W, f_up_deg, f_down_deg, max_range, yaw_sign)

#include "lidarnerf/binary_io.hpp"
#include "lidarnerf/lidar_model.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace lnerf {

using io::FormatError;

void save_cloud(const PointCloud& cloud, const std::filesystem::path& path);
PointCloud load_cloud(const std::filesystem::path& path);

void save_range_image(const RangeImage& img, const std::filesystem::path& path);
/// The file's H and W must match `spec`.
RangeImage load_range_image(const std::filesystem::path& path, const LidarSpec& spec);

void save_pose(const Pose& pose, const std::filesystem::path& path);
/// Orthonormality is checked to `tol`.
Pose load_pose(const std::filesystem::path& path, double tol = 1e-4);

LidarSpec parse_spec(const std::string& text);
LidarSpec load_spec(const std::filesystem::path& path);
std::string format_spec(const LidarSpec& spec);
void save_spec(const LidarSpec& spec, const std::filesystem::path& path);

enum class Split { train, eval };

struct Frame {
  PointCloud cloud;  ///< sensor frame
  Pose pose;         ///< lidar2world
  Split split = Split::train;
  std::filesystem::path cloud_path;
  std::filesystem::path pose_path;
};

struct Scene {
  LidarSpec spec;
  std::vector<Frame> frames;

  std::vector<std::size_t> indices(Split split) const;
  std::size_t count(Split split) const { return indices(split).size(); }
};

/// Error raised for manifest problems; the message names the line.
class ManifestError : public std::runtime_error {
 public:
  ManifestError(const std::filesystem::path& path, int line, const std::string& what);
  int line() const noexcept { return line_; }

 private:
  int line_;
};

/// Relative paths in the manifest resolve against the manifest's directory.
Scene load_manifest(const std::filesystem::path& path, const LidarSpec& spec);
void save_manifest(const Scene& scene, const std::filesystem::path& path);

enum class FrameFilter { all, train_only };

/// World-frame concatenation with per-point provenance.
PointCloud aggregate_frames(const Scene& scene, FrameFilter filter = FrameFilter::all);

// ---------------------------------------------------------------------------
// Normalization

enum class NormalizationMode { scale, contract };

struct NormalizationParams {
  NormalizationMode mode = NormalizationMode::scale;
  double margin = 0.05;          ///< scale mode: extent inflation
  double contract_radius = 10.0;  ///< contract mode: r
  double contract_blend = 1.0;    ///< contract mode: b
};

/// World -> ray space p' = (p - center) * scale.  In contract mode scale is 1
/// and field inputs are additionally passed through contract_point.
struct NormalizationTransform {
  NormalizationMode mode = NormalizationMode::scale;
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  double scale = 1.0;
  double contract_radius = 10.0;
  double contract_blend = 1.0;
  /// Largest ray-space norm of a training point.
  double radius = 1.0;

  Eigen::Vector3d to_ray_space(const Eigen::Vector3d& world) const { return (world - center) * scale; }
  Eigen::Vector3d to_world(const Eigen::Vector3d& ray_space) const { return ray_space / scale + center; }
  /// ray-space point -> network input domain
  Eigen::Vector3d field_input(const Eigen::Vector3d& ray_space) const;
  Pose to_ray_space(const Pose& pose) const;
};

/// (1 + b - b r / |x|) x / |x| outside radius r, x / r inside.
Eigen::Vector3d contract_point(const Eigen::Vector3d& x, double r, double b);
/// Inverse of contract_point for |y| < 1 + b.
Eigen::Vector3d uncontract_point(const Eigen::Vector3d& y, double r, double b);

/// Fits the transform on train frames only; the central frame is frame
/// floor(n/2) of the manifest order.
NormalizationTransform fit_normalization(const Scene& scene, const NormalizationParams& params);

struct NormalizedScene {
  Scene scene;  ///< ray-space clouds and poses
  NormalizationTransform transform;
};

NormalizedScene normalize_scene(const Scene& scene, const NormalizationParams& params);
/// Applies an existing transform (eval frames use the train-fit transform).
Scene apply_normalization(const Scene& scene, const NormalizationTransform& transform);

std::string mode_name(NormalizationMode mode);
NormalizationMode parse_mode(const std::string& name);

}  // namespace lnerf
