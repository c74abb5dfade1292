#pragma once

// Object insertion into a scene range image with z-buffer occlusion.

#include "lidarnerf/lidar_model.hpp"
#include "lidarnerf/neural_field.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace lnerf {

/// Object-to-world placement; rotation R = Rz(yaw) * Ry(pitch) * Rx(roll).
struct ObjectPlacement {
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  double yaw = 0.0;
  double pitch = 0.0;
  double roll = 0.0;

  Eigen::Matrix3d rotation() const;
  Pose pose() const;
};

/// `tx ty tz yaw pitch roll` per non-empty line ('#' starts a comment).
std::vector<ObjectPlacement> parse_placements(const std::string& text);
std::vector<ObjectPlacement> load_placements(const std::filesystem::path& path);

PointCloud transform_object(const PointCloud& cloud, const ObjectPlacement& placement);

/// Projects world-frame object points into scene_img's grid; a pixel takes the
/// object return when it is closer than the stored one or the pixel is empty.
RangeImage insert_object(const RangeImage& scene_img, const PointCloud& object_world, const Pose& scene_pose);

struct InsertResult {
  RangeImage image;
  std::size_t object_pixels = 0;  ///< pixels the object render populated
  std::size_t changed_pixels = 0;
  std::vector<std::string> warnings;
};

/// Renders the object field from the scene viewpoint expressed in the object
/// frame, lifts the render to a cloud, places it and inserts it.
InsertResult render_and_insert(const RangeImage& scene_img, const NeuralField& object_field,
                               const ObjectPlacement& placement, const Pose& scene_pose,
                               const RenderOptions& options = {});

}  // namespace lnerf
