#pragma once

// Analytic box-world scenes with exact ray-cast ground truth.

#include "lidarnerf/lidar_model.hpp"
#include "lidarnerf/scene_store.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace lnerf {

struct Aabb {
  Eigen::Vector3d min = Eigen::Vector3d::Zero();
  Eigen::Vector3d max = Eigen::Vector3d::Zero();

  bool contains(const Eigen::Vector3d& p, double tol = 0.0) const;
};

struct Hit {
  double t = 0.0;
  int axis = 0;  ///< axis of the surface normal
  Eigen::Vector3d point = Eigen::Vector3d::Zero();
};

/// Sensor-enclosing room (hit from inside) plus solid boxes (hit from outside).
struct BoxWorld {
  std::optional<Aabb> room;
  std::vector<Aabb> boxes;
  /// Two-tone stripes: 0.25 / 0.75 alternating every period / 2 along the
  /// surface's in-plane coordinate (y for x-facing faces, x otherwise).
  double stripe_period = 8.0;

  std::optional<Hit> intersect(const Ray& ray) const;
  double intensity(const Hit& hit) const;
  /// Distance from p to the nearest surface of the world.
  double surface_distance(const Eigen::Vector3d& p) const;
};

/// Ground-truth range image by casting every cell centre.  Returns farther
/// than max_range, and returns farther than drop_distance when it is > 0,
/// are left empty.
RangeImage render_box_world(const BoxWorld& world, const LidarSpec& spec, const Pose& pose,
                            double drop_distance = 0.0);

struct SynthConfig {
  LidarSpec spec = default_spec();
  BoxWorld world = default_room();
  std::vector<Pose> train_poses = default_train_poses();
  std::vector<Pose> eval_poses = default_eval_poses();
  double drop_distance = 0.0;  ///< 0 disables the synthetic ray-drop rule

  static LidarSpec default_spec();
  static BoxWorld default_room();
  static std::vector<Pose> default_train_poses();
  static std::vector<Pose> default_eval_poses();

  /// Single box at the origin seen from a ring of sensors; misses are dropped.
  static SynthConfig object();
  /// The room enlarged to 50 x 40 m so a 20 m drop rule removes about a
  /// third of the returns; same boxes and poses.
  static SynthConfig hall();
};

struct SynthScene {
  Scene scene;                        ///< train frames then eval frames
  std::vector<RangeImage> ground_truth;  ///< per frame, same order
};

SynthScene make_synth_scene(const SynthConfig& config);

/// Writes spec.cfg, manifest.txt, and per frame frame_NNN.lnpc, frame_NNN.pose
/// and gt_NNN.lnri into `dir`.
void write_synth_scene(const SynthScene& synth, const std::filesystem::path& dir);

}  // namespace lnerf
