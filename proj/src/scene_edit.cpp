#include "lidarnerf/scene_edit.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace lnerf {

Eigen::Matrix3d ObjectPlacement::rotation() const {
  return (Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitZ()) * Eigen::AngleAxisd(pitch, Eigen::Vector3d::UnitY()) *
          Eigen::AngleAxisd(roll, Eigen::Vector3d::UnitX()))
      .toRotationMatrix();
}

Pose ObjectPlacement::pose() const { return Pose::from_rt(rotation(), translation); }

std::vector<ObjectPlacement> parse_placements(const std::string& text) {
  std::vector<ObjectPlacement> out;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::vector<double> v;
    std::string tok;
    while (ls >> tok) {
      std::size_t used = 0;
      double d = 0.0;
      try {
        d = std::stod(tok, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != tok.size() || !std::isfinite(d)) {
        throw std::invalid_argument("placement line " + std::to_string(lineno) + ": bad number '" + tok + "'");
      }
      v.push_back(d);
    }
    if (v.empty()) continue;
    if (v.size() != 6) {
      throw std::invalid_argument("placement line " + std::to_string(lineno) + ": expected tx ty tz yaw pitch roll");
    }
    out.push_back({{v[0], v[1], v[2]}, v[3], v[4], v[5]});
  }
  return out;
}

std::vector<ObjectPlacement> load_placements(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_placements(ss.str());
}

PointCloud transform_object(const PointCloud& cloud, const ObjectPlacement& placement) {
  const Eigen::Matrix3d r = placement.rotation();
  PointCloud out = cloud;
  out.frame = "world";
  for (auto& p : out.points) p.position = r * p.position + placement.translation;
  return out;
}

RangeImage insert_object(const RangeImage& scene_img, const PointCloud& object_world, const Pose& scene_pose) {
  const LidarSpec& spec = scene_img.spec();
  const Pose to_sensor = scene_pose.inverse();
  PointCloud local;
  local.points.reserve(object_world.size());
  for (const auto& p : object_world.points) local.points.push_back({to_sensor.apply(p.position), p.intensity});
  const RangeImage obj = cloud_to_range_image(spec, local).image;
  RangeImage out = scene_img;
  for (int h = 0; h < spec.H; ++h) {
    for (int w = 0; w < spec.W; ++w) {
      if (!obj.valid(h, w)) continue;
      if (!out.valid(h, w) || obj.distance(h, w) < out.distance(h, w)) {
        out.set(h, w, obj.distance(h, w), obj.intensity(h, w));
      }
    }
  }
  return out;
}

InsertResult render_and_insert(const RangeImage& scene_img, const NeuralField& object_field,
                               const ObjectPlacement& placement, const Pose& scene_pose,
                               const RenderOptions& options) {
  const Pose view_in_object = placement.pose().inverse() * scene_pose;
  RenderOptions clipped = options;
  clipped.clip_to_bounds = true;
  const FieldRender render = render_view(object_field, scene_img.spec(), view_in_object, nullptr, clipped);
  InsertResult result;
  result.object_pixels = render.image.valid_count();
  if (result.object_pixels == 0) {
    result.image = scene_img;
    result.warnings.push_back("object is not visible from the scene viewpoint; scene left unchanged");
    return result;
  }
  // The render is already in the scene sensor frame; lift it to world.
  PointCloud world = range_image_to_cloud(render.image);
  for (auto& p : world.points) p.position = scene_pose.apply(p.position);
  world.frame = "world";
  result.image = insert_object(scene_img, world, scene_pose);
  for (std::size_t i = 0; i < scene_img.pixel_count(); ++i) {
    if (result.image.mask()[i] != scene_img.mask()[i] || result.image.distances()[i] != scene_img.distances()[i]) {
      ++result.changed_pixels;
    }
  }
  return result;
}

}  // namespace lnerf
