#include "lidarnerf/synthetic.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>

namespace lnerf {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Slab test; returns the entry/exit parameters and the axes that produced them.
bool slabs(const Aabb& box, const Ray& ray, double& t_in, int& axis_in, double& t_out, int& axis_out) {
  t_in = -kInf;
  t_out = kInf;
  axis_in = axis_out = 0;
  for (int a = 0; a < 3; ++a) {
    const double o = ray.origin[a], d = ray.direction[a];
    if (d == 0.0) {
      if (o < box.min[a] || o > box.max[a]) return false;
      continue;
    }
    double t0 = (box.min[a] - o) / d;
    double t1 = (box.max[a] - o) / d;
    if (t0 > t1) std::swap(t0, t1);
    if (t0 > t_in) {
      t_in = t0;
      axis_in = a;
    }
    if (t1 < t_out) {
      t_out = t1;
      axis_out = a;
    }
  }
  return t_in <= t_out;
}

double boundary_distance(const Aabb& box, const Eigen::Vector3d& p) {
  if (box.contains(p)) {
    double d = kInf;
    for (int a = 0; a < 3; ++a) d = std::min({d, p[a] - box.min[a], box.max[a] - p[a]});
    return d;
  }
  const Eigen::Vector3d q = p.cwiseMax(box.min).cwiseMin(box.max);
  return (p - q).norm();
}

Pose yaw_pose(double x, double y, double z, double yaw) {
  return Pose::from_rt(Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitZ()).toRotationMatrix(), {x, y, z});
}

}  // namespace

bool Aabb::contains(const Eigen::Vector3d& p, double tol) const {
  return (p.array() >= min.array() - tol).all() && (p.array() <= max.array() + tol).all();
}

std::optional<Hit> BoxWorld::intersect(const Ray& ray) const {
  std::optional<Hit> best;
  const auto consider = [&](double t, int axis) {
    if (t > 0.0 && (!best || t < best->t)) best = Hit{t, axis, ray.at(t)};
  };
  double t_in = 0, t_out = 0;
  int a_in = 0, a_out = 0;
  if (room && slabs(*room, ray, t_in, a_in, t_out, a_out)) consider(t_out, a_out);
  for (const auto& box : boxes) {
    if (slabs(box, ray, t_in, a_in, t_out, a_out)) consider(t_in, a_in);
  }
  return best;
}

double BoxWorld::intensity(const Hit& hit) const {
  const double s = hit.axis == 0 ? hit.point.y() : hit.point.x();
  const auto band = static_cast<long long>(std::floor(s / (0.5 * stripe_period)));
  return band % 2 == 0 ? 0.25 : 0.75;
}

double BoxWorld::surface_distance(const Eigen::Vector3d& p) const {
  double d = room ? boundary_distance(*room, p) : kInf;
  for (const auto& box : boxes) d = std::min(d, boundary_distance(box, p));
  return d;
}

RangeImage render_box_world(const BoxWorld& world, const LidarSpec& spec, const Pose& pose, double drop_distance) {
  RangeImage img(spec);
  for (int h = 0; h < spec.H; ++h) {
    for (int w = 0; w < spec.W; ++w) {
      const Ray ray = ray_for_pixel(spec, pose, h + 0.5, w + 0.5);
      const auto hit = world.intersect(ray);
      if (!hit || hit->t > spec.max_range) continue;
      if (drop_distance > 0.0 && hit->t > drop_distance) continue;
      img.set(h, w, hit->t, world.intensity(*hit));
    }
  }
  return img;
}

LidarSpec SynthConfig::default_spec() {
  LidarSpec s;
  s.H = 32;
  s.W = 256;
  s.f_up = deg_to_rad(10.0);
  s.f_down = deg_to_rad(30.0);
  s.max_range = 80.0;
  return s;
}

BoxWorld SynthConfig::default_room() {
  BoxWorld w;
  w.room = Aabb{{-15.0, -10.0, -1.8}, {15.0, 10.0, 3.0}};
  w.boxes = {
      Aabb{{-3.5, 2.5, -1.8}, {-1.5, 4.5, -0.3}},
      Aabb{{1.5, -4.5, -1.8}, {2.5, -3.5, 3.0}},
      Aabb{{10.0, -1.5, -1.8}, {12.0, 1.0, -0.8}},
  };
  w.stripe_period = 8.0;
  return w;
}

std::vector<Pose> SynthConfig::default_train_poses() {
  std::vector<Pose> poses;
  for (int k = 0; k < 8; ++k) {
    const double sign = k % 2 == 0 ? 1.0 : -1.0;
    poses.push_back(yaw_pose(-7.0 + 2.0 * k, 0.3 * sign, 0.0, 0.05 * sign));
  }
  return poses;
}

std::vector<Pose> SynthConfig::default_eval_poses() {
  return {yaw_pose(-4.0, 0.0, 0.0, 0.02), yaw_pose(2.0, -0.2, 0.0, -0.03)};
}

SynthConfig SynthConfig::object() {
  SynthConfig c;
  c.world = BoxWorld{};
  c.world.boxes = {Aabb{{-0.5, -0.5, -0.5}, {0.5, 0.5, 0.5}}};
  c.world.stripe_period = 0.5;
  c.train_poses.clear();
  c.eval_poses.clear();
  for (int k = 0; k < 8; ++k) {
    const double a = 2.0 * std::numbers::pi * k / 8.0;
    c.train_poses.push_back(yaw_pose(4.0 * std::cos(a), 4.0 * std::sin(a), 0.3, a));
  }
  for (int k = 0; k < 2; ++k) {
    const double a = 2.0 * std::numbers::pi * (k + 0.5) / 8.0 + 0.3;
    c.eval_poses.push_back(yaw_pose(3.5 * std::cos(a), 3.5 * std::sin(a), 0.2, a));
  }
  return c;
}

SynthConfig SynthConfig::hall() {
  SynthConfig c;
  c.world.room = Aabb{{-25.0, -20.0, -1.8}, {25.0, 20.0, 4.0}};
  return c;
}

SynthScene make_synth_scene(const SynthConfig& config) {
  config.spec.validate();
  SynthScene out;
  out.scene.spec = config.spec;
  const auto add = [&](const Pose& pose, Split split) {
    RangeImage gt = render_box_world(config.world, config.spec, pose, config.drop_distance);
    Frame f;
    f.cloud = range_image_to_cloud(gt);
    f.pose = pose;
    f.split = split;
    out.scene.frames.push_back(std::move(f));
    out.ground_truth.push_back(std::move(gt));
  };
  for (const auto& p : config.train_poses) add(p, Split::train);
  for (const auto& p : config.eval_poses) add(p, Split::eval);
  return out;
}

void write_synth_scene(const SynthScene& synth, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_spec(synth.scene.spec, dir / "spec.cfg");
  Scene scene = synth.scene;
  char name[32];
  for (std::size_t k = 0; k < scene.frames.size(); ++k) {
    auto& f = scene.frames[k];
    std::snprintf(name, sizeof name, "frame_%03zu", k);
    f.cloud_path = dir / (std::string(name) + ".lnpc");
    f.pose_path = dir / (std::string(name) + ".pose");
    save_cloud(f.cloud, f.cloud_path);
    save_pose(f.pose, f.pose_path);
    std::snprintf(name, sizeof name, "gt_%03zu.lnri", k);
    save_range_image(synth.ground_truth[k], dir / name);
  }
  save_manifest(scene, dir / "manifest.txt");
}

}  // namespace lnerf
