#include "lidarnerf/baseline.hpp"
#include "lidarnerf/cli.hpp"
#include "lidarnerf/lidar_model.hpp"
#include "lidarnerf/metrics.hpp"
#include "lidarnerf/neural_field.hpp"
#include "lidarnerf/scene_edit.hpp"
#include "lidarnerf/scene_store.hpp"
#include "lidarnerf/synthetic.hpp"

#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

namespace py = pybind11;
using namespace lnerf;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

// Clouds cross the boundary as (n, 4) arrays: x, y, z, intensity.
Array cloud_to_array(const PointCloud& c) {
  Array out({static_cast<py::ssize_t>(c.size()), py::ssize_t{4}});
  auto m = out.mutable_unchecked<2>();
  for (std::size_t i = 0; i < c.size(); ++i) {
    const auto& p = c.points[i];
    m(i, 0) = p.position.x();
    m(i, 1) = p.position.y();
    m(i, 2) = p.position.z();
    m(i, 3) = p.intensity;
  }
  return out;
}

PointCloud array_to_cloud(const Array& a) {
  if (a.ndim() != 2 || (a.shape(1) != 3 && a.shape(1) != 4)) throw std::invalid_argument("cloud must be (n, 3) or (n, 4)");
  const auto m = a.unchecked<2>();
  PointCloud c;
  c.points.reserve(static_cast<std::size_t>(a.shape(0)));
  for (py::ssize_t i = 0; i < a.shape(0); ++i) {
    c.points.push_back({{m(i, 0), m(i, 1), m(i, 2)}, a.shape(1) == 4 ? m(i, 3) : 0.0});
  }
  return c;
}

Array grid(const RangeImage& img, const std::vector<double>& v) {
  Array out({static_cast<py::ssize_t>(img.rows()), static_cast<py::ssize_t>(img.cols())});
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "LiDAR range images, baseline rendering, metrics and the neural field";

  py::class_<LidarSpec>(m, "LidarSpec")
      .def(py::init<>())
      .def(py::init([](int H, int W, double f_up_deg, double f_down_deg, double max_range) {
             LidarSpec s;
             s.H = H;
             s.W = W;
             s.f_up = deg_to_rad(f_up_deg);
             s.f_down = deg_to_rad(f_down_deg);
             s.max_range = max_range;
             s.validate();
             return s;
           }),
           py::arg("H"), py::arg("W"), py::arg("f_up_deg"), py::arg("f_down_deg"), py::arg("max_range") = 80.0)
      .def_readwrite("H", &LidarSpec::H)
      .def_readwrite("W", &LidarSpec::W)
      .def_readwrite("f_up", &LidarSpec::f_up)
      .def_readwrite("f_down", &LidarSpec::f_down)
      .def_readwrite("max_range", &LidarSpec::max_range)
      .def("__eq__", [](const LidarSpec& a, const LidarSpec& b) { return a == b; });

  py::class_<Pose>(m, "Pose")
      .def(py::init<>())
      .def(py::init<const Eigen::Matrix4d&, double>(), py::arg("matrix"), py::arg("tol") = 1e-6)
      .def_static("translation", &Pose::translation)
      .def_property_readonly("matrix", &Pose::matrix)
      .def("inverse", &Pose::inverse)
      .def("apply", &Pose::apply)
      .def("__mul__", &Pose::operator*);

  py::class_<RangeImage>(m, "RangeImage")
      .def(py::init<const LidarSpec&>())
      .def_property_readonly("spec", &RangeImage::spec)
      .def_property_readonly("distance", [](const RangeImage& r) { return grid(r, r.distances()); })
      .def_property_readonly("intensity", [](const RangeImage& r) { return grid(r, r.intensities()); })
      .def_property_readonly("mask", [](const RangeImage& r) {
        const std::vector<double> v(r.mask().begin(), r.mask().end());
        return grid(r, v).attr("astype")("bool");
      })
      .def("set", &RangeImage::set)
      .def("clear", &RangeImage::clear)
      .def("valid_count", &RangeImage::valid_count)
      .def("__eq__", [](const RangeImage& a, const RangeImage& b) { return a == b; });

  m.def("pixel_to_direction", &pixel_to_direction, py::arg("spec"), py::arg("h"), py::arg("w"));
  m.def(
      "point_to_pixel",
      [](const LidarSpec& s, const Eigen::Vector3d& p) -> std::optional<std::tuple<double, double, double>> {
        const auto px = point_to_pixel(s, p);
        if (!px) return std::nullopt;
        return std::make_tuple(px->h, px->w, px->distance);
      },
      py::arg("spec"), py::arg("point"));
  m.def(
      "cloud_to_range_image",
      [](const LidarSpec& s, const Array& cloud) { return cloud_to_range_image(s, array_to_cloud(cloud)).image; },
      py::arg("spec"), py::arg("cloud"));
  m.def(
      "range_image_to_cloud", [](const RangeImage& img) { return cloud_to_array(range_image_to_cloud(img)); },
      py::arg("image"));

  m.def("load_spec", &load_spec);
  m.def("save_spec", &save_spec);
  m.def("load_range_image", &load_range_image);
  m.def("save_range_image", &save_range_image);
  m.def("load_pose", &load_pose, py::arg("path"), py::arg("tol") = 1e-4);
  m.def("save_pose", &save_pose);
  m.def("load_cloud", [](const std::filesystem::path& p) { return cloud_to_array(load_cloud(p)); });
  m.def("save_cloud", [](const Array& a, const std::filesystem::path& p) { save_cloud(array_to_cloud(a), p); });

  m.def(
      "raycast",
      [](const Array& world, const LidarSpec& s, const Pose& pose, double threshold) {
        const PointCloud c = array_to_cloud(world);
        return threshold > 0.0 ? raycast_averaged(c, s, pose, threshold) : raycast_closest(c, s, pose);
      },
      py::arg("world"), py::arg("spec"), py::arg("pose"), py::arg("threshold") = 0.0,
      "Baseline ray-cast; threshold > 0 averages returns within that band.");

  m.def(
      "chamfer",
      [](const Array& a, const Array& b) {
        return chamfer(positions(array_to_cloud(a)), positions(array_to_cloud(b)));
      },
      py::arg("a"), py::arg("b"));
  m.def(
      "emd",
      [](const Array& a, const Array& b, std::uint64_t seed, std::size_t cap) {
        return emd(positions(array_to_cloud(a)), positions(array_to_cloud(b)), seed, cap).value;
      },
      py::arg("a"), py::arg("b"), py::arg("seed") = 0, py::arg("cap") = kEmdCap);
  m.def(
      "evaluate",
      [](const RangeImage& pred, const RangeImage& gt, std::size_t emd_cap) {
        EvalOptions o;
        o.emd_cap = emd_cap;
        const MetricsReport r = evaluate(pred, gt, o);
        return py::dict(py::arg("chamfer") = r.chamfer, py::arg("fscore") = r.fscore, py::arg("emd") = r.emd,
                        py::arg("np_ratio") = r.np_ratio, py::arg("rmse") = r.rmse, py::arg("delta1") = r.delta1,
                        py::arg("delta2") = r.delta2, py::arg("delta3") = r.delta3, py::arg("psnr") = r.psnr,
                        py::arg("ssim") = r.ssim);
      },
      py::arg("pred"), py::arg("gt"), py::arg("emd_cap") = kEmdCap);

  m.def(
      "write_synth_scene",
      [](const std::filesystem::path& dir, double drop_distance, bool hall) {
        SynthConfig c = hall ? SynthConfig::hall() : SynthConfig{};
        c.drop_distance = drop_distance;
        write_synth_scene(make_synth_scene(c), dir);
      },
      py::arg("dir"), py::arg("drop_distance") = 0.0, py::arg("hall") = false);

  m.def(
      "insert_object",
      [](const RangeImage& scene, const Array& object_world, const Pose& pose) {
        return insert_object(scene, array_to_cloud(object_world), pose);
      },
      py::arg("scene"), py::arg("object_world"), py::arg("scene_pose"));

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::vector<std::string> full = {"lidarnerf"};
        full.insert(full.end(), args.begin(), args.end());
        std::ostringstream out, err;
        const int code = cli::run(full, out, err);
        return std::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs a command line; returns (exit code, stdout, stderr).");
}
