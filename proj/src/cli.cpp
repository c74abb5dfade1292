#include "lidarnerf/cli.hpp"

#include "lidarnerf/baseline.hpp"
#include "lidarnerf/binary_io.hpp"
#include "lidarnerf/metrics.hpp"
#include "lidarnerf/neural_field.hpp"
#include "lidarnerf/scene_edit.hpp"
#include "lidarnerf/scene_store.hpp"
#include "lidarnerf/synthetic.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace lnerf::cli {

namespace {

struct Common {
  std::uint64_t seed = 0;
  int threads = 0;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--seed", c.seed, "Seed for every stochastic step");
  cmd->add_option("--threads", c.threads, "Worker threads (0 = all cores)")->check(CLI::NonNegativeNumber);
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw io::FormatError(io::FormatError::Kind::io, 0, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

PixelConvention parse_convention(const std::string& s) {
  return s == "corner" ? PixelConvention::corner : PixelConvention::center;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

RangeImage baseline_render(const PointCloud& world, const LidarSpec& spec, const Pose& pose, const std::string& mode,
                           double threshold) {
  return mode == "closest" ? raycast_closest(world, spec, pose) : raycast_averaged(world, spec, pose, threshold);
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Novel LiDAR view synthesis toolkit", "lidarnerf"};
  app.require_subcommand(1);
  Common common;

  // convert ------------------------------------------------------------------
  auto* convert = app.add_subcommand("convert", "Point cloud <-> range image");
  std::string spec_path, cloud_path, image_path, out_path, convention = "center";
  convert->add_option("--spec", spec_path, "Sensor spec")->required();
  auto* conv_cloud = convert->add_option("--cloud", cloud_path, "Sensor-frame cloud to project");
  auto* conv_image = convert->add_option("--image", image_path, "Range image to unproject");
  conv_cloud->excludes(conv_image);
  convert->add_option("--out", out_path, "Output file")->required();
  convert->add_option("--convention", convention, "Pixel direction used when unprojecting")
      ->check(CLI::IsMember({"center", "corner"}));
  add_common(convert, common);

  // aggregate ----------------------------------------------------------------
  auto* aggregate = app.add_subcommand("aggregate", "Merge manifest frames into one world cloud");
  std::string manifest_path;
  bool train_only = false;
  aggregate->add_option("--spec", spec_path)->required();
  aggregate->add_option("--manifest", manifest_path)->required();
  aggregate->add_option("--out", out_path)->required();
  aggregate->add_flag("--train-only", train_only, "Skip eval frames");
  add_common(aggregate, common);

  // render-baseline ------------------------------------------------------------
  auto* rbase = app.add_subcommand("render-baseline", "Ray-cast an aggregated cloud into a novel pose");
  std::string world_path, pose_path, mode = "averaged", raydrop_path;
  double threshold = 1.0, raydrop_threshold = 0.5;
  rbase->add_option("--spec", spec_path)->required();
  auto* rb_manifest = rbase->add_option("--manifest", manifest_path, "Aggregate the train frames of this manifest");
  auto* rb_world = rbase->add_option("--world", world_path, "World-frame cloud");
  rb_manifest->excludes(rb_world);
  rbase->add_option("--pose", pose_path, "Novel lidar2world pose")->required();
  rbase->add_option("--out", out_path)->required();
  rbase->add_option("--mode", mode)->check(CLI::IsMember({"closest", "averaged"}));
  rbase->add_option("--threshold", threshold, "Averaging band in meters")->check(CLI::NonNegativeNumber);
  rbase->add_option("--raydrop", raydrop_path, "Ray-drop network to apply");
  rbase->add_option("--raydrop-threshold", raydrop_threshold)->check(CLI::Range(0.0, 1.0));
  add_common(rbase, common);

  // train-raydrop --------------------------------------------------------------
  auto* traydrop = app.add_subcommand("train-raydrop", "Fit the ray-drop network on rendered/ground-truth pairs");
  std::string rendered_list, gt_list;
  RaydropHyper rd_hyper;
  traydrop->add_option("--spec", spec_path)->required();
  auto* td_manifest =
      traydrop->add_option("--manifest", manifest_path, "Build leave-one-out pairs from the train frames");
  auto* td_rendered = traydrop->add_option("--rendered", rendered_list, "Comma-separated rendered range images");
  auto* td_gt = traydrop->add_option("--gt", gt_list, "Comma-separated ground-truth range images");
  td_manifest->excludes(td_rendered)->excludes(td_gt);
  td_rendered->needs(td_gt);
  td_gt->needs(td_rendered);
  traydrop->add_option("--out", out_path)->required();
  traydrop->add_option("--mode", mode)->check(CLI::IsMember({"closest", "averaged"}));
  traydrop->add_option("--threshold", threshold)->check(CLI::NonNegativeNumber);
  traydrop->add_option("--iterations", rd_hyper.iterations);
  traydrop->add_option("--batch", rd_hyper.batch)->check(CLI::PositiveNumber);
  traydrop->add_option("--lr", rd_hyper.lr)->check(CLI::PositiveNumber);
  add_common(traydrop, common);

  // train ----------------------------------------------------------------------
  auto* train_cmd = app.add_subcommand("train", "Train the neural field");
  std::string config_path, log_path, sampling;
  std::size_t layers = 0, width = 0, iterations = 0, batch = 0, warmup = 0, log_every = 100;
  double lr = 0.0, time_budget = -1.0;
  train_cmd->add_option("--spec", spec_path)->required();
  train_cmd->add_option("--manifest", manifest_path)->required();
  train_cmd->add_option("--out", out_path)->required();
  train_cmd->add_option("--config", config_path, "key = value field config");
  train_cmd->add_option("--layers", layers)->check(CLI::PositiveNumber);
  train_cmd->add_option("--width", width)->check(CLI::PositiveNumber);
  train_cmd->add_option("--iterations", iterations)->check(CLI::PositiveNumber);
  train_cmd->add_option("--batch", batch)->check(CLI::PositiveNumber);
  train_cmd->add_option("--warmup", warmup);
  train_cmd->add_option("--lr", lr)->check(CLI::PositiveNumber);
  train_cmd->add_option("--sampling", sampling)->check(CLI::IsMember({"guided", "hierarchical"}));
  train_cmd->add_option("--time-budget", time_budget, "Stop after this many seconds of optimization")
      ->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--log", log_path, "Write the loss log as CSV");
  train_cmd->add_option("--log-every", log_every)->check(CLI::PositiveNumber);
  add_common(train_cmd, common);

  // render ---------------------------------------------------------------------
  auto* render_cmd = app.add_subcommand("render", "Render a trained field at a pose");
  std::string field_path, prior_path, raydrop_out;
  bool stochastic = false;
  render_cmd->add_option("--field", field_path)->required();
  render_cmd->add_option("--spec", spec_path)->required();
  render_cmd->add_option("--pose", pose_path)->required();
  render_cmd->add_option("--out", out_path)->required();
  render_cmd->add_option("--prior", prior_path, "Range image whose distances guide sampling");
  render_cmd->add_option("--threshold", raydrop_threshold, "Keep pixels with P >= threshold")
      ->check(CLI::Range(0.0, 1.0));
  render_cmd->add_flag("--stochastic", stochastic, "Stratified and jittered sampling (seeded)");
  render_cmd->add_option("--raydrop-out", raydrop_out, "Write per-pixel keep probabilities as text");
  add_common(render_cmd, common);

  // eval -----------------------------------------------------------------------
  auto* eval_cmd = app.add_subcommand("eval", "Compare a predicted range image with ground truth");
  std::string pred_path, gt_path;
  EvalOptions eval_opt;
  eval_cmd->add_option("--pred", pred_path)->required();
  eval_cmd->add_option("--gt", gt_path)->required();
  eval_cmd->add_option("--spec", spec_path, "Sensor spec shared by both images")->required();
  eval_cmd->add_option("--tau", eval_opt.tau, "F-score threshold in meters")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--emd-cap", eval_opt.emd_cap)->check(CLI::PositiveNumber);
  eval_cmd->add_flag("--psnr-valid-only", eval_opt.psnr_valid_only, "PSNR over mutually valid pixels only");
  eval_cmd->add_option("--out", out_path, "Also write the report here");
  add_common(eval_cmd, common);

  // edit -----------------------------------------------------------------------
  auto* edit = app.add_subcommand("edit", "Insert an object into a scene range image");
  std::string scene_image, scene_pose, placement_path, object_field, object_cloud;
  edit->add_option("--spec", spec_path)->required();
  edit->add_option("--scene-image", scene_image)->required();
  edit->add_option("--scene-pose", scene_pose, "Viewpoint of the scene image")->required();
  edit->add_option("--placement", placement_path, "tx ty tz yaw pitch roll per line")->required();
  auto* ed_field = edit->add_option("--object-field", object_field, "Object field to render and insert");
  auto* ed_cloud = edit->add_option("--object-cloud", object_cloud, "Object-frame cloud to insert");
  ed_field->excludes(ed_cloud);
  edit->add_option("--out", out_path)->required();
  edit->add_option("--threshold", raydrop_threshold)->check(CLI::Range(0.0, 1.0));
  add_common(edit, common);

  // synth-scene ----------------------------------------------------------------
  auto* synth = app.add_subcommand("synth-scene", "Write the analytic synthetic scene");
  std::string synth_dir;
  double drop_distance = 0.0;
  bool object_scene = false, hall_scene = false;
  synth->add_option("--out", synth_dir, "Output directory")->required();
  synth->add_option("--drop-distance", drop_distance, "Drop returns farther than this (0 = off)")
      ->check(CLI::NonNegativeNumber);
  auto* synth_object = synth->add_flag("--object", object_scene, "Single object seen from a ring of sensors");
  synth->add_flag("--hall", hall_scene, "Larger room with many returns beyond 20 m")->excludes(synth_object);
  add_common(synth, common);

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    if (code == 0) return ok;
    err << app.help();
    return usage_error;
  }

  try {
    if (*convert) {
      if (cloud_path.empty() == image_path.empty()) {
        err << "convert: give exactly one of --cloud or --image\n";
        return usage_error;
      }
      const LidarSpec spec = load_spec(spec_path);
      if (!cloud_path.empty()) {
        const auto proj = cloud_to_range_image(spec, load_cloud(cloud_path));
        save_range_image(proj.image, out_path);
        out << "pixels = " << proj.image.valid_count() << "\nskipped = " << proj.skipped << '\n';
      } else {
        const PointCloud cloud = range_image_to_cloud(load_range_image(image_path, spec), parse_convention(convention));
        save_cloud(cloud, out_path);
        out << "points = " << cloud.size() << '\n';
      }
      return ok;
    }

    if (*aggregate) {
      const Scene scene = load_manifest(manifest_path, load_spec(spec_path));
      const PointCloud world = aggregate_frames(scene, train_only ? FrameFilter::train_only : FrameFilter::all);
      save_cloud(world, out_path);
      out << "points = " << world.size() << '\n';
      return ok;
    }

    if (*rbase) {
      if (manifest_path.empty() == world_path.empty()) {
        err << "render-baseline: give exactly one of --manifest or --world\n";
        return usage_error;
      }
      const LidarSpec spec = load_spec(spec_path);
      const PointCloud world = manifest_path.empty()
                                   ? load_cloud(world_path)
                                   : aggregate_frames(load_manifest(manifest_path, spec), FrameFilter::train_only);
      if (world.empty()) throw std::invalid_argument("render-baseline: world cloud is empty");
      RangeImage img = baseline_render(world, spec, load_pose(pose_path), mode, threshold);
      out << "rendered_points = " << img.valid_count() << '\n';
      if (!raydrop_path.empty()) {
        const RaydropNet net = RaydropNet::load(raydrop_path);
        const auto probs = net.predict(raydrop_features(img), spec.max_range);
        double expected = 0.0;
        for (double p : probs) expected += p;
        img = apply_raydrop(img, probs, raydrop_threshold);
        out << std::fixed << std::setprecision(6) << "expected_points = " << expected << '\n'
            << "thresholded_points = " << img.valid_count() << '\n';
      }
      save_range_image(img, out_path);
      return ok;
    }

    if (*traydrop) {
      const LidarSpec spec = load_spec(spec_path);
      std::vector<std::pair<RangeImage, RangeImage>> pairs;
      if (!manifest_path.empty()) {
        const Scene scene = load_manifest(manifest_path, spec);
        const auto train_idx = scene.indices(Split::train);
        if (train_idx.size() < 2) throw std::invalid_argument("train-raydrop: leave-one-out needs >= 2 train frames");
        for (std::size_t held : train_idx) {
          Scene rest;
          rest.spec = spec;
          for (std::size_t k : train_idx) {
            if (k != held) rest.frames.push_back(scene.frames[k]);
          }
          const PointCloud world = aggregate_frames(rest);
          const Frame& f = scene.frames[held];
          pairs.emplace_back(baseline_render(world, spec, f.pose, mode, threshold),
                             cloud_to_range_image(spec, f.cloud).image);
        }
      } else {
        const auto r = split_list(rendered_list);
        const auto g = split_list(gt_list);
        if (r.size() != g.size() || r.empty()) {
          err << "train-raydrop: --rendered and --gt need the same nonzero number of images\n";
          return usage_error;
        }
        for (std::size_t k = 0; k < r.size(); ++k) {
          pairs.emplace_back(load_range_image(r[k], spec), load_range_image(g[k], spec));
        }
      }
      rd_hyper.seed = common.seed;
      const RaydropTraining t = train_raydrop(pairs, rd_hyper);
      t.net.save(out_path);
      out << std::fixed << std::setprecision(6) << "rows = " << t.rows << "\nfinal_loss = " << t.final_loss << '\n';
      return ok;
    }

    if (*train_cmd) {
      const Scene scene = load_manifest(manifest_path, load_spec(spec_path));
      FieldConfig config = config_path.empty() ? FieldConfig{} : FieldConfig::parse(read_text(config_path));
      if (layers) config.layers = layers;
      if (width) config.width = width;
      if (iterations) config.iterations = iterations;
      if (batch) config.batch = batch;
      if (train_cmd->count("--warmup")) config.warmup = warmup;
      if (lr > 0) config.lr = lr;
      if (!sampling.empty()) config.sampling = parse_sampling(sampling);
      if (time_budget >= 0) config.time_budget_s = time_budget;
      if (train_cmd->count("--seed")) config.seed = common.seed;
      if (train_cmd->count("--threads")) config.threads = common.threads;
      config.validate();
      TrainHooks hooks;
      hooks.log_every = log_every;
      try {
        const TrainResult result = train(scene, config, hooks);
        result.field.save(out_path);
        if (!log_path.empty()) std::ofstream(log_path) << result.log.to_csv();
        const auto& last = result.log.records;
        out << std::setprecision(10) << "iterations = " << result.log.iterations_run << "\nstop_reason = "
            << result.log.stop_reason << "\ntrain_seconds = " << result.log.train_seconds << '\n';
        if (!last.empty()) out << "final_loss = " << last.back().loss.total << '\n';
      } catch (const TrainingDiverged& e) {
        const std::string ckpt = out_path + ".diverged";
        e.checkpoint().save(ckpt);
        if (!log_path.empty()) std::ofstream(log_path) << e.log().to_csv();
        err << e.what() << "; last finite checkpoint written to " << ckpt << '\n';
        return diverged;
      }
      return ok;
    }

    if (*render_cmd) {
      const LidarSpec spec = load_spec(spec_path);
      const NeuralField field = NeuralField::load(field_path);
      std::optional<RangeImage> prior;
      if (!prior_path.empty()) prior = load_range_image(prior_path, spec);
      RenderOptions opt;
      opt.threshold = raydrop_threshold;
      opt.deterministic = !stochastic;
      opt.seed = common.seed;
      opt.threads = common.threads;
      const FieldRender r = render_view(field, spec, load_pose(pose_path), prior ? &*prior : nullptr, opt);
      save_range_image(r.image, out_path);
      if (!raydrop_out.empty()) {
        std::ofstream po(raydrop_out);
        po << std::setprecision(9);
        for (int h = 0; h < spec.H; ++h) {
          for (int w = 0; w < spec.W; ++w) po << (w ? " " : "") << r.raydrop[r.image.index(h, w)];
          po << '\n';
        }
      }
      out << "rendered_points = " << r.image.valid_count() << '\n';
      return ok;
    }

    if (*eval_cmd) {
      const LidarSpec spec = load_spec(spec_path);
      const RangeImage pred = load_range_image(pred_path, spec);
      const RangeImage gt = load_range_image(gt_path, spec);
      eval_opt.seed = common.seed;
      eval_opt.threads = common.threads;
      const MetricsReport report = evaluate(pred, gt, eval_opt);
      for (const auto& w : report.warnings) err << "warning: " << w << '\n';
      out << report.to_text();
      if (!out_path.empty()) std::ofstream(out_path) << report.to_text();
      return ok;
    }

    if (*edit) {
      if (object_field.empty() == object_cloud.empty()) {
        err << "edit: give exactly one of --object-field or --object-cloud\n";
        return usage_error;
      }
      const LidarSpec spec = load_spec(spec_path);
      RangeImage img = load_range_image(scene_image, spec);
      const Pose view = load_pose(scene_pose);
      const auto placements = load_placements(placement_path);
      std::optional<NeuralField> field;
      std::optional<PointCloud> cloud;
      if (!object_field.empty()) field = NeuralField::load(object_field);
      if (!object_cloud.empty()) cloud = load_cloud(object_cloud);
      RenderOptions opt;
      opt.threshold = raydrop_threshold;
      opt.seed = common.seed;
      opt.threads = common.threads;
      for (const auto& p : placements) {
        if (field) {
          InsertResult r = render_and_insert(img, *field, p, view, opt);
          for (const auto& w : r.warnings) err << "warning: " << w << '\n';
          img = std::move(r.image);
        } else {
          img = insert_object(img, transform_object(*cloud, p), view);
        }
      }
      save_range_image(img, out_path);
      out << "placements = " << placements.size() << "\npoints = " << img.valid_count() << '\n';
      return ok;
    }

    if (*synth) {
      SynthConfig config = object_scene ? SynthConfig::object() : hall_scene ? SynthConfig::hall() : SynthConfig{};
      config.drop_distance = drop_distance;
      write_synth_scene(make_synth_scene(config), synth_dir);
      out << "frames = " << config.train_poses.size() + config.eval_poses.size() << "\ndir = " << synth_dir << '\n';
      return ok;
    }
  } catch (const TrainingDiverged& e) {
    err << "error: " << e.what() << '\n';
    return diverged;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return data_error;
  }
  return usage_error;
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace lnerf::cli
