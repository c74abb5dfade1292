// Acceptance suite: one PASS/FAIL line per criterion.
//
//   lidarnerf_acceptance [--only 1,2,...] [--workdir DIR] [--train-budget S] [--drop-budget S]
//
// Criteria 6-8 train full-size fields and take a long time on few cores;
// the time budgets cap each training run in seconds of optimization.

#include "lidarnerf/autodiff.hpp"
#include "lidarnerf/baseline.hpp"
#include "lidarnerf/cli.hpp"
#include "lidarnerf/metrics.hpp"
#include "lidarnerf/neural_field.hpp"
#include "lidarnerf/scene_edit.hpp"
#include "lidarnerf/synthetic.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>

using namespace lnerf;
namespace ad = lnerf::ad;
namespace fs = std::filesystem;

namespace {

struct Result {
  bool pass = false;
  std::string detail;
};

class Stopwatch {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

struct Options {
  fs::path workdir;
  double train_budget = 1800.0;
  double drop_budget = 900.0;
};

Options g_opt;

int cli_run(std::vector<std::string> args) {
  args.insert(args.begin(), "lidarnerf");
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  if (code != 0) std::cerr << "command failed (" << code << "): " << args[1] << "\n" << err.str();
  return code;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

double max_grad_error(const std::function<ad::Tensor(std::span<const ad::Tensor>)>& loss_of,
                      const std::vector<ad::Tensor>& base) {
  ad::Tape tape;
  const auto watched = tape.watch_all(base);
  const auto grads = tape.backward(loss_of(watched));
  double worst = 0.0;
  for (std::size_t k = 0; k < base.size(); ++k) {
    const auto f = [&](const std::vector<double>& v) {
      auto p = base;
      p[k] = ad::Tensor(p[k].shape(), v);
      return loss_of(p).item();
    };
    const auto x = base[k].values();
    const auto num = testutil::numeric_gradient(f, std::vector<double>(x.begin(), x.end()));
    worst = std::max(worst, testutil::max_rel_error(grads[watched[k]].values(), num));
  }
  return worst;
}

// ---------------------------------------------------------------------------
// 1. Projection round trip

Result criterion1() {
  const Stopwatch sw;
  const LidarSpec spec = SynthConfig::default_spec();
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> uh(0, spec.H), uw(0, spec.W), ur(0.5, spec.max_range);
  const double half_v = spec.vertical_fov() / spec.H / 2, half_h = std::numbers::pi / spec.W;
  double worst_dot = 1.0, worst_v = 0.0, worst_h = 0.0;
  for (int k = 0; k < 10000; ++k) {
    const Eigen::Vector3d dir = pixel_to_direction(spec, uh(rng), uw(rng));
    const Eigen::Vector3d p = ur(rng) * dir;
    const auto px = point_to_pixel(spec, p);
    if (!px) return {false, "in-FOV point rejected by projection"};
    worst_dot = std::min(worst_dot, pixel_to_direction(spec, px->h, px->w).dot(p.normalized()));
    // Quantized: cell centre direction vs the true direction, per angle.
    const Eigen::Vector3d q = pixel_to_direction(spec, std::floor(px->h) + 0.5, std::floor(px->w) + 0.5);
    const double dv = std::abs(std::asin(std::clamp(q.z(), -1.0, 1.0)) - std::asin(std::clamp(p.normalized().z(), -1.0, 1.0)));
    double dh = std::abs(std::atan2(q.y(), q.x()) - std::atan2(p.y(), p.x()));
    dh = std::min(dh, 2 * std::numbers::pi - dh);
    worst_v = std::max(worst_v, dv / half_v);
    worst_h = std::max(worst_h, dh / half_h);
  }
  const double t = sw.seconds();
  const bool pass = worst_dot > 1 - 1e-9 && worst_v <= 1 + 1e-9 && worst_h <= 1 + 1e-9 && t < 1.0;
  return {pass, fmt("min dot = 1 - %.2e, quantized error / half pitch = %.4f (pitch) %.4f (yaw), %.3f s",
                    1 - worst_dot, worst_v, worst_h, t)};
}

// ---------------------------------------------------------------------------
// 2. Autodiff soundness

Result criterion2() {
  const Stopwatch sw;
  std::mt19937_64 rng(2);
  const auto r = [&](ad::Shape s) { return testutil::random_tensor(std::move(s), rng); };
  using ad::OpKind;
  const std::vector<std::pair<OpKind, std::vector<ad::Tensor>>> cases = {
      {OpKind::matmul, {r({3, 4}), r({4, 2})}},       {OpKind::add, {r({3, 4}), r({1, 4})}},
      {OpKind::sub, {r({3, 4}), r({3, 4})}},          {OpKind::mul, {r({3, 4}), r({3, 4})}},
      {OpKind::relu, {r({3, 5})}},                    {OpKind::sigmoid, {r({3, 5})}},
      {OpKind::sin, {r({3, 5})}},                     {OpKind::cos, {r({3, 5})}},
      {OpKind::exp, {r({3, 5})}},                     {OpKind::neg, {r({3, 5})}},
      {OpKind::sum, {r({3, 5})}},                     {OpKind::mean, {r({3, 5})}},
      {OpKind::square, {r({3, 5})}},                  {OpKind::concat, {r({3, 2}), r({3, 4})}},
      {OpKind::softplus, {r({3, 5})}},                {OpKind::row_sum, {r({3, 5})}},
      {OpKind::cumsum_exclusive, {r({3, 5})}},
  };
  std::set<OpKind> covered;
  double worst_op = 0.0;
  std::string worst_name;
  for (const auto& [kind, inputs] : cases) {
    covered.insert(kind);
    const ad::Tensor c = testutil::random_tensor(ad::forward(kind, inputs).shape(), rng, 0.5, 1.5);
    const double e = max_grad_error(
        [&](std::span<const ad::Tensor> in) {
          return ad::sum(ad::mul(ad::forward(kind, std::vector<ad::Tensor>(in.begin(), in.end())), c));
        },
        inputs);
    if (e > worst_op) {
      worst_op = e;
      worst_name = std::string(ad::op_name(kind));
    }
  }
  const bool all_ops = covered.size() == static_cast<std::size_t>(OpKind::cumsum_exclusive) + 1;

  // 3-layer composite.
  nn::Rng init(2);
  const nn::Mlp mlp = nn::Mlp::create({4, 16, 16, 16, 2}, init);
  const ad::Tensor x = r({6, 4}), target = r({6, 2});
  const double composite = max_grad_error(
      [&](std::span<const ad::Tensor> p) { return ad::mean(ad::square(ad::sub(nn::Mlp::forward(p, x), target))); },
      mlp.params());

  // Full render-loss pipeline on a tiny field.
  FieldConfig fc;
  fc.pos_max_exp = 3;
  fc.dir_max_exp = 1;
  fc.layers = 2;
  fc.width = 16;
  fc.feature_dim = 4;
  fc.head_width = 8;
  fc.fast_matmul = false;
  nn::Rng frng(3);
  const NeuralField field = NeuralField::create(fc, NormalizationTransform{}, frng);
  const std::vector<Ray> rays = {{{0, 0, 0}, Eigen::Vector3d(1, 0.2, -0.1).normalized()},
                                 {{0.1, 0, 0}, Eigen::Vector3d(-0.3, 1, 0.2).normalized()}};
  std::vector<double> pos, dir, t, delta;
  for (const auto& ray : rays) {
    const RaySamples s = sample_uniform(ray, 0.1, 1.2, 4, nullptr);
    for (std::size_t k = 0; k < s.size(); ++k) {
      const Eigen::Vector3d p = ray.at(s.t[k]);
      pos.insert(pos.end(), {p.x(), p.y(), p.z()});
      dir.insert(dir.end(), {ray.direction.x(), ray.direction.y(), ray.direction.z()});
    }
    t.insert(t.end(), s.t.begin(), s.t.end());
    delta.insert(delta.end(), s.delta.begin(), s.delta.end());
  }
  const std::vector<double> gd = {0.6, 0.0}, gi = {0.3, 0.0}, gp = {1.0, 0.0};
  const std::vector<std::uint8_t> valid = {1, 0};
  const double pipeline = max_grad_error(
      [&](std::span<const ad::Tensor> p) {
        const auto o = field.forward(p, pos, dir);
        const RenderTensors rt = volume_render_tensors(ad::reshape(o.sigma, {2, 4}), ad::reshape(o.intensity, {2, 4}),
                                                       ad::reshape(o.raydrop, {2, 4}), t, delta);
        return loss_tensors(rt.distance, rt.intensity, rt.raydrop, gd, gi, gp, valid, 1.0, 1.0, 2.0).total;
      },
      field.parameters());
  const double secs = sw.seconds();
  const bool pass = all_ops && worst_op < 1e-4 && composite < 1e-4 && pipeline < 1e-3 && secs < 30;
  return {pass, fmt("%zu op kinds, worst op error %.2e (%s), 3-layer %.2e, render-loss pipeline %.2e, %.2f s",
                    covered.size(), worst_op, worst_name.c_str(), composite, pipeline, secs)};
}

// ---------------------------------------------------------------------------
// 3. Volume rendering identities

Result criterion3() {
  std::mt19937_64 rng(3);
  std::exponential_distribution<double> ex(0.5);
  std::uniform_real_distribution<double> u(0, 1);
  const Ray ray;
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + trial % 64;
    const RaySamples s = sample_uniform(ray, 0.05, 3.0, n, nullptr);
    std::vector<double> sigma(n), a(n), b(n);
    for (std::size_t k = 0; k < n; ++k) {
      sigma[k] = (trial % 4 == 0 ? 100.0 : 1.0) * ex(rng);
      a[k] = u(rng);
      b[k] = u(rng);
    }
    const VolumeRender v = volume_render(s, sigma, a, b);
    const double total = std::accumulate(v.weights.begin(), v.weights.end(), 0.0) + v.transmittance.back();
    worst = std::max(worst, std::abs(total - 1.0));
  }
  const RaySamples two = make_samples(ray, {1.0, 2.0}, 3.0);
  const VolumeRender v = volume_render(two, std::vector<double>{0.0, std::log(2.0) / two.delta[1]},
                                       std::vector<double>{1.0, 1.0}, std::vector<double>{1.0, 1.0});
  const bool example = v.weights[0] == 0.0 && std::abs(v.weights[1] - 0.5) <= 1e-15 && std::abs(v.distance - 1.0) <= 1e-15;
  return {worst < 1e-9 && example,
          fmt("max |sum w + T - 1| = %.2e over 1000 configs; two-sample weights (%.17g, %.17g), D = %.17g", worst,
              v.weights[0], v.weights[1], v.distance)};
}

// ---------------------------------------------------------------------------
// 4. Metric oracles

Result criterion4() {
  const Stopwatch sw;
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-2, 2), pos(0.1, 3);
  std::uniform_int_distribution<std::size_t> size(1, 64);
  const auto cloud = [&](std::size_t n, bool positive_x) {
    oracle::Points p(n);
    for (auto& x : p) x = {positive_x ? pos(rng) : u(rng), u(rng), u(rng)};
    return p;
  };
  double cd_err = 0.0, emd_err = 0.0;
  for (int k = 0; k < 50; ++k) {
    const auto a = cloud(size(rng), false), b = cloud(size(rng), false);
    cd_err = std::max(cd_err, std::abs(chamfer(a, b) - oracle::chamfer(a, b)));
    // Equal sizes in a single group, so no subsampling is involved.
    const std::size_t n = size(rng);
    const auto c = cloud(n, true), d = cloud(n, true);
    emd_err = std::max(emd_err, std::abs(emd(c, d).value - oracle::emd_equal(c, d)));
  }
  double depth_err = 0.0, img_err = 0.0;
  const LidarSpec spec = SynthConfig::default_spec();
  std::uniform_real_distribution<double> dd(0.5, 79), ii(0, 1), jit(-0.3, 0.3), coin(0, 1);
  for (int k = 0; k < 20; ++k) {
    RangeImage a(spec), b(spec);
    for (int h = 0; h < spec.H; ++h) {
      for (int w = 0; w < spec.W; ++w) {
        const double d = dd(rng), i = ii(rng);
        if (coin(rng) < 0.9) a.set(h, w, d, i);
        if (coin(rng) < 0.9) b.set(h, w, std::clamp(d * (1 + jit(rng)), 0.01, 80.0), std::clamp(i + jit(rng), 0.0, 1.0));
      }
    }
    const RangeMetrics m = range_metrics(b, a);
    const oracle::Depth o = oracle::depth_metrics(b.distances(), a.distances(), b.mask(), a.mask(), 80.0);
    depth_err = std::max({depth_err, std::abs(m.rmse - o.rmse), std::abs(m.delta1 - o.d1), std::abs(m.delta2 - o.d2),
                          std::abs(m.delta3 - o.d3)});
    const auto ia = intensity_image(a), ib = intensity_image(b);
    const IntensityMetrics im = intensity_metrics(b, a);
    img_err = std::max({img_err, std::abs(im.psnr - oracle::psnr(ib, ia)),
                        std::abs(im.ssim - oracle::ssim(ib, ia, spec.H, spec.W))});
  }
  const double secs = sw.seconds();
  const bool pass = cd_err < 1e-6 && emd_err < 1e-6 && depth_err < 1e-9 && img_err < 1e-6 && secs < 60;
  return {pass, fmt("chamfer %.1e, emd %.1e vs Hungarian, depth %.1e, psnr/ssim %.1e, %.1f s", cd_err, emd_err,
                    depth_err, img_err, secs)};
}

// ---------------------------------------------------------------------------
// Shared synthetic scenes on disk

fs::path scene_dir(const std::string& name, double drop, bool hall = false) {
  const fs::path dir = g_opt.workdir / name;
  if (!fs::exists(dir / "manifest.txt")) {
    std::vector<std::string> args = {"synth-scene", "--out", dir.string()};
    if (drop > 0) args.insert(args.end(), {"--drop-distance", fmt("%g", drop)});
    if (hall) args.push_back("--hall");
    if (cli_run(args) != 0) throw std::runtime_error("synth-scene failed");
  }
  return dir;
}

std::string frame_file(const fs::path& dir, const char* prefix, std::size_t k, const char* ext) {
  return (dir / fmt("%s_%03zu.%s", prefix, k, ext)).string();
}

// ---------------------------------------------------------------------------
// 5. Baseline on the synthetic room

Result criterion5() {
  const Stopwatch sw;
  const fs::path dir = scene_dir("room", 0.0);
  const Scene scene = load_manifest(dir / "manifest.txt", load_spec(dir / "spec.cfg"));
  std::string detail;
  bool pass = true;
  for (std::size_t k : scene.indices(Split::eval)) {
    const std::string out = (g_opt.workdir / fmt("c5_base_%03zu.lnri", k)).string();
    const std::string report = (g_opt.workdir / fmt("c5_eval_%03zu.txt", k)).string();
    if (cli_run({"render-baseline", "--spec", (dir / "spec.cfg").string(), "--manifest",
                 (dir / "manifest.txt").string(), "--pose", frame_file(dir, "frame", k, "pose"), "--mode", "averaged",
                 "--out", out}) != 0 ||
        cli_run({"eval", "--spec", (dir / "spec.cfg").string(), "--pred", out, "--gt", frame_file(dir, "gt", k, "lnri"),
                 "--out", report}) != 0) {
      return {false, "command failed"};
    }
    const RangeImage pred = load_range_image(out, scene.spec), gt = load_range_image(frame_file(dir, "gt", k, "lnri"), scene.spec);
    const double cd = chamfer(positions(range_image_to_cloud(pred)), positions(range_image_to_cloud(gt)));
    const double d1 = range_metrics(pred, gt).delta1;
    pass = pass && cd < 0.05 && d1 > 97.0;
    detail += fmt("pose %zu: C-D %.4f, delta1 %.2f%%; ", k, cd, d1);
  }
  const double secs = sw.seconds();
  pass = pass && secs < 120;
  return {pass, detail + fmt("%.1f s", secs)};
}

// ---------------------------------------------------------------------------
// Field runs shared by criteria 6-8

struct Quality {
  double rmse = 0, delta1 = 0, psnr = 0;
};

struct SceneData {
  SynthScene synth;
  std::vector<std::size_t> eval;
  std::vector<RangeImage> prior;  ///< averaged baseline render per eval frame
};

SceneData load_scene(double drop, bool hall = false) {
  SynthConfig cfg = hall ? SynthConfig::hall() : SynthConfig{};
  cfg.drop_distance = drop;
  SceneData d{make_synth_scene(cfg), {}, {}};
  d.eval = d.synth.scene.indices(Split::eval);
  const PointCloud world = aggregate_frames(d.synth.scene, FrameFilter::train_only);
  for (std::size_t k : d.eval) d.prior.push_back(raycast_averaged(world, d.synth.scene.spec, d.synth.scene.frames[k].pose, 1.0));
  return d;
}

std::vector<FieldRender> render_eval(const NeuralField& f, const SceneData& d) {
  std::vector<FieldRender> out;
  for (std::size_t j = 0; j < d.eval.size(); ++j) {
    out.push_back(render_view(f, d.synth.scene.spec, d.synth.scene.frames[d.eval[j]].pose, &d.prior[j]));
  }
  return out;
}

// Mean over eval frames of the per-frame metrics.
Quality quality(const std::vector<FieldRender>& renders, const SceneData& d) {
  Quality q;
  for (std::size_t j = 0; j < renders.size(); ++j) {
    const RangeImage& gt = d.synth.ground_truth[d.eval[j]];
    const RangeMetrics m = range_metrics(renders[j].image, gt);
    q.rmse += m.rmse;
    q.delta1 += m.delta1;
    q.psnr += intensity_metrics(renders[j].image, gt).psnr;
  }
  const double n = static_cast<double>(renders.size());
  return {q.rmse / n, q.delta1 / n, q.psnr / n};
}

struct TracePoint {
  std::size_t iteration;
  double seconds;
  Quality q;
};

struct FieldRun {
  TrainResult result;
  std::vector<TracePoint> trace;
  Quality final_q;
  std::vector<FieldRender> renders;
  double wall = 0.0;
  std::optional<double> time_to_target;  ///< train seconds to RMSE < 0.1
};

FieldConfig criterion6_config(double budget) {
  FieldConfig c;
  c.layers = 4;
  c.width = 128;
  c.batch = 1024;
  c.iterations = 20000;
  c.time_budget_s = budget;
  return c;
}

FieldRun run_field(const SceneData& d, FieldConfig c, std::size_t eval_every, double stop_after = 0.0) {
  FieldRun run;
  TrainHooks hooks;
  hooks.log_every = 100;
  hooks.every = eval_every;
  hooks.on_progress = [&](const TrainProgress& p, const NeuralField& f) {
    if (eval_every == 0) return true;
    const Quality q = quality(render_eval(f, d), d);
    run.trace.push_back({p.iteration, p.train_seconds, q});
    std::fprintf(stderr, "  iter %zu  %.0f s  rmse %.4f  delta1 %.2f  psnr %.2f\n", p.iteration, p.train_seconds,
                 q.rmse, q.delta1, q.psnr);
    if (!run.time_to_target && q.rmse < 0.1) run.time_to_target = p.train_seconds;
    return !(stop_after > 0.0 && p.train_seconds > stop_after);
  };
  const Stopwatch sw;
  run.result = train(d.synth.scene, c, hooks);
  run.wall = sw.seconds();
  run.renders = render_eval(run.result.field, d);
  run.final_q = quality(run.renders, d);
  if (!run.time_to_target && run.final_q.rmse < 0.1) run.time_to_target = run.result.log.train_seconds;
  return run;
}

const SceneData& room_scene() {
  static const SceneData d = load_scene(0.0);
  return d;
}

const SceneData& drop_scene() {
  static const SceneData d = load_scene(20.0);
  return d;
}

// The room is too small for the 20 m rule to drop more than ~1% of returns,
// so ray-drop learning is judged in the hall instead.
const SceneData& hall_scene() {
  static const SceneData d = load_scene(20.0, true);
  return d;
}

const FieldRun& guided_run() {
  static const FieldRun r = [] {
    std::fprintf(stderr, "training guided field (budget %.0f s)\n", g_opt.train_budget);
    return run_field(room_scene(), criterion6_config(g_opt.train_budget), 200);
  }();
  return r;
}

const FieldRun& drop_run() {
  static const FieldRun r = [] {
    std::fprintf(stderr, "training field on the drop variant (budget %.0f s)\n", g_opt.drop_budget);
    return run_field(drop_scene(), criterion6_config(g_opt.drop_budget), 0);
  }();
  return r;
}

const FieldRun& hall_run() {
  static const FieldRun r = [] {
    std::fprintf(stderr, "training field on the drop hall (budget %.0f s)\n", g_opt.drop_budget);
    return run_field(hall_scene(), criterion6_config(g_opt.drop_budget), 0);
  }();
  return r;
}

// ---------------------------------------------------------------------------
// 6. Field end-to-end

Result criterion6() {
  const FieldRun& g = guided_run();
  const Quality& q = g.final_q;
  const std::size_t iters = g.result.log.iterations_run;
  const double train_s = g.result.log.train_seconds;
  const bool schedule = iters == 20000 && train_s < 1800.0;
  const bool quality_ok = q.rmse < 0.1 && q.delta1 > 95.0 && q.psnr > 25.0;

  const SceneData& d = drop_scene();
  const FieldRun& dr = drop_run();
  double base_d1 = 0.0, field_d1 = 0.0;
  for (std::size_t j = 0; j < d.eval.size(); ++j) {
    const RangeImage& gt = d.synth.ground_truth[d.eval[j]];
    base_d1 += range_metrics(d.prior[j], gt).delta1 / static_cast<double>(d.eval.size());
    field_d1 += range_metrics(dr.renders[j].image, gt).delta1 / static_cast<double>(d.eval.size());
  }
  const bool ordering = field_d1 > base_d1;
  return {schedule && quality_ok && ordering,
          fmt("%zu/20000 iterations in %.0f s (%s); RMSE %.4f, delta1 %.2f%%, PSNR %.2f dB (%s); drop variant: "
              "field delta1 %.2f%% vs baseline %.2f%% after %zu iterations (%s)",
              iters, train_s, schedule ? "ok" : "short", q.rmse, q.delta1, q.psnr, quality_ok ? "ok" : "missed",
              field_d1, base_d1, dr.result.log.iterations_run, ordering ? "ok" : "reversed")};
}

// ---------------------------------------------------------------------------
// 7. Ray-drop learning

Result criterion7() {
  const SceneData& d = hall_scene();
  const fs::path dir = scene_dir("hall_drop", 20.0, true);
  const fs::path net_path = g_opt.workdir / "c7_raydrop.lnrd";
  if (cli_run({"train-raydrop", "--spec", (dir / "spec.cfg").string(), "--manifest", (dir / "manifest.txt").string(),
               "--out", net_path.string()}) != 0) {
    return {false, "train-raydrop failed"};
  }
  const RaydropNet net = RaydropNet::load(net_path);
  std::size_t s_ok = 0, s_n = 0, s_keep = 0, f_ok = 0, f_n = 0, f_keep = 0;
  const FieldRun& dr = hall_run();
  for (std::size_t j = 0; j < d.eval.size(); ++j) {
    const RangeImage& gt = d.synth.ground_truth[d.eval[j]];
    const RaydropFeatures feats = raydrop_features(d.prior[j]);
    const auto probs = net.predict(feats, d.synth.scene.spec.max_range);
    for (std::size_t k = 0; k < feats.size(); ++k) {
      const bool keep = gt.mask()[feats.pixel[k]] != 0;
      s_ok += (probs[k] >= 0.5) == keep;
      s_keep += keep;
      ++s_n;
    }
    for (std::size_t i = 0; i < gt.pixel_count(); ++i) {
      const bool keep = gt.mask()[i] != 0;
      f_ok += (dr.renders[j].raydrop[i] >= 0.5) == keep;
      f_keep += keep;
      ++f_n;
    }
  }
  const auto pct = [](std::size_t a, std::size_t b) { return 100.0 * static_cast<double>(a) / static_cast<double>(b); };
  const double s_acc = pct(s_ok, s_n), f_acc = pct(f_ok, f_n);
  const double s_major = std::max(pct(s_keep, s_n), 100 - pct(s_keep, s_n));
  const double f_major = std::max(pct(f_keep, f_n), 100 - pct(f_keep, f_n));
  return {s_acc > 90.0 && f_acc > 90.0,
          fmt("surrogate %.2f%% on %zu rendered pixels (majority class %.2f%%); field %.2f%% on %zu pixels "
              "(majority class %.2f%%)",
              s_acc, s_n, s_major, f_acc, f_n, f_major)};
}

// ---------------------------------------------------------------------------
// 8. Guided vs hierarchical sampling

Result criterion8() {
  const FieldRun& g = guided_run();
  FieldConfig c = criterion6_config(g_opt.train_budget);
  c.sampling = SamplingMode::hierarchical;
  // The hierarchical run only has to last long enough to decide the ratio.
  double stop_after = g.time_to_target ? 2.0 * *g.time_to_target : std::min(g_opt.train_budget, 600.0);
  c.time_budget_s = std::min(c.time_budget_s, stop_after + 1.0);
  std::fprintf(stderr, "training hierarchical field (stop after %.0f s)\n", stop_after);
  const FieldRun h = run_field(room_scene(), c, 100, stop_after);

  // Guided RMSE at the hierarchical run's length, for context.
  double guided_at = g.trace.empty() ? g.final_q.rmse : g.trace.front().q.rmse;
  for (const auto& p : g.trace) {
    if (p.seconds <= h.result.log.train_seconds) guided_at = p.q.rmse;
  }
  if (!g.time_to_target) {
    return {false, fmt("guided never reached RMSE < 0.1 (final %.4f after %.0f s); at %.0f s guided RMSE %.4f vs "
                       "hierarchical %.4f",
                       g.final_q.rmse, g.result.log.train_seconds, h.result.log.train_seconds, guided_at,
                       h.final_q.rmse)};
  }
  const double tg = *g.time_to_target;
  const bool pass = !h.time_to_target || tg <= 0.5 * *h.time_to_target;
  return {pass, fmt("guided reached target at %.0f s; hierarchical %s (ran %.0f s, final RMSE %.4f)", tg,
                    h.time_to_target ? fmt("at %.0f s", *h.time_to_target).c_str() : "not within 2x", h.result.log.train_seconds,
                    h.final_q.rmse)};
}

// ---------------------------------------------------------------------------
// 9. Scene edit occlusion

PointCloud cube_cloud(double half, double step) {
  PointCloud c;
  for (double x = -half; x <= half + 1e-9; x += step) {
    for (double y = -half; y <= half + 1e-9; y += step) {
      for (double z = -half; z <= half + 1e-9; z += step) {
        if (std::max({std::abs(x), std::abs(y), std::abs(z)}) > half - 1e-9) c.points.push_back({{x, y, z}, 0.9});
      }
    }
  }
  return c;
}

// Writes the inputs for an edit run and returns the edit command line.
std::vector<std::string> edit_command(const fs::path& dir, const fs::path& scene, const std::string& placement_name,
                                      const Eigen::Vector3d& at) {
  save_cloud(cube_cloud(0.5, 0.05), dir / "object.lnpc");
  std::ofstream(dir / (placement_name + ".txt")) << fmt("%.17g %.17g %.17g 0.3 0 0\n", at.x(), at.y(), at.z());
  return {"edit", "--spec", (scene / "spec.cfg").string(), "--scene-image", frame_file(scene, "gt", 8, "lnri"),
          "--scene-pose", frame_file(scene, "frame", 8, "pose"), "--placement", (dir / (placement_name + ".txt")).string(),
          "--object-cloud", (dir / "object.lnpc").string(), "--out", (dir / (placement_name + ".lnri")).string()};
}

Eigen::Vector3d free_space_spot(const SynthConfig& cfg) {
  const Eigen::Vector3d eye = cfg.eval_poses[0].origin();
  for (double r = 3.0; r < 10.0; r += 0.5) {
    for (int k = 0; k < 16; ++k) {
      const double a = 2 * std::numbers::pi * k / 16;
      const Eigen::Vector3d p = eye + Eigen::Vector3d(r * std::cos(a), r * std::sin(a), 0.0);
      if (cfg.world.room->contains(p) && cfg.world.surface_distance(p) > 1.5) return p;
    }
  }
  throw std::runtime_error("no free-space spot found");
}

Result criterion9() {
  const fs::path scene = scene_dir("room", 0.0);
  const fs::path dir = g_opt.workdir / "c9";
  fs::create_directories(dir);
  const SynthConfig cfg;
  const Eigen::Vector3d behind(cfg.world.room->max.x() + 4.0, 0.0, 0.5);
  const Eigen::Vector3d free = free_space_spot(cfg);
  if (cli_run(edit_command(dir, scene, "behind", behind)) != 0 || cli_run(edit_command(dir, scene, "free", free)) != 0) {
    return {false, "edit failed"};
  }
  const bool identical = file_bytes(dir / "behind.lnri") == file_bytes(frame_file(scene, "gt", 8, "lnri"));
  const RangeImage before = load_range_image(frame_file(scene, "gt", 8, "lnri"), cfg.spec);
  const RangeImage after = load_range_image(dir / "free.lnri", cfg.spec);
  std::size_t inserted = 0, increased = 0;
  for (std::size_t i = 0; i < before.pixel_count(); ++i) {
    const bool changed = after.mask()[i] != before.mask()[i] || after.distances()[i] != before.distances()[i];
    inserted += changed;
    if (before.mask()[i] && (!after.mask()[i] || after.distances()[i] > before.distances()[i])) ++increased;
  }
  return {identical && inserted >= 1 && increased == 0,
          fmt("behind wall: %s; free space at (%.1f, %.1f, %.1f): %zu pixels inserted, %zu increased",
              identical ? "byte-identical" : "DIFFERS", free.x(), free.y(), free.z(), inserted, increased)};
}

// ---------------------------------------------------------------------------
// 10. Determinism of the command-line pipeline

void pipeline(const fs::path& dir) {
  fs::create_directories(dir);
  const auto check = [](int code) {
    if (code != 0) throw std::runtime_error("pipeline command failed");
  };
  const std::string seed = "7";
  const fs::path room = dir / "room", drop = dir / "drop";
  check(cli_run({"synth-scene", "--out", room.string()}));
  check(cli_run({"synth-scene", "--drop-distance", "20", "--out", drop.string()}));
  const std::string spec = (room / "spec.cfg").string(), manifest = (room / "manifest.txt").string();
  // Criterion 5.
  check(cli_run({"render-baseline", "--spec", spec, "--manifest", manifest, "--pose", frame_file(room, "frame", 8, "pose"),
                 "--mode", "averaged", "--out", (dir / "base.lnri").string()}));
  check(cli_run({"eval", "--spec", spec, "--pred", (dir / "base.lnri").string(), "--gt", frame_file(room, "gt", 8, "lnri"),
                 "--seed", seed, "--out", (dir / "base_eval.txt").string()}));
  // Criteria 6 and 8, shortened.
  for (const std::string sampling : {"guided", "hierarchical"}) {
    check(cli_run({"train", "--spec", spec, "--manifest", manifest, "--layers", "4", "--width", "128", "--batch", "1024",
                   "--iterations", "4", "--warmup", "2", "--sampling", sampling, "--seed", seed, "--out",
                   (dir / (sampling + ".lnnf")).string()}));
    check(cli_run({"render", "--field", (dir / (sampling + ".lnnf")).string(), "--spec", spec, "--pose",
                   frame_file(room, "frame", 8, "pose"), "--prior", (dir / "base.lnri").string(), "--raydrop-out",
                   (dir / (sampling + "_p.txt")).string(), "--out", (dir / (sampling + ".lnri")).string()}));
  }
  check(cli_run({"render", "--field", (dir / "guided.lnnf").string(), "--spec", spec, "--pose",
                 frame_file(room, "frame", 9, "pose"), "--stochastic", "--seed", seed, "--out",
                 (dir / "stochastic.lnri").string()}));
  // Criterion 7, shortened.
  const std::string dspec = (drop / "spec.cfg").string(), dmanifest = (drop / "manifest.txt").string();
  check(cli_run({"train-raydrop", "--spec", dspec, "--manifest", dmanifest, "--iterations", "20", "--seed", seed, "--out",
                 (dir / "rd.lnrd").string()}));
  check(cli_run({"render-baseline", "--spec", dspec, "--manifest", dmanifest, "--pose", frame_file(drop, "frame", 8, "pose"),
                 "--raydrop", (dir / "rd.lnrd").string(), "--out", (dir / "drop_base.lnri").string()}));
  // Criterion 9.
  const SynthConfig cfg;
  check(cli_run(edit_command(dir, room, "free", free_space_spot(cfg))));
}

Result criterion10() {
  const fs::path a = g_opt.workdir / "c10_a", b = g_opt.workdir / "c10_b";
  fs::remove_all(a);
  fs::remove_all(b);
  pipeline(a);
  pipeline(b);
  std::size_t files = 0, different = 0;
  std::string first_diff;
  for (const auto& entry : fs::recursive_directory_iterator(a)) {
    if (!entry.is_regular_file()) continue;
    const fs::path rel = fs::relative(entry.path(), a);
    ++files;
    if (file_bytes(entry.path()) != file_bytes(b / rel)) {
      ++different;
      if (first_diff.empty()) first_diff = rel.string();
    }
  }
  return {different == 0 && files > 0,
          fmt("%zu files compared over two seeded runs, %zu differ%s%s", files, different,
              first_diff.empty() ? "" : ", first: ", first_diff.c_str())};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app("Acceptance criteria");
  std::string only;
  std::string workdir;
  app.add_option("--only", only, "Comma-separated criteria to run (default: all)");
  app.add_option("--workdir", workdir, "Scratch directory (default: a fresh temp dir)");
  app.add_option("--train-budget", g_opt.train_budget, "Seconds of optimization for the criterion 6 and 8 runs");
  app.add_option("--drop-budget", g_opt.drop_budget, "Seconds of optimization for the drop-variant field");
  CLI11_PARSE(app, argc, argv);

  std::optional<testutil::TempDir> temp;
  if (workdir.empty()) {
    temp.emplace("acceptance");
    g_opt.workdir = temp->path();
  } else {
    g_opt.workdir = workdir;
    fs::create_directories(g_opt.workdir);
  }

  const std::map<int, std::function<Result()>> criteria = {
      {1, criterion1}, {2, criterion2}, {3, criterion3}, {4, criterion4}, {5, criterion5},
      {6, criterion6}, {7, criterion7}, {8, criterion8}, {9, criterion9}, {10, criterion10},
  };
  std::set<int> selected;
  std::stringstream ss(only);
  for (std::string tok; std::getline(ss, tok, ',');) {
    if (!tok.empty()) selected.insert(std::stoi(tok));
  }
  int failed = 0;
  for (const auto& [id, fn] : criteria) {
    if (!selected.empty() && !selected.count(id)) continue;
    Result r;
    const Stopwatch sw;
    try {
      r = fn();
    } catch (const std::exception& e) {
      r = {false, std::string("exception: ") + e.what()};
    }
    std::printf("criterion %2d %s  %s [%.1f s]\n", id, r.pass ? "PASS" : "FAIL", r.detail.c_str(), sw.seconds());
    std::fflush(stdout);
    failed += !r.pass;
  }
  return failed == 0 ? 0 : 1;
}
