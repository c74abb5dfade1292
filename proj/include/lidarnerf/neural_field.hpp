#pragma once

// LiDAR radiance field f(x, theta) -> (sigma, intensity, ray-drop).
//
// Stage 1 maps the encoded position to a density logit and a feature vector;
// stage 2 maps (feature, encoded direction) to intensity and ray-drop logits.
// Density goes through softplus, the two attributes through sigmoid, so the
// density never depends on the viewing direction.

#include "lidarnerf/autodiff.hpp"
#include "lidarnerf/lidar_model.hpp"
#include "lidarnerf/nn.hpp"
#include "lidarnerf/scene_store.hpp"

#include <chrono>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lnerf {

enum class SamplingMode { guided, hierarchical };

std::string sampling_name(SamplingMode mode);
SamplingMode parse_sampling(const std::string& name);

struct FieldConfig {
  int pos_max_exp = 15;
  int dir_max_exp = 4;
  std::size_t layers = 8;  ///< stage-1 hidden layers
  std::size_t width = 256;
  std::size_t feature_dim = 15;
  std::size_t head_layers = 1;  ///< stage-2 hidden layers
  std::size_t head_width = 128;

  std::size_t n_coarse = 64;
  std::size_t n_fine = 128;
  std::size_t n_guided = 4;
  SamplingMode sampling = SamplingMode::guided;
  double guided_std = 0.01;  ///< ray-space units

  double near = 0.01;  ///< ray-space units
  double far = 0.0;    ///< 0 selects 2 x scene radius

  double lambda_intensity = 1.0;
  double lambda_raydrop = 1.0;
  double lr = 5e-4;
  std::size_t batch = 2048;
  std::size_t iterations = 20000;
  std::size_t warmup = 1000;

  NormalizationParams normalization;
  std::uint64_t seed = 0;
  std::size_t chunk_rays = 8;  ///< rays per tape; small chunks stay in cache
  int threads = 0;  ///< 0 = hardware concurrency
  /// Single-precision matrix products during training and rendering.
  bool fast_matmul = true;
  /// Stop training after this much optimization wall-clock (0 = no limit).
  double time_budget_s = 0.0;

  void validate() const;
  std::string to_text() const;
  /// key = value lines; unknown keys are an error, missing keys keep defaults.
  static FieldConfig parse(const std::string& text);
  static FieldConfig parse(const std::string& text, FieldConfig base);
};

/// Warm-up followed by cosine decay to zero at config.iterations.
double learning_rate(const FieldConfig& config, std::size_t iteration);

struct FieldSample {
  double sigma = 0.0;
  double intensity = 0.0;
  double raydrop = 0.0;
};

class NeuralField {
 public:
  NeuralField() = default;
  NeuralField(FieldConfig config, NormalizationTransform transform, nn::Mlp density, nn::Mlp head);
  static NeuralField create(const FieldConfig& config, const NormalizationTransform& transform, nn::Rng& rng);

  const FieldConfig& config() const noexcept { return config_; }
  FieldConfig& config() noexcept { return config_; }
  const NormalizationTransform& transform() const noexcept { return transform_; }
  const nn::Mlp& density_net() const noexcept { return density_; }
  const nn::Mlp& head_net() const noexcept { return head_; }

  /// Density parameters followed by head parameters.
  std::vector<ad::Tensor> parameters() const;
  void set_parameters(const std::vector<ad::Tensor>& params);
  std::size_t density_param_count() const { return density_.params().size(); }

  /// Zeroes the output layers of both stages.
  void zero_output_layers();

  /// x in the network input domain (normalized), theta a unit direction.
  FieldSample eval(const Eigen::Vector3d& x, const Eigen::Vector3d& theta) const;

  struct Outputs {
    ad::Tensor sigma;      ///< [n, 1]
    ad::Tensor intensity;  ///< [n, 1]
    ad::Tensor raydrop;    ///< [n, 1]
  };
  /// Batched forward; positions and directions are n x 3 row-major, positions
  /// already in the network input domain.  `params` may be tape-watched.
  Outputs forward(std::span<const ad::Tensor> params, std::span<const double> positions,
                  std::span<const double> directions) const;

  double far_plane() const;

  void save(const std::filesystem::path& path) const;
  static NeuralField load(const std::filesystem::path& path);

 private:
  FieldConfig config_;
  NormalizationTransform transform_;
  nn::Mlp density_;
  nn::Mlp head_;
};

// ---------------------------------------------------------------------------
// Sampling and volume rendering

struct RaySamples {
  Ray ray;
  std::vector<double> t;      ///< sorted sample depths
  std::vector<double> delta;  ///< t[k+1] - t[k], last = far - t[N-1]
  double far = 0.0;

  std::size_t size() const noexcept { return t.size(); }
};

/// Builds spacings from sorted depths.
RaySamples make_samples(const Ray& ray, std::vector<double> t, double far);

/// Stratified uniform samples, one per equal bin; a null rng gives bin centres.
RaySamples sample_uniform(const Ray& ray, double near, double far, std::size_t n, nn::Rng* rng);

/// n draws from Normal(prior, std) clamped to [near, far].  A null rng
/// places them at the Normal quantiles (k + 0.5) / n instead.
RaySamples sample_distance_guided(const Ray& ray, double prior, std::size_t n, double std, double near, double far,
                                  nn::Rng* rng);

/// Inverse-transform samples from the piecewise-constant PDF of the coarse
/// weights (bin k spans the midpoints around t[k]); all-zero weights fall back
/// to uniform.  A null rng uses the deterministic quantiles (j + 0.5) / n.
RaySamples hierarchical_resample(std::span<const double> weights, std::span<const double> t, std::size_t n_fine,
                                 double near, double far, const Ray& ray, nn::Rng* rng);

/// Sorted union of two sample sets on the same ray.
RaySamples merge_samples(const RaySamples& a, const RaySamples& b);

struct VolumeRender {
  double distance = 0.0;
  double intensity = 0.0;
  double raydrop = 0.0;
  std::vector<double> weights;
  /// T_1 .. T_{N+1}; the last entry is the transmittance past the final sample.
  std::vector<double> transmittance;
};

VolumeRender volume_render(const RaySamples& samples, std::span<const double> sigma,
                           std::span<const double> intensity, std::span<const double> raydrop);

// ---------------------------------------------------------------------------
// Loss

struct LossTerms {
  double total = 0.0;
  double distance = 0.0;
  double intensity = 0.0;
  double raydrop = 0.0;
};

/// Batch-mean squared errors; distance and intensity only where valid.
LossTerms compute_loss(std::span<const double> pred_d, std::span<const double> pred_i, std::span<const double> pred_p,
                       std::span<const double> gt_d, std::span<const double> gt_i, std::span<const double> gt_p,
                       std::span<const std::uint8_t> valid, double lambda_intensity, double lambda_raydrop);

struct LossTensors {
  ad::Tensor total;
  ad::Tensor distance;
  ad::Tensor intensity;
  ad::Tensor raydrop;
};

/// Tensor form over [R, 1] predictions; sums are divided by `batch`, which may
/// exceed R when a batch is processed in chunks.
LossTensors loss_tensors(const ad::Tensor& pred_d, const ad::Tensor& pred_i, const ad::Tensor& pred_p,
                         std::span<const double> gt_d, std::span<const double> gt_i, std::span<const double> gt_p,
                         std::span<const std::uint8_t> valid, double lambda_intensity, double lambda_raydrop,
                         double batch);

/// Differentiable volume rendering of [R, S] sample tensors.
struct RenderTensors {
  ad::Tensor distance;   ///< [R, 1]
  ad::Tensor intensity;  ///< [R, 1]
  ad::Tensor raydrop;    ///< [R, 1]
  ad::Tensor weights;    ///< [R, S]
};
RenderTensors volume_render_tensors(const ad::Tensor& sigma, const ad::Tensor& intensity, const ad::Tensor& raydrop,
                                    std::span<const double> t, std::span<const double> delta);

// ---------------------------------------------------------------------------
// Training

/// Pixels of all train frames as ray-space rays with supervision.
struct RayPool {
  std::vector<Eigen::Vector3d> origin;
  std::vector<Eigen::Vector3d> direction;
  std::vector<double> distance;  ///< ray-space units, 0 where dropped
  std::vector<double> intensity;
  std::vector<std::uint8_t> valid;

  std::size_t size() const noexcept { return valid.size(); }
};

RayPool build_ray_pool(const Scene& scene, const NormalizationTransform& transform);

struct TrainRecord {
  std::size_t iteration = 0;
  double lr = 0.0;
  LossTerms loss;
  double elapsed_s = 0.0;
};

struct TrainLog {
  std::vector<TrainRecord> records;
  std::size_t iterations_run = 0;
  double train_seconds = 0.0;
  std::string stop_reason;

  std::string to_csv() const;
};

struct TrainProgress {
  std::size_t iteration = 0;  ///< iterations completed
  double train_seconds = 0.0;
  const TrainRecord* last = nullptr;
};

struct TrainHooks {
  /// Called every `every` iterations with the current field; returning false
  /// stops training.  Time spent here is excluded from train_seconds.
  std::function<bool(const TrainProgress&, const NeuralField&)> on_progress;
  std::size_t every = 0;
  std::size_t log_every = 1;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::size_t iteration, NeuralField checkpoint, TrainLog log);
  std::size_t iteration() const noexcept { return iteration_; }
  const NeuralField& checkpoint() const noexcept { return checkpoint_; }
  const TrainLog& log() const noexcept { return log_; }

 private:
  std::size_t iteration_;
  NeuralField checkpoint_;
  TrainLog log_;
};

struct TrainResult {
  NeuralField field;
  TrainLog log;
};

TrainResult train(const Scene& scene, const FieldConfig& config, const TrainHooks& hooks = {});

/// Continues from an existing field (config taken from `field`).
TrainResult train_from(NeuralField field, const RayPool& pool, const TrainHooks& hooks = {});

// ---------------------------------------------------------------------------
// Rendering

struct RenderOptions {
  double threshold = 0.5;
  /// Disables stratification and Gaussian jitter.
  bool deterministic = true;
  std::uint64_t seed = 0;
  int threads = 0;
  std::size_t chunk_rays = 512;
  /// Restricts sampling to the ball of training points (inflated by
  /// bounds_margin); rays that miss it get no return.
  bool clip_to_bounds = false;
  double bounds_margin = 0.05;
};

struct FieldRender {
  RangeImage image;
  std::vector<double> raydrop;     ///< per pixel P-hat
  std::vector<double> distance;    ///< per pixel rendered distance (metric), before masking
  std::vector<double> intensity;   ///< per pixel, before masking
};

/// `pose` is lidar2world in world units; `prior`, when given, guides sampling
/// on its valid pixels.
FieldRender render_view(const NeuralField& field, const LidarSpec& spec, const Pose& pose,
                        const RangeImage* prior = nullptr, const RenderOptions& options = {});

}  // namespace lnerf
