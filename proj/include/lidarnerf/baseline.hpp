#pragma once

// Model-based baseline: ray-cast an aggregated world cloud into a novel pose,
// optionally followed by a learned ray-drop surrogate.

#include "lidarnerf/autodiff.hpp"
#include "lidarnerf/lidar_model.hpp"
#include "lidarnerf/nn.hpp"

#include <filesystem>
#include <functional>
#include <vector>

namespace lnerf {

/// Per-pixel buckets hold at most this many nearest candidates.
inline constexpr std::size_t kMaxBucket = 64;

RangeImage raycast_closest(const PointCloud& world_cloud, const LidarSpec& spec, const Pose& pose);

/// Inverse-distance weighted mean over bucket entries with d <= d_min + threshold.
/// A zero threshold reduces to raycast_closest.
RangeImage raycast_averaged(const PointCloud& world_cloud, const LidarSpec& spec, const Pose& pose,
                            double threshold);

struct RaydropFeatures {
  std::vector<Eigen::Vector3d> directions;  ///< sensor frame
  std::vector<double> distance;
  std::vector<double> intensity;
  std::vector<std::size_t> pixel;  ///< flat pixel index

  std::size_t size() const noexcept { return pixel.size(); }
};

RaydropFeatures raydrop_features(const RangeImage& img, PixelConvention convention = PixelConvention::center);

/// p = MLP(enc(theta'), enc(d / max_range), enc(i)) followed by a sigmoid.
class RaydropNet {
 public:
  static constexpr int kDirectionExp = 10;
  static constexpr int kDistanceExp = 4;
  static constexpr int kIntensityExp = 4;
  static constexpr std::size_t kInputSize =
      nn::encoded_size(3, kDirectionExp) + nn::encoded_size(1, kDistanceExp) + nn::encoded_size(1, kIntensityExp);

  RaydropNet() = default;
  explicit RaydropNet(nn::Mlp mlp);
  /// `hidden_layers` ReLU layers of `width`, then a single output.
  static RaydropNet create(std::size_t hidden_layers, std::size_t width, nn::Rng& rng);
  /// Network whose output is sigmoid(logit) for every input.
  static RaydropNet constant(double logit);

  const nn::Mlp& mlp() const noexcept { return mlp_; }
  nn::Mlp& mlp() noexcept { return mlp_; }

  /// Encoded input rows [n, kInputSize]; range normalizes distance.
  static ad::Tensor encode(const RaydropFeatures& f, std::size_t begin, std::size_t end, double max_range);

  /// Keep probabilities for every feature row.
  std::vector<double> predict(const RaydropFeatures& f, double max_range) const;

  void save(const std::filesystem::path& path) const;
  static RaydropNet load(const std::filesystem::path& path);

 private:
  nn::Mlp mlp_;
};

struct RaydropHyper {
  std::size_t hidden_layers = 4;
  std::size_t width = 128;
  double lr = 5e-3;
  std::size_t iterations = 2000;
  std::size_t batch = 2048;
  std::uint64_t seed = 0;
};

struct RaydropTraining {
  RaydropNet net;
  double final_loss = 0.0;
  std::size_t rows = 0;
};

/// Labels: 1 where the renderer populated a pixel and ground truth has a
/// return, 0 where the renderer populated it but ground truth dropped it.
RaydropTraining train_raydrop(const std::vector<std::pair<RangeImage, RangeImage>>& pairs, const RaydropHyper& hyper);

/// Lower-level entry used by train_raydrop.
RaydropTraining train_raydrop_rows(const RaydropFeatures& features, const std::vector<double>& labels,
                                   double max_range, const RaydropHyper& hyper);

/// Drops pixels whose keep probability (aligned with raydrop_features order)
/// is below `threshold`.
RangeImage apply_raydrop(const RangeImage& img, const std::vector<double>& keep_probability, double threshold = 0.5);
RangeImage apply_raydrop(const RangeImage& img, const RaydropNet& net, double threshold = 0.5);

}  // namespace lnerf
