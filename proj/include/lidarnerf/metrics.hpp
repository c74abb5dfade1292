#pragma once

// Point-cloud, depth and intensity-image metrics for comparing a synthesized
// range image against ground truth.

#include "lidarnerf/lidar_model.hpp"

#include <algorithm>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lnerf {

/// Exact nearest-neighbour queries over a fixed point set.
class KdTree {
 public:
  explicit KdTree(std::vector<Eigen::Vector3d> points);
  std::size_t size() const noexcept { return points_.size(); }
  /// Squared distance to the nearest stored point; the tree must be nonempty.
  double nearest_squared(const Eigen::Vector3d& q) const;

 private:
  struct Node {
    std::uint32_t point;
    std::int32_t left = -1;
    std::int32_t right = -1;
    std::uint8_t axis = 0;
  };
  std::int32_t build(std::vector<std::uint32_t>& idx, std::size_t begin, std::size_t end, int depth);
  void search(std::int32_t node, const Eigen::Vector3d& q, double& best) const;

  std::vector<Eigen::Vector3d> points_;
  std::vector<Node> nodes_;
  std::int32_t root_ = -1;
};

std::vector<Eigen::Vector3d> positions(const PointCloud& cloud);

/// Squared nearest-neighbour distance from every point of a to b.
std::vector<double> nearest_squared(std::span<const Eigen::Vector3d> a, std::span<const Eigen::Vector3d> b,
                                    int threads = 1);

double chamfer(std::span<const Eigen::Vector3d> g1, std::span<const Eigen::Vector3d> g2, int threads = 1);

/// Percentage in [0, 100]; precision is measured on g1, recall on g2.
double fscore(std::span<const Eigen::Vector3d> g1, std::span<const Eigen::Vector3d> g2, double tau = 0.05,
              int threads = 1);

/// Minimum-cost perfect assignment for an n x n cost given by `cost(i, j)`.
/// Returns the column assigned to each row.
template <class Cost>
std::vector<std::size_t> solve_assignment(std::size_t n, Cost&& cost);

/// Dense-matrix convenience wrapper.
std::vector<std::size_t> solve_assignment(const std::vector<std::vector<double>>& cost);

inline constexpr std::size_t kEmdCap = 4096;

struct EmdResult {
  double value = 0.0;
  std::size_t groups = 0;  ///< groups that contributed
  std::vector<std::string> warnings;
};

/// Mean optimal-transport distance between equal-size point sets.
double emd_equal(std::span<const Eigen::Vector3d> a, std::span<const Eigen::Vector3d> b);

/// Splits both clouds at x > 0 / x <= 0, equalizes each group's sizes by
/// seeded subsampling (also down to `cap`), and averages the per-group EMD.
/// Throws std::invalid_argument when no group is populated on both sides.
EmdResult emd(std::span<const Eigen::Vector3d> g1, std::span<const Eigen::Vector3d> g2, std::uint64_t seed = 0,
              std::size_t cap = kEmdCap);

/// |1 - n_novel / n_real|.
double np_ratio(std::size_t n_novel, std::size_t n_real);

struct RangeMetrics {
  double rmse = 0.0;
  double delta1 = 0.0;
  double delta2 = 0.0;
  double delta3 = 0.0;
  std::size_t count = 0;
};

/// Over pixels valid in both images, distances clipped to [1e-3, cap].
RangeMetrics range_metrics(const RangeImage& pred, const RangeImage& gt, double cap = 80.0);

struct IntensityMetrics {
  double psnr = 0.0;
  double ssim = 0.0;
};

/// Intensity channel as an image, dropped pixels as 0.
std::vector<double> intensity_image(const RangeImage& img);

/// 10 log10(1 / mse), 99 when mse < 1e-10.
double psnr(std::span<const double> a, std::span<const double> b);

/// Mean SSIM over all fully contained 11 x 11 Gaussian windows (sigma 1.5);
/// the window shrinks to the largest odd size that fits small images.
double ssim(std::span<const double> a, std::span<const double> b, int rows, int cols);

/// With `valid_only`, the PSNR uses mutually valid pixels only.
IntensityMetrics intensity_metrics(const RangeImage& pred, const RangeImage& gt, bool valid_only = false);

struct MetricsReport {
  double chamfer = 0.0;
  double fscore = 0.0;
  double emd = 0.0;
  double np_ratio = 0.0;
  double rmse = 0.0;
  double delta1 = 0.0;
  double delta2 = 0.0;
  double delta3 = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
  std::size_t n_pred_points = 0;
  std::size_t n_gt_points = 0;
  std::size_t n_depth_pixels = 0;
  std::vector<std::string> warnings;

  std::string to_text() const;
};

struct EvalOptions {
  double tau = 0.05;
  double cap = 80.0;
  bool psnr_valid_only = false;
  std::size_t emd_cap = kEmdCap;
  std::uint64_t seed = 0;
  int threads = 1;
};

MetricsReport evaluate(const RangeImage& pred, const RangeImage& gt, const EvalOptions& options = {});

// ---------------------------------------------------------------------------

template <class Cost>
std::vector<std::size_t> solve_assignment(std::size_t n, Cost&& cost) {
  // Shortest augmenting paths (Dijkstra over columns with dual potentials),
  // one row at a time.
  constexpr double inf = std::numeric_limits<double>::infinity();
  constexpr std::size_t none = std::numeric_limits<std::size_t>::max();
  std::vector<double> u(n, 0.0), v(n, 0.0), shortest(n);
  std::vector<std::size_t> col4row(n, none), row4col(n, none), path(n, none), remaining(n);
  std::vector<char> sr(n), sc(n);
  for (std::size_t cur = 0; cur < n; ++cur) {
    std::fill(shortest.begin(), shortest.end(), inf);
    std::fill(sr.begin(), sr.end(), 0);
    std::fill(sc.begin(), sc.end(), 0);
    for (std::size_t k = 0; k < n; ++k) remaining[k] = n - k - 1;
    std::size_t num_remaining = n;
    double min_val = 0.0;
    std::size_t i = cur, sink = none;
    while (sink == none) {
      sr[i] = 1;
      std::size_t index = none;
      double lowest = inf;
      for (std::size_t k = 0; k < num_remaining; ++k) {
        const std::size_t j = remaining[k];
        const double r = min_val + cost(i, j) - u[i] - v[j];
        if (r < shortest[j]) {
          path[j] = i;
          shortest[j] = r;
        }
        if (shortest[j] < lowest || (shortest[j] == lowest && row4col[j] == none)) {
          lowest = shortest[j];
          index = k;
        }
      }
      if (index == none) throw std::invalid_argument("solve_assignment: no feasible assignment");
      min_val = lowest;
      const std::size_t j = remaining[index];
      if (row4col[j] == none) {
        sink = j;
      } else {
        i = row4col[j];
      }
      sc[j] = 1;
      remaining[index] = remaining[--num_remaining];
    }
    u[cur] += min_val;
    for (std::size_t r = 0; r < n; ++r) {
      if (sr[r] && r != cur) u[r] += min_val - shortest[col4row[r]];
    }
    for (std::size_t c = 0; c < n; ++c) {
      if (sc[c]) v[c] -= min_val - shortest[c];
    }
    for (std::size_t j = sink;;) {
      const std::size_t r = path[j];
      row4col[j] = r;
      std::swap(col4row[r], j);
      if (r == cur) break;
    }
  }
  return col4row;
}

}  // namespace lnerf
