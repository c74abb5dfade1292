#include "lidarnerf/metrics.hpp"

#include "lidarnerf/parallel.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <stdexcept>

namespace lnerf {

// ---------------------------------------------------------------------------
// Nearest neighbours

KdTree::KdTree(std::vector<Eigen::Vector3d> points) : points_(std::move(points)) {
  if (points_.size() >= static_cast<std::size_t>(std::numeric_limits<std::int32_t>::max())) {
    throw std::invalid_argument("KdTree: too many points");
  }
  std::vector<std::uint32_t> idx(points_.size());
  std::iota(idx.begin(), idx.end(), 0u);
  nodes_.reserve(points_.size());
  root_ = build(idx, 0, idx.size(), 0);
}

std::int32_t KdTree::build(std::vector<std::uint32_t>& idx, std::size_t begin, std::size_t end, int depth) {
  if (begin >= end) return -1;
  const int axis = depth % 3;
  const std::size_t mid = begin + (end - begin) / 2;
  std::nth_element(idx.begin() + static_cast<std::ptrdiff_t>(begin), idx.begin() + static_cast<std::ptrdiff_t>(mid),
                   idx.begin() + static_cast<std::ptrdiff_t>(end), [&](std::uint32_t a, std::uint32_t b) {
                     return points_[a][axis] < points_[b][axis];
                   });
  const auto id = static_cast<std::int32_t>(nodes_.size());
  nodes_.push_back({idx[mid], -1, -1, static_cast<std::uint8_t>(axis)});
  const std::int32_t left = build(idx, begin, mid, depth + 1);
  const std::int32_t right = build(idx, mid + 1, end, depth + 1);
  nodes_[static_cast<std::size_t>(id)].left = left;
  nodes_[static_cast<std::size_t>(id)].right = right;
  return id;
}

void KdTree::search(std::int32_t node, const Eigen::Vector3d& q, double& best) const {
  while (node >= 0) {
    const Node& n = nodes_[static_cast<std::size_t>(node)];
    const Eigen::Vector3d& p = points_[n.point];
    best = std::min(best, (p - q).squaredNorm());
    const double diff = q[n.axis] - p[n.axis];
    const std::int32_t near = diff < 0 ? n.left : n.right;
    const std::int32_t far = diff < 0 ? n.right : n.left;
    if (diff * diff < best) search(far, q, best);
    node = near;
  }
}

double KdTree::nearest_squared(const Eigen::Vector3d& q) const {
  if (root_ < 0) throw std::invalid_argument("KdTree: empty tree");
  double best = std::numeric_limits<double>::infinity();
  search(root_, q, best);
  return best;
}

std::vector<Eigen::Vector3d> positions(const PointCloud& cloud) {
  std::vector<Eigen::Vector3d> out;
  out.reserve(cloud.size());
  for (const auto& p : cloud.points) out.push_back(p.position);
  return out;
}

std::vector<double> nearest_squared(std::span<const Eigen::Vector3d> a, std::span<const Eigen::Vector3d> b,
                                    int threads) {
  if (a.empty() || b.empty()) throw std::invalid_argument("nearest neighbour query on an empty cloud");
  const KdTree tree(std::vector<Eigen::Vector3d>(b.begin(), b.end()));
  std::vector<double> out(a.size());
  constexpr std::size_t chunk = 1024;
  parallel_for((a.size() + chunk - 1) / chunk, threads, [&](std::size_t c) {
    const std::size_t end = std::min(a.size(), (c + 1) * chunk);
    for (std::size_t k = c * chunk; k < end; ++k) out[k] = tree.nearest_squared(a[k]);
  });
  return out;
}

double chamfer(std::span<const Eigen::Vector3d> g1, std::span<const Eigen::Vector3d> g2, int threads) {
  if (g1.empty() || g2.empty()) throw std::invalid_argument("chamfer: empty cloud");
  const auto d12 = nearest_squared(g1, g2, threads);
  const auto d21 = nearest_squared(g2, g1, threads);
  const double m12 = std::accumulate(d12.begin(), d12.end(), 0.0) / static_cast<double>(d12.size());
  const double m21 = std::accumulate(d21.begin(), d21.end(), 0.0) / static_cast<double>(d21.size());
  return m12 + m21;
}

double fscore(std::span<const Eigen::Vector3d> g1, std::span<const Eigen::Vector3d> g2, double tau, int threads) {
  if (g1.empty() || g2.empty()) throw std::invalid_argument("fscore: empty cloud");
  if (!(tau > 0.0)) throw std::invalid_argument("fscore: tau must be > 0");
  const double tau2 = tau * tau;
  const auto within = [&](const std::vector<double>& d) {
    const auto n = std::count_if(d.begin(), d.end(), [&](double v) { return v <= tau2; });
    return 100.0 * static_cast<double>(n) / static_cast<double>(d.size());
  };
  const double precision = within(nearest_squared(g1, g2, threads));
  const double recall = within(nearest_squared(g2, g1, threads));
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

// ---------------------------------------------------------------------------
// Earth mover's distance

std::vector<std::size_t> solve_assignment(const std::vector<std::vector<double>>& cost) {
  const std::size_t n = cost.size();
  for (const auto& row : cost) {
    if (row.size() != n) throw std::invalid_argument("solve_assignment: cost matrix must be square");
  }
  return solve_assignment(n, [&](std::size_t i, std::size_t j) { return cost[i][j]; });
}

double emd_equal(std::span<const Eigen::Vector3d> a, std::span<const Eigen::Vector3d> b) {
  if (a.size() != b.size()) throw std::invalid_argument("emd: point sets must have equal size");
  if (a.empty()) throw std::invalid_argument("emd: empty point set");
  const std::size_t n = a.size();
  std::vector<double> cost(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) cost[i * n + j] = (a[i] - b[j]).norm();
  }
  const auto match = solve_assignment(n, [&](std::size_t i, std::size_t j) { return cost[i * n + j]; });
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) total += (a[i] - b[match[i]]).norm();
  return total / static_cast<double>(a.size());
}

namespace {

std::vector<Eigen::Vector3d> subsample(std::vector<Eigen::Vector3d> pts, std::size_t n, std::mt19937_64& rng) {
  if (pts.size() <= n) return pts;
  // Partial Fisher-Yates, then restore the original order of the kept points
  // so the result does not depend on the shuffle beyond set membership.
  std::vector<std::size_t> idx(pts.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t k = 0; k < n; ++k) {
    std::uniform_int_distribution<std::size_t> pick(k, idx.size() - 1);
    std::swap(idx[k], idx[pick(rng)]);
  }
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  std::vector<Eigen::Vector3d> out;
  out.reserve(n);
  for (std::size_t i : idx) out.push_back(pts[i]);
  return out;
}

}  // namespace

EmdResult emd(std::span<const Eigen::Vector3d> g1, std::span<const Eigen::Vector3d> g2, std::uint64_t seed,
              std::size_t cap) {
  if (cap == 0) throw std::invalid_argument("emd: cap must be >= 1");
  EmdResult result;
  double sum = 0.0;
  for (int group = 0; group < 2; ++group) {
    const auto in_group = [&](const Eigen::Vector3d& p) { return group == 0 ? p.x() > 0.0 : p.x() <= 0.0; };
    std::vector<Eigen::Vector3d> a, b;
    for (const auto& p : g1) {
      if (in_group(p)) a.push_back(p);
    }
    for (const auto& p : g2) {
      if (in_group(p)) b.push_back(p);
    }
    const char* name = group == 0 ? "x > 0" : "x <= 0";
    if (a.empty() || b.empty()) {
      if (!a.empty() || !b.empty()) result.warnings.push_back(std::string("emd: group ") + name + " empty on one side, skipped");
      continue;
    }
    const std::size_t n = std::min({a.size(), b.size(), cap});
    // Both sides draw from the same stream so equal clouds keep equal subsets.
    const std::uint64_t group_seed = seed * 2 + static_cast<std::uint64_t>(group);
    std::mt19937_64 rng_a(group_seed), rng_b(group_seed);
    a = subsample(std::move(a), n, rng_a);
    b = subsample(std::move(b), n, rng_b);
    sum += emd_equal(a, b);
    ++result.groups;
  }
  if (result.groups == 0) throw std::invalid_argument("emd: no group is populated in both clouds");
  result.value = sum / static_cast<double>(result.groups);
  return result;
}

double np_ratio(std::size_t n_novel, std::size_t n_real) {
  if (n_real == 0) throw std::invalid_argument("np_ratio: real cloud is empty");
  return std::abs(1.0 - static_cast<double>(n_novel) / static_cast<double>(n_real));
}

// ---------------------------------------------------------------------------
// Range image metrics

RangeMetrics range_metrics(const RangeImage& pred, const RangeImage& gt, double cap) {
  if (!pred.spec().same_grid(gt.spec())) throw std::invalid_argument("range_metrics: image grids differ");
  constexpr double eps = 1e-3;
  RangeMetrics m;
  double sse = 0.0;
  std::size_t d1 = 0, d2 = 0, d3 = 0;
  for (std::size_t i = 0; i < gt.pixel_count(); ++i) {
    if (!pred.mask()[i] || !gt.mask()[i]) continue;
    const double p = std::clamp(pred.distances()[i], eps, cap);
    const double g = std::clamp(gt.distances()[i], eps, cap);
    sse += (p - g) * (p - g);
    const double ratio = std::max(p / g, g / p);
    d1 += ratio < 1.25;
    d2 += ratio < 1.25 * 1.25;
    d3 += ratio < 1.25 * 1.25 * 1.25;
    ++m.count;
  }
  if (m.count == 0) throw std::invalid_argument("range_metrics: no pixel is valid in both images");
  const double n = static_cast<double>(m.count);
  m.rmse = std::sqrt(sse / n);
  m.delta1 = 100.0 * static_cast<double>(d1) / n;
  m.delta2 = 100.0 * static_cast<double>(d2) / n;
  m.delta3 = 100.0 * static_cast<double>(d3) / n;
  return m;
}

// ---------------------------------------------------------------------------
// Intensity metrics

std::vector<double> intensity_image(const RangeImage& img) {
  std::vector<double> out(img.pixel_count(), 0.0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (img.mask()[i]) out[i] = img.intensities()[i];
  }
  return out;
}

double psnr(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) throw std::invalid_argument("psnr: images must be nonempty and equal size");
  double sse = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sse += (a[i] - b[i]) * (a[i] - b[i]);
  const double mse = sse / static_cast<double>(a.size());
  if (mse < 1e-10) return 99.0;
  return std::min(99.0, 10.0 * std::log10(1.0 / mse));
}

double ssim(std::span<const double> a, std::span<const double> b, int rows, int cols) {
  if (rows <= 0 || cols <= 0 || a.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols) ||
      b.size() != a.size()) {
    throw std::invalid_argument("ssim: image size mismatch");
  }
  int win = std::min({11, rows, cols});
  if (win % 2 == 0) --win;
  const int half = win / 2;
  std::vector<double> g(static_cast<std::size_t>(win));
  double gsum = 0.0;
  for (int k = 0; k < win; ++k) {
    const double x = k - half;
    g[static_cast<std::size_t>(k)] = std::exp(-x * x / (2.0 * 1.5 * 1.5));
    gsum += g[static_cast<std::size_t>(k)];
  }
  for (double& v : g) v /= gsum;
  constexpr double c1 = 0.01 * 0.01;
  constexpr double c2 = 0.03 * 0.03;

  // Separable filtering of a, b, a^2, b^2, ab: horizontal pass then vertical.
  const int out_w = cols - win + 1;
  const int out_h = rows - win + 1;
  const auto at = [cols](int r, int c) { return static_cast<std::size_t>(r) * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c); };
  std::array<std::vector<double>, 5> horiz;
  for (auto& h : horiz) h.assign(static_cast<std::size_t>(rows) * static_cast<std::size_t>(out_w), 0.0);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < out_w; ++c) {
      double s[5] = {0, 0, 0, 0, 0};
      for (int k = 0; k < win; ++k) {
        const double wk = g[static_cast<std::size_t>(k)];
        const double x = a[at(r, c + k)], y = b[at(r, c + k)];
        s[0] += wk * x;
        s[1] += wk * y;
        s[2] += wk * x * x;
        s[3] += wk * y * y;
        s[4] += wk * x * y;
      }
      for (int q = 0; q < 5; ++q) horiz[static_cast<std::size_t>(q)][static_cast<std::size_t>(r) * static_cast<std::size_t>(out_w) + static_cast<std::size_t>(c)] = s[q];
    }
  }
  double total = 0.0;
  for (int r = 0; r < out_h; ++r) {
    for (int c = 0; c < out_w; ++c) {
      double s[5] = {0, 0, 0, 0, 0};
      for (int k = 0; k < win; ++k) {
        const double wk = g[static_cast<std::size_t>(k)];
        const std::size_t idx = static_cast<std::size_t>(r + k) * static_cast<std::size_t>(out_w) + static_cast<std::size_t>(c);
        for (int q = 0; q < 5; ++q) s[q] += wk * horiz[static_cast<std::size_t>(q)][idx];
      }
      const double mx = s[0], my = s[1];
      const double vx = s[2] - mx * mx, vy = s[3] - my * my, cxy = s[4] - mx * my;
      total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
  }
  return total / (static_cast<double>(out_h) * static_cast<double>(out_w));
}

IntensityMetrics intensity_metrics(const RangeImage& pred, const RangeImage& gt, bool valid_only) {
  if (!pred.spec().same_grid(gt.spec())) throw std::invalid_argument("intensity_metrics: image grids differ");
  const auto pi = intensity_image(pred);
  const auto gi = intensity_image(gt);
  IntensityMetrics m;
  if (valid_only) {
    std::vector<double> a, b;
    for (std::size_t i = 0; i < pi.size(); ++i) {
      if (pred.mask()[i] && gt.mask()[i]) {
        a.push_back(pi[i]);
        b.push_back(gi[i]);
      }
    }
    if (a.empty()) throw std::invalid_argument("intensity_metrics: no pixel is valid in both images");
    m.psnr = psnr(a, b);
  } else {
    m.psnr = psnr(pi, gi);
  }
  m.ssim = ssim(pi, gi, gt.rows(), gt.cols());
  return m;
}

// ---------------------------------------------------------------------------

std::string MetricsReport::to_text() const {
  std::string out;
  char line[128];
  const auto put = [&](const char* key, double v) {
    std::snprintf(line, sizeof line, "%s = %.6f\n", key, v);
    out += line;
  };
  put("chamfer", chamfer);
  put("fscore", fscore);
  put("emd", emd);
  put("np_ratio", np_ratio);
  put("rmse", rmse);
  put("delta1", delta1);
  put("delta2", delta2);
  put("delta3", delta3);
  put("psnr", psnr);
  put("ssim", ssim);
  put("n_pred_points", static_cast<double>(n_pred_points));
  put("n_gt_points", static_cast<double>(n_gt_points));
  return out;
}

MetricsReport evaluate(const RangeImage& pred, const RangeImage& gt, const EvalOptions& options) {
  if (!pred.spec().same_grid(gt.spec())) throw std::invalid_argument("evaluate: image grids differ");
  MetricsReport r;
  const auto pc = positions(range_image_to_cloud(pred));
  const auto gc = positions(range_image_to_cloud(gt));
  r.n_pred_points = pc.size();
  r.n_gt_points = gc.size();
  r.chamfer = chamfer(pc, gc, options.threads);
  r.fscore = fscore(pc, gc, options.tau, options.threads);
  auto e = emd(pc, gc, options.seed, options.emd_cap);
  r.emd = e.value;
  r.warnings = std::move(e.warnings);
  r.np_ratio = np_ratio(pc.size(), gc.size());
  const auto rm = range_metrics(pred, gt, options.cap);
  r.rmse = rm.rmse;
  r.delta1 = rm.delta1;
  r.delta2 = rm.delta2;
  r.delta3 = rm.delta3;
  r.n_depth_pixels = rm.count;
  const auto im = intensity_metrics(pred, gt, options.psnr_valid_only);
  r.psnr = im.psnr;
  r.ssim = im.ssim;
  return r;
}

}  // namespace lnerf
