#include "lidarnerf/baseline.hpp"

#include "lidarnerf/binary_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <tuple>

namespace lnerf {

namespace {

struct Candidate {
  std::size_t pixel;
  double distance;
  double intensity;
  std::size_t index;
};

// Projects the world cloud into the pose's sensor frame and groups the
// candidates per pixel, nearest first, ties by lower point index.
std::vector<Candidate> bucketed_projection(const PointCloud& world_cloud, const LidarSpec& spec, const Pose& pose) {
  const Pose to_sensor = pose.inverse();
  const Eigen::Matrix3d r = to_sensor.rotation();
  const Eigen::Vector3d t = to_sensor.origin();
  std::vector<Candidate> cands;
  cands.reserve(world_cloud.size());
  for (std::size_t k = 0; k < world_cloud.size(); ++k) {
    const auto& p = world_cloud.points[k];
    const auto px = point_to_pixel(spec, r * p.position + t);
    if (!px) continue;
    const int h = std::min(static_cast<int>(std::floor(px->h)), spec.H - 1);
    const int w = std::min(static_cast<int>(std::floor(px->w)), spec.W - 1);
    cands.push_back({static_cast<std::size_t>(h) * static_cast<std::size_t>(spec.W) + static_cast<std::size_t>(w),
                     px->distance, p.intensity, k});
  }
  std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    return std::tie(a.pixel, a.distance, a.index) < std::tie(b.pixel, b.distance, b.index);
  });
  return cands;
}

}  // namespace

RangeImage raycast_closest(const PointCloud& world_cloud, const LidarSpec& spec, const Pose& pose) {
  return raycast_averaged(world_cloud, spec, pose, 0.0);
}

RangeImage raycast_averaged(const PointCloud& world_cloud, const LidarSpec& spec, const Pose& pose,
                            double threshold) {
  if (!(threshold >= 0.0)) throw std::invalid_argument("raycast_averaged: threshold must be >= 0");
  RangeImage img(spec);
  const auto cands = bucketed_projection(world_cloud, spec, pose);
  for (std::size_t begin = 0; begin < cands.size();) {
    std::size_t end = begin;
    while (end < cands.size() && cands[end].pixel == cands[begin].pixel) ++end;
    const int h = static_cast<int>(cands[begin].pixel / static_cast<std::size_t>(spec.W));
    const int w = static_cast<int>(cands[begin].pixel % static_cast<std::size_t>(spec.W));
    const double d_min = cands[begin].distance;
    if (threshold == 0.0) {
      img.set(h, w, d_min, cands[begin].intensity);
    } else {
      const std::size_t cap = std::min(end, begin + kMaxBucket);
      double wsum = 0.0, dsum = 0.0, isum = 0.0;
      for (std::size_t k = begin; k < cap && cands[k].distance <= d_min + threshold; ++k) {
        const double wt = 1.0 / cands[k].distance;
        wsum += wt;
        dsum += wt * cands[k].distance;
        isum += wt * cands[k].intensity;
      }
      img.set(h, w, std::clamp(dsum / wsum, d_min, std::min(d_min + threshold, spec.max_range)), isum / wsum);
    }
    begin = end;
  }
  return img;
}

RaydropFeatures raydrop_features(const RangeImage& img, PixelConvention convention) {
  RaydropFeatures f;
  const double off = convention == PixelConvention::center ? 0.5 : 0.0;
  for (int h = 0; h < img.rows(); ++h) {
    for (int w = 0; w < img.cols(); ++w) {
      if (!img.valid(h, w)) continue;
      f.directions.push_back(pixel_to_direction(img.spec(), h + off, w + off));
      f.distance.push_back(img.distance(h, w));
      f.intensity.push_back(img.intensity(h, w));
      f.pixel.push_back(img.index(h, w));
    }
  }
  return f;
}

// ---------------------------------------------------------------------------

RaydropNet::RaydropNet(nn::Mlp mlp) : mlp_(std::move(mlp)) {
  if (mlp_.input_size() != kInputSize || mlp_.output_size() != 1) {
    throw std::invalid_argument("RaydropNet: network must map " + std::to_string(kInputSize) + " inputs to 1 output");
  }
}

RaydropNet RaydropNet::create(std::size_t hidden_layers, std::size_t width, nn::Rng& rng) {
  std::vector<std::size_t> dims{kInputSize};
  for (std::size_t l = 0; l < hidden_layers; ++l) dims.push_back(width);
  dims.push_back(1);
  return RaydropNet(nn::Mlp::create(std::move(dims), rng));
}

RaydropNet RaydropNet::constant(double logit) {
  nn::Rng rng(0);
  RaydropNet net = create(1, 4, rng);
  net.mlp_.set_output_layer_constant(logit);
  return net;
}

ad::Tensor RaydropNet::encode(const RaydropFeatures& f, std::size_t begin, std::size_t end, double max_range) {
  const std::size_t n = end - begin;
  std::vector<double> out(n * kInputSize);
  std::vector<double> dir(3 * n), dist(n), inten(n);
  for (std::size_t k = 0; k < n; ++k) {
    for (int j = 0; j < 3; ++j) dir[3 * k + static_cast<std::size_t>(j)] = f.directions[begin + k][j];
    dist[k] = f.distance[begin + k] / max_range;
    inten[k] = f.intensity[begin + k];
  }
  constexpr std::size_t d_off = nn::encoded_size(3, kDirectionExp);
  constexpr std::size_t i_off = d_off + nn::encoded_size(1, kDistanceExp);
  nn::positional_encode_rows(dir, 3, kDirectionExp, out.data(), kInputSize, 0);
  nn::positional_encode_rows(dist, 1, kDistanceExp, out.data(), kInputSize, d_off);
  nn::positional_encode_rows(inten, 1, kIntensityExp, out.data(), kInputSize, i_off);
  return ad::Tensor({n, kInputSize}, std::move(out));
}

std::vector<double> RaydropNet::predict(const RaydropFeatures& f, double max_range) const {
  std::vector<double> probs;
  probs.reserve(f.size());
  constexpr std::size_t chunk = 4096;
  for (std::size_t b = 0; b < f.size(); b += chunk) {
    const std::size_t e = std::min(f.size(), b + chunk);
    const ad::Tensor p = ad::sigmoid(mlp_.forward(encode(f, b, e, max_range)));
    probs.insert(probs.end(), p.values().begin(), p.values().end());
  }
  return probs;
}

void RaydropNet::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io::FormatError(io::FormatError::Kind::io, 0, "cannot write " + path.string());
  io::write_magic(out, "LNRD");
  mlp_.write(out);
}

RaydropNet RaydropNet::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io::FormatError(io::FormatError::Kind::io, 0, "cannot open " + path.string());
  io::expect_magic(in, "LNRD");
  return RaydropNet(nn::Mlp::read(in));
}

// ---------------------------------------------------------------------------

RaydropTraining train_raydrop_rows(const RaydropFeatures& features, const std::vector<double>& labels,
                                   double max_range, const RaydropHyper& hyper) {
  if (features.size() == 0) throw std::invalid_argument("train_raydrop: no populated pixels to learn from");
  if (labels.size() != features.size()) throw std::invalid_argument("train_raydrop: label count mismatch");
  nn::Rng rng(hyper.seed);
  RaydropTraining result;
  result.net = RaydropNet::create(hyper.hidden_layers, hyper.width, rng);
  result.rows = features.size();
  auto& params = result.net.mlp().params();
  ad::AdamState adam(params, ad::AdamHyper{hyper.lr});
  std::uniform_int_distribution<std::size_t> pick(0, features.size() - 1);
  const std::size_t batch = std::min(hyper.batch, features.size());
  RaydropFeatures sample;
  std::vector<double> target(batch);
  for (std::size_t it = 0; it < hyper.iterations; ++it) {
    sample = RaydropFeatures{};
    for (std::size_t k = 0; k < batch; ++k) {
      const std::size_t j = batch == features.size() ? k : pick(rng);
      sample.directions.push_back(features.directions[j]);
      sample.distance.push_back(features.distance[j]);
      sample.intensity.push_back(features.intensity[j]);
      sample.pixel.push_back(features.pixel[j]);
      target[k] = labels[j];
    }
    ad::Tape tape;
    const auto bound = tape.watch_all(params);
    const ad::Tensor x = RaydropNet::encode(sample, 0, batch, max_range);
    const ad::Tensor p = ad::sigmoid(nn::Mlp::forward(bound, x));
    const ad::Tensor loss = ad::mean(ad::square(ad::sub(p, ad::Tensor({batch, 1}, target))));
    const auto grads = tape.backward(loss);
    std::vector<ad::Tensor> g;
    for (const auto& b : bound) g.push_back(grads[b]);
    params = ad::adam_step(params, g, adam);
  }
  const auto probs = result.net.predict(features, max_range);
  double sse = 0.0;
  for (std::size_t k = 0; k < probs.size(); ++k) sse += (probs[k] - labels[k]) * (probs[k] - labels[k]);
  result.final_loss = sse / static_cast<double>(probs.size());
  return result;
}

RaydropTraining train_raydrop(const std::vector<std::pair<RangeImage, RangeImage>>& pairs, const RaydropHyper& hyper) {
  if (pairs.empty()) throw std::invalid_argument("train_raydrop: no image pairs");
  RaydropFeatures all;
  std::vector<double> labels;
  const double max_range = pairs.front().first.spec().max_range;
  for (const auto& [rendered, gt] : pairs) {
    if (!rendered.spec().same_grid(gt.spec())) throw std::invalid_argument("train_raydrop: rendered/gt grids differ");
    const auto f = raydrop_features(rendered);
    for (std::size_t k = 0; k < f.size(); ++k) {
      all.directions.push_back(f.directions[k]);
      all.distance.push_back(f.distance[k]);
      all.intensity.push_back(f.intensity[k]);
      all.pixel.push_back(f.pixel[k]);
      labels.push_back(gt.mask()[f.pixel[k]] ? 1.0 : 0.0);
    }
  }
  return train_raydrop_rows(all, labels, max_range, hyper);
}

RangeImage apply_raydrop(const RangeImage& img, const std::vector<double>& keep_probability, double threshold) {
  RangeImage out = img;
  std::size_t k = 0;
  for (int h = 0; h < img.rows(); ++h) {
    for (int w = 0; w < img.cols(); ++w) {
      if (!img.valid(h, w)) continue;
      if (k >= keep_probability.size()) throw std::invalid_argument("apply_raydrop: too few probabilities");
      if (keep_probability[k] < threshold) out.clear(h, w);
      ++k;
    }
  }
  if (k != keep_probability.size()) throw std::invalid_argument("apply_raydrop: probability count mismatch");
  return out;
}

RangeImage apply_raydrop(const RangeImage& img, const RaydropNet& net, double threshold) {
  return apply_raydrop(img, net.predict(raydrop_features(img), img.spec().max_range), threshold);
}

}  // namespace lnerf
