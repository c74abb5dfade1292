#include "lidarnerf/neural_field.hpp"
#include "lidarnerf/synthetic.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

using namespace lnerf;
namespace ad = lnerf::ad;

namespace {

FieldConfig tiny_config() {
  FieldConfig c;
  c.pos_max_exp = 3;
  c.dir_max_exp = 1;
  c.layers = 2;
  c.width = 16;
  c.feature_dim = 4;
  c.head_layers = 1;
  c.head_width = 8;
  c.n_coarse = 8;
  c.n_fine = 8;
  c.n_guided = 4;
  c.batch = 64;
  c.iterations = 10;
  c.warmup = 2;
  c.threads = 1;
  c.fast_matmul = false;
  return c;
}

NeuralField tiny_field(std::uint64_t seed = 1) {
  nn::Rng rng(seed);
  NormalizationTransform tf;
  tf.radius = 1.0;
  return NeuralField::create(tiny_config(), tf, rng);
}

Ray x_ray() { return Ray{Eigen::Vector3d::Zero(), Eigen::Vector3d::UnitX()}; }

// Independent scalar evaluation of the rendering quadrature.
struct Quadrature {
  std::vector<double> w, T;
  double d = 0, i = 0, p = 0;
};

Quadrature quadrature(const std::vector<double>& t, const std::vector<double>& delta, const std::vector<double>& sigma,
                      const std::vector<double>& inten, const std::vector<double>& drop) {
  Quadrature q;
  double acc = 0.0;
  for (std::size_t k = 0; k < t.size(); ++k) {
    const double T = std::exp(-acc);
    q.T.push_back(T);
    const double w = T * (1.0 - std::exp(-sigma[k] * delta[k]));
    q.w.push_back(w);
    q.d += w * t[k];
    q.i += w * inten[k];
    q.p += w * drop[k];
    acc += sigma[k] * delta[k];
  }
  q.T.push_back(std::exp(-acc));
  return q;
}

}  // namespace

// ---------------------------------------------------------------------------
// Encoding and field evaluation

TEST_CASE("positional encoding examples") {
  const auto e0 = nn::positional_encode(std::vector<double>{0.0}, 1);
  REQUIRE(e0.size() == 5);
  const std::vector<double> want0 = {0, 0, 0, 1, 1};
  for (std::size_t k = 0; k < 5; ++k) CHECK(e0[k] == want0[k]);
  const auto e1 = nn::positional_encode(std::vector<double>{1.0}, 0);
  CHECK(std::abs(e1[1]) < 1e-15);
  CHECK(e1[2] == -1.0);
  CHECK(nn::encoded_size(3, 15) == 99);
  CHECK(nn::positional_encode(std::vector<double>{0.1, 0.2, 0.3}, 15).size() == 99);
  CHECK_THROWS(nn::positional_encode(std::vector<double>{0.0}, -1));
}

TEST_CASE("positional encoding block layout") {
  const std::vector<double> v = {0.3, -0.7};
  const int K = 2;
  const auto e = nn::positional_encode(v, K);
  REQUIRE(e.size() == 2 * (2 * (K + 1) + 1));
  for (std::size_t j = 0; j < 2; ++j) {
    CHECK(e[j] == v[j]);
    for (int k = 0; k <= K; ++k) {
      const double a = std::ldexp(1.0, k) * std::numbers::pi * v[j];
      CHECK(e[2 + 2 * k + j] == doctest::Approx(std::sin(a)).epsilon(1e-15));
      CHECK(e[2 + 2 * (K + 1) + 2 * k + j] == doctest::Approx(std::cos(a)).epsilon(1e-15));
    }
  }
}

TEST_CASE("field dimensions follow the config") {
  FieldConfig c = tiny_config();
  nn::Rng rng(2);
  const NeuralField f = NeuralField::create(c, NormalizationTransform{}, rng);
  CHECK(f.density_net().dims() == std::vector<std::size_t>{nn::encoded_size(3, 3), 16, 16, 5});
  CHECK(f.head_net().dims() == std::vector<std::size_t>{4 + nn::encoded_size(3, 1), 8, 2});
  const FieldConfig def;
  CHECK(def.pos_max_exp == 15);
  CHECK(def.dir_max_exp == 4);
  CHECK(def.layers == 8);
  CHECK(def.width == 256);
  CHECK(def.n_coarse == 64);
  CHECK(def.n_fine == 128);
  CHECK(def.n_guided == 4);
  CHECK(def.lambda_intensity == 1.0);
  CHECK(def.lambda_raydrop == 1.0);
  CHECK(def.lr == 5e-4);
  CHECK(def.batch == 2048);
  CHECK(def.warmup == 1000);
  CHECK(def.guided_std == 0.01);
}

TEST_CASE("zeroed output layers give the activation midpoints") {
  NeuralField f = tiny_field();
  f.zero_output_layers();
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int k = 0; k < 20; ++k) {
    const Eigen::Vector3d x(u(rng), u(rng), u(rng));
    const FieldSample s = f.eval(x, Eigen::Vector3d(u(rng), u(rng), u(rng)).normalized());
    CHECK(s.sigma == doctest::Approx(std::log(2.0)).epsilon(1e-15));
    CHECK(s.intensity == 0.5);
    CHECK(s.raydrop == 0.5);
  }
}

TEST_CASE("density does not depend on the view direction") {
  const NeuralField f = tiny_field(4);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-1, 1);
  const Eigen::Vector3d x(0.1, -0.4, 0.3);
  const double sigma = f.eval(x, Eigen::Vector3d::UnitX()).sigma;
  bool attr_changed = false;
  for (int k = 0; k < 20; ++k) {
    const Eigen::Vector3d theta = Eigen::Vector3d(u(rng), u(rng), u(rng)).normalized();
    const FieldSample s = f.eval(x, theta);
    CHECK(s.sigma == sigma);
    CHECK(s.sigma >= 0.0);
    CHECK(s.intensity >= 0.0);
    CHECK(s.intensity <= 1.0);
    CHECK(s.raydrop >= 0.0);
    CHECK(s.raydrop <= 1.0);
    attr_changed |= s.intensity != f.eval(x, Eigen::Vector3d::UnitX()).intensity;
  }
  CHECK(attr_changed);
}

TEST_CASE("density gradient w.r.t. stage-1 parameters") {
  const NeuralField f = tiny_field(5);
  const double pos[3] = {0.2, -0.1, 0.5};
  const double dir[3] = {0, 0, 1};
  const auto base = f.parameters();
  ad::Tape tape;
  const auto watched = tape.watch_all(base);
  const auto grads = tape.backward(ad::sum(f.forward(watched, pos, dir).sigma));
  double worst = 0.0;
  for (std::size_t k = 0; k < f.density_param_count(); ++k) {
    const auto fn = [&](const std::vector<double>& v) {
      auto p = base;
      p[k] = ad::Tensor(p[k].shape(), v);
      return f.forward(p, pos, dir).sigma[0];
    };
    const auto x = base[k].values();
    const auto num = testutil::numeric_gradient(fn, std::vector<double>(x.begin(), x.end()));
    worst = std::max(worst, testutil::max_rel_error(grads[watched[k]].values(), num));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("field file round trip") {
  testutil::TempDir dir("field");
  NeuralField f = tiny_field(6);
  f.config().seed = 99;
  f.config().sampling = SamplingMode::hierarchical;
  NormalizationTransform tf;
  tf.mode = NormalizationMode::contract;
  tf.center = {1.0 / 3.0, -2, 0.1};
  tf.radius = 0.8;
  f = NeuralField(f.config(), tf, f.density_net(), f.head_net());
  f.save(dir / "f.lnnf");
  const NeuralField g = NeuralField::load(dir / "f.lnnf");
  CHECK(g.config().to_text() == f.config().to_text());
  CHECK(g.transform().center == tf.center);
  CHECK(g.transform().mode == NormalizationMode::contract);
  CHECK(g.transform().radius == 0.8);
  const auto a = f.parameters(), b = g.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    CHECK(std::equal(a[k].values().begin(), a[k].values().end(), b[k].values().begin()));
  }
  std::ofstream(dir / "bad.lnnf") << "NOPE";
  CHECK_THROWS_AS(NeuralField::load(dir / "bad.lnnf"), io::FormatError);
}

TEST_CASE("config text round trip and validation") {
  FieldConfig c = tiny_config();
  c.lr = 1.2345678901234e-3;
  c.normalization.mode = NormalizationMode::contract;
  c.time_budget_s = 12.5;
  const FieldConfig back = FieldConfig::parse(c.to_text());
  CHECK(back.to_text() == c.to_text());
  CHECK(back.lr == c.lr);
  CHECK_THROWS(FieldConfig::parse("nonsense = 1\n"));
  CHECK_THROWS(FieldConfig::parse("layers = abc\n"));
  const FieldConfig partial = FieldConfig::parse("width = 32\n", c);
  CHECK(partial.width == 32);
  CHECK(partial.layers == c.layers);
  FieldConfig bad = c;
  bad.n_coarse = 0;
  CHECK_THROWS(bad.validate());
  bad = c;
  bad.near = 2.0;
  bad.far = 1.0;
  CHECK_THROWS(bad.validate());
  bad = c;
  bad.lambda_raydrop = -1.0;
  CHECK_THROWS(bad.validate());
}

// ---------------------------------------------------------------------------
// Volume rendering

TEST_CASE("two-sample closed form") {
  const double delta2 = 1.0;
  const RaySamples s = make_samples(x_ray(), {1.0, 2.0}, 3.0);
  CHECK(s.delta == std::vector<double>{1.0, 1.0});
  const VolumeRender r = volume_render(s, std::vector<double>{0.0, std::log(2.0) / delta2},
                                       std::vector<double>{1.0, 2.0}, std::vector<double>{0.0, 1.0});
  CHECK(r.weights[0] == 0.0);
  CHECK(r.weights[1] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(r.distance == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(r.intensity == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(r.raydrop == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("empty space renders nothing") {
  const RaySamples s = sample_uniform(x_ray(), 0.0, 4.0, 6, nullptr);
  const std::vector<double> zeros(6, 0.0), ones(6, 1.0);
  const VolumeRender r = volume_render(s, zeros, ones, ones);
  for (double w : r.weights) CHECK(w == 0.0);
  CHECK(r.distance == 0.0);
  CHECK(r.intensity == 0.0);
  CHECK(r.raydrop == 0.0);
  CHECK(r.transmittance.back() == 1.0);
}

TEST_CASE("weights telescope to one minus the final transmittance") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0, 1);
  std::exponential_distribution<double> ex(0.5);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + trial % 40;
    const RaySamples s = sample_uniform(x_ray(), 0.1, 5.0, n, nullptr);
    std::vector<double> sigma(n), a(n), b(n);
    for (std::size_t k = 0; k < n; ++k) {
      sigma[k] = trial % 3 == 0 ? 50.0 * ex(rng) : ex(rng);
      a[k] = u(rng);
      b[k] = u(rng);
    }
    const VolumeRender r = volume_render(s, sigma, a, b);
    const double wsum = std::accumulate(r.weights.begin(), r.weights.end(), 0.0);
    CHECK(std::abs(wsum + r.transmittance.back() - 1.0) < 1e-9);
    CHECK(wsum >= 0.0);
    CHECK(wsum <= 1.0 + 1e-12);
    CHECK(r.distance <= s.t.back() + 1e-12);
    if (wsum > 0) {
      CHECK(r.distance / wsum >= s.t.front() - 1e-12);
      CHECK(r.distance / wsum <= s.t.back() + 1e-12);
    }
    const Quadrature q = quadrature(s.t, s.delta, sigma, a, b);
    CHECK(r.distance == doctest::Approx(q.d).epsilon(1e-12));
    CHECK(r.intensity == doctest::Approx(q.i).epsilon(1e-12));
    CHECK(r.raydrop == doctest::Approx(q.p).epsilon(1e-12));
  }
}

TEST_CASE("raising the first density lowers every later transmittance") {
  const RaySamples s = sample_uniform(x_ray(), 0.0, 2.0, 8, nullptr);
  std::vector<double> sigma(8, 0.3);
  const std::vector<double> ones(8, 1.0);
  std::vector<double> prev = volume_render(s, sigma, ones, ones).transmittance;
  for (double s0 : {0.5, 1.0, 4.0, 20.0}) {
    sigma[0] = s0;
    const auto T = volume_render(s, sigma, ones, ones).transmittance;
    CHECK(T[0] == 1.0);
    for (std::size_t k = 1; k < T.size(); ++k) CHECK(T[k] < prev[k]);
    prev = T;
  }
}

TEST_CASE("tensor rendering matches the scalar quadrature") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0, 2);
  const std::size_t R = 3, S = 5;
  std::vector<double> t, delta, sig(R * S), a(R * S), b(R * S);
  nn::Rng jitter(8);
  for (std::size_t r = 0; r < R; ++r) {
    const RaySamples s = sample_uniform(x_ray(), 0.2, 3.0, S, &jitter);
    t.insert(t.end(), s.t.begin(), s.t.end());
    delta.insert(delta.end(), s.delta.begin(), s.delta.end());
  }
  for (std::size_t k = 0; k < R * S; ++k) {
    sig[k] = u(rng);
    a[k] = u(rng) / 2;
    b[k] = u(rng) / 2;
  }
  const RenderTensors rt = volume_render_tensors(ad::Tensor({R, S}, sig), ad::Tensor({R, S}, a),
                                                 ad::Tensor({R, S}, b), t, delta);
  for (std::size_t r = 0; r < R; ++r) {
    const auto sl = [&](const std::vector<double>& v) {
      return std::vector<double>(v.begin() + static_cast<long>(r * S), v.begin() + static_cast<long>((r + 1) * S));
    };
    const Quadrature q = quadrature(sl(t), sl(delta), sl(sig), sl(a), sl(b));
    CHECK(rt.distance[r] == doctest::Approx(q.d).epsilon(1e-13));
    CHECK(rt.intensity[r] == doctest::Approx(q.i).epsilon(1e-13));
    CHECK(rt.raydrop[r] == doctest::Approx(q.p).epsilon(1e-13));
  }
}

TEST_CASE("full render-loss pipeline matches central differences") {
  const NeuralField f = tiny_field(9);
  const FieldConfig& c = f.config();
  // Two rays, four samples each.
  const std::vector<Ray> rays = {{{0, 0, 0}, Eigen::Vector3d(1, 0.2, -0.1).normalized()},
                                 {{0.1, 0, 0}, Eigen::Vector3d(-0.3, 1, 0.2).normalized()}};
  std::vector<double> pos, dir, t, delta;
  for (const auto& ray : rays) {
    const RaySamples s = sample_uniform(ray, 0.1, 1.2, 4, nullptr);
    for (std::size_t k = 0; k < 4; ++k) {
      const Eigen::Vector3d x = ray.at(s.t[k]);
      pos.insert(pos.end(), {x.x(), x.y(), x.z()});
      dir.insert(dir.end(), {ray.direction.x(), ray.direction.y(), ray.direction.z()});
    }
    t.insert(t.end(), s.t.begin(), s.t.end());
    delta.insert(delta.end(), s.delta.begin(), s.delta.end());
  }
  const std::vector<double> gd = {0.6, 0.0}, gi = {0.3, 0.0}, gp = {1.0, 0.0};
  const std::vector<std::uint8_t> valid = {1, 0};
  const auto loss_of = [&](std::span<const ad::Tensor> params) {
    const auto out = f.forward(params, pos, dir);
    const RenderTensors r = volume_render_tensors(ad::reshape(out.sigma, {2, 4}), ad::reshape(out.intensity, {2, 4}),
                                                  ad::reshape(out.raydrop, {2, 4}), t, delta);
    return loss_tensors(r.distance, r.intensity, r.raydrop, gd, gi, gp, valid, c.lambda_intensity,
                        c.lambda_raydrop, 2.0)
        .total;
  };
  const auto base = f.parameters();
  ad::Tape tape;
  const auto watched = tape.watch_all(base);
  const auto grads = tape.backward(loss_of(watched));
  double worst = 0.0;
  for (std::size_t k = 0; k < base.size(); ++k) {
    const auto fn = [&](const std::vector<double>& v) {
      auto p = base;
      p[k] = ad::Tensor(p[k].shape(), v);
      return loss_of(p).item();
    };
    const auto x = base[k].values();
    const auto num = testutil::numeric_gradient(fn, std::vector<double>(x.begin(), x.end()));
    worst = std::max(worst, testutil::max_rel_error(grads[watched[k]].values(), num));
  }
  CHECK(worst < 1e-3);
}

// ---------------------------------------------------------------------------
// Sampling

TEST_CASE("uniform sampling") {
  const RaySamples s = sample_uniform(x_ray(), 0.0, 4.0, 4, nullptr);
  CHECK(s.t == std::vector<double>{0.5, 1.5, 2.5, 3.5});
  CHECK(s.delta.back() == doctest::Approx(0.5));

  nn::Rng rng(10);
  const std::size_t N = 8;
  std::vector<std::size_t> occupancy(N, 0);
  for (int draw = 0; draw < 10000; ++draw) {
    const RaySamples r = sample_uniform(x_ray(), 1.0, 3.0, N, &rng);
    REQUIRE(r.size() == N);
    for (std::size_t k = 0; k < N; ++k) {
      CHECK(r.t[k] >= 1.0);
      CHECK(r.t[k] <= 3.0);
      const auto bin = static_cast<std::size_t>((r.t[k] - 1.0) / (2.0 / N));
      if (bin == k) ++occupancy[k];
      if (k > 0) CHECK(r.t[k] > r.t[k - 1]);
    }
  }
  for (auto c : occupancy) CHECK(c == 10000);
}

TEST_CASE("distance-guided sampling") {
  nn::Rng rng(11);
  const RaySamples tight = sample_distance_guided(x_ray(), 1.7, 4, 1e-12, 0.1, 3.0, &rng);
  for (double t : tight.t) CHECK(std::abs(t - 1.7) < 1e-9);
  const RaySamples det = sample_distance_guided(x_ray(), 1.7, 4, 0.0, 0.1, 3.0, nullptr);
  for (double t : det.t) CHECK(t == 1.7);

  const RaySamples edge = sample_distance_guided(x_ray(), 2.99, 1000, 0.5, 0.1, 3.0, &rng);
  for (double t : edge.t) {
    CHECK(t <= 3.0);
    CHECK(t >= 0.1);
  }

  const double std_dev = 0.01;
  const RaySamples many = sample_distance_guided(x_ray(), 1.0, 10000, std_dev, 0.1, 3.0, &rng);
  const double mean = std::accumulate(many.t.begin(), many.t.end(), 0.0) / 10000.0;
  CHECK(std::abs(mean - 1.0) < 3 * std_dev / std::sqrt(10000.0));

  // Deterministic mode places the draws at symmetric Normal quantiles.
  const RaySamples q = sample_distance_guided(x_ray(), 1.0, 4, 0.1, 0.1, 3.0, nullptr);
  CHECK(q.t[0] + q.t[3] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(q.t[3] - 1.0 == doctest::Approx(0.1 * 1.1503493803760079).epsilon(1e-9));
}

TEST_CASE("hierarchical resampling") {
  nn::Rng rng(12);
  const RaySamples coarse = sample_uniform(x_ray(), 0.0, 4.0, 16, nullptr);
  std::vector<double> one_hot(16, 0.0);
  one_hot[5] = 1.0;
  const RaySamples fine = hierarchical_resample(one_hot, coarse.t, 64, 0.0, 4.0, coarse.ray, &rng);
  for (double t : fine.t) {
    CHECK(t >= 1.25);
    CHECK(t <= 1.5);
  }

  // Flat weights: the mean chi-square over 20 independent batches (15 dof)
  // concentrates around 15 with a standard error of about 1.2.
  const std::vector<double> flat(16, 1.0 / 16);
  double chi2_sum = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const RaySamples u = hierarchical_resample(flat, coarse.t, 10000, 0.0, 4.0, coarse.ray, &rng);
    std::vector<double> counts(16, 0.0);
    for (double t : u.t) counts[std::min<std::size_t>(15, static_cast<std::size_t>(t / 0.25))] += 1;
    for (double c : counts) chi2_sum += (c - 625.0) * (c - 625.0) / 625.0;
  }
  CHECK(chi2_sum / 20 < 20.0);
  CHECK(chi2_sum / 20 > 10.0);

  const RaySamples fallback = hierarchical_resample(std::vector<double>(16, 0.0), coarse.t, 8, 0.0, 4.0, coarse.ray,
                                                    nullptr);
  CHECK(fallback.t == sample_uniform(coarse.ray, 0.0, 4.0, 8, nullptr).t);
  CHECK_THROWS(hierarchical_resample(std::vector<double>(3, 1.0), coarse.t, 8, 0.0, 4.0, coarse.ray, nullptr));
}

TEST_CASE("merged samples are sorted with the NeRF spacing convention") {
  const RaySamples a = sample_uniform(x_ray(), 0.0, 4.0, 4, nullptr);
  const RaySamples b = sample_distance_guided(x_ray(), 2.2, 3, 0.1, 0.0, 4.0, nullptr);
  const RaySamples m = merge_samples(a, b);
  REQUIRE(m.size() == 7);
  for (std::size_t k = 1; k < m.size(); ++k) CHECK(m.t[k] >= m.t[k - 1]);
  for (std::size_t k = 0; k + 1 < m.size(); ++k) CHECK(m.delta[k] == doctest::Approx(m.t[k + 1] - m.t[k]));
  CHECK(m.delta.back() == doctest::Approx(4.0 - m.t.back()));
}

// ---------------------------------------------------------------------------
// Loss

TEST_CASE("loss examples") {
  const std::vector<double> d = {1, 2, 3}, i = {0.1, 0.2, 0.3}, p = {1, 1, 0};
  const std::vector<std::uint8_t> valid = {1, 1, 0};
  CHECK(compute_loss(d, i, p, d, i, p, valid, 1, 1).total == 0.0);
  const std::vector<double> d1 = {2, 3, 4};
  const std::vector<std::uint8_t> all = {1, 1, 1};
  CHECK(compute_loss(d1, i, p, d, i, p, all, 0, 0).total == 1.0);
  // Dropped rays contribute to the ray-drop term only.
  const std::vector<double> p_off = {1, 1, 0.5};
  const LossTerms masked = compute_loss(d1, i, p_off, d, i, p, valid, 1, 2);
  CHECK(masked.distance == doctest::Approx(2.0 / 3));
  CHECK(masked.raydrop == doctest::Approx(0.25 / 3));
  CHECK(masked.total == doctest::Approx(2.0 / 3 + 2 * 0.25 / 3));
  CHECK_THROWS(compute_loss({}, {}, {}, {}, {}, {}, {}, 1, 1));
}

TEST_CASE("loss gradient w.r.t. distance is 2(D_hat - D)/B") {
  const std::vector<double> gd = {1, 2, 3, 4}, gi(4, 0.0), gp(4, 1.0);
  const std::vector<std::uint8_t> valid(4, 1);
  ad::Tape tape;
  const ad::Tensor pd = tape.watch(ad::Tensor({4, 1}, {1.5, 1.0, 3.25, 6.0}));
  const ad::Tensor pi = ad::Tensor::zeros({4, 1}), pp = ad::Tensor::filled({4, 1}, 1.0);
  const auto lt = loss_tensors(pd, pi, pp, gd, gi, gp, valid, 1, 1, 4.0);
  const auto g = tape.backward(lt.total);
  for (std::size_t k = 0; k < 4; ++k) CHECK(g[pd][k] == doctest::Approx(2 * (pd[k] - gd[k]) / 4).epsilon(1e-15));
  const LossTerms scalar = compute_loss(pd.values(), pi.values(), pp.values(), gd, gi, gp, valid, 1, 1);
  CHECK(lt.total.item() == doctest::Approx(scalar.total).epsilon(1e-15));
}

// ---------------------------------------------------------------------------
// Schedule, training and rendering

TEST_CASE("learning-rate schedule") {
  FieldConfig c;
  c.iterations = 20000;
  c.warmup = 1000;
  c.lr = 5e-4;
  CHECK(learning_rate(c, 0) < learning_rate(c, 1000));
  CHECK(learning_rate(c, 1000) == c.lr);
  for (std::size_t it = 1; it <= 1000; ++it) CHECK(learning_rate(c, it) > learning_rate(c, it - 1));
  for (std::size_t it = 1001; it < 20000; it += 97) CHECK(learning_rate(c, it) < learning_rate(c, it - 1));
  CHECK(learning_rate(c, 20000) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(learning_rate(c, 10500) == doctest::Approx(2.5e-4));
}

namespace {

// Sensor 1.5 above an infinite ground plane; upper beams are dropped.
Scene plane_scene() {
  LidarSpec spec;
  spec.H = 16;
  spec.W = 64;
  spec.f_up = 0.0;
  spec.f_down = deg_to_rad(30.0);
  spec.max_range = 20.0;
  RangeImage img(spec);
  for (int h = 0; h < spec.H; ++h) {
    for (int w = 0; w < spec.W; ++w) {
      const Eigen::Vector3d d = pixel_to_direction(spec, h + 0.5, w + 0.5);
      const double t = -1.5 / d.z();
      const Eigen::Vector3d p = t * d;
      if (t <= spec.max_range) img.set(h, w, t, std::fmod(std::floor(p.x()) + 100, 2) == 0 ? 0.25 : 0.75);
    }
  }
  Scene scene;
  scene.spec = spec;
  Frame f;
  f.cloud = range_image_to_cloud(img);
  scene.frames.push_back(f);
  return scene;
}

}  // namespace

TEST_CASE("training on a plane reduces the distance loss") {
  const Scene scene = plane_scene();
  FieldConfig c;
  c.layers = 2;
  c.width = 64;
  c.pos_max_exp = 6;
  c.feature_dim = 8;
  c.head_width = 32;
  c.n_coarse = 16;
  c.n_guided = 4;
  c.batch = 128;
  c.iterations = 2000;
  c.warmup = 100;
  c.lr = 5e-3;
  c.threads = 1;
  TrainHooks hooks;
  hooks.log_every = 1;
  const TrainResult r = train(scene, c, hooks);
  REQUIRE(r.log.records.size() == 2000);
  CHECK(r.log.iterations_run == 2000);
  CHECK(r.log.stop_reason == "completed");
  const auto mean_distance = [&](std::size_t b, std::size_t e) {
    double s = 0.0;
    for (std::size_t k = b; k < e; ++k) s += r.log.records[k].loss.distance;
    return s / static_cast<double>(e - b);
  };
  CHECK(mean_distance(1950, 2000) < 0.1 * mean_distance(0, 20));
  CHECK(r.log.records[0].lr < r.log.records[100].lr);
}

TEST_CASE("training is deterministic for a fixed seed") {
  const Scene scene = plane_scene();
  FieldConfig c = tiny_config();
  c.iterations = 15;
  c.seed = 5;
  c.threads = 2;
  TrainHooks hooks;
  hooks.log_every = 1;
  const TrainResult a = train(scene, c, hooks);
  c.threads = 1;
  const TrainResult b = train(scene, c, hooks);
  REQUIRE(a.log.records.size() == b.log.records.size());
  for (std::size_t k = 0; k < a.log.records.size(); ++k) CHECK(a.log.records[k].loss.total == b.log.records[k].loss.total);
  const auto pa = a.field.parameters(), pb = b.field.parameters();
  for (std::size_t k = 0; k < pa.size(); ++k) {
    CHECK(std::equal(pa[k].values().begin(), pa[k].values().end(), pb[k].values().begin()));
  }
  c.seed = 6;
  const TrainResult other = train(scene, c, hooks);
  CHECK(other.log.records.back().loss.total != a.log.records.back().loss.total);
}

TEST_CASE("hooks can stop training and the log serializes") {
  const Scene scene = plane_scene();
  FieldConfig c = tiny_config();
  c.iterations = 50;
  TrainHooks hooks;
  hooks.every = 5;
  std::size_t calls = 0;
  hooks.on_progress = [&](const TrainProgress& p, const NeuralField&) {
    ++calls;
    return p.iteration < 10;
  };
  const TrainResult r = train(scene, c, hooks);
  CHECK(calls == 2);
  CHECK(r.log.iterations_run == 10);
  CHECK(r.log.stop_reason == "stopped by hook");
  const std::string csv = r.log.to_csv();
  CHECK(csv.rfind("iteration,", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 11);
}

TEST_CASE("eval frames are excluded from the ray pool") {
  Scene scene = plane_scene();
  scene.frames.push_back(scene.frames[0]);
  scene.frames[1].split = Split::eval;
  const NormalizationTransform tf = fit_normalization(scene, NormalizationParams{});
  const RayPool pool = build_ray_pool(scene, tf);
  CHECK(pool.size() == static_cast<std::size_t>(scene.spec.H * scene.spec.W));
  std::size_t valid = 0;
  for (auto v : pool.valid) valid += v;
  CHECK(valid == scene.frames[0].cloud.size());
}

TEST_CASE("render_view de-normalizes the rendered distance") {
  const Scene scene = plane_scene();
  FieldConfig c = tiny_config();
  nn::Rng rng(13);
  const NormalizationTransform tf = fit_normalization(scene, c.normalization);
  const NeuralField f = NeuralField::create(c, tf, rng);
  RangeImage prior(scene.spec);
  prior.set(10, 7, 4.0, 0.5);
  RenderOptions opts;
  opts.threshold = 0.0;
  const FieldRender out = render_view(f, scene.spec, Pose(), &prior, opts);

  // Recompute the guided pixel by hand.
  const Pose rp = tf.to_ray_space(Pose());
  const Ray ray = ray_for_pixel(scene.spec, rp, 10.5, 7.5);
  const double far = f.far_plane();
  const RaySamples coarse = sample_uniform(ray, c.near, far, c.n_coarse, nullptr);
  const RaySamples s = merge_samples(
      coarse, sample_distance_guided(ray, std::clamp(4.0 * tf.scale, c.near, far), c.n_guided, c.guided_std, c.near,
                                     far, nullptr));
  std::vector<double> sig, in, dr;
  for (double t : s.t) {
    const FieldSample fs = f.eval(tf.field_input(ray.at(t)), ray.direction);
    sig.push_back(fs.sigma);
    in.push_back(fs.intensity);
    dr.push_back(fs.raydrop);
  }
  const VolumeRender vr = volume_render(s, sig, in, dr);
  const std::size_t idx = prior.index(10, 7);
  CHECK(out.distance[idx] == doctest::Approx(vr.distance / tf.scale).epsilon(1e-12));
  CHECK(out.raydrop[idx] == doctest::Approx(vr.raydrop).epsilon(1e-12));

  // Threshold 0 drops nothing that has a positive in-range distance.
  for (std::size_t i = 0; i < out.distance.size(); ++i) {
    if (out.distance[i] > 0 && out.distance[i] <= scene.spec.max_range) CHECK(out.image.mask()[i]);
  }
  opts.threshold = 1.01;
  CHECK(render_view(f, scene.spec, Pose(), &prior, opts).image.valid_count() == 0);
}

TEST_CASE("deterministic rendering is reproducible and thread independent") {
  const Scene scene = plane_scene();
  FieldConfig c = tiny_config();
  nn::Rng rng(14);
  const NeuralField f = NeuralField::create(c, fit_normalization(scene, c.normalization), rng);
  RenderOptions a;
  a.threads = 1;
  a.chunk_rays = 37;
  RenderOptions b = a;
  b.threads = 3;
  b.chunk_rays = 37;
  const FieldRender ra = render_view(f, scene.spec, Pose(), nullptr, a);
  const FieldRender rb = render_view(f, scene.spec, Pose(), nullptr, b);
  CHECK(ra.image == rb.image);
  CHECK(ra.distance == rb.distance);
  RenderOptions st = a;
  st.deterministic = false;
  st.seed = 3;
  CHECK(render_view(f, scene.spec, Pose(), nullptr, st).distance == render_view(f, scene.spec, Pose(), nullptr, st).distance);
}
