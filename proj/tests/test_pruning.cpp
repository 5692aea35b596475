#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "spafl/pruning.hpp"
#include "test_util.hpp"

using namespace spafl;
using Catch::Approx;

namespace {

Thresholds single_layer(std::vector<double> v) {
  Thresholds t;
  t.layers.push_back(std::move(v));
  return t;
}

}  // namespace

TEST_CASE("row_mean_abs") {
  CHECK(row_mean_abs(Tensor({1, 2}, std::vector<double>{0.2, -0.4}))[0] == Approx(0.3));
  CHECK(row_mean_abs(Tensor({1, 3}, 0.0))[0] == 0.0);
  CHECK(row_mean_abs(Tensor({1, 4}, std::vector<double>{1, -1, 1, -1}))[0] == 1.0);
  CHECK_THROWS_AS(row_mean_abs(Tensor({3})), ConfigError);
}

TEST_CASE("generate_mask follows the unit step with keep-at-equality") {
  std::vector<double> mu{0.3, 0.1}, tau{0.2, 0.2};
  auto m = generate_mask(mu, tau, 5);
  CHECK(m.row_active(0));
  CHECK_FALSE(m.row_active(1));
  CHECK(m.n_in() == 5);

  std::vector<double> eq{0.25};
  CHECK(generate_mask(eq, eq, 1).row_active(0));

  std::vector<double> zero_tau{0.0, 0.0};
  CHECK(generate_mask(mu, zero_tau, 2).active_rows() == 2);

  std::vector<double> ones{1.0, 1.0};
  CHECK(generate_mask(mu, ones, 2).active_rows() == 0);

  std::vector<double> short_tau{0.1};
  CHECK_THROWS_AS(generate_mask(mu, short_tau, 2), ConfigError);
}

TEST_CASE("property: generated masks are row-constant") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 0.3);
  for (int trial = 0; trial < 50; ++trial) {
    auto arch = testutil::random_arch(rng, trial);
    auto params = init_params(arch, rng);
    auto tau = Thresholds::zeros(arch);
    for (auto& l : tau.layers) {
      for (double& t : l) t = u(rng);
    }
    auto mask = generate_masks(params, tau);
    for (const auto& lm : mask.layers) {
      const Tensor dense = lm.expand();
      for (std::size_t i = 0; i < lm.n_out(); ++i) {
        const auto row = dense.row(i);
        for (double v : row) REQUIRE(v == row[0]);
      }
    }
  }
}

TEST_CASE("apply_mask zeroes exactly the pruned rows and leaves the input intact") {
  Tensor w({3, 2}, std::vector<double>{1, 2, 3, 4, 5, 6});
  LayerMask m(3, 2);
  m.set_row(1, false);
  auto out = apply_mask(w, m);
  CHECK(out == Tensor({3, 2}, std::vector<double>{1, 2, 0, 0, 5, 6}));
  CHECK(w[2] == 3.0);
  CHECK(apply_mask(w, LayerMask(3, 2)) == w);
  CHECK(apply_mask(w, LayerMask(3, 2, false)) == Tensor({3, 2}, 0.0));
  CHECK_THROWS_AS(apply_mask(w, LayerMask(2, 2)), ConfigError);
}

TEST_CASE("sparsity_regularizer") {
  Thresholds zeros;
  zeros.layers = {std::vector<double>(20, 0.0), std::vector<double>(50, 0.0),
                  std::vector<double>(500, 0.0), std::vector<double>(10, 0.0)};
  CHECK(sparsity_regularizer(zeros) == 580.0);
  CHECK(sparsity_regularizer(single_layer(std::vector<double>(10, 1.0))) ==
        Approx(3.6787944117).epsilon(1e-10));
  CHECK(sparsity_regularizer(single_layer({0.0, 1.0})) == Approx(1.3678794412).epsilon(1e-10));
}

TEST_CASE("threshold_gradient is the negative row dot product") {
  NetworkParams w, g;
  w.layers.push_back({Tensor({2, 2}, std::vector<double>{0.5, 0.5, 0.3, -0.1}), Tensor()});
  g.layers.push_back({Tensor({2, 2}, std::vector<double>{0.1, -0.2, 0.0, 0.0}), Tensor()});
  BinaryMask mask{{LayerMask(2, 2)}};
  auto h = threshold_gradient(g, w, mask);
  CHECK(h.layers[0][0] == Approx(0.05).epsilon(1e-14));
  CHECK(h.layers[0][1] == 0.0);

  SECTION("zero weights give zero") {
    NetworkParams zw;
    zw.layers.push_back({Tensor({2, 2}, 0.0), Tensor()});
    auto hz = threshold_gradient(g, zw, mask);
    CHECK(hz.layers[0][0] == 0.0);
  }
  SECTION("pruned rows contribute nothing") {
    mask.layers[0].set_row(0, false);
    CHECK(threshold_gradient(g, w, mask).layers[0][0] == 0.0);
  }
}

TEST_CASE("property: STE identity against brute-force recomputation") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 12; ++trial) {
    auto arch = testutil::random_arch(rng, trial);
    auto params = init_params(arch, rng);
    auto mask = testutil::random_mask(arch, rng, 0.3);
    auto x = testutil::random_batch(arch, 3, rng);
    auto y = testutil::random_labels(arch, 3, rng);
    auto bw = backward_pass(arch, params, mask, x, y);
    auto h = threshold_gradient(bw.grads, params, mask);
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
      const auto& w = params.layers[l].weight;
      for (std::size_t i = 0; i < w.dim(0); ++i) {
        double brute = 0.0;
        for (std::size_t j = 0; j < w.dim(1); ++j) {
          brute -= bw.grads.layers[l].weight.at(i, j) * w.at(i, j);
        }
        REQUIRE(h.layers[l][i] == Approx(brute).epsilon(1e-12).margin(1e-15));
        if (mask.layers[l].row_active(i)) {
          const double oracle = testutil::row_scale_oracle(arch, params, mask, x, y, l, i);
          REQUIRE(testutil::relative_error(oracle, h.layers[l][i]) < 1e-4);
        }
      }
    }
  }
}

TEST_CASE("threshold_step arithmetic and clamping") {
  auto tau = single_layer({0.5});
  auto h0 = single_layer({0.0});
  threshold_step(tau, h0, 0.1, 0.002);
  CHECK(tau.layers[0][0] == Approx(0.5 + 0.1 * 0.002 * std::exp(-0.5)).epsilon(1e-15));
  CHECK(tau.layers[0][0] == Approx(0.500121).margin(1e-6));

  auto still = single_layer({0.3});
  threshold_step(still, h0, 0.1, 0.0);
  CHECK(still.layers[0][0] == 0.3);

  auto top = single_layer({1.0});
  threshold_step(top, h0, 0.1, 0.5);
  CHECK(top.layers[0][0] == 1.0);

  auto low = single_layer({0.0});
  threshold_step(low, single_layer({5.0}), 0.1, 0.0);
  CHECK(low.layers[0][0] == 0.0);

  CHECK_THROWS_AS(threshold_step(tau, Thresholds{}, 0.1, 0.0), ConfigError);
}

TEST_CASE("property: sparsity force strictly raises thresholds below one") {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0.0, 0.999);
  for (int k = 0; k < 1000; ++k) {
    auto tau = single_layer({u(rng)});
    const double before = tau.layers[0][0];
    threshold_step(tau, single_layer({0.0}), 0.01, 0.002);
    REQUIRE(tau.layers[0][0] > before);
  }
}

TEST_CASE("property: thresholds stay in [0, 1] under any update sequence") {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> big(0.0, 30.0);
  std::uniform_real_distribution<double> a(0.0, 1.0);
  Thresholds tau;
  tau.layers = {std::vector<double>(7, 0.0), std::vector<double>(3, 0.0)};
  for (int step = 0; step < 500; ++step) {
    Thresholds h = tau;
    for (auto& l : h.layers) {
      for (double& v : l) v = big(rng);
    }
    threshold_step(tau, h, 0.05, a(rng));
    for (const auto& l : tau.layers) {
      for (double t : l) REQUIRE((t >= 0.0 && t <= 1.0));
    }
  }
}

TEST_CASE("density_metrics") {
  BinaryMask all{{LayerMask(4, 3), LayerMask(2, 5)}};
  auto r = density_metrics(all);
  CHECK(r.overall == 1.0);

  LayerMask quarter(20, 4);
  for (std::size_t i = 5; i < 20; ++i) quarter.set_row(i, false);
  CHECK(density_metrics(BinaryMask{{quarter}}).per_layer[0] == 0.25);

  LayerMask half(10, 10);  // 100 params, 50% dense
  for (std::size_t i = 0; i < 5; ++i) half.set_row(i, false);
  BinaryMask mixed{{half, LayerMask(10, 30)}};  // + 300 params, fully dense
  CHECK(density_metrics(mixed).overall == 0.875);
}

TEST_CASE("layer_reset triggers strictly below one percent") {
  Thresholds tau;
  tau.layers = {std::vector<double>(200, 0.4), std::vector<double>(100, 0.4),
                std::vector<double>(10, 0.4)};
  DensityReport d{{0.005, 0.01, 0.5}, 0.3};
  CHECK(layer_reset(tau, d) == 1);
  for (double t : tau.layers[0]) CHECK(t == 0.0);
  for (double t : tau.layers[1]) CHECK(t == 0.4);
  for (double t : tau.layers[2]) CHECK(t == 0.4);

  DensityReport healthy{{0.2, 0.9, 1.0}, 0.5};
  auto copy = tau;
  CHECK(layer_reset(tau, healthy) == 0);
  CHECK(tau == copy);
}

TEST_CASE("property: a collapsed layer always comes back after reset") {
  std::mt19937_64 rng(19);
  for (int trial = 0; trial < 20; ++trial) {
    auto arch = testutil::random_arch(rng, trial);
    auto params = init_params(arch, rng);
    auto tau = Thresholds::zeros(arch);
    std::fill(tau.layers[0].begin(), tau.layers[0].end(), 1.0);
    auto density = density_metrics(generate_masks(params, tau));
    REQUIRE(density.per_layer[0] < kLayerResetDensity);
    REQUIRE(layer_reset(tau, density) >= 1);
    REQUIRE(density_metrics(generate_masks(params, tau)).per_layer[0] == 1.0);
  }
}

TEST_CASE("property: a row reactivates once its threshold drops below its magnitude") {
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int k = 0; k < 200; ++k) {
    std::vector<double> mu{u(rng) * 0.5};
    std::vector<double> tau{mu[0] + 0.01 + u(rng) * 0.4};
    REQUIRE_FALSE(generate_mask(mu, tau, 1).row_active(0));
    tau[0] = mu[0] * u(rng);
    REQUIRE(generate_mask(mu, tau, 1).row_active(0));
  }
}

TEST_CASE("threshold count stays under one percent of the weights for the presets") {
  const auto lenet = make_lenet();
  CHECK(Thresholds::zeros(lenet).count() == 580);
  CHECK(580.0 / static_cast<double>(lenet.weight_count()) < 0.01);
  const auto cnn = make_cnn7();
  CHECK(static_cast<double>(Thresholds::zeros(cnn).count()) /
            static_cast<double>(cnn.weight_count()) <
        0.01);
}
