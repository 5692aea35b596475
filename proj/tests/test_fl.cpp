#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <memory>
#include <random>

#include "spafl/fl.hpp"
#include "test_util.hpp"

using namespace spafl;
using Catch::Approx;

namespace {

RoundConfig small_config(std::size_t n, std::size_t k, Strategy s = Strategy::spafl) {
  RoundConfig c;
  c.clients = n;
  c.clients_per_round = k;
  c.rounds = 3;
  c.local_epochs = 2;
  c.lr = 0.05;
  c.alpha = 0.01;
  c.momentum = 0.9;
  c.batch_size = 8;
  c.strategy = s;
  c.seed = 17;
  return c;
}

Federation small_federation(RoundConfig cfg, double beta = 0.3) {
  auto ds = std::make_shared<const Dataset>(synth_dataset(4, 8, 30, 0.3, cfg.seed));
  auto parts = dirichlet_partition(ds->labels, 4, cfg.clients, beta, cfg.seed);
  auto split = client_split(parts, ds->labels, 0.2, cfg.seed);
  return Federation(make_mlp(8, {6}, 4), ds, std::move(split), cfg);
}

Thresholds one(std::vector<double> v) {
  Thresholds t;
  t.layers.push_back(std::move(v));
  return t;
}

NetworkParams row_params(std::vector<double> w, std::size_t n_in) {
  NetworkParams p;
  const std::size_t n_out = w.size() / n_in;
  p.layers.push_back({Tensor({n_out, n_in}, std::move(w)), Tensor({n_out}, 0.25)});
  return p;
}

}  // namespace

TEST_CASE("round config validation") {
  auto c = small_config(10, 3);
  CHECK_NOTHROW(c.validate());
  c.clients_per_round = 20;
  CHECK_THROWS_WITH(c.validate(), Catch::Matchers::ContainsSubstring("K <= N required"));
  c = small_config(10, 3);
  c.alpha = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config(10, 3);
  c.local_epochs = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config(10, 3);
  c.lr = 0.1;
  c.lr_decay = 0.5;
  CHECK(c.lr_at(2) == Approx(0.025));
}

TEST_CASE("strategy names") {
  for (auto name : kStrategyNames) CHECK(to_string(parse_strategy(name)) == name);
  CHECK_THROWS_WITH(parse_strategy("heterofl"), Catch::Matchers::ContainsSubstring("unsupported"));
  CHECK_THROWS_WITH(parse_strategy("bogus"), Catch::Matchers::ContainsSubstring("valid values"));
}

TEST_CASE("sample_clients") {
  std::mt19937_64 rng(1);
  SECTION("K = N returns everyone") {
    auto s = sample_clients(6, 6, rng);
    CHECK(s == std::vector<std::size_t>{0, 1, 2, 3, 4, 5});
  }
  SECTION("fixed seed reproduces the draw") {
    std::mt19937_64 a(5), b(5);
    CHECK(sample_clients(10, 3, a) == sample_clients(10, 3, b));
  }
  SECTION("K > N is a configuration error") {
    CHECK_THROWS_AS(sample_clients(3, 4, rng), ConfigError);
  }
  SECTION("selection frequency is uniform within three sigma") {
    std::vector<int> hits(100, 0);
    const int draws = 10000;
    for (int d = 0; d < draws; ++d) {
      auto s = sample_clients(100, 10, rng);
      REQUIRE(std::adjacent_find(s.begin(), s.end()) == s.end());
      for (auto k : s) ++hits[k];
    }
    const double sigma = std::sqrt(draws * 0.1 * 0.9);
    for (int h : hits) CHECK(std::abs(h - draws * 0.1) < 3 * sigma + 1e-9);
  }
}

TEST_CASE("importance update") {
  SECTION("positive row mass with a falling threshold is reinforced") {
    auto p = row_params({0.2, 0.2, 0.2, 0.2}, 4);
    importance_update(p, one({-0.02}));
    for (double w : p.layers[0].weight.values()) CHECK(w == Approx(0.205).epsilon(1e-15));
    CHECK(p.layers[0].bias[0] == 0.25);
  }
  SECTION("negative row mass moves the other way") {
    auto p = row_params({-0.2, -0.2, -0.2, -0.2}, 4);
    importance_update(p, one({-0.02}));
    for (double w : p.layers[0].weight.values()) CHECK(w == Approx(-0.205).epsilon(1e-15));
  }
  SECTION("zero delta is the identity") {
    auto p = row_params({0.3, -0.7, 0.1, 0.0}, 2);
    auto before = p;
    importance_update(p, one({0.0, 0.0}));
    CHECK(p.layers[0].weight == before.layers[0].weight);
  }
  SECTION("zero row mass counts as positive") {
    auto p = row_params({0.5, -0.5}, 2);
    importance_update(p, one({0.1}));
    CHECK(p.layers[0].weight[0] == Approx(0.45));
    CHECK(p.layers[0].weight[1] == Approx(-0.55));
  }
  SECTION("results are clamped") {
    auto p = row_params({0.999}, 1);
    importance_update(p, one({-0.5}));
    CHECK(p.layers[0].weight[0] == 1.0);
  }
  SECTION("length mismatch") {
    auto p = row_params({0.1, 0.1}, 1);
    CHECK_THROWS_AS(importance_update(p, one({0.1})), ConfigError);
  }
  SECTION("property: width-one rows follow w - delta * sign(w)") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> w(-1.0, 1.0), d(-0.2, 0.2);
    for (int k = 0; k < 500; ++k) {
      const double w0 = w(rng), d0 = d(rng);
      auto p = row_params({w0}, 1);
      importance_update(p, one({d0}));
      const double sign = w0 >= 0 ? 1.0 : -1.0;
      REQUIRE(p.layers[0].weight[0] == std::clamp(w0 - d0 * sign, -1.0, 1.0));
    }
  }
}

TEST_CASE("aggregate_thresholds") {
  const std::vector<Thresholds> single{one({0.3, 0.1})};
  CHECK(aggregate_thresholds(single) == single[0]);

  const std::vector<Thresholds> two{one({0.2, 0.4}), one({0.4, 0.6})};
  auto mean = aggregate_thresholds(two);
  CHECK(mean.layers[0][0] == Approx(0.3));
  CHECK(mean.layers[0][1] == Approx(0.5));

  const std::vector<Thresholds> same(5, one({0.125, 0.75}));
  CHECK(aggregate_thresholds(same) == same[0]);

  CHECK_THROWS_AS(aggregate_thresholds(std::vector<Thresholds>{}), ProtocolError);
  const std::vector<Thresholds> ragged{one({0.1}), one({0.1, 0.2})};
  CHECK_THROWS_AS(aggregate_thresholds(ragged), ProtocolError);

  SECTION("property: the mean lies between the extremes") {
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
      std::vector<Thresholds> ups(1 + trial % 7, one(std::vector<double>(5)));
      for (auto& t : ups) {
        for (double& v : t.layers[0]) v = u(rng);
      }
      auto agg = aggregate_thresholds(ups);
      for (std::size_t i = 0; i < 5; ++i) {
        double lo = 1, hi = 0;
        for (const auto& t : ups) lo = std::min(lo, t.layers[0][i]), hi = std::max(hi, t.layers[0][i]);
        REQUIRE(agg.layers[0][i] >= lo - 1e-15);
        REQUIRE(agg.layers[0][i] <= hi + 1e-15);
      }
    }
  }
}

TEST_CASE("compute_delta_tau") {
  ServerState s;
  s.current = one({0.28});
  s.previous = one({0.30});
  CHECK(compute_delta_tau(s).layers[0][0] == Approx(-0.02));
  s.previous = s.current;
  CHECK(compute_delta_tau(s).layers[0][0] == 0.0);

  auto fed = small_federation(small_config(4, 2));
  for (const auto& l : compute_delta_tau(fed.server()).layers) {
    for (double v : l) CHECK(v == 0.0);
  }
}

TEST_CASE("local_train") {
  auto cfg = small_config(3, 1);
  auto fed = small_federation(cfg);
  auto& client = fed.clients()[0];
  Thresholds start = Thresholds::zeros(fed.arch());
  for (auto& l : start.layers) std::fill(l.begin(), l.end(), 0.05);

  SECTION("zero learning rate leaves thresholds unchanged") {
    auto c = cfg;
    c.lr = 0.0;
    auto r = local_train(fed.arch(), fed.dataset(), client, start, c, 0.0);
    CHECK(r.thresholds == start);
  }
  SECTION("no forces when the regularizer is off and weights are zero") {
    auto c = cfg;
    c.alpha = 0.0;
    client.params.for_each_tensor([](Tensor& t) { t.fill(0.0); });
    Thresholds zero = Thresholds::zeros(fed.arch());
    auto r = local_train(fed.arch(), fed.dataset(), client, zero, c, c.lr);
    CHECK(r.thresholds == zero);
  }
  SECTION("one batch, one epoch equals the hand-composed step sequence") {
    auto c = cfg;
    c.local_epochs = 1;
    c.batch_size = 1000;  // whole split in one batch
    ClientState twin = client;

    auto r = local_train(fed.arch(), fed.dataset(), client, start, c, c.lr);

    // manual composition on the twin
    Thresholds tau = start;
    auto mask = generate_masks(twin.params, tau);
    layer_reset(tau, density_metrics(mask));
    std::vector<std::size_t> order = twin.data.train;
    std::shuffle(order.begin(), order.end(), twin.rng);
    auto bw = backward_pass(fed.arch(), twin.params, mask, fed.dataset().gather(order),
                            fed.dataset().gather_labels(order));
    auto h = threshold_gradient(bw.grads, twin.params, mask);
    sgd_momentum_step(twin.params, bw.grads, twin.velocity, c.lr, c.momentum, &mask);
    clamp_parameters(twin.params);
    threshold_step(tau, h, c.lr, c.alpha);

    CHECK(r.thresholds == tau);
    CHECK(client.params.layers[0].weight == twin.params.layers[0].weight);
    CHECK(client.params.layers[1].weight == twin.params.layers[1].weight);
  }
  SECTION("empty partition is skipped") {
    client.data.train.clear();
    auto r = local_train(fed.arch(), fed.dataset(), client, start, cfg, cfg.lr);
    CHECK(r.skipped);
    CHECK(r.thresholds == start);
  }
}

TEST_CASE("evaluate") {
  Architecture arch(Geometry{2, 1, 1});
  arch.dense(2);
  Dataset ds;
  ds.geometry = Geometry{2, 1, 1};
  ds.n_classes = 2;
  ds.samples = Tensor({4, 2}, std::vector<double>{1, 0, 0, 1, 1, 0, 0, 1});
  ds.labels = {0, 1, 0, 1};
  NetworkParams p;
  p.layers.push_back({Tensor({2, 2}, std::vector<double>{1, 0, 0, 1}), Tensor({2}, 0.0)});
  std::vector<std::size_t> all{0, 1, 2, 3};

  CHECK(*evaluate(arch, p, full_mask(arch), ds, all) == 1.0);
  CHECK_FALSE(evaluate(arch, p, full_mask(arch), ds, {}).has_value());

  // fully pruned: logits are all zero, the first class wins every tie
  CHECK(*evaluate(arch, p, full_mask(arch, false), ds, all) == 0.5);

  SECTION("untrained model sits near chance on balanced data") {
    auto big = synth_dataset(10, 16, 200, 0.5, 2);
    std::vector<std::size_t> idx(big.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    double total = 0;
    for (std::uint64_t s = 0; s < 20; ++s) {
      std::mt19937_64 rng(s);
      auto arch10 = make_mlp(16, {8}, 10);
      total += *evaluate(arch10, init_params(arch10, rng), full_mask(arch10), big, idx);
    }
    CHECK(total / 20 == Approx(0.1).margin(0.05));
  }
}

TEST_CASE("spafl rounds") {
  SECTION("a single sampled client defines the next global thresholds") {
    auto fed = small_federation(small_config(4, 1));
    auto m = run_round(fed);
    REQUIRE(m.sampled.size() == 1);
    CHECK(fed.server().current == fed.clients()[m.sampled[0]].thresholds);
  }
  SECTION("zero learning rate and no regularizer freeze the thresholds") {
    auto cfg = small_config(4, 2);
    cfg.lr = 0.0;
    cfg.alpha = 0.0;
    auto fed = small_federation(cfg);
    const auto tau0 = fed.server().current;
    for (int t = 0; t < 3; ++t) run_round(fed);
    CHECK(fed.server().current == tau0);
  }
  SECTION("twin clients with identical data and seeds return identical thresholds") {
    auto fed = small_federation(small_config(2, 2));
    fed.clients()[1].data = fed.clients()[0].data;
    fed.clients()[1].rng = fed.clients()[0].rng;
    run_round(fed);
    CHECK(fed.clients()[0].thresholds == fed.clients()[1].thresholds);
    CHECK(fed.clients()[0].params.layers[0].weight == fed.clients()[1].params.layers[0].weight);
  }
  SECTION("parameters stay personal on heterogeneous data") {
    auto fed = small_federation(small_config(3, 3), 0.1);
    run_round(fed);
    CHECK_FALSE(fed.clients()[0].params.layers[0].weight ==
                fed.clients()[1].params.layers[0].weight);
  }
  SECTION("only thresholds cross the channel, 2 K tau_num scalars per round") {
    auto fed = small_federation(small_config(5, 3));
    const auto tau_num = threshold_count(fed.arch());
    for (std::size_t t = 0; t < 3; ++t) {
      auto m = run_round(fed, false);
      CHECK(fed.channel().round_scalars(t) == 2 * 3 * tau_num);
      CHECK(m.cost.uplink_bits + m.cost.downlink_bits == spafl_comm_bits(3, tau_num, 1));
    }
    for (const auto& tr : fed.channel().transfers()) CHECK(tr.payload == Payload::thresholds);
    CHECK(fed.channel().total_bits() == fed.ledger().total_bits());
  }
  SECTION("global thresholds stay in [0, 1] and parameters in [-1, 1]") {
    auto cfg = small_config(4, 2);
    cfg.lr = 0.5;
    cfg.alpha = 0.5;
    auto fed = small_federation(cfg);
    for (int t = 0; t < 4; ++t) run_round(fed, false);
    for (const auto& l : fed.server().current.layers) {
      for (double v : l) REQUIRE((v >= 0.0 && v <= 1.0));
    }
    for (const auto& c : fed.clients()) {
      c.params.for_each_tensor([](const Tensor& t) {
        for (double w : t.values()) REQUIRE((w >= -1.0 && w <= 1.0));
      });
    }
  }
}

TEST_CASE("determinism and worker independence") {
  auto run = [](std::size_t workers) {
    auto cfg = small_config(6, 3);
    cfg.workers = workers;
    auto fed = small_federation(cfg);
    std::vector<RoundMetrics> out;
    for (int t = 0; t < 3; ++t) out.push_back(run_round(fed));
    return std::make_pair(out, fed.server().current);
  };
  auto [m1, tau1] = run(1);
  auto [m2, tau2] = run(1);
  auto [m3, tau3] = run(3);
  CHECK(tau1 == tau2);
  CHECK(tau1 == tau3);
  for (std::size_t t = 0; t < m1.size(); ++t) {
    CHECK(m1[t].sampled == m3[t].sampled);
    CHECK(m1[t].client_acc == m2[t].client_acc);
    CHECK(m1[t].client_acc == m3[t].client_acc);
    CHECK(m1[t].density.per_layer == m3[t].density.per_layer);
    CHECK(m1[t].cum_flops == m3[t].cum_flops);
  }
}

TEST_CASE("worker failures surface after the barrier") {
  CHECK_THROWS_AS(detail::parallel_for(8, 4,
                                       [](std::size_t i) {
                                         if (i == 5) throw NumericError("boom");
                                       }),
                  NumericError);
}

TEST_CASE("federation rejects mismatched inputs") {
  auto cfg = small_config(4, 2);
  auto ds = std::make_shared<const Dataset>(synth_dataset(4, 8, 10, 0.3, 1));
  Partition wrong;
  wrong.clients.resize(3);
  CHECK_THROWS_AS(Federation(make_mlp(8, {4}, 4), ds, wrong, cfg), ConfigError);
  Partition right;
  right.clients.resize(4);
  CHECK_THROWS_AS(Federation(make_mlp(9, {4}, 4), ds, right, cfg), ConfigError);
}
