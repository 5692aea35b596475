#pragma once

// Federated rounds in which clients keep dense parameters local and only
// per-unit thresholds are exchanged and averaged by the server.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "spafl/accounting.hpp"
#include "spafl/channel.hpp"
#include "spafl/data.hpp"
#include "spafl/errors.hpp"
#include "spafl/nn.hpp"
#include "spafl/pruning.hpp"

namespace spafl {

enum class Strategy { spafl, spafl_no_importance, fedavg, local_only, thresholds_only };

inline constexpr std::string_view kStrategyNames[] = {
    "spafl", "spafl_no_importance", "fedavg", "local_only", "thresholds_only"};

// Named baselines this simulator deliberately does not implement.
inline constexpr std::string_view kUnsupportedStrategies[] = {
    "fedpm", "heterofl", "fjord", "fedp3", "fedspa"};

inline std::string_view to_string(Strategy s) {
  return kStrategyNames[static_cast<std::size_t>(s)];
}

inline Strategy parse_strategy(std::string_view name) {
  for (std::size_t i = 0; i < std::size(kStrategyNames); ++i) {
    if (kStrategyNames[i] == name) return static_cast<Strategy>(i);
  }
  std::string valid;
  for (auto n : kStrategyNames) valid += (valid.empty() ? "" : ", ") + std::string(n);
  for (auto n : kUnsupportedStrategies) {
    if (n == name) {
      throw ConfigError("strategy '" + std::string(name) +
                        "' is unsupported by this simulator; valid values: " + valid);
    }
  }
  throw ConfigError("unknown strategy '" + std::string(name) + "'; valid values: " + valid);
}

struct RoundConfig {
  std::size_t clients = 100;           // N
  std::size_t clients_per_round = 10;  // K
  std::size_t rounds = 500;            // T
  std::size_t local_epochs = 5;        // E
  double lr = 0.001;                   // eta_0
  double lr_decay = 1.0;               // eta(t) = eta_0 * decay^t
  double alpha = 0.002;
  double momentum = 0.9;
  std::size_t batch_size = 64;
  Strategy strategy = Strategy::spafl;
  std::uint64_t seed = 0;
  std::size_t workers = 1;

  void validate() const {
    if (clients_per_round < 1 || clients_per_round > clients) {
      throw ConfigError("K <= N required (got K=" + std::to_string(clients_per_round) +
                        ", N=" + std::to_string(clients) + "); K must also be >= 1");
    }
    if (local_epochs < 1) throw ConfigError("local_epochs must be >= 1");
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be finite and >= 0");
    if (!(lr_decay > 0.0)) throw ConfigError("lr_decay must be > 0");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (workers < 1) throw ConfigError("workers must be >= 1");
  }

  double lr_at(std::size_t round) const {
    return lr * std::pow(lr_decay, static_cast<double>(round));
  }
};

struct ClientState {
  std::size_t id = 0;
  NetworkParams params;  // dense, never leaves the client in threshold modes
  VelocitySet velocity;  // momentum buffers, persist across rounds
  Thresholds thresholds;  // last local result (private thresholds for local_only)
  ClientIndices data;
  std::mt19937_64 rng;
};

struct ServerState {
  Thresholds current;   // tau(t)
  Thresholds previous;  // tau(t-1); equals current before the first aggregation
  std::size_t round = 0;
  std::mt19937_64 rng;
  NetworkParams global_params;  // dense-exchange baseline only
};

/// K distinct ids drawn uniformly without replacement, ascending.
template <typename Rng>
std::vector<std::size_t> sample_clients(std::size_t n, std::size_t k, Rng& rng) {
  if (k > n) {
    throw ConfigError("cannot sample " + std::to_string(k) + " of " + std::to_string(n) +
                      " clients: K <= N required");
  }
  // partial Fisher-Yates
  std::vector<std::size_t> ids(n);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(ids[i], ids[pick(rng)]);
  }
  ids.resize(k);
  std::sort(ids.begin(), ids.end());
  return ids;
}

/// Shifts every weight of row i by -(delta_i / n_in) * sign(sum_j w_ij),
/// with sign(0) = +1, then clamps to [-1, 1]. Biases are untouched.
///
/// For positive row mass the weights move against delta_i (a threshold that
/// dropped marks the row as globally important, so it is reinforced); for
/// negative mass they move with it. This is the XOR of the two sign bits
/// applied with magnitude |delta_i| / n_in.
inline void importance_update(NetworkParams& params, const Thresholds& delta) {
  if (delta.layers.size() != params.layers.size()) {
    throw ConfigError("importance_update: layer count mismatch");
  }
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    auto& w = params.layers[l].weight;
    const auto& d = delta.layers[l];
    if (d.size() != w.dim(0)) throw ConfigError("importance_update: delta length mismatch");
    const double n_in = static_cast<double>(w.dim(1));
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (d[i] == 0.0) continue;
      auto row = w.row(i);
      double mass = 0.0;
      for (double v : row) mass += v;
      const double sign = mass >= 0.0 ? 1.0 : -1.0;
      const double shift = -(d[i] / n_in) * sign;
      for (double& v : row) v = std::clamp(v + shift, -1.0, 1.0);
    }
  }
}

/// Equal-weight mean of the uploaded thresholds, summed in the given order.
inline Thresholds aggregate_thresholds(std::span<const Thresholds> uploads) {
  if (uploads.empty()) throw ProtocolError("aggregation needs at least one threshold upload");
  Thresholds out = uploads.front();
  for (std::size_t k = 1; k < uploads.size(); ++k) {
    if (!uploads[k].same_layout(out)) throw ProtocolError("threshold uploads differ in layout");
    for (std::size_t l = 0; l < out.layers.size(); ++l) {
      for (std::size_t i = 0; i < out.layers[l].size(); ++i) {
        out.layers[l][i] += uploads[k].layers[l][i];
      }
    }
  }
  const double n = static_cast<double>(uploads.size());
  for (auto& layer : out.layers) {
    for (double& v : layer) v /= n;
  }
  return out;
}

/// tau(t) - tau(t-1); all zeros before the first aggregation.
inline Thresholds compute_delta_tau(const ServerState& server) {
  if (!server.current.same_layout(server.previous)) {
    throw ProtocolError("server threshold history has inconsistent layout");
  }
  Thresholds delta = server.current;
  for (std::size_t l = 0; l < delta.layers.size(); ++l) {
    for (std::size_t i = 0; i < delta.layers[l].size(); ++i) {
      delta.layers[l][i] = server.current.layers[l][i] - server.previous.layers[l][i];
    }
  }
  return delta;
}

struct LocalTrainOptions {
  bool train_parameters = true;
  bool train_thresholds = true;
  bool use_masks = true;            // false: dense training, thresholds ignored
  bool charge_importance_update = false;  // add 1.5 d FLOPs to the first epoch
};

struct LocalTrainResult {
  Thresholds thresholds;
  std::uint64_t flops = 0;
  std::size_t layer_resets = 0;
  double last_loss = 0.0;
  bool skipped = false;
};

/// E epochs of joint parameter/threshold training on the client's train
/// split, starting from `start`. The mask is regenerated from the current
/// local thresholds and weights at the start of each epoch (followed by the
/// layer-reset check); each mini-batch then takes a masked SGD step on the
/// weights and an STE + regularizer step on the thresholds.
inline LocalTrainResult local_train(const Architecture& arch, const Dataset& dataset,
                                    ClientState& client, const Thresholds& start,
                                    const RoundConfig& config, double lr,
                                    const LocalTrainOptions& options = {}) {
  LocalTrainResult result;
  result.thresholds = start;
  const auto& train = client.data.train;
  if (train.empty()) {
    result.skipped = true;
    return result;
  }
  auto& tau = result.thresholds;
  std::vector<std::size_t> order = train;
  std::vector<std::size_t> batch_idx;

  for (std::size_t epoch = 0; epoch < config.local_epochs; ++epoch) {
    BinaryMask mask = options.use_masks ? generate_masks(client.params, tau) : full_mask(arch);
    if (options.use_masks && options.train_thresholds) {
      const std::size_t resets = layer_reset(tau, density_metrics(mask));
      if (resets > 0) {
        result.layer_resets += resets;
        mask = generate_masks(client.params, tau);
      }
    }
    result.flops += epoch_flops(arch, density_metrics(mask).per_layer, train.size(),
                                epoch == 0 && options.charge_importance_update);

    std::shuffle(order.begin(), order.end(), client.rng);
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      batch_idx.assign(order.begin() + static_cast<std::ptrdiff_t>(begin),
                       order.begin() + static_cast<std::ptrdiff_t>(end));
      const Tensor x = dataset.gather(batch_idx);
      const auto y = dataset.gather_labels(batch_idx);

      auto bw = backward_pass(arch, client.params, mask, x, y);
      result.last_loss = bw.loss;
      std::optional<Thresholds> h;
      if (options.train_thresholds && options.use_masks) {
        h = threshold_gradient(bw.grads, client.params, mask);
      }
      if (options.train_parameters) {
        sgd_momentum_step(client.params, bw.grads, client.velocity, lr, config.momentum, &mask);
        clamp_parameters(client.params);
      }
      if (h) threshold_step(tau, *h, lr, config.alpha);
    }
  }
  return result;
}

/// Fraction of correct argmax predictions of the masked model on `indices`,
/// or nullopt when there is nothing to evaluate.
inline std::optional<double> evaluate(const Architecture& arch, const NetworkParams& params,
                                      const BinaryMask& mask, const Dataset& dataset,
                                      std::span<const std::size_t> indices) {
  if (indices.empty()) return std::nullopt;
  constexpr std::size_t kChunk = 256;
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < indices.size(); begin += kChunk) {
    const auto chunk = indices.subspan(begin, std::min(kChunk, indices.size() - begin));
    const Tensor logits = forward_pass(arch, params, mask, dataset.gather(chunk));
    for (std::size_t r = 0; r < chunk.size(); ++r) {
      const auto z = logits.row(r);
      const auto pred = static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
      if (pred == dataset.labels[chunk[r]]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(indices.size());
}

struct RoundMetrics {
  std::size_t round = 0;  // rounds completed, 1-based
  std::vector<std::size_t> sampled;
  bool evaluated = false;
  double mean_acc = 0.0;
  double std_acc = 0.0;
  std::vector<double> client_acc;  // clients with a non-empty test split
  DensityReport density;           // mean over all clients
  RoundCost cost;
  std::uint64_t cum_comm_bits = 0;
  std::uint64_t cum_flops = 0;
  std::size_t skipped_clients = 0;
  std::size_t layer_resets = 0;
};

namespace detail {

// Runs fn(i) for i in [0, n) on up to `workers` threads; rethrows the first
// failure after all threads joined.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (std::uint64_t{words[0]} << 32) | words[1];
}

}  // namespace detail

/// Owns the simulated population: shared architecture and data, one
/// ClientState per client, the server, the instrumented channel and the
/// cost ledger. Round functions (run_round and the strategies) mutate it.
class Federation {
 public:
  Federation(Architecture arch, std::shared_ptr<const Dataset> dataset, Partition partition,
             RoundConfig config)
      : arch_(std::move(arch)), dataset_(std::move(dataset)), config_(config) {
    config_.validate();
    if (!dataset_) throw ConfigError("federation needs a dataset");
    if (dataset_->sample_volume() != arch_.input().volume()) {
      throw ConfigError("dataset sample volume " + std::to_string(dataset_->sample_volume()) +
                        " does not match model input " + std::to_string(arch_.input().volume()));
    }
    if (dataset_->n_classes > arch_.n_classes()) {
      throw ConfigError("model has fewer outputs than the dataset has classes");
    }
    if (partition.clients.size() != config_.clients) {
      throw ConfigError("partition has " + std::to_string(partition.clients.size()) +
                        " clients, config expects " + std::to_string(config_.clients));
    }

    // Every strategy starts from the same w(0) and tau(0) for a given seed.
    std::mt19937_64 init_rng(detail::mix_seed(config_.seed, 0x1417));
    const NetworkParams initial = init_params(arch_, init_rng);
    const Thresholds zeros = Thresholds::zeros(arch_);

    server_.current = zeros;
    server_.previous = zeros;
    server_.rng.seed(detail::mix_seed(config_.seed, 0x5e7e));
    server_.global_params = initial;

    clients_.resize(config_.clients);
    for (std::size_t k = 0; k < clients_.size(); ++k) {
      auto& c = clients_[k];
      c.id = k;
      c.params = initial;
      c.velocity = zeros_like(initial);
      c.thresholds = zeros;
      c.data = std::move(partition.clients[k]);
      c.rng.seed(detail::mix_seed(config_.seed, 0x10000 + k));
    }
  }

  const Architecture& arch() const noexcept { return arch_; }
  const Dataset& dataset() const noexcept { return *dataset_; }
  const RoundConfig& config() const noexcept { return config_; }
  std::vector<ClientState>& clients() noexcept { return clients_; }
  const std::vector<ClientState>& clients() const noexcept { return clients_; }
  ServerState& server() noexcept { return server_; }
  const ServerState& server() const noexcept { return server_; }
  Channel& channel() noexcept { return channel_; }
  const Channel& channel() const noexcept { return channel_; }
  CostLedger& ledger() noexcept { return ledger_; }
  const CostLedger& ledger() const noexcept { return ledger_; }

  /// Thresholds a client's model is evaluated (and visualized) with.
  const Thresholds& eval_thresholds(const ClientState& client) const {
    return config_.strategy == Strategy::local_only ? client.thresholds : server_.current;
  }

  /// Evaluation-time model and mask of one client.
  std::pair<const NetworkParams*, BinaryMask> eval_model(const ClientState& client) const {
    if (config_.strategy == Strategy::fedavg) {
      return {&server_.global_params, full_mask(arch_)};
    }
    return {&client.params, generate_masks(client.params, eval_thresholds(client))};
  }

  /// Closes a round: records costs, advances the counter, and fills
  /// densities (always) and accuracies (when requested) over all clients.
  RoundMetrics finish_round(std::vector<std::size_t> sampled, const RoundCost& cost,
                            std::size_t skipped, std::size_t resets, bool with_eval) {
    ledger_.record_round(cost);
    ++server_.round;

    RoundMetrics m;
    m.round = server_.round;
    m.sampled = std::move(sampled);
    m.cost = cost;
    m.cum_comm_bits = ledger_.total_bits();
    m.cum_flops = ledger_.flops();
    m.skipped_clients = skipped;
    m.layer_resets = resets;

    std::vector<DensityReport> densities(clients_.size());
    std::vector<std::optional<double>> acc(clients_.size());
    detail::parallel_for(clients_.size(), config_.workers, [&](std::size_t k) {
      auto [params, mask] = eval_model(clients_[k]);
      densities[k] = density_metrics(mask);
      if (with_eval) acc[k] = evaluate(arch_, *params, mask, *dataset_, clients_[k].data.test);
    });
    m.density = mean_density(densities);

    if (with_eval) {
      for (const auto& a : acc) {
        if (a) m.client_acc.push_back(*a);
      }
      if (!m.client_acc.empty()) {
        m.evaluated = true;
        double sum = 0.0;
        for (double a : m.client_acc) sum += a;
        m.mean_acc = sum / static_cast<double>(m.client_acc.size());
        double var = 0.0;
        for (double a : m.client_acc) var += (a - m.mean_acc) * (a - m.mean_acc);
        m.std_acc = std::sqrt(var / static_cast<double>(m.client_acc.size()));
      }
    }
    return m;
  }

 private:
  Architecture arch_;
  std::shared_ptr<const Dataset> dataset_;
  RoundConfig config_;
  std::vector<ClientState> clients_;
  ServerState server_;
  Channel channel_;
  CostLedger ledger_;
};

namespace detail {

struct ThresholdRoundVariant {
  bool importance_update = true;
  bool train_parameters = true;
};

// Shared body of every threshold-exchanging round. Sampled clients receive
// tau(t) over the channel; Delta tau(t-1) = tau(t) - tau(t-1) is derived
// from two consecutive global broadcasts rather than shipped separately.
inline RoundMetrics run_threshold_round(Federation& fed, ThresholdRoundVariant variant,
                                        bool with_eval) {
  const auto& cfg = fed.config();
  auto& server = fed.server();
  const std::size_t t = server.round;
  const double lr = cfg.lr_at(t);

  auto sampled = sample_clients(cfg.clients, cfg.clients_per_round, server.rng);
  const Thresholds delta = compute_delta_tau(server);

  std::vector<Thresholds> received;
  received.reserve(sampled.size());
  for (auto k : sampled) {
    received.push_back(fed.channel().send(t, k, Direction::downlink, server.current));
  }

  LocalTrainOptions opts;
  opts.train_parameters = variant.train_parameters;
  opts.charge_importance_update = variant.importance_update;

  std::vector<LocalTrainResult> results(sampled.size());
  parallel_for(sampled.size(), cfg.workers, [&](std::size_t s) {
    auto& client = fed.clients()[sampled[s]];
    if (client.data.train.empty()) {
      results[s].skipped = true;
      return;
    }
    if (variant.importance_update) importance_update(client.params, delta);
    results[s] = local_train(fed.arch(), fed.dataset(), client, received[s], cfg, lr, opts);
    client.thresholds = results[s].thresholds;
  });

  RoundCost cost;
  std::size_t skipped = 0, resets = 0;
  std::vector<Thresholds> uploads;
  for (std::size_t s = 0; s < sampled.size(); ++s) {
    cost.downlink_bits += received[s].count() * kBitsPerScalar;
    if (results[s].skipped) {
      ++skipped;
      continue;
    }
    uploads.push_back(fed.channel().send(t, sampled[s], Direction::uplink, results[s].thresholds));
    cost.uplink_bits += uploads.back().count() * kBitsPerScalar;
    cost.flops += results[s].flops;
    resets += results[s].layer_resets;
  }

  if (!uploads.empty()) {
    server.previous = server.current;
    server.current = aggregate_thresholds(uploads);
  }
  return fed.finish_round(std::move(sampled), cost, skipped, resets, with_eval);
}

}  // namespace detail

/// One SpaFL round: sample K clients, broadcast tau(t), apply the
/// importance update from Delta tau(t-1), train locally, then average the
/// returned thresholds into tau(t+1).
inline RoundMetrics run_round(Federation& fed, bool with_eval = true) {
  return detail::run_threshold_round(fed, {true, true}, with_eval);
}

}  // namespace spafl
