#pragma once

// Baselines and ablations built on the same round engine.

#include <cstddef>
#include <span>
#include <vector>

#include "spafl/fl.hpp"

namespace spafl {

/// Equal-weight mean of full parameter sets.
inline NetworkParams average_parameters(std::span<const NetworkParams> models) {
  if (models.empty()) throw ProtocolError("parameter aggregation needs at least one model");
  NetworkParams out = models.front();
  for (std::size_t k = 1; k < models.size(); ++k) {
    if (models[k].layers.size() != out.layers.size()) {
      throw ProtocolError("uploaded models differ in layer count");
    }
    for (std::size_t l = 0; l < out.layers.size(); ++l) {
      auto& dst = out.layers[l];
      const auto& src = models[k].layers[l];
      if (src.weight.shape() != dst.weight.shape() || src.bias.size() != dst.bias.size()) {
        throw ProtocolError("uploaded models differ in layout");
      }
      for (std::size_t i = 0; i < dst.weight.size(); ++i) dst.weight[i] += src.weight[i];
      for (std::size_t i = 0; i < dst.bias.size(); ++i) dst.bias[i] += src.bias[i];
    }
  }
  const double n = static_cast<double>(models.size());
  out.for_each_tensor([n](Tensor& t) {
    for (double& v : t.values()) v /= n;
  });
  return out;
}

/// FedAvg: dense global model down, dense local models up, equal-weight mean.
inline RoundMetrics run_fedavg_round(Federation& fed, bool with_eval = true) {
  const auto& cfg = fed.config();
  auto& server = fed.server();
  const std::size_t t = server.round;
  const double lr = cfg.lr_at(t);
  auto sampled = sample_clients(cfg.clients, cfg.clients_per_round, server.rng);

  LocalTrainOptions opts;
  opts.train_thresholds = false;
  opts.use_masks = false;

  for (auto k : sampled) {
    fed.clients()[k].params = fed.channel().send(t, k, Direction::downlink, server.global_params);
  }
  std::vector<LocalTrainResult> results(sampled.size());
  detail::parallel_for(sampled.size(), cfg.workers, [&](std::size_t s) {
    auto& client = fed.clients()[sampled[s]];
    results[s] = local_train(fed.arch(), fed.dataset(), client, client.thresholds, cfg, lr, opts);
  });

  RoundCost cost;
  std::size_t skipped = 0;
  std::vector<NetworkParams> uploads;
  for (std::size_t s = 0; s < sampled.size(); ++s) {
    cost.downlink_bits += server.global_params.scalar_count() * kBitsPerScalar;
    if (results[s].skipped) {
      ++skipped;
      continue;
    }
    uploads.push_back(
        fed.channel().send(t, sampled[s], Direction::uplink, fed.clients()[sampled[s]].params));
    cost.uplink_bits += uploads.back().scalar_count() * kBitsPerScalar;
    cost.flops += results[s].flops;
  }
  if (!uploads.empty()) server.global_params = average_parameters(uploads);
  return fed.finish_round(std::move(sampled), cost, skipped, 0, with_eval);
}

/// Local-only: sampled clients prune and train against their private
/// thresholds; nothing crosses the channel.
inline RoundMetrics run_local_round(Federation& fed, bool with_eval = true) {
  const auto& cfg = fed.config();
  auto& server = fed.server();
  const double lr = cfg.lr_at(server.round);
  auto sampled = sample_clients(cfg.clients, cfg.clients_per_round, server.rng);

  std::vector<LocalTrainResult> results(sampled.size());
  detail::parallel_for(sampled.size(), cfg.workers, [&](std::size_t s) {
    auto& client = fed.clients()[sampled[s]];
    results[s] = local_train(fed.arch(), fed.dataset(), client, client.thresholds, cfg, lr);
    if (!results[s].skipped) client.thresholds = results[s].thresholds;
  });

  RoundCost cost;
  std::size_t skipped = 0, resets = 0;
  for (const auto& r : results) {
    skipped += r.skipped ? 1 : 0;
    cost.flops += r.flops;
    resets += r.layer_resets;
  }
  return fed.finish_round(std::move(sampled), cost, skipped, resets, with_eval);
}

/// Parameters frozen at initialization; only thresholds train and travel.
inline RoundMetrics run_thresholds_only_round(Federation& fed, bool with_eval = true) {
  return detail::run_threshold_round(fed, {false, false}, with_eval);
}

/// SpaFL with the importance update disabled.
inline RoundMetrics run_spafl_no_importance_round(Federation& fed, bool with_eval = true) {
  return detail::run_threshold_round(fed, {false, true}, with_eval);
}

inline RoundMetrics run_strategy_round(Federation& fed, bool with_eval = true) {
  switch (fed.config().strategy) {
    case Strategy::spafl:
      return run_round(fed, with_eval);
    case Strategy::spafl_no_importance:
      return run_spafl_no_importance_round(fed, with_eval);
    case Strategy::fedavg:
      return run_fedavg_round(fed, with_eval);
    case Strategy::local_only:
      return run_local_round(fed, with_eval);
    case Strategy::thresholds_only:
      return run_thresholds_only_round(fed, with_eval);
  }
  throw ConfigError("unhandled strategy");
}

}  // namespace spafl
