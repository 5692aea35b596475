#pragma once

// Communication and FLOPs bookkeeping. Scalars travel as 32-bit values on
// the wire regardless of the 64-bit arithmetic used for training.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "spafl/errors.hpp"
#include "spafl/nn.hpp"

namespace spafl {

inline constexpr std::uint64_t kBitsPerScalar = 32;

/// T * (up + down) with up = down = K * tau_num * 32.
constexpr std::uint64_t spafl_comm_bits(std::uint64_t clients_per_round,
                                        std::uint64_t threshold_count,
                                        std::uint64_t rounds) {
  return rounds * 2 * clients_per_round * threshold_count * kBitsPerScalar;
}

/// Same exchange pattern with full parameter vectors in place of thresholds.
constexpr std::uint64_t dense_comm_bits(std::uint64_t clients_per_round,
                                        std::uint64_t parameter_count,
                                        std::uint64_t rounds) {
  return rounds * 2 * clients_per_round * parameter_count * kBitsPerScalar;
}

inline std::size_t threshold_count(std::span<const LayerSpec> layers) {
  std::size_t n = 0;
  for (const auto& l : layers) {
    if (l.prunable()) n += l.n_out;
  }
  return n;
}

inline std::size_t threshold_count(const Architecture& arch) {
  return threshold_count(arch.layers());
}

/// Forward FLOPs of one layer over `samples` inputs at density rho:
///   conv:  rho * N * (C*R*S) * F * H * W   (H, W = output size)
///   dense: rho * N * X * Y
/// Pooling and activations are not counted.
inline std::uint64_t layer_flops_forward(const LayerSpec& layer, double density,
                                         std::uint64_t samples) {
  if (!(density >= 0.0 && density <= 1.0)) throw ConfigError("density outside [0, 1]");
  double flops = 0.0;
  switch (layer.kind) {
    case LayerKind::conv2d:
      flops = density * static_cast<double>(samples) * static_cast<double>(layer.n_in) *
              static_cast<double>(layer.n_out) * static_cast<double>(layer.output_positions());
      break;
    case LayerKind::dense:
      flops = density * static_cast<double>(samples) * static_cast<double>(layer.n_in) *
              static_cast<double>(layer.n_out);
      break;
    default:
      return 0;
  }
  return static_cast<std::uint64_t>(std::llround(flops));
}

/// 1.5 * d, rounded half up for odd d.
constexpr std::uint64_t importance_update_flops(std::uint64_t weight_count) {
  return (3 * weight_count + 1) / 2;
}

/// One local epoch: forward + backward (2x forward) for every prunable layer
/// over `samples` inputs, plus the 1.5 d importance update when requested.
/// `densities` holds one entry per prunable layer.
inline std::uint64_t epoch_flops(const Architecture& arch, std::span<const double> densities,
                                 std::uint64_t samples, bool include_importance_update) {
  const auto& prunable = arch.prunable();
  if (densities.size() != prunable.size()) {
    throw ConfigError("epoch_flops: one density per prunable layer required");
  }
  std::uint64_t total = 0;
  for (std::size_t p = 0; p < prunable.size(); ++p) {
    total += 3 * layer_flops_forward(arch.layers()[prunable[p]], densities[p], samples);
  }
  if (include_importance_update) total += importance_update_flops(arch.weight_count());
  return total;
}

struct RoundCost {
  std::uint64_t uplink_bits = 0;
  std::uint64_t downlink_bits = 0;
  std::uint64_t flops = 0;
};

/// Cumulative costs; appended once per round at the aggregation barrier.
class CostLedger {
 public:
  void record_round(const RoundCost& cost) {
    uplink_bits_ += cost.uplink_bits;
    downlink_bits_ += cost.downlink_bits;
    flops_ += cost.flops;
    rounds_.push_back(cost);
  }

  std::uint64_t uplink_bits() const noexcept { return uplink_bits_; }
  std::uint64_t downlink_bits() const noexcept { return downlink_bits_; }
  std::uint64_t total_bits() const noexcept { return uplink_bits_ + downlink_bits_; }
  std::uint64_t flops() const noexcept { return flops_; }
  const std::vector<RoundCost>& rounds() const noexcept { return rounds_; }

 private:
  std::uint64_t uplink_bits_ = 0;
  std::uint64_t downlink_bits_ = 0;
  std::uint64_t flops_ = 0;
  std::vector<RoundCost> rounds_;
};

/// Published setups whose communication totals can be recomputed exactly.
struct CommPreset {
  const char* name;
  std::uint64_t clients_per_round;
  std::uint64_t threshold_count;
  std::uint64_t weight_count;  // 0 when no dense analog is available
  std::uint64_t rounds;
};

inline constexpr CommPreset kCommPresets[] = {
    {"fmnist-lenet", 10, 580, 430500, 500},
    {"cifar10-cnn7", 10, 1418, 804800, 500},  // weights of make_cnn7()
    {"cifar100-resnet18", 10, 4800, 0, 1500},
};

}  // namespace spafl
