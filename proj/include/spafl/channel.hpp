#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "spafl/accounting.hpp"
#include "spafl/nn.hpp"
#include "spafl/pruning.hpp"

namespace spafl {

enum class Direction { uplink, downlink };
enum class Payload { thresholds, dense_parameters };

inline const char* to_string(Payload p) {
  return p == Payload::thresholds ? "thresholds" : "dense_parameters";
}

struct Transfer {
  std::size_t round = 0;
  std::size_t client = 0;
  Direction direction = Direction::uplink;
  Payload payload = Payload::thresholds;
  std::uint64_t scalars = 0;
};

/// Simulated client/server link. Every object crossing the boundary goes
/// through one of the typed send methods, which log a type-tagged record
/// and hand back the receiver's copy. Single writer: the round orchestrator.
class Channel {
 public:
  Thresholds send(std::size_t round, std::size_t client, Direction dir,
                  const Thresholds& tau) {
    log(round, client, dir, Payload::thresholds, tau.count());
    return tau;
  }

  NetworkParams send(std::size_t round, std::size_t client, Direction dir,
                     const NetworkParams& params) {
    log(round, client, dir, Payload::dense_parameters, params.scalar_count());
    return params;
  }

  const std::vector<Transfer>& transfers() const noexcept { return transfers_; }

  std::uint64_t scalars(Direction dir) const noexcept {
    return dir == Direction::uplink ? up_scalars_ : down_scalars_;
  }
  std::uint64_t total_scalars() const noexcept { return up_scalars_ + down_scalars_; }
  std::uint64_t bits(Direction dir) const noexcept { return scalars(dir) * kBitsPerScalar; }
  std::uint64_t total_bits() const noexcept { return total_scalars() * kBitsPerScalar; }

  std::uint64_t round_scalars(std::size_t round) const noexcept {
    std::uint64_t n = 0;
    for (const auto& t : transfers_) {
      if (t.round == round) n += t.scalars;
    }
    return n;
  }

 private:
  void log(std::size_t round, std::size_t client, Direction dir, Payload payload,
           std::uint64_t scalars) {
    transfers_.push_back({round, client, dir, payload, scalars});
    (dir == Direction::uplink ? up_scalars_ : down_scalars_) += scalars;
  }

  std::vector<Transfer> transfers_;
  std::uint64_t up_scalars_ = 0;
  std::uint64_t down_scalars_ = 0;
};

}  // namespace spafl
