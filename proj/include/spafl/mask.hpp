#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "spafl/tensor.hpp"

namespace spafl {

/// Structured {0,1} mask for one (n_out x n_in) weight matrix.
///
/// Only the per-row state is stored, so every row is constant by
/// construction: a unit is either fully connected or fully removed.
class LayerMask {
 public:
  LayerMask() = default;
  LayerMask(std::size_t n_out, std::size_t n_in, bool active = true)
      : rows_(n_out, active ? 1 : 0), n_in_(n_in) {}

  std::size_t n_out() const noexcept { return rows_.size(); }
  std::size_t n_in() const noexcept { return n_in_; }

  bool row_active(std::size_t row) const noexcept { return rows_[row] != 0; }
  void set_row(std::size_t row, bool active) noexcept {
    rows_[row] = active ? 1 : 0;
  }

  double at(std::size_t row, std::size_t /*col*/) const noexcept {
    return row_active(row) ? 1.0 : 0.0;
  }

  std::size_t active_rows() const noexcept {
    std::size_t n = 0;
    for (auto r : rows_) n += r;
    return n;
  }

  /// Materializes the full (n_out, n_in) matrix.
  Tensor expand() const {
    Tensor out({n_out(), n_in_});
    for (std::size_t i = 0; i < n_out(); ++i) {
      for (std::size_t j = 0; j < n_in_; ++j) out.at(i, j) = at(i, j);
    }
    return out;
  }

  friend bool operator==(const LayerMask&, const LayerMask&) = default;

 private:
  std::vector<std::uint8_t> rows_;
  std::size_t n_in_ = 0;
};

/// One LayerMask per prunable layer, in architecture order.
struct BinaryMask {
  std::vector<LayerMask> layers;

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
};

}  // namespace spafl
