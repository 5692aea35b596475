#pragma once

// Trainable per-unit thresholds and the structured masks they induce.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "spafl/errors.hpp"
#include "spafl/mask.hpp"
#include "spafl/nn.hpp"
#include "spafl/tensor.hpp"

namespace spafl {

/// One threshold per output unit of every prunable layer, each in [0, 1].
/// This is the only object clients and server exchange.
struct Thresholds {
  std::vector<std::vector<double>> layers;

  static Thresholds zeros(const Architecture& arch) {
    Thresholds t;
    for (auto i : arch.prunable()) t.layers.emplace_back(arch.layers()[i].n_out, 0.0);
    return t;
  }

  std::size_t count() const noexcept {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.size();
    return n;
  }

  bool same_layout(const Thresholds& other) const noexcept {
    if (layers.size() != other.layers.size()) return false;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      if (layers[l].size() != other.layers[l].size()) return false;
    }
    return true;
  }

  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(count());
    for (const auto& l : layers) out.insert(out.end(), l.begin(), l.end());
    return out;
  }

  friend bool operator==(const Thresholds&, const Thresholds&) = default;
};

struct DensityReport {
  std::vector<double> per_layer;  // active rows / n_out
  double overall = 1.0;           // active weights / total weights
};

/// mu_i = (1 / n_in) * sum_j |w_ij|
inline std::vector<double> row_mean_abs(const Tensor& weights) {
  if (weights.rank() != 2 || weights.dim(1) == 0) {
    throw ConfigError("row_mean_abs needs an (n_out, n_in) matrix with n_in >= 1");
  }
  std::vector<double> mu(weights.dim(0));
  for (std::size_t i = 0; i < mu.size(); ++i) {
    double s = 0.0;
    for (double w : weights.row(i)) s += std::abs(w);
    mu[i] = s / static_cast<double>(weights.dim(1));
  }
  return mu;
}

/// Row i stays active iff mu_i >= tau_i (a unit step that keeps at equality).
inline LayerMask generate_mask(std::span<const double> mu,
                               std::span<const double> tau, std::size_t n_in) {
  if (mu.size() != tau.size()) {
    throw ConfigError("generate_mask: " + std::to_string(mu.size()) +
                      " magnitudes vs " + std::to_string(tau.size()) + " thresholds");
  }
  LayerMask mask(mu.size(), n_in);
  for (std::size_t i = 0; i < mu.size(); ++i) mask.set_row(i, mu[i] - tau[i] >= 0.0);
  return mask;
}

/// Masks for every prunable layer from dense weights and thresholds.
inline BinaryMask generate_masks(const NetworkParams& params, const Thresholds& tau) {
  if (params.layers.size() != tau.layers.size()) {
    throw ConfigError("threshold layer count does not match parameters");
  }
  BinaryMask mask;
  mask.layers.reserve(params.layers.size());
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& w = params.layers[l].weight;
    mask.layers.push_back(generate_mask(row_mean_abs(w), tau.layers[l], w.dim(1)));
  }
  return mask;
}

/// Pruned copy w ⊙ p; the dense input is left untouched.
inline Tensor apply_mask(const Tensor& weights, const LayerMask& mask) {
  if (weights.rank() != 2 || weights.dim(0) != mask.n_out() ||
      weights.dim(1) != mask.n_in()) {
    throw ConfigError("apply_mask: shape mismatch");
  }
  Tensor out = weights;
  for (std::size_t i = 0; i < mask.n_out(); ++i) {
    if (mask.row_active(i)) continue;
    for (double& v : out.row(i)) v = 0.0;
  }
  return out;
}

/// R = sum over all thresholds of exp(-tau).
inline double sparsity_regularizer(const Thresholds& tau) {
  double r = 0.0;
  for (const auto& layer : tau.layers) {
    for (double t : layer) r += std::exp(-t);
  }
  return r;
}

/// Straight-through threshold gradient h_i = -sum_j g_ij * w_ij. Pruned rows
/// carry zero weight gradients and therefore contribute nothing.
inline Thresholds threshold_gradient(const GradientSet& grads,
                                     const NetworkParams& weights,
                                     const BinaryMask& mask) {
  if (grads.layers.size() != weights.layers.size() ||
      mask.layers.size() != weights.layers.size()) {
    throw ConfigError("threshold_gradient: layer count mismatch");
  }
  Thresholds h;
  for (std::size_t l = 0; l < weights.layers.size(); ++l) {
    const auto& w = weights.layers[l].weight;
    const auto& g = grads.layers[l].weight;
    if (g.shape() != w.shape()) throw ConfigError("threshold_gradient: shape mismatch");
    std::vector<double> hl(w.dim(0), 0.0);
    for (std::size_t i = 0; i < hl.size(); ++i) {
      if (!mask.layers[l].row_active(i)) continue;
      const auto wr = w.row(i);
      const auto gr = g.row(i);
      double s = 0.0;
      for (std::size_t j = 0; j < wr.size(); ++j) s += gr[j] * wr[j];
      hl[i] = -s;
    }
    h.layers.push_back(std::move(hl));
  }
  return h;
}

/// tau <- clamp(tau - lr * h + alpha * lr * exp(-tau), 0, 1)
inline void threshold_step(Thresholds& tau, const Thresholds& h, double lr,
                           double alpha) {
  if (!tau.same_layout(h)) throw ConfigError("threshold_step: layout mismatch");
  for (std::size_t l = 0; l < tau.layers.size(); ++l) {
    auto& tl = tau.layers[l];
    const auto& hl = h.layers[l];
    for (std::size_t i = 0; i < tl.size(); ++i) {
      const double next = tl[i] - lr * hl[i] + alpha * lr * std::exp(-tl[i]);
      if (!std::isfinite(next)) throw NumericError("non-finite threshold update");
      tl[i] = std::clamp(next, 0.0, 1.0);
    }
  }
}

inline void clamp_thresholds(Thresholds& tau) {
  for (auto& layer : tau.layers) {
    for (double& t : layer) t = std::clamp(t, 0.0, 1.0);
  }
}

inline DensityReport density_metrics(const BinaryMask& mask) {
  DensityReport report;
  std::size_t active = 0, total = 0;
  for (const auto& lm : mask.layers) {
    const std::size_t rows = lm.active_rows();
    report.per_layer.push_back(lm.n_out() ? static_cast<double>(rows) /
                                                static_cast<double>(lm.n_out())
                                          : 1.0);
    active += rows * lm.n_in();
    total += lm.n_out() * lm.n_in();
  }
  report.overall = total ? static_cast<double>(active) / static_cast<double>(total) : 1.0;
  return report;
}

/// Element-wise mean of several reports (the cross-client average density).
inline DensityReport mean_density(std::span<const DensityReport> reports) {
  DensityReport out;
  if (reports.empty()) return out;
  out.per_layer.assign(reports.front().per_layer.size(), 0.0);
  out.overall = 0.0;
  for (const auto& r : reports) {
    for (std::size_t l = 0; l < out.per_layer.size(); ++l) out.per_layer[l] += r.per_layer[l];
    out.overall += r.overall;
  }
  const double n = static_cast<double>(reports.size());
  for (double& v : out.per_layer) v /= n;
  out.overall /= n;
  return out;
}

inline constexpr double kLayerResetDensity = 0.01;

/// Zeroes every layer whose density fell strictly below 1%. Returns how many
/// layers were rescued.
inline std::size_t layer_reset(Thresholds& tau, const DensityReport& density) {
  if (density.per_layer.size() != tau.layers.size()) {
    throw ConfigError("layer_reset: density/threshold layer count mismatch");
  }
  std::size_t reset = 0;
  for (std::size_t l = 0; l < tau.layers.size(); ++l) {
    if (density.per_layer[l] < kLayerResetDensity) {
      std::fill(tau.layers[l].begin(), tau.layers[l].end(), 0.0);
      ++reset;
    }
  }
  return reset;
}

}  // namespace spafl
