#pragma once

// Minimal feed-forward engine: dense, conv2d (im2col lowering), max-pool and
// ReLU layers with hand-written forward/backward passes. Every prunable layer
// is held as an (n_out x n_in) matrix so that structured masks act on rows.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "spafl/errors.hpp"
#include "spafl/mask.hpp"
#include "spafl/tensor.hpp"

namespace spafl {

enum class LayerKind { dense, conv2d, maxpool2d, relu };

inline const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::maxpool2d: return "maxpool2d";
    case LayerKind::relu: return "relu";
  }
  return "?";
}

/// Channel-major activation geometry of a single sample.
struct Geometry {
  std::size_t channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;

  std::size_t volume() const noexcept { return channels * height * width; }
  friend bool operator==(const Geometry&, const Geometry&) = default;
};

struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  std::size_t n_out = 0;     // neurons or filters
  std::size_t n_in = 0;      // flattened fan-in; c_in * kh * kw for conv
  std::size_t kernel_h = 0;  // conv / pool only
  std::size_t kernel_w = 0;
  std::size_t stride = 1;
  bool has_bias = false;
  Geometry input;
  Geometry output;

  bool prunable() const noexcept {
    return kind == LayerKind::dense || kind == LayerKind::conv2d;
  }
  std::size_t weight_count() const noexcept {
    return prunable() ? n_out * n_in : 0;
  }
  std::size_t output_positions() const noexcept {
    return output.height * output.width;
  }
};

/// Ordered layer stack plus the input geometry it consumes.
class Architecture {
 public:
  Architecture() = default;
  explicit Architecture(Geometry input) : input_(input), current_(input) {
    if (input.volume() == 0) throw ConfigError("input geometry has zero volume");
  }

  Architecture& dense(std::size_t n_out, bool bias = true) {
    if (n_out == 0) throw ConfigError("dense layer needs n_out >= 1");
    LayerSpec spec;
    spec.kind = LayerKind::dense;
    spec.n_out = n_out;
    spec.n_in = current_.volume();
    spec.has_bias = bias;
    spec.input = current_;
    spec.output = Geometry{n_out, 1, 1};
    return push(spec);
  }

  Architecture& conv2d(std::size_t n_out, std::size_t kernel_h,
                       std::size_t kernel_w, std::size_t stride = 1,
                       bool bias = true) {
    if (n_out == 0 || stride == 0 || kernel_h == 0 || kernel_w == 0) {
      throw ConfigError("conv2d needs n_out, kernel and stride >= 1");
    }
    if (kernel_h > current_.height || kernel_w > current_.width) {
      throw ConfigError("conv2d kernel larger than its input");
    }
    LayerSpec spec;
    spec.kind = LayerKind::conv2d;
    spec.n_out = n_out;
    spec.n_in = current_.channels * kernel_h * kernel_w;
    spec.kernel_h = kernel_h;
    spec.kernel_w = kernel_w;
    spec.stride = stride;
    spec.has_bias = bias;
    spec.input = current_;
    spec.output = Geometry{n_out, (current_.height - kernel_h) / stride + 1,
                           (current_.width - kernel_w) / stride + 1};
    return push(spec);
  }

  Architecture& maxpool2d(std::size_t kernel, std::size_t stride) {
    if (kernel == 0 || stride == 0) {
      throw ConfigError("maxpool2d needs kernel and stride >= 1");
    }
    if (kernel > current_.height || kernel > current_.width) {
      throw ConfigError("maxpool2d window larger than its input");
    }
    LayerSpec spec;
    spec.kind = LayerKind::maxpool2d;
    spec.n_out = current_.channels;
    spec.n_in = current_.channels;
    spec.kernel_h = kernel;
    spec.kernel_w = kernel;
    spec.stride = stride;
    spec.input = current_;
    spec.output = Geometry{current_.channels,
                           (current_.height - kernel) / stride + 1,
                           (current_.width - kernel) / stride + 1};
    return push(spec);
  }

  Architecture& relu() {
    LayerSpec spec;
    spec.kind = LayerKind::relu;
    spec.n_out = current_.volume();
    spec.n_in = current_.volume();
    spec.input = current_;
    spec.output = current_;
    return push(spec);
  }

  const Geometry& input() const noexcept { return input_; }
  const Geometry& output() const noexcept { return current_; }
  std::size_t n_classes() const noexcept { return current_.volume(); }
  const std::vector<LayerSpec>& layers() const noexcept { return layers_; }

  /// Indices into layers() of the dense/conv layers, in order.
  const std::vector<std::size_t>& prunable() const noexcept {
    return prunable_;
  }
  const LayerSpec& prunable_spec(std::size_t p) const {
    return layers_[prunable_[p]];
  }
  std::vector<LayerSpec> prunable_specs() const {
    std::vector<LayerSpec> out;
    for (auto i : prunable_) out.push_back(layers_[i]);
    return out;
  }

  /// Weight entries only (the d of the cost formulas).
  std::size_t weight_count() const noexcept {
    std::size_t d = 0;
    for (const auto& l : layers_) d += l.weight_count();
    return d;
  }
  /// Weights plus biases: everything a dense exchange has to ship.
  std::size_t parameter_count() const noexcept {
    std::size_t d = weight_count();
    for (const auto& l : layers_) {
      if (l.prunable() && l.has_bias) d += l.n_out;
    }
    return d;
  }

 private:
  Architecture& push(const LayerSpec& spec) {
    if (spec.prunable()) prunable_.push_back(layers_.size());
    layers_.push_back(spec);
    current_ = spec.output;
    return *this;
  }

  Geometry input_;
  Geometry current_;
  std::vector<LayerSpec> layers_;
  std::vector<std::size_t> prunable_;
};

// Lenet-5-Caffe for 1x28x28 inputs: 20/50 filters, then 800 -> 500 -> out.
inline Architecture make_lenet(std::size_t n_classes = 10) {
  Architecture arch(Geometry{1, 28, 28});
  arch.conv2d(20, 5, 5).relu().maxpool2d(2, 2)
      .conv2d(50, 5, 5).relu().maxpool2d(2, 2)
      .dense(500).relu()
      .dense(n_classes);
  return arch;
}

// Seven-layer CNN for 3x32x32 inputs.
inline Architecture make_cnn7(std::size_t n_classes = 10) {
  Architecture arch(Geometry{3, 32, 32});
  arch.conv2d(64, 5, 5).relu().conv2d(64, 5, 5).relu().maxpool2d(2, 2)
      .conv2d(128, 5, 5).relu().conv2d(128, 5, 5).relu().maxpool2d(2, 2)
      .dense(128).relu()
      .dense(128).relu()
      .dense(n_classes);
  return arch;
}

inline Architecture make_mlp(std::size_t input_dim,
                             const std::vector<std::size_t>& hidden,
                             std::size_t n_classes, bool bias = true) {
  Architecture arch(Geometry{input_dim, 1, 1});
  for (auto width : hidden) arch.dense(width, bias).relu();
  arch.dense(n_classes, bias);
  return arch;
}

struct LayerParams {
  Tensor weight;  // (n_out, n_in)
  Tensor bias;    // (n_out), empty when the layer has no bias

  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

/// Trainable tensors of the prunable layers, in architecture order.
struct NetworkParams {
  std::vector<LayerParams> layers;

  std::size_t scalar_count() const noexcept {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
  }

  template <typename Fn>
  void for_each_tensor(Fn&& fn) {
    for (auto& l : layers) {
      fn(l.weight);
      if (!l.bias.empty()) fn(l.bias);
    }
  }
  template <typename Fn>
  void for_each_tensor(Fn&& fn) const {
    for (const auto& l : layers) {
      fn(l.weight);
      if (!l.bias.empty()) fn(l.bias);
    }
  }

  friend bool operator==(const NetworkParams&, const NetworkParams&) = default;
};

// Same layout as NetworkParams; kept as aliases so signatures read by role.
using GradientSet = NetworkParams;
using VelocitySet = NetworkParams;

inline NetworkParams zeros_like(const NetworkParams& params) {
  NetworkParams out;
  out.layers.reserve(params.layers.size());
  for (const auto& l : params.layers) {
    out.layers.push_back(
        {Tensor(l.weight.shape()),
         l.bias.empty() ? Tensor() : Tensor(l.bias.shape())});
  }
  return out;
}

inline BinaryMask full_mask(const Architecture& arch, bool active = true) {
  BinaryMask mask;
  for (auto i : arch.prunable()) {
    const auto& spec = arch.layers()[i];
    mask.layers.emplace_back(spec.n_out, spec.n_in, active);
  }
  return mask;
}

inline void clamp_parameters(NetworkParams& params) {
  params.for_each_tensor([](Tensor& t) {
    for (double& v : t.values()) v = std::clamp(v, -1.0, 1.0);
  });
}

/// Uniform(-b, b) with b = sqrt(1 / n_in) for weights and biases, clamped.
template <typename Rng>
NetworkParams init_params(const Architecture& arch, Rng& rng) {
  NetworkParams params;
  for (auto i : arch.prunable()) {
    const auto& spec = arch.layers()[i];
    const double bound = std::sqrt(1.0 / static_cast<double>(spec.n_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    LayerParams lp{Tensor({spec.n_out, spec.n_in}), Tensor()};
    for (double& v : lp.weight.values()) v = dist(rng);
    if (spec.has_bias) {
      lp.bias = Tensor({spec.n_out});
      for (double& v : lp.bias.values()) v = dist(rng);
    }
    params.layers.push_back(std::move(lp));
  }
  clamp_parameters(params);
  return params;
}

inline void check_layout(const Architecture& arch, const NetworkParams& params,
                         const BinaryMask& mask) {
  const auto& prunable = arch.prunable();
  if (params.layers.size() != prunable.size() ||
      mask.layers.size() != prunable.size()) {
    throw ConfigError("parameter/mask layer count does not match architecture");
  }
  for (std::size_t p = 0; p < prunable.size(); ++p) {
    const auto& spec = arch.layers()[prunable[p]];
    const auto& lp = params.layers[p];
    if (lp.weight.shape() != Shape{spec.n_out, spec.n_in}) {
      throw ConfigError("weight shape " + shape_string(lp.weight.shape()) +
                        " does not match layer " + std::to_string(p));
    }
    if (spec.has_bias != !lp.bias.empty() ||
        (spec.has_bias && lp.bias.size() != spec.n_out)) {
      throw ConfigError("bias layout does not match layer " + std::to_string(p));
    }
    if (mask.layers[p].n_out() != spec.n_out ||
        mask.layers[p].n_in() != spec.n_in) {
      throw ConfigError("mask shape does not match layer " + std::to_string(p));
    }
  }
}

namespace detail {

inline std::size_t batch_size_of(const Architecture& arch, const Tensor& batch) {
  if (batch.rank() < 1 || batch.dim(0) == 0) {
    throw ConfigError("batch must have a non-empty leading dimension");
  }
  const std::size_t per_sample = batch.size() / batch.dim(0);
  if (per_sample != arch.input().volume()) {
    throw ConfigError("batch sample volume " + std::to_string(per_sample) +
                      " does not match first layer input " +
                      std::to_string(arch.input().volume()));
  }
  return batch.dim(0);
}

// Unfolds one sample (C,H,W) into (n_in, Ho*Wo) patch columns.
inline void im2col(const LayerSpec& spec, const double* x, std::vector<double>& cols) {
  const auto& in = spec.input;
  const std::size_t ho = spec.output.height, wo = spec.output.width;
  const std::size_t positions = ho * wo;
  cols.assign(spec.n_in * positions, 0.0);
  std::size_t j = 0;
  for (std::size_t c = 0; c < in.channels; ++c) {
    for (std::size_t u = 0; u < spec.kernel_h; ++u) {
      for (std::size_t v = 0; v < spec.kernel_w; ++v, ++j) {
        double* col = cols.data() + j * positions;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const double* src = x + (c * in.height + oy * spec.stride + u) * in.width + v;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            col[oy * wo + ox] = src[ox * spec.stride];
          }
        }
      }
    }
  }
}

inline void col2im_add(const LayerSpec& spec, const std::vector<double>& cols,
                       double* dx) {
  const auto& in = spec.input;
  const std::size_t ho = spec.output.height, wo = spec.output.width;
  const std::size_t positions = ho * wo;
  std::size_t j = 0;
  for (std::size_t c = 0; c < in.channels; ++c) {
    for (std::size_t u = 0; u < spec.kernel_h; ++u) {
      for (std::size_t v = 0; v < spec.kernel_w; ++v, ++j) {
        const double* col = cols.data() + j * positions;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          double* dst = dx + (c * in.height + oy * spec.stride + u) * in.width + v;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            dst[ox * spec.stride] += col[oy * wo + ox];
          }
        }
      }
    }
  }
}

// Per-layer activations of one forward pass, kept for the backward pass.
struct Trace {
  std::vector<std::vector<double>> acts;           // acts[0] is the input
  std::vector<std::vector<std::size_t>> argmax;    // per max-pool layer index
};

inline Trace run_forward(const Architecture& arch, const NetworkParams& params,
                         const BinaryMask& mask, const Tensor& batch) {
  check_layout(arch, params, mask);
  const std::size_t n = batch_size_of(arch, batch);
  const auto& layers = arch.layers();

  Trace trace;
  trace.acts.resize(layers.size() + 1);
  trace.argmax.resize(layers.size());
  trace.acts[0].assign(batch.values().begin(), batch.values().end());

  std::size_t p = 0;
  std::vector<double> cols;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& spec = layers[l];
    const auto& x = trace.acts[l];
    auto& y = trace.acts[l + 1];
    const std::size_t in_vol = spec.input.volume();
    const std::size_t out_vol = spec.output.volume();
    y.assign(n * out_vol, 0.0);

    switch (spec.kind) {
      case LayerKind::dense: {
        const auto& lp = params.layers[p];
        const auto& lm = mask.layers[p];
        for (std::size_t b = 0; b < n; ++b) {
          const double* xb = x.data() + b * in_vol;
          double* yb = y.data() + b * out_vol;
          for (std::size_t i = 0; i < spec.n_out; ++i) {
            if (!lm.row_active(i)) continue;
            const auto w = lp.weight.row(i);
            double s = lp.bias.empty() ? 0.0 : lp.bias[i];
            for (std::size_t j = 0; j < spec.n_in; ++j) s += w[j] * xb[j];
            yb[i] = s;
          }
        }
        ++p;
        break;
      }
      case LayerKind::conv2d: {
        const auto& lp = params.layers[p];
        const auto& lm = mask.layers[p];
        const std::size_t positions = spec.output_positions();
        for (std::size_t b = 0; b < n; ++b) {
          im2col(spec, x.data() + b * in_vol, cols);
          double* yb = y.data() + b * out_vol;
          for (std::size_t f = 0; f < spec.n_out; ++f) {
            if (!lm.row_active(f)) continue;
            double* out = yb + f * positions;
            const double bias = lp.bias.empty() ? 0.0 : lp.bias[f];
            std::fill(out, out + positions, bias);
            const auto w = lp.weight.row(f);
            for (std::size_t j = 0; j < spec.n_in; ++j) {
              const double wv = w[j];
              const double* col = cols.data() + j * positions;
              for (std::size_t q = 0; q < positions; ++q) out[q] += wv * col[q];
            }
          }
        }
        ++p;
        break;
      }
      case LayerKind::maxpool2d: {
        auto& arg = trace.argmax[l];
        arg.assign(n * out_vol, 0);
        const auto& in = spec.input;
        const auto& out = spec.output;
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t c = 0; c < in.channels; ++c) {
            const std::size_t plane = b * in_vol + c * in.height * in.width;
            for (std::size_t oy = 0; oy < out.height; ++oy) {
              for (std::size_t ox = 0; ox < out.width; ++ox) {
                std::size_t best = plane + (oy * spec.stride) * in.width + ox * spec.stride;
                // first (lowest-index) maximum wins ties
                for (std::size_t u = 0; u < spec.kernel_h; ++u) {
                  for (std::size_t v = 0; v < spec.kernel_w; ++v) {
                    const std::size_t idx =
                        plane + (oy * spec.stride + u) * in.width + ox * spec.stride + v;
                    if (x[idx] > x[best]) best = idx;
                  }
                }
                const std::size_t o = b * out_vol + (c * out.height + oy) * out.width + ox;
                y[o] = x[best];
                arg[o] = best;
              }
            }
          }
        }
        break;
      }
      case LayerKind::relu:
        for (std::size_t k = 0; k < y.size(); ++k) y[k] = x[k] > 0.0 ? x[k] : 0.0;
        break;
    }
  }
  return trace;
}

}  // namespace detail

/// Logits of the pruned model w ⊙ p on `batch`, shape (batch, n_classes).
inline Tensor forward_pass(const Architecture& arch, const NetworkParams& params,
                           const BinaryMask& mask, const Tensor& batch) {
  auto trace = detail::run_forward(arch, params, mask, batch);
  const std::size_t n = batch.dim(0);
  return Tensor({n, arch.n_classes()}, std::move(trace.acts.back()));
}

inline void check_labels(std::span<const std::size_t> labels, std::size_t n,
                         std::size_t n_classes) {
  if (labels.size() != n) {
    throw DataError("label count " + std::to_string(labels.size()) +
                    " does not match batch size " + std::to_string(n));
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= n_classes) {
      throw DataError("label " + std::to_string(labels[i]) + " at position " +
                      std::to_string(i) + " outside [0, " +
                      std::to_string(n_classes) + ")");
    }
  }
}

/// Mean of -log softmax(logits)[label], stabilized with log-sum-exp.
inline double loss_cross_entropy(const Tensor& logits,
                                 std::span<const std::size_t> labels) {
  if (logits.rank() != 2) throw ConfigError("logits must be (batch, classes)");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  check_labels(labels, n, c);
  double total = 0.0;
  for (std::size_t b = 0; b < n; ++b) {
    const auto z = logits.row(b);
    const double m = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double v : z) s += std::exp(v - m);
    total += m + std::log(s) - z[labels[b]];
  }
  return total / static_cast<double>(n);
}

struct BackwardResult {
  double loss = 0.0;
  GradientSet grads;
};

/// Mean cross-entropy and its gradient w.r.t. the pruned weights. Rows of
/// pruned units get exactly-zero gradients (their bias included).
inline BackwardResult backward_pass(const Architecture& arch,
                                    const NetworkParams& params,
                                    const BinaryMask& mask, const Tensor& batch,
                                    std::span<const std::size_t> labels) {
  auto trace = detail::run_forward(arch, params, mask, batch);
  const std::size_t n = batch.dim(0);
  const std::size_t classes = arch.n_classes();
  check_labels(labels, n, classes);

  BackwardResult result;
  Tensor logits({n, classes}, trace.acts.back());
  result.loss = loss_cross_entropy(logits, labels);
  result.grads = zeros_like(params);

  // dL/dlogits = (softmax - onehot) / n
  std::vector<double> delta(n * classes);
  for (std::size_t b = 0; b < n; ++b) {
    const auto z = logits.row(b);
    const double m = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double v : z) s += std::exp(v - m);
    for (std::size_t k = 0; k < classes; ++k) {
      delta[b * classes + k] = std::exp(z[k] - m) / s / static_cast<double>(n);
    }
    delta[b * classes + labels[b]] -= 1.0 / static_cast<double>(n);
  }

  const auto& layers = arch.layers();
  std::size_t p = arch.prunable().size();
  std::vector<double> cols, dcols;
  for (std::size_t l = layers.size(); l-- > 0;) {
    const auto& spec = layers[l];
    const auto& x = trace.acts[l];
    const std::size_t in_vol = spec.input.volume();
    const std::size_t out_vol = spec.output.volume();
    const bool need_dx = l > 0;
    std::vector<double> dx(need_dx ? n * in_vol : 0, 0.0);

    switch (spec.kind) {
      case LayerKind::dense: {
        --p;
        const auto& lp = params.layers[p];
        const auto& lm = mask.layers[p];
        auto& g = result.grads.layers[p];
        for (std::size_t b = 0; b < n; ++b) {
          const double* xb = x.data() + b * in_vol;
          const double* db = delta.data() + b * out_vol;
          double* dxb = need_dx ? dx.data() + b * in_vol : nullptr;
          for (std::size_t i = 0; i < spec.n_out; ++i) {
            if (!lm.row_active(i)) continue;
            const double d = db[i];
            auto gw = g.weight.row(i);
            for (std::size_t j = 0; j < spec.n_in; ++j) gw[j] += d * xb[j];
            if (!g.bias.empty()) g.bias[i] += d;
            if (dxb) {
              const auto w = lp.weight.row(i);
              for (std::size_t j = 0; j < spec.n_in; ++j) dxb[j] += w[j] * d;
            }
          }
        }
        break;
      }
      case LayerKind::conv2d: {
        --p;
        const auto& lp = params.layers[p];
        const auto& lm = mask.layers[p];
        auto& g = result.grads.layers[p];
        const std::size_t positions = spec.output_positions();
        for (std::size_t b = 0; b < n; ++b) {
          detail::im2col(spec, x.data() + b * in_vol, cols);
          if (need_dx) dcols.assign(cols.size(), 0.0);
          const double* db = delta.data() + b * out_vol;
          for (std::size_t f = 0; f < spec.n_out; ++f) {
            if (!lm.row_active(f)) continue;
            const double* dout = db + f * positions;
            auto gw = g.weight.row(f);
            const auto w = lp.weight.row(f);
            double gb = 0.0;
            for (std::size_t q = 0; q < positions; ++q) gb += dout[q];
            if (!g.bias.empty()) g.bias[f] += gb;
            for (std::size_t j = 0; j < spec.n_in; ++j) {
              const double* col = cols.data() + j * positions;
              double s = 0.0;
              for (std::size_t q = 0; q < positions; ++q) s += dout[q] * col[q];
              gw[j] += s;
              if (need_dx) {
                double* dcol = dcols.data() + j * positions;
                const double wv = w[j];
                for (std::size_t q = 0; q < positions; ++q) dcol[q] += wv * dout[q];
              }
            }
          }
          if (need_dx) detail::col2im_add(spec, dcols, dx.data() + b * in_vol);
        }
        break;
      }
      case LayerKind::maxpool2d: {
        if (need_dx) {
          const auto& arg = trace.argmax[l];
          for (std::size_t o = 0; o < arg.size(); ++o) dx[arg[o]] += delta[o];
        }
        break;
      }
      case LayerKind::relu:
        if (need_dx) {
          for (std::size_t k = 0; k < dx.size(); ++k) {
            dx[k] = x[k] > 0.0 ? delta[k] : 0.0;
          }
        }
        break;
    }
    delta = std::move(dx);
  }
  return result;
}

/// v <- momentum * v + g; w <- w - lr * v. Rows inactive in `active` (when
/// given) keep both their weights and their velocity. Clamping is separate.
inline void sgd_momentum_step(NetworkParams& params, const GradientSet& grads,
                              VelocitySet& velocity, double lr, double momentum,
                              const BinaryMask* active = nullptr) {
  if (!(lr >= 0.0) || !(momentum >= 0.0 && momentum < 1.0)) {
    throw ConfigError("sgd step needs lr >= 0 and momentum in [0, 1)");
  }
  if (grads.layers.size() != params.layers.size() ||
      velocity.layers.size() != params.layers.size()) {
    throw ConfigError("gradient/velocity layout does not match parameters");
  }
  grads.for_each_tensor([](const Tensor& t) {
    if (!t.all_finite()) throw NumericError("non-finite gradient entry; step rejected");
  });

  for (std::size_t p = 0; p < params.layers.size(); ++p) {
    auto& lp = params.layers[p];
    const auto& lg = grads.layers[p];
    auto& lv = velocity.layers[p];
    if (lg.weight.shape() != lp.weight.shape() || lv.weight.shape() != lp.weight.shape() ||
        lg.bias.size() != lp.bias.size() || lv.bias.size() != lp.bias.size()) {
      throw ConfigError("gradient/velocity shape mismatch in layer " + std::to_string(p));
    }
    const std::size_t rows = lp.weight.dim(0);
    const std::size_t cols = lp.weight.dim(1);
    for (std::size_t i = 0; i < rows; ++i) {
      if (active && !active->layers[p].row_active(i)) continue;
      for (std::size_t j = 0; j < cols; ++j) {
        const std::size_t k = i * cols + j;
        lv.weight[k] = momentum * lv.weight[k] + lg.weight[k];
        lp.weight[k] -= lr * lv.weight[k];
      }
      if (!lp.bias.empty()) {
        lv.bias[i] = momentum * lv.bias[i] + lg.bias[i];
        lp.bias[i] -= lr * lv.bias[i];
      }
    }
  }
}

/// Addresses one scalar: prunable layer, weight or bias, flat offset.
struct ParamIndex {
  std::size_t layer = 0;
  bool bias = false;
  std::size_t offset = 0;
};

inline double& param_at(NetworkParams& params, const ParamIndex& index) {
  auto& lp = params.layers.at(index.layer);
  Tensor& t = index.bias ? lp.bias : lp.weight;
  if (index.offset >= t.size()) throw ConfigError("parameter index out of range");
  return t[index.offset];
}

template <typename Fn>
double central_difference(Fn&& f, double x, double step) {
  return (f(x + step) - f(x - step)) / (2.0 * step);
}

/// Central finite difference of the masked loss w.r.t. one parameter.
inline double finite_diff_oracle(const Architecture& arch, NetworkParams params,
                                 const BinaryMask& mask, const Tensor& batch,
                                 std::span<const std::size_t> labels,
                                 const ParamIndex& index, double step) {
  if (!(step > 0.0)) throw ConfigError("finite difference step must be > 0");
  double& slot = param_at(params, index);
  const double original = slot;
  return central_difference(
      [&](double v) {
        slot = v;
        const double loss =
            loss_cross_entropy(forward_pass(arch, params, mask, batch), labels);
        slot = original;
        return loss;
      },
      original, step);
}

}  // namespace spafl
