#pragma once

// Dataset ingestion and non-iid client partitioning.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "spafl/errors.hpp"
#include "spafl/nn.hpp"
#include "spafl/tensor.hpp"

namespace spafl {

struct Dataset {
  Tensor samples;                   // (n, volume of geometry)
  std::vector<std::size_t> labels;  // n entries in [0, n_classes)
  std::size_t n_classes = 0;
  Geometry geometry;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t sample_volume() const noexcept { return geometry.volume(); }

  /// Copies the selected samples into a contiguous batch.
  Tensor gather(std::span<const std::size_t> indices) const {
    const std::size_t vol = sample_volume();
    Tensor batch({indices.size(), vol});
    for (std::size_t r = 0; r < indices.size(); ++r) {
      const auto src = samples.row(indices[r]);
      std::copy(src.begin(), src.end(), batch.row(r).begin());
    }
    return batch;
  }

  std::vector<std::size_t> gather_labels(std::span<const std::size_t> indices) const {
    std::vector<std::size_t> out(indices.size());
    for (std::size_t r = 0; r < indices.size(); ++r) out[r] = labels[indices[r]];
    return out;
  }
};

// ---------------------------------------------------------------------------
// IDX container (big-endian):
//   images: u32 magic 0x00000803, u32 n, u32 rows, u32 cols, n*rows*cols u8
//   labels: u32 magic 0x00000801, u32 n, n u8
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

namespace detail {

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<std::uint8_t>& bytes,
                               std::size_t offset, const std::string& path) {
  if (offset + 4 > bytes.size()) {
    throw DataError(path + ": truncated header at byte offset " + std::to_string(offset));
  }
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

inline void write_be32(std::ofstream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16),
                     static_cast<char>(v >> 8), static_cast<char>(v)};
  out.write(b, 4);
}

inline std::string hex32(std::uint32_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s = "0x";
  for (int shift = 28; shift >= 0; shift -= 4) s += digits[(v >> shift) & 0xF];
  return s;
}

}  // namespace detail

/// Reads an IDX image/label pair. Pixels are scaled to [0, 1]. When
/// `n_classes` is 0 it is inferred as max(label) + 1.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                        std::size_t n_classes = 0) {
  const auto img = detail::read_file(images_path);
  const auto lab = detail::read_file(labels_path);

  const auto img_magic = detail::read_be32(img, 0, images_path);
  if (img_magic != kIdxImageMagic) {
    throw DataError(images_path + ": bad magic " + detail::hex32(img_magic) +
                    " at byte offset 0, expected " + detail::hex32(kIdxImageMagic));
  }
  const auto lab_magic = detail::read_be32(lab, 0, labels_path);
  if (lab_magic != kIdxLabelMagic) {
    throw DataError(labels_path + ": bad magic " + detail::hex32(lab_magic) +
                    " at byte offset 0, expected " + detail::hex32(kIdxLabelMagic));
  }

  const std::size_t n = detail::read_be32(img, 4, images_path);
  const std::size_t rows = detail::read_be32(img, 8, images_path);
  const std::size_t cols = detail::read_be32(img, 12, images_path);
  const std::size_t n_labels = detail::read_be32(lab, 4, labels_path);
  if (n == 0) throw DataError(images_path + ": declares 0 images at byte offset 4");
  if (rows == 0 || cols == 0) {
    throw DataError(images_path + ": zero image dimension at byte offset 8");
  }
  if (n_labels != n) {
    throw DataError(labels_path + ": declares " + std::to_string(n_labels) +
                    " labels at byte offset 4 but images declare " + std::to_string(n));
  }
  const std::size_t vol = rows * cols;
  if (img.size() < 16 + n * vol) {
    throw DataError(images_path + ": truncated pixel data, file ends at byte offset " +
                    std::to_string(img.size()) + ", expected " +
                    std::to_string(16 + n * vol));
  }
  if (lab.size() < 8 + n) {
    throw DataError(labels_path + ": truncated label data, file ends at byte offset " +
                    std::to_string(lab.size()) + ", expected " + std::to_string(8 + n));
  }

  Dataset ds;
  ds.geometry = Geometry{1, rows, cols};
  ds.samples = Tensor({n, vol});
  for (std::size_t k = 0; k < n * vol; ++k) ds.samples[k] = img[16 + k] / 255.0;
  ds.labels.resize(n);
  std::size_t max_label = 0;
  for (std::size_t k = 0; k < n; ++k) {
    ds.labels[k] = lab[8 + k];
    max_label = std::max(max_label, ds.labels[k]);
  }
  ds.n_classes = n_classes ? n_classes : max_label + 1;
  if (max_label >= ds.n_classes) {
    throw DataError(labels_path + ": label " + std::to_string(max_label) +
                    " outside [0, " + std::to_string(ds.n_classes) + ")");
  }
  return ds;
}

/// Writes a single-channel dataset as an IDX pair (pixels rounded to u8).
inline void save_idx(const Dataset& ds, const std::string& images_path,
                     const std::string& labels_path) {
  if (ds.geometry.channels != 1) throw DataError("IDX images are single-channel");
  std::ofstream img(images_path, std::ios::binary);
  std::ofstream lab(labels_path, std::ios::binary);
  if (!img || !lab) throw DataError("cannot write IDX files");
  detail::write_be32(img, kIdxImageMagic);
  detail::write_be32(img, static_cast<std::uint32_t>(ds.size()));
  detail::write_be32(img, static_cast<std::uint32_t>(ds.geometry.height));
  detail::write_be32(img, static_cast<std::uint32_t>(ds.geometry.width));
  for (double v : ds.samples.values()) {
    img.put(static_cast<char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  }
  detail::write_be32(lab, kIdxLabelMagic);
  detail::write_be32(lab, static_cast<std::uint32_t>(ds.size()));
  for (auto l : ds.labels) lab.put(static_cast<char>(l));
}

/// Balanced Gaussian-mixture classification data. Each class has a
/// unit-norm mean; samples are mean + spread * N(0, I), mapped through
/// x -> 0.5 + 0.5 x and clipped to [0, 1]. Samples are stored class-major.
inline Dataset synth_dataset(std::size_t n_classes, Geometry geometry,
                             std::size_t n_per_class, double spread,
                             std::uint64_t seed) {
  const std::size_t dim = geometry.volume();
  if (n_classes < 2 || dim < 1) throw ConfigError("synth_dataset needs >= 2 classes and dim >= 1");
  if (n_per_class < 1) throw ConfigError("synth_dataset needs >= 1 sample per class");
  if (!(spread >= 0.0)) throw ConfigError("synth_dataset spread must be >= 0");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  std::vector<std::vector<double>> means(n_classes, std::vector<double>(dim));
  for (auto& m : means) {
    double norm = 0.0;
    do {
      norm = 0.0;
      for (double& v : m) {
        v = normal(rng);
        norm += v * v;
      }
    } while (norm == 0.0);
    norm = std::sqrt(norm);
    for (double& v : m) v /= norm;
  }

  Dataset ds;
  ds.geometry = geometry;
  ds.n_classes = n_classes;
  ds.samples = Tensor({n_classes * n_per_class, dim});
  ds.labels.resize(n_classes * n_per_class);
  // per-coordinate class offsets land near +-0.25 whatever the dimension
  const double scale = 0.25 * std::sqrt(static_cast<double>(dim));
  std::size_t r = 0;
  for (std::size_t c = 0; c < n_classes; ++c) {
    for (std::size_t k = 0; k < n_per_class; ++k, ++r) {
      auto row = ds.samples.row(r);
      for (std::size_t j = 0; j < dim; ++j) {
        const double x = means[c][j] + (spread > 0.0 ? spread * normal(rng) : 0.0);
        row[j] = std::clamp(0.5 + scale * x, 0.0, 1.0);
      }
      ds.labels[r] = c;
    }
  }
  return ds;
}

inline Dataset synth_dataset(std::size_t n_classes, std::size_t dim,
                             std::size_t n_per_class, double spread, std::uint64_t seed) {
  return synth_dataset(n_classes, Geometry{dim, 1, 1}, n_per_class, spread, seed);
}

// ---------------------------------------------------------------------------
// Partitioning
// ---------------------------------------------------------------------------

struct ClientIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

struct Partition {
  std::vector<ClientIndices> clients;
  std::vector<std::size_t> without_test;  // clients whose test split is empty
};

inline constexpr std::size_t kDirichletRetries = 100;

/// Per-class Dirichlet(beta) allocation of `pool` over n_clients. Each
/// class's shuffled indices are cut at the cumulative Dirichlet shares;
/// the draw repeats until every client holds >= min_per_client samples.
inline std::vector<std::vector<std::size_t>> dirichlet_partition(
    std::span<const std::size_t> labels, std::size_t n_classes, std::size_t n_clients,
    double beta, std::uint64_t seed, std::size_t min_per_client = 2) {
  if (!(beta > 0.0)) throw ConfigError("Dirichlet concentration must be > 0");
  if (n_clients < 1) throw ConfigError("need at least one client");

  std::vector<std::vector<std::size_t>> by_class(n_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= n_classes) throw DataError("label outside [0, n_classes)");
    by_class[labels[i]].push_back(i);
  }

  std::mt19937_64 rng(seed);
  std::gamma_distribution<double> gamma(beta, 1.0);
  std::vector<double> share(n_clients);

  for (std::size_t attempt = 0; attempt < kDirichletRetries; ++attempt) {
    std::vector<std::vector<std::size_t>> parts(n_clients);
    for (auto idx : by_class) {
      std::shuffle(idx.begin(), idx.end(), rng);
      double total = 0.0;
      while (total <= 0.0) {
        total = 0.0;
        for (double& s : share) total += (s = gamma(rng));
      }
      double cum = 0.0;
      std::size_t begin = 0;
      for (std::size_t k = 0; k < n_clients; ++k) {
        cum += share[k] / total;
        const std::size_t end =
            k + 1 == n_clients
                ? idx.size()
                : std::min(idx.size(), static_cast<std::size_t>(cum * static_cast<double>(idx.size())));
        for (std::size_t q = begin; q < std::max(begin, end); ++q) parts[k].push_back(idx[q]);
        begin = std::max(begin, end);
      }
    }
    const bool ok = std::all_of(parts.begin(), parts.end(),
                                [&](const auto& p) { return p.size() >= min_per_client; });
    if (ok) {
      for (auto& p : parts) std::sort(p.begin(), p.end());
      return parts;
    }
  }
  throw ConfigError("Dirichlet partition failed to give every client >= " +
                    std::to_string(min_per_client) + " samples after " +
                    std::to_string(kDirichletRetries) +
                    " draws; use a larger dataset, fewer clients or a larger beta");
}

/// Per-client train/test split, stratified by label with largest-remainder
/// apportionment. Clients with >= 2 samples get at least one test and one
/// train sample; single-sample clients keep it for training and are flagged.
inline Partition client_split(const std::vector<std::vector<std::size_t>>& parts,
                              std::span<const std::size_t> labels, double test_fraction,
                              std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw ConfigError("test_fraction must lie in (0, 1)");
  }
  std::mt19937_64 rng(seed);
  Partition out;
  out.clients.resize(parts.size());
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& part = parts[k];
    auto& dst = out.clients[k];
    const std::size_t n = part.size();
    std::size_t n_test = 0;
    if (n >= 2) {
      n_test = static_cast<std::size_t>(std::lround(test_fraction * static_cast<double>(n)));
      n_test = std::clamp<std::size_t>(n_test, 1, n - 1);
    }

    // group by label, ascending label order
    std::vector<std::pair<std::size_t, std::vector<std::size_t>>> groups;
    {
      std::vector<std::size_t> sorted = part;
      std::stable_sort(sorted.begin(), sorted.end(),
                       [&](auto a, auto b) { return labels[a] < labels[b]; });
      for (auto i : sorted) {
        if (groups.empty() || groups.back().first != labels[i]) groups.push_back({labels[i], {}});
        groups.back().second.push_back(i);
      }
    }
    std::vector<std::size_t> quota(groups.size());
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t assigned = 0;
    for (std::size_t g = 0; g < groups.size(); ++g) {
      const double exact = static_cast<double>(n_test) *
                           static_cast<double>(groups[g].second.size()) / static_cast<double>(n);
      quota[g] = static_cast<std::size_t>(std::floor(exact));
      assigned += quota[g];
      remainders.push_back({exact - std::floor(exact), g});
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t r = 0; assigned < n_test; ++r, ++assigned) ++quota[remainders[r].second];

    for (std::size_t g = 0; g < groups.size(); ++g) {
      auto& members = groups[g].second;
      std::shuffle(members.begin(), members.end(), rng);
      dst.test.insert(dst.test.end(), members.begin(), members.begin() + quota[g]);
      dst.train.insert(dst.train.end(), members.begin() + quota[g], members.end());
    }
    std::sort(dst.train.begin(), dst.train.end());
    std::sort(dst.test.begin(), dst.test.end());
    if (dst.test.empty()) out.without_test.push_back(k);
  }
  return out;
}

/// Shannon entropy (nats) of the label histogram over `indices`.
inline double label_entropy(std::span<const std::size_t> indices,
                            std::span<const std::size_t> labels, std::size_t n_classes) {
  if (indices.empty()) return 0.0;
  std::vector<double> counts(n_classes, 0.0);
  for (auto i : indices) counts[labels[i]] += 1.0;
  double h = 0.0;
  for (double c : counts) {
    if (c > 0.0) {
      const double p = c / static_cast<double>(indices.size());
      h -= p * std::log(p);
    }
  }
  return h;
}

}  // namespace spafl
