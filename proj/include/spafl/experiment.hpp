#pragma once

// Experiment configuration, the round driver and its output files
// (metrics.csv, summary.json, PGM sparsity patterns).

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "spafl/data.hpp"
#include "spafl/errors.hpp"
#include "spafl/fl.hpp"
#include "spafl/strategies.hpp"

namespace spafl {

using json = nlohmann::json;

/// Hyperparameter bundle attached to a model preset.
struct Preset {
  const char* name;
  const char* model;
  std::size_t clients, clients_per_round, rounds, local_epochs, batch_size;
  double lr, lr_decay, alpha, momentum, dirichlet_beta;
};

inline constexpr Preset kPresets[] = {
    {"fmnist-lenet", "lenet", 100, 10, 500, 5, 64, 0.001, 1.0, 0.002, 0.9, 0.2},
    {"cifar10-cnn7", "cnn7", 100, 10, 500, 5, 16, 0.01, 1.0, 0.00015, 0.9, 0.1},
    // desk-scale setup for the synthetic MLP runs
    {"desk-mlp", "mlp", 20, 5, 60, 3, 16, 0.03, 1.0, 0.002, 0.9, 0.1},
};

inline const Preset& preset_by_name(const std::string& name) {
  for (const auto& p : kPresets) {
    if (name == p.name) return p;
  }
  std::string valid;
  for (const auto& p : kPresets) valid += (valid.empty() ? "" : ", ") + std::string(p.name);
  throw ConfigError("unknown preset '" + name + "'; valid values: " + valid);
}

inline const Preset& preset_for_model(const std::string& model) {
  for (const auto& p : kPresets) {
    if (model == p.model) return p;
  }
  throw ConfigError("unknown model '" + model + "'; valid values: lenet, cnn7, mlp");
}

struct ExperimentConfig {
  std::string preset;
  std::string model = "mlp";
  std::vector<std::size_t> mlp_hidden{128, 64};
  bool mlp_bias = true;

  std::string dataset = "synthetic";  // or "idx"
  std::string idx_images;
  std::string idx_labels;
  std::size_t synth_classes = 10;
  std::size_t synth_dim = 64;  // mlp only; image models use their input geometry
  std::size_t synth_per_class = 200;
  double synth_spread = 0.12;

  RoundConfig round;
  double dirichlet_beta = 0.1;
  double test_fraction = 0.2;
  std::size_t eval_every = 1;
  std::size_t dump_masks_every = 0;  // 0 disables mask dumps
  std::string out_dir = "out";

  json to_json() const {
    return json{{"preset", preset},
                {"model", model},
                {"mlp_hidden", mlp_hidden},
                {"mlp_bias", mlp_bias},
                {"dataset", dataset},
                {"idx_images", idx_images},
                {"idx_labels", idx_labels},
                {"synth_classes", synth_classes},
                {"synth_dim", synth_dim},
                {"synth_per_class", synth_per_class},
                {"synth_spread", synth_spread},
                {"strategy", std::string(to_string(round.strategy))},
                {"clients", round.clients},
                {"clients_per_round", round.clients_per_round},
                {"rounds", round.rounds},
                {"local_epochs", round.local_epochs},
                {"lr", round.lr},
                {"lr_decay", round.lr_decay},
                {"momentum", round.momentum},
                {"alpha", round.alpha},
                {"batch_size", round.batch_size},
                {"seed", round.seed},
                {"workers", round.workers},
                {"dirichlet_beta", dirichlet_beta},
                {"test_fraction", test_fraction},
                {"eval_every", eval_every},
                {"dump_masks_every", dump_masks_every},
                {"out_dir", out_dir}};
  }
};

enum class KeyType { integer, number, string, boolean, integer_list };

inline const std::map<std::string, KeyType>& config_keys() {
  static const std::map<std::string, KeyType> keys = {
      {"preset", KeyType::string},          {"model", KeyType::string},
      {"mlp_hidden", KeyType::integer_list}, {"mlp_bias", KeyType::boolean},
      {"dataset", KeyType::string},
      {"idx_images", KeyType::string},      {"idx_labels", KeyType::string},
      {"synth_classes", KeyType::integer},  {"synth_dim", KeyType::integer},
      {"synth_per_class", KeyType::integer}, {"synth_spread", KeyType::number},
      {"strategy", KeyType::string},        {"clients", KeyType::integer},
      {"clients_per_round", KeyType::integer}, {"rounds", KeyType::integer},
      {"local_epochs", KeyType::integer},   {"lr", KeyType::number},
      {"lr_decay", KeyType::number},        {"momentum", KeyType::number},
      {"alpha", KeyType::number},           {"batch_size", KeyType::integer},
      {"seed", KeyType::integer},           {"workers", KeyType::integer},
      {"dirichlet_beta", KeyType::number},  {"test_fraction", KeyType::number},
      {"eval_every", KeyType::integer},     {"dump_masks_every", KeyType::integer},
      {"out_dir", KeyType::string},
  };
  return keys;
}

/// "clients_per_round" -> "clients-per-round"
inline std::string flag_name(std::string key) {
  for (char& c : key) {
    if (c == '_') c = '-';
  }
  return key;
}

inline std::string valid_keys() {
  std::string out;
  for (const auto& [k, _] : config_keys()) out += (out.empty() ? "" : ", ") + k;
  return out;
}

/// Converts a command-line string into the JSON type `key` expects.
inline json coerce_flag(const std::string& key, const std::string& value) {
  const auto it = config_keys().find(key);
  if (it == config_keys().end()) throw ConfigError("unknown config key '" + key + "'");
  try {
    switch (it->second) {
      case KeyType::integer: {
        std::size_t pos = 0;
        const auto v = std::stoull(value, &pos);
        if (pos != value.size() || value.front() == '-') throw std::invalid_argument(value);
        return v;
      }
      case KeyType::number: {
        std::size_t pos = 0;
        const double v = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
      }
      case KeyType::string:
        return value;
      case KeyType::boolean:
        if (value == "true" || value == "1") return true;
        if (value == "false" || value == "0") return false;
        break;
      case KeyType::integer_list: {
        json list = json::array();
        std::stringstream ss(value);
        std::string item;
        while (std::getline(ss, item, ',')) list.push_back(coerce_flag("seed", item));
        return list;
      }
    }
  } catch (const std::logic_error&) {
  }
  throw ConfigError("invalid value '" + value + "' for --" + flag_name(key));
}

inline json load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) return json::object();
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  if (!doc.is_object()) throw ConfigError("config '" + path + "' must be a JSON object");
  return doc;
}

namespace detail {

template <typename T>
T read_key(const json& doc, const std::string& key, T fallback) {
  if (!doc.contains(key)) return fallback;
  try {
    return doc.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type");
  }
}

inline std::size_t read_count(const json& doc, const std::string& key, std::size_t fallback) {
  if (!doc.contains(key)) return fallback;
  const auto& v = doc.at(key);
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw ConfigError("config key '" + key + "' must be a non-negative integer");
  }
  return v.get<std::size_t>();
}

}  // namespace detail

/// Validated configuration from a flat JSON document. Defaults come from
/// the preset named by "preset", or else the one attached to "model".
inline ExperimentConfig parse_config(const json& doc) {
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [key, _] : doc.items()) {
    if (!config_keys().count(key)) {
      throw ConfigError("unknown config key '" + key + "'; valid keys: " + valid_keys());
    }
  }
  using detail::read_count;
  using detail::read_key;

  ExperimentConfig c;
  const Preset* preset = nullptr;
  if (doc.contains("preset")) {
    preset = &preset_by_name(read_key<std::string>(doc, "preset", ""));
    c.model = read_key<std::string>(doc, "model", preset->model);
    if (c.model != preset->model) {
      throw ConfigError("preset '" + std::string(preset->name) + "' is for model '" +
                        preset->model + "', not '" + c.model + "'");
    }
  } else {
    c.model = read_key<std::string>(doc, "model", c.model);
    preset = &preset_for_model(c.model);
  }
  c.preset = preset->name;

  auto& r = c.round;
  r.clients = read_count(doc, "clients", preset->clients);
  r.clients_per_round = read_count(doc, "clients_per_round", preset->clients_per_round);
  r.rounds = read_count(doc, "rounds", preset->rounds);
  r.local_epochs = read_count(doc, "local_epochs", preset->local_epochs);
  r.batch_size = read_count(doc, "batch_size", preset->batch_size);
  r.lr = read_key<double>(doc, "lr", preset->lr);
  r.lr_decay = read_key<double>(doc, "lr_decay", preset->lr_decay);
  r.alpha = read_key<double>(doc, "alpha", preset->alpha);
  r.momentum = read_key<double>(doc, "momentum", preset->momentum);
  r.seed = read_count(doc, "seed", 0);
  r.workers = read_count(doc, "workers", 1);
  r.strategy = parse_strategy(read_key<std::string>(doc, "strategy", "spafl"));
  c.dirichlet_beta = read_key<double>(doc, "dirichlet_beta", preset->dirichlet_beta);

  c.mlp_hidden = read_key<std::vector<std::size_t>>(doc, "mlp_hidden", c.mlp_hidden);
  c.mlp_bias = read_key<bool>(doc, "mlp_bias", c.mlp_bias);
  c.dataset = read_key<std::string>(doc, "dataset", c.dataset);
  c.idx_images = read_key<std::string>(doc, "idx_images", "");
  c.idx_labels = read_key<std::string>(doc, "idx_labels", "");
  c.synth_classes = read_count(doc, "synth_classes", c.synth_classes);
  c.synth_dim = read_count(doc, "synth_dim", c.synth_dim);
  c.synth_per_class = read_count(doc, "synth_per_class", c.synth_per_class);
  c.synth_spread = read_key<double>(doc, "synth_spread", c.synth_spread);
  c.test_fraction = read_key<double>(doc, "test_fraction", c.test_fraction);
  c.eval_every = read_count(doc, "eval_every", c.eval_every);
  c.dump_masks_every = read_count(doc, "dump_masks_every", c.dump_masks_every);
  c.out_dir = read_key<std::string>(doc, "out_dir", c.out_dir);

  r.validate();
  if (!(r.lr > 0.0)) throw ConfigError("lr must be > 0");
  if (!(c.dirichlet_beta > 0.0)) throw ConfigError("dirichlet_beta must be > 0");
  if (!(c.test_fraction > 0.0 && c.test_fraction < 1.0)) {
    throw ConfigError("test_fraction must lie in (0, 1)");
  }
  if (c.eval_every < 1) throw ConfigError("eval_every must be >= 1");
  if (c.dataset == "idx") {
    if (c.idx_images.empty() || c.idx_labels.empty()) {
      throw ConfigError("dataset 'idx' needs idx_images and idx_labels");
    }
  } else if (c.dataset != "synthetic") {
    throw ConfigError("unknown dataset '" + c.dataset + "'; valid values: synthetic, idx");
  }
  if (c.model == "mlp" && c.mlp_hidden.empty()) throw ConfigError("mlp_hidden must not be empty");
  for (auto w : c.mlp_hidden) {
    if (w == 0) throw ConfigError("mlp_hidden widths must be >= 1");
  }
  if (c.synth_classes < 2) throw ConfigError("synth_classes must be >= 2");
  if (c.out_dir.empty()) throw ConfigError("out_dir must not be empty");
  return c;
}

inline Architecture build_architecture(const ExperimentConfig& c, std::size_t n_classes) {
  if (c.model == "lenet") return make_lenet(n_classes);
  if (c.model == "cnn7") return make_cnn7(n_classes);
  return make_mlp(c.synth_dim, c.mlp_hidden, n_classes, c.mlp_bias);
}

inline Dataset build_dataset(const ExperimentConfig& c) {
  if (c.dataset == "idx") {
    Dataset ds = load_idx(c.idx_images, c.idx_labels);
    if (c.model == "mlp") ds.geometry = Geometry{ds.sample_volume(), 1, 1};
    return ds;
  }
  Geometry g{c.synth_dim, 1, 1};
  if (c.model == "lenet") g = Geometry{1, 28, 28};
  if (c.model == "cnn7") g = Geometry{3, 32, 32};
  return synth_dataset(c.synth_classes, g, c.synth_per_class, c.synth_spread,
                       detail::mix_seed(c.round.seed, 0xda7a));
}

/// Federation wired exactly as run_experiment does, so every strategy sees
/// the same data, partition and initialization for a given seed.
inline Federation build_federation(const ExperimentConfig& c) {
  auto dataset = std::make_shared<const Dataset>(build_dataset(c));
  ExperimentConfig resolved = c;
  if (c.model == "mlp") resolved.synth_dim = dataset->sample_volume();
  Architecture arch = build_architecture(resolved, dataset->n_classes);
  auto parts = dirichlet_partition(dataset->labels, dataset->n_classes, c.round.clients,
                                   c.dirichlet_beta, detail::mix_seed(c.round.seed, 0xd1c1));
  Partition partition = client_split(parts, dataset->labels, c.test_fraction,
                                     detail::mix_seed(c.round.seed, 0x5b17));
  return Federation(std::move(arch), std::move(dataset), std::move(partition), c.round);
}

/// ASCII graymap of one layer's mask: a single raster row with one pixel per
/// output unit, 0 (black) when active and 255 (white) when pruned.
inline std::string sparsity_pgm(const LayerMask& mask) {
  std::string out = "P2\n" + std::to_string(mask.n_out()) + " 1\n255\n";
  for (std::size_t i = 0; i < mask.n_out(); ++i) {
    out += mask.row_active(i) ? "0" : "255";
    out += (i + 1 == mask.n_out()) ? "\n" : " ";
  }
  return out;
}

inline std::string mask_filename(std::size_t client, std::size_t layer, std::size_t round) {
  return "mask_c" + std::to_string(client) + "_l" + std::to_string(layer) + "_r" +
         std::to_string(round) + ".pgm";
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

/// Writes every prunable layer's pattern for one client.
inline void dump_sparsity_pattern(const BinaryMask& mask, std::size_t client, std::size_t round,
                                  const std::filesystem::path& out_dir) {
  for (std::size_t l = 0; l < mask.layers.size(); ++l) {
    write_text(out_dir / mask_filename(client, l, round), sparsity_pgm(mask.layers[l]));
  }
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline constexpr const char* kMetricsHeader =
    "round,mean_acc,std_acc,overall_density,per_layer_density,cum_comm_bits,cum_flops";

inline std::string metrics_row(const RoundMetrics& m) {
  std::string layers;
  for (double d : m.density.per_layer) layers += (layers.empty() ? "" : ";") + format_double(d);
  return std::to_string(m.round) + "," + (m.evaluated ? format_double(m.mean_acc) : "") + "," +
         (m.evaluated ? format_double(m.std_acc) : "") + "," +
         format_double(m.density.overall) + "," + layers + "," +
         std::to_string(m.cum_comm_bits) + "," + std::to_string(m.cum_flops);
}

struct ExperimentResult {
  std::optional<double> best_mean_acc;
  std::size_t best_round = 0;
  double density_at_best = 1.0;
  double final_density = 1.0;
  std::uint64_t total_comm_bits = 0;
  std::uint64_t total_flops = 0;
  std::vector<RoundMetrics> evaluated;
};

/// Runs T rounds of the configured strategy. When `write_outputs` is set,
/// metrics.csv, summary.json and the optional mask dumps land in out_dir.
inline ExperimentResult run_experiment(const ExperimentConfig& config, bool write_outputs = true,
                                       std::ostream* log = nullptr) {
  Federation fed = build_federation(config);
  const std::filesystem::path out_dir(config.out_dir);
  std::ofstream csv;
  if (write_outputs) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw std::runtime_error("cannot create '" + out_dir.string() + "': " + ec.message());
    csv.open(out_dir / "metrics.csv", std::ios::binary);
    if (!csv) throw std::runtime_error("cannot write '" + (out_dir / "metrics.csv").string() + "'");
    csv << kMetricsHeader << '\n';
  }

  ExperimentResult result;
  const std::size_t T = config.round.rounds;
  for (std::size_t t = 0; t < T; ++t) {
    const bool with_eval = (t + 1) % config.eval_every == 0 || t + 1 == T;
    RoundMetrics m = run_strategy_round(fed, with_eval);
    result.final_density = m.density.overall;
    result.total_comm_bits = m.cum_comm_bits;
    result.total_flops = m.cum_flops;

    if (write_outputs && config.dump_masks_every > 0 && (t + 1) % config.dump_masks_every == 0) {
      for (const auto& client : fed.clients()) {
        dump_sparsity_pattern(fed.eval_model(client).second, client.id, t + 1, out_dir);
      }
    }
    if (!with_eval) continue;
    if (write_outputs) csv << metrics_row(m) << '\n';
    if (log) {
      *log << "round " << m.round << "/" << T << " acc "
           << (m.evaluated ? format_double(m.mean_acc) : "n/a") << " density "
           << format_double(m.density.overall) << '\n';
    }
    if (m.evaluated && (!result.best_mean_acc || m.mean_acc > *result.best_mean_acc)) {
      result.best_mean_acc = m.mean_acc;
      result.best_round = m.round;
      result.density_at_best = m.density.overall;
    }
    result.evaluated.push_back(std::move(m));
  }

  if (write_outputs) {
    csv.close();
    if (!csv) throw std::runtime_error("write failed for metrics.csv");
    json summary{
        {"best_mean_acc", result.best_mean_acc ? json(*result.best_mean_acc) : json(nullptr)},
        {"best_round", result.best_mean_acc ? json(result.best_round) : json(nullptr)},
        {"density_at_best", result.best_mean_acc ? json(result.density_at_best) : json(nullptr)},
        {"final_overall_density", result.final_density},
        {"total_comm_bits", result.total_comm_bits},
        {"total_flops", result.total_flops},
        {"rounds", T},
        {"seed", config.round.seed},
        {"threshold_count", threshold_count(fed.arch())},
        {"parameter_count", fed.arch().parameter_count()},
        {"config", config.to_json()}};
    write_text(out_dir / "summary.json", summary.dump(2) + "\n");
  }
  return result;
}

}  // namespace spafl
