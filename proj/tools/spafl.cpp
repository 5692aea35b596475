// spafl: run threshold-sharing federated experiments and check comm totals.

#include <cstdio>
#include <exception>
#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "spafl/accounting.hpp"
#include "spafl/experiment.hpp"

namespace {

void print_comm_preset(const spafl::CommPreset& p) {
  const auto bits = spafl::spafl_comm_bits(p.clients_per_round, p.threshold_count, p.rounds);
  const auto dense = spafl::dense_comm_bits(p.clients_per_round, p.weight_count, p.rounds);
  std::printf("%-18s K=%llu tau_num=%llu T=%llu comm_bits=%llu comm_gbit=%.5f", p.name,
              static_cast<unsigned long long>(p.clients_per_round),
              static_cast<unsigned long long>(p.threshold_count),
              static_cast<unsigned long long>(p.rounds), static_cast<unsigned long long>(bits),
              static_cast<double>(bits) / 1e9);
  if (p.weight_count > 0) {
    std::printf(" dense_gbit=%.2f\n", static_cast<double>(dense) / 1e9);
  } else {
    std::printf(" dense_gbit=n/a\n");
  }
}

int verify_comm(const std::string& name) {
  if (name == "all") {
    for (const auto& p : spafl::kCommPresets) print_comm_preset(p);
    return 0;
  }
  for (const auto& p : spafl::kCommPresets) {
    if (name == p.name) {
      print_comm_preset(p);
      return 0;
    }
  }
  std::string valid = "all";
  for (const auto& p : spafl::kCommPresets) valid += std::string(", ") + p.name;
  std::cerr << "error: unknown preset '" << name << "'; valid values: " << valid << '\n';
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated learning with shared pruning thresholds"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "Run one experiment");
  std::string config_path;
  bool quiet = false;
  run->add_option("--config", config_path, "JSON config file (flat keys)");
  run->add_flag("--quiet", quiet, "No per-round progress on stderr");
  std::map<std::string, std::string> overrides;
  for (const auto& [key, _] : spafl::config_keys()) {
    run->add_option("--" + spafl::flag_name(key), overrides[key], "Overrides '" + key + "'");
  }

  auto* verify = app.add_subcommand("verify-comm", "Print communication totals of a preset");
  std::string preset = "all";
  verify->add_option("--preset", preset, "fmnist-lenet, cifar10-cnn7, cifar100-resnet18 or all");

  CLI11_PARSE(app, argc, argv);

  if (*verify) return verify_comm(preset);

  try {
    spafl::json doc = config_path.empty() ? spafl::json::object()
                                          : spafl::load_config_file(config_path);
    for (const auto& [key, value] : overrides) {
      if (run->count("--" + spafl::flag_name(key)) > 0) doc[key] = spafl::coerce_flag(key, value);
    }
    const auto config = spafl::parse_config(doc);
    const auto result = spafl::run_experiment(config, true, quiet ? nullptr : &std::cerr);
    std::cout << "best_mean_acc "
              << (result.best_mean_acc ? spafl::format_double(*result.best_mean_acc) : "null")
              << " final_density " << spafl::format_double(result.final_density)
              << " comm_bits " << result.total_comm_bits << " flops " << result.total_flops
              << '\n';
    return 0;
  } catch (const spafl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
