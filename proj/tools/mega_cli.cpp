// mega: run one variant/seed, the whole ablation ladder, or summarize runs.

#include <exception>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mega/config.hpp"
#include "mega/error.hpp"
#include "mega/harness.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Memory-guided category-aware domain alignment experiments"};
  std::string config_path, variant, out_dir, summarize_dir;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  bool ladder = false, allow_mixed = false, print_config = false;

  app.add_option("--config", config_path, "Config file (key=value lines)");
  app.add_option("--variant", variant, "source_only | gda | gda_cda_ma | mega_cda");
  app.add_option("--seed", seed, "Run a single seed instead of the configured list");
  app.add_option("--out", out_dir, "Output directory (overrides output_dir)");
  app.add_option("--set", overrides, "Extra key=value override, repeatable");
  app.add_flag("--ladder", ladder, "Run every variant for every seed, then summarize");
  app.add_option("--summarize", summarize_dir, "Summarize the runs below DIR and exit");
  app.add_flag("--allow-mixed", allow_mixed, "Let --summarize combine runs with different config hashes");
  app.add_flag("--print-config", print_config, "Print the resolved config and exit");
  CLI11_PARSE(app, argc, argv);

  try {
    if (!summarize_dir.empty()) {
      const auto s = mega::summarize(summarize_dir, allow_mixed);
      std::cout << s.table;
      return 0;
    }

    auto config = config_path.empty() ? mega::ExperimentConfig::defaults() : mega::ExperimentConfig::load(config_path);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw mega::Error("--set expects key=value, got '" + kv + "'");
      config.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (!variant.empty()) config.variant = mega::parse_variant(variant);
    if (seed) config.seeds = {*seed};
    if (!out_dir.empty()) config.output_dir = out_dir;
    config.validate();

    if (print_config) {
      std::cout << "# config_hash=" << config.hash_hex() << "\n" << config.serialize();
      return 0;
    }

    if (ladder) {
      mega::run_ladder(config, config.output_dir, &std::cerr);
      std::cout << mega::summarize(config.output_dir).table;
      return 0;
    }
    for (auto s : config.seeds) {
      const auto r = mega::run(config, s, config.output_dir, &std::cerr);
      std::cout << r.dir.string() << "\n";
    }
    return 0;
  } catch (const mega::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
