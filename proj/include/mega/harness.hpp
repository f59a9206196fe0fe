#pragma once

// Run directories and the CSV files in them.
//
// <out>/<variant>/seed_<s>/
//   metrics.csv      one row per step:
//                    step,L_total,L_det,L_gda,L_cda_0..L_cda_{K-1},L_mem,L_sim,lr
//   eval.csv         one row per evaluation:
//                    step,probe_accuracy,negative_transfer,align_0..align_{K-1}
//                    (undefined metrics are written as NA)
//   memory_bank.bin  final bank of the last aligned depth (binary layout in memory_bank.hpp)
//   memory_bank.csv  same bank as text
//   attention/       <domain>_k<k>.csv: H rows of W raw attention values for
//                    the first evaluation scene of each domain (binary = raw > 0.5)
//   config.txt       the full configuration including variant and seed
//   run_info.txt     wall-clock seconds; the only nondeterministic file
//
// Every file starts with a "# config_hash=<hex> variant=<v> seed=<s>" line.
// summary.csv (written by summarize) starts with "# config_hash=<hex>".

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mega/config.hpp"
#include "mega/trainer.hpp"

namespace mega {

struct RunResult {
  std::filesystem::path dir;
  EvalRecord final_eval;
  double seconds = 0.0;
};

// Trains config.variant for one seed and writes its run directory under
// `out_root`. Progress lines go to `log` when given.
RunResult run(const ExperimentConfig& config, std::uint64_t seed, const std::filesystem::path& out_root,
              std::ostream* log = nullptr);

// Every variant × every configured seed.
std::vector<RunResult> run_ladder(const ExperimentConfig& config, const std::filesystem::path& out_root,
                                  std::ostream* log = nullptr);

// Type-7 (linear interpolation) sample quantile; throws on empty input.
double quantile(std::vector<double> values, double q);

struct MetricSummary {
  std::string name;
  std::size_t count = 0;  // runs with a defined value
  std::optional<double> median;
  std::optional<double> iqr;
};

struct VariantSummary {
  std::string variant;
  std::size_t runs = 0;
  std::vector<MetricSummary> metrics;  // probe_accuracy, negative_transfer, align_k...
  const MetricSummary& metric(const std::string& name) const;
};

struct Summary {
  std::string config_hash;  // "mixed" when runs disagree and mixing was allowed
  std::vector<VariantSummary> variants;  // ladder order, then others alphabetically
  std::string table;                     // aligned text rendering
};

// Reads the final row of every eval.csv below `dir`, groups by variant and
// writes `dir`/summary.csv. Throws when no runs are found, and on differing
// config hashes unless allow_mixed.
Summary summarize(const std::filesystem::path& dir, bool allow_mixed = false);

// Header line shared by all run files.
std::string run_header(const ExperimentConfig& config, std::uint64_t seed);

}  // namespace mega
