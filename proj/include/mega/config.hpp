#pragma once

// Experiment configuration. The file format is flat `key=value` text with
// dotted keys, one per line; `#` starts a comment. Unknown keys are errors.
// Lists are comma-separated. Doubles are written with 17 significant digits
// so that serialize → parse is lossless.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "mega/alignment.hpp"
#include "mega/benchmark.hpp"
#include "mega/memory_bank.hpp"

namespace mega {

enum class Variant { kSourceOnly, kGda, kGdaCdaMa, kMegaCda };

inline constexpr Variant kAllVariants[] = {Variant::kSourceOnly, Variant::kGda, Variant::kGdaCdaMa,
                                           Variant::kMegaCda};

std::string variant_name(Variant v);
Variant parse_variant(std::string_view name);

enum class AttentionMode {
  kMemory,   // memory-guided attention (cosine or learned per variant)
  kAllOnes,  // every location routed to every category discriminator
};

struct OptimizerConfig {
  double learning_rate = 0.002;
  double momentum = 0.9;
  double decay_factor = 0.1;
  std::size_t decay_step = 1500;
};

struct ModelConfig {
  std::vector<std::size_t> encoder_widths{16, 16};
  // Discriminator width is 64 × disc_width_scale.
  double disc_width_scale = 0.125;
  // Similarity branch widths are (512, 256, 128, 64) × sim_width_scale.
  double sim_width_scale = 0.0625;
  bool share_retrieved_branch = false;
  bool split_domain_feature_branch = false;
  // Start every category discriminator from the global one's weights.
  bool tie_discriminator_init = false;
  double grl_coeff = 1.0;

  std::size_t disc_width() const;
  std::vector<std::size_t> sim_widths() const;
};

struct EvalConfig {
  std::size_t probe_scenes = 16;
  std::size_t eval_scenes = 16;
  std::size_t probe_iterations = 300;
  double probe_learning_rate = 1.0;
};

struct ExperimentConfig {
  Variant variant = Variant::kMegaCda;
  // Alignment at the last encoder block (1) or the last two blocks (2).
  std::size_t depths = 1;
  SceneSpec scene = SceneSpec::defaults();
  ObjectiveWeights weights;
  std::size_t memory_items = 20;
  // Unit-normalize gathered features before the memory loss and writes.
  bool memory_normalize_features = true;
  OptimizerConfig optimizer;
  ModelConfig model;
  EvalConfig eval;
  std::size_t steps = 2000;
  std::size_t eval_interval = 250;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  UniquenessForm uniqueness = UniquenessForm::kPrinted;
  CdaSummation cda_summation = CdaSummation::kAll;
  Reduction detection_reduction = Reduction::kMean;
  AttentionMode attention_mode = AttentionMode::kMemory;
  std::string output_dir = "runs";

  static ExperimentConfig defaults() { return {}; }
  static ExperimentConfig parse(std::string_view text);
  static ExperimentConfig load(const std::string& path);

  // Applies one override; throws on unknown keys or bad values.
  void set(std::string_view key, std::string_view value);
  std::string serialize() const;
  void validate() const;

  // FNV-1a over the serialization minus `variant`, `seeds` and
  // `output_dir`, so every run of one ablation ladder shares it.
  std::uint64_t hash() const;
  std::string hash_hex() const;
};

std::string format_hash(std::uint64_t h);

}  // namespace mega
