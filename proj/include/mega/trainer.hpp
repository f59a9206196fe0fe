#pragma once

// One training run of a single variant: model construction, the per-step
// objective with variant gating, SGD updates, memory writes and evaluation.

#include <cstdint>
#include <optional>
#include <vector>

#include "mega/alignment.hpp"
#include "mega/attention.hpp"
#include "mega/benchmark.hpp"
#include "mega/config.hpp"
#include "mega/memory_bank.hpp"

namespace mega {

// Which loss terms a variant trains with.
struct VariantTerms {
  bool global = false;
  bool category = false;
  bool memory = false;
  bool learned_similarity = false;
};
VariantTerms terms_for(Variant v);

// Alignment machinery attached to one encoder depth.
struct DepthModules {
  std::size_t block = 0;  // encoder block index
  Discriminator global;
  std::vector<Discriminator> category;
  SimilarityNets similarity;
  MemoryBank bank;
};

// Weight init depends on (config, seed) only, never on the variant, so every
// rung of the ladder starts from the same encoder.
struct Model {
  Encoder encoder;
  ConvStack head;  // 1×1 conv to K+1 logits
  std::vector<DepthModules> depths;

  Model(const ExperimentConfig& config, std::uint64_t seed);
  // Trainable parameters for a variant, in a fixed order.
  std::vector<Tensor> parameters(Variant v) const;
};

struct Batch {
  SourceView source;
  TargetView target;
};

// One source and one target scene.
Batch sample_batch(const SceneSpec& spec, Rng& source_rng, Rng& target_rng);

struct ForwardResult {
  Objective objective;
  // Detached per-category source features at each aligned depth, for writes.
  std::vector<std::vector<CategoryFeatureSet>> write_features;
};

ForwardResult forward_objective(const Model& model, const ExperimentConfig& config, const Batch& batch);

// Attention maps for every category at the last aligned depth.
std::vector<AttentionMap> attention_maps(const Model& model, const ExperimentConfig& config, const Tensor& input,
                                         Domain domain);

struct StepRecord {
  std::size_t step = 0;
  LossBreakdown losses;
  double learning_rate = 0.0;
};

struct EvalRecord {
  std::size_t step = 0;
  double probe_accuracy = 0.0;
  std::optional<double> negative_transfer;
  std::vector<std::optional<double>> alignment;
};

// Fixed evaluation scenes for a seed: labeled source scenes for fitting the
// probe and the centroids, target scenes with their hidden masks for scoring.
struct EvalSet {
  std::vector<Scene> source;
  std::vector<Scene> target;
};
EvalSet make_eval_set(const ExperimentConfig& config, std::uint64_t seed);

EvalRecord evaluate_encoder(const Encoder& encoder, const ExperimentConfig& config, const EvalSet& set);

double learning_rate_at(const OptimizerConfig& opt, std::size_t step);

class Trainer {
 public:
  Trainer(const ExperimentConfig& config, std::uint64_t seed);

  // Throws NumericError when any loss component is not finite.
  StepRecord step();
  EvalRecord evaluate() const;

  std::size_t steps_done() const { return step_; }
  const Model& model() const { return model_; }
  const ExperimentConfig& config() const { return config_; }

 private:
  ExperimentConfig config_;
  std::uint64_t seed_;
  Model model_;
  SgdMomentum optimizer_;
  Rng source_rng_, target_rng_;
  EvalSet eval_set_;
  std::size_t step_ = 0;
};

}  // namespace mega
