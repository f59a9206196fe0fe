#pragma once

// Least-squares domain discriminators behind a gradient-reversal layer, the
// global and category-wise alignment losses, and the weighted objective.
//
// Sign convention: every adversarial loss here is the non-negated
// least-squares objective that the discriminator minimizes. The encoder
// receives the opposite signal through the reversal layer at the
// discriminator's input, so a single minimization step trains both sides.

#include <optional>
#include <vector>

#include "mega/nn.hpp"
#include "mega/tensor.hpp"

namespace mega {

class Discriminator {
 public:
  struct Options {
    std::size_t width = 64;
    double grl_coeff = 1.0;
    // false replaces the reversal layer with the identity.
    bool reverse_gradient = true;
  };

  Discriminator() = default;
  // 1×1 conv → ReLU → 3×3 → ReLU → 3×3 → ReLU → 3×3 to one channel → sigmoid.
  Discriminator(std::size_t channels, const Options& options, Rng& rng);

  // C×H×W features → H×W domain probabilities in (0, 1) (source = 1).
  Tensor forward(const Tensor& map) const;

  std::vector<Tensor> parameters() const { return net_.parameters(); }
  Discriminator clone() const;
  void set_reverse_gradient(bool on) { options_.reverse_gradient = on; }
  const Options& options() const { return options_; }

 private:
  Options options_;
  ConvStack net_;
};

// Σ_{h,w} (1 − D(F_s))² + Σ_{h,w} D(F_t)².
Tensor global_da_loss(const Tensor& source, const Tensor& target, const Discriminator& disc);

enum class CdaSummation {
  kAll,     // every location, including gated-off ones
  kMasked,  // only locations where the domain's mask is 1
};

// Same objective on attention-gated features σ·F for one category.
Tensor category_da_loss(const Tensor& source, const Tensor& target, std::span<const double> source_mask,
                        std::span<const double> target_mask, const Discriminator& disc,
                        CdaSummation summation = CdaSummation::kAll);

// Per-location class index: k for category-k mask locations, K for
// background. Overlapping masks resolve to the lowest category.
std::vector<std::size_t> location_labels(const std::vector<std::vector<double>>& masks, std::size_t locations);

// Stand-in detection loss: per-location softmax cross-entropy of
// (K+1)×H×W logits against location labels, averaged or summed over
// locations (summing matches how the alignment losses reduce).
enum class Reduction { kMean, kSum };
Tensor surrogate_detection_loss(const Tensor& logits, std::span<const std::size_t> labels,
                                Reduction reduction = Reduction::kMean);

struct ObjectiveWeights {
  double beta = 0.01;       // global alignment
  double gamma = 0.01;      // category alignment (summed over k)
  double lambda = 0.1;      // memory regularizers
  double alpha = 1.0;       // uniqueness margin
  double similarity = 1.0;  // learned-similarity supervision
};

// Loss terms of one step; an undefined tensor is an inactive term (0).
struct ObjectiveTerms {
  Tensor detection;
  Tensor global;
  std::vector<Tensor> category;
  Tensor memory;
  Tensor similarity;
};

struct LossBreakdown {
  double total = 0.0;
  double detection = 0.0;
  double global = 0.0;
  std::vector<double> category;
  double memory = 0.0;
  double similarity = 0.0;

  double category_sum() const;
  // det + β·global + γ·Σ category + λ·memory + w·similarity.
  double weighted_sum(const ObjectiveWeights& w) const;
};

struct Objective {
  Tensor total;
  LossBreakdown breakdown;
};

Objective combine_objective(const ObjectiveTerms& terms, const ObjectiveWeights& weights);

}  // namespace mega
