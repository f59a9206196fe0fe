#pragma once

// Category attention maps from memory reads. The raw map is the per-location
// cosine between a feature map and its retrieval from category k's memory,
// either directly or after a pair of learned conv branches; the binary map
// gates the category discriminator's input and carries no gradient.

#include <vector>

#include "mega/memory_bank.hpp"
#include "mega/nn.hpp"
#include "mega/tensor.hpp"

namespace mega {

enum class Domain { kSource, kTarget };

enum class SimilarityKind { kCosine, kLearned };

inline constexpr double kAttentionThreshold = 0.5;

struct AttentionMap {
  Tensor raw;                  // H×W, cosine values in [-1, 1]
  std::vector<double> binary;  // H×W, 1 iff raw > 0.5
  std::size_t category = 0;
};

// 1 where value > threshold (strictly), else 0.
std::vector<double> binarize(std::span<const double> raw, double threshold = kAttentionThreshold);

// Throws unless every entry is exactly 0 or 1.
void check_binary_mask(std::span<const double> mask);

// Learned-similarity networks for one feature depth: a feature branch Θ
// (shared across categories; optionally split by domain) and one retrieved
// branch Θ^k per category (optionally a single shared one).
class SimilarityNets {
 public:
  struct Options {
    std::vector<std::size_t> widths{512, 256, 128, 64};  // 3×3 ReLU layers, then a 1×1 layer
    bool share_retrieved_branch = false;
    bool split_domain_feature_branch = false;
  };

  SimilarityNets() = default;
  SimilarityNets(std::size_t channels, std::size_t categories, const Options& options, Rng& rng);
  // Both branches reduce to the identity; learned attention then equals
  // cosine attention.
  static SimilarityNets identity(std::size_t channels, std::size_t categories);

  const ConvStack& feature_branch(Domain domain) const;
  const ConvStack& retrieved_branch(std::size_t k) const;
  std::size_t categories() const { return categories_; }
  std::vector<Tensor> parameters() const;

 private:
  std::size_t categories_ = 0;
  std::vector<ConvStack> feature_;    // 1 entry, or 2 when split by domain
  std::vector<ConvStack> retrieved_;  // K entries, or 1 when shared
};

AttentionMap cosine_attention(const Tensor& map, const Tensor& retrieved, std::size_t category = 0);

AttentionMap learned_attention(const Tensor& map, const Tensor& retrieved, const ConvStack& feature_branch,
                               const ConvStack& retrieved_branch, std::size_t category = 0);

// Mean over locations of (raw − t)² with t = +1 on the mask and −1 off it.
// Masks exist only for source images; a target-domain call throws.
Tensor similarity_supervision_loss(const Tensor& raw, std::span<const double> mask, Domain domain);

// Reads category k's memory for every location of `map` and builds the
// attention map with the selected similarity. `nets` is required for the
// learned variant.
AttentionMap attention_for_category(const Tensor& map, const MemoryBank& bank, std::size_t k,
                                    SimilarityKind kind, const SimilarityNets* nets = nullptr,
                                    Domain domain = Domain::kTarget);

}  // namespace mega
