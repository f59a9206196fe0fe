#pragma once

// Per-category prototype memory: write (softmax-weighted additive update over
// the category's source features), read (softmax over memory items), and the
// compactness / uniqueness regularizers.
//
// Index convention: similarity matrices are addressed p[j, i] with the memory
// item j first and the feature i second, both for writing and reading.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mega/nn.hpp"
#include "mega/tensor.hpp"

namespace mega {

// Features of one category gathered from a feature map: an N_k×C matrix, or
// nothing when the category is absent (N_k = 0).
struct CategoryFeatureSet {
  Tensor features;

  std::size_t count() const { return features.defined() ? features.shape()[0] : 0; }
  bool empty() const { return count() == 0; }
};

// Gathers the channel vectors of a C×H×W map at locations where mask is 1.
// Differentiable with respect to the map.
CategoryFeatureSet gather_category_features(const Tensor& map, std::span<const double> mask);

enum class UniquenessForm {
  kPrinted,  // max(d_p − d_n, α)
  kHinge,    // max(d_p − d_n + α, 0)
};

class MemoryBank {
 public:
  MemoryBank() = default;
  // All-zero bank; use random_unit for a usable initialization.
  MemoryBank(std::size_t categories, std::size_t items, std::size_t channels);
  // Items drawn uniformly on the unit sphere (normalized Gaussian samples).
  static MemoryBank random_unit(std::size_t categories, std::size_t items, std::size_t channels, Rng& rng);

  std::size_t categories() const { return categories_; }
  std::size_t items() const { return items_; }
  std::size_t channels() const { return channels_; }

  std::span<const double> item(std::size_t k, std::size_t j) const;
  void set_item(std::size_t k, std::size_t j, std::span<const double> values);
  // M_k as a constant N_m×C tensor.
  Tensor matrix(std::size_t k) const;
  void set_matrix(std::size_t k, const Tensor& m);

  // Applies the write rule to M_k. Returns false and leaves the bank
  // untouched when the category is absent.
  bool write(std::size_t k, const CategoryFeatureSet& features);

  const std::vector<double>& raw() const { return values_; }
  bool operator==(const MemoryBank&) const = default;

 private:
  std::size_t offset(std::size_t k, std::size_t j) const;

  std::size_t categories_ = 0, items_ = 0, channels_ = 0;
  std::vector<double> values_;
};

// p[j, i] = exp(m_j·g_i) / Σ_l exp(m_j·g_l): each row normalizes over the
// category's features. Empty set → nullopt (category absent, no write).
std::optional<Tensor> write_similarity(const Tensor& memory, const CategoryFeatureSet& features);

// m_j ← normalize(m_j + Σ_i p[j, i]·g_i). Runs on plain values; the result
// never requires a gradient. Empty set → memory returned unchanged.
Tensor write_update(const Tensor& memory, const CategoryFeatureSet& features, const Tensor& p);

struct ReadResult {
  Tensor weights;    // q, length N_m, on the simplex
  Tensor retrieved;  // ĝ = Σ_j q[j]·m_j, length C
};

// q[j] = softmax_j(m_j·g). Differentiable with respect to both arguments.
ReadResult read(const Tensor& memory, const Tensor& query);

// Per-location read of a C×H×W map, giving the retrieved C×H×W map.
Tensor read_map(const Tensor& memory, const Tensor& map);

// For each memory item, the indices of the most and second most similar
// features by dot product (ties → lowest index). `negative` is empty when
// there are fewer than two features.
struct NeighborAssignment {
  std::vector<std::size_t> positive;
  std::vector<std::size_t> negative;
};
NeighborAssignment nearest_features(const Tensor& memory, const CategoryFeatureSet& features);

// Σ_j ||m_j − g^p_j||₂ with gradient flowing into the features only.
Tensor compactness_loss(const Tensor& memory, const CategoryFeatureSet& features,
                        const NeighborAssignment& assignment);
Tensor compactness_loss(const Tensor& memory, const CategoryFeatureSet& features);

// Σ_j of the uniqueness term (see UniquenessForm); 0 when fewer than two
// features are present.
Tensor uniqueness_loss(const Tensor& memory, const CategoryFeatureSet& features,
                       const NeighborAssignment& assignment, double margin,
                       UniquenessForm form = UniquenessForm::kPrinted);
Tensor uniqueness_loss(const Tensor& memory, const CategoryFeatureSet& features, double margin,
                       UniquenessForm form = UniquenessForm::kPrinted);

// Σ_k (compactness + uniqueness) over categories present in `features`
// (one entry per category of the bank).
Tensor memory_loss(const MemoryBank& bank, const std::vector<CategoryFeatureSet>& features, double margin,
                   UniquenessForm form = UniquenessForm::kPrinted);

// Bank dumps. Binary layout (little-endian):
//   "MEGABANK" | u32 version=1 | u64 config_hash | u64 K | u64 N_m | u64 C
//   then K·N_m records of u32 category | u32 item | C × f64.
// Text layout: a "# config_hash=<hex>" line, a header line, then one CSV row
// "category,item,v0,...,v{C-1}" per item, values printed with 17 digits.
void write_bank_binary(std::ostream& os, const MemoryBank& bank, std::uint64_t config_hash);
MemoryBank read_bank_binary(std::istream& is, std::uint64_t* config_hash = nullptr);
void write_bank_text(std::ostream& os, const MemoryBank& bank, std::uint64_t config_hash);

}  // namespace mega
