#include "mega/attention.hpp"

#include "mega/error.hpp"

namespace mega {

std::vector<double> binarize(std::span<const double> raw, double threshold) {
  std::vector<double> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = raw[i] > threshold ? 1.0 : 0.0;
  return out;
}

void check_binary_mask(std::span<const double> mask) {
  for (double v : mask) MEGA_CHECK(v == 0.0 || v == 1.0, "attention mask is not binary (found " << v << ")");
}

SimilarityNets::SimilarityNets(std::size_t channels, std::size_t categories, const Options& options, Rng& rng)
    : categories_(categories) {
  MEGA_CHECK(options.widths.size() >= 2, "SimilarityNets: need at least two widths");
  std::vector<ConvStack::Layer> layers;
  for (std::size_t i = 0; i + 1 < options.widths.size(); ++i) layers.push_back({options.widths[i], 3, true});
  layers.push_back({options.widths.back(), 1, false});

  feature_.emplace_back(channels, layers, rng);
  if (options.split_domain_feature_branch) feature_.emplace_back(channels, layers, rng);
  const std::size_t n = options.share_retrieved_branch ? 1 : categories;
  for (std::size_t k = 0; k < n; ++k) retrieved_.emplace_back(channels, layers, rng);
}

SimilarityNets SimilarityNets::identity(std::size_t channels, std::size_t categories) {
  SimilarityNets s;
  s.categories_ = categories;
  s.feature_.push_back(ConvStack::identity(channels));
  for (std::size_t k = 0; k < categories; ++k) s.retrieved_.push_back(ConvStack::identity(channels));
  return s;
}

const ConvStack& SimilarityNets::feature_branch(Domain domain) const {
  MEGA_CHECK(!feature_.empty(), "SimilarityNets not initialized");
  return domain == Domain::kTarget && feature_.size() > 1 ? feature_[1] : feature_[0];
}

const ConvStack& SimilarityNets::retrieved_branch(std::size_t k) const {
  MEGA_CHECK(k < categories_, "similarity category " << k << " out of range " << categories_);
  return retrieved_.size() == 1 ? retrieved_[0] : retrieved_[k];
}

std::vector<Tensor> SimilarityNets::parameters() const {
  std::vector<Tensor> ps;
  for (const auto& s : feature_)
    for (auto& p : s.parameters()) ps.push_back(p);
  for (const auto& s : retrieved_)
    for (auto& p : s.parameters()) ps.push_back(p);
  return ps;
}

AttentionMap cosine_attention(const Tensor& map, const Tensor& retrieved, std::size_t category) {
  Tensor raw = cosine_map(map, retrieved);
  auto binary = binarize(raw.data());
  return {std::move(raw), std::move(binary), category};
}

AttentionMap learned_attention(const Tensor& map, const Tensor& retrieved, const ConvStack& feature_branch,
                               const ConvStack& retrieved_branch, std::size_t category) {
  MEGA_CHECK(feature_branch.out_channels() == retrieved_branch.out_channels(),
             "learned_attention: branch widths differ (" << feature_branch.out_channels() << " vs "
                                                         << retrieved_branch.out_channels() << ")");
  return cosine_attention(feature_branch.forward(map), retrieved_branch.forward(retrieved), category);
}

Tensor similarity_supervision_loss(const Tensor& raw, std::span<const double> mask, Domain domain) {
  MEGA_CHECK(domain == Domain::kSource, "similarity supervision needs source-domain masks");
  MEGA_CHECK(raw.size() == mask.size(),
             "similarity_supervision_loss: mask has " << mask.size() << " entries, map has " << raw.size());
  check_binary_mask(mask);
  std::vector<double> target(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) target[i] = mask[i] != 0.0 ? 1.0 : -1.0;
  return mean(square(sub(raw, Tensor::from(raw.shape(), std::move(target)))));
}

AttentionMap attention_for_category(const Tensor& map, const MemoryBank& bank, std::size_t k,
                                    SimilarityKind kind, const SimilarityNets* nets, Domain domain) {
  MEGA_CHECK(k < bank.categories(), "attention category " << k << " out of range " << bank.categories());
  const Tensor retrieved = read_map(bank.matrix(k), map);
  if (kind == SimilarityKind::kCosine) return cosine_attention(map, retrieved, k);
  MEGA_CHECK(nets != nullptr, "learned attention requires similarity nets");
  return learned_attention(map, retrieved, nets->feature_branch(domain), nets->retrieved_branch(k), k);
}

}  // namespace mega
