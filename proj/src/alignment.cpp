#include "mega/alignment.hpp"

#include "mega/attention.hpp"
#include "mega/error.hpp"

namespace mega {

Discriminator::Discriminator(std::size_t channels, const Options& options, Rng& rng)
    : options_(options),
      net_(channels,
           {{options.width, 1, true}, {options.width, 3, true}, {options.width, 3, true}, {1, 3, false}}, rng) {}

Tensor Discriminator::forward(const Tensor& map) const {
  MEGA_CHECK(map.dim() == 3, "discriminator expects C×H×W features, got " << shape_str(map.shape()));
  const Tensor in = options_.reverse_gradient ? grl(map, options_.grl_coeff) : map;
  const Tensor logits = net_.forward(in);
  return sigmoid(reshape(logits, {map.shape()[1], map.shape()[2]}));
}

Discriminator Discriminator::clone() const {
  Discriminator d;
  d.options_ = options_;
  d.net_ = net_.clone();
  return d;
}

namespace {

void check_spatial(const Tensor& a, const Tensor& b, const char* op) {
  MEGA_CHECK(a.dim() == 3 && b.dim() == 3, op << ": expects C×H×W maps");
  MEGA_CHECK(a.shape() == b.shape(),
             op << ": source " << shape_str(a.shape()) << " and target " << shape_str(b.shape()) << " differ");
}

}  // namespace

Tensor global_da_loss(const Tensor& source, const Tensor& target, const Discriminator& disc) {
  check_spatial(source, target, "global_da_loss");
  const Tensor ds = disc.forward(source);
  const Tensor dt = disc.forward(target);
  return add(sum(square(rsub_scalar(1.0, ds))), sum(square(dt)));
}

Tensor category_da_loss(const Tensor& source, const Tensor& target, std::span<const double> source_mask,
                        std::span<const double> target_mask, const Discriminator& disc, CdaSummation summation) {
  check_spatial(source, target, "category_da_loss");
  check_binary_mask(source_mask);
  check_binary_mask(target_mask);
  const Tensor ds = disc.forward(mask_multiply(source, source_mask));
  const Tensor dt = disc.forward(mask_multiply(target, target_mask));
  Tensor src_term = square(rsub_scalar(1.0, ds));
  Tensor tgt_term = square(dt);
  if (summation == CdaSummation::kMasked) {
    src_term = mul(src_term, Tensor::from(src_term.shape(), {source_mask.begin(), source_mask.end()}));
    tgt_term = mul(tgt_term, Tensor::from(tgt_term.shape(), {target_mask.begin(), target_mask.end()}));
  }
  return add(sum(src_term), sum(tgt_term));
}

std::vector<std::size_t> location_labels(const std::vector<std::vector<double>>& masks, std::size_t locations) {
  const std::size_t K = masks.size();
  std::vector<std::size_t> labels(locations, K);
  for (std::size_t k = K; k-- > 0;) {
    MEGA_CHECK(masks[k].size() == locations, "location_labels: mask " << k << " has wrong size");
    for (std::size_t l = 0; l < locations; ++l)
      if (masks[k][l] != 0.0) labels[l] = k;
  }
  return labels;
}

Tensor surrogate_detection_loss(const Tensor& logits, std::span<const std::size_t> labels, Reduction reduction) {
  MEGA_CHECK(logits.dim() == 3, "surrogate loss expects (K+1)×H×W logits, got " << shape_str(logits.shape()));
  const std::size_t classes = logits.shape()[0], hw = logits.shape()[1] * logits.shape()[2];
  const Tensor ce = cross_entropy(transpose(reshape(logits, {classes, hw})), labels);
  return reduction == Reduction::kSum ? scale(ce, static_cast<double>(hw)) : ce;
}

double LossBreakdown::category_sum() const {
  double s = 0.0;
  for (double v : category) s += v;
  return s;
}

double LossBreakdown::weighted_sum(const ObjectiveWeights& w) const {
  return detection + w.beta * global + w.gamma * category_sum() + w.lambda * memory + w.similarity * similarity;
}

Objective combine_objective(const ObjectiveTerms& terms, const ObjectiveWeights& weights) {
  MEGA_CHECK(weights.beta >= 0 && weights.gamma >= 0 && weights.lambda >= 0 && weights.alpha >= 0 &&
                 weights.similarity >= 0,
             "objective weights must be nonnegative");
  MEGA_CHECK(terms.detection.defined(), "objective needs the source detection term");
  Objective out;
  out.total = terms.detection;
  out.breakdown.detection = terms.detection.item();

  auto accumulate = [&](const Tensor& t, double w, double& slot) {
    if (!t.defined()) return;
    slot = t.item();
    if (w != 0.0) out.total = add(out.total, scale(t, w));
  };
  accumulate(terms.global, weights.beta, out.breakdown.global);
  out.breakdown.category.assign(terms.category.size(), 0.0);
  for (std::size_t k = 0; k < terms.category.size(); ++k)
    accumulate(terms.category[k], weights.gamma, out.breakdown.category[k]);
  accumulate(terms.memory, weights.lambda, out.breakdown.memory);
  accumulate(terms.similarity, weights.similarity, out.breakdown.similarity);
  out.breakdown.total = out.total.item();
  return out;
}

}  // namespace mega
