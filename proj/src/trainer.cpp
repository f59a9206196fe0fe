#include "mega/trainer.hpp"

#include <cmath>
#include <sstream>

#include "mega/error.hpp"

namespace mega {

namespace {

// RNG stream tags; each consumer of randomness gets its own stream.
enum Stream : std::uint64_t {
  kEncoderInit = 1,
  kHeadInit = 2,
  kSourceScenes = 3,
  kTargetScenes = 4,
  kEvalSource = 5,
  kEvalTarget = 6,
  kMemoryInit = 100,
  kGlobalDiscInit = 200,
  kCategoryDiscInit = 300,
  kSimilarityInit = 400,
};

void accumulate(Tensor& acc, const Tensor& t) { acc = acc.defined() ? add(acc, t) : t; }

std::vector<double> ones(std::size_t n) { return std::vector<double>(n, 1.0); }

}  // namespace

VariantTerms terms_for(Variant v) {
  switch (v) {
    case Variant::kSourceOnly: return {};
    case Variant::kGda: return {true, false, false, false};
    case Variant::kGdaCdaMa: return {true, true, true, false};
    case Variant::kMegaCda: return {true, true, true, true};
  }
  return {};
}

Model::Model(const ExperimentConfig& config, std::uint64_t seed) {
  config.validate();
  const auto& spec = config.scene;
  const auto& widths = config.model.encoder_widths;
  const std::size_t K = spec.categories;

  auto enc_rng = make_rng(seed, kEncoderInit);
  encoder = Encoder(spec.in_channels, widths, enc_rng);
  auto head_rng = make_rng(seed, kHeadInit);
  head = ConvStack(widths.back(), {{K + 1, 1, false}}, head_rng);

  Discriminator::Options disc_opts;
  disc_opts.width = config.model.disc_width();
  disc_opts.grl_coeff = config.model.grl_coeff;
  SimilarityNets::Options sim_opts;
  sim_opts.widths = config.model.sim_widths();
  sim_opts.share_retrieved_branch = config.model.share_retrieved_branch;
  sim_opts.split_domain_feature_branch = config.model.split_domain_feature_branch;

  for (std::size_t d = 0; d < config.depths; ++d) {
    DepthModules m;
    m.block = widths.size() - config.depths + d;
    const std::size_t C = widths[m.block];

    auto g_rng = make_rng(seed, kGlobalDiscInit + d);
    m.global = Discriminator(C, disc_opts, g_rng);
    auto c_rng = make_rng(seed, kCategoryDiscInit + d);
    for (std::size_t k = 0; k < K; ++k)
      m.category.push_back(config.model.tie_discriminator_init ? m.global.clone()
                                                               : Discriminator(C, disc_opts, c_rng));
    auto s_rng = make_rng(seed, kSimilarityInit + d);
    m.similarity = SimilarityNets(C, K, sim_opts, s_rng);
    auto m_rng = make_rng(seed, kMemoryInit + d);
    m.bank = MemoryBank::random_unit(K, config.memory_items, C, m_rng);
    depths.push_back(std::move(m));
  }
}

std::vector<Tensor> Model::parameters(Variant v) const {
  const auto terms = terms_for(v);
  std::vector<Tensor> out = encoder.parameters();
  auto append = [&](const std::vector<Tensor>& ps) { out.insert(out.end(), ps.begin(), ps.end()); };
  append(head.parameters());
  for (const auto& m : depths) {
    if (terms.global) append(m.global.parameters());
    if (terms.category)
      for (const auto& d : m.category) append(d.parameters());
    if (terms.learned_similarity) append(m.similarity.parameters());
  }
  return out;
}

Batch sample_batch(const SceneSpec& spec, Rng& source_rng, Rng& target_rng) {
  return {source_view(generate_scene(spec, Domain::kSource, source_rng)),
          target_view(generate_scene(spec, Domain::kTarget, target_rng))};
}

ForwardResult forward_objective(const Model& model, const ExperimentConfig& config, const Batch& batch) {
  const auto terms = terms_for(config.variant);
  const std::size_t K = config.scene.categories;
  const auto& masks = batch.source.masks;
  MEGA_CHECK(masks.size() == K, "source scene has " << masks.size() << " masks, expected " << K);

  const auto src = model.encoder.forward(batch.source.input);
  const Tensor& last = src.back();
  const std::size_t locations = last.shape()[1] * last.shape()[2];

  ObjectiveTerms t;
  t.detection = surrogate_detection_loss(model.head.forward(last), location_labels(masks, locations),
                                           config.detection_reduction);

  std::vector<Tensor> tgt;
  if (terms.global || terms.category) tgt = model.encoder.forward(batch.target.input);
  if (terms.category) t.category.resize(K);

  ForwardResult out;
  for (const auto& m : model.depths) {
    const Tensor& fs = src[m.block];
    if (terms.global) accumulate(t.global, global_da_loss(fs, tgt[m.block], m.global));

    if (terms.memory) {
      std::vector<CategoryFeatureSet> sets, detached;
      const Tensor fs_const = fs.detach();
      for (std::size_t k = 0; k < K; ++k) {
        sets.push_back(gather_category_features(fs, masks[k]));
        detached.push_back(gather_category_features(fs_const, masks[k]));
        if (config.memory_normalize_features && !sets.back().empty()) {
          sets.back().features = normalize_rows(sets.back().features);
          detached.back().features = normalize_rows(detached.back().features);
        }
      }
      accumulate(t.memory, memory_loss(m.bank, sets, config.weights.alpha, config.uniqueness));
      out.write_features.push_back(std::move(detached));
    }

    if (!terms.category) continue;
    const Tensor& ft = tgt[m.block];
    for (std::size_t k = 0; k < K; ++k) {
      std::vector<double> source_gate, target_gate;
      if (config.attention_mode == AttentionMode::kAllOnes) {
        source_gate = ones(locations);
        target_gate = ones(locations);
      } else if (terms.learned_similarity) {
        // The source map keeps its graph: its supervision trains Θ, Θ^k and
        // the encoder. The binary gates never carry gradient.
        auto a = attention_for_category(fs, m.bank, k, SimilarityKind::kLearned, &m.similarity, Domain::kSource);
        accumulate(t.similarity, similarity_supervision_loss(a.raw, masks[k], Domain::kSource));
        source_gate = std::move(a.binary);
        NoGradGuard ng;
        target_gate =
            attention_for_category(ft, m.bank, k, SimilarityKind::kLearned, &m.similarity, Domain::kTarget).binary;
      } else {
        NoGradGuard ng;
        source_gate = attention_for_category(fs, m.bank, k, SimilarityKind::kCosine).binary;
        target_gate = attention_for_category(ft, m.bank, k, SimilarityKind::kCosine).binary;
      }
      accumulate(t.category[k],
                 category_da_loss(fs, ft, source_gate, target_gate, m.category[k], config.cda_summation));
    }
  }
  out.objective = combine_objective(t, config.weights);
  return out;
}

std::vector<AttentionMap> attention_maps(const Model& model, const ExperimentConfig& config, const Tensor& input,
                                         Domain domain) {
  NoGradGuard ng;
  const auto& m = model.depths.back();
  const Tensor map = model.encoder.forward(input)[m.block];
  const auto kind = terms_for(config.variant).learned_similarity ? SimilarityKind::kLearned : SimilarityKind::kCosine;
  std::vector<AttentionMap> out;
  for (std::size_t k = 0; k < m.bank.categories(); ++k)
    out.push_back(attention_for_category(map, m.bank, k, kind, &m.similarity, domain));
  return out;
}

double learning_rate_at(const OptimizerConfig& opt, std::size_t step) {
  return step >= opt.decay_step ? opt.learning_rate * opt.decay_factor : opt.learning_rate;
}

EvalSet make_eval_set(const ExperimentConfig& config, std::uint64_t seed) {
  EvalSet set;
  auto s_rng = make_rng(seed, kEvalSource);
  auto t_rng = make_rng(seed, kEvalTarget);
  for (std::size_t i = 0; i < config.eval.probe_scenes; ++i)
    set.source.push_back(generate_scene(config.scene, Domain::kSource, s_rng));
  for (std::size_t i = 0; i < config.eval.eval_scenes; ++i)
    set.target.push_back(generate_scene(config.scene, Domain::kTarget, t_rng));
  return set;
}

EvalRecord evaluate_encoder(const Encoder& encoder, const ExperimentConfig& config, const EvalSet& set) {
  std::vector<Tensor> sf, tf;
  std::vector<MaskSet> sm, tm;
  {
    NoGradGuard ng;
    for (const auto& s : set.source) {
      sf.push_back(encoder.forward(s.input).back());
      sm.push_back(s.masks);
    }
    for (const auto& s : set.target) {
      tf.push_back(encoder.forward(s.input).back());
      tm.push_back(s.masks);
    }
  }
  const auto probe = train_probe(sf, sm, config.scene.categories,
                                 {config.eval.probe_iterations, config.eval.probe_learning_rate});
  EvalRecord r;
  r.probe_accuracy = probe_accuracy(probe, tf, tm);
  r.negative_transfer = negative_transfer_score(sf, tf, sm, tm);
  r.alignment = category_alignment_score(sf, tf, sm, tm);
  return r;
}

Trainer::Trainer(const ExperimentConfig& config, std::uint64_t seed)
    : config_(config),
      seed_(seed),
      model_(config, seed),
      optimizer_(model_.parameters(config.variant), config.optimizer.momentum),
      source_rng_(make_rng(seed, kSourceScenes)),
      target_rng_(make_rng(seed, kTargetScenes)),
      eval_set_(make_eval_set(config, seed)) {}

StepRecord Trainer::step() {
  const Batch batch = sample_batch(config_.scene, source_rng_, target_rng_);
  optimizer_.zero_grad();
  auto fr = forward_objective(model_, config_, batch);
  const auto& b = fr.objective.breakdown;

  auto check = [&](const char* name, double v) {
    if (!std::isfinite(v)) {
      std::ostringstream os;
      os << "non-finite " << name << " loss (" << v << ") at step " << step_ << " of " << variant_name(config_.variant)
         << " seed " << seed_;
      throw NumericError(os.str());
    }
  };
  check("total", b.total);
  check("detection", b.detection);
  check("global", b.global);
  for (double c : b.category) check("category", c);
  check("memory", b.memory);
  check("similarity", b.similarity);

  fr.objective.total.backward();
  StepRecord rec{step_, b, learning_rate_at(config_.optimizer, step_)};
  optimizer_.step(rec.learning_rate);

  for (std::size_t d = 0; d < fr.write_features.size(); ++d)
    for (std::size_t k = 0; k < fr.write_features[d].size(); ++k)
      model_.depths[d].bank.write(k, fr.write_features[d][k]);

  if (rec.losses.category.empty()) rec.losses.category.assign(config_.scene.categories, 0.0);
  ++step_;
  return rec;
}

EvalRecord Trainer::evaluate() const {
  auto r = evaluate_encoder(model_.encoder, config_, eval_set_);
  r.step = step_;
  return r;
}

}  // namespace mega
