#pragma once

// Seeded two-domain scene generator, the small conv encoder that stands in
// for a detection backbone, and centroid/probe metrics for alignment.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "mega/attention.hpp"
#include "mega/nn.hpp"
#include "mega/tensor.hpp"

namespace mega {

// K masks of H×W, each entry 0 or 1.
using MaskSet = std::vector<std::vector<double>>;

struct SceneSpec {
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t categories = 3;
  std::size_t in_channels = 8;
  std::size_t min_blobs = 4;
  std::size_t max_blobs = 6;
  double min_radius = 1.5;
  double max_radius = 2.5;
  bool allow_overlap = false;
  std::size_t max_retries = 200;

  // K × C_in category appearance vectors and the C_in background vector.
  std::vector<double> category_vectors;
  std::vector<double> background;
  // Per-pixel Gaussian texture noise in both domains.
  double source_noise = 0.2;

  // Target-only shift: x ← scale ⊙ x + offset + N(0, target_noise²).
  std::vector<double> shift_scale;
  std::vector<double> shift_offset;
  double target_noise = 0.0;

  // Default benchmark: K = 3 on 16×16 grids with 8 input channels.
  static SceneSpec defaults();
  // Refills the appearance and shift vectors with the defaults for the
  // current (categories, in_channels).
  void reset_vectors();
  void validate() const;
  // Identity shift with no extra noise.
  bool identity_shift() const;
};

struct Blob {
  std::size_t category = 0;
  double center_y = 0.0;
  double center_x = 0.0;
  double radius = 0.0;
};

struct Scene {
  Domain domain = Domain::kSource;
  Tensor input;  // C_in×H×W
  MaskSet masks;
  std::vector<Blob> blobs;
};

// What training may see of a scene. Target views carry no masks.
struct SourceView {
  Tensor input;
  MaskSet masks;
};
struct TargetView {
  Tensor input;
};
SourceView source_view(const Scene& scene);
TargetView target_view(const Scene& scene);

// Deterministic in (spec, domain, rng state). Throws when blobs cannot be
// placed within max_retries attempts.
Scene generate_scene(const SceneSpec& spec, Domain domain, Rng& rng);

// Scene dump, little-endian:
//   "MEGASCN1" | u64 spec_hash | u32 domain (0 source, 1 target)
//   | u64 C | u64 H | u64 W | u64 K | C·H·W f64 input | K·H·W f64 masks.
std::uint64_t spec_hash(const SceneSpec& spec);
void write_scene_binary(std::ostream& os, const Scene& scene, std::uint64_t spec_hash);
Scene read_scene_binary(std::istream& is, std::uint64_t* spec_hash = nullptr);

// Stack of 3×3 conv + ReLU blocks; every block's output is a feature depth.
class Encoder {
 public:
  Encoder() = default;
  Encoder(std::size_t in_channels, const std::vector<std::size_t>& widths, Rng& rng);

  std::vector<Tensor> forward(const Tensor& input) const { return net_.forward_all(input); }
  std::size_t depths() const { return net_.num_layers(); }
  std::size_t width(std::size_t depth) const { return widths_.at(depth); }
  std::vector<Tensor> parameters() const { return net_.parameters(); }

 private:
  std::vector<std::size_t> widths_;
  ConvStack net_;
};

// For each category, the L2 distance between mean source and mean target
// feature vectors over that category's mask locations; nullopt when the
// category is absent from either side.
std::vector<std::optional<double>> category_alignment_score(std::span<const Tensor> source_features,
                                                            std::span<const Tensor> target_features,
                                                            std::span<const MaskSet> source_masks,
                                                            std::span<const MaskSet> target_masks);

// Fraction of target category locations whose nearest source category
// centroid is a different category; nullopt when no target category
// locations exist or no source centroid is available.
std::optional<double> negative_transfer_score(std::span<const Tensor> source_features,
                                              std::span<const Tensor> target_features,
                                              std::span<const MaskSet> source_masks,
                                              std::span<const MaskSet> target_masks);

// Per-location (K+1)-way linear softmax classifier on standardized features.
struct LinearProbe {
  std::size_t channels = 0;
  std::size_t classes = 0;
  std::vector<double> weight;  // classes × channels
  std::vector<double> bias;    // classes
  std::vector<double> mean;    // channels
  std::vector<double> inv_std; // channels

  // Class index per location of a C×H×W map.
  std::vector<std::size_t> predict(const Tensor& map) const;
};

struct ProbeOptions {
  std::size_t iterations = 300;
  double learning_rate = 1.0;
};

LinearProbe train_probe(std::span<const Tensor> features, std::span<const MaskSet> masks, std::size_t categories,
                        const ProbeOptions& options = {});

// Per-location accuracy against labels derived from the masks (background
// = class K). Throws on an empty evaluation set.
double probe_accuracy(const LinearProbe& probe, std::span<const Tensor> features, std::span<const MaskSet> masks);

}  // namespace mega
