#include "mega/benchmark.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include "mega/alignment.hpp"
#include "mega/error.hpp"

namespace mega {

SceneSpec SceneSpec::defaults() {
  SceneSpec s;
  s.reset_vectors();
  s.target_noise = 0.1;
  return s;
}

void SceneSpec::reset_vectors() {
  const std::size_t K = categories, C = in_channels;
  category_vectors.assign(K * C, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    category_vectors[k * C + k % C] += 1.0;
    category_vectors[k * C + (k + K) % C] += 0.5;
  }
  background.assign(C, 0.1);
  shift_scale.assign(C, 0.6);
  shift_offset.assign(C, 0.0);
  for (std::size_t c = 0; c < C; ++c) shift_offset[c] = (c % 2 == 0) ? 0.4 : -0.2;
}

void SceneSpec::validate() const {
  MEGA_CHECK(height > 0 && width > 0, "scene grid must be nonempty");
  MEGA_CHECK(categories > 0, "scene needs at least one category");
  MEGA_CHECK(in_channels > 0, "scene needs at least one input channel");
  MEGA_CHECK(min_blobs <= max_blobs, "scene.min_blobs exceeds scene.max_blobs");
  MEGA_CHECK(min_radius > 0 && min_radius <= max_radius, "scene radii must satisfy 0 < min <= max");
  MEGA_CHECK(2.0 * max_radius + 1.0 <= static_cast<double>(std::min(height, width)),
             "scene.max_radius too large for the grid");
  MEGA_CHECK(category_vectors.size() == categories * in_channels,
             "scene.category_vectors needs " << categories * in_channels << " values, got "
                                             << category_vectors.size());
  MEGA_CHECK(background.size() == in_channels, "scene.background needs " << in_channels << " values");
  MEGA_CHECK(shift_scale.size() == in_channels, "scene.shift_scale needs " << in_channels << " values");
  MEGA_CHECK(shift_offset.size() == in_channels, "scene.shift_offset needs " << in_channels << " values");
  MEGA_CHECK(source_noise >= 0 && target_noise >= 0, "scene noise levels must be nonnegative");
}

bool SceneSpec::identity_shift() const {
  for (std::size_t c = 0; c < in_channels; ++c)
    if (shift_scale[c] != 1.0 || shift_offset[c] != 0.0) return false;
  return target_noise == 0.0;
}

SourceView source_view(const Scene& scene) {
  MEGA_CHECK(scene.domain == Domain::kSource, "source_view of a target scene");
  return {scene.input, scene.masks};
}

TargetView target_view(const Scene& scene) { return {scene.input}; }

Scene generate_scene(const SceneSpec& spec, Domain domain, Rng& rng) {
  spec.validate();
  const std::size_t H = spec.height, W = spec.width, C = spec.in_channels, K = spec.categories, HW = H * W;
  Scene scene;
  scene.domain = domain;
  scene.masks.assign(K, std::vector<double>(HW, 0.0));
  std::vector<int> owner(HW, -1);

  std::uniform_int_distribution<std::size_t> count_dist(spec.min_blobs, spec.max_blobs);
  std::uniform_int_distribution<std::size_t> cat_dist(0, K - 1);
  std::uniform_real_distribution<double> radius_dist(spec.min_radius, spec.max_radius);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  const std::size_t n_blobs = count_dist(rng);
  for (std::size_t b = 0; b < n_blobs; ++b) {
    bool placed = false;
    for (std::size_t attempt = 0; attempt < spec.max_retries && !placed; ++attempt) {
      Blob blob;
      blob.category = cat_dist(rng);
      blob.radius = radius_dist(rng);
      blob.center_y = blob.radius + unit(rng) * (static_cast<double>(H - 1) - 2.0 * blob.radius);
      blob.center_x = blob.radius + unit(rng) * (static_cast<double>(W - 1) - 2.0 * blob.radius);
      std::vector<std::size_t> cells;
      bool clash = false;
      for (std::size_t y = 0; y < H && !clash; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          const double dy = static_cast<double>(y) - blob.center_y, dx = static_cast<double>(x) - blob.center_x;
          if (dy * dy + dx * dx > blob.radius * blob.radius) continue;
          if (!spec.allow_overlap && owner[y * W + x] >= 0) {
            clash = true;
            break;
          }
          cells.push_back(y * W + x);
        }
      if (clash || cells.empty()) continue;
      for (auto l : cells) {
        scene.masks[blob.category][l] = 1.0;
        if (owner[l] < 0) owner[l] = static_cast<int>(blob.category);
      }
      scene.blobs.push_back(blob);
      placed = true;
    }
    MEGA_CHECK(placed, "could not place blob " << b << " after " << spec.max_retries << " attempts");
  }

  std::normal_distribution<double> texture(0.0, 1.0);
  std::vector<double> input(C * HW);
  for (std::size_t l = 0; l < HW; ++l) {
    const double* base =
        owner[l] >= 0 ? spec.category_vectors.data() + static_cast<std::size_t>(owner[l]) * C : spec.background.data();
    for (std::size_t c = 0; c < C; ++c) input[c * HW + l] = base[c] + spec.source_noise * texture(rng);
  }
  if (domain == Domain::kTarget) {
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t l = 0; l < HW; ++l) {
        double& v = input[c * HW + l];
        v = spec.shift_scale[c] * v + spec.shift_offset[c];
        if (spec.target_noise > 0.0) v += spec.target_noise * texture(rng);
      }
  }
  scene.input = Tensor::from({C, H, W}, std::move(input));
  return scene;
}

// ---------------------------------------------------------------------------
// Scene dumps

namespace {

constexpr std::array<char, 8> kSceneMagic{'M', 'E', 'G', 'A', 'S', 'C', 'N', '1'};

void put_u64(std::ostream& os, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}
void put_u32(std::ostream& os, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}
std::uint64_t get_uint(std::istream& is, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    const int c = is.get();
    MEGA_CHECK(c != std::char_traits<char>::eof(), "scene dump truncated");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

std::uint64_t spec_hash(const SceneSpec& s) {
  std::ostringstream os;
  os.precision(17);
  os << s.height << ' ' << s.width << ' ' << s.categories << ' ' << s.in_channels << ' ' << s.min_blobs << ' '
     << s.max_blobs << ' ' << s.min_radius << ' ' << s.max_radius << ' ' << s.allow_overlap << ' ' << s.max_retries
     << ' ' << s.source_noise << ' ' << s.target_noise;
  for (const auto* v : {&s.category_vectors, &s.background, &s.shift_scale, &s.shift_offset}) {
    os << " |";
    for (double x : *v) os << ' ' << x;
  }
  return fnv1a(os.str());
}

void write_scene_binary(std::ostream& os, const Scene& scene, std::uint64_t hash) {
  const auto& shape = scene.input.shape();
  os.write(kSceneMagic.data(), kSceneMagic.size());
  put_u64(os, hash);
  put_u32(os, scene.domain == Domain::kSource ? 0 : 1);
  put_u64(os, shape[0]);
  put_u64(os, shape[1]);
  put_u64(os, shape[2]);
  put_u64(os, scene.masks.size());
  for (double v : scene.input.data()) put_u64(os, std::bit_cast<std::uint64_t>(v));
  for (const auto& m : scene.masks)
    for (double v : m) put_u64(os, std::bit_cast<std::uint64_t>(v));
}

Scene read_scene_binary(std::istream& is, std::uint64_t* hash) {
  std::array<char, 8> magic{};
  is.read(magic.data(), magic.size());
  MEGA_CHECK(is.good() && magic == kSceneMagic, "not a scene dump");
  const auto h = get_uint(is, 8);
  if (hash) *hash = h;
  Scene scene;
  scene.domain = get_uint(is, 4) == 0 ? Domain::kSource : Domain::kTarget;
  const auto C = get_uint(is, 8), H = get_uint(is, 8), W = get_uint(is, 8), K = get_uint(is, 8);
  std::vector<double> input(C * H * W);
  for (auto& v : input) v = std::bit_cast<double>(get_uint(is, 8));
  scene.input = Tensor::from({C, H, W}, std::move(input));
  scene.masks.assign(K, std::vector<double>(H * W));
  for (auto& m : scene.masks)
    for (auto& v : m) v = std::bit_cast<double>(get_uint(is, 8));
  return scene;
}

// ---------------------------------------------------------------------------
// Encoder

Encoder::Encoder(std::size_t in_channels, const std::vector<std::size_t>& widths, Rng& rng) : widths_(widths) {
  MEGA_CHECK(!widths.empty(), "encoder needs at least one block");
  std::vector<ConvStack::Layer> layers;
  for (auto w : widths) layers.push_back({w, 3, true});
  net_ = ConvStack(in_channels, layers, rng);
}

// ---------------------------------------------------------------------------
// Metrics

namespace {

struct Centroids {
  std::vector<std::vector<double>> mean;  // K × C
  std::vector<std::size_t> count;         // K
};

Centroids category_centroids(std::span<const Tensor> features, std::span<const MaskSet> masks) {
  MEGA_CHECK(features.size() == masks.size(), "metrics: " << features.size() << " feature maps but "
                                                          << masks.size() << " mask sets");
  MEGA_CHECK(!features.empty(), "metrics: empty evaluation set");
  const std::size_t C = features[0].shape()[0];
  const std::size_t K = masks[0].size();
  Centroids out{std::vector<std::vector<double>>(K, std::vector<double>(C, 0.0)), std::vector<std::size_t>(K, 0)};
  for (std::size_t n = 0; n < features.size(); ++n) {
    const auto& f = features[n];
    MEGA_CHECK(f.dim() == 3 && f.shape()[0] == C, "metrics: inconsistent feature maps");
    MEGA_CHECK(masks[n].size() == K, "metrics: inconsistent category count");
    const std::size_t HW = f.shape()[1] * f.shape()[2];
    auto fd = f.data();
    for (std::size_t k = 0; k < K; ++k) {
      MEGA_CHECK(masks[n][k].size() == HW, "metrics: mask size does not match feature map");
      for (std::size_t l = 0; l < HW; ++l) {
        if (masks[n][k][l] == 0.0) continue;
        ++out.count[k];
        for (std::size_t c = 0; c < C; ++c) out.mean[k][c] += fd[c * HW + l];
      }
    }
  }
  for (std::size_t k = 0; k < K; ++k)
    if (out.count[k] > 0)
      for (auto& v : out.mean[k]) v /= static_cast<double>(out.count[k]);
  return out;
}

}  // namespace

std::vector<std::optional<double>> category_alignment_score(std::span<const Tensor> source_features,
                                                            std::span<const Tensor> target_features,
                                                            std::span<const MaskSet> source_masks,
                                                            std::span<const MaskSet> target_masks) {
  const auto src = category_centroids(source_features, source_masks);
  const auto tgt = category_centroids(target_features, target_masks);
  MEGA_CHECK(src.count.size() == tgt.count.size(), "metrics: category counts differ between domains");
  std::vector<std::optional<double>> out(src.count.size());
  for (std::size_t k = 0; k < out.size(); ++k) {
    if (src.count[k] == 0 || tgt.count[k] == 0) continue;
    double d2 = 0.0;
    for (std::size_t c = 0; c < src.mean[k].size(); ++c) {
      const double d = src.mean[k][c] - tgt.mean[k][c];
      d2 += d * d;
    }
    out[k] = std::sqrt(d2);
  }
  return out;
}

std::optional<double> negative_transfer_score(std::span<const Tensor> source_features,
                                              std::span<const Tensor> target_features,
                                              std::span<const MaskSet> source_masks,
                                              std::span<const MaskSet> target_masks) {
  const auto src = category_centroids(source_features, source_masks);
  const std::size_t K = src.count.size();
  bool any_centroid = false;
  for (auto c : src.count) any_centroid |= c > 0;
  if (!any_centroid) return std::nullopt;
  MEGA_CHECK(target_features.size() == target_masks.size(), "metrics: target features and masks differ in count");

  std::size_t total = 0, wrong = 0;
  for (std::size_t n = 0; n < target_features.size(); ++n) {
    const auto& f = target_features[n];
    const std::size_t C = f.shape()[0], HW = f.shape()[1] * f.shape()[2];
    auto fd = f.data();
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t l = 0; l < HW; ++l) {
        if (target_masks[n][k][l] == 0.0) continue;
        std::size_t best = K;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < K; ++j) {
          if (src.count[j] == 0) continue;
          double d2 = 0.0;
          for (std::size_t c = 0; c < C; ++c) {
            const double d = fd[c * HW + l] - src.mean[j][c];
            d2 += d * d;
          }
          if (d2 < best_d) {
            best_d = d2;
            best = j;
          }
        }
        ++total;
        if (best != k) ++wrong;
      }
  }
  if (total == 0) return std::nullopt;
  return static_cast<double>(wrong) / static_cast<double>(total);
}

std::vector<std::size_t> LinearProbe::predict(const Tensor& map) const {
  MEGA_CHECK(map.dim() == 3 && map.shape()[0] == channels,
             "probe expects " << channels << "-channel maps, got " << shape_str(map.shape()));
  const std::size_t HW = map.shape()[1] * map.shape()[2];
  auto fd = map.data();
  std::vector<std::size_t> out(HW);
  std::vector<double> x(channels);
  for (std::size_t l = 0; l < HW; ++l) {
    for (std::size_t c = 0; c < channels; ++c) x[c] = (fd[c * HW + l] - mean[c]) * inv_std[c];
    std::size_t best = 0;
    double best_s = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < classes; ++j) {
      double s = bias[j];
      for (std::size_t c = 0; c < channels; ++c) s += weight[j * channels + c] * x[c];
      if (s > best_s) {
        best_s = s;
        best = j;
      }
    }
    out[l] = best;
  }
  return out;
}

LinearProbe train_probe(std::span<const Tensor> features, std::span<const MaskSet> masks, std::size_t categories,
                        const ProbeOptions& options) {
  MEGA_CHECK(!features.empty(), "train_probe: empty training set");
  MEGA_CHECK(features.size() == masks.size(), "train_probe: features and masks differ in count");
  const std::size_t C = features[0].shape()[0];
  LinearProbe probe;
  probe.channels = C;
  probe.classes = categories + 1;

  std::vector<double> rows;
  std::vector<std::size_t> labels;
  for (std::size_t n = 0; n < features.size(); ++n) {
    const auto& f = features[n];
    MEGA_CHECK(f.dim() == 3 && f.shape()[0] == C, "train_probe: inconsistent feature maps");
    const std::size_t HW = f.shape()[1] * f.shape()[2];
    const auto lab = location_labels(masks[n], HW);
    auto fd = f.data();
    for (std::size_t l = 0; l < HW; ++l) {
      for (std::size_t c = 0; c < C; ++c) rows.push_back(fd[c * HW + l]);
      labels.push_back(lab[l]);
    }
  }
  const std::size_t N = labels.size();
  probe.mean.assign(C, 0.0);
  probe.inv_std.assign(C, 1.0);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t c = 0; c < C; ++c) probe.mean[c] += rows[i * C + c];
  for (auto& m : probe.mean) m /= static_cast<double>(N);
  std::vector<double> var(C, 0.0);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t c = 0; c < C; ++c) {
      const double d = rows[i * C + c] - probe.mean[c];
      var[c] += d * d;
    }
  for (std::size_t c = 0; c < C; ++c) {
    const double sd = std::sqrt(var[c] / static_cast<double>(N));
    probe.inv_std[c] = sd > 1e-12 ? 1.0 / sd : 0.0;
  }
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t c = 0; c < C; ++c) rows[i * C + c] = (rows[i * C + c] - probe.mean[c]) * probe.inv_std[c];

  const Tensor x = Tensor::from({N, C}, std::move(rows));
  Tensor w = Tensor::zeros({C, probe.classes}, true);
  Tensor b = Tensor::zeros({1, probe.classes}, true);
  const Tensor ones = Tensor::full({N, 1}, 1.0);
  for (std::size_t it = 0; it < options.iterations; ++it) {
    w.zero_grad();
    b.zero_grad();
    cross_entropy(add(matmul(x, w), matmul(ones, b)), labels).backward();
    auto wd = w.mutable_data();
    auto bd = b.mutable_data();
    for (std::size_t i = 0; i < wd.size(); ++i) wd[i] -= options.learning_rate * w.grad()[i];
    for (std::size_t i = 0; i < bd.size(); ++i) bd[i] -= options.learning_rate * b.grad()[i];
  }

  probe.weight.assign(probe.classes * C, 0.0);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t j = 0; j < probe.classes; ++j) probe.weight[j * C + c] = w[c * probe.classes + j];
  probe.bias.assign(b.data().begin(), b.data().end());
  return probe;
}

double probe_accuracy(const LinearProbe& probe, std::span<const Tensor> features, std::span<const MaskSet> masks) {
  MEGA_CHECK(!features.empty(), "probe_accuracy: empty evaluation set");
  MEGA_CHECK(features.size() == masks.size(), "probe_accuracy: features and masks differ in count");
  std::size_t correct = 0, total = 0;
  for (std::size_t n = 0; n < features.size(); ++n) {
    const auto pred = probe.predict(features[n]);
    const auto lab = location_labels(masks[n], pred.size());
    for (std::size_t l = 0; l < pred.size(); ++l) correct += pred[l] == lab[l];
    total += pred.size();
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

}  // namespace mega
