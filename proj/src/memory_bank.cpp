#include "mega/memory_bank.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <istream>
#include <ostream>

#include "mega/error.hpp"

namespace mega {

CategoryFeatureSet gather_category_features(const Tensor& map, std::span<const double> mask) {
  for (double v : mask)
    if (v != 0.0) return {masked_select(map, mask)};
  return {};
}

// ---------------------------------------------------------------------------
// MemoryBank

MemoryBank::MemoryBank(std::size_t categories, std::size_t items, std::size_t channels)
    : categories_(categories), items_(items), channels_(channels), values_(categories * items * channels, 0.0) {
  MEGA_CHECK(categories > 0 && items > 0 && channels > 0, "MemoryBank: all dimensions must be positive");
}

MemoryBank MemoryBank::random_unit(std::size_t categories, std::size_t items, std::size_t channels, Rng& rng) {
  MemoryBank bank(categories, items, channels);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t r = 0; r < categories * items; ++r) {
    double* row = bank.values_.data() + r * channels;
    double n2 = 0.0;
    do {
      n2 = 0.0;
      for (std::size_t c = 0; c < channels; ++c) {
        row[c] = normal(rng);
        n2 += row[c] * row[c];
      }
    } while (n2 == 0.0);
    const double inv = 1.0 / std::sqrt(n2);
    for (std::size_t c = 0; c < channels; ++c) row[c] *= inv;
  }
  return bank;
}

std::size_t MemoryBank::offset(std::size_t k, std::size_t j) const {
  MEGA_CHECK(k < categories_, "memory category " << k << " out of range " << categories_);
  MEGA_CHECK(j < items_, "memory item " << j << " out of range " << items_);
  return (k * items_ + j) * channels_;
}

std::span<const double> MemoryBank::item(std::size_t k, std::size_t j) const {
  return {values_.data() + offset(k, j), channels_};
}

void MemoryBank::set_item(std::size_t k, std::size_t j, std::span<const double> values) {
  MEGA_CHECK(values.size() == channels_, "set_item: expected " << channels_ << " values, got " << values.size());
  std::copy(values.begin(), values.end(), values_.begin() + static_cast<std::ptrdiff_t>(offset(k, j)));
}

Tensor MemoryBank::matrix(std::size_t k) const {
  const auto first = values_.begin() + static_cast<std::ptrdiff_t>(offset(k, 0));
  return Tensor::from({items_, channels_}, {first, first + static_cast<std::ptrdiff_t>(items_ * channels_)});
}

void MemoryBank::set_matrix(std::size_t k, const Tensor& m) {
  MEGA_CHECK(m.shape() == Shape({items_, channels_}),
             "set_matrix: expected " << items_ << "x" << channels_ << ", got " << shape_str(m.shape()));
  std::copy(m.data().begin(), m.data().end(), values_.begin() + static_cast<std::ptrdiff_t>(offset(k, 0)));
}

bool MemoryBank::write(std::size_t k, const CategoryFeatureSet& features) {
  MEGA_CHECK(k < categories_, "memory category " << k << " out of range " << categories_);
  const auto p = write_similarity(matrix(k), features);
  if (!p) return false;
  set_matrix(k, write_update(matrix(k), features, *p));
  return true;
}

// ---------------------------------------------------------------------------
// Write / read

namespace {

void check_memory(const Tensor& memory) {
  MEGA_CHECK(memory.dim() == 2, "memory must be N_m×C, got " << shape_str(memory.shape()));
}

void check_features(const Tensor& memory, const CategoryFeatureSet& features) {
  check_memory(memory);
  if (features.empty()) return;
  MEGA_CHECK(features.features.dim() == 2 && features.features.shape()[1] == memory.shape()[1],
             "feature set " << shape_str(features.features.shape()) << " does not match memory width "
                            << memory.shape()[1]);
}

}  // namespace

std::optional<Tensor> write_similarity(const Tensor& memory, const CategoryFeatureSet& features) {
  check_features(memory, features);
  if (features.empty()) return std::nullopt;
  const Tensor m = memory.detach();
  const Tensor g = features.features.detach();
  return softmax(matmul(m, transpose(g)), 1);
}

Tensor write_update(const Tensor& memory, const CategoryFeatureSet& features, const Tensor& p) {
  check_features(memory, features);
  if (features.empty()) return memory.detach();
  const std::size_t nm = memory.shape()[0], c = memory.shape()[1], nk = features.count();
  MEGA_CHECK(p.shape() == Shape({nm, nk}), "write_update: similarity must be " << nm << "x" << nk << ", got "
                                                                              << shape_str(p.shape()));
  auto md = memory.data();
  auto gd = features.features.data();
  auto pd = p.data();
  std::vector<double> out(md.begin(), md.end());
  for (std::size_t j = 0; j < nm; ++j) {
    double* row = out.data() + j * c;
    for (std::size_t i = 0; i < nk; ++i) {
      const double w = pd[j * nk + i];
      for (std::size_t ch = 0; ch < c; ++ch) row[ch] += w * gd[i * c + ch];
    }
    double n2 = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) n2 += row[ch] * row[ch];
    // A zero row has no direction to normalize to; keep the previous item.
    if (n2 == 0.0) {
      std::copy_n(md.begin() + static_cast<std::ptrdiff_t>(j * c), c, row);
      continue;
    }
    const double inv = 1.0 / std::sqrt(n2);
    for (std::size_t ch = 0; ch < c; ++ch) row[ch] *= inv;
  }
  return Tensor::from({nm, c}, std::move(out));
}

ReadResult read(const Tensor& memory, const Tensor& query) {
  check_memory(memory);
  const std::size_t c = memory.shape()[1];
  MEGA_CHECK(query.size() == c, "read: query has " << query.size() << " channels, memory has " << c);
  const Tensor g = reshape(query, {1, c});
  const Tensor q = softmax(matmul(g, transpose(memory)), 1);
  return {reshape(q, {memory.shape()[0]}), reshape(matmul(q, memory), {c})};
}

Tensor read_map(const Tensor& memory, const Tensor& map) {
  check_memory(memory);
  MEGA_CHECK(map.dim() == 3, "read_map expects a C×H×W map, got " << shape_str(map.shape()));
  const std::size_t c = map.shape()[0], h = map.shape()[1], w = map.shape()[2];
  MEGA_CHECK(memory.shape()[1] == c, "read_map: map has " << c << " channels, memory has " << memory.shape()[1]);
  const Tensor queries = transpose(reshape(map, {c, h * w}));            // HW×C
  const Tensor q = softmax(matmul(queries, transpose(memory)), 1);      // HW×N_m
  return reshape(transpose(matmul(q, memory)), {c, h, w});
}

// ---------------------------------------------------------------------------
// Regularizers

NeighborAssignment nearest_features(const Tensor& memory, const CategoryFeatureSet& features) {
  check_features(memory, features);
  NeighborAssignment out;
  if (features.empty()) return out;
  const std::size_t nm = memory.shape()[0], c = memory.shape()[1], nk = features.count();
  auto md = memory.data();
  auto gd = features.features.data();
  std::vector<double> scores(nk);
  for (std::size_t j = 0; j < nm; ++j) {
    for (std::size_t i = 0; i < nk; ++i) {
      double s = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) s += md[j * c + ch] * gd[i * c + ch];
      scores[i] = s;
    }
    // Strict comparisons keep the lowest index on ties.
    std::size_t best = 0;
    for (std::size_t i = 1; i < nk; ++i)
      if (scores[i] > scores[best]) best = i;
    out.positive.push_back(best);
    if (nk < 2) continue;
    std::size_t second = best == 0 ? 1 : 0;
    for (std::size_t i = 0; i < nk; ++i)
      if (i != best && scores[i] > scores[second]) second = i;
    out.negative.push_back(second);
  }
  return out;
}

Tensor compactness_loss(const Tensor& memory, const CategoryFeatureSet& features,
                        const NeighborAssignment& assignment) {
  check_features(memory, features);
  if (features.empty()) return Tensor::scalar(0.0);
  MEGA_CHECK(assignment.positive.size() == memory.shape()[0], "compactness_loss: assignment size mismatch");
  const Tensor gp = gather_rows(features.features, assignment.positive);
  return sum(l2_norm(sub(memory.detach(), gp), 1));
}

Tensor compactness_loss(const Tensor& memory, const CategoryFeatureSet& features) {
  return compactness_loss(memory, features, nearest_features(memory, features));
}

Tensor uniqueness_loss(const Tensor& memory, const CategoryFeatureSet& features,
                       const NeighborAssignment& assignment, double margin, UniquenessForm form) {
  check_features(memory, features);
  if (features.count() < 2) return Tensor::scalar(0.0);
  MEGA_CHECK(assignment.positive.size() == memory.shape()[0] && assignment.negative.size() == memory.shape()[0],
             "uniqueness_loss: assignment size mismatch");
  const Tensor m = memory.detach();
  const Tensor dp = l2_norm(sub(m, gather_rows(features.features, assignment.positive)), 1);
  const Tensor dn = l2_norm(sub(m, gather_rows(features.features, assignment.negative)), 1);
  const Tensor diff = sub(dp, dn);
  if (form == UniquenessForm::kPrinted) return sum(clamp_min(diff, margin));
  return sum(clamp_min(add_scalar(diff, margin), 0.0));
}

Tensor uniqueness_loss(const Tensor& memory, const CategoryFeatureSet& features, double margin,
                       UniquenessForm form) {
  return uniqueness_loss(memory, features, nearest_features(memory, features), margin, form);
}

Tensor memory_loss(const MemoryBank& bank, const std::vector<CategoryFeatureSet>& features, double margin,
                   UniquenessForm form) {
  MEGA_CHECK(features.size() == bank.categories(),
             "memory_loss: " << features.size() << " feature sets for " << bank.categories() << " categories");
  Tensor total;
  for (std::size_t k = 0; k < bank.categories(); ++k) {
    if (features[k].empty()) continue;
    const Tensor m = bank.matrix(k);
    const auto nn = nearest_features(m, features[k]);
    const Tensor term = add(compactness_loss(m, features[k], nn), uniqueness_loss(m, features[k], nn, margin, form));
    total = total.defined() ? add(total, term) : term;
  }
  return total.defined() ? total : Tensor::scalar(0.0);
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

constexpr std::array<char, 8> kBankMagic{'M', 'E', 'G', 'A', 'B', 'A', 'N', 'K'};
constexpr std::uint32_t kBankVersion = 1;

template <class T>
void put_le(std::ostream& os, T value) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  const U bits = std::bit_cast<U>(value);
  std::array<char, sizeof(T)> bytes{};
  for (std::size_t i = 0; i < sizeof(T); ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
  os.write(bytes.data(), bytes.size());
}

template <class T>
T get_le(std::istream& is) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  std::array<unsigned char, sizeof(T)> bytes{};
  is.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  MEGA_CHECK(is.good(), "memory bank dump truncated");
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<U>(bytes[i]) << (8 * i);
  return std::bit_cast<T>(bits);
}

}  // namespace

void write_bank_binary(std::ostream& os, const MemoryBank& bank, std::uint64_t config_hash) {
  os.write(kBankMagic.data(), kBankMagic.size());
  put_le<std::uint32_t>(os, kBankVersion);
  put_le<std::uint64_t>(os, config_hash);
  put_le<std::uint64_t>(os, bank.categories());
  put_le<std::uint64_t>(os, bank.items());
  put_le<std::uint64_t>(os, bank.channels());
  for (std::size_t k = 0; k < bank.categories(); ++k)
    for (std::size_t j = 0; j < bank.items(); ++j) {
      put_le<std::uint32_t>(os, static_cast<std::uint32_t>(k));
      put_le<std::uint32_t>(os, static_cast<std::uint32_t>(j));
      for (double v : bank.item(k, j)) put_le<double>(os, v);
    }
}

MemoryBank read_bank_binary(std::istream& is, std::uint64_t* config_hash) {
  std::array<char, 8> magic{};
  is.read(magic.data(), magic.size());
  MEGA_CHECK(is.good() && magic == kBankMagic, "not a memory bank dump");
  const auto version = get_le<std::uint32_t>(is);
  MEGA_CHECK(version == kBankVersion, "unsupported memory bank version " << version);
  const auto hash = get_le<std::uint64_t>(is);
  if (config_hash) *config_hash = hash;
  const auto k = get_le<std::uint64_t>(is);
  const auto nm = get_le<std::uint64_t>(is);
  const auto c = get_le<std::uint64_t>(is);
  MemoryBank bank(k, nm, c);
  std::vector<double> row(c);
  for (std::size_t r = 0; r < k * nm; ++r) {
    const auto cat = get_le<std::uint32_t>(is);
    const auto item = get_le<std::uint32_t>(is);
    for (auto& v : row) v = get_le<double>(is);
    bank.set_item(cat, item, row);
  }
  return bank;
}

void write_bank_text(std::ostream& os, const MemoryBank& bank, std::uint64_t config_hash) {
  os << "# config_hash=" << std::hex << std::setw(16) << std::setfill('0') << config_hash << std::dec
     << std::setfill(' ') << "\n";
  os << "category,item";
  for (std::size_t c = 0; c < bank.channels(); ++c) os << ",v" << c;
  os << "\n" << std::setprecision(17);
  for (std::size_t k = 0; k < bank.categories(); ++k)
    for (std::size_t j = 0; j < bank.items(); ++j) {
      os << k << "," << j;
      for (double v : bank.item(k, j)) os << "," << v;
      os << "\n";
    }
}

}  // namespace mega
