#include "mega/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>

#include "mega/error.hpp"

namespace mega {

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::kSourceOnly: return "source_only";
    case Variant::kGda: return "gda";
    case Variant::kGdaCdaMa: return "gda_cda_ma";
    case Variant::kMegaCda: return "mega_cda";
  }
  return "unknown";
}

Variant parse_variant(std::string_view name) {
  for (auto v : kAllVariants)
    if (variant_name(v) == name) return v;
  throw Error("unknown variant '" + std::string(name) + "' (expected source_only, gda, gda_cda_ma or mega_cda)");
}

std::size_t ModelConfig::disc_width() const {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(64.0 * disc_width_scale)));
}

std::vector<std::size_t> ModelConfig::sim_widths() const {
  std::vector<std::size_t> out;
  for (double base : {512.0, 256.0, 128.0, 64.0})
    out.push_back(std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(base * sim_width_scale))));
  return out;
}

std::string format_hash(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

double to_double(std::string_view key, std::string_view text) {
  const std::string s = trim(text);
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  MEGA_CHECK(ec == std::errc() && ptr == s.data() + s.size() && std::isfinite(v),
             "config key '" << key << "': '" << s << "' is not a finite number");
  return v;
}

std::uint64_t to_uint(std::string_view key, std::string_view text) {
  const std::string s = trim(text);
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  MEGA_CHECK(ec == std::errc() && ptr == s.data() + s.size(),
             "config key '" << key << "': '" << s << "' is not a nonnegative integer");
  return v;
}

bool to_bool(std::string_view key, std::string_view text) {
  const std::string s = trim(text);
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw Error("config key '" + std::string(key) + "': '" + s + "' is not a boolean");
}

std::vector<std::string> split_list(std::string_view text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto comma = text.find(',', start);
    const auto piece = trim(text.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (!piece.empty()) out.push_back(piece);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

template <class T, class F>
std::string join(const std::vector<T>& xs, F f) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + f(xs[i]);
  return out;
}

std::string fmt_doubles(const std::vector<double>& xs) { return join(xs, fmt_double); }

template <class T>
std::string fmt_uints(const std::vector<T>& xs) {
  return join(xs, [](T v) { return std::to_string(v); });
}

std::vector<double> to_doubles(std::string_view key, std::string_view text) {
  std::vector<double> out;
  for (const auto& p : split_list(text)) out.push_back(to_double(key, p));
  return out;
}

struct Field {
  const char* key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, std::string_view)> set;
};

#define MEGA_DOUBLE(KEY, MEMBER)                                                          \
  Field {                                                                                 \
    KEY, [](const ExperimentConfig& c) { return fmt_double(c.MEMBER); },                  \
        [](ExperimentConfig& c, std::string_view v) { c.MEMBER = to_double(KEY, v); }     \
  }
#define MEGA_UINT(KEY, MEMBER)                                                                      \
  Field {                                                                                           \
    KEY, [](const ExperimentConfig& c) { return std::to_string(c.MEMBER); },                        \
        [](ExperimentConfig& c, std::string_view v) { c.MEMBER = static_cast<std::size_t>(to_uint(KEY, v)); } \
  }
#define MEGA_BOOL(KEY, MEMBER)                                                            \
  Field {                                                                                 \
    KEY, [](const ExperimentConfig& c) { return std::string(c.MEMBER ? "true" : "false"); }, \
        [](ExperimentConfig& c, std::string_view v) { c.MEMBER = to_bool(KEY, v); }       \
  }
#define MEGA_DOUBLES(KEY, MEMBER)                                                         \
  Field {                                                                                 \
    KEY, [](const ExperimentConfig& c) { return fmt_doubles(c.MEMBER); },                 \
        [](ExperimentConfig& c, std::string_view v) { c.MEMBER = to_doubles(KEY, v); }    \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      {"variant", [](const ExperimentConfig& c) { return variant_name(c.variant); },
       [](ExperimentConfig& c, std::string_view v) { c.variant = parse_variant(trim(v)); }},
      MEGA_UINT("depths", depths),
      MEGA_UINT("steps", steps),
      MEGA_UINT("eval_interval", eval_interval),
      {"seeds", [](const ExperimentConfig& c) { return fmt_uints(c.seeds); },
       [](ExperimentConfig& c, std::string_view v) {
         c.seeds.clear();
         for (const auto& p : split_list(v)) c.seeds.push_back(to_uint("seeds", p));
       }},
      {"output_dir", [](const ExperimentConfig& c) { return c.output_dir; },
       [](ExperimentConfig& c, std::string_view v) { c.output_dir = trim(v); }},

      MEGA_UINT("scene.height", scene.height),
      MEGA_UINT("scene.width", scene.width),
      // Changing the dimensions resets the appearance vectors; parse()
      // applies these two keys before any explicit vector keys.
      {"scene.categories", [](const ExperimentConfig& c) { return std::to_string(c.scene.categories); },
       [](ExperimentConfig& c, std::string_view v) {
         const auto k = static_cast<std::size_t>(to_uint("scene.categories", v));
         if (k != c.scene.categories) {
           c.scene.categories = k;
           c.scene.reset_vectors();
         }
       }},
      {"scene.in_channels", [](const ExperimentConfig& c) { return std::to_string(c.scene.in_channels); },
       [](ExperimentConfig& c, std::string_view v) {
         const auto n = static_cast<std::size_t>(to_uint("scene.in_channels", v));
         if (n != c.scene.in_channels) {
           c.scene.in_channels = n;
           c.scene.reset_vectors();
         }
       }},
      MEGA_UINT("scene.min_blobs", scene.min_blobs),
      MEGA_UINT("scene.max_blobs", scene.max_blobs),
      MEGA_DOUBLE("scene.min_radius", scene.min_radius),
      MEGA_DOUBLE("scene.max_radius", scene.max_radius),
      MEGA_BOOL("scene.allow_overlap", scene.allow_overlap),
      MEGA_UINT("scene.max_retries", scene.max_retries),
      MEGA_DOUBLES("scene.category_vectors", scene.category_vectors),
      MEGA_DOUBLES("scene.background", scene.background),
      MEGA_DOUBLE("scene.source_noise", scene.source_noise),
      MEGA_DOUBLES("scene.shift_scale", scene.shift_scale),
      MEGA_DOUBLES("scene.shift_offset", scene.shift_offset),
      MEGA_DOUBLE("scene.target_noise", scene.target_noise),

      MEGA_DOUBLE("weights.beta", weights.beta),
      MEGA_DOUBLE("weights.gamma", weights.gamma),
      MEGA_DOUBLE("weights.lambda", weights.lambda),
      MEGA_DOUBLE("weights.alpha", weights.alpha),
      MEGA_DOUBLE("weights.similarity", weights.similarity),

      MEGA_UINT("memory.items", memory_items),
      MEGA_BOOL("memory.normalize_features", memory_normalize_features),
      {"memory.uniqueness",
       [](const ExperimentConfig& c) {
         return std::string(c.uniqueness == UniquenessForm::kPrinted ? "printed" : "hinge");
       },
       [](ExperimentConfig& c, std::string_view v) {
         const auto s = trim(v);
         MEGA_CHECK(s == "printed" || s == "hinge", "memory.uniqueness must be printed or hinge, got '" << s << "'");
         c.uniqueness = s == "printed" ? UniquenessForm::kPrinted : UniquenessForm::kHinge;
       }},

      MEGA_DOUBLE("optim.lr", optimizer.learning_rate),
      MEGA_DOUBLE("optim.momentum", optimizer.momentum),
      MEGA_DOUBLE("optim.decay_factor", optimizer.decay_factor),
      MEGA_UINT("optim.decay_step", optimizer.decay_step),

      {"model.encoder_widths", [](const ExperimentConfig& c) { return fmt_uints(c.model.encoder_widths); },
       [](ExperimentConfig& c, std::string_view v) {
         c.model.encoder_widths.clear();
         for (const auto& p : split_list(v))
           c.model.encoder_widths.push_back(static_cast<std::size_t>(to_uint("model.encoder_widths", p)));
       }},
      MEGA_DOUBLE("model.disc_width_scale", model.disc_width_scale),
      MEGA_DOUBLE("model.sim_width_scale", model.sim_width_scale),
      MEGA_BOOL("model.share_retrieved_branch", model.share_retrieved_branch),
      MEGA_BOOL("model.split_domain_feature_branch", model.split_domain_feature_branch),
      MEGA_BOOL("model.tie_discriminator_init", model.tie_discriminator_init),
      MEGA_DOUBLE("model.grl_coeff", model.grl_coeff),

      {"alignment.cda_sum",
       [](const ExperimentConfig& c) {
         return std::string(c.cda_summation == CdaSummation::kAll ? "all" : "masked");
       },
       [](ExperimentConfig& c, std::string_view v) {
         const auto s = trim(v);
         MEGA_CHECK(s == "all" || s == "masked", "alignment.cda_sum must be all or masked, got '" << s << "'");
         c.cda_summation = s == "all" ? CdaSummation::kAll : CdaSummation::kMasked;
       }},
      {"detection.reduction",
       [](const ExperimentConfig& c) {
         return std::string(c.detection_reduction == Reduction::kMean ? "mean" : "sum");
       },
       [](ExperimentConfig& c, std::string_view v) {
         const auto s = trim(v);
         MEGA_CHECK(s == "mean" || s == "sum", "detection.reduction must be mean or sum, got '" << s << "'");
         c.detection_reduction = s == "mean" ? Reduction::kMean : Reduction::kSum;
       }},
      {"attention.mode",
       [](const ExperimentConfig& c) {
         return std::string(c.attention_mode == AttentionMode::kMemory ? "memory" : "all_ones");
       },
       [](ExperimentConfig& c, std::string_view v) {
         const auto s = trim(v);
         MEGA_CHECK(s == "memory" || s == "all_ones", "attention.mode must be memory or all_ones, got '" << s << "'");
         c.attention_mode = s == "memory" ? AttentionMode::kMemory : AttentionMode::kAllOnes;
       }},

      MEGA_UINT("eval.probe_scenes", eval.probe_scenes),
      MEGA_UINT("eval.eval_scenes", eval.eval_scenes),
      MEGA_UINT("eval.probe_iterations", eval.probe_iterations),
      MEGA_DOUBLE("eval.probe_lr", eval.probe_learning_rate),
  };
  return table;
}

#undef MEGA_DOUBLE
#undef MEGA_UINT
#undef MEGA_BOOL
#undef MEGA_DOUBLES

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

void ExperimentConfig::set(std::string_view key, std::string_view value) {
  for (const auto& f : fields())
    if (key == f.key) {
      f.set(*this, value);
      return;
    }
  throw Error("unknown config key '" + std::string(key) + "'");
}

ExperimentConfig ExperimentConfig::parse(std::string_view text) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::map<std::string, std::size_t> seen;
  std::size_t line_no = 0, start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const auto t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    MEGA_CHECK(eq != std::string::npos, "config line " << line_no << ": expected key=value, got '" << t << "'");
    auto key = trim(std::string_view(t).substr(0, eq));
    MEGA_CHECK(seen.emplace(key, line_no).second, "config line " << line_no << ": duplicate key '" << key << "'");
    entries.emplace_back(std::move(key), trim(std::string_view(t).substr(eq + 1)));
  }

  ExperimentConfig cfg;
  for (const char* dim : {"scene.categories", "scene.in_channels"})
    for (const auto& [k, v] : entries)
      if (k == dim) cfg.set(k, v);
  for (const auto& [k, v] : entries)
    if (k != "scene.categories" && k != "scene.in_channels") cfg.set(k, v);
  cfg.validate();
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream in(path);
  MEGA_CHECK(in, "cannot open config file '" << path << "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string ExperimentConfig::serialize() const {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + "=" + f.get(*this) + "\n";
  return out;
}

void ExperimentConfig::validate() const {
  scene.validate();
  MEGA_CHECK(depths == 1 || depths == 2, "depths must be 1 or 2, got " << depths);
  MEGA_CHECK(model.encoder_widths.size() >= depths,
             "encoder has " << model.encoder_widths.size() << " blocks, cannot align at " << depths << " depths");
  for (auto w : model.encoder_widths) MEGA_CHECK(w > 0, "encoder widths must be positive");
  MEGA_CHECK(memory_items > 0, "memory.items must be positive");
  MEGA_CHECK(weights.beta >= 0 && weights.gamma >= 0 && weights.lambda >= 0 && weights.alpha >= 0 &&
                 weights.similarity >= 0,
             "loss weights must be nonnegative");
  MEGA_CHECK(optimizer.learning_rate >= 0 && optimizer.momentum >= 0 && optimizer.momentum < 1 &&
                 optimizer.decay_factor >= 0,
             "optimizer settings out of range");
  MEGA_CHECK(model.disc_width_scale > 0 && model.sim_width_scale > 0, "width scales must be positive");
  MEGA_CHECK(!seeds.empty(), "at least one seed is required");
  MEGA_CHECK(eval.probe_scenes > 0 && eval.eval_scenes > 0, "evaluation sets must be nonempty");
  MEGA_CHECK(eval_interval > 0, "eval_interval must be positive");
}

std::uint64_t ExperimentConfig::hash() const {
  std::string text;
  for (const auto& f : fields()) {
    const std::string_view key = f.key;
    if (key == "variant" || key == "seeds" || key == "output_dir") continue;
    text += std::string(key) + "=" + f.get(*this) + "\n";
  }
  return fnv1a(text);
}

std::string ExperimentConfig::hash_hex() const { return format_hash(hash()); }

}  // namespace mega
