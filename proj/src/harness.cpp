#include "mega/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

#include "mega/error.hpp"

namespace fs = std::filesystem;

namespace mega {

namespace {

std::ofstream open_out(const fs::path& p, std::ios::openmode mode = std::ios::out) {
  std::ofstream os(p, mode);
  MEGA_CHECK(os, "cannot write '" << p.string() << "'");
  os << std::setprecision(17);
  return os;
}

void put_optional(std::ostream& os, const std::optional<double>& v) {
  if (v)
    os << *v;
  else
    os << "NA";
}

void write_eval_row(std::ostream& os, const EvalRecord& r) {
  os << r.step << "," << r.probe_accuracy << ",";
  put_optional(os, r.negative_transfer);
  for (const auto& a : r.alignment) {
    os << ",";
    put_optional(os, a);
  }
  os << "\n";
}

// One H×W grid of raw attention values per category, for the first
// evaluation scene of each domain.
void write_attention(const fs::path& dir, const std::string& header, const Trainer& trainer, const EvalSet& set) {
  fs::create_directories(dir);
  auto dump = [&](const Scene& scene, const char* name) {
    for (const auto& a : attention_maps(trainer.model(), trainer.config(), scene.input, scene.domain)) {
      auto os = open_out(dir / (std::string(name) + "_k" + std::to_string(a.category) + ".csv"));
      os << header << "\n";
      const std::size_t H = a.raw.shape()[0], W = a.raw.shape()[1];
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) os << a.raw[y * W + x] << (x + 1 < W ? "," : "\n");
    }
  };
  if (!set.source.empty()) dump(set.source.front(), "source");
  if (!set.target.empty()) dump(set.target.front(), "target");
}

}  // namespace

std::string run_header(const ExperimentConfig& config, std::uint64_t seed) {
  return "# config_hash=" + config.hash_hex() + " variant=" + variant_name(config.variant) +
         " seed=" + std::to_string(seed);
}

RunResult run(const ExperimentConfig& config, std::uint64_t seed, const fs::path& out_root, std::ostream* log) {
  config.validate();
  const auto started = std::chrono::steady_clock::now();
  const std::size_t K = config.scene.categories;
  const std::string header = run_header(config, seed);

  RunResult result;
  result.dir = out_root / variant_name(config.variant) / ("seed_" + std::to_string(seed));
  fs::create_directories(result.dir);

  {
    ExperimentConfig c = config;
    c.seeds = {seed};
    auto os = open_out(result.dir / "config.txt");
    os << header << "\n" << c.serialize();
  }

  Trainer trainer(config, seed);
  auto metrics = open_out(result.dir / "metrics.csv");
  metrics << header << "\nstep,L_total,L_det,L_gda";
  for (std::size_t k = 0; k < K; ++k) metrics << ",L_cda_" << k;
  metrics << ",L_mem,L_sim,lr\n";

  auto eval = open_out(result.dir / "eval.csv");
  eval << header << "\nstep,probe_accuracy,negative_transfer";
  for (std::size_t k = 0; k < K; ++k) eval << ",align_" << k;
  eval << "\n";

  auto evaluate = [&] {
    result.final_eval = trainer.evaluate();
    write_eval_row(eval, result.final_eval);
    if (log)
      *log << variant_name(config.variant) << " seed " << seed << " step " << result.final_eval.step
           << ": probe_accuracy " << std::setprecision(4) << result.final_eval.probe_accuracy << "\n";
  };

  evaluate();
  while (trainer.steps_done() < config.steps) {
    const auto rec = trainer.step();
    const auto& l = rec.losses;
    metrics << rec.step << "," << l.total << "," << l.detection << "," << l.global;
    for (double c : l.category) metrics << "," << c;
    metrics << "," << l.memory << "," << l.similarity << "," << rec.learning_rate << "\n";
    if (trainer.steps_done() % config.eval_interval == 0 || trainer.steps_done() == config.steps) evaluate();
  }
  metrics.flush();
  eval.flush();
  MEGA_CHECK(metrics && eval, "failed writing CSVs in '" << result.dir.string() << "'");

  const auto& bank = trainer.model().depths.back().bank;
  {
    auto os = open_out(result.dir / "memory_bank.bin", std::ios::out | std::ios::binary);
    write_bank_binary(os, bank, config.hash());
  }
  {
    auto os = open_out(result.dir / "memory_bank.csv");
    write_bank_text(os, bank, config.hash());
  }
  write_attention(result.dir / "attention", header, trainer, make_eval_set(config, seed));

  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  auto info = open_out(result.dir / "run_info.txt");
  info << header << "\nwall_clock_seconds=" << std::setprecision(6) << result.seconds << "\n";
  return result;
}

std::vector<RunResult> run_ladder(const ExperimentConfig& config, const fs::path& out_root, std::ostream* log) {
  std::vector<RunResult> out;
  for (auto v : kAllVariants) {
    ExperimentConfig c = config;
    c.variant = v;
    for (auto seed : config.seeds) out.push_back(run(c, seed, out_root, log));
  }
  return out;
}

double quantile(std::vector<double> values, double q) {
  MEGA_CHECK(!values.empty(), "quantile of an empty sample");
  MEGA_CHECK(q >= 0.0 && q <= 1.0, "quantile level " << q << " outside [0, 1]");
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

const MetricSummary& VariantSummary::metric(const std::string& name) const {
  for (const auto& m : metrics)
    if (m.name == name) return m;
  throw Error("summary has no metric '" + name + "'");
}

namespace {

struct FinalRow {
  std::string hash, variant;
  std::vector<std::string> columns;
  std::vector<std::optional<double>> values;
};

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, sep)) out.push_back(cell);
  return out;
}

FinalRow read_final_row(const fs::path& path) {
  std::ifstream in(path);
  MEGA_CHECK(in, "cannot read '" << path.string() << "'");
  FinalRow row;
  std::string line, header, last;
  MEGA_CHECK(std::getline(in, line) && line.rfind("# ", 0) == 0, "'" << path.string() << "' lacks a hash line");
  for (const auto& tok : split(line.substr(2), ' ')) {
    if (tok.rfind("config_hash=", 0) == 0) row.hash = tok.substr(12);
    if (tok.rfind("variant=", 0) == 0) row.variant = tok.substr(8);
  }
  MEGA_CHECK(!row.hash.empty() && !row.variant.empty(), "'" << path.string() << "' has a malformed hash line");
  MEGA_CHECK(std::getline(in, header), "'" << path.string() << "' has no header");
  while (std::getline(in, line))
    if (!line.empty()) last = line;
  MEGA_CHECK(!last.empty(), "'" << path.string() << "' has no evaluation rows");

  row.columns = split(header, ',');
  const auto cells = split(last, ',');
  MEGA_CHECK(cells.size() == row.columns.size(), "'" << path.string() << "': row width differs from header");
  for (const auto& c : cells) {
    if (c == "NA") {
      row.values.push_back(std::nullopt);
    } else {
      std::size_t used = 0;
      const double v = std::stod(c, &used);
      MEGA_CHECK(used == c.size(), "'" << path.string() << "': bad number '" << c << "'");
      row.values.push_back(v);
    }
  }
  return row;
}

int variant_rank(const std::string& name) {
  for (std::size_t i = 0; i < std::size(kAllVariants); ++i)
    if (variant_name(kAllVariants[i]) == name) return static_cast<int>(i);
  return static_cast<int>(std::size(kAllVariants));
}

std::string fmt(const std::optional<double>& v, int precision) {
  if (!v) return "NA";
  std::ostringstream os;
  os << std::setprecision(precision) << *v;
  return os.str();
}

}  // namespace

Summary summarize(const fs::path& dir, bool allow_mixed) {
  MEGA_CHECK(fs::is_directory(dir), "'" << dir.string() << "' is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() == "eval.csv") files.push_back(e.path());
  MEGA_CHECK(!files.empty(), "no eval.csv files under '" << dir.string() << "'");
  std::sort(files.begin(), files.end());

  std::vector<FinalRow> rows;
  for (const auto& f : files) rows.push_back(read_final_row(f));

  Summary s;
  s.config_hash = rows.front().hash;
  for (const auto& r : rows)
    if (r.hash != s.config_hash) {
      MEGA_CHECK(allow_mixed, "runs under '" << dir.string() << "' have different config hashes (" << s.config_hash
                                             << " vs " << r.hash << "); pass --allow-mixed to combine them");
      s.config_hash = "mixed";
    }

  std::map<std::pair<int, std::string>, std::vector<const FinalRow*>> groups;
  for (const auto& r : rows) groups[{variant_rank(r.variant), r.variant}].push_back(&r);

  for (const auto& [key, members] : groups) {
    VariantSummary vs;
    vs.variant = key.second;
    vs.runs = members.size();
    const auto& columns = members.front()->columns;
    for (std::size_t c = 1; c < columns.size(); ++c) {  // column 0 is the step
      MetricSummary m;
      m.name = columns[c];
      std::vector<double> vals;
      for (const auto* r : members) {
        MEGA_CHECK(r->columns == columns, "variant " << vs.variant << " mixes different eval.csv schemas");
        if (r->values[c]) vals.push_back(*r->values[c]);
      }
      m.count = vals.size();
      if (!vals.empty()) {
        m.median = quantile(vals, 0.5);
        m.iqr = quantile(vals, 0.75) - quantile(vals, 0.25);
      }
      vs.metrics.push_back(std::move(m));
    }
    s.variants.push_back(std::move(vs));
  }

  auto csv = open_out(dir / "summary.csv");
  csv << "# config_hash=" << s.config_hash << "\nvariant,runs,metric,count,median,iqr\n";
  for (const auto& v : s.variants)
    for (const auto& m : v.metrics)
      csv << v.variant << "," << v.runs << "," << m.name << "," << m.count << "," << fmt(m.median, 17) << ","
          << fmt(m.iqr, 17) << "\n";

  // Aligned table: one row per variant, median [IQR] per metric.
  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> head{"variant", "runs"};
  for (const auto& m : s.variants.front().metrics) head.push_back(m.name);
  cells.push_back(head);
  for (const auto& v : s.variants) {
    std::vector<std::string> line{v.variant, std::to_string(v.runs)};
    for (const auto& m : v.metrics) line.push_back(fmt(m.median, 4) + " [" + fmt(m.iqr, 3) + "]");
    cells.push_back(line);
  }
  std::vector<std::size_t> widths(head.size(), 0);
  for (const auto& line : cells)
    for (std::size_t i = 0; i < line.size() && i < widths.size(); ++i) widths[i] = std::max(widths[i], line[i].size());
  std::ostringstream table;
  table << "config_hash " << s.config_hash << "\n";
  for (const auto& line : cells) {
    for (std::size_t i = 0; i < line.size(); ++i)
      table << (i ? "  " : "") << std::left << std::setw(static_cast<int>(widths[i])) << line[i];
    table << "\n";
  }
  s.table = table.str();
  return s;
}

}  // namespace mega
