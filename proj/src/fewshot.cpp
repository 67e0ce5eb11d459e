#include "sapt/fewshot.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>

#include "sapt/binary_io.hpp"
#include "sapt/digest.hpp"
#include "sapt/parallel.hpp"
#include "sapt/rng.hpp"

namespace sapt {

using nlohmann::json;

std::vector<std::string> FewShotPlan::ids() const {
  std::vector<std::string> out;
  for (const auto& [lang, ids] : selected) out.insert(out.end(), ids.begin(), ids.end());
  return out;
}

FewShotPlan sample_fewshot(const Manifest& target, int k, std::uint64_t seed) {
  if (k < 1) throw ConfigError("sample_fewshot: K must be >= 1");
  std::map<std::string, std::vector<std::string>> train_by_language;
  for (const auto* r : target.in_split(Split::train)) train_by_language[r->label].push_back(r->id);
  for (const auto& lang : target.labels()) train_by_language[lang];

  FewShotPlan plan;
  plan.k = k;
  plan.seed = seed;
  const std::uint64_t base = derive_seed(seed, static_cast<std::uint64_t>(k));
  for (const auto& [lang, ids] : train_by_language) {
    if (static_cast<int>(ids.size()) < k) {
      throw ConfigError(fmt::format("sample_fewshot: language {} has {} train utterances, K={} requested", lang,
                                    ids.size(), k));
    }
    Rng rng(derive_seed(base, "language/" + lang));
    auto& chosen = plan.selected[lang];
    for (std::size_t i : rng.sample_without_replacement(ids.size(), static_cast<std::size_t>(k))) {
      chosen.push_back(ids[i]);
    }
  }
  return plan;
}

std::string_view to_string(FineTuneMode mode) { return mode == FineTuneMode::vanilla ? "vanilla" : "sapt"; }

FineTuneMode fine_tune_mode_from_string(std::string_view name) {
  if (name == "vanilla") return FineTuneMode::vanilla;
  if (name == "sapt") return FineTuneMode::sapt;
  throw ConfigError(fmt::format("unknown fine-tuning mode '{}'", name));
}

namespace {

auto cell_key(const CellResult& c) { return std::make_tuple(static_cast<int>(c.mode), c.k, c.seed); }

std::string cell_row(const CellResult& c) {
  return fmt::format("{},{},{},{},{},{}\n", to_string(c.mode), c.k, c.seed,
                     std::isfinite(c.accuracy_pct) ? fmt::format("{:.17g}", c.accuracy_pct) : std::string("nan"),
                     c.ckpt_digest, c.status);
}

constexpr std::string_view kProtocolHeader = "mode,K,seed,accuracy_pct,ckpt_digest,status\n";

}  // namespace

std::string ProtocolResult::csv() const {
  std::string out(kProtocolHeader);
  for (const auto& c : cells) out += cell_row(c);
  return out;
}

std::string ProtocolResult::digest() const { return sha256_hex(csv()); }

const CellResult* ProtocolResult::find(FineTuneMode mode, int k, std::uint64_t seed) const {
  for (const auto& c : cells) {
    if (c.mode == mode && c.k == k && c.seed == seed) return &c;
  }
  return nullptr;
}

std::vector<CurvePoint> ProtocolResult::curve() const {
  std::map<std::pair<int, int>, std::vector<double>> groups;
  for (const auto& c : cells) {
    auto& v = groups[{static_cast<int>(c.mode), c.k}];
    if (c.status == "ok") v.push_back(c.accuracy_pct);
  }
  std::vector<CurvePoint> out;
  for (const auto& [key, values] : groups) {
    CurvePoint p;
    p.mode = std::string(to_string(static_cast<FineTuneMode>(key.first)));
    p.k = key.second;
    p.runs = static_cast<int>(values.size());
    if (!values.empty()) {
      double sum = 0.0;
      for (double v : values) sum += v;
      p.mean = sum / values.size();
      if (values.size() > 1) {
        double sq = 0.0;
        for (double v : values) sq += (v - p.mean) * (v - p.mean);
        p.stddev = std::sqrt(sq / (values.size() - 1));
      }
    }
    out.push_back(p);
  }
  return out;
}

ProtocolResult parse_protocol_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  ProtocolResult result;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (header) {
      if (line + "\n" != kProtocolHeader) throw ConfigError("protocol file: unexpected header");
      header = false;
      continue;
    }
    std::vector<std::string> fields;
    std::stringstream row(line);
    std::string field;
    while (std::getline(row, field, ',')) fields.push_back(field);
    if (line.back() == ',') fields.emplace_back();
    if (fields.size() != 6) throw ConfigError(fmt::format("protocol file: malformed row '{}'", line));
    try {
      CellResult c;
      c.mode = fine_tune_mode_from_string(fields[0]);
      c.k = std::stoi(fields[1]);
      c.seed = std::stoull(fields[2]);
      c.accuracy_pct = fields[3] == "nan" ? std::nan("") : std::stod(fields[3]);
      c.ckpt_digest = fields[4];
      c.status = fields[5];
      result.cells.push_back(std::move(c));
    } catch (const std::logic_error&) {
      throw ConfigError(fmt::format("protocol file: malformed row '{}'", line));
    }
  }
  std::sort(result.cells.begin(), result.cells.end(),
            [](const CellResult& a, const CellResult& b) { return cell_key(a) < cell_key(b); });
  return result;
}

std::uint64_t fewshot_finetune_seed(std::uint64_t base, int k, std::uint64_t seed) {
  return derive_seed(derive_seed(derive_seed(base, "fewshot"), static_cast<std::uint64_t>(k)), seed);
}

ProtocolResult run_protocol(const Manifest& target, const FeatureSource& train_source,
                            const FeatureSource& eval_source, const Checkpoint& theta0, const Checkpoint& sapt_ckpt,
                            const ProtocolOptions& options, ProtocolStats* stats) {
  if (theta0.stage != Stage::theta0) throw ConfigError("run_protocol: first checkpoint must be theta0");
  if (sapt_ckpt.stage != Stage::sapt) throw ConfigError("run_protocol: second checkpoint must be sapt");
  if (!(theta0.arch() == sapt_ckpt.arch())) throw ConfigError("run_protocol: theta0 and sapt architectures differ");
  if (sapt_ckpt.source_digest != checkpoint_digest(theta0)) {
    throw ConfigError("run_protocol: sapt checkpoint was not adapted from this theta0");
  }
  if (options.k_grid.empty() || options.seeds.empty()) throw ConfigError("run_protocol: empty K grid or seed list");
  const std::vector<std::string> labels = target.labels();
  if (static_cast<int>(labels.size()) != theta0.arch().num_classes) {
    throw ConfigError("run_protocol: number of target languages does not match num_classes");
  }
  // Fail fast on impossible K before any training.
  for (int k : options.k_grid) sample_fewshot(target, k, options.seeds.front());

  std::map<std::tuple<int, int, std::uint64_t>, CellResult> done;
  if (options.result_file && std::filesystem::exists(*options.result_file)) {
    for (auto& c : parse_protocol_csv(binary::read_file(options.result_file->string())).cells) {
      done.emplace(cell_key(c), std::move(c));
    }
  }

  struct Pending {
    FineTuneMode mode;
    int k;
    std::uint64_t seed;
  };
  std::vector<Pending> pending;
  std::set<std::tuple<int, int, std::uint64_t>> grid;
  for (FineTuneMode mode : {FineTuneMode::vanilla, FineTuneMode::sapt}) {
    for (int k : options.k_grid) {
      for (std::uint64_t seed : options.seeds) {
        const auto key = std::make_tuple(static_cast<int>(mode), k, seed);
        grid.insert(key);
        if (!done.count(key)) pending.push_back({mode, k, seed});
      }
    }
  }

  std::mutex write_mutex;
  if (options.result_file && !std::filesystem::exists(*options.result_file)) {
    std::ofstream out(*options.result_file, std::ios::binary);
    if (!out) throw IoError(fmt::format("cannot write {}", options.result_file->string()));
    out << kProtocolHeader;
  }
  std::int64_t steps = 0;

  parallel_for(pending.size(), options.workers, [&](std::size_t i) {
    const Pending& p = pending[i];
    const FewShotPlan plan = sample_fewshot(target, p.k, p.seed);
    TrainConfig cfg = options.finetune;
    cfg.seed = fewshot_finetune_seed(options.finetune.seed, p.k, p.seed);
    const Checkpoint& start = p.mode == FineTuneMode::vanilla ? theta0 : sapt_ckpt;
    CellResult cell{p.mode, p.k, p.seed, std::nan(""), "", "failed"};
    try {
      const auto ids = plan.ids();
      StageResult trained = finetune(start, target, ids, train_source, cfg, labels);
      const EvalReport report = evaluate(trained.checkpoint, target, Split::test, eval_source);
      cell.accuracy_pct = report.macro_average;
      cell.ckpt_digest = checkpoint_digest(trained.checkpoint);
      cell.status = "ok";
    } catch (const NumericalFailure&) {
      // Recorded as failed.
    }
    std::lock_guard lock(write_mutex);
    steps += cfg.steps;
    if (options.result_file) {
      std::ofstream out(*options.result_file, std::ios::binary | std::ios::app);
      out << cell_row(cell);
      out.flush();
      if (!out) throw IoError(fmt::format("write failed: {}", options.result_file->string()));
    }
    done.emplace(std::make_tuple(static_cast<int>(cell.mode), cell.k, cell.seed), cell);
  });

  ProtocolResult result;
  for (const auto& [key, cell] : done) {
    if (grid.count(key)) result.cells.push_back(cell);
  }
  if (stats) {
    stats->cells_computed += static_cast<int>(pending.size());
    stats->training_steps += steps;
  }
  if (options.result_file) binary::write_file_atomic(options.result_file->string(), result.csv());
  return result;
}

void write_protocol_files(const ProtocolResult& result, const std::filesystem::path& csv_path,
                          const std::filesystem::path& summary_path) {
  binary::write_file_atomic(csv_path.string(), result.csv());
  json summary = json::array();
  for (const auto& p : result.curve()) {
    summary.push_back(
        {{"mode", p.mode}, {"K", p.k}, {"mean_accuracy_pct", p.mean}, {"std_accuracy_pct", p.stddev}, {"runs", p.runs}});
  }
  binary::write_file_atomic(summary_path.string(), json{{"cells", result.cells.size()}, {"summary", summary}}.dump(2) + "\n");
}

}  // namespace sapt
