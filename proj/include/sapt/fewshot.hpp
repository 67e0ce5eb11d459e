#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sapt/checkpoint.hpp"
#include "sapt/corpus.hpp"
#include "sapt/evalreport.hpp"
#include "sapt/feature_store.hpp"
#include "sapt/pipeline.hpp"

namespace sapt {

struct FewShotPlan {
  int k = 0;
  std::uint64_t seed = 0;
  std::map<std::string, std::vector<std::string>> selected;  // language -> K train ids

  // Flattened ids, languages in sorted order, each in draw order.
  std::vector<std::string> ids() const;
  bool operator==(const FewShotPlan&) const = default;
};

// Uniform sample of K train utterances per language without replacement.
FewShotPlan sample_fewshot(const Manifest& target, int k, std::uint64_t seed);

enum class FineTuneMode { vanilla, sapt };
std::string_view to_string(FineTuneMode mode);
FineTuneMode fine_tune_mode_from_string(std::string_view name);

struct CellResult {
  FineTuneMode mode = FineTuneMode::vanilla;
  int k = 0;
  std::uint64_t seed = 0;
  double accuracy_pct = 0.0;  // NaN for failed cells
  std::string ckpt_digest;
  std::string status = "ok";  // "ok" or "failed"
};

struct ProtocolResult {
  std::vector<CellResult> cells;  // sorted by (mode, K, seed)

  std::string csv() const;
  std::string digest() const;
  std::vector<CurvePoint> curve() const;
  const CellResult* find(FineTuneMode mode, int k, std::uint64_t seed) const;
};

ProtocolResult parse_protocol_csv(const std::string& text);

struct ProtocolOptions {
  std::vector<int> k_grid{1, 2, 4, 8, 16, 32, 64};
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  TrainConfig finetune = TrainConfig::defaults(StageKind::finetune);
  int workers = 1;
  // When set, finished cells are appended here as they complete and cells
  // already present are not recomputed.
  std::optional<std::filesystem::path> result_file;
};

struct ProtocolStats {
  int cells_computed = 0;
  std::int64_t training_steps = 0;
};

// Seed of the fine-tuning run for (K, seed); shared by both modes.
std::uint64_t fewshot_finetune_seed(std::uint64_t base, int k, std::uint64_t seed);

// For every (mode, K, seed): plan, fine-tune from the mode's checkpoint, and
// score test accuracy. `train_source` serves fine-tuning reads and
// `eval_source` the test split.
ProtocolResult run_protocol(const Manifest& target, const FeatureSource& train_source,
                            const FeatureSource& eval_source, const Checkpoint& theta0, const Checkpoint& sapt_ckpt,
                            const ProtocolOptions& options, ProtocolStats* stats = nullptr);

// Protocol result CSV plus a JSON summary of per-(mode, K) mean and std.
void write_protocol_files(const ProtocolResult& result, const std::filesystem::path& csv_path,
                          const std::filesystem::path& summary_path);

}  // namespace sapt
