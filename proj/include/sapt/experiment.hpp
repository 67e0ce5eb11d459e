#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>

#include "sapt/config.hpp"
#include "sapt/evalreport.hpp"
#include "sapt/feature_store.hpp"
#include "sapt/fewshot.hpp"

namespace sapt {

struct ExperimentOptions {
  int workers = 1;
  bool resume = true;
  std::ostream* log = nullptr;
};

// Files of one experiment directory.
struct ExperimentPaths {
  std::filesystem::path root;

  std::filesystem::path config() const { return root / "config.json"; }
  std::filesystem::path corpus() const { return root / "corpus"; }
  std::filesystem::path theta0() const { return root / "checkpoints" / "theta0.ckpt"; }
  std::filesystem::path sapt() const { return root / "checkpoints" / "sapt.ckpt"; }
  std::filesystem::path finetuned(std::string_view from) const {
    return root / "checkpoints" / fmt_finetuned(from);
  }
  std::filesystem::path trace(std::string_view stage) const {
    return root / "traces" / (std::string(stage) + ".csv");
  }
  std::filesystem::path full_run(std::string_view mode, std::uint64_t seed) const;
  std::filesystem::path protocol() const { return root / "protocol.csv"; }
  std::filesystem::path protocol_summary() const { return root / "protocol_summary.json"; }
  std::filesystem::path adaptation() const { return root / "adaptation.json"; }
  std::filesystem::path audit() const { return root / "audit.csv"; }

 private:
  static std::string fmt_finetuned(std::string_view from) { return "finetuned-" + std::string(from) + ".ckpt"; }
};

struct ExperimentOutcome {
  std::int64_t training_steps = 0;  // optimizer steps executed by this invocation
  int cells_computed = 0;
  ProtocolResult protocol;
  std::vector<EvalReport> vanilla_runs;  // full-data fine-tuning, one per seed
  std::vector<EvalReport> sapt_runs;
  std::optional<EvalReport> vanilla;  // mean over seeds
  std::optional<EvalReport> sapt;
  double theta0_target_loss = 0.0;  // mean self-supervised loss on D_T train
  double sapt_target_loss = 0.0;
};

// Drives the commands over one experiment directory. Every step skips work
// whose outputs already exist (unless resume is off), so any command can be
// re-run safely.
class Experiment {
 public:
  Experiment(ExperimentConfig cfg, std::filesystem::path out_dir, ExperimentOptions options = {});

  const ExperimentConfig& config() const { return cfg_; }
  const ExperimentPaths& paths() const { return paths_; }
  const AuditLog& audit() const { return audit_; }
  const Manifest& pretrain_manifest();
  const Manifest& target_manifest();

  void generate_corpus();
  Checkpoint ensure_theta0();
  Checkpoint ensure_sapt();
  // Full-data fine-tuning from theta0 or sapt with the first configured seed.
  Checkpoint finetune_full(FineTuneMode from);
  ExperimentOutcome run();

  std::int64_t training_steps() const { return steps_; }

 private:
  void prepare_directory();
  void load_corpus();
  GuardedSource view(const std::string& phase, std::set<Split> allowed);
  void write_audit() const;
  void log(const std::string& line) const;
  EvalReport full_run(FineTuneMode mode, std::uint64_t seed, const Checkpoint& start);

  ExperimentConfig cfg_;
  ExperimentPaths paths_;
  ExperimentOptions options_;
  std::optional<Manifest> pretrain_;
  std::optional<Manifest> target_;
  std::unique_ptr<DiskFeatureStore> store_;
  std::map<std::string, Split> split_index_;
  AuditLog audit_;
  std::int64_t steps_ = 0;
};

// Stand-alone evaluation of a checkpoint file against a manifest file; the
// feature files are resolved relative to the manifest's directory.
EvalReport evaluate_files(const std::filesystem::path& checkpoint, const std::filesystem::path& manifest, Split split,
                          const std::filesystem::path& out_dir);

}  // namespace sapt
