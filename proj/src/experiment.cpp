#include "sapt/experiment.hpp"

#include <fmt/format.h>

#include <ostream>

#include "sapt/binary_io.hpp"
#include "sapt/parallel.hpp"
#include "sapt/rng.hpp"

namespace sapt {

namespace fs = std::filesystem;
using nlohmann::json;

fs::path ExperimentPaths::full_run(std::string_view mode, std::uint64_t seed) const {
  return root / "full" / fmt::format("{}-seed{}.json", mode, seed);
}

Experiment::Experiment(ExperimentConfig cfg, fs::path out_dir, ExperimentOptions options)
    : cfg_(std::move(cfg)), paths_{std::move(out_dir)}, options_(options) {
  prepare_directory();
}

void Experiment::log(const std::string& line) const {
  if (options_.log) *options_.log << line << '\n' << std::flush;
}

void Experiment::prepare_directory() {
  const std::string canonical = to_json(cfg_).dump(2) + "\n";
  if (fs::exists(paths_.config())) {
    const ExperimentConfig existing = config_from_json(json::parse(binary::read_file(paths_.config().string())));
    const bool same = config_digest(existing) == config_digest(cfg_);
    if (!same && options_.resume) {
      throw ConfigError(fmt::format("{} holds an experiment with a different config; use --no-resume to start over",
                                    paths_.root.string()));
    }
  }
  if (!options_.resume) {
    // Only the files this tool writes are removed.
    for (const auto& p : {paths_.corpus(), paths_.root / "checkpoints", paths_.root / "traces", paths_.root / "full"}) {
      fs::remove_all(p);
    }
    for (const auto& p : {paths_.protocol(), paths_.protocol_summary(), paths_.adaptation(), paths_.audit(),
                          paths_.root / "table.csv", paths_.root / "fewshot_curve.csv", paths_.root / "report.json"}) {
      fs::remove(p);
    }
  }
  std::error_code ec;
  for (const auto& p : {paths_.root / "checkpoints", paths_.root / "traces", paths_.root / "full"}) {
    fs::create_directories(p, ec);
    if (ec) throw IoError(fmt::format("cannot create {}: {}", p.string(), ec.message()));
  }
  binary::write_file_atomic(paths_.config().string(), canonical);
}

void Experiment::generate_corpus() {
  const fs::path dir = paths_.corpus();
  const std::string hash = config_hash(cfg_.benchmark);
  if (fs::exists(dir / kPretrainManifestFile) && fs::exists(dir / kTargetManifestFile)) {
    const Manifest d0 = read_manifest(dir / kPretrainManifestFile);
    if (d0.config_hash == hash) {
      log("gen-corpus: corpus already present, skipping");
      return;
    }
    throw ConfigError(fmt::format("{}: existing corpus was generated from a different config", dir.string()));
  }
  log("gen-corpus: rendering benchmark");
  const Benchmark b = build_benchmark(cfg_.benchmark);
  write_benchmark(b, dir);
  log(fmt::format("gen-corpus: {} pretraining and {} target utterances written to {}", b.pretrain.records.size(),
                  b.target.records.size(), dir.string()));
}

void Experiment::load_corpus() {
  if (pretrain_) return;
  const fs::path dir = paths_.corpus();
  if (!fs::exists(dir / kPretrainManifestFile) || !fs::exists(dir / kTargetManifestFile)) {
    throw DependencyError(fmt::format("no corpus under {}; run gen-corpus first", dir.string()));
  }
  pretrain_ = read_manifest(dir / kPretrainManifestFile);
  target_ = read_manifest(dir / kTargetManifestFile);
  if (pretrain_->role != ManifestRole::pretraining || target_->role != ManifestRole::target) {
    throw ConfigError("corpus manifests have unexpected roles");
  }
  store_ = std::make_unique<DiskFeatureStore>(dir);
  split_index_ = GuardedSource::split_index({&*pretrain_, &*target_});
}

const Manifest& Experiment::pretrain_manifest() {
  load_corpus();
  return *pretrain_;
}

const Manifest& Experiment::target_manifest() {
  load_corpus();
  return *target_;
}

GuardedSource Experiment::view(const std::string& phase, std::set<Split> allowed) {
  load_corpus();
  return GuardedSource(*store_, split_index_, phase, std::move(allowed), &audit_);
}

void Experiment::write_audit() const {
  std::string out = "phase,split,reads\n";
  for (const auto& [key, n] : audit_.counts()) out += fmt::format("{},{},{}\n", key.first, to_string(key.second), n);
  binary::write_file_atomic(paths_.audit().string(), out);
}

Checkpoint Experiment::ensure_theta0() {
  if (fs::exists(paths_.theta0())) return load_checkpoint(paths_.theta0());
  const GuardedSource source = view("pretrain", {Split::train});
  log(fmt::format("pretrain: {} steps", cfg_.pretrain.steps));
  StageResult r = pretrain(pretrain_manifest(), source, cfg_.arch, cfg_.pretrain);
  steps_ += cfg_.pretrain.steps;
  write_trace_csv(paths_.trace("pretrain"), r.trace, StageKind::pretrain, cfg_.pretrain.seed);
  save_checkpoint(r.checkpoint, paths_.theta0());
  write_audit();
  return std::move(r.checkpoint);
}

Checkpoint Experiment::ensure_sapt() {
  const Checkpoint theta0 = ensure_theta0();
  if (fs::exists(paths_.sapt())) {
    Checkpoint ckpt = load_checkpoint(paths_.sapt());
    verify_lineage(ckpt, theta0);
    return ckpt;
  }
  const GuardedSource source = view("sapt", {Split::train});
  log(fmt::format("sapt: {} steps", cfg_.sapt.steps));
  StageResult r = sapt::sapt(theta0, target_manifest(), source, cfg_.sapt);
  steps_ += cfg_.sapt.steps;
  write_trace_csv(paths_.trace("sapt"), r.trace, StageKind::sapt, cfg_.sapt.seed);
  save_checkpoint(r.checkpoint, paths_.sapt());
  write_audit();
  return std::move(r.checkpoint);
}

namespace {

std::vector<std::string> train_ids(const Manifest& target) {
  std::vector<std::string> ids;
  for (const auto* r : target.in_split(Split::train)) ids.push_back(r->id);
  return ids;
}

std::uint64_t full_run_seed(std::uint64_t base, std::uint64_t seed) {
  return derive_seed(derive_seed(base, "full"), seed);
}

}  // namespace

Checkpoint Experiment::finetune_full(FineTuneMode from) {
  const Checkpoint start = from == FineTuneMode::vanilla ? ensure_theta0() : ensure_sapt();
  const fs::path out = paths_.finetuned(from == FineTuneMode::vanilla ? "theta0" : "sapt");
  if (fs::exists(out)) return load_checkpoint(out);
  const GuardedSource source = view("finetune", {Split::train});
  TrainConfig cfg = cfg_.finetune;
  cfg.seed = full_run_seed(cfg_.finetune.seed, cfg_.seeds.front());
  const auto ids = train_ids(target_manifest());
  log(fmt::format("finetune: {} steps from {}", cfg.steps, to_string(start.stage)));
  StageResult r = finetune(start, target_manifest(), ids, source, cfg, target_manifest().labels());
  steps_ += cfg.steps;
  write_trace_csv(paths_.trace(fmt::format("finetune-{}", to_string(start.stage))), r.trace, StageKind::finetune,
                  cfg.seed);
  save_checkpoint(r.checkpoint, out);
  write_audit();
  return std::move(r.checkpoint);
}

EvalReport Experiment::full_run(FineTuneMode mode, std::uint64_t seed, const Checkpoint& start) {
  const fs::path path = paths_.full_run(to_string(mode), seed);
  if (fs::exists(path)) {
    const json j = json::parse(binary::read_file(path.string()));
    return report_from_json(j.at("report"));
  }
  const GuardedSource train = view("finetune", {Split::train});
  const GuardedSource eval = view("evaluate", {Split::dev, Split::test});
  TrainConfig cfg = cfg_.finetune;
  cfg.seed = full_run_seed(cfg_.finetune.seed, seed);
  const auto ids = train_ids(target_manifest());
  StageResult r = finetune(start, target_manifest(), ids, train, cfg, target_manifest().labels());
  EvalReport report = evaluate(r.checkpoint, target_manifest(), Split::test, eval);
  report.name = fmt::format("{}-seed{}", to_string(mode), seed);
  const json record{{"mode", to_string(mode)},
                    {"seed", seed},
                    {"ckpt_digest", checkpoint_digest(r.checkpoint)},
                    {"report", to_json(report)}};
  binary::write_file_atomic(path.string(), record.dump(2) + "\n");
  return report;
}

ExperimentOutcome Experiment::run() {
  ExperimentOutcome outcome;
  const std::int64_t steps_before = steps_;
  generate_corpus();
  const Checkpoint theta0 = ensure_theta0();
  const Checkpoint adapted = ensure_sapt();
  const Manifest& target = target_manifest();

  // Full-data fine-tuning for the group table.
  struct FullJob {
    FineTuneMode mode;
    std::uint64_t seed;
  };
  std::vector<FullJob> jobs;
  for (FineTuneMode mode : {FineTuneMode::vanilla, FineTuneMode::sapt}) {
    for (std::uint64_t seed : cfg_.seeds) jobs.push_back({mode, seed});
  }
  std::vector<std::optional<EvalReport>> full(jobs.size());
  std::atomic<int> computed{0};
  parallel_for(jobs.size(), options_.workers, [&](std::size_t i) {
    const bool cached = fs::exists(paths_.full_run(to_string(jobs[i].mode), jobs[i].seed));
    full[i] = full_run(jobs[i].mode, jobs[i].seed, jobs[i].mode == FineTuneMode::vanilla ? theta0 : adapted);
    if (!cached) computed += 1;
  });
  steps_ += static_cast<std::int64_t>(computed.load()) * cfg_.finetune.steps;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    (jobs[i].mode == FineTuneMode::vanilla ? outcome.vanilla_runs : outcome.sapt_runs).push_back(*full[i]);
  }
  log(fmt::format("full-data fine-tuning: {} of {} runs computed", computed.load(), jobs.size()));
  outcome.vanilla = average_reports("vanilla", outcome.vanilla_runs);
  outcome.sapt = average_reports("sapt", outcome.sapt_runs);

  // Few-shot grid.
  ProtocolOptions options;
  options.k_grid = cfg_.k_grid;
  options.seeds = cfg_.seeds;
  options.finetune = cfg_.finetune;
  options.workers = options_.workers;
  options.result_file = paths_.protocol();
  ProtocolStats stats;
  const GuardedSource train = view("finetune", {Split::train});
  const GuardedSource eval = view("evaluate", {Split::dev, Split::test});
  outcome.protocol = run_protocol(target, train, eval, theta0, adapted, options, &stats);
  steps_ += stats.training_steps;
  outcome.cells_computed = stats.cells_computed;
  log(fmt::format("few-shot protocol: {} of {} cells computed", stats.cells_computed, outcome.protocol.cells.size()));
  write_protocol_files(outcome.protocol, paths_.protocol(), paths_.protocol_summary());

  // Adaptation check: self-supervised loss on the D_T train split before and after SAPT.
  {
    const GuardedSource monitor = view("monitor", {Split::train});
    const auto records = target.in_split(Split::train);
    const std::uint64_t seed = derive_seed(cfg_.seed, "monitor");
    outcome.theta0_target_loss = mean_self_supervised_loss(theta0.params, records, monitor, cfg_.sapt, seed);
    outcome.sapt_target_loss = mean_self_supervised_loss(adapted.params, records, monitor, cfg_.sapt, seed);
    const json j{{"theta0_mean_loss", outcome.theta0_target_loss},
                 {"sapt_mean_loss", outcome.sapt_target_loss},
                 {"utterances", records.size()}};
    binary::write_file_atomic(paths_.adaptation().string(), j.dump(2) + "\n");
  }

  const std::vector<EvalReport> reports{*outcome.vanilla, *outcome.sapt};
  const auto curve = outcome.protocol.curve();
  emit_report(reports, Comparison{"vanilla", "sapt"}, curve, paths_.root);
  write_audit();
  outcome.training_steps = steps_ - steps_before;
  log(fmt::format("experiment: {} training steps executed", outcome.training_steps));
  return outcome;
}

EvalReport evaluate_files(const fs::path& checkpoint, const fs::path& manifest_path, Split split,
                          const fs::path& out_dir) {
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  if (ckpt.stage != Stage::finetuned) {
    throw DependencyError(fmt::format("evaluate: {} is a {} checkpoint; a finetuned checkpoint is required",
                                      checkpoint.string(), to_string(ckpt.stage)));
  }
  const Manifest manifest = read_manifest(manifest_path);
  const DiskFeatureStore store(manifest_path.parent_path());
  EvalReport report = evaluate(ckpt, manifest, split, store);
  const std::vector<EvalReport> reports{report};
  emit_report(reports, std::nullopt, {}, out_dir);
  return report;
}

}  // namespace sapt
