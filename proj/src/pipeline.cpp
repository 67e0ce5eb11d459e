#include "sapt/pipeline.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <fstream>
#include <map>

#include "sapt/binary_io.hpp"
#include "sapt/rng.hpp"

namespace sapt {

std::string_view to_string(StageKind kind) {
  switch (kind) {
    case StageKind::pretrain: return "pretrain";
    case StageKind::sapt: return "sapt";
    case StageKind::finetune: return "finetune";
  }
  return "pretrain";
}

std::string_view to_string(FreezePolicy policy) {
  return policy == FreezePolicy::none ? "none" : "freeze_feature_encoder";
}

FreezePolicy freeze_policy_from_string(std::string_view name) {
  if (name == "none") return FreezePolicy::none;
  if (name == "freeze_feature_encoder") return FreezePolicy::freeze_feature_encoder;
  throw ConfigError(fmt::format("unknown freeze_policy '{}'", name));
}

void TrainConfig::validate() const {
  if (steps < 0) throw ConfigError(fmt::format("{}.steps must be >= 0", to_string(stage)));
  if (batch_size < 1) throw ConfigError(fmt::format("{}.batch_size must be >= 1", to_string(stage)));
  adam.validate();
  if (stage != StageKind::finetune) {
    mask.validate();
    contrastive.validate();
  }
}

TrainConfig TrainConfig::defaults(StageKind stage) {
  TrainConfig cfg;
  cfg.stage = stage;
  switch (stage) {
    case StageKind::pretrain:
      cfg.steps = 2000;
      break;
    case StageKind::sapt:
      cfg.steps = 1000;
      break;
    case StageKind::finetune:
      cfg.steps = 300;
      cfg.adam.learning_rate = 5e-4;
      break;
  }
  return cfg;
}

namespace {

SelfSupervisedObjective self_supervised(const TrainConfig& cfg) { return {cfg.mask, cfg.contrastive}; }

// Shared loop of pretraining and SAPT: uniform sampling with replacement from
// `pool`, one seeded stream per stage run.
std::vector<TracePoint> run_self_supervised(ModelParams& params, std::span<const ManifestRecord* const> pool,
                                            const FeatureSource& source, const TrainConfig& cfg) {
  std::vector<TracePoint> trace;
  if (cfg.steps == 0) return trace;
  const ObjectiveSpec objective = self_supervised(cfg);
  AdamState state = AdamState::zeros(params.values().size());
  Rng batches(derive_seed(cfg.seed, "batches"));
  std::vector<Example> batch(cfg.batch_size);
  for (int step = 1; step <= cfg.steps; ++step) {
    for (auto& ex : batch) {
      const ManifestRecord& r = *pool[batches.below(pool.size())];
      ex.id = r.id;
      ex.features = source.load(r);
      ex.label = -1;
      ex.seed = batches.next_u64();
    }
    LossAndGradients lg = loss_and_gradients(params, batch, objective);
    adam_step(params.values(), lg.gradients.values(), state, cfg.adam);
    trace.push_back({step, lg.loss});
  }
  return trace;
}

}  // namespace

StageResult pretrain(const Manifest& d0, const FeatureSource& source, const ArchConfig& arch,
                     const TrainConfig& cfg) {
  if (cfg.stage != StageKind::pretrain) throw ConfigError("pretrain: config is not a pretrain stage config");
  if (d0.role != ManifestRole::pretraining) throw ConfigError("pretrain: manifest role must be pretraining");
  if (d0.records.empty()) throw ConfigError("pretrain: empty pretraining manifest");
  cfg.validate();
  std::vector<const ManifestRecord*> pool;
  for (const auto& r : d0.records) pool.push_back(&r);

  ModelParams params = init_params(arch, cfg.seed);
  auto trace = run_self_supervised(params, pool, source, cfg);
  Checkpoint ckpt{std::move(params), Stage::theta0, cfg.seed, cfg.steps, "", Stage::theta0, {}};
  return {std::move(ckpt), std::move(trace)};
}

StageResult sapt(const Checkpoint& theta0, const Manifest& target, const FeatureSource& source,
                 const TrainConfig& cfg) {
  if (cfg.stage != StageKind::sapt) throw ConfigError("sapt: config is not a sapt stage config");
  if (theta0.stage != Stage::theta0) {
    throw DependencyError(fmt::format("sapt: start checkpoint must be theta0, got {}", to_string(theta0.stage)));
  }
  if (target.role != ManifestRole::target) throw ConfigError("sapt: manifest role must be target");
  cfg.validate();
  // Only the train portion is ever touched.
  const auto pool = target.in_split(Split::train);
  if (pool.empty()) throw ConfigError("sapt: target manifest has no train split");

  ModelParams params = theta0.params;
  auto trace = run_self_supervised(params, pool, source, cfg);
  Checkpoint ckpt{std::move(params), Stage::sapt, cfg.seed, cfg.steps, checkpoint_digest(theta0), Stage::theta0, {}};
  return {std::move(ckpt), std::move(trace)};
}

StageResult finetune(const Checkpoint& start, const Manifest& target, std::span<const std::string> subset_ids,
                     const FeatureSource& source, const TrainConfig& cfg,
                     const std::vector<std::string>& class_labels) {
  if (cfg.stage != StageKind::finetune) throw ConfigError("finetune: config is not a finetune stage config");
  if (start.stage != Stage::theta0 && start.stage != Stage::sapt) {
    throw DependencyError(
        fmt::format("finetune: start checkpoint must be theta0 or sapt, got {}", to_string(start.stage)));
  }
  if (subset_ids.empty()) throw ConfigError("finetune: empty training subset");
  if (static_cast<int>(class_labels.size()) != start.arch().num_classes) {
    throw ConfigError(fmt::format("finetune: {} class labels for an architecture with {} classes",
                                  class_labels.size(), start.arch().num_classes));
  }
  cfg.validate();
  std::map<std::string, int> class_of;
  for (std::size_t i = 0; i < class_labels.size(); ++i) class_of[class_labels[i]] = static_cast<int>(i);
  std::map<std::string, const ManifestRecord*> by_id;
  for (const auto& r : target.records) by_id[r.id] = &r;

  std::vector<const ManifestRecord*> pool;
  for (const auto& id : subset_ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw ConfigError(fmt::format("finetune: utterance '{}' not in target manifest", id));
    if (it->second->split != Split::train) {
      throw SplitViolation(fmt::format("finetune: utterance '{}' belongs to the {} split", id,
                                       to_string(it->second->split)));
    }
    if (!class_of.count(it->second->label)) {
      throw ConfigError(fmt::format("finetune: label '{}' has no class index", it->second->label));
    }
    pool.push_back(it->second);
  }

  ModelParams params = start.params;
  init_classifier(params, derive_seed(cfg.seed, "classifier"));
  std::vector<TracePoint> trace;
  AdamState state = AdamState::zeros(params.values().size());
  Rng batches(derive_seed(cfg.seed, "batches"));
  std::vector<Example> batch(cfg.batch_size);
  const auto& l = params.layout();
  for (int step = 1; step <= cfg.steps; ++step) {
    for (auto& ex : batch) {
      const ManifestRecord& r = *pool[batches.below(pool.size())];
      ex.id = r.id;
      ex.features = source.load(r);
      ex.label = class_of.at(r.label);
      ex.seed = 0;
    }
    LossAndGradients lg = loss_and_gradients(params, batch, SupervisedObjective{});
    if (cfg.freeze == FreezePolicy::freeze_feature_encoder) {
      for (const auto* s : {&l.fe_weight, &l.fe_bias, &l.fe_ln_scale, &l.fe_ln_bias}) {
        lg.gradients.at(*s).setZero();
      }
    }
    adam_step(params.values(), lg.gradients.values(), state, cfg.adam);
    trace.push_back({step, lg.loss});
  }
  Checkpoint ckpt{std::move(params), Stage::finetuned, cfg.seed, cfg.steps, checkpoint_digest(start), start.stage,
                  class_labels};
  return {std::move(ckpt), std::move(trace)};
}

Prediction predict(const Checkpoint& ckpt, const RowMatrix& features) {
  require(features.cols() == ckpt.arch().feat_dim,
          fmt::format("predict: feature dim {} does not match arch feat_dim {}", features.cols(),
                      ckpt.arch().feat_dim));
  const EncodedBatch enc = forward(ckpt.params, features);
  Prediction p;
  p.probabilities = softmax(classifier_logits(ckpt.params, enc.pooled));
  for (Eigen::Index c = 1; c < p.probabilities.size(); ++c) {
    if (p.probabilities(c) > p.probabilities(p.class_index)) p.class_index = static_cast<int>(c);
  }
  if (p.class_index < static_cast<int>(ckpt.class_labels.size())) p.label = ckpt.class_labels[p.class_index];
  return p;
}

double mean_self_supervised_loss(const ModelParams& params, std::span<const ManifestRecord* const> records,
                                 const FeatureSource& source, const TrainConfig& cfg, std::uint64_t seed) {
  if (records.empty()) return 0.0;
  const SelfSupervisedObjective objective = self_supervised(cfg);
  double total = 0.0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    Example ex{records[i]->id, source.load(*records[i]), -1, derive_seed(seed, static_cast<std::uint64_t>(i))};
    total += self_supervised_loss(params, ex, objective);
  }
  return total / static_cast<double>(records.size());
}

void write_trace_csv(const std::filesystem::path& path, std::span<const TracePoint> trace, StageKind stage,
                     std::uint64_t seed) {
  std::string out = "step,loss,stage,seed\n";
  for (const auto& p : trace) out += fmt::format("{},{:.17g},{},{}\n", p.step, p.loss, to_string(stage), seed);
  binary::write_file_atomic(path.string(), out);
}

}  // namespace sapt
