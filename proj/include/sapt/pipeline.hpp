#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "sapt/checkpoint.hpp"
#include "sapt/corpus.hpp"
#include "sapt/encoder.hpp"
#include "sapt/feature_store.hpp"
#include "sapt/objective.hpp"
#include "sapt/optimizer.hpp"

namespace sapt {

enum class StageKind { pretrain, sapt, finetune };
std::string_view to_string(StageKind kind);

enum class FreezePolicy { none, freeze_feature_encoder };
std::string_view to_string(FreezePolicy policy);
FreezePolicy freeze_policy_from_string(std::string_view name);

struct TrainConfig {
  StageKind stage = StageKind::pretrain;
  int steps = 0;
  int batch_size = 8;
  AdamHyper adam;
  std::uint64_t seed = 0;
  MaskSpec mask;                    // self-supervised stages only
  ContrastiveConfig contrastive;    // self-supervised stages only
  FreezePolicy freeze = FreezePolicy::none;  // finetune only

  void validate() const;
  static TrainConfig defaults(StageKind stage);
};

struct TracePoint {
  int step = 0;
  double loss = 0.0;
};

struct StageResult {
  Checkpoint checkpoint;
  std::vector<TracePoint> trace;
};

// theta0 = argmin of the summed self-supervised loss over D0. Never reads labels.
StageResult pretrain(const Manifest& d0, const FeatureSource& source, const ArchConfig& arch,
                     const TrainConfig& cfg);

// Continues the pretraining objective from theta0 on the unlabeled train split of D_T.
StageResult sapt(const Checkpoint& theta0, const Manifest& target, const FeatureSource& source,
                 const TrainConfig& cfg);

// Supervised cross-entropy on `subset_ids` (all from the train split of `target`),
// starting from a theta0 or sapt checkpoint with a freshly drawn classifier head.
// class_labels maps class index to language id.
StageResult finetune(const Checkpoint& start, const Manifest& target, std::span<const std::string> subset_ids,
                     const FeatureSource& source, const TrainConfig& cfg,
                     const std::vector<std::string>& class_labels);

struct Prediction {
  int class_index = 0;
  std::string label;
  RowVector probabilities;
};

Prediction predict(const Checkpoint& ckpt, const RowMatrix& features);

// Mean self-supervised loss over `records`, with the per-utterance seeds derived from `seed`.
double mean_self_supervised_loss(const ModelParams& params, std::span<const ManifestRecord* const> records,
                                 const FeatureSource& source, const TrainConfig& cfg, std::uint64_t seed);

// CSV with columns step,loss,stage,seed.
void write_trace_csv(const std::filesystem::path& path, std::span<const TracePoint> trace, StageKind stage,
                     std::uint64_t seed);

}  // namespace sapt
