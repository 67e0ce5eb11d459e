#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "sapt/common.hpp"
#include "sapt/objective.hpp"

namespace sapt {

struct ArchConfig {
  int feat_dim = 16;
  int frame_stack = 2;
  int model_dim = 32;
  int num_layers = 2;
  int num_heads = 4;
  int ffn_dim = 64;
  int num_classes = 8;
  int proj_dim = 16;
  // Sinusoidal absolute positions added at the input of the context network.
  bool positional_encoding = true;

  bool operator==(const ArchConfig&) const = default;
  void validate() const;
  int stacked_length(int frames) const { return frames / frame_stack; }
};

nlohmann::json to_json(const ArchConfig& arch);
ArchConfig arch_from_json(const nlohmann::json& j);

// One tensor inside the flat parameter vector.
struct TensorSlot {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::size_t offset = 0;

  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

struct BlockSlots {
  TensorSlot ln1_scale, ln1_bias;
  TensorSlot wq, bq, wk, bk, wv, bv, wo, bo;
  TensorSlot ln2_scale, ln2_bias;
  TensorSlot ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

// Canonical parameter ordering, which is also the checkpoint payload order:
//   feature_encoder.{weight (F*r x d), bias, ln_scale, ln_bias}
//   mask_embedding (d)
//   block[i].{ln1_scale, ln1_bias, wq, bq, wk, bk, wv, bv, wo, bo,
//             ln2_scale, ln2_bias, ffn_w1, ffn_b1, ffn_w2, ffn_b2}  for i < L
//   target_projection.{weight (d x proj), bias}
//   context_projection.{weight (d x proj), bias}
//   classifier.{weight (d x C), bias}
// Weights are stored input-major, so a layer computes x * W + b on row vectors.
struct ParamLayout {
  TensorSlot fe_weight, fe_bias, fe_ln_scale, fe_ln_bias;
  TensorSlot mask_embedding;
  std::vector<BlockSlots> blocks;
  TensorSlot target_w, target_b, context_w, context_b;
  TensorSlot classifier_w, classifier_b;
  std::size_t total = 0;

  explicit ParamLayout(const ArchConfig& arch);
  std::vector<const TensorSlot*> slots() const;
};

std::size_t parameter_count(const ArchConfig& arch);

class ModelParams {
 public:
  using MatrixMap = Eigen::Map<RowMatrix>;
  using ConstMatrixMap = Eigen::Map<const RowMatrix>;

  explicit ModelParams(const ArchConfig& arch);

  const ArchConfig& arch() const { return arch_; }
  const ParamLayout& layout() const { return layout_; }
  Vector& values() { return values_; }
  const Vector& values() const { return values_; }

  MatrixMap at(const TensorSlot& slot) {
    return MatrixMap(values_.data() + slot.offset, slot.rows, slot.cols);
  }
  ConstMatrixMap at(const TensorSlot& slot) const {
    return ConstMatrixMap(values_.data() + slot.offset, slot.rows, slot.cols);
  }

  bool operator==(const ModelParams& other) const {
    return arch_ == other.arch_ && values_ == other.values_;
  }

 private:
  ArchConfig arch_;
  ParamLayout layout_;
  Vector values_;
};

ModelParams init_params(const ArchConfig& arch, std::uint64_t seed);

// Draws the classifier head into `params` from `seed`, leaving the rest untouched.
void init_classifier(ModelParams& params, std::uint64_t seed);

struct EncodedBatch {
  RowMatrix latents;   // T' x d, unmasked; the contrastive targets
  RowMatrix contexts;  // T' x d
  RowVector pooled;    // d
};

EncodedBatch forward(const ModelParams& params, const RowMatrix& features,
                     std::optional<std::span<const int>> mask = std::nullopt);

RowVector classifier_logits(const ModelParams& params, const RowVector& pooled);

struct SelfSupervisedObjective {
  MaskSpec mask;  // mask.seed is ignored; each example carries its own seed
  ContrastiveConfig contrastive;
};

struct SupervisedObjective {};

using ObjectiveSpec = std::variant<SelfSupervisedObjective, SupervisedObjective>;

struct Example {
  std::string id;
  RowMatrix features;
  int label = -1;          // class index; only read by the supervised objective
  std::uint64_t seed = 0;  // drives the mask and the distractor draw
};

struct LossAndGradients {
  double loss = 0.0;
  ModelParams gradients;
};

// Batch-summed loss and its exact gradient with respect to every parameter.
LossAndGradients loss_and_gradients(const ModelParams& params, std::span<const Example> batch,
                                    const ObjectiveSpec& objective);

// Self-supervised loss of one example, for monitoring.
double self_supervised_loss(const ModelParams& params, const Example& example,
                            const SelfSupervisedObjective& objective);

}  // namespace sapt
