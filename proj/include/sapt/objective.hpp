#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "sapt/common.hpp"

namespace sapt {

// Span masking m(.): every latent index starts a span with probability
// mask_prob; a span covers `span` consecutive indices clipped at the end.
struct MaskSpec {
  double mask_prob = 0.15;
  int span = 3;
  std::uint64_t seed = 0;

  void validate() const;
};

struct ContrastiveConfig {
  int num_distractors = 5;
  double temperature = 0.1;

  void validate() const;
};

// Sorted masked indices in [0, length). When nothing was selected and
// mask_prob > 0, one span with a uniformly drawn start is forced.
std::vector<int> sample_mask(int length, const MaskSpec& spec);

// Distractor indices for every masked position, in mask order. Candidates are
// the other masked positions when more than K exist, otherwise every other
// position in the sequence; K is clamped to length - 1.
std::vector<std::vector<int>> sample_distractors(int length, std::span<const int> mask, int num_distractors,
                                                 std::uint64_t seed);

struct ContrastiveResult {
  double loss = 0.0;
  RowMatrix grad_context;  // d loss / d projected contexts
  RowMatrix grad_target;   // d loss / d projected targets
};

// InfoNCE over temperature-scaled cosine similarities of already projected
// vectors, summed over masked positions.
ContrastiveResult contrastive_on_projections(const RowMatrix& context_proj, const RowMatrix& target_proj,
                                             std::span<const int> mask, const ContrastiveConfig& cfg,
                                             std::uint64_t seed);

struct Projection {
  RowMatrix weight;  // in x out
  RowVector bias;    // out
};

double contrastive_loss(const RowMatrix& contexts, const RowMatrix& targets, std::span<const int> mask,
                        const Projection& target_projection, const Projection& context_projection,
                        const ContrastiveConfig& cfg, std::uint64_t seed);

struct CrossEntropyResult {
  double loss = 0.0;
  RowVector grad;  // d loss / d logits
};

CrossEntropyResult cross_entropy_with_grad(const RowVector& logits, int label);
double cross_entropy(const RowVector& logits, int label);

// Numerically stable softmax.
RowVector softmax(const RowVector& logits);

}  // namespace sapt
