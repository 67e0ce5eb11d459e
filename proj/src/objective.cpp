#include "sapt/objective.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>

#include "sapt/rng.hpp"

namespace sapt {

void MaskSpec::validate() const {
  if (!(mask_prob >= 0.0 && mask_prob <= 1.0)) throw ConfigError("mask_prob must be in [0, 1]");
  if (span < 1) throw ConfigError("mask span must be >= 1");
}

void ContrastiveConfig::validate() const {
  if (num_distractors < 1) throw ConfigError("num_distractors must be >= 1");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
}

std::vector<int> sample_mask(int length, const MaskSpec& spec) {
  require(length >= 1, "sample_mask: length must be >= 1");
  spec.validate();
  Rng rng(spec.seed);
  std::vector<char> covered(length, 0);
  bool any = false;
  for (int t = 0; t < length; ++t) {
    if (rng.bernoulli(spec.mask_prob)) {
      for (int k = t; k < std::min(t + spec.span, length); ++k) covered[k] = 1;
      any = true;
    }
  }
  if (!any && spec.mask_prob > 0.0) {
    const int start = static_cast<int>(rng.below(length));
    for (int k = start; k < std::min(start + spec.span, length); ++k) covered[k] = 1;
  }
  std::vector<int> mask;
  for (int t = 0; t < length; ++t) {
    if (covered[t]) mask.push_back(t);
  }
  return mask;
}

std::vector<std::vector<int>> sample_distractors(int length, std::span<const int> mask, int num_distractors,
                                                 std::uint64_t seed) {
  const int k = std::min(num_distractors, length - 1);
  const bool from_masked = static_cast<int>(mask.size()) > k;
  Rng rng(seed);
  std::vector<std::vector<int>> out;
  out.reserve(mask.size());
  std::vector<int> pool;
  for (int t : mask) {
    pool.clear();
    if (from_masked) {
      for (int m : mask) {
        if (m != t) pool.push_back(m);
      }
    } else {
      for (int m = 0; m < length; ++m) {
        if (m != t) pool.push_back(m);
      }
    }
    std::vector<int> chosen;
    chosen.reserve(k);
    for (std::size_t i : rng.sample_without_replacement(pool.size(), static_cast<std::size_t>(k))) {
      chosen.push_back(pool[i]);
    }
    out.push_back(std::move(chosen));
  }
  return out;
}

namespace {

constexpr double kNormFloor = 1e-8;

struct Cosine {
  double value;
  RowVector grad_a;
  RowVector grad_b;
};

Cosine cosine(const RowVector& a, const RowVector& b) {
  const double na = a.norm();
  const double nb = b.norm();
  const double da = std::max(na, kNormFloor);
  const double db = std::max(nb, kNormFloor);
  const double value = a.dot(b) / (da * db);
  RowVector ga = b / (da * db);
  RowVector gb = a / (da * db);
  if (na > kNormFloor) ga -= value * a / (na * na);
  if (nb > kNormFloor) gb -= value * b / (nb * nb);
  return {value, std::move(ga), std::move(gb)};
}

}  // namespace

ContrastiveResult contrastive_on_projections(const RowMatrix& context_proj, const RowMatrix& target_proj,
                                             std::span<const int> mask, const ContrastiveConfig& cfg,
                                             std::uint64_t seed) {
  require(!mask.empty(), "contrastive_loss: mask must not be empty");
  require(context_proj.rows() == target_proj.rows() && context_proj.cols() == target_proj.cols(),
          "contrastive_loss: context/target shape mismatch");
  cfg.validate();
  const int length = static_cast<int>(context_proj.rows());
  for (int t : mask) require(t >= 0 && t < length, "contrastive_loss: mask index out of range");

  ContrastiveResult result;
  result.grad_context = RowMatrix::Zero(context_proj.rows(), context_proj.cols());
  result.grad_target = RowMatrix::Zero(target_proj.rows(), target_proj.cols());
  const auto distractors = sample_distractors(length, mask, cfg.num_distractors, seed);
  const double inv_temp = 1.0 / cfg.temperature;

  for (std::size_t i = 0; i < mask.size(); ++i) {
    const int t = mask[i];
    // Candidate 0 is the positive.
    std::vector<int> candidates{t};
    candidates.insert(candidates.end(), distractors[i].begin(), distractors[i].end());
    const RowVector c = context_proj.row(t);
    std::vector<Cosine> sims;
    sims.reserve(candidates.size());
    RowVector logits(candidates.size());
    for (std::size_t j = 0; j < candidates.size(); ++j) {
      sims.push_back(cosine(c, target_proj.row(candidates[j])));
      logits(j) = sims.back().value * inv_temp;
    }
    const auto ce = cross_entropy_with_grad(logits, 0);
    result.loss += ce.loss;
    for (std::size_t j = 0; j < candidates.size(); ++j) {
      const double g = ce.grad(j) * inv_temp;
      result.grad_context.row(t) += g * sims[j].grad_a;
      result.grad_target.row(candidates[j]) += g * sims[j].grad_b;
    }
  }
  return result;
}

double contrastive_loss(const RowMatrix& contexts, const RowMatrix& targets, std::span<const int> mask,
                        const Projection& target_projection, const Projection& context_projection,
                        const ContrastiveConfig& cfg, std::uint64_t seed) {
  RowMatrix q = targets * target_projection.weight;
  q.rowwise() += target_projection.bias;
  RowMatrix c = contexts * context_projection.weight;
  c.rowwise() += context_projection.bias;
  return contrastive_on_projections(c, q, mask, cfg, seed).loss;
}

RowVector softmax(const RowVector& logits) {
  const double m = logits.maxCoeff();
  RowVector e = (logits.array() - m).exp();
  return e / e.sum();
}

CrossEntropyResult cross_entropy_with_grad(const RowVector& logits, int label) {
  require(label >= 0 && label < logits.size(),
          fmt::format("cross_entropy: label {} out of range for {} classes", label, logits.size()));
  require(logits.allFinite(), "cross_entropy: non-finite logits");
  const double m = logits.maxCoeff();
  const double sum = (logits.array() - m).exp().sum();
  CrossEntropyResult out;
  out.loss = std::max(0.0, std::log(sum) + m - logits(label));
  out.grad = (logits.array() - m).exp() / sum;
  out.grad(label) -= 1.0;
  return out;
}

double cross_entropy(const RowVector& logits, int label) { return cross_entropy_with_grad(logits, label).loss; }

}  // namespace sapt
