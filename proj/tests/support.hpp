#pragma once
// Shared fixtures for the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "sapt/corpus.hpp"
#include "sapt/encoder.hpp"
#include "sapt/rng.hpp"

namespace sapt::testing {

// A benchmark small enough to train on in a few seconds.
inline BenchmarkConfig small_benchmark(std::uint64_t seed = 11) {
  BenchmarkConfig cfg;
  cfg.seed = seed;
  cfg.num_seen = 3;
  cfg.num_unseen = 1;
  cfg.pretrain_per_language = 12;
  cfg.target_train = 6;
  cfg.target_dev = 2;
  cfg.target_test = 3;
  return cfg;
}

inline ArchConfig small_arch(int classes) {
  ArchConfig arch;
  arch.model_dim = 8;
  arch.num_heads = 2;
  arch.ffn_dim = 12;
  arch.proj_dim = 4;
  arch.num_layers = 1;
  arch.num_classes = classes;
  return arch;
}

inline RowMatrix random_features(int frames, int dims, std::uint64_t seed) {
  Rng rng(seed);
  RowMatrix x(frames, dims);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  return x;
}

struct GradientCheck {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  int coordinates = 0;
};

// Central finite differences at `coordinates` uniformly sampled parameter indices.
// Relative error is |a - n| / max(|a|, |n|, floor); the floor keeps coordinates with
// a vanishing gradient from dividing rounding noise by zero.
inline GradientCheck check_gradients(const ModelParams& params, std::span<const Example> batch,
                                     const ObjectiveSpec& objective, int coordinates, std::uint64_t seed,
                                     double h = 1e-5, double floor = 1e-5) {
  const LossAndGradients analytic = loss_and_gradients(params, batch, objective);
  Rng rng(seed);
  const std::size_t n = static_cast<std::size_t>(params.values().size());
  GradientCheck out;
  out.coordinates = coordinates;
  ModelParams probe = params;
  for (int c = 0; c < coordinates; ++c) {
    const std::size_t i = rng.below(n);
    const double original = probe.values()[i];
    probe.values()[i] = original + h;
    const double up = loss_and_gradients(probe, batch, objective).loss;
    probe.values()[i] = original - h;
    const double down = loss_and_gradients(probe, batch, objective).loss;
    probe.values()[i] = original;
    const double numeric = (up - down) / (2.0 * h);
    const double a = analytic.gradients.values()[i];
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
    if (rel > out.max_rel_error) {
      out.max_rel_error = rel;
      out.worst_index = i;
    }
  }
  return out;
}

// Random architecture, batch and seed for gradient checking.
struct GradientCase {
  ArchConfig arch;
  std::vector<Example> batch;
  std::uint64_t seed = 0;
};

inline GradientCase random_gradient_case(std::uint64_t seed) {
  Rng rng(seed);
  GradientCase gc;
  gc.seed = seed;
  ArchConfig& a = gc.arch;
  a.feat_dim = 2 + static_cast<int>(rng.below(4));
  a.frame_stack = 1 + static_cast<int>(rng.below(2));
  const int heads[] = {1, 2};
  a.num_heads = heads[rng.below(2)];
  // LayerNorm over fewer than 4 dims curves too sharply for h = 1e-5 stencils.
  a.model_dim = a.num_heads * (4 / a.num_heads + static_cast<int>(rng.below(3)));
  a.num_layers = static_cast<int>(rng.below(3));
  a.ffn_dim = 3 + static_cast<int>(rng.below(6));
  a.proj_dim = 2 + static_cast<int>(rng.below(3));
  a.num_classes = 2 + static_cast<int>(rng.below(3));
  a.positional_encoding = rng.bernoulli(0.7);
  const int batch = 1 + static_cast<int>(rng.below(3));
  for (int b = 0; b < batch; ++b) {
    Example ex;
    ex.id = "g" + std::to_string(seed) + "-" + std::to_string(b);
    const int frames = a.frame_stack * (4 + static_cast<int>(rng.below(8)));
    ex.features = random_features(frames, a.feat_dim, rng.next_u64());
    ex.label = static_cast<int>(rng.below(static_cast<std::uint64_t>(a.num_classes)));
    ex.seed = rng.next_u64();
    gc.batch.push_back(std::move(ex));
  }
  return gc;
}

inline SelfSupervisedObjective gradient_objective() {
  SelfSupervisedObjective ss;
  ss.mask.mask_prob = 0.3;
  ss.mask.span = 2;
  ss.contrastive.num_distractors = 3;
  ss.contrastive.temperature = 0.5;
  return ss;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("sapt-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace sapt::testing
