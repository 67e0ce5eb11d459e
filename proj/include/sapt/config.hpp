#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "sapt/corpus.hpp"
#include "sapt/encoder.hpp"
#include "sapt/pipeline.hpp"

namespace sapt {

// One file drives every command. Every key is optional and defaults to the
// values documented in README.md; unknown keys are rejected with their path.
//
// Stage seeds are derived from the global seed: benchmark = derive(seed,
// "benchmark"), pretrain = derive(seed, "pretrain"), sapt = derive(seed,
// "sapt"), finetune base = derive(seed, "finetune").
struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string output_dir = "runs/default";
  BenchmarkConfig benchmark;  // benchmark.seed is derived, not read
  ArchConfig arch;            // feat_dim and num_classes follow the benchmark
  TrainConfig pretrain = TrainConfig::defaults(StageKind::pretrain);
  TrainConfig sapt = TrainConfig::defaults(StageKind::sapt);
  TrainConfig finetune = TrainConfig::defaults(StageKind::finetune);
  std::vector<int> k_grid{1, 2, 4, 8, 16, 32, 64};
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};

  // Fills derived fields (stage seeds, benchmark seed, arch dims) and validates.
  void finalize();
};

ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& cfg);
std::string config_digest(const ExperimentConfig& cfg);

// Applies "a.b.c=value" overrides to the raw document before parsing. The
// value is parsed as JSON when possible and taken as a string otherwise.
void apply_override(nlohmann::json& doc, const std::string& assignment);

ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

}  // namespace sapt
