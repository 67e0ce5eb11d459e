#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "sapt/encoder.hpp"

namespace sapt {

enum class Stage { theta0, sapt, finetuned };
std::string_view to_string(Stage stage);
Stage stage_from_string(std::string_view name);

struct Checkpoint {
  ModelParams params;
  Stage stage = Stage::theta0;
  std::uint64_t seed = 0;
  std::int64_t steps = 0;
  std::string source_digest;  // empty for theta0
  Stage source_stage = Stage::theta0;
  std::vector<std::string> class_labels;  // finetuned only; index = class id

  const ArchConfig& arch() const { return params.arch(); }
};

// "SAPTCKPT", u32 version, u32 header length, UTF-8 JSON header, then every
// parameter in canonical order as little-endian float64.
std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(std::string_view bytes, const std::string& context = "checkpoint");

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// SHA-256 of the serialized checkpoint.
std::string checkpoint_digest(const Checkpoint& ckpt);
// SHA-256 over the architecture and parameter payload only, ignoring lineage.
std::string params_digest(const ModelParams& params);

// Checks that `ckpt` may have been produced from `source` (stage order and digest).
void verify_lineage(const Checkpoint& ckpt, const Checkpoint& source);

}  // namespace sapt
