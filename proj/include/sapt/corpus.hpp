#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

#include "sapt/common.hpp"

namespace sapt {

// Synthetic stand-in for one language: a phone inventory with one spectral
// template per phone and a Markov chain over phones.
struct LanguageSpec {
  std::string id;
  RowMatrix phone_templates;  // P x F
  RowMatrix transition;       // P x P, row-stochastic
  int duration_mean = 1;      // frames per phone
  std::string group;

  int num_phones() const { return static_cast<int>(phone_templates.rows()); }
  int feat_dim() const { return static_cast<int>(phone_templates.cols()); }
  void validate() const;
};

// Recording conditions. noise_sigma is the acoustic axis, channel_gain and
// rate stand in for channel and speaking style.
struct DomainSpec {
  std::string id;
  double noise_sigma = 0.0;
  Vector channel_gain;
  double rate = 1.0;

  void validate() const;
};

struct Utterance {
  std::string id;
  RowMatrix features;  // T x F
  std::string label;
  std::string domain;
  Split split = Split::train;

  int frames() const { return static_cast<int>(features.rows()); }
};

enum class ManifestRole { pretraining, target };
std::string_view to_string(ManifestRole role);
ManifestRole manifest_role_from_string(std::string_view name);

struct ManifestRecord {
  std::string id;
  std::string store;  // feature file path relative to the corpus directory
  std::string label;
  std::string domain;
  Split split = Split::train;
  std::string group;

  bool operator==(const ManifestRecord&) const = default;
};

struct Manifest {
  ManifestRole role = ManifestRole::pretraining;
  std::string config_hash;
  std::vector<ManifestRecord> records;

  bool operator==(const Manifest&) const = default;

  // Throws GenerationError on duplicate ids (which would also make splits overlap).
  void validate() const;
  std::vector<const ManifestRecord*> in_split(Split split) const;
  // Sorted distinct labels.
  std::vector<std::string> labels() const;
  const ManifestRecord& find(const std::string& id) const;
};

std::string manifest_to_jsonl(const Manifest& manifest);
Manifest manifest_from_jsonl(const std::string& text);
void write_manifest(const Manifest& manifest, const std::filesystem::path& path);
Manifest read_manifest(const std::filesystem::path& path);

struct DomainConfig {
  std::string id;
  double noise_sigma = 0.0;
  // "unit" or "lognormal"
  std::string channel = "unit";
  double channel_log_sigma = 0.0;
  double rate = 1.0;
};

struct BenchmarkConfig {
  std::uint64_t seed = 20240917;
  int num_seen = 5;
  int num_unseen = 3;
  int num_phones = 6;
  int feat_dim = 16;
  int duration_min = 8;
  int duration_max = 14;
  int frames_min = 32;
  int frames_max = 64;
  int pretrain_per_language = 200;
  int target_train = 64;
  int target_dev = 10;
  int target_test = 20;
  DomainConfig pretrain_domain{"clean", 0.05, "unit", 0.0, 1.0};
  DomainConfig target_domain{"shifted", 0.40, "lognormal", 0.5, 1.3};

  void validate() const;
};

nlohmann::json to_json(const BenchmarkConfig& cfg);
nlohmann::json to_json(const LanguageSpec& lang);
nlohmann::json to_json(const DomainSpec& domain);
LanguageSpec language_from_json(const nlohmann::json& j);
DomainSpec domain_from_json(const nlohmann::json& j);
// Digest of the canonical serialization.
std::string config_hash(const BenchmarkConfig& cfg);

LanguageSpec make_language_spec(std::uint64_t seed, int num_phones, int feat_dim,
                                const std::string& group, const std::string& id = "",
                                int duration_min = 2, int duration_max = 4);
DomainSpec make_domain_spec(const DomainConfig& cfg, int feat_dim, std::uint64_t seed);

Utterance render_utterance(const LanguageSpec& lang, const DomainSpec& domain, int target_frames,
                           std::uint64_t seed);

struct Benchmark {
  BenchmarkConfig config;
  std::vector<LanguageSpec> languages;
  std::vector<DomainSpec> domains;
  Manifest pretrain;
  Manifest target;
  // Features keyed by utterance id, already rounded to the 32-bit on-disk precision.
  std::map<std::string, RowMatrix> features;

  // Checks that every referenced language and domain has a spec.
  void validate() const;
};

Benchmark build_benchmark(const BenchmarkConfig& cfg);

// Writes benchmark.json, languages.json, domains.json, d0.jsonl, dt.jsonl and features/.
void write_benchmark(const Benchmark& benchmark, const std::filesystem::path& dir);

inline constexpr const char* kPretrainManifestFile = "d0.jsonl";
inline constexpr const char* kTargetManifestFile = "dt.jsonl";

}  // namespace sapt
