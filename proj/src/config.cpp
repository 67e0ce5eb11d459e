#include "sapt/config.hpp"

#include <fmt/format.h>

#include <fstream>
#include <set>
#include <sstream>

#include "sapt/digest.hpp"
#include "sapt/rng.hpp"

namespace sapt {

using nlohmann::json;

namespace {

// Reads keys from one JSON object and reports anything left unread.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(fmt::format("config: '{}' must be an object", display()));
  }

  template <typename T>
  void get(const char* key, T& out) {
    used_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception&) {
      throw ConfigError(fmt::format("config: '{}' has the wrong type", child(key)));
    }
  }

  Section sub(const char* key) {
    used_.insert(key);
    auto it = j_.find(key);
    static const json kEmpty = json::object();
    return Section(it == j_.end() ? kEmpty : *it, child(key));
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!used_.count(key)) throw ConfigError(fmt::format("config: unknown key '{}'", child(key.c_str())));
    }
  }

  std::string child(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  std::string display() const { return path_.empty() ? "<root>" : path_; }

  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

void read_domain(Section s, DomainConfig& d) {
  s.get("id", d.id);
  s.get("noise_sigma", d.noise_sigma);
  s.get("channel", d.channel);
  s.get("channel_log_sigma", d.channel_log_sigma);
  s.get("rate", d.rate);
  s.finish();
}

void read_stage(Section s, TrainConfig& t) {
  s.get("steps", t.steps);
  s.get("batch_size", t.batch_size);
  s.get("learning_rate", t.adam.learning_rate);
  s.get("adam_beta1", t.adam.beta1);
  s.get("adam_beta2", t.adam.beta2);
  s.get("adam_eps", t.adam.eps);
  if (t.stage == StageKind::finetune) {
    std::string freeze(to_string(t.freeze));
    s.get("freeze_policy", freeze);
    t.freeze = freeze_policy_from_string(freeze);
  } else {
    s.get("mask_prob", t.mask.mask_prob);
    s.get("mask_span", t.mask.span);
    s.get("num_distractors", t.contrastive.num_distractors);
    s.get("temperature", t.contrastive.temperature);
  }
  s.finish();
}

json stage_json(const TrainConfig& t) {
  json j{{"steps", t.steps},
         {"batch_size", t.batch_size},
         {"learning_rate", t.adam.learning_rate},
         {"adam_beta1", t.adam.beta1},
         {"adam_beta2", t.adam.beta2},
         {"adam_eps", t.adam.eps}};
  if (t.stage == StageKind::finetune) {
    j["freeze_policy"] = to_string(t.freeze);
  } else {
    j["mask_prob"] = t.mask.mask_prob;
    j["mask_span"] = t.mask.span;
    j["num_distractors"] = t.contrastive.num_distractors;
    j["temperature"] = t.contrastive.temperature;
  }
  return j;
}

json domain_json(const DomainConfig& d) {
  return {{"id", d.id},
          {"noise_sigma", d.noise_sigma},
          {"channel", d.channel},
          {"channel_log_sigma", d.channel_log_sigma},
          {"rate", d.rate}};
}

}  // namespace

void ExperimentConfig::finalize() {
  benchmark.seed = derive_seed(seed, "benchmark");
  pretrain.stage = StageKind::pretrain;
  sapt.stage = StageKind::sapt;
  finetune.stage = StageKind::finetune;
  pretrain.seed = derive_seed(seed, "pretrain");
  sapt.seed = derive_seed(seed, "sapt");
  finetune.seed = derive_seed(seed, "finetune");
  arch.feat_dim = benchmark.feat_dim;
  arch.num_classes = benchmark.num_seen + benchmark.num_unseen;
  benchmark.validate();
  arch.validate();
  pretrain.validate();
  sapt.validate();
  finetune.validate();
  if (benchmark.frames_min < arch.frame_stack) {
    throw ConfigError("config: benchmark.frames_min must be >= arch.frame_stack");
  }
  if (k_grid.empty()) throw ConfigError("config: fewshot.k_grid must not be empty");
  for (int k : k_grid) {
    if (k < 1 || k > benchmark.target_train) {
      throw ConfigError(fmt::format("config: fewshot.k_grid value {} outside [1, benchmark.target_train={}]", k,
                                    benchmark.target_train));
    }
  }
  if (seeds.empty()) throw ConfigError("config: fewshot.seeds must not be empty");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw ConfigError("config: fewshot.seeds must be distinct");
  }
  if (output_dir.empty()) throw ConfigError("config: output_dir must not be empty");
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig cfg;
  Section root(j, "");
  root.get("seed", cfg.seed);
  root.get("output_dir", cfg.output_dir);
  {
    Section b = root.sub("benchmark");
    auto& c = cfg.benchmark;
    b.get("num_seen", c.num_seen);
    b.get("num_unseen", c.num_unseen);
    b.get("num_phones", c.num_phones);
    b.get("feat_dim", c.feat_dim);
    b.get("duration_min", c.duration_min);
    b.get("duration_max", c.duration_max);
    b.get("frames_min", c.frames_min);
    b.get("frames_max", c.frames_max);
    b.get("pretrain_per_language", c.pretrain_per_language);
    b.get("target_train", c.target_train);
    b.get("target_dev", c.target_dev);
    b.get("target_test", c.target_test);
    read_domain(b.sub("pretrain_domain"), c.pretrain_domain);
    read_domain(b.sub("target_domain"), c.target_domain);
    b.finish();
  }
  {
    Section a = root.sub("arch");
    a.get("frame_stack", cfg.arch.frame_stack);
    a.get("model_dim", cfg.arch.model_dim);
    a.get("num_layers", cfg.arch.num_layers);
    a.get("num_heads", cfg.arch.num_heads);
    a.get("ffn_dim", cfg.arch.ffn_dim);
    a.get("proj_dim", cfg.arch.proj_dim);
    a.get("positional_encoding", cfg.arch.positional_encoding);
    a.finish();
  }
  read_stage(root.sub("pretrain"), cfg.pretrain);
  read_stage(root.sub("sapt"), cfg.sapt);
  read_stage(root.sub("finetune"), cfg.finetune);
  {
    Section f = root.sub("fewshot");
    f.get("k_grid", cfg.k_grid);
    f.get("seeds", cfg.seeds);
    f.finish();
  }
  root.finish();
  cfg.finalize();
  return cfg;
}

json to_json(const ExperimentConfig& cfg) {
  const auto& b = cfg.benchmark;
  return {{"seed", cfg.seed},
          {"output_dir", cfg.output_dir},
          {"benchmark",
           {{"num_seen", b.num_seen},
            {"num_unseen", b.num_unseen},
            {"num_phones", b.num_phones},
            {"feat_dim", b.feat_dim},
            {"duration_min", b.duration_min},
            {"duration_max", b.duration_max},
            {"frames_min", b.frames_min},
            {"frames_max", b.frames_max},
            {"pretrain_per_language", b.pretrain_per_language},
            {"target_train", b.target_train},
            {"target_dev", b.target_dev},
            {"target_test", b.target_test},
            {"pretrain_domain", domain_json(b.pretrain_domain)},
            {"target_domain", domain_json(b.target_domain)}}},
          {"arch",
           {{"frame_stack", cfg.arch.frame_stack},
            {"model_dim", cfg.arch.model_dim},
            {"num_layers", cfg.arch.num_layers},
            {"num_heads", cfg.arch.num_heads},
            {"ffn_dim", cfg.arch.ffn_dim},
            {"proj_dim", cfg.arch.proj_dim},
            {"positional_encoding", cfg.arch.positional_encoding}}},
          {"pretrain", stage_json(cfg.pretrain)},
          {"sapt", stage_json(cfg.sapt)},
          {"finetune", stage_json(cfg.finetune)},
          {"fewshot", {{"k_grid", cfg.k_grid}, {"seeds", cfg.seeds}}}};
}

std::string config_digest(const ExperimentConfig& cfg) {
  // output_dir only says where results go; it does not change any number.
  json j = to_json(cfg);
  j.erase("output_dir");
  return sha256_hex(j.dump());
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError(fmt::format("override '{}' must look like key.path=value", assignment));
  }
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  json* node = &doc;
  std::stringstream parts(path);
  std::string part;
  std::vector<std::string> keys;
  while (std::getline(parts, part, '.')) keys.push_back(part);
  for (std::size_t i = 0; i + 1 < keys.size(); ++i) {
    if (!node->is_object()) throw ConfigError(fmt::format("override '{}': '{}' is not a section", path, keys[i]));
    node = &(*node)[keys[i]];
    if (node->is_null()) *node = json::object();
  }
  if (!node->is_object()) throw ConfigError(fmt::format("override '{}' does not address a key", path));
  (*node)[keys.back()] = value;
}

ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot read config {}", path.string()));
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("config {}: {}", path.string(), e.what()));
  }
  for (const auto& o : overrides) apply_override(doc, o);
  return config_from_json(doc);
}

}  // namespace sapt
