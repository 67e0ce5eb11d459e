#include "sapt/corpus.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "sapt/digest.hpp"
#include "sapt/feature_store.hpp"
#include "sapt/rng.hpp"

namespace sapt {

using nlohmann::json;

std::string_view to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::dev: return "dev";
    case Split::test: return "test";
  }
  return "train";
}

Split split_from_string(std::string_view name) {
  if (name == "train") return Split::train;
  if (name == "dev") return Split::dev;
  if (name == "test") return Split::test;
  throw ConfigError(fmt::format("unknown split '{}'", name));
}

std::string_view to_string(ManifestRole role) {
  return role == ManifestRole::pretraining ? "pretraining" : "target";
}

ManifestRole manifest_role_from_string(std::string_view name) {
  if (name == "pretraining") return ManifestRole::pretraining;
  if (name == "target") return ManifestRole::target;
  throw ConfigError(fmt::format("unknown manifest role '{}'", name));
}

void LanguageSpec::validate() const {
  const int p = num_phones();
  const int f = feat_dim();
  require(p >= 2, fmt::format("language {}: need at least 2 phones", id));
  require(f >= 2, fmt::format("language {}: need feat_dim >= 2", id));
  require(duration_mean >= 1, fmt::format("language {}: duration_mean must be >= 1", id));
  require(transition.rows() == p && transition.cols() == p,
          fmt::format("language {}: transition must be {}x{}", id, p, p));
  for (int i = 0; i < p; ++i) {
    require((transition.row(i).array() >= 0.0).all(),
            fmt::format("language {}: negative transition probability", id));
    require(std::abs(transition.row(i).sum() - 1.0) <= 1e-9,
            fmt::format("language {}: transition row {} does not sum to 1", id, i));
    for (int j = i + 1; j < p; ++j) {
      require((phone_templates.row(i) - phone_templates.row(j)).norm() > 0.0,
              fmt::format("language {}: phones {} and {} share a template", id, i, j));
    }
  }
}

void DomainSpec::validate() const {
  require(noise_sigma >= 0.0, fmt::format("domain {}: noise_sigma must be >= 0", id));
  require(channel_gain.size() >= 1 && (channel_gain.array() > 0.0).all(),
          fmt::format("domain {}: channel gains must be positive", id));
  require(rate >= 0.25 && rate <= 4.0, fmt::format("domain {}: rate outside [0.25, 4]", id));
}

void Manifest::validate() const {
  std::set<std::string> seen;
  for (const auto& r : records) {
    if (!seen.insert(r.id).second) {
      throw GenerationError(fmt::format("utterance id '{}' appears more than once", r.id));
    }
  }
}

std::vector<const ManifestRecord*> Manifest::in_split(Split split) const {
  std::vector<const ManifestRecord*> out;
  for (const auto& r : records) {
    if (r.split == split) out.push_back(&r);
  }
  return out;
}

std::vector<std::string> Manifest::labels() const {
  std::set<std::string> labels;
  for (const auto& r : records) labels.insert(r.label);
  return {labels.begin(), labels.end()};
}

const ManifestRecord& Manifest::find(const std::string& id) const {
  for (const auto& r : records) {
    if (r.id == id) return r;
  }
  throw ConfigError(fmt::format("utterance '{}' is not in the manifest", id));
}

std::string manifest_to_jsonl(const Manifest& manifest) {
  std::string out =
      json{{"role", to_string(manifest.role)}, {"config_hash", manifest.config_hash}, {"format_version", 1}}
          .dump();
  out += '\n';
  for (const auto& r : manifest.records) {
    out += json{{"id", r.id},         {"store", r.store},
                {"label", r.label},   {"domain", r.domain},
                {"split", to_string(r.split)}, {"group", r.group}}
               .dump();
    out += '\n';
  }
  return out;
}

Manifest manifest_from_jsonl(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  Manifest manifest;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ConfigError(fmt::format("manifest: malformed line: {}", e.what()));
    }
    try {
      if (header) {
        if (j.at("format_version").get<int>() != 1) throw ConfigError("manifest: unsupported format_version");
        manifest.role = manifest_role_from_string(j.at("role").get<std::string>());
        manifest.config_hash = j.at("config_hash").get<std::string>();
        header = false;
        continue;
      }
      ManifestRecord r;
      r.id = j.at("id").get<std::string>();
      r.store = j.at("store").get<std::string>();
      r.label = j.at("label").get<std::string>();
      r.domain = j.at("domain").get<std::string>();
      r.split = split_from_string(j.at("split").get<std::string>());
      r.group = j.at("group").get<std::string>();
      manifest.records.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw ConfigError(fmt::format("manifest: {}", e.what()));
    }
  }
  if (header) throw ConfigError("manifest: missing header line");
  manifest.validate();
  return manifest;
}

void write_manifest(const Manifest& manifest, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(fmt::format("cannot write {}", path.string()));
  out << manifest_to_jsonl(manifest);
  if (!out) throw IoError(fmt::format("write failed: {}", path.string()));
}

Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot read {}", path.string()));
  std::stringstream buffer;
  buffer << in.rdbuf();
  return manifest_from_jsonl(buffer.str());
}

void BenchmarkConfig::validate() const {
  if (num_seen < 1) throw ConfigError("benchmark.num_seen must be >= 1");
  if (num_unseen < 0) throw ConfigError("benchmark.num_unseen must be >= 0");
  if (num_seen + num_unseen < 2) throw ConfigError("benchmark needs at least 2 languages");
  if (num_phones < 2) throw ConfigError("benchmark.num_phones must be >= 2");
  if (feat_dim < 2) throw ConfigError("benchmark.feat_dim must be >= 2");
  if (duration_min < 1 || duration_max < duration_min)
    throw ConfigError("benchmark.duration_min/max must satisfy 1 <= min <= max");
  if (frames_min < 1 || frames_max < frames_min)
    throw ConfigError("benchmark.frames_min/max must satisfy 1 <= min <= max");
  if (pretrain_per_language < 0 || target_train < 0 || target_dev < 0 || target_test < 0)
    throw ConfigError("benchmark counts must be >= 0");
  for (const auto* d : {&pretrain_domain, &target_domain}) {
    if (d->noise_sigma < 0) throw ConfigError("benchmark domain noise_sigma must be >= 0");
    if (d->channel != "unit" && d->channel != "lognormal")
      throw ConfigError("benchmark domain channel must be 'unit' or 'lognormal'");
    if (d->rate < 0.25 || d->rate > 4.0) throw ConfigError("benchmark domain rate must be in [0.25, 4]");
  }
  if (pretrain_domain.id == target_domain.id) throw ConfigError("benchmark domains need distinct ids");
}

namespace {

json to_json(const DomainConfig& d) {
  return {{"id", d.id},
          {"noise_sigma", d.noise_sigma},
          {"channel", d.channel},
          {"channel_log_sigma", d.channel_log_sigma},
          {"rate", d.rate}};
}

json matrix_to_json(const RowMatrix& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    rows.push_back(std::vector<double>(m.row(i).begin(), m.row(i).end()));
  }
  return rows;
}

RowMatrix matrix_from_json(const json& j) {
  const auto rows = j.get<std::vector<std::vector<double>>>();
  RowMatrix m(rows.size(), rows.empty() ? 0 : rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != static_cast<std::size_t>(m.cols())) throw ConfigError("ragged matrix");
    for (std::size_t k = 0; k < rows[i].size(); ++k) m(i, k) = rows[i][k];
  }
  return m;
}

std::string language_id(int index) { return fmt::format("lang{:02d}", index); }

}  // namespace

json to_json(const BenchmarkConfig& c) {
  return {{"seed", c.seed},
          {"num_seen", c.num_seen},
          {"num_unseen", c.num_unseen},
          {"num_phones", c.num_phones},
          {"feat_dim", c.feat_dim},
          {"duration_min", c.duration_min},
          {"duration_max", c.duration_max},
          {"frames_min", c.frames_min},
          {"frames_max", c.frames_max},
          {"pretrain_per_language", c.pretrain_per_language},
          {"target_train", c.target_train},
          {"target_dev", c.target_dev},
          {"target_test", c.target_test},
          {"pretrain_domain", to_json(c.pretrain_domain)},
          {"target_domain", to_json(c.target_domain)}};
}

json to_json(const LanguageSpec& lang) {
  return {{"id", lang.id},
          {"group", lang.group},
          {"duration_mean", lang.duration_mean},
          {"phone_templates", matrix_to_json(lang.phone_templates)},
          {"transition", matrix_to_json(lang.transition)}};
}

json to_json(const DomainSpec& d) {
  return {{"id", d.id},
          {"noise_sigma", d.noise_sigma},
          {"channel_gain", std::vector<double>(d.channel_gain.begin(), d.channel_gain.end())},
          {"rate", d.rate}};
}

LanguageSpec language_from_json(const json& j) {
  LanguageSpec lang;
  lang.id = j.at("id").get<std::string>();
  lang.group = j.at("group").get<std::string>();
  lang.duration_mean = j.at("duration_mean").get<int>();
  lang.phone_templates = matrix_from_json(j.at("phone_templates"));
  lang.transition = matrix_from_json(j.at("transition"));
  lang.validate();
  return lang;
}

DomainSpec domain_from_json(const json& j) {
  DomainSpec d;
  d.id = j.at("id").get<std::string>();
  d.noise_sigma = j.at("noise_sigma").get<double>();
  const auto gains = j.at("channel_gain").get<std::vector<double>>();
  d.channel_gain = Eigen::Map<const Vector>(gains.data(), static_cast<Eigen::Index>(gains.size()));
  d.rate = j.at("rate").get<double>();
  d.validate();
  return d;
}

std::string config_hash(const BenchmarkConfig& cfg) { return sha256_hex(to_json(cfg).dump()); }

LanguageSpec make_language_spec(std::uint64_t seed, int num_phones, int feat_dim, const std::string& group,
                                const std::string& id, int duration_min, int duration_max) {
  require(num_phones >= 2, "make_language_spec: num_phones must be >= 2");
  require(feat_dim >= 2, "make_language_spec: feat_dim must be >= 2");
  require(duration_min >= 1 && duration_max >= duration_min, "make_language_spec: bad duration range");
  constexpr int kMaxAttempts = 1000;
  constexpr double kMinSeparation = 0.5;

  Rng rng(seed);
  LanguageSpec lang;
  lang.id = id.empty() ? fmt::format("lang-{}", seed) : id;
  lang.group = group;

  // Coordinates ~ N(0, 1/F) so templates have unit expected norm.
  const double scale = 1.0 / std::sqrt(static_cast<double>(feat_dim));
  lang.phone_templates.resize(num_phones, feat_dim);
  for (int p = 0; p < num_phones; ++p) {
    int attempts = 0;
    while (true) {
      if (++attempts > kMaxAttempts) {
        throw GenerationError(
            fmt::format("make_language_spec(seed={}): could not separate phone templates", seed));
      }
      for (int f = 0; f < feat_dim; ++f) lang.phone_templates(p, f) = scale * rng.normal();
      bool separated = true;
      for (int q = 0; q < p && separated; ++q) {
        separated = (lang.phone_templates.row(p) - lang.phone_templates.row(q)).norm() >= kMinSeparation;
      }
      if (separated) break;
    }
  }

  // Peaked rows give each language its own phonotactics; no self loops because
  // a phone is already held for its full duration.
  lang.transition = RowMatrix::Zero(num_phones, num_phones);
  for (int i = 0; i < num_phones; ++i) {
    for (int j = 0; j < num_phones; ++j) {
      const double w = std::exp(2.0 * rng.normal());
      if (i != j) lang.transition(i, j) = w;
    }
    lang.transition.row(i) /= lang.transition.row(i).sum();
  }
  lang.duration_mean = duration_min + static_cast<int>(rng.below(duration_max - duration_min + 1));
  lang.validate();
  return lang;
}

DomainSpec make_domain_spec(const DomainConfig& cfg, int feat_dim, std::uint64_t seed) {
  DomainSpec d;
  d.id = cfg.id;
  d.noise_sigma = cfg.noise_sigma;
  d.rate = cfg.rate;
  d.channel_gain = Vector::Ones(feat_dim);
  if (cfg.channel == "lognormal") {
    Rng rng(seed);
    for (int f = 0; f < feat_dim; ++f) d.channel_gain(f) = std::exp(cfg.channel_log_sigma * rng.normal());
  } else if (cfg.channel != "unit") {
    throw ConfigError(fmt::format("domain {}: unknown channel kind '{}'", cfg.id, cfg.channel));
  }
  d.validate();
  return d;
}

Utterance render_utterance(const LanguageSpec& lang, const DomainSpec& domain, int target_frames,
                           std::uint64_t seed) {
  require(target_frames >= 1, "render_utterance: target_frames must be >= 1");
  require(domain.channel_gain.size() == lang.feat_dim(), "render_utterance: channel/feature dim mismatch");
  Rng rng(seed);
  const int hold = std::max(1, static_cast<int>(std::lround(lang.duration_mean * domain.rate)));

  Utterance utt;
  utt.label = lang.id;
  utt.domain = domain.id;
  utt.features.resize(target_frames, lang.feat_dim());

  auto phone = static_cast<int>(rng.below(lang.num_phones()));
  int held = 0;
  for (int t = 0; t < target_frames; ++t) {
    if (held == hold) {
      const double u = rng.uniform();
      double acc = 0.0;
      int next = lang.num_phones() - 1;
      for (int j = 0; j < lang.num_phones(); ++j) {
        acc += lang.transition(phone, j);
        if (u < acc) {
          next = j;
          break;
        }
      }
      phone = next;
      held = 0;
    }
    ++held;
    for (int f = 0; f < lang.feat_dim(); ++f) {
      double value = domain.channel_gain(f) * lang.phone_templates(phone, f);
      if (domain.noise_sigma > 0.0) value += domain.noise_sigma * rng.normal();
      utt.features(t, f) = value;
    }
  }
  if (!utt.features.allFinite()) {
    throw Error(fmt::format("render_utterance: non-finite features for language {}", lang.id));
  }
  return utt;
}

void Benchmark::validate() const {
  std::set<std::string> language_ids;
  std::set<std::string> domain_ids;
  for (const auto& l : languages) language_ids.insert(l.id);
  for (const auto& d : domains) domain_ids.insert(d.id);
  for (const auto* m : {&pretrain, &target}) {
    m->validate();
    for (const auto& r : m->records) {
      if (!language_ids.count(r.label)) throw GenerationError(fmt::format("no LanguageSpec for '{}'", r.label));
      if (!domain_ids.count(r.domain)) throw GenerationError(fmt::format("no DomainSpec for '{}'", r.domain));
    }
  }
}

namespace {

RowMatrix to_storage_precision(RowMatrix m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = static_cast<double>(static_cast<float>(m.data()[i]));
  }
  return m;
}

}  // namespace

Benchmark build_benchmark(const BenchmarkConfig& cfg) {
  cfg.validate();
  Benchmark b;
  b.config = cfg;
  const std::string hash = config_hash(cfg);

  const int num_languages = cfg.num_seen + cfg.num_unseen;
  for (int i = 0; i < num_languages; ++i) {
    const std::string id = language_id(i);
    const std::string group = i < cfg.num_seen ? "seen" : "unseen";
    b.languages.push_back(make_language_spec(derive_seed(cfg.seed, "language/" + id), cfg.num_phones,
                                             cfg.feat_dim, group, id, cfg.duration_min, cfg.duration_max));
  }
  const DomainSpec pre_domain =
      make_domain_spec(cfg.pretrain_domain, cfg.feat_dim, derive_seed(cfg.seed, "domain/" + cfg.pretrain_domain.id));
  const DomainSpec tgt_domain =
      make_domain_spec(cfg.target_domain, cfg.feat_dim, derive_seed(cfg.seed, "domain/" + cfg.target_domain.id));
  b.domains = {pre_domain, tgt_domain};

  auto emit = [&](Manifest& manifest, const LanguageSpec& lang, const DomainSpec& domain,
                  const std::string& prefix, Split split, int index) {
    ManifestRecord r;
    r.id = fmt::format("{}-{}-{}-{:04d}", prefix, lang.id, to_string(split), index);
    r.store = "features/" + r.id + ".feat";
    r.label = lang.id;
    r.domain = domain.id;
    r.split = split;
    r.group = lang.group;
    const std::uint64_t seed = derive_seed(cfg.seed, "utterance/" + r.id);
    Rng length_rng(derive_seed(seed, "length"));
    const int frames = cfg.frames_min + static_cast<int>(length_rng.below(cfg.frames_max - cfg.frames_min + 1));
    b.features[r.id] = to_storage_precision(render_utterance(lang, domain, frames, seed).features);
    manifest.records.push_back(std::move(r));
  };

  b.pretrain.role = ManifestRole::pretraining;
  b.pretrain.config_hash = hash;
  b.target.role = ManifestRole::target;
  b.target.config_hash = hash;
  for (const auto& lang : b.languages) {
    if (lang.group != "seen") continue;
    for (int i = 0; i < cfg.pretrain_per_language; ++i) emit(b.pretrain, lang, pre_domain, "d0", Split::train, i);
  }
  for (const auto& lang : b.languages) {
    for (int i = 0; i < cfg.target_train; ++i) emit(b.target, lang, tgt_domain, "dt", Split::train, i);
    for (int i = 0; i < cfg.target_dev; ++i) emit(b.target, lang, tgt_domain, "dt", Split::dev, i);
    for (int i = 0; i < cfg.target_test; ++i) emit(b.target, lang, tgt_domain, "dt", Split::test, i);
  }
  b.validate();
  return b;
}

void write_benchmark(const Benchmark& b, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "features", ec);
  if (ec) throw IoError(fmt::format("cannot create {}: {}", dir.string(), ec.message()));

  auto write_json = [](const fs::path& path, const json& j) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError(fmt::format("cannot write {}", path.string()));
    out << j.dump(2) << '\n';
  };
  write_json(dir / "benchmark.json", to_json(b.config));
  json langs = json::array();
  for (const auto& l : b.languages) langs.push_back(to_json(l));
  write_json(dir / "languages.json", langs);
  json domains = json::array();
  for (const auto& d : b.domains) domains.push_back(to_json(d));
  write_json(dir / "domains.json", domains);

  for (const auto* m : {&b.pretrain, &b.target}) {
    for (const auto& r : m->records) write_features(dir / r.store, b.features.at(r.id));
  }
  // Manifests last: their presence marks a complete corpus.
  write_manifest(b.pretrain, dir / kPretrainManifestFile);
  write_manifest(b.target, dir / kTargetManifestFile);
}

}  // namespace sapt
