#include "sapt/checkpoint.hpp"

#include <fmt/format.h>

#include "sapt/binary_io.hpp"
#include "sapt/digest.hpp"

namespace sapt {

using nlohmann::json;

namespace {
constexpr std::string_view kMagic = "SAPTCKPT";
constexpr std::uint32_t kVersion = 1;
}  // namespace

std::string_view to_string(Stage stage) {
  switch (stage) {
    case Stage::theta0: return "theta0";
    case Stage::sapt: return "sapt";
    case Stage::finetuned: return "finetuned";
  }
  return "theta0";
}

Stage stage_from_string(std::string_view name) {
  if (name == "theta0") return Stage::theta0;
  if (name == "sapt") return Stage::sapt;
  if (name == "finetuned") return Stage::finetuned;
  throw ConfigError(fmt::format("unknown checkpoint stage '{}'", name));
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  json header{{"arch", to_json(ckpt.arch())},
              {"stage", to_string(ckpt.stage)},
              {"seed", ckpt.seed},
              {"steps", ckpt.steps},
              {"source_digest", ckpt.source_digest},
              {"source_stage", ckpt.source_digest.empty() ? "" : std::string(to_string(ckpt.source_stage))},
              {"class_labels", ckpt.class_labels}};
  const std::string text = header.dump();
  std::string out(kMagic);
  binary::put_u32(out, kVersion);
  binary::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  const Vector& v = ckpt.params.values();
  out.reserve(out.size() + 8 * static_cast<std::size_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) binary::put_f64(out, v(i));
  return out;
}

Checkpoint deserialize_checkpoint(std::string_view bytes, const std::string& context) {
  binary::Reader in(bytes, context);
  if (in.take(kMagic.size()) != kMagic) throw IoError(context + ": not a SAPTCKPT file");
  if (in.u32() != kVersion) throw IoError(context + ": unsupported checkpoint version");
  const std::uint32_t header_len = in.u32();
  json header;
  try {
    header = json::parse(in.take(header_len));
  } catch (const json::exception& e) {
    throw IoError(fmt::format("{}: malformed header: {}", context, e.what()));
  }
  try {
    Checkpoint ckpt{ModelParams(arch_from_json(header.at("arch")))};
    ckpt.stage = stage_from_string(header.at("stage").get<std::string>());
    ckpt.seed = header.at("seed").get<std::uint64_t>();
    ckpt.steps = header.at("steps").get<std::int64_t>();
    ckpt.source_digest = header.at("source_digest").get<std::string>();
    const auto source_stage = header.at("source_stage").get<std::string>();
    if (!source_stage.empty()) ckpt.source_stage = stage_from_string(source_stage);
    ckpt.class_labels = header.at("class_labels").get<std::vector<std::string>>();
    Vector& v = ckpt.params.values();
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = in.f64();
    if (!in.at_end()) throw IoError(context + ": trailing bytes after parameters");
    return ckpt;
  } catch (const json::exception& e) {
    throw IoError(fmt::format("{}: bad header: {}", context, e.what()));
  }
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  binary::write_file_atomic(path.string(), serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw DependencyError(fmt::format("missing checkpoint {}", path.string()));
  return deserialize_checkpoint(binary::read_file(path.string()), path.string());
}

std::string checkpoint_digest(const Checkpoint& ckpt) { return sha256_hex(serialize_checkpoint(ckpt)); }

std::string params_digest(const ModelParams& params) {
  std::string bytes = to_json(params.arch()).dump();
  for (Eigen::Index i = 0; i < params.values().size(); ++i) binary::put_f64(bytes, params.values()(i));
  return sha256_hex(bytes);
}

void verify_lineage(const Checkpoint& ckpt, const Checkpoint& source) {
  if (ckpt.source_digest != checkpoint_digest(source)) {
    throw DependencyError(fmt::format("{} checkpoint does not descend from the given {} checkpoint",
                                      to_string(ckpt.stage), to_string(source.stage)));
  }
  const bool ok = (ckpt.stage == Stage::sapt && source.stage == Stage::theta0) ||
                  (ckpt.stage == Stage::finetuned && (source.stage == Stage::theta0 || source.stage == Stage::sapt));
  if (!ok) {
    throw DependencyError(
        fmt::format("invalid lineage: {} cannot start from {}", to_string(ckpt.stage), to_string(source.stage)));
  }
}

}  // namespace sapt
