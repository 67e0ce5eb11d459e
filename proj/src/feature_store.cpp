#include "sapt/feature_store.hpp"

#include <fmt/format.h>

#include <fstream>
#include <sstream>

#include "sapt/binary_io.hpp"

namespace sapt {

namespace binary {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot read {}", path));
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

void write_file_atomic(const std::string& path, std::string_view bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(fmt::format("cannot write {}", tmp));
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError(fmt::format("write failed: {}", tmp));
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError(fmt::format("cannot move {} into place: {}", path, ec.message()));
}

}  // namespace binary

namespace {
constexpr std::string_view kFeatureMagic = "SAPTFEAT";
constexpr std::uint32_t kFeatureVersion = 1;
}  // namespace

void write_features(const std::filesystem::path& path, const RowMatrix& features) {
  std::string out(kFeatureMagic);
  binary::put_u32(out, kFeatureVersion);
  binary::put_u32(out, static_cast<std::uint32_t>(features.rows()));
  binary::put_u32(out, static_cast<std::uint32_t>(features.cols()));
  for (Eigen::Index t = 0; t < features.rows(); ++t) {
    for (Eigen::Index f = 0; f < features.cols(); ++f) binary::put_f32(out, static_cast<float>(features(t, f)));
  }
  binary::write_file_atomic(path.string(), out);
}

RowMatrix read_features(const std::filesystem::path& path) {
  const std::string bytes = binary::read_file(path.string());
  binary::Reader in(bytes, path.string());
  if (in.take(kFeatureMagic.size()) != kFeatureMagic) throw IoError(path.string() + ": not a SAPTFEAT file");
  if (in.u32() != kFeatureVersion) throw IoError(path.string() + ": unsupported feature version");
  const std::uint32_t frames = in.u32();
  const std::uint32_t dim = in.u32();
  RowMatrix m(frames, dim);
  for (std::uint32_t t = 0; t < frames; ++t) {
    for (std::uint32_t f = 0; f < dim; ++f) m(t, f) = static_cast<double>(in.f32());
  }
  if (!in.at_end()) throw IoError(path.string() + ": trailing bytes");
  return m;
}

RowMatrix MemoryFeatureStore::load(const ManifestRecord& record) const {
  auto it = features_.find(record.id);
  if (it == features_.end()) throw IoError(fmt::format("no features stored for '{}'", record.id));
  return it->second;
}

RowMatrix DiskFeatureStore::load(const ManifestRecord& record) const {
  {
    std::lock_guard lock(mutex_);
    auto it = cache_.find(record.store);
    if (it != cache_.end()) return it->second;
  }
  RowMatrix m = read_features(root_ / record.store);
  std::lock_guard lock(mutex_);
  cache_.emplace(record.store, m);
  return m;
}

void AuditLog::record(AccessRecord access) {
  std::lock_guard lock(mutex_);
  entries_.push_back(std::move(access));
}

std::vector<AccessRecord> AuditLog::entries() const {
  std::lock_guard lock(mutex_);
  return entries_;
}

std::map<std::pair<std::string, Split>, std::size_t> AuditLog::counts() const {
  std::lock_guard lock(mutex_);
  std::map<std::pair<std::string, Split>, std::size_t> out;
  for (const auto& e : entries_) ++out[{e.phase, e.split}];
  return out;
}

void AuditLog::clear() {
  std::lock_guard lock(mutex_);
  entries_.clear();
}

GuardedSource::GuardedSource(const FeatureSource& inner, std::map<std::string, Split> truth, std::string phase,
                             std::set<Split> allowed, AuditLog* log)
    : inner_(inner), truth_(std::move(truth)), phase_(std::move(phase)), allowed_(std::move(allowed)), log_(log) {}

std::map<std::string, Split> GuardedSource::split_index(const std::vector<const Manifest*>& manifests) {
  std::map<std::string, Split> index;
  for (const auto* m : manifests) {
    for (const auto& r : m->records) index[r.id] = r.split;
  }
  return index;
}

RowMatrix GuardedSource::load(const ManifestRecord& record) const {
  auto it = truth_.find(record.id);
  if (it == truth_.end()) {
    throw SplitViolation(fmt::format("{}: utterance '{}' is not in any known manifest", phase_, record.id));
  }
  if (!allowed_.count(it->second)) {
    throw SplitViolation(fmt::format("{}: read of {} utterance '{}' is not allowed", phase_,
                                     to_string(it->second), record.id));
  }
  if (log_) log_->record({phase_, record.id, it->second});
  return inner_.load(record);
}

}  // namespace sapt
