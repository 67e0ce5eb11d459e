#pragma once

#include <filesystem>
#include <map>
#include <mutex>
#include <set>
#include <string>
#include <vector>

#include "sapt/common.hpp"
#include "sapt/corpus.hpp"

namespace sapt {

// On-disk feature file: "SAPTFEAT", u32 version, u32 T, u32 F, then T*F
// little-endian float32 values in row-major order.
void write_features(const std::filesystem::path& path, const RowMatrix& features);
RowMatrix read_features(const std::filesystem::path& path);

// Everything the training and evaluation code reads goes through this interface.
class FeatureSource {
 public:
  virtual ~FeatureSource() = default;
  virtual RowMatrix load(const ManifestRecord& record) const = 0;
};

class MemoryFeatureStore : public FeatureSource {
 public:
  MemoryFeatureStore() = default;
  explicit MemoryFeatureStore(std::map<std::string, RowMatrix> features)
      : features_(std::move(features)) {}

  void put(const std::string& id, RowMatrix features) { features_[id] = std::move(features); }
  RowMatrix load(const ManifestRecord& record) const override;

 private:
  std::map<std::string, RowMatrix> features_;
};

// Reads record.store relative to `root`, caching decoded files.
class DiskFeatureStore : public FeatureSource {
 public:
  explicit DiskFeatureStore(std::filesystem::path root) : root_(std::move(root)) {}
  RowMatrix load(const ManifestRecord& record) const override;

 private:
  std::filesystem::path root_;
  mutable std::mutex mutex_;
  mutable std::map<std::string, RowMatrix> cache_;
};

struct AccessRecord {
  std::string phase;
  std::string id;
  Split split;
};

class AuditLog {
 public:
  void record(AccessRecord access);
  std::vector<AccessRecord> entries() const;
  // Number of reads per (phase, split).
  std::map<std::pair<std::string, Split>, std::size_t> counts() const;
  void clear();

 private:
  mutable std::mutex mutex_;
  std::vector<AccessRecord> entries_;
};

// Instrumented view over another source. The split of every id is taken from
// the authoritative manifests handed to the constructor, not from the record
// being loaded, so a mislabelled record cannot smuggle a dev/test read past it.
class GuardedSource : public FeatureSource {
 public:
  GuardedSource(const FeatureSource& inner, std::map<std::string, Split> truth, std::string phase,
                std::set<Split> allowed, AuditLog* log);

  static std::map<std::string, Split> split_index(const std::vector<const Manifest*>& manifests);

  RowMatrix load(const ManifestRecord& record) const override;
  const std::string& phase() const { return phase_; }

 private:
  const FeatureSource& inner_;
  std::map<std::string, Split> truth_;
  std::string phase_;
  std::set<Split> allowed_;
  AuditLog* log_;
};

}  // namespace sapt
