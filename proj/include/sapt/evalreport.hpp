#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "sapt/checkpoint.hpp"
#include "sapt/corpus.hpp"
#include "sapt/feature_store.hpp"

namespace sapt {

struct EvalReport {
  std::string name;
  std::vector<std::string> groups;  // display order
  std::map<std::string, std::string> language_group;
  std::map<std::string, double> per_language_accuracy;  // percent
  std::map<std::string, double> per_group_accuracy;     // unweighted mean over member languages
  double macro_average = 0.0;                           // unweighted mean over languages
  std::map<std::string, int> n_test;
  std::map<std::string, std::map<std::string, int>> confusion;  // true label -> predicted -> count

  void validate() const;
};

struct ScoredPrediction {
  std::string label;
  std::string predicted;
  std::string group;
};

// Per-language accuracy = correct / total * 100; groups and macro average are
// unweighted means of per-language accuracies.
EvalReport report_from_predictions(std::string name, std::span<const ScoredPrediction> predictions);

// Recomputes group and macro aggregates after per_language_accuracy changed.
void recompute_aggregates(EvalReport& report);

// Table row where only group accuracies are known.
EvalReport report_from_group_accuracies(std::string name, const std::vector<std::pair<std::string, double>>& groups,
                                        double macro_average);

// Mean of several reports over the same languages (e.g. one per seed).
EvalReport average_reports(std::string name, std::span<const EvalReport> reports);

EvalReport evaluate(const Checkpoint& ckpt, const Manifest& target, Split split, const FeatureSource& source);

// (treatment - baseline) / baseline * 100 at full precision.
double relative_gain(double baseline_pct, double treatment_pct);
// Round half away from zero to one decimal; negative zero becomes 0.0.
double round_one_decimal(double value);
double relative_gain_rounded(double baseline_pct, double treatment_pct);

struct CurvePoint {
  std::string mode;
  int k = 0;
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation, 0 for a single run
  int runs = 0;
};

struct Comparison {
  std::string baseline;
  std::string treatment;
};

nlohmann::json to_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::json& j);

std::string table_csv(std::span<const EvalReport> reports, const std::optional<Comparison>& comparison);
std::string curve_csv(std::span<const CurvePoint> curve);
std::string report_json(std::span<const EvalReport> reports, const std::optional<Comparison>& comparison,
                        std::span<const CurvePoint> curve);

// Writes table.csv, fewshot_curve.csv and report.json into out_dir.
void emit_report(std::span<const EvalReport> reports, const std::optional<Comparison>& comparison,
                 std::span<const CurvePoint> curve, const std::filesystem::path& out_dir);

}  // namespace sapt
