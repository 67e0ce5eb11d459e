#include "sapt/evalreport.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "sapt/binary_io.hpp"
#include "sapt/pipeline.hpp"

namespace sapt {

using nlohmann::json;

void EvalReport::validate() const {
  auto in_range = [](double v) { return std::isfinite(v) && v >= 0.0 && v <= 100.0; };
  for (const auto& [lang, acc] : per_language_accuracy) {
    if (!in_range(acc)) throw Error(fmt::format("report {}: accuracy of {} out of [0, 100]", name, lang));
  }
  for (const auto& [group, acc] : per_group_accuracy) {
    if (!in_range(acc)) throw Error(fmt::format("report {}: accuracy of group {} out of [0, 100]", name, group));
  }
  if (!in_range(macro_average)) throw Error(fmt::format("report {}: macro average out of [0, 100]", name));
}

void recompute_aggregates(EvalReport& report) {
  std::map<std::string, std::pair<double, int>> sums;
  double total = 0.0;
  for (const auto& [lang, acc] : report.per_language_accuracy) {
    auto& s = sums[report.language_group.at(lang)];
    s.first += acc;
    s.second += 1;
    total += acc;
  }
  report.per_group_accuracy.clear();
  for (const auto& [group, s] : sums) report.per_group_accuracy[group] = s.first / s.second;
  report.macro_average =
      report.per_language_accuracy.empty() ? 0.0 : total / static_cast<double>(report.per_language_accuracy.size());
  if (report.groups.empty()) {
    for (const auto& [group, s] : sums) report.groups.push_back(group);
  }
}

EvalReport report_from_predictions(std::string name, std::span<const ScoredPrediction> predictions) {
  if (predictions.empty()) throw ConfigError(fmt::format("report {}: no predictions to score", name));
  EvalReport report;
  report.name = std::move(name);
  std::map<std::string, int> correct;
  for (const auto& p : predictions) {
    auto [it, inserted] = report.language_group.emplace(p.label, p.group);
    if (!inserted && it->second != p.group) {
      throw ConfigError(fmt::format("language {} listed under two groups", p.label));
    }
    report.n_test[p.label] += 1;
    report.confusion[p.label][p.predicted] += 1;
    if (p.predicted == p.label) correct[p.label] += 1;
  }
  for (const auto& [lang, n] : report.n_test) {
    report.per_language_accuracy[lang] = 100.0 * correct[lang] / n;
  }
  recompute_aggregates(report);
  report.validate();
  return report;
}

EvalReport report_from_group_accuracies(std::string name, const std::vector<std::pair<std::string, double>>& groups,
                                        double macro_average) {
  EvalReport report;
  report.name = std::move(name);
  for (const auto& [group, acc] : groups) {
    report.groups.push_back(group);
    report.per_group_accuracy[group] = acc;
  }
  report.macro_average = macro_average;
  report.validate();
  return report;
}

EvalReport average_reports(std::string name, std::span<const EvalReport> reports) {
  if (reports.empty()) throw ConfigError("average_reports: no reports");
  EvalReport out;
  out.name = std::move(name);
  out.groups = reports.front().groups;
  out.language_group = reports.front().language_group;
  for (const auto& r : reports) {
    if (r.language_group != out.language_group) throw ConfigError("average_reports: reports cover different languages");
    for (const auto& [lang, acc] : r.per_language_accuracy) out.per_language_accuracy[lang] += acc;
    for (const auto& [lang, n] : r.n_test) out.n_test[lang] += n;
    for (const auto& [lang, row] : r.confusion) {
      for (const auto& [pred, n] : row) out.confusion[lang][pred] += n;
    }
  }
  for (auto& [lang, acc] : out.per_language_accuracy) acc /= static_cast<double>(reports.size());
  recompute_aggregates(out);
  out.validate();
  return out;
}

EvalReport evaluate(const Checkpoint& ckpt, const Manifest& target, Split split, const FeatureSource& source) {
  if (ckpt.stage != Stage::finetuned) {
    throw DependencyError(
        fmt::format("evaluate: checkpoint stage is {}, a finetuned checkpoint is required", to_string(ckpt.stage)));
  }
  if (split == Split::train) throw ConfigError("evaluate: split must be dev or test");
  const auto records = target.in_split(split);
  if (records.empty()) throw ConfigError(fmt::format("evaluate: the {} split is empty", to_string(split)));
  std::vector<ScoredPrediction> scored;
  scored.reserve(records.size());
  for (const auto* r : records) {
    const Prediction p = predict(ckpt, source.load(*r));
    scored.push_back({r->label, p.label, r->group});
  }
  return report_from_predictions(std::string(to_string(split)), scored);
}

double relative_gain(double baseline_pct, double treatment_pct) {
  if (!(baseline_pct > 0.0)) {
    throw UndefinedGain(fmt::format("relative gain is undefined for baseline {}", baseline_pct));
  }
  return (treatment_pct - baseline_pct) / baseline_pct * 100.0;
}

double round_one_decimal(double value) {
  const double rounded = std::round(value * 10.0) / 10.0;
  return rounded == 0.0 ? 0.0 : rounded;
}

double relative_gain_rounded(double baseline_pct, double treatment_pct) {
  return round_one_decimal(relative_gain(baseline_pct, treatment_pct));
}

namespace {

std::string pct(double v) { return fmt::format("{:.1f}", round_one_decimal(v)); }

const EvalReport& find_report(std::span<const EvalReport> reports, const std::string& name) {
  for (const auto& r : reports) {
    if (r.name == name) return r;
  }
  throw ConfigError(fmt::format("no report named '{}'", name));
}

}  // namespace

json to_json(const EvalReport& r) {
  json groups = json::array();
  for (const auto& g : r.groups) {
    groups.push_back({{"group", g}, {"accuracy_pct", r.per_group_accuracy.count(g) ? r.per_group_accuracy.at(g) : 0.0}});
  }
  json languages = json::array();
  for (const auto& [lang, acc] : r.per_language_accuracy) {
    languages.push_back({{"language", lang},
                         {"group", r.language_group.at(lang)},
                         {"accuracy_pct", acc},
                         {"n_test", r.n_test.count(lang) ? r.n_test.at(lang) : 0},
                         {"confusion", r.confusion.count(lang) ? json(r.confusion.at(lang)) : json::object()}});
  }
  return {{"name", r.name}, {"groups", groups}, {"languages", languages}, {"macro_average_pct", r.macro_average}};
}

EvalReport report_from_json(const json& j) {
  try {
    EvalReport r;
    r.name = j.at("name").get<std::string>();
    for (const auto& g : j.at("groups")) {
      r.groups.push_back(g.at("group").get<std::string>());
      r.per_group_accuracy[r.groups.back()] = g.at("accuracy_pct").get<double>();
    }
    for (const auto& l : j.at("languages")) {
      const auto lang = l.at("language").get<std::string>();
      r.language_group[lang] = l.at("group").get<std::string>();
      r.per_language_accuracy[lang] = l.at("accuracy_pct").get<double>();
      r.n_test[lang] = l.at("n_test").get<int>();
      r.confusion[lang] = l.at("confusion").get<std::map<std::string, int>>();
    }
    r.macro_average = j.at("macro_average_pct").get<double>();
    r.validate();
    return r;
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("report: {}", e.what()));
  }
}

namespace {

// A zero-accuracy baseline cell has no relative gain; the reports say so instead of aborting.
std::optional<double> gain_or_none(double baseline_pct, double treatment_pct) {
  try {
    return relative_gain(baseline_pct, treatment_pct);
  } catch (const UndefinedGain&) {
    return std::nullopt;
  }
}

std::string gain_cell(std::optional<double> gain) { return gain ? pct(*gain) : "undefined"; }

json gain_entry(const std::string& group, std::optional<double> gain) {
  if (!gain) return {{"group", group}, {"gain_pct", nullptr}, {"gain_pct_rounded", nullptr}};
  return {{"group", group}, {"gain_pct", *gain}, {"gain_pct_rounded", round_one_decimal(*gain)}};
}

}  // namespace

std::string table_csv(std::span<const EvalReport> reports, const std::optional<Comparison>& comparison) {
  if (reports.empty()) throw ConfigError("table: at least one report is required");
  const auto& groups = reports.front().groups;
  std::string out = "model";
  for (const auto& g : groups) out += "," + g;
  out += ",Avg\n";
  for (const auto& r : reports) {
    out += r.name;
    for (const auto& g : groups) out += "," + pct(r.per_group_accuracy.at(g));
    out += "," + pct(r.macro_average) + "\n";
  }
  if (comparison) {
    const auto& base = find_report(reports, comparison->baseline);
    const auto& treat = find_report(reports, comparison->treatment);
    out += "gain_pct";
    for (const auto& g : groups) {
      out += "," + gain_cell(gain_or_none(base.per_group_accuracy.at(g), treat.per_group_accuracy.at(g)));
    }
    out += "," + gain_cell(gain_or_none(base.macro_average, treat.macro_average)) + "\n";
  }
  return out;
}

std::string curve_csv(std::span<const CurvePoint> curve) {
  std::string out = "mode,K,mean_accuracy_pct,std_accuracy_pct,runs\n";
  for (const auto& p : curve) out += fmt::format("{},{},{},{},{}\n", p.mode, p.k, pct(p.mean), pct(p.stddev), p.runs);
  return out;
}

std::string report_json(std::span<const EvalReport> reports, const std::optional<Comparison>& comparison,
                        std::span<const CurvePoint> curve) {
  json j;
  j["reports"] = json::array();
  for (const auto& r : reports) j["reports"].push_back(to_json(r));
  if (comparison) {
    const auto& base = find_report(reports, comparison->baseline);
    const auto& treat = find_report(reports, comparison->treatment);
    json gains = json::array();
    for (const auto& g : base.groups) {
      gains.push_back(gain_entry(g, gain_or_none(base.per_group_accuracy.at(g), treat.per_group_accuracy.at(g))));
    }
    gains.push_back(gain_entry("Avg", gain_or_none(base.macro_average, treat.macro_average)));
    j["comparison"] = {{"baseline", comparison->baseline}, {"treatment", comparison->treatment}, {"gains", gains}};
  }
  j["fewshot_curve"] = json::array();
  for (const auto& p : curve) {
    j["fewshot_curve"].push_back(
        {{"mode", p.mode}, {"K", p.k}, {"mean_accuracy_pct", p.mean}, {"std_accuracy_pct", p.stddev}, {"runs", p.runs}});
  }
  return j.dump(2) + "\n";
}

void emit_report(std::span<const EvalReport> reports, const std::optional<Comparison>& comparison,
                 std::span<const CurvePoint> curve, const std::filesystem::path& out_dir) {
  if (reports.empty()) throw ConfigError("emit_report: at least one report is required");
  const std::string table = table_csv(reports, comparison);
  const std::string curve_text = curve_csv(curve);
  const std::string bundle = report_json(reports, comparison, curve);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError(fmt::format("cannot create {}: {}", out_dir.string(), ec.message()));
  binary::write_file_atomic((out_dir / "table.csv").string(), table);
  binary::write_file_atomic((out_dir / "fewshot_curve.csv").string(), curve_text);
  binary::write_file_atomic((out_dir / "report.json").string(), bundle);
}

}  // namespace sapt
