// Acceptance gate. Each criterion prints one line:
//   criterion N: PASS|FAIL  <name>  <detail>
// and the process exits non-zero when any selected criterion fails.

#include <fmt/format.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "sapt/checkpoint.hpp"
#include "sapt/config.hpp"
#include "sapt/evalreport.hpp"
#include "sapt/experiment.hpp"
#include "sapt/pipeline.hpp"
#include "support.hpp"

using namespace sapt;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

struct Context {
  fs::path workdir;
  fs::path config;
  int workers = 1;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(field);
  return out;
}

// 1. The reference accuracy rows through relative_gain/emit_report reproduce the expected gain row.
Verdict metric_oracle(const Context& ctx) {
  const std::vector<std::string> groups{"WE", "EE", "CMN", "SSA", "SA", "SEA", "CJK"};
  const std::vector<double> xlsr{79.2, 93.7, 93.6, 67.2, 75.1, 81.5, 99.8};
  const std::vector<double> adapted{87.1, 93.7, 95.2, 94.2, 90.9, 95.1, 99.9};
  const std::vector<std::string> expected{"10.0", "0.0", "1.7", "40.1", "21.0", "16.7", "0.1", "11.2"};
  std::vector<std::pair<std::string, double>> a, b;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    a.emplace_back(groups[i], xlsr[i]);
    b.emplace_back(groups[i], adapted[i]);
  }
  const std::vector<EvalReport> rows{report_from_group_accuracies("XLSR", a, 84.3),
                                     report_from_group_accuracies("XLSR+SAPT", b, 93.7)};
  const fs::path out = ctx.workdir / "criterion1";
  fs::remove_all(out);
  emit_report(rows, Comparison{"XLSR", "XLSR+SAPT"}, {}, out);

  std::istringstream table(slurp(out / "table.csv"));
  std::string line, gains;
  while (std::getline(table, line))
    if (line.rfind("gain_pct,", 0) == 0) gains = line;
  const auto fields = split_csv(gains);
  if (fields.size() != expected.size() + 1) return {false, "no gain row in table.csv"};
  std::vector<std::string> mismatches;
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const std::string name = i < groups.size() ? groups[i] : "Avg";
    if (fields[i + 1] != expected[i]) mismatches.push_back(fmt::format("{} emitted {} expected {}", name, fields[i + 1], expected[i]));
  }
  if (mismatches.empty()) return {true, "gain row " + gains};
  std::string detail = "gain row " + gains + "; mismatches:";
  for (const auto& m : mismatches) detail += " [" + m + "]";
  return {false, detail};
}

// 2. Analytic gradients vs central finite differences, 20 configurations per objective.
Verdict gradient_correctness(const Context&) {
  double worst_ss = 0.0, worst_sup = 0.0;
  for (std::uint64_t c = 0; c < 20; ++c) {
    const auto gc = testing::random_gradient_case(1000 + c);
    const ModelParams p = init_params(gc.arch, 2000 + c);
    worst_ss = std::max(worst_ss,
                        testing::check_gradients(p, gc.batch, testing::gradient_objective(), 200, 3000 + c).max_rel_error);
    worst_sup =
        std::max(worst_sup, testing::check_gradients(p, gc.batch, SupervisedObjective{}, 200, 4000 + c).max_rel_error);
  }
  const bool pass = worst_ss <= 1e-4 && worst_sup <= 1e-4;
  return {pass, fmt::format("max rel error self-supervised {:.3e}, supervised {:.3e} (tolerance 1e-4)", worst_ss,
                            worst_sup)};
}

// 3. sapt(steps=0) + finetune equals vanilla finetune in parameters and test predictions.
Verdict zero_step_identity(const Context&) {
  const Benchmark b = build_benchmark(BenchmarkConfig{});
  MemoryFeatureStore store(b.features);
  ArchConfig arch;
  arch.num_classes = static_cast<int>(b.target.labels().size());
  std::vector<std::string> ids;
  for (const auto* r : b.target.in_split(Split::train)) ids.push_back(r->id);
  std::string detail;
  bool pass = true;
  for (std::uint64_t seed : {1, 2, 3}) {
    auto pcfg = TrainConfig::defaults(StageKind::pretrain);
    pcfg.steps = 200;
    pcfg.seed = derive_seed(seed, "pretrain");
    auto scfg = TrainConfig::defaults(StageKind::sapt);
    scfg.steps = 0;
    scfg.seed = derive_seed(seed, "sapt");
    auto fcfg = TrainConfig::defaults(StageKind::finetune);
    fcfg.seed = derive_seed(seed, "finetune");
    const Checkpoint t0 = pretrain(b.pretrain, store, arch, pcfg).checkpoint;
    const Checkpoint s0 = sapt::sapt(t0, b.target, store, scfg).checkpoint;
    const Checkpoint va = finetune(t0, b.target, ids, store, fcfg, b.target.labels()).checkpoint;
    const Checkpoint sa = finetune(s0, b.target, ids, store, fcfg, b.target.labels()).checkpoint;
    const bool same_params = params_digest(va.params) == params_digest(sa.params) && va.params == sa.params;
    int differing = 0, total = 0;
    for (const auto* r : b.target.in_split(Split::test)) {
      const auto x = store.load(*r);
      const auto p = predict(va, x), q = predict(sa, x);
      differing += p.class_index != q.class_index || p.probabilities != q.probabilities;
      ++total;
    }
    pass = pass && same_params && differing == 0;
    if (!detail.empty()) detail += "; ";
    detail += fmt::format("seed {}: params {}, {} of {} test predictions differ", seed,
                          same_params ? "bit-identical" : "DIFFER", differing, total);
  }
  return {pass, detail};
}

ExperimentConfig default_config(const Context& ctx) { return load_config(ctx.config); }

fs::path run_dir(const Context& ctx, const std::string& name) { return ctx.workdir / name; }

// Full run in `name`, resuming whatever is already there.
ExperimentOutcome experiment(const Context& ctx, const std::string& name, bool resume,
                             const AuditLog** audit = nullptr) {
  static std::map<std::string, std::unique_ptr<Experiment>> keep;
  ExperimentOptions opts;
  opts.workers = ctx.workers;
  opts.resume = resume;
  auto e = std::make_unique<Experiment>(default_config(ctx), run_dir(ctx, name), opts);
  ExperimentOutcome out = e->run();
  if (audit) *audit = &e->audit();
  keep[name] = std::move(e);
  return out;
}

// 4. Audit over a complete fresh experiment: no dev/test reads outside evaluation.
Verdict split_discipline(const Context& ctx) {
  const AuditLog* audit = nullptr;
  const auto outcome = experiment(ctx, "run-a", /*resume=*/false, &audit);
  std::map<std::string, std::map<std::string, std::size_t>> reads;
  std::size_t leaks = 0, evaluated = 0, trained = 0;
  for (const auto& [key, n] : audit->counts()) {
    reads[key.first][std::string(to_string(key.second))] += n;
    const bool training_phase = key.first != "evaluate";
    if (training_phase && key.second != Split::train) leaks += n;
    if (training_phase) trained += n;
    if (!training_phase) evaluated += n;
  }
  std::string detail = fmt::format("{} training steps; reads:", outcome.training_steps);
  for (const auto& [phase, m] : reads)
    for (const auto& [split, n] : m) detail += fmt::format(" {}/{}={}", phase, split, n);
  const bool fresh = outcome.training_steps > 0 && trained > 0 && evaluated > 0;
  return {fresh && leaks == 0, detail + fmt::format("; dev/test reads during training phases: {}", leaks)};
}

// 5. Permuting every label in D0 and D_T leaves theta0 and the SAPT checkpoint bit-identical.
Verdict label_blindness(const Context& ctx) {
  const ExperimentConfig cfg = default_config(ctx);
  const Benchmark b = build_benchmark(cfg.benchmark);
  MemoryFeatureStore store(b.features);
  auto permuted = [](Manifest m, std::uint64_t seed) {
    std::vector<std::string> labels;
    for (const auto& r : m.records) labels.push_back(r.label);
    std::mt19937_64 gen(seed);
    std::shuffle(labels.begin(), labels.end(), gen);
    std::size_t changed = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      changed += m.records[i].label != labels[i];
      m.records[i].label = labels[i];
    }
    return std::make_pair(m, changed);
  };
  const auto [d0p, c0] = permuted(b.pretrain, 1);
  const auto [dtp, ct] = permuted(b.target, 2);
  auto pcfg = cfg.pretrain;
  pcfg.steps = TrainConfig::defaults(StageKind::pretrain).steps;
  auto scfg = cfg.sapt;
  scfg.steps = TrainConfig::defaults(StageKind::sapt).steps;
  const Checkpoint t0 = pretrain(b.pretrain, store, cfg.arch, pcfg).checkpoint;
  const Checkpoint t0p = pretrain(d0p, store, cfg.arch, pcfg).checkpoint;
  const Checkpoint s = sapt::sapt(t0, b.target, store, scfg).checkpoint;
  const Checkpoint sp = sapt::sapt(t0p, dtp, store, scfg).checkpoint;
  const bool same_t0 = serialize_checkpoint(t0) == serialize_checkpoint(t0p);
  const bool same_s = serialize_checkpoint(s) == serialize_checkpoint(sp);
  return {same_t0 && same_s && c0 > 0 && ct > 0,
          fmt::format("{} of {} D0 labels and {} of {} D_T labels moved; theta0 {}, sapt {} ({} + {} steps)", c0,
                      b.pretrain.records.size(), ct, b.target.records.size(), same_t0 ? "identical" : "DIFFERS",
                      same_s ? "identical" : "DIFFERS", pcfg.steps, scfg.steps)};
}

// 6. Directional claims on the default benchmark with 5 seeds.
Verdict qualitative(const Context& ctx) {
  const auto o = experiment(ctx, "run-a", /*resume=*/true);
  if (!o.vanilla || !o.sapt) return {false, "missing full-data reports"};
  const auto& v = *o.vanilla;
  const auto& s = *o.sapt;
  const double unseen_gain = relative_gain(v.per_group_accuracy.at("unseen"), s.per_group_accuracy.at("unseen"));
  const bool a = s.macro_average >= v.macro_average && unseen_gain > 0.0;

  std::map<std::pair<std::string, int>, double> mean;
  for (const auto& p : o.protocol.curve()) mean[{p.mode, p.k}] = p.mean;
  const auto cfg = default_config(ctx);
  int wins = 0;
  std::string per_k;
  for (int k : cfg.k_grid) {
    const double mv = mean.at({"vanilla", k}), ms = mean.at({"sapt", k});
    wins += ms >= mv;
    per_k += fmt::format(" K={}:{:.1f}/{:.1f}", k, mv, ms);
  }
  const bool b = wins >= 5;
  const int kmin = *std::min_element(cfg.k_grid.begin(), cfg.k_grid.end());
  const int kmax = *std::max_element(cfg.k_grid.begin(), cfg.k_grid.end());
  const bool c = mean.at({"vanilla", kmax}) > mean.at({"vanilla", kmin}) &&
                 mean.at({"sapt", kmax}) > mean.at({"sapt", kmin});
  return {a && b && c,
          fmt::format("(a) {} macro vanilla {:.2f} sapt {:.2f}, unseen gain {:+.2f}%; (b) {} sapt>=vanilla at {} of {} K "
                      "(vanilla/sapt){}; (c) {} K={} vs K={}",
                      a ? "ok" : "FAIL", v.macro_average, s.macro_average, unseen_gain, b ? "ok" : "FAIL", wins,
                      cfg.k_grid.size(), per_k, c ? "ok" : "FAIL", kmax, kmin)};
}

// 7. Two full runs from the same config give byte-identical report.json.
Verdict reproducibility(const Context& ctx) {
  experiment(ctx, "run-a", /*resume=*/true);
  const auto second = experiment(ctx, "run-b", /*resume=*/false);
  const std::string a = slurp(run_dir(ctx, "run-a") / "report.json");
  const std::string b = slurp(run_dir(ctx, "run-b") / "report.json");
  const bool same = !a.empty() && a == b;
  return {same && second.training_steps > 0,
          fmt::format("report.json {} bytes vs {} bytes, {}; second run trained {} steps", a.size(), b.size(),
                      same ? "byte-identical" : "DIFFERENT", second.training_steps)};
}

// 8. Monte-Carlo mask fraction vs a brute-force simulation of the span process.
Verdict masking_statistics(const Context&) {
  const int length = 50, draws = 10000;
  const double p = 0.15;
  const int span = 3;
  double measured = 0.0;
  for (int s = 0; s < draws; ++s)
    measured += static_cast<double>(sample_mask(length, {p, span, static_cast<std::uint64_t>(s)}).size()) / length;
  measured /= draws;

  std::mt19937_64 gen(2024);
  std::bernoulli_distribution start(p);
  std::uniform_int_distribution<int> forced(0, length - 1);
  double simulated = 0.0;
  for (int d = 0; d < draws; ++d) {
    std::vector<char> covered(length, 0);
    bool any = false;
    for (int t = 0; t < length; ++t) {
      if (start(gen)) {
        any = true;
        for (int k = t; k < std::min(length, t + span); ++k) covered[k] = 1;
      }
    }
    if (!any) {
      const int t = forced(gen);
      for (int k = t; k < std::min(length, t + span); ++k) covered[k] = 1;
    }
    simulated += static_cast<double>(std::count(covered.begin(), covered.end(), 1)) / length;
  }
  simulated /= draws;
  const double diff = std::abs(measured - simulated);
  return {diff <= 0.03, fmt::format("measured {:.4f}, simulated {:.4f}, |diff| {:.4f} (tolerance 0.03)", measured,
                                    simulated, diff)};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Verdict(const Context&)> check;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> selected;
  Context ctx;
  std::string workdir = SAPT_ACCEPTANCE_DIR;
  std::string config = std::string(SAPT_SOURCE_DIR) + "/configs/default.json";
  ctx.workers = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  app.add_option("--criterion", selected, "Criterion number (repeatable; default all)");
  app.add_option("--workdir", workdir, "Directory for experiment runs");
  app.add_option("--config", config, "Experiment config");
  app.add_option("--workers", ctx.workers, "Worker threads");
  CLI11_PARSE(app, argc, argv);
  ctx.workdir = workdir;
  ctx.config = config;
  fs::create_directories(ctx.workdir);

  const std::vector<Criterion> all{
      {1, "metric oracle", metric_oracle},
      {2, "gradient correctness", gradient_correctness},
      {3, "zero-step SAPT identity", zero_step_identity},
      {4, "split discipline", split_discipline},
      {5, "label blindness", label_blindness},
      {6, "qualitative reproduction", qualitative},
      {7, "reproducibility", reproducibility},
      {8, "masking statistics", masking_statistics},
  };
  bool ok = true;
  for (const auto& c : all) {
    if (!selected.empty() && std::find(selected.begin(), selected.end(), c.id) == selected.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = c.check(ctx);
    } catch (const std::exception& e) {
      v = {false, fmt::format("error: {}", e.what())};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << fmt::format("criterion {}: {}  {}  {}  [{:.1f}s]\n", c.id, v.pass ? "PASS" : "FAIL", c.name, v.detail,
                             secs)
              << std::flush;
    ok = ok && v.pass;
  }
  return ok ? 0 : 1;
}
