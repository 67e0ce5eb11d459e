#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "sapt/fewshot.hpp"
#include "support.hpp"

using namespace sapt;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// 8 languages with 64 train utterances each, so the default K grid applies.
struct Grid {
  Benchmark bench;
  MemoryFeatureStore store;
  Checkpoint theta0;
  Checkpoint adapted;

  Grid() : bench(make()), store(bench.features), theta0(pretrained()), adapted(adapt()) {}
  Checkpoint pretrained() const {
    auto p = TrainConfig::defaults(StageKind::pretrain);
    p.steps = 3;
    p.seed = 1;
    p.batch_size = 2;
    return pretrain(bench.pretrain, store, testing::small_arch(8), p).checkpoint;
  }
  Checkpoint adapt() const {
    auto s = TrainConfig::defaults(StageKind::sapt);
    s.steps = 3;
    s.seed = 2;
    s.batch_size = 2;
    return sapt::sapt(theta0, bench.target, store, s).checkpoint;
  }
  static Benchmark make() {
    BenchmarkConfig cfg;
    cfg.pretrain_per_language = 4;
    cfg.target_train = 64;
    cfg.target_dev = 1;
    cfg.target_test = 2;
    cfg.frames_min = 16;
    cfg.frames_max = 20;
    return build_benchmark(cfg);
  }
  ProtocolOptions options(int steps = 1) const {
    ProtocolOptions o;
    o.finetune.steps = steps;
    o.finetune.batch_size = 2;
    o.finetune.seed = 5;
    return o;
  }
};

const Grid& grid() {
  static const Grid g;
  return g;
}

}  // namespace

TEST_CASE("K equal to the train count selects the whole train split") {
  const auto& g = grid();
  const auto plan = sample_fewshot(g.bench.target, 64, 3);
  std::set<std::string> all;
  for (const auto* r : g.bench.target.in_split(Split::train)) all.insert(r->id);
  const auto ids = plan.ids();
  CHECK(std::set<std::string>(ids.begin(), ids.end()) == all);
  CHECK(ids.size() == all.size());
}

TEST_CASE("plans are per-language, duplicate-free and train-only") {
  const auto& g = grid();
  std::set<std::string> held_out;
  for (Split s : {Split::dev, Split::test})
    for (const auto* r : g.bench.target.in_split(s)) held_out.insert(r->id);
  for (int k : {1, 2, 4, 8, 16, 32}) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const auto plan = sample_fewshot(g.bench.target, k, seed);
      CHECK(plan.selected.size() == 8);
      for (const auto& [lang, ids] : plan.selected) {
        CHECK(ids.size() == static_cast<std::size_t>(k));
        CHECK(std::set<std::string>(ids.begin(), ids.end()).size() == ids.size());
        for (const auto& id : ids) {
          CHECK(held_out.count(id) == 0);
          CHECK(g.bench.target.find(id).label == lang);
          CHECK(g.bench.target.find(id).split == Split::train);
        }
      }
      CHECK(plan == sample_fewshot(g.bench.target, k, seed));
    }
  }
}

TEST_CASE("different seeds draw different plans on the default benchmark") {
  const Benchmark b = build_benchmark(BenchmarkConfig{});
  CHECK(sample_fewshot(b.target, 4, 1).ids() != sample_fewshot(b.target, 4, 2).ids());
}

TEST_CASE("K beyond the train count names the language") {
  const auto& g = grid();
  try {
    sample_fewshot(g.bench.target, 65, 1);
    FAIL("expected a configuration error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("lang00") != std::string::npos);
  }
  CHECK_THROWS_AS(sample_fewshot(g.bench.target, 0, 1), ConfigError);
}

TEST_CASE("default grid has 70 cells with fair modes") {
  const auto& g = grid();
  // Same parameters under both stage tags: every cell must agree across modes,
  // which only holds if both modes see the same plan, data stream and head.
  Checkpoint twin = g.theta0;
  twin.stage = Stage::sapt;
  twin.source_digest = checkpoint_digest(g.theta0);
  ProtocolStats stats;
  const auto result = run_protocol(g.bench.target, g.store, g.store, g.theta0, twin, g.options(), &stats);
  CHECK(result.cells.size() == 70);
  CHECK(stats.cells_computed == 70);
  CHECK(stats.training_steps == 70);
  for (int k : {1, 2, 4, 8, 16, 32, 64}) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const auto* v = result.find(FineTuneMode::vanilla, k, seed);
      const auto* s = result.find(FineTuneMode::sapt, k, seed);
      REQUIRE(v);
      REQUIRE(s);
      CHECK(v->status == "ok");
      CHECK(v->accuracy_pct == s->accuracy_pct);
      CHECK(v->accuracy_pct >= 0.0);
      CHECK(v->accuracy_pct <= 100.0);
    }
  }
  CHECK(fewshot_finetune_seed(5, 4, 1) != fewshot_finetune_seed(5, 4, 2));
  CHECK(fewshot_finetune_seed(5, 4, 1) != fewshot_finetune_seed(5, 8, 1));
}

TEST_CASE("protocol rejects mismatched checkpoints before training") {
  const auto& g = grid();
  auto o = g.options();
  CHECK_THROWS_AS(run_protocol(g.bench.target, g.store, g.store, g.adapted, g.adapted, o), ConfigError);
  Checkpoint foreign = g.adapted;
  foreign.source_digest = "0000";
  CHECK_THROWS_AS(run_protocol(g.bench.target, g.store, g.store, g.theta0, foreign, o), ConfigError);
  ArchConfig wide = g.theta0.arch();
  wide.model_dim = 12;
  Checkpoint other{init_params(wide, 1), Stage::sapt, 0, 0, checkpoint_digest(g.theta0)};
  CHECK_THROWS_AS(run_protocol(g.bench.target, g.store, g.store, g.theta0, other, o), ConfigError);
  o.k_grid = {1, 65};
  ProtocolStats stats;
  CHECK_THROWS_AS(run_protocol(g.bench.target, g.store, g.store, g.theta0, g.adapted, o, &stats), ConfigError);
  CHECK(stats.training_steps == 0);
}

TEST_CASE("protocol resumes from its result file") {
  const auto& g = grid();
  const auto dir = testing::scratch_dir("protocol");
  auto o = g.options(2);
  o.k_grid = {1, 4};
  o.seeds = {1, 2, 3};
  o.workers = 2;
  o.result_file = dir / "protocol.csv";
  ProtocolStats first;
  const auto a = run_protocol(g.bench.target, g.store, g.store, g.theta0, g.adapted, o, &first);
  CHECK(first.cells_computed == 12);
  const std::string written = slurp(dir / "protocol.csv");
  CHECK(written == a.csv());
  CHECK(written.rfind("mode,K,seed,accuracy_pct,ckpt_digest,status\n", 0) == 0);

  ProtocolStats again;
  const auto b = run_protocol(g.bench.target, g.store, g.store, g.theta0, g.adapted, o, &again);
  CHECK(again.cells_computed == 0);
  CHECK(again.training_steps == 0);
  CHECK(b.digest() == a.digest());

  // Drop the last three rows, as if the run had been interrupted.
  std::string truncated = written;
  for (int i = 0; i < 3; ++i) truncated.erase(truncated.rfind('\n', truncated.size() - 2) + 1);
  {
    std::ofstream out(dir / "protocol.csv", std::ios::binary | std::ios::trunc);
    out << truncated;
  }
  ProtocolStats partial;
  const auto c = run_protocol(g.bench.target, g.store, g.store, g.theta0, g.adapted, o, &partial);
  CHECK(partial.cells_computed == 3);
  CHECK(c.digest() == a.digest());

  // Worker count does not change results.
  auto serial = o;
  serial.workers = 1;
  serial.result_file.reset();
  CHECK(run_protocol(g.bench.target, g.store, g.store, g.theta0, g.adapted, serial).digest() == a.digest());

  CHECK(parse_protocol_csv(a.csv()).digest() == a.digest());
  write_protocol_files(a, dir / "p.csv", dir / "summary.json");
  const auto summary = nlohmann::json::parse(slurp(dir / "summary.json"));
  CHECK(summary.at("cells") == 12);
  CHECK(summary.at("summary").size() == 4);
  std::filesystem::remove_all(dir);
}

TEST_CASE("curve summarizes cells by mode and K") {
  ProtocolResult r;
  r.cells = {{FineTuneMode::vanilla, 1, 1, 50.0, "a", "ok"},
             {FineTuneMode::vanilla, 1, 2, 70.0, "b", "ok"},
             {FineTuneMode::vanilla, 2, 1, 90.0, "c", "ok"}};
  const auto curve = r.curve();
  REQUIRE(curve.size() == 2);
  CHECK(curve[0].k == 1);
  CHECK(curve[0].mean == doctest::Approx(60.0));
  CHECK(curve[0].stddev == doctest::Approx(std::sqrt(200.0)));
  CHECK(curve[0].runs == 2);
  CHECK(curve[1].stddev == 0.0);
}
