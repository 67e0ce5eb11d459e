#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <set>

#include "doctest.h"
#include "sapt/objective.hpp"
#include "sapt/optimizer.hpp"
#include "support.hpp"

using namespace sapt;

namespace {

// Coverage of the span process simulated directly from its definition,
// without the forcing rule (handled separately below).
double simulated_fraction(int length, double p, int span, int draws, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> start(0, length - 1);
  double total = 0.0;
  for (int d = 0; d < draws; ++d) {
    std::vector<bool> hit(length, false);
    bool any = false;
    for (int t = 0; t < length; ++t) {
      if (u(gen) < p) {
        for (int k = t; k < std::min(t + span, length); ++k) hit[k] = true;
        any = true;
      }
    }
    if (!any && p > 0.0) {
      const int s = start(gen);
      for (int k = s; k < std::min(s + span, length); ++k) hit[k] = true;
    }
    total += static_cast<double>(std::count(hit.begin(), hit.end(), true)) / length;
  }
  return total / draws;
}

}  // namespace

TEST_CASE("mask edge cases") {
  CHECK(sample_mask(10, {0.0, 3, 1}).empty());
  std::vector<int> all(10);
  std::iota(all.begin(), all.end(), 0);
  CHECK(sample_mask(10, {1.0, 1, 1}) == all);
  // Forced span when nothing was drawn.
  for (std::uint64_t s = 0; s < 50; ++s) CHECK(!sample_mask(3, {1e-9, 2, s}).empty());
  CHECK(sample_mask(1, {0.5, 4, 3}) == std::vector<int>{0});
  CHECK_THROWS(MaskSpec({1.5, 3, 0}).validate());
  CHECK_THROWS(MaskSpec({0.1, 0, 0}).validate());
}

TEST_CASE("masks are deterministic, sorted and made of clipped spans") {
  for (std::uint64_t s = 0; s < 200; ++s) {
    const MaskSpec spec{0.15, 3, s};
    const auto m = sample_mask(25, spec);
    CHECK(m == sample_mask(25, spec));
    CHECK(std::is_sorted(m.begin(), m.end()));
    CHECK(std::adjacent_find(m.begin(), m.end()) == m.end());
    for (int t : m) {
      CHECK(t >= 0);
      CHECK(t < 25);
    }
  }
}

TEST_CASE("mask fraction matches a brute-force simulation") {
  const int length = 50;
  const MaskSpec base{0.15, 3, 0};
  double total = 0.0;
  for (std::uint64_t s = 0; s < 10000; ++s) {
    MaskSpec spec = base;
    spec.seed = s;
    total += static_cast<double>(sample_mask(length, spec).size()) / length;
  }
  const double measured = total / 10000.0;
  const double simulated = simulated_fraction(length, 0.15, 3, 10000, 7);
  CHECK(std::abs(measured - simulated) <= 0.03);
  // Far from the edges coverage is 1 - (1 - p)^M.
  CHECK(std::abs(simulated - (1.0 - std::pow(0.85, 3))) < 0.03);
}

TEST_CASE("distractors come from the right pool") {
  const std::vector<int> mask{2, 3, 4, 9, 10, 11, 15};
  const auto d = sample_distractors(20, mask, 5, 42);
  REQUIRE(d.size() == mask.size());
  const std::set<int> masked(mask.begin(), mask.end());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    CHECK(d[i].size() == 5);
    std::set<int> uniq(d[i].begin(), d[i].end());
    CHECK(uniq.size() == 5);
    CHECK(!uniq.count(mask[i]));
    for (int j : d[i]) CHECK(masked.count(j));
  }
  // Few masked positions: fall back to every other position, K clamped.
  const std::vector<int> few{1, 2};
  for (const auto& row : sample_distractors(4, few, 5, 1)) {
    CHECK(row.size() == 3);
  }
  CHECK(sample_distractors(20, mask, 5, 42) == d);
}

TEST_CASE("uniform similarities give ln(K+1) per masked position") {
  const RowMatrix same = RowMatrix::Constant(12, 4, 0.3);
  const std::vector<int> mask{1, 5, 6};
  const auto r = contrastive_on_projections(same, same, mask, {5, 0.1}, 3);
  CHECK(r.loss == doctest::Approx(3.0 * std::log(6.0)).epsilon(1e-12));
}

TEST_CASE("contrastive closed form at cosines +1 and -1") {
  // Position 0 is masked; positive cosine 1 and every distractor cosine -1.
  RowMatrix ctx = RowMatrix::Zero(6, 2);
  RowMatrix tgt = RowMatrix::Zero(6, 2);
  ctx.row(0) << 1.0, 0.0;
  tgt.row(0) << 2.0, 0.0;
  for (int t = 1; t < 6; ++t) {
    ctx.row(t) << 0.0, 1.0;
    tgt.row(t) << -1.0, 0.0;
  }
  const std::vector<int> mask{0};
  const auto r = contrastive_on_projections(ctx, tgt, mask, {5, 0.1}, 9);
  CHECK(std::abs(r.loss - 1.03057680590883613e-8) < 1e-9);
}

TEST_CASE("contrastive loss is non-negative and scale invariant") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const RowMatrix c = testing::random_features(15, 4, s);
    const RowMatrix z = testing::random_features(15, 4, s + 100);
    const auto mask = sample_mask(15, {0.3, 2, s});
    const ContrastiveConfig cfg{4, 0.2};
    const double base = contrastive_on_projections(c, z, mask, cfg, s).loss;
    CHECK(base >= 0.0);
    const double scaled = contrastive_on_projections(3.7 * c, 3.7 * z, mask, cfg, s).loss;
    CHECK(std::abs(base - scaled) < 1e-9);

    Projection tp{testing::random_features(4, 3, s + 1), testing::random_features(1, 3, s + 2)};
    Projection cp{testing::random_features(4, 3, s + 3), testing::random_features(1, 3, s + 4)};
    const double full = contrastive_loss(c, z, mask, tp, cp, cfg, s);
    Projection tp2{3.7 * tp.weight, 3.7 * tp.bias};
    Projection cp2{3.7 * cp.weight, 3.7 * cp.bias};
    CHECK(std::abs(full - contrastive_loss(c, z, mask, tp2, cp2, cfg, s)) < 1e-9);
    CHECK(full >= 0.0);
  }
  const std::vector<int> none;
  CHECK_THROWS_AS(contrastive_on_projections(RowMatrix::Ones(4, 2), RowMatrix::Ones(4, 2), none, {5, 0.1}, 0),
                  ContractViolation);
}

TEST_CASE("cross entropy values") {
  CHECK(cross_entropy(RowVector::Zero(8), 3) == doctest::Approx(std::log(8.0)).epsilon(1e-12));
  RowVector big = RowVector::Zero(4);
  big(2) = 1e6;
  const double tiny = cross_entropy(big, 2);
  CHECK(std::isfinite(tiny));
  CHECK(tiny <= 1e-6);
  CHECK(std::isfinite(cross_entropy(big, 0)));
  RowVector l(3);
  l << 2.0, 1.0, 0.0;
  CHECK(std::abs(cross_entropy(l, 0) - 0.407605964444380304) < 1e-12);
  CHECK_THROWS_AS(cross_entropy(l, 3), ContractViolation);
  CHECK_THROWS_AS(cross_entropy(l, -1), ContractViolation);
}

TEST_CASE("cross entropy is shift invariant with a consistent gradient") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const RowVector l = testing::random_features(1, 6, s).row(0) * 4.0;
    const int y = static_cast<int>(s % 6);
    const RowVector shifted = (l.array() + 123.456).matrix();
    CHECK(std::abs(cross_entropy(l, y) - cross_entropy(shifted, y)) < 1e-9);
    const auto r = cross_entropy_with_grad(l, y);
    RowVector expected = softmax(l);
    expected(y) -= 1.0;
    CHECK((r.grad - expected).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(softmax(l).sum() == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("adam fixed point, closed-form step and determinism") {
  Vector w = Vector::LinSpaced(5, -1.0, 1.0);
  const Vector w0 = w;
  AdamState st = AdamState::zeros(5);
  adam_step(w, Vector::Zero(5), st, {});
  CHECK(w == w0);
  CHECK(st.step == 1);

  Vector one(1);
  one << 1.0;
  Vector g(1);
  g << 0.5;
  AdamState s1 = AdamState::zeros(1);
  adam_step(one, g, s1, {0.1, 0.9, 0.999, 1e-8});
  CHECK(std::abs(one(0) - 0.90000000199999996) < 1e-12);

  auto run = [] {
    Vector p = Vector::LinSpaced(4, 0.0, 1.0);
    AdamState s = AdamState::zeros(4);
    for (int i = 0; i < 50; ++i) {
      Vector grad = (p.array() * p.array() - 0.3 + 0.01 * i).matrix();
      adam_step(p, grad, s, {});
    }
    return p;
  };
  CHECK(run() == run());

  Vector bad = Vector::Zero(2);
  bad(1) = std::numeric_limits<double>::infinity();
  Vector p = Vector::Ones(2);
  AdamState s2 = AdamState::zeros(2);
  CHECK_THROWS_AS(adam_step(p, bad, s2, {}), NumericalFailure);
  CHECK(p == Vector::Ones(2));
  CHECK(s2.step == 0);
  CHECK_THROWS(AdamHyper({0.0, 0.9, 0.999, 1e-8}).validate());
}
