#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "facetsteer/error.hpp"
#include "facetsteer/steering.hpp"

using namespace facetsteer;

namespace {

Eigen::VectorXd random_vector(std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  return Eigen::VectorXd::NullaryExpr(static_cast<Eigen::Index>(d), [&] { return n(rng); });
}

InjectionEntry entry(int layer, Eigen::VectorXd v, double alpha, std::optional<FacetId> facet = std::nullopt) {
  InjectionEntry e;
  e.layer = layer;
  e.vector = std::move(v);
  e.alpha = alpha;
  e.facet = facet;
  return e;
}

Metrics logit_metrics(const ToyModel& m, const InjectionPlan& plan, const Eigen::VectorXd& h0) {
  const ToyRun run = run_toy(m, h0, plan);
  return {{"logit0", run.logits[0]}, {"norm", run.final_hidden.norm()}};
}

}  // namespace

TEST_CASE("inject arithmetic") {
  const Eigen::VectorXd h = random_vector(8, 1);
  CHECK(inject(h, entry(0, random_vector(8, 2), 0.0)) == h);
  CHECK(inject(Eigen::Vector2d(1, 0), entry(0, Eigen::Vector2d(0, 2), 0.5)) == Eigen::Vector2d(1, 1));
  CHECK_THROWS_AS(inject(h, entry(0, random_vector(7, 2), 1.0)), DimensionError);
}

TEST_CASE("the shift along the injected direction is alpha * |v|") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Eigen::VectorXd h = random_vector(32, seed), v = random_vector(32, seed + 50);
    for (double alpha : {-2.0, 0.5, 3.0}) {
      const double proj = (inject(h, entry(0, v, alpha)) - h).dot(v.normalized());
      CHECK(std::abs(proj - alpha * v.norm()) <= 1e-9 * std::abs(alpha * v.norm()));
    }
  }
}

TEST_CASE("inject is linear in alpha and commutes across vectors") {
  const Eigen::VectorXd h = random_vector(16, 3), v = random_vector(16, 4), w = random_vector(16, 5);
  for (auto [a1, a2] : {std::pair{0.3, 0.7}, std::pair{-1.5, 2.25}, std::pair{4.0, 0.0}}) {
    const Eigen::VectorXd once = inject(h, entry(0, v, a1 + a2));
    const Eigen::VectorXd twice = inject(inject(h, entry(0, v, a1)), entry(0, v, a2));
    CHECK((once - twice).lpNorm<Eigen::Infinity>() <= 1e-12);
  }
  const Eigen::VectorXd vw = inject(inject(h, entry(0, v, 0.5)), entry(0, w, 1.0));
  const Eigen::VectorXd wv = inject(inject(h, entry(0, w, 1.0)), entry(0, v, 0.5));
  CHECK((vw - wv).lpNorm<Eigen::Infinity>() <= 1e-12);

  const ToyModel m = make_toy_model(16, 4, 3, 7);
  InjectionPlan ab, ba;
  ab.entries = {entry(1, v, 0.5, parse_facet("Ideas")), entry(1, w, 1.0, parse_facet("Trust"))};
  ba.entries = {ab.entries[1], ab.entries[0]};
  CHECK((run_toy(m, h, ab).final_hidden - run_toy(m, h, ba).final_hidden).lpNorm<Eigen::Infinity>() <= 1e-12);
}

TEST_CASE("toy forward pass") {
  const ToyModel m = make_toy_model(16, 4, 3, 7);
  const Eigen::VectorXd h0 = random_vector(16, 8);
  CHECK(m.default_layer() == 2);

  SUBCASE("reproducible") {
    const ToyModel again = make_toy_model(16, 4, 3, 7);
    CHECK(run_toy(again, h0).final_hidden == run_toy(m, h0).final_hidden);
    CHECK(run_toy(m, h0).trace.size() == 4);
  }
  SUBCASE("empty plan equals an alpha = 0 plan") {
    const InjectionPlan zero = single_vector_plan(SteerMode::Caa, random_vector(16, 9), 0.0, 0, 4);
    const ToyRun a = run_toy(m, h0), b = run_toy(m, h0, zero);
    REQUIRE(a.trace.size() == b.trace.size());
    for (std::size_t l = 0; l < a.trace.size(); ++l) CHECK(a.trace[l] == b.trace[l]);
    CHECK(a.logits == b.logits);
  }
  SUBCASE("an injection at the last layer changes only the last state") {
    InjectionPlan plan;
    plan.entries = {entry(3, random_vector(16, 10), 1.0)};
    const ToyRun a = run_toy(m, h0), b = run_toy(m, h0, plan);
    for (int l = 0; l < 3; ++l) CHECK(a.trace[static_cast<std::size_t>(l)] == b.trace[static_cast<std::size_t>(l)]);
    CHECK(a.trace[3] != b.trace[3]);
    CHECK(a.logits != b.logits);
  }
  SUBCASE("plan validation") {
    InjectionPlan plan;
    plan.entries = {entry(4, random_vector(16, 1), 1.0)};
    CHECK_THROWS_WITH(run_toy(m, h0, plan), doctest::Contains("layer 4"));
    plan.entries = {entry(-1, random_vector(16, 1), 1.0)};
    CHECK_THROWS(run_toy(m, h0, plan));
    plan.entries = {entry(1, random_vector(15, 1), 1.0)};
    CHECK_THROWS_AS(run_toy(m, h0, plan), DimensionError);
    plan.entries = {entry(1, random_vector(16, 1), 1.0, parse_facet("Ideas")),
                    entry(1, random_vector(16, 2), 1.0, parse_facet("Ideas"))};
    CHECK_THROWS(run_toy(m, h0, plan));
    plan.entries = {entry(1, random_vector(16, 1), NAN)};
    CHECK_THROWS(run_toy(m, h0, plan));
  }
}

TEST_CASE("plans by mode") {
  const Eigen::VectorXd v = random_vector(8, 1);
  const InjectionPlan sae = single_vector_plan(SteerMode::Sae, v, 2.0, 1, 4);
  REQUIRE(sae.entries.size() == 1);
  CHECK(sae.entries[0].layer == 1);
  const InjectionPlan caa = single_vector_plan(SteerMode::Caa, v, 2.0, 1, 4);
  REQUIRE(caa.entries.size() == 4);
  for (int l = 0; l < 4; ++l) {
    CHECK(caa.entries[static_cast<std::size_t>(l)].layer == l);
    CHECK(caa.entries[static_cast<std::size_t>(l)].alpha == 2.0);
  }
  CHECK(scale_plan(caa, 0.5).entries[2].alpha == 1.0);
  CHECK(parse_steer_mode("caa") == SteerMode::Caa);
  CHECK(steer_mode_name(SteerMode::Sae) == "sae");
  CHECK_THROWS(parse_steer_mode("both"));
}

TEST_CASE("aligned toy: the aligned logit is non-decreasing in alpha") {
  std::vector<Eigen::VectorXd> dirs;
  for (std::uint64_t k = 0; k < 3; ++k) dirs.push_back(random_vector(16, 20 + k).normalized());
  const ToyModel m = make_aligned_toy(dirs, 4, 5);
  const Eigen::VectorXd h0 = random_vector(16, 30);
  for (SteerMode mode : {SteerMode::Sae, SteerMode::Caa}) {
    const InjectionPlan tmpl = single_vector_plan(mode, dirs[0], 1.0, m.default_layer(), m.n_layers());
    const auto rows = alpha_sweep(
        m, [&](const ToyModel& model, const InjectionPlan& plan) { return logit_metrics(model, plan, h0); },
        {0.0, 0.5, 1.0, 2.0}, tmpl);
    REQUIRE(rows.size() == 4);
    for (std::size_t i = 1; i < rows.size(); ++i) CHECK(rows[i].metrics[0].second >= rows[i - 1].metrics[0].second);
    CHECK(rows[3].metrics[0].second > rows[0].metrics[0].second);
  }
}

TEST_CASE("sweep harness") {
  const ToyModel m = make_toy_model(8, 2, 2, 3);
  const Eigen::VectorXd h0 = random_vector(8, 4);
  const InjectionPlan tmpl = single_vector_plan(SteerMode::Sae, random_vector(8, 5), 1.0, 1, 2);
  const SweepEval eval = [&](const ToyModel& model, const InjectionPlan& plan) { return logit_metrics(model, plan, h0); };

  SUBCASE("alpha 0 reproduces the base metrics") {
    const auto rows = alpha_sweep(m, eval, {0.0}, tmpl);
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].metrics == logit_metrics(m, {}, h0));
  }
  SUBCASE("CSV schema") {
    const std::string csv = sweep_to_csv(alpha_sweep(m, eval, {0.0, 0.5, 1.0, 2.0}, tmpl));
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    CHECK(line == "alpha,logit0,norm");
    std::size_t rows = 0;
    while (std::getline(in, line)) {
      ++rows;
      CHECK(std::count(line.begin(), line.end(), ',') == 2);
    }
    CHECK(rows == 4);
    CHECK(csv.find("\n0.5,") != std::string::npos);
  }
  SUBCASE("failures name the alpha") {
    const SweepEval failing = [&](const ToyModel& model, const InjectionPlan& plan) -> Metrics {
      if (!plan.entries.empty() && plan.entries[0].alpha > 1.5) throw NumericError("boom");
      return logit_metrics(model, plan, h0);
    };
    CHECK_THROWS_WITH(alpha_sweep(m, failing, {0.0, 2.0}, tmpl), doctest::Contains("alpha=2"));
  }
  SUBCASE("out-of-range layer") {
    const InjectionPlan bad = single_vector_plan(SteerMode::Sae, random_vector(8, 5), 1.0, 5, 2);
    CHECK_THROWS(alpha_sweep(m, eval, {1.0}, bad));
  }
}
