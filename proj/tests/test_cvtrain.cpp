#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "facetsteer/activations.hpp"
#include "facetsteer/corpus.hpp"
#include "facetsteer/cvtrain.hpp"
#include "facetsteer/error.hpp"
#include "facetsteer/sae.hpp"
#include "test_util.hpp"

using namespace facetsteer;

namespace {

constexpr Polarity P = Polarity::Positive;
constexpr Polarity N = Polarity::Negative;

Centroids centroids_of(Eigen::VectorXd pos, Eigen::VectorXd neg) {
  Centroids c;
  c.mu_pos = std::move(pos);
  c.mu_neg = std::move(neg);
  c.n_pos = c.n_neg = 1;
  return c;
}

struct RandomInstance {
  Centroids centroids;
  FeatureMask mask;
  Eigen::MatrixXd batch;
  Eigen::VectorXd v;
};

RandomInstance random_instance(std::uint64_t seed, std::size_t d = 64, std::size_t d_steer = 8, std::size_t b = 16) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto dd = static_cast<Eigen::Index>(d);
  Eigen::MatrixXd codes(40, dd);
  std::vector<Polarity> labels;
  for (Eigen::Index r = 0; r < 40; ++r) {
    labels.push_back(r < 20 ? P : N);
    for (Eigen::Index c = 0; c < dd; ++c) codes(r, c) = std::abs(normal(rng)) + (r < 20 && c < 12 ? 1.0 : 0.0);
  }
  RandomInstance inst;
  inst.centroids = compute_centroids(codes, labels);
  Eigen::VectorXd f(dd);
  for (Eigen::Index c = 0; c < dd; ++c) f[c] = std::abs(normal(rng));
  inst.mask = build_mask(f, Eigen::VectorXd::Zero(dd), d_steer);
  inst.batch = codes.bottomRows(static_cast<Eigen::Index>(b));
  inst.v = 0.3 * Eigen::VectorXd::NullaryExpr(dd, [&] { return normal(rng); }).cwiseProduct(inst.mask.dense());
  return inst;
}

FeatureMask first_two_of_three() { return build_mask(Eigen::Vector3d(2, 1, 0), Eigen::Vector3d::Zero(), 2); }

struct PlantedFixture {
  ActivationSet noisy;
  ActivationSet clean;
  PlantedGroundTruth gt;
  SaeModel sae;
  SaeModel clean_sae;
};

const PlantedFixture& planted() {
  static const PlantedFixture fixture = [] {
    PlantedFixture f;
    const FacetCorpus corpus = generate_synthetic_corpus(1, 100);
    f.gt = make_planted_ground_truth(32, 0.5, 1.0, 3);
    f.noisy = synthesize_activations(corpus, f.gt, 3);
    PlantedGroundTruth clean_gt = f.gt;
    clean_gt.sigma_noise = 0.0;
    f.clean = synthesize_activations(corpus, clean_gt, 3);
    SaeConfig sc;
    sc.d_model = 32;
    sc.d_latent = 128;
    sc.seed = 4;
    f.sae = train_sae(f.noisy, sc);
    sc.l1_coeff = 0.1;
    f.clean_sae = train_sae(f.clean, sc);
    return f;
  }();
  return fixture;
}

FeatureMask planted_mask(const ActivationSet& acts, FacetId facet, const SaeModel& sae = planted().sae) {
  const FacetCodes fc = encode_facet(sae, acts, facet);
  ProbeConfig pc;
  pc.seed = 5;
  return select_features(fc.codes, fc.labels, 48, pc);
}

}  // namespace

TEST_CASE("centroids") {
  Eigen::MatrixXd codes(3, 2);
  codes << 1, 2, 3, 4, 9, 9;
  const Centroids c = compute_centroids(codes, std::vector<Polarity>{P, P, N});
  CHECK(c.mu_pos == Eigen::Vector2d(2, 3));
  CHECK(c.mu_neg == Eigen::Vector2d(9, 9));
  CHECK(c.n_pos == 2);
  CHECK(compute_centroids(codes.topRows(2), std::vector<Polarity>{N, P}).mu_pos == Eigen::Vector2d(3, 4));
  CHECK_THROWS_AS(compute_centroids(codes, std::vector<Polarity>{P, P, P}), PreconditionError);
}

TEST_CASE("noiseless planted codes: centroid difference is the encoded signal difference") {
  const auto& fx = planted();
  const FacetId f = parse_facet("Dutifulness");
  const FacetCodes fc = encode_facet(fx.sae, fx.clean, f);
  const Centroids c = compute_centroids(fc.codes, fc.labels);
  const Eigen::VectorXd g = fx.gt.direction(f);
  const Eigen::VectorXd expected = fx.sae.encode(g) - fx.sae.encode(-g);
  CHECK((c.mu_pos - c.mu_neg - expected).lpNorm<Eigen::Infinity>() <= 1e-12);
}

TEST_CASE("init_cv") {
  const FeatureMask m = build_mask(Eigen::Vector3d(3, 0, 2), Eigen::Vector3d::Zero(), 2);
  CHECK(init_cv(centroids_of(Eigen::Vector3d(1, 2, 3), Eigen::Vector3d(0, 2, 1)), m) == Eigen::Vector3d(1, 0, 2));
  CHECK(init_cv(centroids_of(Eigen::Vector3d(1, 2, 3), Eigen::Vector3d(1, 2, 3)), m).isZero());
  FeatureMask empty = m;
  empty.indices.clear();
  CHECK(init_cv(centroids_of(Eigen::Vector3d(1, 2, 3), Eigen::Vector3d(0, 2, 1)), empty).isZero());
}

TEST_CASE("loss oracles") {
  const Centroids c = centroids_of(Eigen::Vector3d(1, 0, 0), Eigen::Vector3d(0, 1, 0));
  const FeatureMask mask = first_two_of_three();
  const Eigen::Vector3d v = Eigen::Vector3d::Zero();
  LossConfig cfg;
  cfg.beta = 0.0;
  cfg.lambda = 0.0;

  SUBCASE("clamped positive cosine with the angular margin") {
    Eigen::MatrixXd z(1, 3);
    z << 1, 0, 0;
    cfg.s = 1.0;
    // softplus(0.1 - cos(acos(1 - 1e-6) + 0.2)), with cos(acos(1 - 1e-6) + 0.2) = 0.9797846369828660518
    CHECK(loss_total(v, z, c, mask, cfg).l_ce == doctest::Approx(0.3470392444757821).epsilon(1e-12));
    cfg.s = 16.0;
    CHECK(loss_total(v, z, c, mask, cfg).l_ce == doctest::Approx(7.70247013454034e-7).epsilon(1e-10));
  }
  SUBCASE("z+ on u+ gives l_dist = -||u+ - u-||") {
    Eigen::MatrixXd z(1, 3);
    z << 2, 0, 0;
    CHECK(loss_total(v, z, c, mask, cfg).l_dist == doctest::Approx(-std::sqrt(2.0)).epsilon(1e-15));
  }
  SUBCASE("s = 0 gives ln 2 per sample") {
    cfg.s = 0.0;
    const RandomInstance inst = random_instance(3);
    CHECK(loss_total(inst.v, inst.batch, inst.centroids, inst.mask, cfg).l_ce ==
          doctest::Approx(std::numbers::ln2).epsilon(1e-15));
  }
  SUBCASE("equal margined cosines give ln 2") {
    // z+ = (cos phi, sin phi, 0): c~+ = cos(phi + 0.2), c~- = sin(phi) + 0.1. Bisect for equality.
    double lo = 0.0, hi = std::numbers::pi / 2;
    for (int i = 0; i < 200; ++i) {
      const double mid = 0.5 * (lo + hi);
      (std::cos(mid + 0.2) > std::sin(mid) + 0.1 ? lo : hi) = mid;
    }
    Eigen::MatrixXd z(1, 3);
    z << std::cos(lo), std::sin(lo), 0;
    cfg.s = 16.0;
    CHECK(loss_total(v, z, c, mask, cfg).l_ce == doctest::Approx(std::numbers::ln2).epsilon(1e-12));
  }
}

TEST_CASE("total = l_ce + beta * l_dist + lambda * l_reg") {
  LossConfig cfg;
  cfg.beta = 0.7;
  cfg.lambda = 0.05;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const RandomInstance inst = random_instance(seed);
    const LossBreakdown l = loss_total(inst.v, inst.batch, inst.centroids, inst.mask, cfg);
    const double sum = l.l_ce + cfg.beta * l.l_dist + cfg.lambda * l.l_reg;
    CHECK(std::abs(l.total - sum) <= 1e-12 * std::abs(sum));
    CHECK(l.l_reg == doctest::Approx(inst.v.squaredNorm()).epsilon(1e-14));
  }
}

TEST_CASE("analytic gradient matches central differences on 20 seeds") {
  const LossConfig cfg;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const RandomInstance inst = random_instance(seed);
    const Eigen::VectorXd g = grad_loss(inst.v, inst.batch, inst.centroids, inst.mask, cfg);
    const Eigen::VectorXd fd = fd_grad_oracle(inst.v, inst.batch, inst.centroids, inst.mask, cfg, 1e-5);
    CHECK(gradient_relative_error(g, fd) <= 1e-4);
    CHECK(g.norm() > 0.0);
    for (Eigen::Index j = 0; j < g.size(); ++j)
      if (!inst.mask.contains(static_cast<std::size_t>(j))) CHECK(g[j] == 0.0);
  }
}

TEST_CASE("finite-difference error is second order in the step") {
  const LossConfig cfg;
  const RandomInstance inst = random_instance(5);
  const Eigen::VectorXd g = grad_loss(inst.v, inst.batch, inst.centroids, inst.mask, cfg);
  const double e1 = (fd_grad_oracle(inst.v, inst.batch, inst.centroids, inst.mask, cfg, 2e-2) - g).norm();
  const double e2 = (fd_grad_oracle(inst.v, inst.batch, inst.centroids, inst.mask, cfg, 1e-2) - g).norm();
  CHECK(e1 / e2 == doctest::Approx(4.0).epsilon(0.25));
}

TEST_CASE("gradient closed forms") {
  const RandomInstance inst = random_instance(7);
  SUBCASE("regularizer only") {
    LossConfig cfg;
    cfg.beta = 0.0;
    cfg.s = 0.0;
    cfg.lambda = 0.3;
    const Eigen::VectorXd g = grad_loss(inst.v, inst.batch, inst.centroids, inst.mask, cfg);
    CHECK((g - 2.0 * cfg.lambda * inst.v).lpNorm<Eigen::Infinity>() <= 1e-8);
  }
  SUBCASE("vanishing logit scale flattens the CE gradient") {
    LossConfig cfg;
    cfg.beta = 0.0;
    cfg.lambda = 0.0;
    cfg.s = 1e-9;
    CHECK(grad_loss(inst.v, inst.batch, inst.centroids, inst.mask, cfg).norm() <= 1e-8);
  }
  CHECK_THROWS_AS(fd_grad_oracle(inst.v, inst.batch, inst.centroids, inst.mask, LossConfig{}, 0.0),
                  PreconditionError);
}

TEST_CASE("objective preconditions") {
  const FeatureMask mask = first_two_of_three();
  CHECK_THROWS_AS(CvObjective(centroids_of(Eigen::Vector3d::Zero(), Eigen::Vector3d(0, 1, 0)), mask, LossConfig{}),
                  NumericError);
  CHECK_THROWS_AS(CvObjective(centroids_of(Eigen::Vector3d(0, 0, 1), Eigen::Vector3d(0, 1, 0)), mask, LossConfig{}),
                  NumericError);
  LossConfig bad;
  bad.s = -1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK(gradient_relative_error(Eigen::Vector2d(1, 2), Eigen::Vector2d(1, 2.5)) == doctest::Approx(0.2));
  CHECK(gradient_relative_error(Eigen::Vector2d::Zero(), Eigen::Vector2d::Zero()) == 0.0);
}

TEST_CASE("training keeps v on the mask after every step") {
  const auto& fx = planted();
  const FacetId f = parse_facet("Excitement-Seeking");
  const FeatureMask mask = planted_mask(fx.noisy, f);
  TrainOptions opt;
  opt.seed = 2;
  std::size_t steps = 0, violations = 0;
  const ControlVector cv = train_cv(fx.sae, fx.noisy, f, mask, LossConfig{}, opt, [&](std::size_t, const Eigen::VectorXd& v) {
    ++steps;
    for (Eigen::Index j = 0; j < v.size(); ++j)
      if (!mask.contains(static_cast<std::size_t>(j)) && v[j] != 0.0) ++violations;
  });
  CHECK(steps == opt.iterations);
  CHECK(violations == 0);
  CHECK(cv.decoded == (fx.sae.w_dec * cv.v).eval());
  CHECK(cv.meta.n_heldout_neg == 20);
  CHECK(cv.meta.heldout_final.pos > cv.meta.heldout_initial.pos);
  CHECK(cv.meta.heldout_final.neg < cv.meta.heldout_initial.neg);
}

TEST_CASE("zero learning rate returns the initialization") {
  const auto& fx = planted();
  const FacetId f = parse_facet("Anxiety");
  const FeatureMask mask = planted_mask(fx.noisy, f);
  TrainOptions opt;
  opt.learning_rate = 0.0;
  opt.holdout_fraction = 0.0;
  opt.iterations = 10;
  const ControlVector cv = train_cv(fx.sae, fx.noisy, f, mask, LossConfig{}, opt);
  const FacetCodes fc = encode_facet(fx.sae, fx.noisy, f);
  CHECK(cv.v == init_cv(compute_centroids(fc.codes, fc.labels), mask));
}

TEST_CASE("training is deterministic") {
  const auto& fx = planted();
  const FacetId f = parse_facet("Trust");
  const FeatureMask mask = planted_mask(fx.noisy, f);
  TrainOptions opt;
  opt.iterations = 50;
  opt.seed = 9;
  CHECK(train_cv(fx.sae, fx.noisy, f, mask, LossConfig{}, opt) == train_cv(fx.sae, fx.noisy, f, mask, LossConfig{}, opt));
}

TEST_CASE("noiseless planted data: trained vector decodes onto the facet direction") {
  const auto& fx = planted();
  for (FacetId f : all_facets()) {
    TrainOptions opt;
    opt.seed = 1;
    const ControlVector cv =
        train_cv(fx.clean_sae, fx.clean, f, planted_mask(fx.clean, f, fx.clean_sae), LossConfig{}, opt);
    CHECK_MESSAGE(cv.decoded.normalized().dot(fx.gt.direction(f)) >= 0.99, f.name());
  }
}

TEST_CASE("contrastive activation addition") {
  const auto& fx = planted();
  for (FacetId f : all_facets()) {
    CHECK(caa_vector(fx.clean, f) == (2.0 * fx.gt.direction(f)).eval());
    CHECK(caa_vector(fx.noisy, f).normalized().dot(fx.gt.direction(f)) >= 0.9);
  }
  auto [big, gt] = synthesize_activations(generate_synthetic_corpus(3, 250), 0.5, 1.0, 3, 32);
  for (FacetId f : all_facets()) CHECK(caa_vector(big, f).normalized().dot(gt.direction(f)) >= 0.95);

  ActivationSet sym;
  sym.d_model = 2;
  for (int k = 0; k < 3; ++k) {
    ActivationRecord r;
    r.facet = parse_facet("Ideas");
    r.hidden = {static_cast<float>(k + 1), -0.5f};
    r.polarity = P;
    r.item_id = "p" + std::to_string(k);
    sym.records.push_back(r);
    r.hidden = {-static_cast<float>(k + 1), 0.5f};
    r.polarity = N;
    r.item_id = "n" + std::to_string(k);
    sym.records.push_back(r);
  }
  CHECK(caa_vector(sym, parse_facet("Ideas")) == Eigen::Vector2d(4, -1));
  CHECK_THROWS_AS(caa_vector(sym, parse_facet("Values")), PreconditionError);
}

TEST_CASE("control vector files") {
  testutil::TempDir dir("cv");
  const auto& fx = planted();
  const FacetId f = parse_facet("Feelings");
  TrainOptions opt;
  opt.iterations = 5;
  const ControlVector cv = train_cv(fx.sae, fx.noisy, f, planted_mask(fx.noisy, f), LossConfig{}, opt);
  export_cv(cv, dir / "cv.json");
  const ControlVector back = import_cv(dir / "cv.json");
  CHECK(back == cv);
  CHECK(back.facet == cv.facet);
  CHECK(back.sae_checksum == sae_checksum(fx.sae));
  CHECK(back.meta.final_loss == cv.meta.final_loss);

  auto j = cv_to_json(cv);
  std::size_t off = 0;
  while (cv.mask.contains(off)) ++off;
  j["mask_indices"].push_back(off);
  j["values"].push_back(0.5);
  CHECK_THROWS_WITH_AS(cv_from_json(j), doctest::Contains("off-mask"), SchemaError);

  j = cv_to_json(cv);
  j.erase("facet");
  CHECK_THROWS_WITH_AS(cv_from_json(j), doctest::Contains("\"facet\""), SchemaError);
}
