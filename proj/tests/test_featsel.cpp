#include <algorithm>
#include <random>

#include "doctest.h"
#include "facetsteer/activations.hpp"
#include "facetsteer/corpus.hpp"
#include "facetsteer/cvtrain.hpp"
#include "facetsteer/error.hpp"
#include "facetsteer/featsel.hpp"
#include "facetsteer/sae.hpp"
#include "test_util.hpp"

using namespace facetsteer;

namespace {

constexpr Polarity P = Polarity::Positive;
constexpr Polarity N = Polarity::Negative;

struct Labeled {
  Eigen::MatrixXd x;
  std::vector<Polarity> y;
};

Labeled gaussian_classes(std::size_t n_per_class, std::size_t d, double shift, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Labeled out;
  out.x.resize(static_cast<Eigen::Index>(2 * n_per_class), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < 2 * n_per_class; ++i) {
    const bool pos = i % 2 == 0;
    out.y.push_back(pos ? P : N);
    for (std::size_t c = 0; c < d; ++c)
      out.x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) =
          normal(rng) + (c < 2 ? (pos ? shift : -shift) : 0.0);
  }
  return out;
}

}  // namespace

TEST_CASE("F statistics") {
  SUBCASE("hand computed value") {
    Eigen::MatrixXd x(4, 1);
    x << 1, 3, -1, -3;
    const std::vector<Polarity> y{P, P, N, N};
    CHECK(f_statistics(x, y)[0] == doctest::Approx(8.0));
  }
  SUBCASE("equal class means give 0") {
    Eigen::MatrixXd x(4, 1);
    x << 1, 3, 3, 1;
    CHECK(f_statistics(x, std::vector<Polarity>{P, P, N, N})[0] == 0.0);
  }
  SUBCASE("zero within-class spread gives the sentinel") {
    Eigen::MatrixXd x(4, 1);
    x << 2, 2, 0, 0;
    CHECK(f_statistics(x, std::vector<Polarity>{P, P, N, N})[0] == kFStatisticSentinel);
  }
  SUBCASE("constant coordinate gives 0") {
    Eigen::MatrixXd x = Eigen::MatrixXd::Constant(4, 1, 5.0);
    CHECK(f_statistics(x, std::vector<Polarity>{P, P, N, N})[0] == 0.0);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(f_statistics(Eigen::MatrixXd::Zero(3, 2), std::vector<Polarity>{P, P, P}), PreconditionError);
    CHECK_THROWS_AS(f_statistics(Eigen::MatrixXd::Zero(2, 2), std::vector<Polarity>{P, N}), PreconditionError);
    CHECK_THROWS_AS(f_statistics(Eigen::MatrixXd::Zero(4, 2), std::vector<Polarity>{P, N, P}), DimensionError);
  }
}

TEST_CASE("linear probe") {
  ProbeConfig cfg;
  cfg.seed = 9;
  SUBCASE("separable data") {
    const Labeled d = gaussian_classes(200, 6, 4.0, 1);
    const ProbeResult r = linear_probe(d.x, d.y, cfg);
    CHECK(r.held_out_acc >= 0.95);
    CHECK(r.weights.size() == 6);
    CHECK(r.loss_trace.back() < r.loss_trace.front());
  }
  SUBCASE("shuffled labels sit near chance") {
    Labeled d = gaussian_classes(200, 4, 0.0, 2);
    std::mt19937_64 rng(5);
    std::shuffle(d.y.begin(), d.y.end(), rng);
    const ProbeResult r = linear_probe(d.x, d.y, cfg);
    CHECK(r.held_out_acc >= 0.35);
    CHECK(r.held_out_acc <= 0.65);
  }
  SUBCASE("deterministic") {
    const Labeled d = gaussian_classes(50, 5, 1.0, 3);
    const ProbeResult a = linear_probe(d.x, d.y, cfg), b = linear_probe(d.x, d.y, cfg);
    CHECK(a.weights == b.weights);
    CHECK(a.bias == b.bias);
    CHECK(a.held_out_acc == b.held_out_acc);
  }
  SUBCASE("needs two items per class") {
    Eigen::MatrixXd x = Eigen::MatrixXd::Random(4, 2);
    CHECK_THROWS_AS(linear_probe(x, std::vector<Polarity>{P, N, N, N}, cfg), PreconditionError);
  }
}

TEST_CASE("build_mask ranking") {
  CHECK(build_mask(Eigen::Vector3d(5, 1, 9), Eigen::Vector3d::Zero(), 2).indices == std::vector<std::size_t>{2, 0});
  CHECK(build_mask(Eigen::Vector3d(3, 3, 3), Eigen::Vector3d(0.1, 0.9, 0.5), 1).indices ==
        std::vector<std::size_t>{1});
  CHECK(build_mask(Eigen::Vector3d(3, 3, 3), Eigen::Vector3d(0.5, -0.5, 0.5), 2).indices ==
        std::vector<std::size_t>{0, 1});

  const FeatureMask all = build_mask(Eigen::Vector3d(1, 2, 3), Eigen::Vector3d::Zero(), 3);
  CHECK(all.dense() == Eigen::Vector3d::Ones());
  CHECK(all.contains(0));

  const FeatureMask m = build_mask(Eigen::Vector3d(5, 1, 9), Eigen::Vector3d::Zero(), 2);
  CHECK(m.dense() == Eigen::Vector3d(1, 0, 1));
  CHECK_FALSE(m.contains(1));

  CHECK_THROWS_AS(build_mask(Eigen::Vector3d(1, 2, 3), Eigen::Vector3d::Zero(), 0), PreconditionError);
  CHECK_THROWS_AS(build_mask(Eigen::Vector3d(1, 2, 3), Eigen::Vector3d::Zero(), 4), PreconditionError);
  CHECK_THROWS_AS(build_mask(Eigen::Vector3d(1, 2, 3), Eigen::Vector2d::Zero(), 1), DimensionError);
}

TEST_CASE("permuting non-selected coordinates leaves the mask unchanged") {
  const Labeled d = gaussian_classes(100, 10, 1.5, 4);
  ProbeConfig cfg;
  cfg.seed = 1;
  const FeatureMask base = select_features(d.x, d.y, 2, cfg);
  std::vector<std::size_t> sorted = base.indices;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == std::vector<std::size_t>{0, 1});

  Eigen::MatrixXd permuted = d.x;
  std::vector<Eigen::Index> rest{2, 3, 4, 5, 6, 7, 8, 9};
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<Eigen::Index> shuffled = rest;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    for (std::size_t k = 0; k < rest.size(); ++k) permuted.col(rest[k]) = d.x.col(shuffled[k]);
    CHECK(select_features(permuted, d.y, 2, cfg).indices == base.indices);
  }
}

TEST_CASE("mask artifact round trip") {
  testutil::TempDir dir("featsel");
  const FeatureMask m = build_mask(Eigen::Vector4d(5, 1, 9, 2), Eigen::Vector4d(0.1, -0.2, 0.3, 0.4), 2, 0.875);
  m.save(dir / "m.json");
  const FeatureMask back = FeatureMask::load(dir / "m.json");
  CHECK(back.indices == m.indices);
  CHECK(back.d_latent == 4);
  CHECK(back.probe_acc == 0.875);
  CHECK(back.selection_rule == kMaskSelectionRule);
  CHECK(FeatureMask::from_json(m.to_json(true)) == m);

  auto j = m.to_json();
  j["indices"] = {0, 7};
  CHECK_THROWS_AS(FeatureMask::from_json(j), SchemaError);
  j["indices"] = {1, 1};
  CHECK_THROWS_AS(FeatureMask::from_json(j), SchemaError);
}

TEST_CASE("planted data: decoded masked centroid difference aligns with the facet direction") {
  const FacetCorpus corpus = generate_synthetic_corpus(1, 100);
  auto [acts, gt] = synthesize_activations(corpus, 0.5, 1.0, 3, 32);
  SaeConfig sc;
  sc.d_model = 32;
  sc.d_latent = 128;
  sc.seed = 4;
  const SaeModel sae = train_sae(acts, sc);
  ProbeConfig pc;
  pc.seed = 5;
  for (FacetId f : all_facets()) {
    const FacetCodes fc = encode_facet(sae, acts, f);
    const FeatureMask mask = select_features(fc.codes, fc.labels, 48, pc);
    const Centroids c = compute_centroids(fc.codes, fc.labels);
    const Eigen::VectorXd decoded = sae.w_dec * init_cv(c, mask);
    CHECK(decoded.normalized().dot(gt.direction(f)) >= 0.8);
  }
}
