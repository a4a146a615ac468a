#include <cmath>
#include <cstring>

#include <fmt/format.h>

#include "doctest.h"
#include "facetsteer/activations.hpp"
#include "facetsteer/corpus.hpp"
#include "facetsteer/error.hpp"
#include "test_util.hpp"

using namespace facetsteer;

namespace {

ActivationSet tiny_set() {
  ActivationSet s;
  s.d_model = 4;
  s.layer = 7;
  s.model_tag = "toy";
  ActivationRecord r;
  r.item_id = "warmth-0000-pos";
  r.facet = parse_facet("Warmth");
  r.polarity = Polarity::Positive;
  r.hidden = {1.0f, -2.5f, 0.1f, 3.4028235e38f};
  r.layer = 7;
  r.model_tag = "toy";
  s.records.push_back(r);
  return s;
}

Eigen::VectorXd centroid_difference(const ActivationSet& s, FacetId f) {
  Eigen::VectorXd pos = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(s.d_model)), neg = pos;
  const Eigen::MatrixXd m = s.matrix();
  const auto pi = s.indices_of(f, Polarity::Positive), ni = s.indices_of(f, Polarity::Negative);
  for (auto i : pi) pos += m.row(static_cast<Eigen::Index>(i)).transpose();
  for (auto i : ni) neg += m.row(static_cast<Eigen::Index>(i)).transpose();
  return pos / static_cast<double>(pi.size()) - neg / static_cast<double>(ni.size());
}

}  // namespace

TEST_CASE("FSTA layout: header, metadata, 16-byte payload for one d_model=4 record") {
  const std::string bytes = serialize_activations(tiny_set());
  REQUIRE(bytes.size() >= kFstaHeaderBytes);
  CHECK(bytes.substr(0, 4) == "FSTA");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  CHECK(little_endian_get_u32(p + 4) == 1);
  CHECK(little_endian_get_u32(p + 8) == 4);
  CHECK(little_endian_get_u64(p + 12) == 1);
  const std::uint64_t meta_len = little_endian_get_u64(p + 20);
  CHECK(bytes.size() == kFstaHeaderBytes + meta_len + 16);

  const auto meta = nlohmann::json::parse(bytes.substr(kFstaHeaderBytes, meta_len));
  REQUIRE(meta.is_array());
  CHECK(meta[0]["id"] == "warmth-0000-pos");
  CHECK(meta[0]["facet"] == "Warmth");
  CHECK(meta[0]["polarity"] == "pos");
  CHECK(meta[0]["layer"] == 7);
  CHECK(meta[0]["model"] == "toy");
  CHECK(little_endian_get_f32(p + kFstaHeaderBytes + meta_len + 4) == -2.5f);
}

TEST_CASE("persist then load is bit-exact") {
  testutil::TempDir dir("acts");
  ActivationSet s = tiny_set();
  ActivationRecord unlabeled;
  unlabeled.item_id = "wiki-1";
  unlabeled.hidden = {0.0f, -0.0f, 1e-40f, 7.0f};
  unlabeled.layer = 7;
  unlabeled.model_tag = "toy";
  s.records.push_back(unlabeled);
  persist_activations(s, dir / "a.fsta");
  const ActivationSet back = load_activations(dir / "a.fsta");
  CHECK(back == s);
  CHECK_FALSE(back.records[1].facet.has_value());
  CHECK(std::signbit(back.records[1].hidden[1]));
  CHECK(std::memcmp(back.records[1].hidden.data(), s.records[1].hidden.data(), 16) == 0);
  CHECK(serialize_activations(back) == testutil::read_file(dir / "a.fsta"));
}

TEST_CASE("non-finite values refuse to serialize and name the item") {
  ActivationSet s = tiny_set();
  s.records[0].hidden[2] = std::nanf("");
  CHECK_THROWS_WITH_AS(serialize_activations(s), doctest::Contains("warmth-0000-pos"), NumericError);
  s.records[0].hidden[2] = INFINITY;
  CHECK_THROWS_AS(serialize_activations(s), NumericError);
}

TEST_CASE("load errors") {
  const std::string good = serialize_activations(tiny_set());
  SUBCASE("truncated by one byte") {
    CHECK_THROWS_WITH(parse_activations(good.substr(0, good.size() - 1)),
                      doctest::Contains(fmt::format("expected {} bytes, got {}", good.size(), good.size() - 1).c_str()));
  }
  SUBCASE("version 99") {
    std::string bad = good;
    bad[4] = 99;
    CHECK_THROWS_WITH(parse_activations(bad), doctest::Contains("unsupported FSTA version 99"));
  }
  SUBCASE("bad magic") {
    std::string bad = good;
    bad[0] = 'X';
    CHECK_THROWS_WITH(parse_activations(bad), doctest::Contains("magic"));
  }
  SUBCASE("shorter than the header") { CHECK_THROWS(parse_activations(good.substr(0, 10))); }
  SUBCASE("missing file") { CHECK_THROWS_AS(load_activations("/nonexistent/a.fsta"), IoError); }
}

TEST_CASE("planted directions are unit norm and cosine-bounded") {
  for (std::size_t d : {16u, 32u, 64u}) {
    const auto gt = make_planted_ground_truth(d, 0.5, 1.0, 3);
    REQUIRE(gt.directions.size() == 30);
    for (std::size_t i = 0; i < 30; ++i) {
      CHECK(gt.directions[i].norm() == doctest::Approx(1.0).epsilon(1e-6));
      for (std::size_t j = i + 1; j < 30; ++j) CHECK(gt.directions[i].dot(gt.directions[j]) <= 0.3 + 1e-6);
    }
  }
  CHECK_THROWS(synthesize_activations(generate_synthetic_corpus(1, 1), 0.5, 1.0, 1, 4));
}

TEST_CASE("noiseless synthesis: centroid difference is exactly 2 * signal_scale * g") {
  const FacetCorpus c = generate_synthetic_corpus(1, 5);
  for (double scale : {1.0, 0.5}) {
    auto gt = make_planted_ground_truth(16, 0.0, scale, 8);
    const ActivationSet s = synthesize_activations(c, gt, 8);
    for (FacetId f : all_facets()) {
      const Eigen::VectorXd diff = centroid_difference(s, f);
      CHECK(diff == (2.0 * scale * gt.direction(f)).eval());
    }
  }
}

TEST_CASE("no planted signal: centroid difference shrinks with sample count") {
  const FacetId f = parse_facet("Trust");
  double previous = INFINITY;
  for (std::size_t n : {10u, 100u, 1000u}) {
    auto gt = make_planted_ground_truth(16, 1.0, 0.0, 4);
    const double norm = centroid_difference(synthesize_activations(generate_synthetic_corpus(1, n), gt, 4), f).norm();
    CHECK(norm < previous);
    previous = norm;
  }
  CHECK(previous < 0.3);
}

TEST_CASE("seed=3, sigma=0.5, 500 per facet: empirical centroid difference aligns with g") {
  auto [s, gt] = synthesize_activations(generate_synthetic_corpus(3, 250), 0.5, 1.0, 3, 32);
  for (FacetId f : all_facets()) {
    const Eigen::VectorXd diff = centroid_difference(s, f);
    CHECK(diff.normalized().dot(gt.direction(f)) >= 0.95);
  }
  CHECK(synthesize_activations(generate_synthetic_corpus(3, 2), 0.5, 1.0, 3, 32).first ==
        synthesize_activations(generate_synthetic_corpus(3, 2), 0.5, 1.0, 3, 32).first);
}

TEST_CASE("planted ground truth JSON round trip") {
  const auto gt = make_planted_ground_truth(16, 0.5, 1.0, 2);
  const auto back = PlantedGroundTruth::from_json(nlohmann::json::parse(gt.to_json().dump()));
  REQUIRE(back.directions.size() == gt.directions.size());
  for (std::size_t i = 0; i < 30; ++i) CHECK(back.directions[i] == gt.directions[i]);
  CHECK(back.sigma_noise == gt.sigma_noise);
}
