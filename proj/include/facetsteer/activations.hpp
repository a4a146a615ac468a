#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "facetsteer/corpus.hpp"
#include "facetsteer/taxonomy.hpp"
#include "json.hpp"

namespace facetsteer {

// FSTA activation file layout (all integers little-endian):
//
//   offset  size  field
//   0       4     magic "FSTA"
//   4       4     version (u32) = 1
//   8       4     d_model (u32)
//   12      8     count (u64)
//   20      8     metadata_len (u64)
//   28      n     metadata: UTF-8 JSON array, one {"id","facet","polarity","layer","model"} per row
//   28+n    ...   payload: count x d_model float32 LE, row-major
//
// Unlabeled rows carry facet "__unlabeled__" and polarity "none".
inline constexpr char kFstaMagic[4] = {'F', 'S', 'T', 'A'};
inline constexpr std::uint32_t kFstaVersion = 1;
inline constexpr std::size_t kFstaHeaderBytes = 28;
inline constexpr std::string_view kUnlabeledFacet = "__unlabeled__";
inline constexpr std::string_view kUnlabeledPolarity = "none";

struct ActivationRecord {
  std::string item_id;
  std::optional<FacetId> facet;
  std::optional<Polarity> polarity;
  std::vector<float> hidden;
  int layer = 0;
  std::string model_tag;

  friend bool operator==(const ActivationRecord&, const ActivationRecord&) = default;
};

struct ActivationSet {
  std::vector<ActivationRecord> records;
  std::size_t d_model = 0;
  int layer = 0;
  std::string model_tag;

  // Throws SchemaError / NumericError when an invariant is broken.
  void validate() const;
  // Rows of `hidden` widened to double, in record order.
  Eigen::MatrixXd matrix() const;
  std::vector<std::size_t> indices_of(FacetId facet, Polarity polarity) const;

  friend bool operator==(const ActivationSet&, const ActivationSet&) = default;
};

void little_endian_put_u32(std::string& out, std::uint32_t v);
void little_endian_put_u64(std::string& out, std::uint64_t v);
void little_endian_put_f32(std::string& out, float v);
std::uint32_t little_endian_get_u32(const unsigned char* p);
std::uint64_t little_endian_get_u64(const unsigned char* p);
float little_endian_get_f32(const unsigned char* p);

std::string serialize_activations(const ActivationSet& set);
ActivationSet parse_activations(std::string_view bytes);
void persist_activations(const ActivationSet& set, const std::filesystem::path& path);
ActivationSet load_activations(const std::filesystem::path& path);

// Synthetic oracle: one unit direction per facet, planted into Gaussian noise.
struct PlantedGroundTruth {
  std::vector<Eigen::VectorXd> directions;  // indexed by FacetId::ordinal()
  double sigma_noise = 0.5;
  double signal_scale = 1.0;
  std::uint64_t seed = 0;
  double max_pairwise_cosine = 0.3;

  std::size_t d_model() const { return directions.empty() ? 0 : static_cast<std::size_t>(directions[0].size()); }
  const Eigen::VectorXd& direction(FacetId f) const { return directions.at(f.ordinal()); }

  nlohmann::ordered_json to_json() const;
  static PlantedGroundTruth from_json(const nlohmann::json& j);
};

// Directions are orthonormalized when d_model >= 30, otherwise rejection
// sampled against the cosine bound. Components are rounded to the float32
// grid.
PlantedGroundTruth make_planted_ground_truth(std::size_t d_model, double sigma_noise, double signal_scale,
                                             std::uint64_t seed);

// hidden = noise + sign(polarity) * signal_scale * g_facet, noise ~ N(0, sigma^2 I).
ActivationSet synthesize_activations(const FacetCorpus& corpus, const PlantedGroundTruth& gt, std::uint64_t seed,
                                     int layer = 0, std::string model_tag = "synthetic");

std::pair<ActivationSet, PlantedGroundTruth> synthesize_activations(const FacetCorpus& corpus, double sigma_noise,
                                                                    double signal_scale, std::uint64_t seed,
                                                                    std::size_t d_model);

}  // namespace facetsteer
