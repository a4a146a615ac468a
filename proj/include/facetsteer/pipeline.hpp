#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "facetsteer/chat_client.hpp"
#include "facetsteer/cvtrain.hpp"
#include "facetsteer/error.hpp"
#include "facetsteer/featsel.hpp"
#include "facetsteer/leakage.hpp"
#include "facetsteer/routing.hpp"
#include "facetsteer/sae.hpp"
#include "facetsteer/steering.hpp"
#include "json.hpp"

namespace facetsteer {

inline constexpr int kConfigVersion = 1;

struct CorpusStage {
  std::size_t per_facet = 250;  // pairs per facet: per_facet positive + per_facet negative items
  std::optional<std::filesystem::path> import_path;
  bool leakage = true;
  ClassifierConfig classifier;
};

struct ActivationStage {
  std::size_t d_model = 32;
  double sigma_noise = 0.5;
  double signal_scale = 1.0;
  int layer = 0;
  std::string model_tag = "synthetic";
  std::optional<std::filesystem::path> import_path;
};

struct FeatselStage {
  std::size_t d_steer = 32;
  ProbeConfig probe;
};

struct CvStage {
  LossConfig loss;
  TrainOptions train;
  std::vector<FacetId> facets;  // empty = all 30
  bool ablation = true;         // also train without the CE term and report both
  std::size_t workers = 0;      // 0 = hardware concurrency
};

struct SteerStage {
  int n_layers = 4;
  double block_gain = 0.25;
  std::optional<int> layer;  // default n_layers / 2
  SteerMode mode = SteerMode::Sae;
  FacetId facet{Dimension::Openness, 5};
  double alpha = 1.0;
  std::vector<double> alphas{0.0, 0.5, 1.0, 2.0};
};

struct RouteStage {
  RoutingPolicy policy;
  std::string scorer = "keyword";  // keyword | chat
  std::optional<ChatClientConfig> chat;
  std::vector<std::string> queries;
  std::size_t max_in_flight = 4;
};

struct EvalStage {
  double threshold = 0.5;
  std::string judge = "stub";  // stub | chat
  std::optional<ChatClientConfig> chat;
  std::optional<std::filesystem::path> questions_path;
  std::size_t roster_size = 26;
  double persona_strength = 0.2;  // base shift along each dimension's readout
  double character_noise = 0.3;   // per-coordinate std of each character's base state
  double score_gain = 4.0;        // score = sigmoid(gain * logit shift)
  double ooc_norm = 8.0;          // steering shift above this norm is flagged out of character
  std::size_t max_in_flight = 4;
};

struct PipelineConfig {
  std::uint64_t seed = 0;
  std::filesystem::path output_dir;
  nlohmann::json raw;  // config as written, echoed into manifests

  CorpusStage corpus;
  ActivationStage activations;
  SaeConfig sae;
  FeatselStage featsel;
  CvStage cvtrain;
  SteerStage steering;
  RouteStage routing;
  EvalStage eval;

  // Relative paths inside the config resolve against `base_dir`. Missing or
  // unknown keys raise ConfigError naming the key.
  static PipelineConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
  static PipelineConfig load(const std::filesystem::path& path);
};

inline constexpr std::string_view kPipelineStages[] = {"corpus-gen", "corpus-validate", "acts-synth", "sae-train",
                                                       "mask-build", "cv-train",        "cv-export",  "caa",
                                                       "steer",      "sweep",           "route",      "eval"};
bool is_command(std::string_view name);  // a stage or "pipeline"

// Wraps a failure inside a stage, keeping the original error kind.
class StageError : public Error {
 public:
  StageError(std::string stage, std::string inner_kind, const std::string& message)
      : Error(message), stage_(std::move(stage)), inner_kind_(std::move(inner_kind)) {}
  const char* kind() const noexcept override { return inner_kind_.c_str(); }
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
  std::string inner_kind_;
};

struct ManifestEntry {
  std::string path;  // relative to the output directory
  std::string sha256;
  std::uintmax_t bytes = 0;
};

struct RunManifest {
  std::string command;
  std::vector<ManifestEntry> artifacts;
  nlohmann::ordered_json to_json(const PipelineConfig& cfg) const;
};

// Runs one stage (or the whole chain for "pipeline"), writes its artifacts
// under cfg.output_dir and the manifest to manifests/<command>.json (plus
// manifest.json for "pipeline"). Stage failures surface as StageError.
RunManifest run_command(std::string_view command, const PipelineConfig& cfg);

}  // namespace facetsteer
