#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "facetsteer/corpus.hpp"
#include "json.hpp"

namespace facetsteer {

// 30-way facet classifier over hashed bag-of-tokens features. Everything that
// influences predictions is echoed into the artifact.
struct ClassifierConfig {
  std::string tokenizer = "lowercase-split-space-punct";
  std::size_t hash_dim = 1024;
  double learning_rate = 0.5;
  std::size_t epochs = 300;
  std::uint64_t seed = 0;
  double train_ratio = 0.8;

  nlohmann::ordered_json to_json() const;
  static ClassifierConfig from_json(const nlohmann::json& j);
};

struct CorpusSplit {
  FacetCorpus train;
  FacetCorpus held_out;
};

// Stratified per facet: items of each facet are shuffled with `seed` and the
// first round(ratio * n) (clamped to [1, n-1]) go to train.
CorpusSplit split_corpus(const FacetCorpus& corpus, double train_ratio, std::uint64_t seed);

// FNV-1a, 64-bit. Stable across platforms, unlike std::hash.
std::uint64_t fnv1a64(std::string_view bytes);

class LeakageClassifier {
 public:
  ClassifierConfig config;
  Eigen::MatrixXd weights;  // kFacetCount x hash_dim
  Eigen::VectorXd bias;     // kFacetCount
  std::vector<std::string> train_ids;
  std::vector<double> loss_trace;  // mean cross-entropy per epoch

  Eigen::VectorXd logits(std::string_view text) const;
  FacetId predict(std::string_view text) const;

  nlohmann::ordered_json to_json() const;
  static LeakageClassifier from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static LeakageClassifier load(const std::filesystem::path& path);
};

// Trains on the train side of split_corpus(corpus, cfg.train_ratio, cfg.seed).
LeakageClassifier train_leakage_classifier(const FacetCorpus& corpus, const ClassifierConfig& cfg);

struct LeakageReport {
  double macro_f1 = 0.0;
  double accuracy = 0.0;
  // confusion[true][predicted]
  std::array<std::array<std::size_t, kFacetCount>, kFacetCount> confusion{};
  double cross_dimension_rate = 0.0;
  std::size_t total = 0;
  std::size_t misclassified = 0;
  // NaN for facets with neither support nor predictions (excluded from the macro mean).
  std::array<double, kFacetCount> per_facet_f1{};

  nlohmann::ordered_json to_json() const;
};

LeakageReport report_from_predictions(const std::vector<FacetId>& truth, const std::vector<FacetId>& predicted);
LeakageReport evaluate_leakage(const LeakageClassifier& clf, const FacetCorpus& held_out);

}  // namespace facetsteer
