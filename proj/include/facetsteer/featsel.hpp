#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "facetsteer/taxonomy.hpp"
#include "json.hpp"

namespace facetsteer {

// F value reported for coordinates whose within-class sum of squares is zero
// while the class means differ.
inline constexpr double kFStatisticSentinel = 1e12;

// One-way ANOVA F per latent coordinate with k = 2 classes:
//   F = (SS_between / (k - 1)) / (SS_within / (n - k))
// Coordinates that are constant across all rows (both sums zero) get F = 0.
Eigen::VectorXd f_statistics(const Eigen::MatrixXd& codes, std::span<const Polarity> labels);

struct ProbeConfig {
  double learning_rate = 0.5;
  std::size_t epochs = 300;
  std::uint64_t seed = 0;
  double train_ratio = 0.8;

  nlohmann::ordered_json to_json() const;
  static ProbeConfig from_json(const nlohmann::json& j);
};

struct ProbeResult {
  // Logistic weights over standardized coordinates (train-split mean and
  // standard deviation); constant coordinates get weight 0.
  Eigen::VectorXd weights;
  double bias = 0.0;
  double held_out_acc = 0.0;
  std::vector<double> loss_trace;
};

// Logistic probe (positive = 1) trained by full-batch gradient descent on a
// stratified split.
ProbeResult linear_probe(const Eigen::MatrixXd& codes, std::span<const Polarity> labels, const ProbeConfig& cfg);

inline constexpr std::string_view kMaskSelectionRule =
    "rank by F descending; ties by |probe weight| descending, then lower index";

struct FeatureMask {
  std::size_t d_latent = 0;
  std::vector<std::size_t> indices;  // selected coordinates in rank order
  Eigen::VectorXd f_values;          // d_latent
  Eigen::VectorXd probe_weights;     // d_latent
  double probe_acc = 0.0;
  std::string selection_rule{kMaskSelectionRule};

  std::size_t d_steer() const { return indices.size(); }
  bool contains(std::size_t j) const;
  // Binary {0,1} vector of length d_latent.
  Eigen::VectorXd dense() const;

  // Mask artifact: {indices, d_latent, f_values (selected only), probe_acc, rule}
  // plus probe_weights for the selected coordinates. With full_vectors = true
  // the f_values/probe_weights arrays cover all d_latent coordinates instead.
  nlohmann::ordered_json to_json(bool full_vectors = false) const;
  static FeatureMask from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static FeatureMask load(const std::filesystem::path& path);

  friend bool operator==(const FeatureMask& a, const FeatureMask& b);
};

FeatureMask build_mask(const Eigen::VectorXd& f_values, const Eigen::VectorXd& probe_weights, std::size_t d_steer,
                       double probe_acc = 0.0);

// F statistics + probe + build_mask in one step.
FeatureMask select_features(const Eigen::MatrixXd& codes, std::span<const Polarity> labels, std::size_t d_steer,
                            const ProbeConfig& probe_cfg);

}  // namespace facetsteer
