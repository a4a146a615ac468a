#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "facetsteer/activations.hpp"
#include "facetsteer/featsel.hpp"
#include "facetsteer/sae.hpp"
#include "facetsteer/taxonomy.hpp"
#include "json.hpp"

namespace facetsteer {

struct Centroids {
  Eigen::VectorXd mu_pos;  // mean SAE code of positive samples
  Eigen::VectorXd mu_neg;  // mean SAE code of negative samples
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
};

Centroids compute_centroids(const Eigen::MatrixXd& codes, std::span<const Polarity> labels);

// v = (mu_pos - mu_neg) restricted to the mask; off-mask coordinates are 0.
Eigen::VectorXd init_cv(const Centroids& c, const FeatureMask& mask);

struct LossConfig {
  double beta = 1.0;     // weight of the distance term
  double lambda = 1e-3;  // weight of ||v (.) m||^2
  double m_pos = 0.2;    // additive angular margin on the positive prototype
  double m_neg = 0.1;    // additive cosine margin on the negative prototype
  double s = 16.0;       // logit scale (temperature 1/s); s = 0 makes the CE term constant
  double clamp_eps = 1e-6;
  bool use_ce = true;  // false drops the prototype CE term (the "without CL" ablation)

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static LossConfig from_json(const nlohmann::json& j);
};

struct LossBreakdown {
  double l_ce = 0.0;
  double l_dist = 0.0;
  double l_reg = 0.0;
  double total = 0.0;  // l_ce + beta * l_dist + lambda * l_reg

  nlohmann::ordered_json to_json() const;
  static LossBreakdown from_json(const nlohmann::json& j);
  friend bool operator==(const LossBreakdown&, const LossBreakdown&) = default;
};

// The contrastive objective for one facet. Construction precomputes the
// normalized centroids and their masked, normalized restrictions.
//
// For each negative code z_i in the batch:
//   z+    = (z_i + v) / ||z_i + v||
//   c+    = <z+, mu_pos/||mu_pos||> clamped to [-1 + eps, 1 - eps]
//   c~+   = cos(arccos(c+) + m_pos),  c~- = <z+, mu_neg/||mu_neg||> + m_neg
//   ce_i  = -log softmax([s c~+, s c~-])[0]
//   dist_i = ||P z+ - u+|| - ||P z+ - u-||,  u+- = P mu+- / ||P mu+-||
// where P keeps the masked coordinates. The CE and distance terms are batch
// means; the regularizer is ||v (.) m||^2.
class CvObjective {
 public:
  CvObjective(const Centroids& centroids, const FeatureMask& mask, const LossConfig& cfg);

  // Fills `grad` (projected onto the mask) when non-null.
  LossBreakdown evaluate(const Eigen::VectorXd& v, const Eigen::MatrixXd& batch, Eigen::VectorXd* grad = nullptr) const;

  const Eigen::VectorXd& mask() const { return mask_; }
  const std::vector<Eigen::Index>& active() const { return active_; }
  const Eigen::VectorXd& pos_prototype() const { return p_; }
  const Eigen::VectorXd& neg_prototype() const { return q_; }
  const LossConfig& config() const { return cfg_; }

 private:
  LossConfig cfg_;
  Eigen::VectorXd mask_;
  std::vector<Eigen::Index> active_;
  Eigen::VectorXd p_, q_;          // normalized centroids
  Eigen::VectorXd u_pos_, u_neg_;  // masked, normalized centroids
};

LossBreakdown loss_total(const Eigen::VectorXd& v, const Eigen::MatrixXd& batch, const Centroids& c,
                         const FeatureMask& mask, const LossConfig& cfg);
Eigen::VectorXd grad_loss(const Eigen::VectorXd& v, const Eigen::MatrixXd& batch, const Centroids& c,
                          const FeatureMask& mask, const LossConfig& cfg);
// Central differences over the active coordinates, zero elsewhere.
Eigen::VectorXd fd_grad_oracle(const Eigen::VectorXd& v, const Eigen::MatrixXd& batch, const Centroids& c,
                               const FeatureMask& mask, const LossConfig& cfg, double step);
// max_i |a_i - b_i| / max(||a||_inf, ||b||_inf); 0 when both are zero.
double gradient_relative_error(const Eigen::VectorXd& analytic, const Eigen::VectorXd& numeric);

struct SimilarityStats {
  double pos = 0.0;  // mean <z+, mu_pos/||mu_pos||>
  double neg = 0.0;  // mean <z+, mu_neg/||mu_neg||>
};

SimilarityStats centroid_similarities(const Eigen::VectorXd& v, const Eigen::MatrixXd& codes, const Centroids& c);

struct TrainOptions {
  double learning_rate = 0.05;
  std::size_t iterations = 200;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  // Fraction of negatives withheld from centroids and batches; similarities
  // on them are reported before and after training.
  double holdout_fraction = 0.2;

  nlohmann::ordered_json to_json() const;
  static TrainOptions from_json(const nlohmann::json& j);
};

struct TrainingMeta {
  std::uint64_t seed = 0;
  std::size_t iterations = 0;
  LossBreakdown initial_loss;
  LossBreakdown final_loss;
  LossConfig loss_config;
  TrainOptions options;
  std::size_t n_pos = 0;
  std::size_t n_train_neg = 0;
  std::size_t n_heldout_neg = 0;
  SimilarityStats heldout_initial;
  SimilarityStats heldout_final;

  nlohmann::ordered_json to_json() const;
  static TrainingMeta from_json(const nlohmann::json& j);
};

struct ControlVector {
  FacetId facet;
  Eigen::VectorXd v;        // d_latent, zero off the mask
  FeatureMask mask;
  Eigen::VectorXd decoded;  // W_dec v, d_model
  int layer = 0;
  std::string model_tag;
  std::string sae_checksum;
  TrainingMeta meta;

  friend bool operator==(const ControlVector& a, const ControlVector& b);
};

// Called after every projected step with the iteration number (1-based) and
// the current v.
using StepObserver = std::function<void(std::size_t, const Eigen::VectorXd&)>;

ControlVector train_cv(const SaeModel& sae, const ActivationSet& acts, FacetId facet, const FeatureMask& mask,
                       const LossConfig& cfg, const TrainOptions& opt, const StepObserver& observer = {});

// Residual-space contrastive activation addition: mean(h | pos) - mean(h | neg).
Eigen::VectorXd caa_vector(const ActivationSet& acts, FacetId facet);

// Codes and polarity labels of one facet's samples, in record order.
struct FacetCodes {
  Eigen::MatrixXd codes;
  std::vector<Polarity> labels;
  std::vector<std::string> ids;
};
FacetCodes encode_facet(const SaeModel& sae, const ActivationSet& acts, FacetId facet);

nlohmann::ordered_json cv_to_json(const ControlVector& cv);
ControlVector cv_from_json(const nlohmann::json& j);
void export_cv(const ControlVector& cv, const std::filesystem::path& path);
ControlVector import_cv(const std::filesystem::path& path);

}  // namespace facetsteer
