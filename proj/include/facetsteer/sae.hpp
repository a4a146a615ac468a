#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "facetsteer/activations.hpp"
#include "json.hpp"

namespace facetsteer {

struct SaeConfig {
  std::size_t d_model = 32;
  std::size_t d_latent = 128;  // 4 x d_model unless configured
  double l1_coeff = 0.3;
  double learning_rate = 0.05;
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  // Missing d_latent defaults to 4 x d_model.
  static SaeConfig from_json(const nlohmann::json& j);
};

// Single-layer ReLU sparse autoencoder with pre-encoder subtraction of b_dec
// and unit-norm decoder columns:
//   z     = ReLU(W_enc (h - b_dec) + b_enc)
//   h_hat = W_dec z + b_dec
struct SaeModel {
  Eigen::MatrixXd w_enc;  // d_latent x d_model
  Eigen::VectorXd b_enc;  // d_latent
  Eigen::MatrixXd w_dec;  // d_model x d_latent
  Eigen::VectorXd b_dec;  // d_model
  SaeConfig config;
  std::vector<double> loss_trace;  // full-data objective after each epoch
  bool loss_monotone = true;       // false if any epoch rose by more than 1e-6

  std::size_t d_model() const { return static_cast<std::size_t>(b_dec.size()); }
  std::size_t d_latent() const { return static_cast<std::size_t>(b_enc.size()); }

  Eigen::VectorXd encode(const Eigen::VectorXd& h) const;
  Eigen::VectorXd decode(const Eigen::VectorXd& z) const;
  // Row-wise batch versions: n x d_model -> n x d_latent and back.
  Eigen::MatrixXd encode_rows(const Eigen::MatrixXd& h) const;
  Eigen::MatrixXd decode_rows(const Eigen::MatrixXd& z) const;

  // Weights, biases and config; sizes are checked before comparing values.
  friend bool operator==(const SaeModel& a, const SaeModel& b);
};

struct SaeObjective {
  double total = 0.0;
  double reconstruction = 0.0;  // mean ||h - h_hat||^2
  double sparsity = 0.0;        // mean ||z||_1
};

struct SaeGradients {
  SaeObjective objective;
  Eigen::MatrixXd w_enc;
  Eigen::VectorXd b_enc;
  Eigen::MatrixXd w_dec;
  Eigen::VectorXd b_dec;
};

SaeObjective sae_objective(const SaeModel& m, const Eigen::MatrixXd& batch, double l1_coeff);
SaeGradients sae_gradients(const SaeModel& m, const Eigen::MatrixXd& batch, double l1_coeff);

// Decoder columns drawn from a seeded Gaussian and normalized, encoder tied to
// the decoder transpose, b_enc = 0, b_dec = data mean.
SaeModel init_sae(const SaeConfig& cfg, const Eigen::MatrixXd& data);
SaeModel train_sae(const ActivationSet& data, const SaeConfig& cfg);
SaeModel train_sae(const Eigen::MatrixXd& data, const SaeConfig& cfg);

struct SaeMetrics {
  double recon_rel_err = 0.0;  // mean ||h - h_hat|| / ||h|| over rows with ||h|| > 0
  double mean_l0 = 0.0;        // mean count of strictly positive latents
  std::size_t dead_features = 0;

  nlohmann::ordered_json to_json() const;
};

SaeMetrics sae_metrics(const SaeModel& m, const Eigen::MatrixXd& data);
SaeMetrics sae_metrics(const SaeModel& m, const ActivationSet& data);

// Checkpoint layout (integers little-endian):
//   0   4  magic "FSTS"
//   4   4  version (u32) = 1
//   8   8  header_len (u64)
//   16  n  header JSON: {"config", "loss_trace", "loss_monotone", "tensors": [{"name","rows","cols","offset"}],
//          "payload_bytes"}; offsets are relative to the payload start
//   16+n   payload: W_enc, b_enc, W_dec, b_dec as float32 LE, row-major
// Trained weights live on the float32 grid; the round trip is exact.
std::string serialize_sae(const SaeModel& m);
SaeModel parse_sae(std::string_view bytes);
void save_sae(const SaeModel& m, const std::filesystem::path& path);
SaeModel load_sae(const std::filesystem::path& path);
// SHA-256 of the weight payload only.
std::string sae_checksum(const SaeModel& m);

}  // namespace facetsteer
