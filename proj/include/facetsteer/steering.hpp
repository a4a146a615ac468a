#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "facetsteer/taxonomy.hpp"
#include "json.hpp"

namespace facetsteer {

struct InjectionEntry {
  int layer = 0;
  Eigen::VectorXd vector;  // residual-space direction, d_model
  double alpha = 1.0;
  std::optional<FacetId> facet;
};

struct InjectionPlan {
  std::vector<InjectionEntry> entries;

  bool empty() const { return entries.empty(); }
  // At most one entry per (layer, facet), finite vectors of length d_model,
  // layers in [0, n_layers).
  void validate(std::size_t d_model, int n_layers) const;
};

// h' = h + alpha * v
Eigen::VectorXd inject(const Eigen::VectorXd& h, const InjectionEntry& entry);

// L residual blocks h <- h + tanh(A_l h + c_l) followed by a linear readout
// to K logits.
struct ToyModel {
  std::size_t d_model = 0;
  std::size_t n_classes = 0;
  std::uint64_t seed = 0;
  double block_gain = 0.25;
  std::vector<Eigen::MatrixXd> a;  // L matrices, d_model x d_model
  std::vector<Eigen::VectorXd> c;  // L biases
  Eigen::MatrixXd readout;         // K x d_model

  int n_layers() const { return static_cast<int>(a.size()); }
  int default_layer() const { return n_layers() / 2; }
};

// A entries ~ N(0, block_gain^2 / d_model), c entries ~ N(0, 0.1^2),
// readout entries ~ N(0, 1 / d_model).
ToyModel make_toy_model(std::size_t d_model, int n_layers, std::size_t n_classes, std::uint64_t seed,
                        double block_gain = 0.25);

// Toy whose readout row k is the unit vector along directions[k]; the block
// matrices are projected off those directions so shifts along them pass
// through every later block unchanged.
ToyModel make_aligned_toy(const std::vector<Eigen::VectorXd>& directions, int n_layers, std::uint64_t seed,
                          double block_gain = 0.25);

struct ToyRun {
  Eigen::VectorXd final_hidden;
  Eigen::VectorXd logits;
  std::vector<Eigen::VectorXd> trace;  // state after each block, injections included
};

// Injections for layer l are applied after block l's residual update.
ToyRun run_toy(const ToyModel& model, const Eigen::VectorXd& h0, const InjectionPlan& plan = {});

enum class SteerMode { Sae, Caa };
std::string_view steer_mode_name(SteerMode mode);
SteerMode parse_steer_mode(std::string_view name);

// Sae mode injects at `layer` only; Caa mode injects at every layer with the
// same alpha.
InjectionPlan single_vector_plan(SteerMode mode, const Eigen::VectorXd& vector, double alpha, int layer,
                                 int n_layers, std::optional<FacetId> facet = std::nullopt);

// Copy of `plan` with every entry's alpha replaced by `alpha` times its
// template value.
InjectionPlan scale_plan(const InjectionPlan& plan, double alpha);

using Metrics = std::vector<std::pair<std::string, double>>;
using SweepEval = std::function<Metrics(const ToyModel&, const InjectionPlan&)>;

struct SweepRow {
  double alpha = 0.0;
  Metrics metrics;
};

// One row per alpha; failures are rethrown naming the alpha.
std::vector<SweepRow> alpha_sweep(const ToyModel& model, const SweepEval& eval_fn, const std::vector<double>& alphas,
                                  const InjectionPlan& plan_template);

// Header "alpha,<metric names>", values with 6 significant digits.
std::string sweep_to_csv(const std::vector<SweepRow>& rows);

nlohmann::ordered_json toy_to_json(const ToyModel& model);

}  // namespace facetsteer
