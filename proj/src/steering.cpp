#include "facetsteer/steering.hpp"

#include <cmath>
#include <random>
#include <set>

#include <fmt/format.h>

#include "facetsteer/error.hpp"

namespace facetsteer {
namespace {

Eigen::MatrixXd gaussian(std::mt19937_64& rng, Eigen::Index rows, Eigen::Index cols, double stddev) {
  std::normal_distribution<double> n(0.0, stddev);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = n(rng);
  return m;
}

std::string g6(double x) { return fmt::format("{:.6g}", x); }

}  // namespace

void InjectionPlan::validate(std::size_t d_model, int n_layers) const {
  std::set<std::pair<int, std::size_t>> seen;
  for (const auto& e : entries) {
    if (e.layer < 0 || e.layer >= n_layers)
      throw PreconditionError(fmt::format("injection layer {} outside 0..{}", e.layer, n_layers - 1));
    if (static_cast<std::size_t>(e.vector.size()) != d_model)
      throw DimensionError(fmt::format("injection vector has length {}, model expects {}", e.vector.size(), d_model));
    if (!e.vector.allFinite() || !std::isfinite(e.alpha)) throw NumericError("injection vector or alpha is non-finite");
    const std::size_t key = e.facet ? e.facet->ordinal() : kFacetCount;
    if (!seen.insert({e.layer, key}).second)
      throw PreconditionError(fmt::format("more than one injection for layer {} and facet {}", e.layer,
                                          e.facet ? e.facet->name() : "<none>"));
  }
}

Eigen::VectorXd inject(const Eigen::VectorXd& h, const InjectionEntry& entry) {
  if (h.size() != entry.vector.size())
    throw DimensionError(fmt::format("inject: h has length {} but v has length {}", h.size(), entry.vector.size()));
  if (entry.alpha == 0.0) return h;
  return h + entry.alpha * entry.vector;
}

ToyModel make_toy_model(std::size_t d_model, int n_layers, std::size_t n_classes, std::uint64_t seed,
                        double block_gain) {
  if (d_model == 0 || n_layers < 1 || n_classes == 0) throw ConfigError("toy model needs d_model, layers, classes > 0");
  std::mt19937_64 rng(seed);
  ToyModel m;
  m.d_model = d_model;
  m.n_classes = n_classes;
  m.seed = seed;
  m.block_gain = block_gain;
  const auto d = static_cast<Eigen::Index>(d_model);
  for (int l = 0; l < n_layers; ++l) {
    m.a.push_back(gaussian(rng, d, d, block_gain / std::sqrt(static_cast<double>(d_model))));
    m.c.push_back(gaussian(rng, d, 1, 0.1));
  }
  m.readout = gaussian(rng, static_cast<Eigen::Index>(n_classes), d, 1.0 / std::sqrt(static_cast<double>(d_model)));
  return m;
}

ToyModel make_aligned_toy(const std::vector<Eigen::VectorXd>& directions, int n_layers, std::uint64_t seed,
                          double block_gain) {
  if (directions.empty()) throw PreconditionError("aligned toy needs at least one direction");
  const auto d = directions[0].size();
  ToyModel m = make_toy_model(static_cast<std::size_t>(d), n_layers, directions.size(), seed, block_gain);
  Eigen::MatrixXd g(d, static_cast<Eigen::Index>(directions.size()));
  for (std::size_t k = 0; k < directions.size(); ++k) {
    if (directions[k].size() != d) throw DimensionError("aligned toy directions differ in length");
    const double n = directions[k].norm();
    if (!(n > 0.0)) throw NumericError("aligned toy direction has zero norm");
    g.col(static_cast<Eigen::Index>(k)) = directions[k] / n;
    m.readout.row(static_cast<Eigen::Index>(k)) = g.col(static_cast<Eigen::Index>(k)).transpose();
  }
  const Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(d, g.cols());
  const Eigen::MatrixXd proj = Eigen::MatrixXd::Identity(d, d) - q * q.transpose();
  for (auto& a : m.a) a = a * proj;
  return m;
}

ToyRun run_toy(const ToyModel& model, const Eigen::VectorXd& h0, const InjectionPlan& plan) {
  if (static_cast<std::size_t>(h0.size()) != model.d_model)
    throw DimensionError(fmt::format("toy input has length {}, model expects {}", h0.size(), model.d_model));
  plan.validate(model.d_model, model.n_layers());
  ToyRun run;
  Eigen::VectorXd h = h0;
  for (int l = 0; l < model.n_layers(); ++l) {
    const auto li = static_cast<std::size_t>(l);
    h += (model.a[li] * h + model.c[li]).array().tanh().matrix();
    for (const auto& e : plan.entries)
      if (e.layer == l) h = inject(h, e);
    run.trace.push_back(h);
  }
  run.logits = model.readout * h;
  run.final_hidden = std::move(h);
  return run;
}

std::string_view steer_mode_name(SteerMode mode) { return mode == SteerMode::Sae ? "sae" : "caa"; }

SteerMode parse_steer_mode(std::string_view name) {
  if (name == "sae") return SteerMode::Sae;
  if (name == "caa") return SteerMode::Caa;
  throw ConfigError(fmt::format("unknown steering mode \"{}\" (expected sae or caa)", name));
}

InjectionPlan single_vector_plan(SteerMode mode, const Eigen::VectorXd& vector, double alpha, int layer,
                                 int n_layers, std::optional<FacetId> facet) {
  InjectionPlan plan;
  if (mode == SteerMode::Sae) {
    plan.entries.push_back({layer, vector, alpha, facet});
  } else {
    for (int l = 0; l < n_layers; ++l) plan.entries.push_back({l, vector, alpha, facet});
  }
  return plan;
}

InjectionPlan scale_plan(const InjectionPlan& plan, double alpha) {
  InjectionPlan out = plan;
  for (auto& e : out.entries) e.alpha *= alpha;
  return out;
}

std::vector<SweepRow> alpha_sweep(const ToyModel& model, const SweepEval& eval_fn, const std::vector<double>& alphas,
                                  const InjectionPlan& plan_template) {
  std::vector<SweepRow> rows;
  for (double alpha : alphas) {
    if (!std::isfinite(alpha)) throw PreconditionError("alpha sweep values must be finite");
    try {
      rows.push_back({alpha, eval_fn(model, scale_plan(plan_template, alpha))});
    } catch (const std::exception& e) {
      throw Error(fmt::format("alpha sweep failed at alpha={}: {}", g6(alpha), e.what()));
    }
    if (rows.size() > 1 && rows.back().metrics.size() != rows.front().metrics.size())
      throw SchemaError(fmt::format("alpha sweep: metric columns changed at alpha={}", g6(alpha)));
  }
  return rows;
}

std::string sweep_to_csv(const std::vector<SweepRow>& rows) {
  std::string out = "alpha";
  if (!rows.empty())
    for (const auto& [name, value] : rows.front().metrics) out += "," + name;
  out += '\n';
  for (const auto& row : rows) {
    out += g6(row.alpha);
    for (const auto& [name, value] : row.metrics) out += "," + g6(value);
    out += '\n';
  }
  return out;
}

nlohmann::ordered_json toy_to_json(const ToyModel& model) {
  return {{"d_model", model.d_model},
          {"n_layers", model.n_layers()},
          {"n_classes", model.n_classes},
          {"seed", model.seed},
          {"block_gain", model.block_gain}};
}

}  // namespace facetsteer
