#include "facetsteer/cvtrain.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include <fmt/format.h>

#include "facetsteer/error.hpp"

namespace facetsteer {
namespace {

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

const nlohmann::json& require(const nlohmann::json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end()) throw SchemaError(fmt::format("control vector file: missing key \"{}\"", key));
  return *it;
}

std::vector<double> to_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

Eigen::VectorXd from_std(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

template <typename A, typename B>
bool same_vector(const A& a, const B& b) {
  return a.size() == b.size() && (a.array() == b.array()).all();
}

nlohmann::ordered_json sims_json(const SimilarityStats& s) { return {{"pos", s.pos}, {"neg", s.neg}}; }
SimilarityStats sims_from(const nlohmann::json& j) { return {j.at("pos").get<double>(), j.at("neg").get<double>()}; }

}  // namespace

Centroids compute_centroids(const Eigen::MatrixXd& codes, std::span<const Polarity> labels) {
  if (static_cast<std::size_t>(codes.rows()) != labels.size())
    throw DimensionError(fmt::format("{} code rows but {} labels", codes.rows(), labels.size()));
  Centroids c;
  c.mu_pos = Eigen::VectorXd::Zero(codes.cols());
  c.mu_neg = Eigen::VectorXd::Zero(codes.cols());
  for (Eigen::Index i = 0; i < codes.rows(); ++i) {
    if (labels[static_cast<std::size_t>(i)] == Polarity::Positive) {
      c.mu_pos += codes.row(i).transpose();
      ++c.n_pos;
    } else {
      c.mu_neg += codes.row(i).transpose();
      ++c.n_neg;
    }
  }
  if (c.n_pos == 0) throw PreconditionError("compute_centroids: no positive samples");
  if (c.n_neg == 0) throw PreconditionError("compute_centroids: no negative samples");
  c.mu_pos /= static_cast<double>(c.n_pos);
  c.mu_neg /= static_cast<double>(c.n_neg);
  return c;
}

Eigen::VectorXd init_cv(const Centroids& c, const FeatureMask& mask) {
  if (c.mu_pos.size() != c.mu_neg.size() || static_cast<std::size_t>(c.mu_pos.size()) != mask.d_latent)
    throw DimensionError("init_cv: centroid and mask dimensions disagree");
  Eigen::VectorXd v = Eigen::VectorXd::Zero(c.mu_pos.size());
  for (std::size_t j : mask.indices) {
    const auto k = static_cast<Eigen::Index>(j);
    v[k] = c.mu_pos[k] - c.mu_neg[k];
  }
  return v;
}

void LossConfig::validate() const {
  if (!(beta >= 0.0)) throw ConfigError("loss.beta must be >= 0");
  if (!(lambda >= 0.0)) throw ConfigError("loss.lambda must be >= 0");
  if (!(m_pos > 0.0)) throw ConfigError("loss.m_pos must be > 0");
  if (!(m_neg > 0.0)) throw ConfigError("loss.m_neg must be > 0");
  if (!(s >= 0.0)) throw ConfigError("loss.s must be >= 0");
  if (!(clamp_eps > 0.0 && clamp_eps < 1.0)) throw ConfigError("loss.clamp_eps must be in (0,1)");
}

nlohmann::ordered_json LossConfig::to_json() const {
  return {{"beta", beta}, {"lambda", lambda},       {"m_pos", m_pos},  {"m_neg", m_neg},
          {"s", s},       {"clamp_eps", clamp_eps}, {"use_ce", use_ce}};
}

LossConfig LossConfig::from_json(const nlohmann::json& j) {
  LossConfig c;
  try {
    c.beta = j.value("beta", c.beta);
    c.lambda = j.value("lambda", c.lambda);
    c.m_pos = j.value("m_pos", c.m_pos);
    c.m_neg = j.value("m_neg", c.m_neg);
    c.s = j.value("s", c.s);
    c.clamp_eps = j.value("clamp_eps", c.clamp_eps);
    c.use_ce = j.value("use_ce", c.use_ce);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("loss config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::ordered_json LossBreakdown::to_json() const {
  return {{"l_ce", l_ce}, {"l_dist", l_dist}, {"l_reg", l_reg}, {"total", total}};
}

LossBreakdown LossBreakdown::from_json(const nlohmann::json& j) {
  return {j.at("l_ce").get<double>(), j.at("l_dist").get<double>(), j.at("l_reg").get<double>(),
          j.at("total").get<double>()};
}

CvObjective::CvObjective(const Centroids& centroids, const FeatureMask& mask, const LossConfig& cfg)
    : cfg_(cfg), mask_(mask.dense()) {
  cfg_.validate();
  const auto d = centroids.mu_pos.size();
  if (centroids.mu_neg.size() != d || static_cast<std::size_t>(d) != mask.d_latent)
    throw DimensionError("centroid and mask dimensions disagree");
  for (std::size_t j : mask.indices) active_.push_back(static_cast<Eigen::Index>(j));
  std::sort(active_.begin(), active_.end());

  const double np = centroids.mu_pos.norm(), nn = centroids.mu_neg.norm();
  if (!(np > 0.0) || !(nn > 0.0)) throw NumericError("a class centroid has zero norm");
  p_ = centroids.mu_pos / np;
  q_ = centroids.mu_neg / nn;
  u_pos_ = centroids.mu_pos.cwiseProduct(mask_);
  u_neg_ = centroids.mu_neg.cwiseProduct(mask_);
  const double up = u_pos_.norm(), un = u_neg_.norm();
  if (!(up > 0.0) || !(un > 0.0)) throw NumericError("a class centroid is zero on every masked coordinate");
  u_pos_ /= up;
  u_neg_ /= un;
}

LossBreakdown CvObjective::evaluate(const Eigen::VectorXd& v, const Eigen::MatrixXd& batch,
                                    Eigen::VectorXd* grad) const {
  const auto d = mask_.size();
  if (v.size() != d || batch.cols() != d)
    throw DimensionError(fmt::format("objective expects d_latent = {}, got v of {} and batch of {}", d, v.size(),
                                     batch.cols()));
  if (batch.rows() < 1) throw PreconditionError("objective needs a nonempty batch");

  const double lo = -1.0 + cfg_.clamp_eps, hi = 1.0 - cfg_.clamp_eps;
  const double inv_b = 1.0 / static_cast<double>(batch.rows());
  LossBreakdown out;
  if (grad) *grad = Eigen::VectorXd::Zero(d);
  Eigen::VectorXd g_zp(d);

  for (Eigen::Index i = 0; i < batch.rows(); ++i) {
    const Eigen::VectorXd a = batch.row(i).transpose() + v;
    const double r = a.norm();
    if (!(r > 0.0) || !std::isfinite(r))
      throw NumericError(fmt::format("||z + v|| is zero or non-finite for batch row {}", i));
    const Eigen::VectorXd zp = a / r;
    g_zp.setZero();

    if (cfg_.use_ce) {
      const double c_pos = zp.dot(p_);
      const double c_neg = zp.dot(q_);
      const bool clamped = c_pos < lo || c_pos > hi;
      const double cc = std::clamp(c_pos, lo, hi);
      const double theta = std::acos(cc);
      const double ct_pos = std::cos(theta + cfg_.m_pos);
      const double ct_neg = c_neg + cfg_.m_neg;
      const double x = cfg_.s * (ct_neg - ct_pos);
      out.l_ce += softplus(x);
      if (grad) {
        const double p_neg = sigmoid(x);
        const double dct_pos = clamped ? 0.0 : std::sin(theta + cfg_.m_pos) / std::sin(theta);
        g_zp += (-cfg_.s * p_neg * dct_pos) * p_ + (cfg_.s * p_neg) * q_;
      }
    }

    const Eigen::VectorXd y = zp.cwiseProduct(mask_);
    const Eigen::VectorXd to_pos = y - u_pos_, to_neg = y - u_neg_;
    const double dp = to_pos.norm(), dn = to_neg.norm();
    out.l_dist += dp - dn;
    if (grad && cfg_.beta != 0.0) {
      if (dp > 0.0) g_zp += (cfg_.beta / dp) * to_pos;
      if (dn > 0.0) g_zp -= (cfg_.beta / dn) * to_neg;
    }

    if (grad) *grad += (g_zp - g_zp.dot(zp) * zp) / r;
  }

  out.l_ce *= inv_b;
  out.l_dist *= inv_b;
  const Eigen::VectorXd vm = v.cwiseProduct(mask_);
  out.l_reg = vm.squaredNorm();
  out.total = out.l_ce + cfg_.beta * out.l_dist + cfg_.lambda * out.l_reg;
  if (!std::isfinite(out.total)) throw NumericError("contrastive objective is non-finite");

  if (grad) {
    *grad *= inv_b;
    *grad += 2.0 * cfg_.lambda * vm;
    *grad = grad->cwiseProduct(mask_);
  }
  return out;
}

LossBreakdown loss_total(const Eigen::VectorXd& v, const Eigen::MatrixXd& batch, const Centroids& c,
                         const FeatureMask& mask, const LossConfig& cfg) {
  return CvObjective(c, mask, cfg).evaluate(v, batch);
}

Eigen::VectorXd grad_loss(const Eigen::VectorXd& v, const Eigen::MatrixXd& batch, const Centroids& c,
                          const FeatureMask& mask, const LossConfig& cfg) {
  Eigen::VectorXd g;
  CvObjective(c, mask, cfg).evaluate(v, batch, &g);
  return g;
}

Eigen::VectorXd fd_grad_oracle(const Eigen::VectorXd& v, const Eigen::MatrixXd& batch, const Centroids& c,
                               const FeatureMask& mask, const LossConfig& cfg, double step) {
  if (!(step > 0.0)) throw PreconditionError("finite-difference step must be positive");
  const CvObjective objective(c, mask, cfg);
  Eigen::VectorXd g = Eigen::VectorXd::Zero(v.size());
  Eigen::VectorXd probe = v;
  for (Eigen::Index j : objective.active()) {
    probe[j] = v[j] + step;
    const double up = objective.evaluate(probe, batch).total;
    probe[j] = v[j] - step;
    const double down = objective.evaluate(probe, batch).total;
    probe[j] = v[j];
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NumericError(fmt::format("non-finite loss at finite-difference probe {}", j));
    g[j] = (up - down) / (2.0 * step);
  }
  return g;
}

double gradient_relative_error(const Eigen::VectorXd& analytic, const Eigen::VectorXd& numeric) {
  if (analytic.size() != numeric.size()) throw DimensionError("gradient_relative_error: length mismatch");
  if (analytic.size() == 0) return 0.0;
  const double scale = std::max(analytic.lpNorm<Eigen::Infinity>(), numeric.lpNorm<Eigen::Infinity>());
  if (scale == 0.0) return 0.0;
  return (analytic - numeric).lpNorm<Eigen::Infinity>() / scale;
}

SimilarityStats centroid_similarities(const Eigen::VectorXd& v, const Eigen::MatrixXd& codes, const Centroids& c) {
  if (codes.rows() == 0) throw PreconditionError("centroid_similarities: no codes");
  const Eigen::VectorXd p = c.mu_pos.normalized(), q = c.mu_neg.normalized();
  SimilarityStats s;
  for (Eigen::Index i = 0; i < codes.rows(); ++i) {
    const Eigen::VectorXd zp = (codes.row(i).transpose() + v).normalized();
    s.pos += zp.dot(p);
    s.neg += zp.dot(q);
  }
  s.pos /= static_cast<double>(codes.rows());
  s.neg /= static_cast<double>(codes.rows());
  return s;
}

nlohmann::ordered_json TrainOptions::to_json() const {
  return {{"learning_rate", learning_rate}, {"iterations", iterations}, {"batch_size", batch_size},
          {"seed", seed},                   {"holdout_fraction", holdout_fraction}};
}

TrainOptions TrainOptions::from_json(const nlohmann::json& j) {
  TrainOptions o;
  try {
    o.learning_rate = j.value("learning_rate", o.learning_rate);
    o.iterations = j.value("iterations", o.iterations);
    o.batch_size = j.value("batch_size", o.batch_size);
    o.seed = j.value("seed", o.seed);
    o.holdout_fraction = j.value("holdout_fraction", o.holdout_fraction);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("cv training options: ") + e.what());
  }
  if (o.batch_size == 0) throw ConfigError("cv batch_size must be positive");
  if (!(o.learning_rate >= 0.0)) throw ConfigError("cv learning_rate must be >= 0");
  if (!(o.holdout_fraction >= 0.0 && o.holdout_fraction < 1.0)) throw ConfigError("cv holdout_fraction must be in [0,1)");
  return o;
}

nlohmann::ordered_json TrainingMeta::to_json() const {
  nlohmann::ordered_json j;
  j["seed"] = seed;
  j["iterations"] = iterations;
  j["initial_loss"] = initial_loss.to_json();
  j["final_loss"] = final_loss.to_json();
  j["loss_config"] = loss_config.to_json();
  j["options"] = options.to_json();
  j["n_pos"] = n_pos;
  j["n_train_neg"] = n_train_neg;
  j["n_heldout_neg"] = n_heldout_neg;
  j["heldout_initial"] = sims_json(heldout_initial);
  j["heldout_final"] = sims_json(heldout_final);
  return j;
}

TrainingMeta TrainingMeta::from_json(const nlohmann::json& j) {
  TrainingMeta m;
  m.seed = j.at("seed").get<std::uint64_t>();
  m.iterations = j.at("iterations").get<std::size_t>();
  m.initial_loss = LossBreakdown::from_json(j.at("initial_loss"));
  m.final_loss = LossBreakdown::from_json(j.at("final_loss"));
  m.loss_config = LossConfig::from_json(j.at("loss_config"));
  m.options = TrainOptions::from_json(j.at("options"));
  m.n_pos = j.at("n_pos").get<std::size_t>();
  m.n_train_neg = j.at("n_train_neg").get<std::size_t>();
  m.n_heldout_neg = j.at("n_heldout_neg").get<std::size_t>();
  m.heldout_initial = sims_from(j.at("heldout_initial"));
  m.heldout_final = sims_from(j.at("heldout_final"));
  return m;
}

bool operator==(const ControlVector& a, const ControlVector& b) {
  return a.facet == b.facet && same_vector(a.v, b.v) && a.mask == b.mask && same_vector(a.decoded, b.decoded) &&
         a.layer == b.layer && a.model_tag == b.model_tag && a.sae_checksum == b.sae_checksum &&
         a.meta.to_json() == b.meta.to_json();
}

FacetCodes encode_facet(const SaeModel& sae, const ActivationSet& acts, FacetId facet) {
  FacetCodes out;
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < acts.records.size(); ++i) {
    const auto& r = acts.records[i];
    if (r.facet == facet && r.polarity) {
      rows.push_back(i);
      out.labels.push_back(*r.polarity);
      out.ids.push_back(r.item_id);
    }
  }
  Eigen::MatrixXd h(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(acts.d_model));
  for (std::size_t k = 0; k < rows.size(); ++k)
    for (std::size_t j = 0; j < acts.d_model; ++j)
      h(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) = acts.records[rows[k]].hidden[j];
  out.codes = rows.empty() ? Eigen::MatrixXd(0, static_cast<Eigen::Index>(sae.d_latent())) : sae.encode_rows(h);
  return out;
}

ControlVector train_cv(const SaeModel& sae, const ActivationSet& acts, FacetId facet, const FeatureMask& mask,
                       const LossConfig& cfg, const TrainOptions& opt, const StepObserver& observer) {
  cfg.validate();
  if (acts.d_model != sae.d_model())
    throw DimensionError(fmt::format("activations have d_model = {} but the SAE expects {}", acts.d_model,
                                     sae.d_model()));
  if (mask.d_latent != sae.d_latent()) throw DimensionError("mask d_latent does not match the SAE");
  if (opt.batch_size == 0) throw ConfigError("cv batch_size must be positive");

  const FacetCodes fc = encode_facet(sae, acts, facet);
  std::vector<Eigen::Index> pos_rows, neg_rows;
  for (std::size_t i = 0; i < fc.labels.size(); ++i)
    (fc.labels[i] == Polarity::Positive ? pos_rows : neg_rows).push_back(static_cast<Eigen::Index>(i));
  if (pos_rows.empty()) throw PreconditionError(fmt::format("facet \"{}\" has no positive samples", facet.name()));
  if (neg_rows.empty()) throw PreconditionError(fmt::format("facet \"{}\" has no negative samples", facet.name()));

  std::mt19937_64 rng(opt.seed);
  for (std::size_t i = neg_rows.size(); i > 1; --i) std::swap(neg_rows[i - 1], neg_rows[rng() % i]);
  std::size_t n_holdout = static_cast<std::size_t>(opt.holdout_fraction * static_cast<double>(neg_rows.size()));
  if (n_holdout >= neg_rows.size()) n_holdout = neg_rows.size() - 1;
  const std::vector<Eigen::Index> heldout(neg_rows.end() - static_cast<std::ptrdiff_t>(n_holdout), neg_rows.end());
  neg_rows.resize(neg_rows.size() - n_holdout);
  std::sort(neg_rows.begin(), neg_rows.end());

  // Centroids from positives and the training negatives only.
  std::vector<Eigen::Index> centroid_rows = pos_rows;
  centroid_rows.insert(centroid_rows.end(), neg_rows.begin(), neg_rows.end());
  Eigen::MatrixXd centroid_codes(static_cast<Eigen::Index>(centroid_rows.size()), fc.codes.cols());
  std::vector<Polarity> centroid_labels;
  for (std::size_t k = 0; k < centroid_rows.size(); ++k) {
    centroid_codes.row(static_cast<Eigen::Index>(k)) = fc.codes.row(centroid_rows[k]);
    centroid_labels.push_back(fc.labels[static_cast<std::size_t>(centroid_rows[k])]);
  }
  const Centroids centroids = compute_centroids(centroid_codes, centroid_labels);
  const CvObjective objective(centroids, mask, cfg);

  Eigen::MatrixXd train_neg(static_cast<Eigen::Index>(neg_rows.size()), fc.codes.cols());
  for (std::size_t k = 0; k < neg_rows.size(); ++k) train_neg.row(static_cast<Eigen::Index>(k)) = fc.codes.row(neg_rows[k]);
  const Eigen::MatrixXd& eval_neg_src = heldout.empty() ? train_neg : fc.codes;
  Eigen::MatrixXd eval_neg;
  if (heldout.empty()) {
    eval_neg = eval_neg_src;
  } else {
    eval_neg.resize(static_cast<Eigen::Index>(heldout.size()), fc.codes.cols());
    for (std::size_t k = 0; k < heldout.size(); ++k) eval_neg.row(static_cast<Eigen::Index>(k)) = fc.codes.row(heldout[k]);
  }

  ControlVector cv;
  cv.facet = facet;
  cv.mask = mask;
  cv.layer = acts.layer;
  cv.model_tag = acts.model_tag;
  cv.sae_checksum = sae_checksum(sae);
  cv.v = init_cv(centroids, mask);

  TrainingMeta& meta = cv.meta;
  meta.seed = opt.seed;
  meta.iterations = opt.iterations;
  meta.loss_config = cfg;
  meta.options = opt;
  meta.n_pos = pos_rows.size();
  meta.n_train_neg = neg_rows.size();
  meta.n_heldout_neg = heldout.size();
  meta.initial_loss = objective.evaluate(cv.v, train_neg);
  meta.heldout_initial = centroid_similarities(cv.v, eval_neg, centroids);

  const Eigen::VectorXd m = objective.mask();
  Eigen::MatrixXd batch(static_cast<Eigen::Index>(opt.batch_size), fc.codes.cols());
  Eigen::VectorXd grad;
  for (std::size_t it = 1; it <= opt.iterations; ++it) {
    for (Eigen::Index b = 0; b < batch.rows(); ++b)
      batch.row(b) = train_neg.row(static_cast<Eigen::Index>(rng() % neg_rows.size()));
    const LossBreakdown loss = objective.evaluate(cv.v, batch, &grad);
    if (!std::isfinite(loss.total))
      throw NumericError(fmt::format("cv training diverged at iteration {} (facet \"{}\")", it, facet.name()));
    cv.v -= opt.learning_rate * grad;
    for (Eigen::Index j = 0; j < cv.v.size(); ++j)
      if (m[j] == 0.0) cv.v[j] = 0.0;
    if (!cv.v.allFinite())
      throw NumericError(fmt::format("cv training diverged at iteration {} (facet \"{}\")", it, facet.name()));
    if (observer) observer(it, cv.v);
  }

  meta.final_loss = objective.evaluate(cv.v, train_neg);
  meta.heldout_final = centroid_similarities(cv.v, eval_neg, centroids);
  cv.decoded = sae.w_dec * cv.v;
  return cv;
}

Eigen::VectorXd caa_vector(const ActivationSet& acts, FacetId facet) {
  Eigen::VectorXd sum_pos = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(acts.d_model));
  Eigen::VectorXd sum_neg = sum_pos;
  std::size_t n_pos = 0, n_neg = 0;
  for (const auto& r : acts.records) {
    if (r.facet != facet || !r.polarity) continue;
    auto& target = *r.polarity == Polarity::Positive ? sum_pos : sum_neg;
    for (std::size_t j = 0; j < acts.d_model; ++j) target[static_cast<Eigen::Index>(j)] += r.hidden[j];
    (*r.polarity == Polarity::Positive ? n_pos : n_neg)++;
  }
  if (n_pos == 0) throw PreconditionError(fmt::format("caa: facet \"{}\" has no positive samples", facet.name()));
  if (n_neg == 0) throw PreconditionError(fmt::format("caa: facet \"{}\" has no negative samples", facet.name()));
  return sum_pos / static_cast<double>(n_pos) - sum_neg / static_cast<double>(n_neg);
}

nlohmann::ordered_json cv_to_json(const ControlVector& cv) {
  nlohmann::ordered_json j;
  j["facet"] = std::string(cv.facet.name());
  j["d_latent"] = cv.v.size();
  std::vector<std::size_t> idx(cv.mask.indices.begin(), cv.mask.indices.end());
  std::sort(idx.begin(), idx.end());
  std::vector<double> values;
  for (std::size_t k : idx) values.push_back(cv.v[static_cast<Eigen::Index>(k)]);
  j["mask_indices"] = idx;
  j["values"] = values;
  j["decoded"] = to_std(cv.decoded);
  j["layer"] = cv.layer;
  j["model_tag"] = cv.model_tag;
  j["sae_checksum"] = cv.sae_checksum;
  j["training_meta"] = cv.meta.to_json();
  j["mask"] = cv.mask.to_json(/*full_vectors=*/true);
  return j;
}

ControlVector cv_from_json(const nlohmann::json& j) {
  ControlVector cv;
  try {
    cv.facet = parse_facet(require(j, "facet").get<std::string>());
    const auto d_latent = require(j, "d_latent").get<std::size_t>();
    const auto idx = require(j, "mask_indices").get<std::vector<std::size_t>>();
    const auto values = require(j, "values").get<std::vector<double>>();
    cv.decoded = from_std(require(j, "decoded").get<std::vector<double>>());
    cv.layer = require(j, "layer").get<int>();
    cv.model_tag = require(j, "model_tag").get<std::string>();
    cv.sae_checksum = require(j, "sae_checksum").get<std::string>();
    cv.meta = TrainingMeta::from_json(require(j, "training_meta"));
    cv.mask = FeatureMask::from_json(require(j, "mask"));

    if (idx.size() != values.size())
      throw SchemaError(fmt::format("control vector file: {} mask_indices but {} values", idx.size(), values.size()));
    if (cv.mask.d_latent != d_latent) throw SchemaError("control vector file: mask d_latent differs from d_latent");
    cv.v = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d_latent));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      if (idx[k] >= d_latent)
        throw SchemaError(fmt::format("control vector file: index {} out of range (d_latent = {})", idx[k], d_latent));
      if (values[k] != 0.0 && !cv.mask.contains(idx[k]))
        throw SchemaError(fmt::format("control vector file: nonzero value {} at off-mask coordinate {}", values[k],
                                      idx[k]));
      cv.v[static_cast<Eigen::Index>(idx[k])] = values[k];
    }
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("control vector file: ") + e.what());
  }
  return cv;
}

void export_cv(const ControlVector& cv, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write control vector: " + path.string());
  out << cv_to_json(cv).dump(1) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

ControlVector import_cv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open control vector: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("control vector file: ") + e.what());
  }
  return cv_from_json(j);
}

}  // namespace facetsteer
