#include "facetsteer/featsel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <fmt/format.h>

#include "facetsteer/error.hpp"

namespace facetsteer {
namespace {

void check_labels(const Eigen::MatrixXd& codes, std::span<const Polarity> labels) {
  if (static_cast<std::size_t>(codes.rows()) != labels.size())
    throw DimensionError(fmt::format("{} code rows but {} labels", codes.rows(), labels.size()));
}

Eigen::VectorXd vector_from_json(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

Eigen::VectorXd f_statistics(const Eigen::MatrixXd& codes, std::span<const Polarity> labels) {
  check_labels(codes, labels);
  const auto n = codes.rows();
  const auto d = codes.cols();
  if (n < 3) throw PreconditionError("F statistics need at least 3 rows");
  Eigen::VectorXd sum_pos = Eigen::VectorXd::Zero(d), sum_neg = Eigen::VectorXd::Zero(d);
  std::size_t n_pos = 0, n_neg = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (labels[static_cast<std::size_t>(i)] == Polarity::Positive) {
      sum_pos += codes.row(i).transpose();
      ++n_pos;
    } else {
      sum_neg += codes.row(i).transpose();
      ++n_neg;
    }
  }
  if (n_pos == 0 || n_neg == 0) throw PreconditionError("F statistics need both classes to be nonempty");
  const Eigen::VectorXd mean_pos = sum_pos / static_cast<double>(n_pos);
  const Eigen::VectorXd mean_neg = sum_neg / static_cast<double>(n_neg);
  const Eigen::VectorXd grand = (sum_pos + sum_neg) / static_cast<double>(n);

  const Eigen::VectorXd between = static_cast<double>(n_pos) * (mean_pos - grand).array().square().matrix() +
                                  static_cast<double>(n_neg) * (mean_neg - grand).array().square().matrix();
  Eigen::VectorXd within = Eigen::VectorXd::Zero(d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& mean = labels[static_cast<std::size_t>(i)] == Polarity::Positive ? mean_pos : mean_neg;
    within += (codes.row(i).transpose() - mean).array().square().matrix();
  }

  constexpr double k = 2.0;
  Eigen::VectorXd f(d);
  for (Eigen::Index j = 0; j < d; ++j) {
    if (within[j] == 0.0)
      f[j] = between[j] == 0.0 ? 0.0 : kFStatisticSentinel;
    else
      f[j] = (between[j] / (k - 1.0)) / (within[j] / (static_cast<double>(n) - k));
  }
  return f;
}

nlohmann::ordered_json ProbeConfig::to_json() const {
  return {{"learning_rate", learning_rate}, {"epochs", epochs}, {"seed", seed}, {"train_ratio", train_ratio}};
}

ProbeConfig ProbeConfig::from_json(const nlohmann::json& j) {
  ProbeConfig c;
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.epochs = j.value("epochs", c.epochs);
  c.seed = j.value("seed", c.seed);
  c.train_ratio = j.value("train_ratio", c.train_ratio);
  if (!(c.train_ratio > 0.0 && c.train_ratio < 1.0)) throw ConfigError("probe train_ratio must be in (0,1)");
  return c;
}

ProbeResult linear_probe(const Eigen::MatrixXd& codes, std::span<const Polarity> labels, const ProbeConfig& cfg) {
  check_labels(codes, labels);
  std::array<std::vector<Eigen::Index>, 2> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i)
    by_class[labels[i] == Polarity::Positive ? 0 : 1].push_back(static_cast<Eigen::Index>(i));
  if (by_class[0].size() < 2 || by_class[1].size() < 2)
    throw PreconditionError("linear probe needs at least 2 items per class");

  std::mt19937_64 rng(cfg.seed);
  std::vector<Eigen::Index> train, test;
  for (auto& idx : by_class) {
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng() % i]);
    auto n_train = static_cast<std::size_t>(std::llround(cfg.train_ratio * static_cast<double>(idx.size())));
    n_train = std::clamp<std::size_t>(n_train, 1, idx.size() - 1);
    train.insert(train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    test.insert(test.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
  }

  const auto d = codes.cols();
  auto gather = [&](const std::vector<Eigen::Index>& rows, Eigen::MatrixXd& x, Eigen::VectorXd& y) {
    x.resize(static_cast<Eigen::Index>(rows.size()), d);
    y.resize(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t k = 0; k < rows.size(); ++k) {
      x.row(static_cast<Eigen::Index>(k)) = codes.row(rows[k]);
      y[static_cast<Eigen::Index>(k)] = labels[static_cast<std::size_t>(rows[k])] == Polarity::Positive ? 1.0 : 0.0;
    }
  };
  Eigen::MatrixXd x_train, x_test;
  Eigen::VectorXd y_train, y_test;
  gather(train, x_train, y_train);
  gather(test, x_test, y_test);

  const Eigen::RowVectorXd mean = x_train.colwise().mean();
  Eigen::RowVectorXd scale = ((x_train.rowwise() - mean).array().square().colwise().mean()).sqrt();
  for (Eigen::Index j = 0; j < d; ++j) scale[j] = scale[j] > 0.0 ? 1.0 / scale[j] : 0.0;
  auto standardize = [&](Eigen::MatrixXd& x) {
    x = ((x.rowwise() - mean).array().rowwise() * scale.array()).matrix();
  };
  standardize(x_train);
  standardize(x_test);

  ProbeResult out;
  out.weights = Eigen::VectorXd::Zero(d);
  const double inv_n = 1.0 / static_cast<double>(x_train.rows());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const Eigen::VectorXd logit = (x_train * out.weights).array() + out.bias;
    const Eigen::VectorXd p = (1.0 / (1.0 + (-logit.array()).exp())).matrix();
    double loss = 0.0;
    for (Eigen::Index i = 0; i < logit.size(); ++i) {
      // log(1 + exp(-t)) for the true-class margin t, computed stably.
      const double t = y_train[i] > 0.5 ? logit[i] : -logit[i];
      loss += std::max(-t, 0.0) + std::log1p(std::exp(-std::abs(t)));
    }
    loss *= inv_n;
    if (!std::isfinite(loss)) throw NumericError(fmt::format("linear probe loss is non-finite at epoch {}", epoch));
    out.loss_trace.push_back(loss);
    const Eigen::VectorXd r = p - y_train;
    out.weights -= cfg.learning_rate * inv_n * (x_train.transpose() * r);
    out.bias -= cfg.learning_rate * inv_n * r.sum();
  }

  const Eigen::VectorXd test_logit = (x_test * out.weights).array() + out.bias;
  std::size_t correct = 0;
  for (Eigen::Index i = 0; i < test_logit.size(); ++i)
    if ((test_logit[i] >= 0.0) == (y_test[i] > 0.5)) ++correct;
  out.held_out_acc = static_cast<double>(correct) / static_cast<double>(test_logit.size());
  return out;
}

bool FeatureMask::contains(std::size_t j) const {
  return std::find(indices.begin(), indices.end(), j) != indices.end();
}

Eigen::VectorXd FeatureMask::dense() const {
  Eigen::VectorXd m = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d_latent));
  for (std::size_t j : indices) m[static_cast<Eigen::Index>(j)] = 1.0;
  return m;
}

nlohmann::ordered_json FeatureMask::to_json(bool full_vectors) const {
  nlohmann::ordered_json j;
  j["indices"] = indices;
  j["d_latent"] = d_latent;
  std::vector<double> f, w;
  if (full_vectors) {
    f.assign(f_values.data(), f_values.data() + f_values.size());
    w.assign(probe_weights.data(), probe_weights.data() + probe_weights.size());
  } else {
    for (std::size_t idx : indices) {
      f.push_back(f_values[static_cast<Eigen::Index>(idx)]);
      w.push_back(probe_weights[static_cast<Eigen::Index>(idx)]);
    }
  }
  j["f_values"] = f;
  j["probe_weights"] = w;
  j["probe_acc"] = probe_acc;
  j["rule"] = selection_rule;
  return j;
}

FeatureMask FeatureMask::from_json(const nlohmann::json& j) {
  FeatureMask m;
  try {
    m.d_latent = j.at("d_latent").get<std::size_t>();
    m.indices = j.at("indices").get<std::vector<std::size_t>>();
    m.probe_acc = j.at("probe_acc").get<double>();
    m.selection_rule = j.at("rule").get<std::string>();
    const auto f = j.at("f_values").get<std::vector<double>>();
    const auto w = j.value("probe_weights", std::vector<double>(m.indices.size(), 0.0));
    const auto d = static_cast<Eigen::Index>(m.d_latent);
    m.f_values = Eigen::VectorXd::Zero(d);
    m.probe_weights = Eigen::VectorXd::Zero(d);
    std::vector<bool> seen(m.d_latent, false);
    for (std::size_t idx : m.indices) {
      if (idx >= m.d_latent) throw SchemaError(fmt::format("mask index {} out of range (d_latent = {})", idx, m.d_latent));
      if (seen[idx]) throw SchemaError(fmt::format("mask index {} repeated", idx));
      seen[idx] = true;
    }
    if (f.size() == m.d_latent && w.size() == m.d_latent) {
      m.f_values = vector_from_json(j.at("f_values"));
      m.probe_weights = vector_from_json(j.at("probe_weights"));
    } else if (f.size() == m.indices.size() && w.size() == m.indices.size()) {
      for (std::size_t k = 0; k < m.indices.size(); ++k) {
        m.f_values[static_cast<Eigen::Index>(m.indices[k])] = f[k];
        m.probe_weights[static_cast<Eigen::Index>(m.indices[k])] = w[k];
      }
    } else {
      throw SchemaError("mask f_values/probe_weights must cover the selected indices or all d_latent coordinates");
    }
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("mask artifact: ") + e.what());
  }
  return m;
}

void FeatureMask::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write mask: " + path.string());
  out << to_json().dump(1) << '\n';
}

FeatureMask FeatureMask::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open mask: " + path.string());
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("mask artifact: ") + e.what());
  }
}

bool operator==(const FeatureMask& a, const FeatureMask& b) {
  return a.d_latent == b.d_latent && a.indices == b.indices && a.probe_acc == b.probe_acc &&
         a.selection_rule == b.selection_rule && a.f_values.size() == b.f_values.size() &&
         a.probe_weights.size() == b.probe_weights.size() && (a.f_values.array() == b.f_values.array()).all() &&
         (a.probe_weights.array() == b.probe_weights.array()).all();
}

FeatureMask build_mask(const Eigen::VectorXd& f_values, const Eigen::VectorXd& probe_weights, std::size_t d_steer,
                       double probe_acc) {
  const auto d = static_cast<std::size_t>(f_values.size());
  if (static_cast<std::size_t>(probe_weights.size()) != d)
    throw DimensionError("f_values and probe_weights lengths differ");
  if (d_steer < 1 || d_steer > d)
    throw PreconditionError(fmt::format("d_steer = {} out of range [1, {}]", d_steer, d));
  std::vector<std::size_t> order(d);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto ia = static_cast<Eigen::Index>(a), ib = static_cast<Eigen::Index>(b);
    if (f_values[ia] != f_values[ib]) return f_values[ia] > f_values[ib];
    const double wa = std::abs(probe_weights[ia]), wb = std::abs(probe_weights[ib]);
    if (wa != wb) return wa > wb;
    return a < b;
  });
  FeatureMask m;
  m.d_latent = d;
  m.indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(d_steer));
  m.f_values = f_values;
  m.probe_weights = probe_weights;
  m.probe_acc = probe_acc;
  return m;
}

FeatureMask select_features(const Eigen::MatrixXd& codes, std::span<const Polarity> labels, std::size_t d_steer,
                            const ProbeConfig& probe_cfg) {
  const Eigen::VectorXd f = f_statistics(codes, labels);
  const ProbeResult probe = linear_probe(codes, labels, probe_cfg);
  return build_mask(f, probe.weights, d_steer, probe.held_out_acc);
}

}  // namespace facetsteer
