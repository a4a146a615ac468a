#include "facetsteer/leakage.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_set>

#include <fmt/format.h>

#include "facetsteer/error.hpp"

namespace facetsteer {
namespace {

using SparseRow = std::vector<std::pair<std::size_t, double>>;

SparseRow featurize(std::string_view text, std::size_t dim) {
  std::vector<std::size_t> idx;
  for (const auto& tok : tokenize(text)) idx.push_back(static_cast<std::size_t>(fnv1a64(tok) % dim));
  std::sort(idx.begin(), idx.end());
  SparseRow row;
  for (std::size_t i : idx) {
    if (!row.empty() && row.back().first == i)
      row.back().second += 1.0;
    else
      row.emplace_back(i, 1.0);
  }
  return row;
}

Eigen::VectorXd sparse_logits(const Eigen::MatrixXd& w, const Eigen::VectorXd& b, const SparseRow& x) {
  Eigen::VectorXd out = b;
  for (const auto& [j, val] : x) out += val * w.col(static_cast<Eigen::Index>(j));
  return out;
}

void softmax_inplace(Eigen::VectorXd& v) {
  const double mx = v.maxCoeff();
  v = (v.array() - mx).exp();
  v /= v.sum();
}

}  // namespace

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

nlohmann::ordered_json ClassifierConfig::to_json() const {
  return {{"tokenizer", tokenizer}, {"hash_dim", hash_dim},   {"learning_rate", learning_rate},
          {"epochs", epochs},       {"seed", seed},           {"train_ratio", train_ratio}};
}

ClassifierConfig ClassifierConfig::from_json(const nlohmann::json& j) {
  ClassifierConfig c;
  c.tokenizer = j.value("tokenizer", c.tokenizer);
  c.hash_dim = j.value("hash_dim", c.hash_dim);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.epochs = j.value("epochs", c.epochs);
  c.seed = j.value("seed", c.seed);
  c.train_ratio = j.value("train_ratio", c.train_ratio);
  if (c.hash_dim == 0) throw ConfigError("classifier hash_dim must be positive");
  if (!(c.train_ratio > 0.0 && c.train_ratio < 1.0)) throw ConfigError("classifier train_ratio must be in (0,1)");
  return c;
}

CorpusSplit split_corpus(const FacetCorpus& corpus, double train_ratio, std::uint64_t seed) {
  std::array<std::vector<std::size_t>, kFacetCount> by_facet;
  for (std::size_t i = 0; i < corpus.items.size(); ++i) by_facet[corpus.items[i].facet.ordinal()].push_back(i);

  std::mt19937_64 rng(seed);
  CorpusSplit split;
  split.train.provenance = split.held_out.provenance = corpus.provenance;
  for (auto& idx : by_facet) {
    if (idx.empty()) continue;
    // Fisher-Yates with a fixed draw rule.
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng() % i]);
    const auto n = static_cast<double>(idx.size());
    auto n_train = static_cast<std::size_t>(std::llround(train_ratio * n));
    n_train = std::clamp<std::size_t>(n_train, 1, idx.size() > 1 ? idx.size() - 1 : 1);
    for (std::size_t k = 0; k < idx.size(); ++k)
      (k < n_train ? split.train : split.held_out).items.push_back(corpus.items[idx[k]]);
  }
  return split;
}

Eigen::VectorXd LeakageClassifier::logits(std::string_view text) const {
  return sparse_logits(weights, bias, featurize(text, config.hash_dim));
}

FacetId LeakageClassifier::predict(std::string_view text) const {
  Eigen::Index best = 0;
  logits(text).maxCoeff(&best);
  return facet_from_ordinal(static_cast<std::size_t>(best));
}

nlohmann::ordered_json LeakageClassifier::to_json() const {
  nlohmann::ordered_json j;
  j["kind"] = "facet-leakage-classifier";
  j["taxonomy_version"] = kTaxonomyVersion;
  j["config"] = config.to_json();
  j["classes"] = nlohmann::ordered_json::array();
  for (FacetId f : all_facets()) j["classes"].push_back(std::string(f.name()));
  j["rows"] = weights.rows();
  j["cols"] = weights.cols();
  std::vector<double> flat;
  flat.reserve(static_cast<std::size_t>(weights.size()));
  for (Eigen::Index r = 0; r < weights.rows(); ++r)
    for (Eigen::Index c = 0; c < weights.cols(); ++c) flat.push_back(weights(r, c));
  j["weights"] = flat;
  j["bias"] = std::vector<double>(bias.data(), bias.data() + bias.size());
  j["train_ids"] = train_ids;
  j["loss_trace"] = loss_trace;
  return j;
}

LeakageClassifier LeakageClassifier::from_json(const nlohmann::json& j) {
  LeakageClassifier clf;
  try {
    clf.config = ClassifierConfig::from_json(j.at("config"));
    const auto rows = j.at("rows").get<Eigen::Index>();
    const auto cols = j.at("cols").get<Eigen::Index>();
    const auto flat = j.at("weights").get<std::vector<double>>();
    const auto bias = j.at("bias").get<std::vector<double>>();
    if (rows != static_cast<Eigen::Index>(kFacetCount) || cols != static_cast<Eigen::Index>(clf.config.hash_dim) ||
        flat.size() != static_cast<std::size_t>(rows * cols) || bias.size() != kFacetCount)
      throw SchemaError("classifier artifact: weight shape does not match config");
    clf.weights.resize(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) clf.weights(r, c) = flat[static_cast<std::size_t>(r * cols + c)];
    clf.bias = Eigen::Map<const Eigen::VectorXd>(bias.data(), static_cast<Eigen::Index>(bias.size()));
    clf.train_ids = j.value("train_ids", std::vector<std::string>{});
    clf.loss_trace = j.value("loss_trace", std::vector<double>{});
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("classifier artifact: ") + e.what());
  }
  return clf;
}

void LeakageClassifier::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write classifier: " + path.string());
  out << to_json().dump(1) << '\n';
}

LeakageClassifier LeakageClassifier::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open classifier: " + path.string());
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("classifier artifact: ") + e.what());
  }
}

LeakageClassifier train_leakage_classifier(const FacetCorpus& corpus, const ClassifierConfig& cfg) {
  const auto counts = corpus.polarity_counts();
  for (FacetId f : all_facets()) {
    const auto& c = counts[f.ordinal()];
    if (c.first + c.second < 2)
      throw PreconditionError(fmt::format("facet \"{}\" has {} items; at least 2 are required", f.name(),
                                          c.first + c.second));
  }
  if (cfg.hash_dim == 0) throw ConfigError("classifier hash_dim must be positive");

  const CorpusSplit split = split_corpus(corpus, cfg.train_ratio, cfg.seed);
  const auto& train = split.train.items;
  std::vector<SparseRow> features;
  std::vector<std::size_t> labels;
  features.reserve(train.size());
  for (const auto& item : train) {
    features.push_back(featurize(item.text, cfg.hash_dim));
    labels.push_back(item.facet.ordinal());
  }

  LeakageClassifier clf;
  clf.config = cfg;
  clf.weights = Eigen::MatrixXd::Zero(kFacetCount, static_cast<Eigen::Index>(cfg.hash_dim));
  clf.bias = Eigen::VectorXd::Zero(kFacetCount);
  for (const auto& item : train) clf.train_ids.push_back(item.id);

  const double inv_n = 1.0 / static_cast<double>(train.size());
  Eigen::MatrixXd grad_w(clf.weights.rows(), clf.weights.cols());
  Eigen::VectorXd grad_b(kFacetCount);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    grad_w.setZero();
    grad_b.setZero();
    double loss = 0.0;
    for (std::size_t i = 0; i < features.size(); ++i) {
      Eigen::VectorXd p = sparse_logits(clf.weights, clf.bias, features[i]);
      softmax_inplace(p);
      loss -= std::log(std::max(p[static_cast<Eigen::Index>(labels[i])], 1e-300));
      p[static_cast<Eigen::Index>(labels[i])] -= 1.0;
      grad_b += p;
      for (const auto& [j, val] : features[i]) grad_w.col(static_cast<Eigen::Index>(j)) += val * p;
    }
    loss *= inv_n;
    if (!std::isfinite(loss)) throw NumericError(fmt::format("leakage classifier loss is non-finite at epoch {}", epoch));
    clf.loss_trace.push_back(loss);
    clf.weights -= cfg.learning_rate * inv_n * grad_w;
    clf.bias -= cfg.learning_rate * inv_n * grad_b;
  }
  return clf;
}

LeakageReport report_from_predictions(const std::vector<FacetId>& truth, const std::vector<FacetId>& predicted) {
  if (truth.size() != predicted.size()) throw DimensionError("truth and prediction lengths differ");
  if (truth.empty()) throw PreconditionError("held-out set is empty");
  LeakageReport r;
  r.total = truth.size();
  for (std::size_t i = 0; i < truth.size(); ++i) {
    r.confusion[truth[i].ordinal()][predicted[i].ordinal()]++;
    if (truth[i] != predicted[i]) {
      ++r.misclassified;
    }
  }
  std::size_t cross = 0;
  for (std::size_t t = 0; t < kFacetCount; ++t)
    for (std::size_t p = 0; p < kFacetCount; ++p)
      if (t != p && t / kFacetsPerDimension != p / kFacetsPerDimension) cross += r.confusion[t][p];
  r.cross_dimension_rate = r.misclassified == 0 ? 0.0 : static_cast<double>(cross) / static_cast<double>(r.misclassified);
  r.accuracy = static_cast<double>(r.total - r.misclassified) / static_cast<double>(r.total);

  double f1_sum = 0.0;
  std::size_t f1_count = 0;
  for (std::size_t k = 0; k < kFacetCount; ++k) {
    std::size_t tp = r.confusion[k][k], fp = 0, fn = 0;
    for (std::size_t o = 0; o < kFacetCount; ++o) {
      if (o == k) continue;
      fp += r.confusion[o][k];
      fn += r.confusion[k][o];
    }
    const std::size_t denom = 2 * tp + fp + fn;
    if (denom == 0) {
      r.per_facet_f1[k] = std::nan("");
      continue;
    }
    r.per_facet_f1[k] = 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
    f1_sum += r.per_facet_f1[k];
    ++f1_count;
  }
  r.macro_f1 = f1_sum / static_cast<double>(f1_count);
  return r;
}

LeakageReport evaluate_leakage(const LeakageClassifier& clf, const FacetCorpus& held_out) {
  if (held_out.items.empty()) throw PreconditionError("held-out set is empty");
  const std::unordered_set<std::string> trained(clf.train_ids.begin(), clf.train_ids.end());
  std::vector<FacetId> truth, predicted;
  for (const auto& item : held_out.items) {
    if (trained.count(item.id)) throw PreconditionError("held-out item \"" + item.id + "\" was used for training");
    truth.push_back(item.facet);
    predicted.push_back(clf.predict(item.text));
  }
  return report_from_predictions(truth, predicted);
}

nlohmann::ordered_json LeakageReport::to_json() const {
  nlohmann::ordered_json j;
  j["macro_f1"] = macro_f1;
  j["accuracy"] = accuracy;
  j["cross_dimension_rate"] = cross_dimension_rate;
  j["total"] = total;
  j["misclassified"] = misclassified;
  auto f1 = nlohmann::ordered_json::object();
  for (FacetId f : all_facets()) {
    const double v = per_facet_f1[f.ordinal()];
    f1[std::string(f.name())] = std::isnan(v) ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(v);
  }
  j["per_facet_f1"] = f1;
  auto rows = nlohmann::ordered_json::array();
  for (const auto& row : confusion) rows.push_back(row);
  j["confusion"] = rows;
  return j;
}

}  // namespace facetsteer
