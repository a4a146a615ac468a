#include "facetsteer/activations.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include <fmt/format.h>

#include "facetsteer/error.hpp"
#include "facetsteer/seed.hpp"

namespace facetsteer {
namespace {

Eigen::VectorXd gaussian_vector(std::mt19937_64& rng, std::size_t n) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd v(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = normal(rng);
  return v;
}

void round_to_float_grid(Eigen::VectorXd& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = static_cast<double>(static_cast<float>(v[i]));
}

}  // namespace

void little_endian_put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void little_endian_put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void little_endian_put_f32(std::string& out, float v) { little_endian_put_u32(out, std::bit_cast<std::uint32_t>(v)); }

std::uint32_t little_endian_get_u32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

std::uint64_t little_endian_get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

float little_endian_get_f32(const unsigned char* p) { return std::bit_cast<float>(little_endian_get_u32(p)); }

void ActivationSet::validate() const {
  if (records.empty()) throw SchemaError("activation set is empty");
  if (d_model == 0) throw SchemaError("activation set has d_model = 0");
  for (const auto& r : records) {
    if (r.hidden.size() != d_model)
      throw DimensionError(fmt::format("record \"{}\" has {} values, expected d_model = {}", r.item_id,
                                       r.hidden.size(), d_model));
    if (r.layer != layer || r.model_tag != model_tag)
      throw SchemaError(fmt::format("record \"{}\" has layer/model ({}, {}) but the set has ({}, {})", r.item_id,
                                    r.layer, r.model_tag, layer, model_tag));
    if (r.facet.has_value() != r.polarity.has_value())
      throw SchemaError(fmt::format("record \"{}\" is only partially labeled", r.item_id));
    for (float x : r.hidden)
      if (!std::isfinite(x)) throw NumericError(fmt::format("record \"{}\" contains a non-finite value", r.item_id));
  }
}

Eigen::MatrixXd ActivationSet::matrix() const {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(records.size()), static_cast<Eigen::Index>(d_model));
  for (std::size_t i = 0; i < records.size(); ++i)
    for (std::size_t j = 0; j < d_model; ++j)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = records[i].hidden[j];
  return m;
}

std::vector<std::size_t> ActivationSet::indices_of(FacetId facet, Polarity polarity) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (records[i].facet == facet && records[i].polarity == polarity) out.push_back(i);
  return out;
}

std::string serialize_activations(const ActivationSet& set) {
  set.validate();
  nlohmann::ordered_json meta = nlohmann::ordered_json::array();
  for (const auto& r : set.records) {
    meta.push_back({{"id", r.item_id},
                    {"facet", r.facet ? std::string(r.facet->name()) : std::string(kUnlabeledFacet)},
                    {"polarity", r.polarity ? std::string(polarity_code(*r.polarity)) : std::string(kUnlabeledPolarity)},
                    {"layer", r.layer},
                    {"model", r.model_tag}});
  }
  const std::string meta_bytes = meta.dump();

  std::string out;
  out.reserve(kFstaHeaderBytes + meta_bytes.size() + set.records.size() * set.d_model * 4);
  out.append(kFstaMagic, 4);
  little_endian_put_u32(out, kFstaVersion);
  little_endian_put_u32(out, static_cast<std::uint32_t>(set.d_model));
  little_endian_put_u64(out, set.records.size());
  little_endian_put_u64(out, meta_bytes.size());
  out += meta_bytes;
  for (const auto& r : set.records)
    for (float x : r.hidden) little_endian_put_f32(out, x);
  return out;
}

ActivationSet parse_activations(std::string_view bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < kFstaHeaderBytes)
    throw ParseError(fmt::format("truncated activation file: expected at least {} header bytes, got {}",
                                 kFstaHeaderBytes, bytes.size()));
  if (std::memcmp(p, kFstaMagic, 4) != 0) throw ParseError("bad magic: not an FSTA activation file");
  const std::uint32_t version = little_endian_get_u32(p + 4);
  if (version != kFstaVersion)
    throw ParseError(fmt::format("unsupported FSTA version {} (supported: {})", version, kFstaVersion));
  const std::uint32_t d_model = little_endian_get_u32(p + 8);
  const std::uint64_t count = little_endian_get_u64(p + 12);
  const std::uint64_t meta_len = little_endian_get_u64(p + 20);

  const std::uint64_t expected = kFstaHeaderBytes + meta_len + count * d_model * 4ULL;
  if (bytes.size() != expected)
    throw ParseError(fmt::format("{} activation file: expected {} bytes, got {}",
                                 bytes.size() < expected ? "truncated" : "oversized", expected, bytes.size()));

  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(bytes.substr(kFstaHeaderBytes, meta_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("activation metadata: ") + e.what());
  }
  if (!meta.is_array() || meta.size() != count)
    throw SchemaError(fmt::format("activation metadata must be an array of {} rows", count));

  ActivationSet set;
  set.d_model = d_model;
  set.records.reserve(count);
  const unsigned char* payload = p + kFstaHeaderBytes + meta_len;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto& row = meta[i];
    ActivationRecord r;
    try {
      r.item_id = row.at("id").get<std::string>();
      const auto facet = row.at("facet").get<std::string>();
      const auto polarity = row.at("polarity").get<std::string>();
      if (facet != kUnlabeledFacet) r.facet = parse_facet(facet);
      if (polarity != kUnlabeledPolarity) r.polarity = parse_polarity(polarity);
      r.layer = row.at("layer").get<int>();
      r.model_tag = row.at("model").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError(fmt::format("activation metadata row {}: {}", i, e.what()));
    }
    r.hidden.resize(d_model);
    for (std::uint32_t j = 0; j < d_model; ++j) r.hidden[j] = little_endian_get_f32(payload + 4 * (i * d_model + j));
    set.records.push_back(std::move(r));
  }
  if (!set.records.empty()) {
    set.layer = set.records.front().layer;
    set.model_tag = set.records.front().model_tag;
  }
  set.validate();
  return set;
}

void persist_activations(const ActivationSet& set, const std::filesystem::path& path) {
  const std::string bytes = serialize_activations(set);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write activation file: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

ActivationSet load_activations(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open activation file: " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_activations(buffer.str());
}

nlohmann::ordered_json PlantedGroundTruth::to_json() const {
  nlohmann::ordered_json j;
  j["d_model"] = d_model();
  j["sigma_noise"] = sigma_noise;
  j["signal_scale"] = signal_scale;
  j["seed"] = seed;
  j["max_pairwise_cosine"] = max_pairwise_cosine;
  auto dirs = nlohmann::ordered_json::object();
  for (FacetId f : all_facets()) {
    const auto& d = direction(f);
    dirs[std::string(f.name())] = std::vector<double>(d.data(), d.data() + d.size());
  }
  j["directions"] = dirs;
  return j;
}

PlantedGroundTruth PlantedGroundTruth::from_json(const nlohmann::json& j) {
  PlantedGroundTruth gt;
  try {
    gt.sigma_noise = j.at("sigma_noise").get<double>();
    gt.signal_scale = j.at("signal_scale").get<double>();
    gt.seed = j.at("seed").get<std::uint64_t>();
    gt.max_pairwise_cosine = j.value("max_pairwise_cosine", gt.max_pairwise_cosine);
    const auto& dirs = j.at("directions");
    for (FacetId f : all_facets()) {
      const auto v = dirs.at(std::string(f.name())).get<std::vector<double>>();
      gt.directions.push_back(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
    }
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("planted ground truth: ") + e.what());
  }
  return gt;
}

PlantedGroundTruth make_planted_ground_truth(std::size_t d_model, double sigma_noise, double signal_scale,
                                             std::uint64_t seed) {
  if (d_model < 8) throw PreconditionError("d_model must be at least 8");
  PlantedGroundTruth gt;
  gt.sigma_noise = sigma_noise;
  gt.signal_scale = signal_scale;
  gt.seed = seed;
  std::mt19937_64 rng(derive_seed(seed, 0));

  if (d_model >= kFacetCount) {
    Eigen::MatrixXd g(static_cast<Eigen::Index>(d_model), static_cast<Eigen::Index>(kFacetCount));
    for (Eigen::Index c = 0; c < g.cols(); ++c) g.col(c) = gaussian_vector(rng, d_model);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(g.rows(), g.cols());
    for (Eigen::Index c = 0; c < q.cols(); ++c) {
      Eigen::VectorXd d = q.col(c);
      round_to_float_grid(d);
      gt.directions.push_back(std::move(d));
    }
    return gt;
  }

  constexpr int kMaxAttempts = 100000;
  while (gt.directions.size() < kFacetCount) {
    bool accepted = false;
    for (int attempt = 0; attempt < kMaxAttempts && !accepted; ++attempt) {
      Eigen::VectorXd d = gaussian_vector(rng, d_model).normalized();
      round_to_float_grid(d);
      accepted = true;
      for (const auto& other : gt.directions)
        if (d.dot(other) > gt.max_pairwise_cosine) {
          accepted = false;
          break;
        }
      if (accepted) gt.directions.push_back(std::move(d));
    }
    if (!accepted)
      throw PreconditionError(fmt::format("could not place {} directions with pairwise cosine <= {} in d_model = {}",
                                          kFacetCount, gt.max_pairwise_cosine, d_model));
  }
  return gt;
}

ActivationSet synthesize_activations(const FacetCorpus& corpus, const PlantedGroundTruth& gt, std::uint64_t seed,
                                     int layer, std::string model_tag) {
  const std::size_t d_model = gt.d_model();
  if (d_model < 8) throw PreconditionError("d_model must be at least 8");
  if (gt.directions.size() != kFacetCount) throw PreconditionError("ground truth must carry 30 directions");
  std::mt19937_64 rng(derive_seed(seed, 1));
  std::normal_distribution<double> normal(0.0, 1.0);

  ActivationSet set;
  set.d_model = d_model;
  set.layer = layer;
  set.model_tag = std::move(model_tag);
  set.records.reserve(corpus.items.size());
  for (const auto& item : corpus.items) {
    const Eigen::VectorXd& g = gt.direction(item.facet);
    const double shift = polarity_sign(item.polarity) * gt.signal_scale;
    ActivationRecord r;
    r.item_id = item.id;
    r.facet = item.facet;
    r.polarity = item.polarity;
    r.layer = layer;
    r.model_tag = set.model_tag;
    r.hidden.resize(d_model);
    for (std::size_t j = 0; j < d_model; ++j) {
      const double noise = gt.sigma_noise * normal(rng);
      r.hidden[j] = static_cast<float>(noise + shift * g[static_cast<Eigen::Index>(j)]);
    }
    set.records.push_back(std::move(r));
  }
  return set;
}

std::pair<ActivationSet, PlantedGroundTruth> synthesize_activations(const FacetCorpus& corpus, double sigma_noise,
                                                                    double signal_scale, std::uint64_t seed,
                                                                    std::size_t d_model) {
  PlantedGroundTruth gt = make_planted_ground_truth(d_model, sigma_noise, signal_scale, seed);
  ActivationSet set = synthesize_activations(corpus, gt, seed);
  return {std::move(set), std::move(gt)};
}

}  // namespace facetsteer
