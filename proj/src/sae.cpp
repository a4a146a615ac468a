#include "facetsteer/sae.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <fmt/format.h>

#include "facetsteer/checksum.hpp"
#include "facetsteer/error.hpp"
#include "facetsteer/seed.hpp"

namespace facetsteer {
namespace {

constexpr char kSaeMagic[4] = {'F', 'S', 'T', 'S'};
constexpr std::uint32_t kSaeVersion = 1;

template <typename A, typename B>
bool same_shape_equal(const A& a, const B& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && (a.array() == b.array()).all();
}

void round_to_float_grid(Eigen::MatrixXd& m) {
  m = m.unaryExpr([](double x) { return static_cast<double>(static_cast<float>(x)); });
}
void round_to_float_grid(Eigen::VectorXd& v) {
  v = v.unaryExpr([](double x) { return static_cast<double>(static_cast<float>(x)); });
}

void normalize_columns(Eigen::MatrixXd& w) {
  for (Eigen::Index c = 0; c < w.cols(); ++c) {
    const double n = w.col(c).norm();
    if (n > 0.0) w.col(c) /= n;
  }
}

void check_finite(const SaeModel& m, std::size_t epoch, std::size_t batch) {
  if (!m.w_enc.allFinite() || !m.b_enc.allFinite() || !m.w_dec.allFinite() || !m.b_dec.allFinite())
    throw NumericError(fmt::format("SAE weights became non-finite at epoch {}, batch {}", epoch, batch));
}

void put_matrix(std::string& out, const Eigen::MatrixXd& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) little_endian_put_f32(out, static_cast<float>(m(r, c)));
}

std::string weight_payload(const SaeModel& m) {
  std::string out;
  put_matrix(out, m.w_enc);
  put_matrix(out, m.b_enc);
  put_matrix(out, m.w_dec);
  put_matrix(out, m.b_dec);
  return out;
}

}  // namespace

bool operator==(const SaeModel& a, const SaeModel& b) {
  return same_shape_equal(a.w_enc, b.w_enc) && same_shape_equal(a.b_enc, b.b_enc) &&
         same_shape_equal(a.w_dec, b.w_dec) && same_shape_equal(a.b_dec, b.b_dec) &&
         a.config.to_json() == b.config.to_json();
}

void SaeConfig::validate() const {
  if (d_model == 0) throw ConfigError("sae.d_model must be positive");
  if (d_latent < d_model) throw ConfigError("sae.d_latent must be >= d_model");
  if (!(l1_coeff >= 0.0)) throw ConfigError("sae.l1_coeff must be nonnegative");
  if (!(learning_rate > 0.0)) throw ConfigError("sae.learning_rate must be positive");
  if (epochs == 0) throw ConfigError("sae.epochs must be positive");
  if (batch_size == 0) throw ConfigError("sae.batch_size must be positive");
}

nlohmann::ordered_json SaeConfig::to_json() const {
  return {{"d_model", d_model}, {"d_latent", d_latent}, {"l1_coeff", l1_coeff}, {"learning_rate", learning_rate},
          {"epochs", epochs},   {"batch_size", batch_size}, {"seed", seed}};
}

SaeConfig SaeConfig::from_json(const nlohmann::json& j) {
  SaeConfig c;
  try {
    c.d_model = j.value("d_model", c.d_model);
    c.d_latent = j.value("d_latent", 4 * c.d_model);
    c.l1_coeff = j.value("l1_coeff", c.l1_coeff);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("sae config: ") + e.what());
  }
  c.validate();
  return c;
}

Eigen::VectorXd SaeModel::encode(const Eigen::VectorXd& h) const {
  if (static_cast<std::size_t>(h.size()) != d_model())
    throw DimensionError(fmt::format("encode: input has length {}, SAE expects d_model = {}", h.size(), d_model()));
  return (w_enc * (h - b_dec) + b_enc).cwiseMax(0.0);
}

Eigen::VectorXd SaeModel::decode(const Eigen::VectorXd& z) const {
  if (static_cast<std::size_t>(z.size()) != d_latent())
    throw DimensionError(fmt::format("decode: input has length {}, SAE expects d_latent = {}", z.size(), d_latent()));
  return w_dec * z + b_dec;
}

Eigen::MatrixXd SaeModel::encode_rows(const Eigen::MatrixXd& h) const {
  if (static_cast<std::size_t>(h.cols()) != d_model())
    throw DimensionError(fmt::format("encode: rows have length {}, SAE expects d_model = {}", h.cols(), d_model()));
  Eigen::MatrixXd pre = (h.rowwise() - b_dec.transpose()) * w_enc.transpose();
  pre.rowwise() += b_enc.transpose();
  return pre.cwiseMax(0.0);
}

Eigen::MatrixXd SaeModel::decode_rows(const Eigen::MatrixXd& z) const {
  if (static_cast<std::size_t>(z.cols()) != d_latent())
    throw DimensionError(fmt::format("decode: rows have length {}, SAE expects d_latent = {}", z.cols(), d_latent()));
  Eigen::MatrixXd out = z * w_dec.transpose();
  out.rowwise() += b_dec.transpose();
  return out;
}

SaeObjective sae_objective(const SaeModel& m, const Eigen::MatrixXd& batch, double l1_coeff) {
  const Eigen::MatrixXd z = m.encode_rows(batch);
  const Eigen::MatrixXd err = m.decode_rows(z) - batch;
  const double n = static_cast<double>(batch.rows());
  SaeObjective o;
  o.reconstruction = err.squaredNorm() / n;
  o.sparsity = z.sum() / n;
  o.total = o.reconstruction + l1_coeff * o.sparsity;
  return o;
}

SaeGradients sae_gradients(const SaeModel& m, const Eigen::MatrixXd& batch, double l1_coeff) {
  const double n = static_cast<double>(batch.rows());
  const Eigen::MatrixXd centered = batch.rowwise() - m.b_dec.transpose();
  Eigen::MatrixXd pre = centered * m.w_enc.transpose();
  pre.rowwise() += m.b_enc.transpose();
  const Eigen::MatrixXd z = pre.cwiseMax(0.0);
  Eigen::MatrixXd recon = z * m.w_dec.transpose();
  recon.rowwise() += m.b_dec.transpose();
  const Eigen::MatrixXd err = recon - batch;

  SaeGradients g;
  g.objective.reconstruction = err.squaredNorm() / n;
  g.objective.sparsity = z.sum() / n;
  g.objective.total = g.objective.reconstruction + l1_coeff * g.objective.sparsity;

  const Eigen::MatrixXd d_recon = (2.0 / n) * err;  // n x d_model
  g.w_dec = d_recon.transpose() * z;
  Eigen::MatrixXd d_pre = d_recon * m.w_dec;  // n x d_latent
  d_pre.array() += l1_coeff / n;
  d_pre = d_pre.cwiseProduct((pre.array() > 0.0).cast<double>().matrix());
  g.w_enc = d_pre.transpose() * centered;
  g.b_enc = d_pre.colwise().sum().transpose();
  g.b_dec = d_recon.colwise().sum().transpose() - m.w_enc.transpose() * g.b_enc;
  return g;
}

SaeModel init_sae(const SaeConfig& cfg, const Eigen::MatrixXd& data) {
  cfg.validate();
  std::mt19937_64 rng(derive_seed(cfg.seed, 0));
  std::normal_distribution<double> normal(0.0, 1.0);
  SaeModel m;
  m.config = cfg;
  const auto d = static_cast<Eigen::Index>(cfg.d_model);
  const auto l = static_cast<Eigen::Index>(cfg.d_latent);
  m.w_dec.resize(d, l);
  for (Eigen::Index c = 0; c < l; ++c)
    for (Eigen::Index r = 0; r < d; ++r) m.w_dec(r, c) = normal(rng);
  normalize_columns(m.w_dec);
  m.w_enc = m.w_dec.transpose();
  m.b_enc = Eigen::VectorXd::Zero(l);
  m.b_dec = data.rows() > 0 ? Eigen::VectorXd(data.colwise().mean().transpose()) : Eigen::VectorXd::Zero(d);
  return m;
}

SaeModel train_sae(const Eigen::MatrixXd& data, const SaeConfig& cfg) {
  cfg.validate();
  if (data.rows() == 0) throw PreconditionError("SAE training data is empty");
  if (static_cast<std::size_t>(data.cols()) != cfg.d_model)
    throw DimensionError(fmt::format("SAE config d_model = {} but data has {} columns", cfg.d_model, data.cols()));
  if (static_cast<std::size_t>(data.rows()) < cfg.batch_size)
    throw PreconditionError(fmt::format("SAE training needs at least batch_size = {} rows, got {}", cfg.batch_size,
                                        data.rows()));

  SaeModel m = init_sae(cfg, data);
  std::mt19937_64 rng(derive_seed(cfg.seed, 1));
  std::vector<Eigen::Index> order(static_cast<std::size_t>(data.rows()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  Eigen::MatrixXd batch;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    std::size_t batch_no = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_no) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      batch.resize(static_cast<Eigen::Index>(end - start), data.cols());
      for (std::size_t k = start; k < end; ++k) batch.row(static_cast<Eigen::Index>(k - start)) = data.row(order[k]);
      const SaeGradients g = sae_gradients(m, batch, cfg.l1_coeff);
      if (!std::isfinite(g.objective.total))
        throw NumericError(fmt::format("SAE loss is non-finite at epoch {}, batch {}", epoch, batch_no));
      m.w_enc -= cfg.learning_rate * g.w_enc;
      m.b_enc -= cfg.learning_rate * g.b_enc;
      m.w_dec -= cfg.learning_rate * g.w_dec;
      m.b_dec -= cfg.learning_rate * g.b_dec;
      normalize_columns(m.w_dec);
      check_finite(m, epoch, batch_no);
    }
    const double loss = sae_objective(m, data, cfg.l1_coeff).total;
    if (!std::isfinite(loss)) throw NumericError(fmt::format("SAE loss is non-finite after epoch {}", epoch));
    if (!m.loss_trace.empty() && loss > m.loss_trace.back() + 1e-6) m.loss_monotone = false;
    m.loss_trace.push_back(loss);
  }

  // Snap to the checkpoint's float32 grid.
  round_to_float_grid(m.w_enc);
  round_to_float_grid(m.b_enc);
  round_to_float_grid(m.w_dec);
  round_to_float_grid(m.b_dec);
  return m;
}

SaeModel train_sae(const ActivationSet& data, const SaeConfig& cfg) {
  if (data.records.empty()) throw PreconditionError("SAE training data is empty");
  if (data.d_model != cfg.d_model)
    throw DimensionError(fmt::format("SAE config d_model = {} but activations have d_model = {}", cfg.d_model,
                                     data.d_model));
  return train_sae(data.matrix(), cfg);
}

nlohmann::ordered_json SaeMetrics::to_json() const {
  return {{"recon_rel_err", recon_rel_err}, {"mean_l0", mean_l0}, {"dead_features", dead_features}};
}

SaeMetrics sae_metrics(const SaeModel& m, const Eigen::MatrixXd& data) {
  if (data.rows() == 0) throw PreconditionError("sae_metrics: data is empty");
  const Eigen::MatrixXd z = m.encode_rows(data);
  const Eigen::MatrixXd recon = m.decode_rows(z);
  SaeMetrics out;
  double rel_sum = 0.0;
  std::size_t rel_rows = 0;
  for (Eigen::Index i = 0; i < data.rows(); ++i) {
    const double norm = data.row(i).norm();
    if (norm == 0.0) continue;
    rel_sum += (data.row(i) - recon.row(i)).norm() / norm;
    ++rel_rows;
  }
  out.recon_rel_err = rel_rows ? rel_sum / static_cast<double>(rel_rows) : 0.0;
  out.mean_l0 = (z.array() > 0.0).cast<double>().sum() / static_cast<double>(data.rows());
  for (Eigen::Index j = 0; j < z.cols(); ++j)
    if ((z.col(j).array() <= 0.0).all()) ++out.dead_features;
  return out;
}

SaeMetrics sae_metrics(const SaeModel& m, const ActivationSet& data) {
  if (data.records.empty()) throw PreconditionError("sae_metrics: data is empty");
  return sae_metrics(m, data.matrix());
}

std::string serialize_sae(const SaeModel& m) {
  const auto l = static_cast<std::size_t>(m.d_latent());
  const auto d = static_cast<std::size_t>(m.d_model());
  nlohmann::ordered_json header;
  header["config"] = m.config.to_json();
  header["loss_trace"] = m.loss_trace;
  header["loss_monotone"] = m.loss_monotone;
  std::size_t offset = 0;
  auto tensor = [&](const char* name, std::size_t rows, std::size_t cols) {
    nlohmann::ordered_json t = {{"name", name}, {"rows", rows}, {"cols", cols}, {"offset", offset}};
    offset += rows * cols * 4;
    return t;
  };
  header["tensors"] = {tensor("W_enc", l, d), tensor("b_enc", l, 1), tensor("W_dec", d, l), tensor("b_dec", d, 1)};
  header["payload_bytes"] = offset;
  const std::string header_bytes = header.dump();

  std::string out(kSaeMagic, 4);
  little_endian_put_u32(out, kSaeVersion);
  little_endian_put_u64(out, header_bytes.size());
  out += header_bytes;
  out += weight_payload(m);
  return out;
}

SaeModel parse_sae(std::string_view bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 16) throw ParseError("truncated SAE checkpoint header");
  if (std::memcmp(p, kSaeMagic, 4) != 0) throw ParseError("bad magic: not an SAE checkpoint");
  const std::uint32_t version = little_endian_get_u32(p + 4);
  if (version != kSaeVersion) throw ParseError(fmt::format("unsupported SAE checkpoint version {}", version));
  const std::uint64_t header_len = little_endian_get_u64(p + 8);
  if (bytes.size() < 16 + header_len) throw ParseError("truncated SAE checkpoint header");

  SaeModel m;
  try {
    const auto header = nlohmann::json::parse(bytes.substr(16, header_len));
    m.config = SaeConfig::from_json(header.at("config"));
    m.loss_trace = header.at("loss_trace").get<std::vector<double>>();
    m.loss_monotone = header.at("loss_monotone").get<bool>();
    const std::uint64_t payload_bytes = header.at("payload_bytes").get<std::uint64_t>();
    if (bytes.size() != 16 + header_len + payload_bytes)
      throw ParseError(fmt::format("SAE checkpoint: expected {} bytes, got {}", 16 + header_len + payload_bytes,
                                   bytes.size()));
    const unsigned char* payload = p + 16 + header_len;
    auto read = [&](const nlohmann::json& t, Eigen::MatrixXd& out) {
      const auto rows = t.at("rows").get<std::size_t>();
      const auto cols = t.at("cols").get<std::size_t>();
      const auto offset = t.at("offset").get<std::size_t>();
      if (offset + rows * cols * 4 > payload_bytes) throw ParseError("SAE checkpoint: tensor exceeds payload");
      out.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
          out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
              little_endian_get_f32(payload + offset + 4 * (r * cols + c));
    };
    Eigen::MatrixXd b_enc, b_dec;
    for (const auto& t : header.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      if (name == "W_enc")
        read(t, m.w_enc);
      else if (name == "b_enc")
        read(t, b_enc);
      else if (name == "W_dec")
        read(t, m.w_dec);
      else if (name == "b_dec")
        read(t, b_dec);
      else
        throw SchemaError("SAE checkpoint: unknown tensor " + name);
    }
    m.b_enc = b_enc.col(0);
    m.b_dec = b_dec.col(0);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("SAE checkpoint header: ") + e.what());
  }
  const auto l = static_cast<Eigen::Index>(m.config.d_latent), d = static_cast<Eigen::Index>(m.config.d_model);
  if (m.w_enc.rows() != l || m.w_enc.cols() != d || m.w_dec.rows() != d || m.w_dec.cols() != l ||
      m.b_enc.size() != l || m.b_dec.size() != d)
    throw SchemaError("SAE checkpoint: tensor shapes do not match config");
  return m;
}

void save_sae(const SaeModel& m, const std::filesystem::path& path) {
  const std::string bytes = serialize_sae(m);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write SAE checkpoint: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

SaeModel load_sae(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open SAE checkpoint: " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_sae(buffer.str());
}

std::string sae_checksum(const SaeModel& m) { return sha256_hex(weight_payload(m)); }

}  // namespace facetsteer
