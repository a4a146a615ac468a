#include "facetsteer/routing.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <future>

#include <fmt/format.h>

#include "facetsteer/corpus.hpp"
#include "facetsteer/error.hpp"

namespace facetsteer {
namespace {

constexpr std::string_view kStopwords[] = {
    "a",    "about", "an",   "and",  "any",   "are",   "as",   "at",   "be",    "but",  "by",    "can",
    "could", "do",   "does", "for",  "from",  "give",  "have", "how",  "i",     "if",   "in",    "is",
    "it",   "me",    "my",   "of",   "on",    "or",    "please", "should", "so", "some", "that", "the",
    "this", "to",    "what", "when", "where", "which", "who",  "why",  "will",  "with", "would", "you",
    "your"};

}  // namespace

bool is_stopword(std::string_view token) {
  return std::find(std::begin(kStopwords), std::end(kStopwords), token) != std::end(kStopwords);
}

nlohmann::ordered_json FacetScores::to_json() const {
  nlohmann::ordered_json s = nlohmann::ordered_json::object();
  for (FacetId f : all_facets()) s[std::string(f.name())] = (*this)[f];
  return {{"scorer", scorer_tag}, {"facet_scores", s}};
}

std::string KeywordScorer::tag() const { return fmt::format("keyword-v{}", kTaxonomyVersion); }

FacetScores KeywordScorer::score(std::string_view query) const {
  if (query.empty()) throw PreconditionError("routing query is empty");
  std::vector<std::string> content;
  for (auto& t : tokenize(query))
    if (!is_stopword(t)) content.push_back(std::move(t));
  FacetScores out;
  out.scorer_tag = tag();
  if (content.empty()) return out;
  for (FacetId f : all_facets()) {
    const auto kw = facet_cues(f).keywords;
    std::size_t hits = 0;
    for (const auto& t : content)
      if (std::find(kw.begin(), kw.end(), t) != kw.end()) ++hits;
    out[f] = static_cast<double>(hits) / static_cast<double>(content.size());
  }
  return out;
}

ChatScorer::ChatScorer(std::shared_ptr<const ChatClient> client, int max_retries, double backoff_initial_s)
    : client_(std::move(client)), max_retries_(max_retries), backoff_initial_s_(backoff_initial_s) {
  if (!client_) throw PreconditionError("ChatScorer needs a client");
}

const std::string& ChatScorer::system_instruction() {
  static const std::string text = [] {
    std::string names;
    for (FacetId f : all_facets()) names += fmt::format("{}{}", names.empty() ? "" : ", ", f.name());
    return fmt::format(
        "You route role-play prompts to Big Five personality facets. For the user's prompt, rate how strongly "
        "each facet is cued, from 0 (not cued) to 1 (clearly cued). Reply with a single JSON object of the form "
        "{{\"facet_scores\": {{\"<facet>\": <number>}}}} and nothing else. Facet names: {}.",
        names);
  }();
  return text;
}

FacetScores ChatScorer::parse_reply(const std::string& reply) {
  const auto j = extract_json_object(reply);
  const auto it = j.find("facet_scores");
  if (it == j.end() || !it->is_object()) throw SchemaError("scorer reply lacks a \"facet_scores\" object");
  FacetScores out;
  out.scorer_tag = "chat";
  for (const auto& [name, value] : it->items()) {
    const auto facet = find_facet(name);
    if (!facet) throw SchemaError(fmt::format("scorer reply names unknown facet \"{}\"", name));
    if (!value.is_number()) throw SchemaError(fmt::format("scorer reply value for \"{}\" is not a number", name));
    const double v = value.get<double>();
    if (!std::isfinite(v)) throw SchemaError(fmt::format("scorer reply value for \"{}\" is not finite", name));
    (out)[*facet] = std::clamp(v, 0.0, 1.0);
  }
  return out;
}

FacetScores ChatScorer::score(std::string_view query) const {
  if (query.empty()) throw PreconditionError("routing query is empty");
  return complete_with_retries<FacetScores>(*client_, system_instruction(), std::string(query), &parse_reply,
                                            max_retries_, std::chrono::duration<double>(backoff_initial_s_));
}

FacetScores score_facets(std::string_view query, const FacetScorer& scorer) { return scorer.score(query); }

std::vector<FacetScores> score_batch(const FacetScorer& scorer, const std::vector<std::string>& queries,
                                     std::size_t max_in_flight) {
  if (max_in_flight == 0) max_in_flight = 1;
  std::vector<FacetScores> out(queries.size());
  for (std::size_t begin = 0; begin < queries.size(); begin += max_in_flight) {
    const std::size_t end = std::min(queries.size(), begin + max_in_flight);
    std::vector<std::future<FacetScores>> wave;
    for (std::size_t i = begin; i < end; ++i)
      wave.push_back(std::async(std::launch::async, [&scorer, &q = queries[i]] { return scorer.score(q); }));
    for (std::size_t i = begin; i < end; ++i) out[i] = wave[i - begin].get();
  }
  return out;
}

void RoutingPolicy::validate() const {
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw ConfigError("routing threshold must be in [0,1]");
  if (per_dimension_top_k < 1 || per_dimension_top_k > static_cast<int>(kFacetsPerDimension))
    throw ConfigError("routing per_dimension_top_k must be in 1..6");
  if (!std::isfinite(alpha_default)) throw ConfigError("routing alpha_default must be finite");
}

nlohmann::ordered_json RoutingPolicy::to_json() const {
  return {{"threshold", threshold}, {"per_dimension_top_k", per_dimension_top_k}, {"alpha_default", alpha_default}};
}

RoutingPolicy RoutingPolicy::from_json(const nlohmann::json& j) {
  RoutingPolicy p;
  try {
    p.threshold = j.value("threshold", p.threshold);
    p.per_dimension_top_k = j.value("per_dimension_top_k", p.per_dimension_top_k);
    p.alpha_default = j.value("alpha_default", p.alpha_default);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("routing policy: ") + e.what());
  }
  p.validate();
  return p;
}

std::vector<FacetId> select_cvs(const FacetScores& scores, const RoutingPolicy& policy,
                                const std::set<FacetId>& available) {
  policy.validate();
  std::vector<FacetId> out;
  for (Dimension d : kDimensions) {
    std::vector<FacetId> cands;
    for (FacetId f : all_facets())
      if (f.dimension == d && scores[f] >= policy.threshold && available.count(f)) cands.push_back(f);
    std::stable_sort(cands.begin(), cands.end(), [&](FacetId a, FacetId b) { return scores[a] > scores[b]; });
    if (cands.size() > static_cast<std::size_t>(policy.per_dimension_top_k))
      cands.resize(static_cast<std::size_t>(policy.per_dimension_top_k));
    std::sort(cands.begin(), cands.end());
    out.insert(out.end(), cands.begin(), cands.end());
  }
  return out;
}

std::set<FacetId> available_facets(const CvBank& bank) {
  std::set<FacetId> out;
  for (const auto& [f, cv] : bank) out.insert(f);
  return out;
}

InjectionPlan compose_injection(const std::vector<FacetId>& selected, const CvBank& bank, int layer,
                                const std::map<FacetId, double>& alpha_map, double alpha_default) {
  InjectionPlan plan;
  Eigen::Index d_model = -1;
  for (FacetId f : selected) {
    const auto it = bank.find(f);
    if (it == bank.end()) throw PreconditionError(fmt::format("no control vector for facet \"{}\"", f.name()));
    const auto& v = it->second.decoded;
    if (d_model >= 0 && v.size() != d_model)
      throw DimensionError(fmt::format("control vector for \"{}\" has d_model {}, expected {}", f.name(), v.size(),
                                       d_model));
    d_model = v.size();
    const auto a = alpha_map.find(f);
    plan.entries.push_back({layer, v, a == alpha_map.end() ? alpha_default : a->second, f});
  }
  return plan;
}

}  // namespace facetsteer
