#pragma once

#include <array>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "facetsteer/chat_client.hpp"
#include "facetsteer/cvtrain.hpp"
#include "facetsteer/steering.hpp"
#include "facetsteer/taxonomy.hpp"
#include "json.hpp"

namespace facetsteer {

struct FacetScores {
  std::array<double, kFacetCount> scores{};  // indexed by FacetId::ordinal, each in [0,1]
  std::string scorer_tag;

  double operator[](FacetId f) const { return scores[f.ordinal()]; }
  double& operator[](FacetId f) { return scores[f.ordinal()]; }
  nlohmann::ordered_json to_json() const;

  friend bool operator==(const FacetScores&, const FacetScores&) = default;
};

class FacetScorer {
 public:
  virtual ~FacetScorer() = default;
  // Throws PreconditionError on an empty query.
  virtual FacetScores score(std::string_view query) const = 0;
  virtual std::string tag() const = 0;
};

// Score of a facet = (query content tokens found in the facet's keyword list)
// / (query content tokens). Stopwords are not content tokens.
class KeywordScorer : public FacetScorer {
 public:
  FacetScores score(std::string_view query) const override;
  std::string tag() const override;
};

bool is_stopword(std::string_view token);

// Asks a chat model for {"facet_scores": {canonical_name: number}}. Unknown
// facet names or non-numeric values reject the reply; missing facets score 0;
// values are clipped to [0,1].
class ChatScorer : public FacetScorer {
 public:
  ChatScorer(std::shared_ptr<const ChatClient> client, int max_retries = 2, double backoff_initial_s = 0.5);
  FacetScores score(std::string_view query) const override;
  std::string tag() const override { return "chat"; }

  static const std::string& system_instruction();
  static FacetScores parse_reply(const std::string& reply);

 private:
  std::shared_ptr<const ChatClient> client_;
  int max_retries_;
  double backoff_initial_s_;
};

FacetScores score_facets(std::string_view query, const FacetScorer& scorer);

// Scores every query with at most `max_in_flight` concurrent scorer calls.
// Output order follows input order.
std::vector<FacetScores> score_batch(const FacetScorer& scorer, const std::vector<std::string>& queries,
                                     std::size_t max_in_flight);

struct RoutingPolicy {
  double threshold = 0.25;
  int per_dimension_top_k = 1;
  double alpha_default = 1.0;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static RoutingPolicy from_json(const nlohmann::json& j);
};

// Per dimension: the top-k facets with score >= threshold among `available`,
// by score descending then facet_index ascending. Result is in taxonomy order.
std::vector<FacetId> select_cvs(const FacetScores& scores, const RoutingPolicy& policy,
                                const std::set<FacetId>& available);

using CvBank = std::map<FacetId, ControlVector>;
std::set<FacetId> available_facets(const CvBank& bank);

// One entry per selected facet at `layer`, using the CV's decoded vector and
// alpha from `alpha_map` or `alpha_default`.
InjectionPlan compose_injection(const std::vector<FacetId>& selected, const CvBank& bank, int layer,
                                const std::map<FacetId, double>& alpha_map, double alpha_default);

}  // namespace facetsteer
