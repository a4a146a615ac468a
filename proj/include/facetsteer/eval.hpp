#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "facetsteer/chat_client.hpp"
#include "facetsteer/corpus.hpp"
#include "facetsteer/taxonomy.hpp"
#include "json.hpp"

namespace facetsteer {

enum class QuestionMode { Abstract, Contextual };
std::string_view question_mode_name(QuestionMode m);
QuestionMode parse_question_mode(std::string_view name);

struct Question {
  std::string id;
  std::string text;
  QuestionMode mode = QuestionMode::Abstract;
  Dimension dimension = Dimension::Openness;
  std::optional<Context> context;  // required for contextual items

  friend bool operator==(const Question&, const Question&) = default;
};

// Id up to the last '-', e.g. "q07" for "q07-abs" and "q07-ctx".
std::string_view question_pair_key(std::string_view id);

struct QuestionSet {
  std::vector<Question> questions;

  // (abstract index, contextual index) for every shared key, in file order of
  // the abstract item.
  std::vector<std::pair<std::size_t, std::size_t>> pairs() const;
};

// JSONL {"id","text","mode","dimension","context"?}. Errors name the line.
QuestionSet parse_questions(std::string_view jsonl);
QuestionSet load_questions(const std::filesystem::path& path);
std::string questions_to_jsonl(const QuestionSet& set);

// 44 abstract items spread over the five dimensions, each rewritten once into
// a contextual item; every question carries a routing keyword of one facet.
QuestionSet generate_questions(std::uint64_t seed);
inline constexpr std::size_t kAbstractQuestionCount = 44;

enum class Flag : unsigned { Repetition = 1, OutOfCharacter = 2, MultiTurn = 4 };
std::string_view flag_name(Flag f);  // "repetition", "out_of_character", "multi_turn"

struct JudgedScore {
  std::string character_id;
  std::string question_id;
  std::array<std::optional<double>, 5> scores;  // by Dimension, each in [0,1]
  unsigned flags = 0;

  bool has(Flag f) const { return (flags & static_cast<unsigned>(f)) != 0; }
  void set(Flag f) { flags |= static_cast<unsigned>(f); }
  nlohmann::ordered_json to_json() const;
  void validate() const;

  friend bool operator==(const JudgedScore&, const JudgedScore&) = default;
};

enum class Level { Low, High };
using TraitLabels = std::array<Level, 5>;
using TruthTable = std::map<std::string, TraitLabels>;

struct CharacterProfile {
  std::string id;
  std::string name;
  TraitLabels truth{};
  std::string description() const;
};

inline constexpr std::size_t kRosterSize = 26;
std::vector<CharacterProfile> make_roster(std::uint64_t seed, std::size_t n = kRosterSize);
TruthTable truth_of(const std::vector<CharacterProfile>& roster);

// {character_id: {dimension: "low"|"high"}}
nlohmann::ordered_json truth_to_json(const TruthTable& truth);
TruthTable truth_from_json(const nlohmann::json& j);
TruthTable load_truth(const std::filesystem::path& path);

class Judge {
 public:
  virtual ~Judge() = default;
  virtual JudgedScore judge(const CharacterProfile& character, const Question& question,
                            std::string_view response) const = 0;
};

// Reads markers planted in the response: [[O:0.9]] style scores (letters
// O C E A N) and the flags [[REPEAT]], [[OOC]], [[MULTI]].
class StubJudge : public Judge {
 public:
  JudgedScore judge(const CharacterProfile& character, const Question& question,
                    std::string_view response) const override;
};

// Expects {"scores": {dimension: number}, "flags": [flag names]}; scores
// outside [0,1] or unknown names reject the reply.
class ChatJudge : public Judge {
 public:
  ChatJudge(std::shared_ptr<const ChatClient> client, int max_retries = 2, double backoff_initial_s = 0.5);
  JudgedScore judge(const CharacterProfile& character, const Question& question,
                    std::string_view response) const override;

  static const std::string& rubric();
  static JudgedScore parse_reply(const std::string& reply);

 private:
  std::shared_ptr<const ChatClient> client_;
  int max_retries_;
  double backoff_initial_s_;
};

JudgedScore judge_response(const Judge& judge, const CharacterProfile& character, const Question& question,
                           std::string_view response);

struct JudgeItem {
  const CharacterProfile* character;
  const Question* question;
  std::string response;
};
// At most `max_in_flight` concurrent judge calls; output follows input order.
std::vector<JudgedScore> judge_batch(const Judge& judge, const std::vector<JudgeItem>& items,
                                     std::size_t max_in_flight);

inline constexpr std::string_view kMetricsUnitsNote =
    "scores on [0,1]; truth encoded low=0, high=1; MSE and MAE on that scale; FA and MTR in percent";

struct DimensionMetrics {
  double accuracy = 0.0;  // percent of characters with the right label
  double mse = 0.0;
  double mae = 0.0;
};

struct MetricsReport {
  double fa = 0.0;
  double mse = 0.0;
  double mae = 0.0;
  double mtr = 0.0;
  std::array<DimensionMetrics, 5> per_dimension{};
  std::size_t n_characters = 0;
  std::size_t n_responses = 0;
  double threshold = 0.5;

  nlohmann::ordered_json to_json() const;
  // "# <units note>" line, header row, one "overall" row, one row per dimension.
  std::string to_csv() const;
};

// Predicted score per character and dimension = mean of that character's
// judged scores for the dimension; label high iff score >= threshold.
MetricsReport compute_metrics(const std::vector<JudgedScore>& judged, const TruthTable& truth,
                              double threshold = 0.5);

// Template reply carrying a stub-judge marker for the question's dimension.
std::string template_response(const CharacterProfile& character, const Question& question, double score,
                              unsigned flags = 0);

}  // namespace facetsteer
