#include "facetsteer/eval.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <future>
#include <random>
#include <regex>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "facetsteer/error.hpp"

namespace facetsteer {
namespace {

constexpr std::array<std::string_view, 4> kAbstractTemplates = {
    "What does {} mean to you?",
    "How would you describe your attitude toward {}?",
    "Tell me how {} fits into your life.",
    "What comes to mind when someone mentions {}?",
};

constexpr std::array<std::string_view, 4> kContextTemplates = {
    "During a week of classes and homework, how do you deal with {}?",
    "At your job, when {} comes up, what do you do?",
    "On an ordinary morning at home, how does {} show up for you?",
    "When you are out with friends, how do you respond to {}?",
};

constexpr std::array<std::string_view, 26> kRosterNames = {
    "Ada",   "Bram",  "Cleo",   "Dario", "Edith", "Farid", "Greta", "Hugo",  "Ines", "Jonah",  "Kira",  "Lucan", "Mira",
    "Nils",  "Oona",  "Pavel",  "Quinn", "Rosa",  "Silas", "Tamsin", "Umar", "Vera", "Wendell", "Xenia", "Yusuf", "Zelda"};

constexpr std::array<std::pair<Flag, std::string_view>, 3> kFlagMarkers = {
    {{Flag::Repetition, "REPEAT"}, {Flag::OutOfCharacter, "OOC"}, {Flag::MultiTurn, "MULTI"}}};

std::string_view level_name(Level l) { return l == Level::High ? "high" : "low"; }

Level parse_level(std::string_view s) {
  if (s == "high") return Level::High;
  if (s == "low") return Level::Low;
  throw SchemaError(fmt::format("truth label \"{}\" is not \"low\" or \"high\"", s));
}

std::size_t dim_index(Dimension d) { return static_cast<std::size_t>(d); }

}  // namespace

std::string_view question_mode_name(QuestionMode m) { return m == QuestionMode::Abstract ? "abstract" : "contextual"; }

QuestionMode parse_question_mode(std::string_view name) {
  if (name == "abstract") return QuestionMode::Abstract;
  if (name == "contextual") return QuestionMode::Contextual;
  throw SchemaError(fmt::format("unknown question mode \"{}\"", name));
}

std::string_view question_pair_key(std::string_view id) {
  const auto dash = id.rfind('-');
  return dash == std::string_view::npos ? id : id.substr(0, dash);
}

std::vector<std::pair<std::size_t, std::size_t>> QuestionSet::pairs() const {
  std::map<std::string_view, std::size_t> contextual;
  for (std::size_t i = 0; i < questions.size(); ++i)
    if (questions[i].mode == QuestionMode::Contextual) contextual.emplace(question_pair_key(questions[i].id), i);
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t i = 0; i < questions.size(); ++i) {
    if (questions[i].mode != QuestionMode::Abstract) continue;
    const auto it = contextual.find(question_pair_key(questions[i].id));
    if (it != contextual.end()) out.emplace_back(i, it->second);
  }
  return out;
}

QuestionSet parse_questions(std::string_view jsonl) {
  QuestionSet set;
  std::set<std::string> ids;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= jsonl.size()) {
    const auto nl = jsonl.find('\n', pos);
    std::string_view line = jsonl.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? jsonl.size() + 1 : nl + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw ParseError(fmt::format("questions line {}: malformed JSON", line_no));
    auto field = [&](const char* key) -> std::string {
      const auto it = j.find(key);
      if (it == j.end() || !it->is_string())
        throw SchemaError(fmt::format("questions line {}: missing string key \"{}\"", line_no, key));
      return it->get<std::string>();
    };
    Question q;
    q.id = field("id");
    q.text = field("text");
    try {
      q.mode = parse_question_mode(field("mode"));
      q.dimension = parse_dimension(field("dimension"));
      if (j.contains("context")) q.context = parse_context(field("context"));
    } catch (const SchemaError& e) {
      throw SchemaError(fmt::format("questions line {}: {}", line_no, e.what()));
    }
    if (q.mode == QuestionMode::Contextual && !q.context)
      throw SchemaError(fmt::format("questions line {}: contextual item \"{}\" has no context", line_no, q.id));
    if (!ids.insert(q.id).second) throw SchemaError(fmt::format("questions line {}: duplicate id \"{}\"", line_no, q.id));
    set.questions.push_back(std::move(q));
  }
  if (set.questions.empty()) throw SchemaError("question file is empty");
  return set;
}

QuestionSet load_questions(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open questions: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_questions(ss.str());
}

std::string questions_to_jsonl(const QuestionSet& set) {
  std::string out;
  for (const auto& q : set.questions) {
    nlohmann::ordered_json j;
    j["id"] = q.id;
    j["text"] = q.text;
    j["mode"] = std::string(question_mode_name(q.mode));
    j["dimension"] = std::string(dimension_name(q.dimension));
    if (q.context) j["context"] = std::string(context_code(*q.context));
    out += j.dump() + '\n';
  }
  return out;
}

QuestionSet generate_questions(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  QuestionSet set;
  for (std::size_t i = 0; i < kAbstractQuestionCount; ++i) {
    const Dimension d = kDimensions[i % kDimensions.size()];
    const int facet_index = static_cast<int>((i / kDimensions.size()) % kFacetsPerDimension) + 1;
    const auto keywords = facet_cues(FacetId{d, facet_index}).keywords;
    const std::string_view kw = keywords[(i / kFacetCount) % keywords.size()];
    const std::string key = fmt::format("q{:02d}", i + 1);
    const auto ctx = static_cast<Context>(rng() % kContextTemplates.size());

    set.questions.push_back({key + "-abs", fmt::format(fmt::runtime(kAbstractTemplates[rng() % kAbstractTemplates.size()]), kw),
                             QuestionMode::Abstract, d, std::nullopt});
    set.questions.push_back({key + "-ctx",
                             fmt::format(fmt::runtime(kContextTemplates[static_cast<std::size_t>(ctx)]), kw),
                             QuestionMode::Contextual, d, ctx});
  }
  return set;
}

std::string_view flag_name(Flag f) {
  switch (f) {
    case Flag::Repetition: return "repetition";
    case Flag::OutOfCharacter: return "out_of_character";
    case Flag::MultiTurn: return "multi_turn";
  }
  return "unknown";
}

nlohmann::ordered_json JudgedScore::to_json() const {
  nlohmann::ordered_json s = nlohmann::ordered_json::object();
  for (Dimension d : kDimensions)
    if (scores[dim_index(d)]) s[std::string(dimension_name(d))] = *scores[dim_index(d)];
  nlohmann::ordered_json f = nlohmann::ordered_json::array();
  for (const auto& [flag, marker] : kFlagMarkers)
    if (has(flag)) f.push_back(std::string(flag_name(flag)));
  return {{"character_id", character_id}, {"question_id", question_id}, {"scores", s}, {"flags", f}};
}

void JudgedScore::validate() const {
  for (Dimension d : kDimensions) {
    const auto& s = scores[dim_index(d)];
    if (s && !(*s >= 0.0 && *s <= 1.0))
      throw SchemaError(fmt::format("judged {} score {} outside [0,1]", dimension_name(d), *s));
  }
  if (flags & ~7u) throw SchemaError("judged flags contain unknown bits");
}

std::string CharacterProfile::description() const {
  std::string out = name + ":";
  for (Dimension d : kDimensions)
    out += fmt::format(" {} {}{}", level_name(truth[dim_index(d)]), dimension_name(d),
                       d == Dimension::Neuroticism ? "." : ",");
  return out;
}

std::vector<CharacterProfile> make_roster(std::uint64_t seed, std::size_t n) {
  std::mt19937_64 rng(seed);
  std::vector<CharacterProfile> out;
  for (std::size_t i = 0; i < n; ++i) {
    CharacterProfile c;
    c.id = fmt::format("char{:02d}", i + 1);
    c.name = i < kRosterNames.size() ? std::string(kRosterNames[i]) : fmt::format("Character {}", i + 1);
    for (auto& level : c.truth) level = (rng() & 1) ? Level::High : Level::Low;
    out.push_back(std::move(c));
  }
  return out;
}

TruthTable truth_of(const std::vector<CharacterProfile>& roster) {
  TruthTable t;
  for (const auto& c : roster) t[c.id] = c.truth;
  return t;
}

nlohmann::ordered_json truth_to_json(const TruthTable& truth) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [id, labels] : truth) {
    nlohmann::ordered_json row;
    for (Dimension d : kDimensions) row[std::string(dimension_name(d))] = std::string(level_name(labels[dim_index(d)]));
    j[id] = row;
  }
  return j;
}

TruthTable truth_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw SchemaError("truth labels must be a JSON object");
  TruthTable t;
  for (const auto& [id, row] : j.items()) {
    if (!row.is_object()) throw SchemaError(fmt::format("truth labels for \"{}\" must be an object", id));
    TraitLabels labels{};
    for (Dimension d : kDimensions) {
      const auto it = row.find(std::string(dimension_name(d)));
      if (it == row.end() || !it->is_string())
        throw SchemaError(fmt::format("truth labels for \"{}\" lack \"{}\"", id, dimension_name(d)));
      labels[dim_index(d)] = parse_level(it->get<std::string>());
    }
    t[id] = labels;
  }
  return t;
}

TruthTable load_truth(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open truth labels: " + path.string());
  const auto j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ParseError("truth labels: malformed JSON in " + path.string());
  return truth_from_json(j);
}

JudgedScore StubJudge::judge(const CharacterProfile& character, const Question& question,
                             std::string_view response) const {
  static const std::regex marker(R"(\[\[([A-Z]+)(?::([^\]]*))?\]\])");
  JudgedScore out;
  out.character_id = character.id;
  out.question_id = question.id;
  const std::string text(response);
  for (auto it = std::sregex_iterator(text.begin(), text.end(), marker); it != std::sregex_iterator(); ++it) {
    const std::string tag = (*it)[1].str();
    if ((*it)[2].matched) {
      const auto d = tag.size() == 1 ? dimension_from_letter(tag[0]) : std::nullopt;
      if (!d) throw ParseError(fmt::format("judge marker \"{}\" names no dimension", it->str()));
      const std::string value = (*it)[2].str();
      double v = 0.0;
      const auto [end, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
      if (ec != std::errc() || end != value.data() + value.size() || !(v >= 0.0 && v <= 1.0))
        throw ParseError(fmt::format("judge marker \"{}\" needs a score in [0,1]", it->str()));
      out.scores[dim_index(*d)] = v;
      continue;
    }
    bool known = false;
    for (const auto& [flag, name] : kFlagMarkers)
      if (tag == name) {
        out.set(flag);
        known = true;
      }
    if (!known) throw ParseError(fmt::format("unknown judge marker \"{}\"", it->str()));
  }
  return out;
}

ChatJudge::ChatJudge(std::shared_ptr<const ChatClient> client, int max_retries, double backoff_initial_s)
    : client_(std::move(client)), max_retries_(max_retries), backoff_initial_s_(backoff_initial_s) {
  if (!client_) throw PreconditionError("ChatJudge needs a client");
}

const std::string& ChatJudge::rubric() {
  static const std::string text =
      "You judge role-play responses. Given a character profile, a question and the character's response, rate "
      "each Big Five dimension the response reveals from 0 (low) to 1 (high). Flag \"repetition\" if the response "
      "repeats itself, \"out_of_character\" if it breaks the persona, and \"multi_turn\" if it continues the "
      "conversation on the user's behalf. Reply with a single JSON object {\"scores\": {\"<Dimension>\": "
      "<number>}, \"flags\": [\"<flag>\"]} and nothing else. Dimensions: Openness, Conscientiousness, "
      "Extraversion, Agreeableness, Neuroticism.";
  return text;
}

JudgedScore ChatJudge::parse_reply(const std::string& reply) {
  const auto j = extract_json_object(reply);
  const auto sc = j.find("scores");
  if (sc == j.end() || !sc->is_object()) throw SchemaError("judge reply lacks a \"scores\" object");
  JudgedScore out;
  for (const auto& [name, value] : sc->items()) {
    Dimension d;
    try {
      d = parse_dimension(name);
    } catch (const Error&) {
      throw SchemaError(fmt::format("judge reply names unknown dimension \"{}\"", name));
    }
    if (!value.is_number()) throw SchemaError(fmt::format("judge score for \"{}\" is not a number", name));
    out.scores[dim_index(d)] = value.get<double>();
  }
  if (const auto fl = j.find("flags"); fl != j.end()) {
    if (!fl->is_array()) throw SchemaError("judge reply \"flags\" must be an array");
    for (const auto& f : *fl) {
      bool known = false;
      for (const auto& [flag, marker] : kFlagMarkers)
        if (f.is_string() && f.get<std::string>() == flag_name(flag)) {
          out.set(flag);
          known = true;
        }
      if (!known) throw SchemaError(fmt::format("judge reply has unknown flag {}", f.dump()));
    }
  }
  out.validate();
  return out;
}

JudgedScore ChatJudge::judge(const CharacterProfile& character, const Question& question,
                             std::string_view response) const {
  const std::string user = fmt::format("Character: {}\nQuestion: {}\nResponse: {}", character.description(),
                                       question.text, response);
  auto out = complete_with_retries<JudgedScore>(*client_, rubric(), user, &parse_reply, max_retries_,
                                                std::chrono::duration<double>(backoff_initial_s_));
  out.character_id = character.id;
  out.question_id = question.id;
  return out;
}

JudgedScore judge_response(const Judge& judge, const CharacterProfile& character, const Question& question,
                           std::string_view response) {
  auto out = judge.judge(character, question, response);
  out.validate();
  return out;
}

std::vector<JudgedScore> judge_batch(const Judge& judge, const std::vector<JudgeItem>& items,
                                     std::size_t max_in_flight) {
  if (max_in_flight == 0) max_in_flight = 1;
  std::vector<JudgedScore> out(items.size());
  for (std::size_t begin = 0; begin < items.size(); begin += max_in_flight) {
    const std::size_t end = std::min(items.size(), begin + max_in_flight);
    if (end - begin == 1) {
      const auto& it = items[begin];
      out[begin] = judge_response(judge, *it.character, *it.question, it.response);
      continue;
    }
    std::vector<std::future<JudgedScore>> wave;
    for (std::size_t i = begin; i < end; ++i)
      wave.push_back(std::async(std::launch::async, [&judge, &it = items[i]] {
        return judge_response(judge, *it.character, *it.question, it.response);
      }));
    for (std::size_t i = begin; i < end; ++i) out[i] = wave[i - begin].get();
  }
  return out;
}

nlohmann::ordered_json MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["units"] = std::string(kMetricsUnitsNote);
  j["threshold"] = threshold;
  j["n_characters"] = n_characters;
  j["n_responses"] = n_responses;
  j["fa"] = fa;
  j["mse"] = mse;
  j["mae"] = mae;
  j["mtr"] = mtr;
  nlohmann::ordered_json per = nlohmann::ordered_json::object();
  for (Dimension d : kDimensions) {
    const auto& m = per_dimension[dim_index(d)];
    per[std::string(dimension_name(d))] = {{"accuracy", m.accuracy}, {"mse", m.mse}, {"mae", m.mae}};
  }
  j["per_dimension"] = per;
  return j;
}

std::string MetricsReport::to_csv() const {
  std::string out = fmt::format("# {}\nscope,fa,accuracy,mse,mae,mtr\n", kMetricsUnitsNote);
  out += fmt::format("overall,{:.6g},,{:.6g},{:.6g},{:.6g}\n", fa, mse, mae, mtr);
  for (Dimension d : kDimensions) {
    const auto& m = per_dimension[dim_index(d)];
    out += fmt::format("{},,{:.6g},{:.6g},{:.6g},\n", dimension_name(d), m.accuracy, m.mse, m.mae);
  }
  return out;
}

MetricsReport compute_metrics(const std::vector<JudgedScore>& judged, const TruthTable& truth, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw PreconditionError("binarize threshold must be in (0,1)");
  if (judged.empty()) throw PreconditionError("compute_metrics: no responses");

  struct Acc {
    std::array<double, 5> sum{};
    std::array<std::size_t, 5> n{};
  };
  std::map<std::string, Acc> by_character;
  std::size_t flagged = 0;
  for (const auto& j : judged) {
    j.validate();
    if (!truth.count(j.character_id))
      throw PreconditionError(fmt::format("character \"{}\" has no truth labels", j.character_id));
    auto& acc = by_character[j.character_id];
    for (std::size_t d = 0; d < 5; ++d)
      if (j.scores[d]) {
        acc.sum[d] += *j.scores[d];
        ++acc.n[d];
      }
    if (j.flags != 0) ++flagged;
  }

  MetricsReport r;
  r.threshold = threshold;
  r.n_characters = by_character.size();
  r.n_responses = judged.size();
  std::size_t all_correct = 0;
  std::array<std::size_t, 5> correct{};
  for (const auto& [id, acc] : by_character) {
    const auto& labels = truth.at(id);
    bool all = true;
    for (std::size_t d = 0; d < 5; ++d) {
      if (acc.n[d] == 0)
        throw PreconditionError(
            fmt::format("character \"{}\" has no judged score for {}", id, dimension_name(kDimensions[d])));
      const double score = acc.sum[d] / static_cast<double>(acc.n[d]);
      const double target = labels[d] == Level::High ? 1.0 : 0.0;
      const bool ok = (score >= threshold) == (labels[d] == Level::High);
      all = all && ok;
      correct[d] += ok ? 1 : 0;
      const double err = score - target;
      r.per_dimension[d].mse += err * err;
      r.per_dimension[d].mae += std::abs(err);
    }
    all_correct += all ? 1 : 0;
  }
  const double nc = static_cast<double>(r.n_characters);
  for (std::size_t d = 0; d < 5; ++d) {
    r.mse += r.per_dimension[d].mse;
    r.mae += r.per_dimension[d].mae;
    r.per_dimension[d].mse /= nc;
    r.per_dimension[d].mae /= nc;
    r.per_dimension[d].accuracy = 100.0 * static_cast<double>(correct[d]) / nc;
  }
  r.mse /= 5.0 * nc;
  r.mae /= 5.0 * nc;
  r.fa = 100.0 * static_cast<double>(all_correct) / nc;
  r.mtr = 100.0 * static_cast<double>(flagged) / static_cast<double>(r.n_responses);
  return r;
}

std::string template_response(const CharacterProfile& character, const Question& question, double score,
                              unsigned flags) {
  const char letter = dimension_letter(question.dimension);
  std::string stance = score >= 0.5 ? "that is very much who I am" : "that is not really me";
  std::string out = fmt::format("{} answers: {}. [[{}:{:.6f}]]", character.name, stance, letter,
                                std::clamp(score, 0.0, 1.0));
  for (const auto& [flag, marker] : kFlagMarkers)
    if (flags & static_cast<unsigned>(flag)) out += fmt::format(" [[{}]]", marker);
  return out;
}

}  // namespace facetsteer
