#include "facetsteer/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <fmt/format.h>

#include "facetsteer/error.hpp"

namespace facetsteer {
namespace {

constexpr std::array<std::string_view, 4> kContextCodes = {"study", "work", "daily", "social"};

constexpr std::array<std::array<std::string_view, 4>, 4> kOpeners = {{
    {"During group study", "Before the big exam", "In the school library", "After a long lecture"},
    {"At the office meeting", "On a busy workday", "During the team project", "After my shift ends"},
    {"At home this evening", "On my way home", "While cooking dinner", "On a quiet weekend"},
    {"At a friend's birthday", "During a weekend trip", "At the neighborhood event", "While meeting new people"},
}};

constexpr std::array<std::string_view, 5> kTails = {"", " today", " as usual", " once again", " this week"};

constexpr std::array<std::string_view, 8> kFirstPersonMarkers = {"i", "me", "my", "mine", "myself", "i'm", "i've", "i'd"};

std::size_t pick(std::mt19937_64& rng, std::size_t n) { return static_cast<std::size_t>(rng() % n); }

std::string require_string(const nlohmann::json& obj, const char* key, std::size_t line) {
  auto it = obj.find(key);
  if (it == obj.end()) throw SchemaError(fmt::format("line {}: missing key \"{}\"", line, key));
  if (!it->is_string()) throw SchemaError(fmt::format("line {}: key \"{}\" must be a string", line, key));
  return it->get<std::string>();
}

bool has_first_person(std::string_view text) {
  std::string word;
  auto check = [&] {
    bool hit = std::find(kFirstPersonMarkers.begin(), kFirstPersonMarkers.end(), word) != kFirstPersonMarkers.end();
    word.clear();
    return hit;
  };
  for (char ch : text) {
    unsigned char u = static_cast<unsigned char>(ch);
    if (std::isalpha(u) || ch == '\'') {
      word.push_back(static_cast<char>(std::tolower(u)));
    } else if (!word.empty() && check()) {
      return true;
    }
  }
  return !word.empty() && check();
}

}  // namespace

std::string_view context_code(Context c) { return kContextCodes[static_cast<std::size_t>(c)]; }

Context parse_context(std::string_view code) {
  for (std::size_t i = 0; i < kContextCodes.size(); ++i)
    if (kContextCodes[i] == code) return static_cast<Context>(i);
  throw SchemaError("unknown context \"" + std::string(code) + "\"");
}

std::array<std::pair<std::size_t, std::size_t>, kFacetCount> FacetCorpus::polarity_counts() const {
  std::array<std::pair<std::size_t, std::size_t>, kFacetCount> counts{};
  for (const auto& item : items) {
    auto& c = counts[item.facet.ordinal()];
    (item.polarity == Polarity::Positive ? c.first : c.second)++;
  }
  return counts;
}

bool FacetCorpus::balanced() const {
  const auto counts = polarity_counts();
  return std::all_of(counts.begin(), counts.end(), [](const auto& c) { return c.first == c.second; });
}

std::size_t count_words(std::string_view text) {
  std::size_t count = 0;
  bool in_word = false;
  for (char ch : text) {
    bool space = std::isspace(static_cast<unsigned char>(ch)) != 0;
    if (!space && !in_word) ++count;
    in_word = !space;
  }
  return count;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  for (char ch : text) {
    unsigned char u = static_cast<unsigned char>(ch);
    if (std::isspace(u) || std::ispunct(u)) {
      if (!current.empty()) tokens.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(static_cast<char>(std::tolower(u)));
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

FacetCorpus parse_corpus_jsonl(std::string_view contents) {
  FacetCorpus corpus;
  std::unordered_set<std::string> seen;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= contents.size()) {
    std::size_t end = contents.find('\n', pos);
    if (end == std::string_view::npos) end = contents.size();
    std::string_view line = contents.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (std::all_of(line.begin(), line.end(), [](char c) { return std::isspace(static_cast<unsigned char>(c)); }))
      continue;

    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(fmt::format("line {}: malformed JSON: {}", line_no, e.what()));
    }
    if (!obj.is_object()) throw ParseError(fmt::format("line {}: expected a JSON object", line_no));

    CorpusItem item;
    item.id = require_string(obj, "id", line_no);
    const std::string facet = require_string(obj, "facet", line_no);
    auto fid = find_facet(facet);
    if (!fid) throw SchemaError(fmt::format("line {}: unknown facet \"{}\"", line_no, facet));
    item.facet = *fid;
    try {
      item.polarity = parse_polarity(require_string(obj, "polarity", line_no));
      item.context = parse_context(require_string(obj, "context", line_no));
    } catch (const SchemaError& e) {
      throw SchemaError(fmt::format("line {}: {}", line_no, e.what()));
    }
    item.text = require_string(obj, "text", line_no);
    if (item.text.empty()) throw SchemaError(fmt::format("line {}: empty text for id \"{}\"", line_no, item.id));
    item.word_count = count_words(item.text);
    if (!seen.insert(item.id).second)
      throw SchemaError(fmt::format("line {}: duplicate id \"{}\"", line_no, item.id));
    corpus.items.push_back(std::move(item));
  }
  return corpus;
}

FacetCorpus load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open corpus file: " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  FacetCorpus corpus = parse_corpus_jsonl(buffer.str());
  corpus.provenance = Provenance::Imported;
  return corpus;
}

std::string corpus_to_jsonl(const FacetCorpus& corpus) {
  std::string out;
  for (const auto& item : corpus.items) {
    nlohmann::ordered_json obj;
    obj["id"] = item.id;
    obj["facet"] = std::string(item.facet.name());
    obj["polarity"] = std::string(polarity_code(item.polarity));
    obj["context"] = std::string(context_code(item.context));
    obj["text"] = item.text;
    out += obj.dump();
    out += '\n';
  }
  return out;
}

void save_corpus(const FacetCorpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write corpus file: " + path.string());
  out << corpus_to_jsonl(corpus);
  if (!out) throw IoError("write failed: " + path.string());
}

std::size_t ValidationReport::violation_count() const {
  return balance_violations.size() + missing_facets.size() + word_cap_violations.size() + duplicate_pairs.size() +
         empty_texts.size();
}

nlohmann::ordered_json ValidationReport::to_json() const {
  nlohmann::ordered_json j;
  j["violation_count"] = violation_count();
  auto& counts = j["per_facet"] = nlohmann::ordered_json::object();
  for (const auto& fc : per_facet) counts[std::string(fc.facet.name())] = {{"pos", fc.positive}, {"neg", fc.negative}};
  auto names = [](const std::vector<FacetId>& facets) {
    auto arr = nlohmann::ordered_json::array();
    for (auto f : facets) arr.push_back(std::string(f.name()));
    return arr;
  };
  j["balance_violations"] = names(balance_violations);
  j["missing_facets"] = names(missing_facets);
  j["word_cap"] = kWordCap;
  j["word_cap_violations"] = word_cap_violations;
  auto dups = nlohmann::ordered_json::array();
  for (const auto& [a, b] : duplicate_pairs) dups.push_back({a, b});
  j["duplicate_pairs"] = dups;
  j["empty_texts"] = empty_texts;
  j["not_first_person"] = not_first_person;
  return j;
}

ValidationReport validate_corpus(const FacetCorpus& corpus) {
  ValidationReport report;
  const auto counts = corpus.polarity_counts();
  for (FacetId f : all_facets()) {
    const auto& c = counts[f.ordinal()];
    report.per_facet.push_back({f, c.first, c.second});
    if (c.first == 0 && c.second == 0)
      report.missing_facets.push_back(f);
    else if (c.first != c.second)
      report.balance_violations.push_back(f);
  }

  // (facet, text) -> first id seen per polarity
  std::map<std::pair<std::size_t, std::string>, std::array<std::vector<std::string>, 2>> by_text;
  for (const auto& item : corpus.items) {
    if (item.text.empty()) report.empty_texts.push_back(item.id);
    if (count_words(item.text) > kWordCap) report.word_cap_violations.push_back(item.id);
    if (!has_first_person(item.text)) report.not_first_person.push_back(item.id);
    by_text[{item.facet.ordinal(), item.text}][item.polarity == Polarity::Positive ? 0 : 1].push_back(item.id);
  }
  for (const auto& [key, ids] : by_text)
    for (const auto& p : ids[0])
      for (const auto& n : ids[1]) report.duplicate_pairs.emplace_back(p, n);
  return report;
}

FacetCorpus generate_synthetic_corpus(std::uint64_t seed, std::size_t pairs_per_facet) {
  if (pairs_per_facet < 1) throw PreconditionError("per_facet must be at least 1");
  std::mt19937_64 rng(seed);
  FacetCorpus corpus;
  corpus.provenance = Provenance::Synthetic;
  corpus.items.reserve(kFacetCount * pairs_per_facet * 2);
  for (FacetId facet : all_facets()) {
    const FacetCues& cues = facet_cues(facet);
    const std::string slug = facet.slug();
    for (std::size_t j = 0; j < pairs_per_facet; ++j) {
      const std::size_t ctx = pick(rng, kContextCodes.size());
      const std::string_view opener = kOpeners[ctx][pick(rng, kOpeners[ctx].size())];
      const std::string_view tail = kTails[pick(rng, kTails.size())];
      for (Polarity pol : {Polarity::Positive, Polarity::Negative}) {
        CorpusItem item;
        item.id = fmt::format("{}-{:04d}-{}", slug, j, polarity_code(pol));
        item.facet = facet;
        item.polarity = pol;
        item.context = static_cast<Context>(ctx);
        item.text = fmt::format("{}, I {}{}.", opener, pol == Polarity::Positive ? cues.positive : cues.negative, tail);
        item.word_count = count_words(item.text);
        corpus.items.push_back(std::move(item));
      }
    }
  }
  return corpus;
}

}  // namespace facetsteer
