#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "facetsteer/taxonomy.hpp"
#include "json.hpp"

namespace facetsteer {

inline constexpr std::size_t kWordCap = 18;

enum class Context { Study, Work, Daily, Social };

std::string_view context_code(Context c);
Context parse_context(std::string_view code);

struct CorpusItem {
  std::string id;
  FacetId facet;
  Polarity polarity = Polarity::Positive;
  Context context = Context::Daily;
  std::string text;
  std::size_t word_count = 0;

  friend bool operator==(const CorpusItem&, const CorpusItem&) = default;
};

enum class Provenance { Synthetic, Imported };

struct FacetCorpus {
  std::vector<CorpusItem> items;
  Provenance provenance = Provenance::Imported;

  // Indexed by FacetId::ordinal(); first = positive, second = negative.
  std::array<std::pair<std::size_t, std::size_t>, kFacetCount> polarity_counts() const;
  bool balanced() const;
};

// Whitespace-separated word count; used for the word cap.
std::size_t count_words(std::string_view text);

// Lowercase, split on whitespace and punctuation. Shared by the leakage
// classifier and the routing keyword scorer.
std::vector<std::string> tokenize(std::string_view text);

// Throws ParseError / SchemaError with the 1-based line number.
FacetCorpus load_corpus(const std::filesystem::path& path);
FacetCorpus parse_corpus_jsonl(std::string_view contents);
std::string corpus_to_jsonl(const FacetCorpus& corpus);
void save_corpus(const FacetCorpus& corpus, const std::filesystem::path& path);

struct FacetCount {
  FacetId facet;
  std::size_t positive = 0;
  std::size_t negative = 0;
};

struct ValidationReport {
  std::vector<FacetCount> per_facet;       // all 30 facets, table order
  std::vector<FacetId> balance_violations;  // positive != negative
  std::vector<FacetId> missing_facets;      // no items at all
  std::vector<std::string> word_cap_violations;
  // Byte-identical texts with opposite polarity inside one facet.
  std::vector<std::pair<std::string, std::string>> duplicate_pairs;
  std::vector<std::string> empty_texts;
  // Informational: items without a first-person marker (I, me, my, ...).
  std::vector<std::string> not_first_person;

  std::size_t violation_count() const;
  nlohmann::ordered_json to_json() const;
};

ValidationReport validate_corpus(const FacetCorpus& corpus);

// Deterministic template expansion: per facet, `pairs_per_facet` scenarios,
// each producing a positive item and a minimal-edit negative counterpart.
FacetCorpus generate_synthetic_corpus(std::uint64_t seed, std::size_t pairs_per_facet);

}  // namespace facetsteer
