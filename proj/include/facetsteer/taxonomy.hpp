#pragma once

#include <array>
#include <compare>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>

namespace facetsteer {

enum class Dimension { Openness, Conscientiousness, Extraversion, Agreeableness, Neuroticism };

inline constexpr std::array<Dimension, 5> kDimensions = {
    Dimension::Openness, Dimension::Conscientiousness, Dimension::Extraversion,
    Dimension::Agreeableness, Dimension::Neuroticism};

inline constexpr std::size_t kFacetsPerDimension = 6;
inline constexpr std::size_t kFacetCount = 30;

// Bumped whenever cue phrases or routing keywords change; echoed into
// artifacts that depend on the table.
inline constexpr int kTaxonomyVersion = 1;

std::string_view dimension_name(Dimension d);
char dimension_letter(Dimension d);
Dimension parse_dimension(std::string_view name);
std::optional<Dimension> dimension_from_letter(char letter);

struct FacetId {
  Dimension dimension = Dimension::Openness;
  int facet_index = 1;  // 1..6 within the dimension

  // Position in the 30-entry table, dimension-major.
  std::size_t ordinal() const {
    return static_cast<std::size_t>(dimension) * kFacetsPerDimension +
           static_cast<std::size_t>(facet_index - 1);
  }
  std::string_view name() const;
  // Lowercase file-system friendly form, e.g. "achievement_striving".
  std::string slug() const;

  friend bool operator==(const FacetId&, const FacetId&) = default;
  friend auto operator<=>(const FacetId& a, const FacetId& b) { return a.ordinal() <=> b.ordinal(); }
};

FacetId facet_from_ordinal(std::size_t ordinal);
std::optional<FacetId> find_facet(std::string_view canonical_name);
// Throws SchemaError naming the unknown facet.
FacetId parse_facet(std::string_view canonical_name);
const std::array<FacetId, kFacetCount>& all_facets();

// Cue phrases used by the synthetic corpus generator (completing "I ...")
// and keyword lists used by the routing keyword scorer.
struct FacetCues {
  std::string_view positive;
  std::string_view negative;
  std::span<const std::string_view> keywords;
};
const FacetCues& facet_cues(FacetId facet);

enum class Polarity { Positive, Negative };

inline int polarity_sign(Polarity p) { return p == Polarity::Positive ? 1 : -1; }
std::string_view polarity_code(Polarity p);  // "pos" / "neg"
Polarity parse_polarity(std::string_view code);

}  // namespace facetsteer
