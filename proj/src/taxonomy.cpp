#include "facetsteer/taxonomy.hpp"

#include <algorithm>
#include <cctype>

#include "facetsteer/error.hpp"

namespace facetsteer {
namespace {

struct FacetRow {
  std::string_view name;
  std::string_view positive;
  std::string_view negative;
  std::span<const std::string_view> keywords;
};

using Kw = std::string_view;

// Openness
constexpr Kw kFantasy[] = {"imagine", "imagination", "daydream", "fantasy", "story", "stories", "dream"};
constexpr Kw kAesthetics[] = {"art", "music", "beauty", "beautiful", "poetry", "painting", "writing", "design"};
constexpr Kw kFeelings[] = {"feel", "feelings", "emotion", "emotions", "mood", "moved"};
constexpr Kw kActions[] = {"new", "try", "variety", "different", "novelty", "unfamiliar"};
constexpr Kw kIdeas[] = {"ideas", "idea", "theory", "philosophy", "puzzle", "curious", "advice", "writing", "think"};
constexpr Kw kValues[] = {"values", "tradition", "traditional", "politics", "religion", "rules", "beliefs"};
// Conscientiousness
constexpr Kw kCompetence[] = {"capable", "competent", "skill", "skills", "handle", "prepared", "efficient"};
constexpr Kw kOrder[] = {"organize", "organized", "tidy", "neat", "clean", "mess", "schedule"};
constexpr Kw kDutifulness[] = {"promise", "promises", "duty", "obligation", "responsibility", "reliable"};
constexpr Kw kAchievement[] = {"goal", "goals", "ambition", "ambitious", "achieve", "success", "career"};
constexpr Kw kDiscipline[] = {"procrastinate", "discipline", "focus", "finish", "deadline", "habit", "motivation"};
constexpr Kw kDeliberation[] = {"decide", "decision", "careful", "carefully", "consider", "cautious", "choice"};
// Extraversion
constexpr Kw kWarmth[] = {"friendly", "warm", "warmth", "smile", "affection", "welcome"};
constexpr Kw kGregariousness[] = {"party", "parties", "crowd", "group", "gathering", "company", "social"};
constexpr Kw kAssertiveness[] = {"lead", "leader", "leadership", "speak", "assert", "confident", "meeting"};
constexpr Kw kActivity[] = {"busy", "energy", "energetic", "active", "fast", "pace", "exercise"};
constexpr Kw kExcitement[] = {"thrill", "thrills", "exciting", "excitement", "adventure", "risk", "loud"};
constexpr Kw kPositiveEmotions[] = {"happy", "happiness", "joy", "cheerful", "laugh", "fun", "optimistic"};
// Agreeableness
constexpr Kw kTrust[] = {"trust", "believe", "suspicious", "motives", "intentions", "faith"};
constexpr Kw kStraightforwardness[] = {"honest", "honesty", "truth", "lie", "lying", "manipulate", "frank"};
constexpr Kw kAltruism[] = {"help", "helping", "volunteer", "generous", "charity", "donate", "support"};
constexpr Kw kCompliance[] = {"conflict", "argue", "argument", "fight", "disagree", "compromise", "forgive"};
constexpr Kw kModesty[] = {"modest", "humble", "brag", "boast", "praise", "credit"};
constexpr Kw kTenderMindedness[] = {"sympathy", "compassion", "empathy", "suffering", "poor", "care", "caring"};
// Neuroticism
constexpr Kw kAnxiety[] = {"worry", "worried", "anxious", "nervous", "fear", "stress", "exam"};
constexpr Kw kAngryHostility[] = {"angry", "anger", "annoyed", "irritated", "frustrated", "mad", "rude"};
constexpr Kw kDepression[] = {"sad", "sadness", "hopeless", "lonely", "down", "depressed", "blue"};
constexpr Kw kSelfConsciousness[] = {"embarrassed", "embarrassing", "awkward", "shy", "judged", "ashamed", "presentation"};
constexpr Kw kImpulsiveness[] = {"craving", "cravings", "impulse", "temptation", "snack", "shopping", "urge"};
constexpr Kw kVulnerability[] = {"pressure", "crisis", "overwhelmed", "cope", "emergency", "panic", "breakdown"};

// Dimension-major, OCEAN order; facet_index = position within the block + 1.
constexpr std::array<FacetRow, kFacetCount> kTable = {{
    {"Fantasy", "let my imagination wander into daydreams", "keep my mind on plain facts", kFantasy},
    {"Aesthetics", "stop to admire the art and music", "ignore the art and music", kAesthetics},
    {"Feelings", "notice and name my feelings deeply", "brush my feelings aside", kFeelings},
    {"Actions", "try a new way of doing things", "stick to my usual routine", kActions},
    {"Ideas", "enjoy puzzling over abstract ideas", "avoid thinking about abstract ideas", kIdeas},
    {"Values", "question traditional rules and customs", "follow traditional rules without question", kValues},

    {"Competence", "feel capable of handling the task", "doubt I can handle the task", kCompetence},
    {"Order", "keep my desk neat and organized", "leave my desk messy and cluttered", kOrder},
    {"Dutifulness", "keep every promise I make", "break promises when it suits me", kDutifulness},
    {"Achievement Striving", "push hard to reach my goals", "settle for less than my goals", kAchievement},
    {"Self-Discipline", "finish my work before relaxing", "put off my work until later", kDiscipline},
    {"Deliberation", "think carefully before I decide", "decide quickly without thinking", kDeliberation},

    {"Warmth", "greet people with a friendly smile", "keep people at a cold distance", kWarmth},
    {"Gregariousness", "join the crowd at the party", "avoid the crowd at the party", kGregariousness},
    {"Assertiveness", "speak up and lead the group", "stay quiet and let others lead", kAssertiveness},
    {"Activity", "keep a fast and busy pace", "move at a slow and lazy pace", kActivity},
    {"Excitement-Seeking", "chase thrills and loud excitement", "avoid thrills and loud excitement", kExcitement},
    {"Positive Emotions", "laugh easily and feel cheerful", "rarely laugh or feel cheerful", kPositiveEmotions},

    {"Trust", "believe people mean well", "suspect people have hidden motives", kTrust},
    {"Straightforwardness", "tell the plain truth to others", "bend the truth to get my way", kStraightforwardness},
    {"Altruism", "go out of my way to help", "ignore people who need help", kAltruism},
    {"Compliance", "give in to avoid a fight", "argue back to win the fight", kCompliance},
    {"Modesty", "play down my own success", "brag about my own success", kModesty},
    {"Tender-Mindedness", "feel deep sympathy for those suffering", "feel little sympathy for those suffering",
     kTenderMindedness},

    {"Anxiety", "worry about what might go wrong", "stay calm about what might go wrong", kAnxiety},
    {"Angry Hostility", "get angry when plans fall apart", "stay patient when plans fall apart", kAngryHostility},
    {"Depression", "feel hopeless and down about myself", "feel hopeful and upbeat about myself", kDepression},
    {"Self-Consciousness", "feel embarrassed when people watch me", "feel at ease when people watch me",
     kSelfConsciousness},
    {"Impulsiveness", "give in to cravings right away", "resist cravings with ease", kImpulsiveness},
    {"Vulnerability", "fall apart under heavy pressure", "hold steady under heavy pressure", kVulnerability},
}};

constexpr std::array<std::string_view, 5> kDimensionNames = {"Openness", "Conscientiousness", "Extraversion",
                                                            "Agreeableness", "Neuroticism"};
constexpr std::array<char, 5> kDimensionLetters = {'O', 'C', 'E', 'A', 'N'};

std::array<FacetCues, kFacetCount> build_cues() {
  std::array<FacetCues, kFacetCount> out{};
  for (std::size_t i = 0; i < kFacetCount; ++i) out[i] = {kTable[i].positive, kTable[i].negative, kTable[i].keywords};
  return out;
}

std::array<FacetId, kFacetCount> build_facets() {
  std::array<FacetId, kFacetCount> out{};
  for (std::size_t i = 0; i < kFacetCount; ++i) out[i] = facet_from_ordinal(i);
  return out;
}

}  // namespace

std::string_view dimension_name(Dimension d) { return kDimensionNames[static_cast<std::size_t>(d)]; }

char dimension_letter(Dimension d) { return kDimensionLetters[static_cast<std::size_t>(d)]; }

Dimension parse_dimension(std::string_view name) {
  for (std::size_t i = 0; i < kDimensionNames.size(); ++i)
    if (kDimensionNames[i] == name) return kDimensions[i];
  throw SchemaError("unknown Big Five dimension \"" + std::string(name) + "\"");
}

std::optional<Dimension> dimension_from_letter(char letter) {
  for (std::size_t i = 0; i < kDimensionLetters.size(); ++i)
    if (kDimensionLetters[i] == letter) return kDimensions[i];
  return std::nullopt;
}

std::string_view FacetId::name() const { return kTable.at(ordinal()).name; }

std::string FacetId::slug() const {
  std::string out;
  for (char ch : name()) {
    if (ch == ' ' || ch == '-')
      out.push_back('_');
    else
      out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
  }
  return out;
}

FacetId facet_from_ordinal(std::size_t ordinal) {
  if (ordinal >= kFacetCount) throw PreconditionError("facet ordinal out of range: " + std::to_string(ordinal));
  return FacetId{kDimensions[ordinal / kFacetsPerDimension], static_cast<int>(ordinal % kFacetsPerDimension) + 1};
}

std::optional<FacetId> find_facet(std::string_view canonical_name) {
  for (std::size_t i = 0; i < kFacetCount; ++i)
    if (kTable[i].name == canonical_name) return facet_from_ordinal(i);
  return std::nullopt;
}

FacetId parse_facet(std::string_view canonical_name) {
  if (auto f = find_facet(canonical_name)) return *f;
  throw SchemaError("unknown facet \"" + std::string(canonical_name) + "\"");
}

const std::array<FacetId, kFacetCount>& all_facets() {
  static const auto facets = build_facets();
  return facets;
}

const FacetCues& facet_cues(FacetId facet) {
  static const auto cues = build_cues();
  return cues.at(facet.ordinal());
}

std::string_view polarity_code(Polarity p) { return p == Polarity::Positive ? "pos" : "neg"; }

Polarity parse_polarity(std::string_view code) {
  if (code == "pos") return Polarity::Positive;
  if (code == "neg") return Polarity::Negative;
  throw SchemaError("unknown polarity \"" + std::string(code) + "\" (expected \"pos\" or \"neg\")");
}

}  // namespace facetsteer
