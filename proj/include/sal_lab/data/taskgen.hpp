#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "sal_lab/avr/task.hpp"
#include "sal_lab/core/random.hpp"

namespace sal_lab {

enum class Attribute : std::uint8_t { shape = 0, size = 1, shade = 2, count = 3 };
enum class Relation : std::uint8_t { constant = 0, progression = 1, distribute_three = 2, odd = 3 };

inline constexpr std::size_t kAttributeCount = 4;
/// Domain sizes: 5 shapes (triangle, square, pentagon, hexagon, circle),
/// 3 sizes, 4 shades (light to dark), counts 1..4 stored as 0..3.
inline constexpr std::array<std::size_t, kAttributeCount> kAttributeDomain{5, 3, 4, 4};

std::string_view attribute_name(Attribute a);
std::string_view relation_name(Relation r);

struct RulePair {
  Attribute attribute = Attribute::shape;
  Relation relation = Relation::constant;
  bool operator==(const RulePair&) const = default;
  auto operator<=>(const RulePair&) const = default;
};

/// "attribute:relation", e.g. "shade:progression".
std::string to_string(const RulePair& p);
RulePair parse_rule_pair(std::string_view text);

/// Active rules of one instance; attributes are distinct. Pairs are kept in
/// vocabulary order so encode/decode round-trips exactly.
struct RuleSpec {
  std::vector<RulePair> pairs;
  bool operator==(const RuleSpec&) const = default;
};

/// Attribute values of one panel, indexed by Attribute.
using PanelAttributes = std::array<std::uint8_t, kAttributeCount>;

/// The ordered rule list of a task: attribute-major pairs with relations
/// {constant, progression, distribute_three} for rpm/vap (12), {odd} for o3 (4).
std::vector<RulePair> rule_vocabulary(TaskKind kind);

/// Multi-hot over `vocabulary`; throws for pairs outside it.
std::vector<std::uint8_t> encode_rules(const RuleSpec& spec, const std::vector<RulePair>& vocabulary);
RuleSpec decode_rules(const std::vector<std::uint8_t>& bits, const std::vector<RulePair>& vocabulary);

struct GeneratorConfig {
  TaskKind task = TaskKind::rpm;
  std::size_t height = 32;
  std::size_t width = 32;
  std::uint64_t seed = 0;
  std::size_t count = 1000;
  std::size_t o3_panels = 5;
  /// Pairs an instance may draw from; empty means the whole vocabulary.
  std::vector<RulePair> allowed_rules;
  std::size_t min_rules = 1;
  std::size_t max_rules = 2;
  /// o3: probability that a non-odd attribute varies between panels.
  double o3_variation = 0.5;
  /// Reserved for line-shaped distractor objects; must stay false.
  bool distractor_features = false;

  TaskStructure structure() const { return TaskStructure::of(task, o3_panels); }
  /// Allowed pairs resolved against the task vocabulary.
  std::vector<RulePair> effective_rules() const;
  void validate() const;
};

/// A generated instance together with the symbols it was rendered from.
struct GeneratedInstance {
  ProblemInstance instance;
  RuleSpec rules;
  std::vector<PanelAttributes> attributes;  // one per panel, file order
};

/// Instance `index` of the stream defined by `config`; a pure function of (config, index).
GeneratedInstance generate_one(const GeneratorConfig& config, std::uint64_t index);
/// Instances [begin, end) of the stream.
std::vector<ProblemInstance> generate_range(const GeneratorConfig& config, std::uint64_t begin, std::uint64_t end);
std::vector<ProblemInstance> generate(const GeneratorConfig& config);
/// Same instances as generate(config), produced by `threads` workers over contiguous ranges.
std::vector<ProblemInstance> generate(const GeneratorConfig& config, std::size_t threads);

/// Renders `count` copies of the shape on white, crisp edges. Bytes, 255 = white.
std::vector<std::uint8_t> render_panel(const PanelAttributes& attributes, std::size_t height, std::size_t width);
/// Gray byte of a shade level; larger levels are darker.
std::uint8_t shade_byte(std::size_t level);

/// Maps rendered panels back to attributes, including all eight right-angle
/// rotations and reflections of every render.
class PanelRecognizer {
 public:
  PanelRecognizer(std::size_t height, std::size_t width);
  std::optional<PanelAttributes> recognize(std::span<const std::uint8_t> pixels) const;

 private:
  std::size_t height_;
  std::size_t width_;
  std::map<std::vector<std::uint8_t>, PanelAttributes> table_;
};

/// Attribute tuple the missing cell must have under `rules`, from the context
/// attributes (rpm/vap). Throws if the context violates the rules.
PanelAttributes solve_missing(const TaskStructure& s, const RuleSpec& rules,
                              std::span<const PanelAttributes> context);

/// Symbolic oracle on pixels: recognizes every panel, decodes the stored rule
/// bits, derives the answer, and returns it if exactly one candidate fits.
/// Returns nullopt when unsolvable or ambiguous.
std::optional<std::size_t> solve_instance(const ProblemInstance& instance, const TaskStructure& s,
                                          const PanelRecognizer& recognizer);

}  // namespace sal_lab
