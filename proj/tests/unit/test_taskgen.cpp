#include <gtest/gtest.h>

#include <bit>
#include <map>
#include <numeric>
#include <set>

#include "sal_lab/data/taskgen.hpp"

using namespace sal_lab;

namespace {

GeneratorConfig config_for(TaskKind kind, std::uint64_t seed, std::size_t count = 200) {
  GeneratorConfig c;
  c.task = kind;
  c.seed = seed;
  c.count = count;
  return c;
}

double mean_darkness(const std::vector<std::uint8_t>& px) {
  double total = 0;
  for (auto v : px) total += 255.0 - v;
  return total / static_cast<double>(px.size());
}

}  // namespace

TEST(RuleVocabulary, SizesAndOrder) {
  const auto rpm = rule_vocabulary(TaskKind::rpm);
  ASSERT_EQ(rpm.size(), 12u);
  EXPECT_EQ(to_string(rpm[0]), "shape:constant");
  EXPECT_EQ(to_string(rpm[1]), "shape:progression");
  EXPECT_EQ(rule_vocabulary(TaskKind::vap), rpm);
  const auto o3 = rule_vocabulary(TaskKind::o3);
  ASSERT_EQ(o3.size(), 4u);
  for (const auto& p : o3) EXPECT_EQ(p.relation, Relation::odd);
  EXPECT_EQ(parse_rule_pair("shade:distribute_three"), (RulePair{Attribute::shade, Relation::distribute_three}));
  EXPECT_THROW(parse_rule_pair("colour:constant"), std::invalid_argument);
}

TEST(RuleEncoding, ExamplesAndErrors) {
  const auto o3 = rule_vocabulary(TaskKind::o3);
  const auto one = encode_rules(RuleSpec{{{Attribute::size, Relation::odd}}}, o3);
  EXPECT_EQ(std::accumulate(one.begin(), one.end(), 0), 1);
  const auto rpm = rule_vocabulary(TaskKind::rpm);
  const auto two = encode_rules(
      RuleSpec{{{Attribute::shape, Relation::constant}, {Attribute::count, Relation::progression}}}, rpm);
  EXPECT_EQ(std::accumulate(two.begin(), two.end(), 0), 2);
  EXPECT_THROW(encode_rules(RuleSpec{{{Attribute::shape, Relation::odd}}}, rpm), std::invalid_argument);
}

TEST(RuleEncoding, RoundTripAllSubsetsUpToThree) {
  const auto vocab = rule_vocabulary(TaskKind::rpm);
  const std::size_t n = vocab.size();
  std::size_t checked = 0;
  for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
    if (std::popcount(mask) > 3) continue;
    RuleSpec spec;
    for (std::size_t i = 0; i < n; ++i) {
      if (mask >> i & 1u) spec.pairs.push_back(vocab[i]);
    }
    EXPECT_EQ(decode_rules(encode_rules(spec, vocab), vocab), spec);
    ++checked;
  }
  EXPECT_EQ(checked, 1u + 12u + 66u + 220u);
}

TEST(Render, DeterministicAndDomainChecked) {
  const PanelAttributes t{2, 1, 3, 2};
  EXPECT_EQ(render_panel(t, 32, 32), render_panel(t, 32, 32));
  EXPECT_THROW(render_panel(PanelAttributes{5, 0, 0, 0}, 32, 32), std::invalid_argument);
  EXPECT_THROW(render_panel(PanelAttributes{0, 0, 0, 4}, 32, 32), std::invalid_argument);
}

TEST(Render, ShadeIsMonotoneInDarkness) {
  double previous = -1;
  for (std::uint8_t s = 0; s < 4; ++s) {
    const double d = mean_darkness(render_panel(PanelAttributes{4, 2, s, 0}, 32, 32));
    EXPECT_GT(d, previous);
    previous = d;
  }
  for (std::size_t s = 1; s < 4; ++s) EXPECT_LT(shade_byte(s), shade_byte(s - 1));
}

TEST(Render, EveryTupleIsDistinguishable) {
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{32, 32}, {80, 80}, {24, 40}}) {
    EXPECT_NO_THROW(PanelRecognizer(h, w)) << h << "x" << w;
  }
  const PanelRecognizer rec(32, 32);
  const PanelAttributes t{1, 2, 0, 3};
  EXPECT_EQ(rec.recognize(render_panel(t, 32, 32)), t);
  std::vector<std::uint8_t> blank(32 * 32, 255);
  EXPECT_FALSE(rec.recognize(blank).has_value());
}

TEST(Generator, SameConfigSameBytes) {
  const auto c = config_for(TaskKind::vap, 99, 20);
  EXPECT_EQ(generate(c), generate(c));
  auto other = c;
  other.seed = 100;
  EXPECT_NE(generate(c), generate(other));
  // Any sub-range equals the corresponding slice of the full stream.
  const auto all = generate(c);
  const auto tail = generate_range(c, 7, 20);
  EXPECT_TRUE(std::equal(tail.begin(), tail.end(), all.begin() + 7));
}

TEST(Generator, TasksUseDistinctStreams) {
  auto a = config_for(TaskKind::rpm, 5, 1);
  auto b = config_for(TaskKind::vap, 5, 1);
  EXPECT_NE(generate_one(a, 0).rules, generate_one(b, 0).rules);
}

TEST(Generator, ShapeConstantOnly) {
  auto c = config_for(TaskKind::rpm, 3, 50);
  c.allowed_rules = {{Attribute::shape, Relation::constant}};
  for (std::uint64_t i = 0; i < c.count; ++i) {
    const auto g = generate_one(c, i);
    ASSERT_EQ(g.rules.pairs.size(), 1u);
    for (std::size_t r = 0; r < 3; ++r) {
      const std::size_t n = r == 2 ? 2 : 3;
      for (std::size_t j = 0; j < n; ++j) EXPECT_EQ(g.attributes[r * 3 + j][0], g.attributes[r * 3][0]);
    }
    const std::uint8_t shape = g.attributes[6][0];
    for (std::size_t k = 0; k < 8; ++k) {
      const auto& t = g.attributes[8 + k];
      if (k == g.instance.label) {
        EXPECT_EQ(t[0], shape);
      } else {
        EXPECT_NE(t[0], shape);
      }
    }
  }
}

TEST(Generator, OddShadeSinglesOutLabel) {
  auto c = config_for(TaskKind::o3, 4, 50);
  c.allowed_rules = {{Attribute::shade, Relation::odd}};
  for (std::uint64_t i = 0; i < c.count; ++i) {
    const auto g = generate_one(c, i);
    ASSERT_EQ(g.attributes.size(), 5u);
    std::map<std::uint8_t, std::size_t> hist;
    for (const auto& t : g.attributes) ++hist[t[2]];
    ASSERT_EQ(hist.size(), 2u);
    EXPECT_EQ(hist[g.attributes[g.instance.label][2]], 1u);
  }
}

TEST(Generator, RulesAreValidAndDistinct) {
  for (TaskKind kind : {TaskKind::rpm, TaskKind::vap, TaskKind::o3}) {
    const auto c = config_for(kind, 8, 100);
    for (std::uint64_t i = 0; i < c.count; ++i) {
      const auto g = generate_one(c, i);
      ASSERT_GE(g.rules.pairs.size(), 1u);
      std::set<Attribute> attrs;
      for (const auto& p : g.rules.pairs) attrs.insert(p.attribute);
      EXPECT_EQ(attrs.size(), g.rules.pairs.size());
      EXPECT_EQ(decode_rules(g.instance.rules, rule_vocabulary(kind)), g.rules);
    }
  }
}

TEST(Generator, GridAnswersAreUniqueUnderTheRules) {
  for (TaskKind kind : {TaskKind::rpm, TaskKind::vap}) {
    const auto c = config_for(kind, 11, 300);
    const auto s = c.structure();
    for (std::uint64_t i = 0; i < c.count; ++i) {
      const auto g = generate_one(c, i);
      const auto context = std::span<const PanelAttributes>(g.attributes).first(s.context_count);
      const PanelAttributes want = solve_missing(s, g.rules, context);
      for (std::size_t k = 0; k < s.answer_count; ++k) {
        EXPECT_EQ(g.attributes[s.context_count + k] == want, k == g.instance.label) << "instance " << i;
      }
    }
  }
}

TEST(Generator, PixelOracleRecoversLabel) {
  const PanelRecognizer rec(32, 32);
  for (TaskKind kind : {TaskKind::rpm, TaskKind::vap, TaskKind::o3}) {
    for (std::size_t P : {5, 7}) {
      auto c = config_for(kind, 21, 200);
      c.o3_panels = P;
      const auto s = c.structure();
      for (const auto& inst : generate(c)) {
        const auto solved = solve_instance(inst, s, rec);
        ASSERT_TRUE(solved.has_value());
        EXPECT_EQ(*solved, inst.label);
      }
    }
  }
}

TEST(SolveMissing, RejectsViolatingContext) {
  const auto s = TaskStructure::vap();
  std::vector<PanelAttributes> ctx(5, PanelAttributes{0, 0, 0, 0});
  ctx[1][0] = 1;
  const RuleSpec constant_shape{{{Attribute::shape, Relation::constant}}};
  EXPECT_THROW(solve_missing(s, constant_shape, ctx), std::invalid_argument);
}

TEST(GeneratorConfig, Validation) {
  auto c = config_for(TaskKind::rpm, 0);
  c.count = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = config_for(TaskKind::rpm, 0);
  c.distractor_features = true;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = config_for(TaskKind::rpm, 0);
  c.allowed_rules = {{Attribute::size, Relation::odd}};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = config_for(TaskKind::o3, 0);
  c.o3_panels = 2;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}
