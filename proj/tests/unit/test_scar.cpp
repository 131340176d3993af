#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "sal_lab/model/scar.hpp"
#include "support.hpp"

using namespace sal_lab;
using sal_lab::testing::random_tensor;
using V = Var<double>;

namespace {

ProblemInstance random_instance(const TaskStructure& s, std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ProblemInstance p;
  p.height = h;
  p.width = w;
  p.pixels.resize(s.panel_count() * h * w);
  for (auto& px : p.pixels) px = static_cast<std::uint8_t>(rng() & 0xff);
  p.label = 0;
  return p;
}

V scalar_objective(const ScarBatchOutput<double>& out, const Tensor<double>& probe) {
  return ops::sum(ops::mul(out.scores, V::constant(probe)));
}

}  // namespace

TEST(ScarConfig, FullPresetLayerShapes) {
  const ScarModel<float> m(ScarConfig::paper(), 1);
  const auto& s = m.store();
  EXPECT_EQ(s.get("encoder.conv1.weight").shape(), (Shape{16, 1, 3, 3}));
  EXPECT_EQ(s.get("encoder.conv4.weight").shape(), (Shape{32, 32, 3, 3}));
  EXPECT_EQ(s.get("encoder.spatial.weight").shape(), (Shape{1600, 80}));
  EXPECT_EQ(s.get("encoder.token_mixer1.fc1.weight").shape(), (Shape{80, 320}));
  EXPECT_EQ(s.get("encoder.channel_mixer.conv1.weight").shape(), (Shape{128, 32, 8}));
  EXPECT_EQ(s.get("encoder.channel_mixer.conv2.weight").shape(), (Shape{8, 128, 1}));
  EXPECT_EQ(s.get("sal.w_star").shape(), (Shape{6, 60, 80, 64}));
  EXPECT_EQ(s.get("reasoner.channel_mixer.conv1.weight").shape(), (Shape{32, 64, 1}));
  EXPECT_EQ(s.get("reasoner.channel_mixer.conv2.weight").shape(), (Shape{5, 32, 1}));
  EXPECT_EQ(s.get("reasoner.token_mixer.fc1.weight").shape(), (Shape{100, 400}));
  EXPECT_EQ(s.get("reasoner.out.weight").shape(), (Shape{100, 128}));
  EXPECT_EQ(s.get("decoder.fc1.weight").shape(), (Shape{128, 128}));
  EXPECT_EQ(s.get("decoder.fc2.weight").shape(), (Shape{128, 1}));
}

TEST(ScarConfig, EncodeDecodeRoundTrip) {
  for (const auto& c : {ScarConfig::paper(), ScarConfig::tiny()}) {
    const ScarConfig back = ScarConfig::decode(c.encode(), c.preset);
    EXPECT_EQ(back.encode(), c.encode());
    EXPECT_EQ(back.preset, c.preset);
  }
  EXPECT_THROW(ScarConfig::preset_named("scar-huge"), std::invalid_argument);
}

TEST(ScarConfig, InconsistentWidthsRejected) {
  ScarConfig c = ScarConfig::tiny();
  c.heads = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(ScarModel, FullPresetShapeTrace) {
  const ScarModel<float> m(ScarConfig::paper(), 2);
  std::mt19937_64 rng(1);
  const auto x = Var<float>::constant(random_tensor({2, 1, 80, 80}, rng, 0, 1).cast<float>());
  NoGradGuard guard;
  const auto h = m.encode(x, false);
  EXPECT_EQ(h.shape(), (Shape{2, 80}));
  const auto groups = Var<float>::constant(random_tensor({3, 9, 80}, rng).cast<float>());
  EXPECT_EQ(m.aggregate(groups, {3, 3}).shape(), (Shape{3, 20, 64}));
  EXPECT_EQ(m.reason(groups, {3, 3}).shape(), (Shape{3, 128}));
}

TEST(ScarModel, TinyShapes) {
  const ScarModel<float> m(ScarConfig::tiny(), 3);
  std::mt19937_64 rng(2);
  NoGradGuard guard;
  const auto x = Var<float>::constant(random_tensor({4, 1, 32, 32}, rng, 0, 1).cast<float>());
  EXPECT_EQ(m.encode(x, false).shape(), (Shape{4, 20}));
  for (const auto& s : {TaskStructure::rpm(), TaskStructure::vap(), TaskStructure::o3(5), TaskStructure::o3(7)}) {
    const auto groups = Var<float>::constant(random_tensor({2, s.group_size, 20}, rng).cast<float>());
    EXPECT_EQ(m.reason(groups, s.spec()).shape(), (Shape{2, 64}));
  }
  EXPECT_THROW(m.encode(Var<float>::constant(Tensor<float>::zeros({1, 1, 30, 32})), false), std::invalid_argument);
}

TEST(ScarModel, ScoreCountsAndProbabilities) {
  const ScarModel<double> m(ScarConfig::tiny(), 4);
  const std::vector<std::pair<TaskStructure, std::size_t>> cases{
      {TaskStructure::rpm(), 8}, {TaskStructure::vap(), 4}, {TaskStructure::o3(5), 5}};
  for (const auto& [s, answers] : cases) {
    const ModelOutput out = m.predict(random_instance(s, 32, 32, answers), s);
    ASSERT_EQ(out.scores.size(), answers);
    EXPECT_NEAR(std::accumulate(out.probabilities.begin(), out.probabilities.end(), 0.0), 1.0, 1e-6);
    EXPECT_EQ(out.prediction, argmax(out.probabilities));
  }
}

TEST(ScarModel, ArgmaxTiesGoToLowestIndex) {
  const std::vector<double> v{0.1, 0.4, 0.4, 0.1};
  EXPECT_EQ(argmax(v), 1u);
}

TEST(ScarModel, DuplicatedAnswerScoresEqually) {
  const ScarModel<double> m(ScarConfig::tiny(), 5);
  const auto s = TaskStructure::rpm();
  ProblemInstance p = random_instance(s, 32, 32, 9);
  const auto src = p.panel(8 + 5);
  std::vector<std::uint8_t> copy(src.begin(), src.end());
  std::copy(copy.begin(), copy.end(), p.panel(8 + 2).begin());
  const ModelOutput out = m.predict(p, s);
  EXPECT_NEAR(out.scores[2], out.scores[5], 1e-5);
  if (out.prediction == 2 || out.prediction == 5) EXPECT_EQ(out.prediction, 2u);
}

TEST(ScarModel, EvalIsBitDeterministic) {
  const ScarModel<float> m(ScarConfig::tiny(), 6);
  const auto s = TaskStructure::vap();
  const ProblemInstance p = random_instance(s, 32, 32, 10);
  EXPECT_EQ(m.predict(p, s).scores, m.predict(p, s).scores);
  const ScarModel<float> twin(ScarConfig::tiny(), 6);
  EXPECT_EQ(m.predict(p, s).scores, twin.predict(p, s).scores);
}

TEST(ScarModel, SalIsPositionSensitive) {
  const ScarModel<double> m(ScarConfig::tiny(), 7);
  std::mt19937_64 rng(3);
  const Tensor<double> g = random_tensor({1, 9, 20}, rng);
  Tensor<double> swapped = g;
  for (std::size_t d = 0; d < 20; ++d) std::swap(swapped[0 * 20 + d], swapped[4 * 20 + d]);
  NoGradGuard guard;
  const auto a = m.reason(V::constant(g), {3, 3}).value();
  const auto b = m.reason(V::constant(swapped), {3, 3}).value();
  double diff = 0;
  for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(a[i] - b[i]));
  EXPECT_GT(diff, 1e-6);
}

TEST(ScarModel, GradientReachesEveryWStarEntry) {
  ScarModel<double> m(ScarConfig::tiny(), 8);
  const auto s = TaskStructure::rpm();
  std::mt19937_64 rng(4);
  const V groups = V::constant(random_tensor({2, 9, 20}, rng));
  const Tensor<double> probe = random_tensor({2, 64}, rng);
  const auto f = [&] { return ops::sum(ops::mul(m.reason(groups, s.spec()), V::constant(probe))); };
  const auto grads = backward(f());
  const Tensor<double> gw = grads.of(m.sal().w_star);
  for (double v : gw.values()) ASSERT_NE(v, 0.0);

  // Central differences on a few W* entries.
  V handle = m.sal().w_star;
  const Tensor<double> base = handle.value();
  for (std::size_t idx : {std::size_t{0}, std::size_t{12345}, gw.size() - 1}) {
    const double h = 1e-5;
    Tensor<double> w = base;
    w[idx] += h;
    handle.assign(w);
    double up;
    {
      NoGradGuard guard;
      up = f().item();
    }
    w[idx] -= 2 * h;
    handle.assign(w);
    double down;
    {
      NoGradGuard guard;
      down = f().item();
    }
    handle.assign(base);
    EXPECT_LT(relative_error(gw[idx], (up - down) / (2 * h), 1e-8), 1e-5);
  }
}

TEST(TokenMixer, ZeroInputZeroWeightsGivesZero) {
  ParameterStore<double> store;
  CounterRng rng(1, 1);
  TokenMixer<double> mixer(store, "mix", 6, 24, rng);
  for (V p : store.parameters()) {
    for (double& v : p.mutable_values()) v = 0.0;
  }
  const V out = mixer(V::constant(Tensor<double>::zeros({3, 6})));
  for (double v : out.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(TokenMixer, PreservesShape) {
  ParameterStore<double> store;
  CounterRng rng(1, 2);
  TokenMixer<double> a(store, "a", 80, 320, rng), b(store, "b", 100, 400, rng);
  std::mt19937_64 g(1);
  EXPECT_EQ(a(V::constant(random_tensor({32, 80}, g))).shape(), (Shape{32, 80}));
  EXPECT_EQ(b(V::constant(random_tensor({100}, g))).shape(), (Shape{100}));
  EXPECT_THROW(a(V::constant(random_tensor({4, 81}, g))), std::invalid_argument);
}

TEST(TokenMixer, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  const std::vector<Tensor<double>> inputs{random_tensor({3, 5}, rng), random_tensor({5}, rng),
                                           random_tensor({5}, rng),    random_tensor({5, 8}, rng),
                                           random_tensor({8}, rng),    random_tensor({8, 5}, rng),
                                           random_tensor({5}, rng)};
  const auto op = [](const std::vector<V>& v) {
    TokenMixer<double> m;
    m.norm.gamma = v[1];
    m.norm.beta = v[2];
    m.fc1.weight = v[3];
    m.fc1.bias = v[4];
    m.fc2.weight = v[5];
    m.fc2.bias = v[6];
    return m(v[0]);
  };
  EXPECT_LT(sal_lab::testing::max_gradient_error(op, inputs), 1e-5);
}

TEST(RelationNetwork, IdenticalEmbeddings) {
  ParameterStore<double> store;
  CounterRng rng(2, 2);
  const Mlp<double> mlp(store, "rn", 8, 6, 5, rng);
  std::mt19937_64 g(6);
  const Tensor<double> h = random_tensor({4}, g);
  Tensor<double> group(Shape{1, 5, 4});
  for (std::size_t i = 0; i < 5; ++i) std::copy(h.values().begin(), h.values().end(), group.values().begin() + i * 4);
  const auto out = rn_aggregate(V::constant(group), mlp).value();
  Tensor<double> pair(Shape{1, 8});
  std::copy(h.values().begin(), h.values().end(), pair.values().begin());
  std::copy(h.values().begin(), h.values().end(), pair.values().begin() + 4);
  const auto single = mlp(V::constant(pair)).value();
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(out[i], 20.0 * single[i], 1e-12);
}

TEST(RelationNetwork, PermutationInvariantAndPairOracle) {
  ParameterStore<double> store;
  CounterRng rng(3, 3);
  const Mlp<double> mlp(store, "rn", 6, 7, 4, rng);
  std::mt19937_64 g(7);
  const Tensor<double> group = random_tensor({1, 3, 3}, g);
  const auto out = rn_aggregate(V::constant(group), mlp).value();

  std::vector<double> want(4, 0.0);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      if (i == j) continue;
      Tensor<double> pair(Shape{1, 6});
      for (std::size_t d = 0; d < 3; ++d) {
        pair[d] = group.at({0, i, d});
        pair[3 + d] = group.at({0, j, d});
      }
      const auto y = mlp(V::constant(pair)).value();
      for (std::size_t k = 0; k < 4; ++k) want[k] += y[k];
    }
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(out[k], want[k], 1e-12);

  Tensor<double> perm(Shape{1, 3, 3});
  const std::size_t order[] = {2, 0, 1};
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t d = 0; d < 3; ++d) perm[i * 3 + d] = group.at({0, order[i], d});
  const auto permuted = rn_aggregate(V::constant(perm), mlp).value();
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(out[k], permuted[k], 1e-12);
}

TEST(RelationNetwork, ReplacesSalInModel) {
  ScarConfig c = ScarConfig::tiny();
  c.aggregator = Aggregator::rn;
  const ScarModel<double> m(c, 9);
  EXPECT_FALSE(m.store().contains("sal.w_star"));
  const auto s = TaskStructure::o3(6);
  const ModelOutput out = m.predict(random_instance(s, 32, 32, 11), s);
  EXPECT_EQ(out.scores.size(), 6u);
}

TEST(ScarModel, RuleHeadsArePerTask) {
  ScarModel<double> m(ScarConfig::tiny(), 10);
  m.ensure_rule_head(TaskKind::rpm, 12);
  m.ensure_rule_head(TaskKind::o3, 4);
  EXPECT_TRUE(m.store().contains("rule_head.rpm.fc1.weight"));
  EXPECT_TRUE(m.store().contains("rule_head.o3.fc2.bias"));
  EXPECT_FALSE(m.has_rule_head(TaskKind::vap));
  EXPECT_THROW(m.ensure_rule_head(TaskKind::rpm, 11), std::invalid_argument);
  const auto s = TaskStructure::rpm();
  const ModelOutput out = m.predict(random_instance(s, 32, 32, 12), s);
  ASSERT_EQ(out.rule_logits.size(), 8u);
  EXPECT_EQ(out.rule_logits[0].size(), 12u);
}

TEST(ScarModel, CheckpointRoundTripPreservesPredictions) {
  ScarModel<float> m(ScarConfig::tiny(), 11);
  m.ensure_rule_head(TaskKind::vap, 12);
  // Non-default running statistics must survive too.
  const auto s = TaskStructure::vap();
  const ProblemInstance p = random_instance(s, 32, 32, 13);
  {
    const ProblemInstance* one[] = {&p};
    m.forward(Var<float>::constant(batch_panels<float>(one)), s, true);
  }
  std::stringstream buffer;
  write_checkpoint(buffer, m.to_checkpoint());
  const auto restored = ScarModel<float>::from_checkpoint(read_checkpoint(buffer));
  EXPECT_EQ(restored.config().encode(), m.config().encode());
  EXPECT_TRUE(restored.has_rule_head(TaskKind::vap));
  const auto a = m.predict(p, s), b = restored.predict(p, s);
  EXPECT_EQ(a.scores, b.scores);
  EXPECT_EQ(a.rule_logits, b.rule_logits);
}

TEST(ScarModel, BatchPanelsScalesBytes) {
  ProblemInstance p;
  p.height = 1;
  p.width = 2;
  p.pixels = {0, 255, 51, 102};
  const ProblemInstance* one[] = {&p};
  const Tensor<double> t = batch_panels<double>(one);
  EXPECT_EQ(t.shape(), (Shape{1, 2, 1, 2}));
  EXPECT_TRUE(std::ranges::equal(t.values(), std::vector<double>{0.0, 1.0, 0.2, 0.4}));
}
