#include "sal_lab/data/taskgen.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <exception>
#include <iterator>
#include <numbers>
#include <set>
#include <stdexcept>
#include <thread>

#include "sal_lab/data/image.hpp"

namespace sal_lab {

namespace {

constexpr std::array<std::string_view, kAttributeCount> kAttributeNames{"shape", "size", "shade", "count"};
constexpr std::array<std::string_view, 4> kRelationNames{"constant", "progression", "distribute_three", "odd"};
constexpr std::array<std::uint8_t, 4> kShadeBytes{192, 128, 64, 0};
constexpr std::array<double, 3> kSizeFractions{0.5, 0.7, 0.9};
constexpr int kMaxRetries = 64;

std::size_t domain(Attribute a) { return kAttributeDomain[static_cast<std::size_t>(a)]; }

// Cell values of one attribute over a grid with `rows` rows of 3 cells.
using Grid = std::vector<std::array<std::uint8_t, 3>>;

Grid fill_rows(Relation rel, std::size_t D, std::size_t rows, CounterRng& rng) {
  Grid g(rows);
  switch (rel) {
    case Relation::constant:
      for (auto& row : g) row.fill(static_cast<std::uint8_t>(rng.uniform_int(D)));
      break;
    case Relation::progression: {
      const bool up = rng.bernoulli(0.5);
      for (auto& row : g) {
        const std::size_t start = up ? rng.uniform_int(D - 2) : 2 + rng.uniform_int(D - 2);
        for (std::size_t j = 0; j < 3; ++j) {
          row[j] = static_cast<std::uint8_t>(up ? start + j : start - j);
        }
      }
      break;
    }
    case Relation::distribute_three: {
      std::vector<std::uint8_t> pool(D);
      for (std::size_t i = 0; i < D; ++i) pool[i] = static_cast<std::uint8_t>(i);
      for (std::size_t i = 0; i < 3; ++i) std::swap(pool[i], pool[i + rng.uniform_int(D - i)]);
      const std::size_t shift = 1 + rng.uniform_int(2);
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < 3; ++j) g[i][j] = pool[(j + i * shift) % 3];
      }
      break;
    }
    case Relation::odd:
      throw std::logic_error("odd relation has no row pattern");
  }
  return g;
}

std::size_t vocabulary_index(const RulePair& p, const std::vector<RulePair>& vocabulary) {
  auto it = std::find(vocabulary.begin(), vocabulary.end(), p);
  if (it == vocabulary.end()) throw std::invalid_argument(fmt::format("rule '{}' is not in the vocabulary", to_string(p)));
  return static_cast<std::size_t>(it - vocabulary.begin());
}

RuleSpec sample_rules(const GeneratorConfig& config, CounterRng& rng) {
  const auto allowed = config.effective_rules();
  std::vector<Attribute> attrs;
  for (const auto& p : allowed) {
    if (std::find(attrs.begin(), attrs.end(), p.attribute) == attrs.end()) attrs.push_back(p.attribute);
  }
  // o3 instances have exactly one odd attribute.
  const std::size_t hi = config.task == TaskKind::o3 ? 1 : std::min(config.max_rules, attrs.size());
  const std::size_t lo = config.task == TaskKind::o3 ? 1 : std::min(config.min_rules, hi);
  const std::size_t k = lo + rng.uniform_int(hi - lo + 1);
  for (std::size_t i = 0; i < k; ++i) std::swap(attrs[i], attrs[i + rng.uniform_int(attrs.size() - i)]);
  RuleSpec spec;
  for (std::size_t i = 0; i < k; ++i) {
    std::vector<RulePair> options;
    for (const auto& p : allowed) {
      if (p.attribute == attrs[i]) options.push_back(p);
    }
    spec.pairs.push_back(options[rng.uniform_int(options.size())]);
  }
  const auto vocab = rule_vocabulary(config.task);
  std::sort(spec.pairs.begin(), spec.pairs.end(), [&](const RulePair& a, const RulePair& b) {
    return vocabulary_index(a, vocab) < vocabulary_index(b, vocab);
  });
  return spec;
}

const RulePair* rule_for(const RuleSpec& spec, Attribute a) {
  for (const auto& p : spec.pairs) {
    if (p.attribute == a) return &p;
  }
  return nullptr;
}

std::uint8_t other_value(std::uint8_t current, std::size_t D, CounterRng& rng) {
  const auto v = static_cast<std::uint8_t>(rng.uniform_int(D - 1));
  return v >= current ? static_cast<std::uint8_t>(v + 1) : v;
}

GeneratedInstance generate_grid(const GeneratorConfig& config, const TaskStructure& s, CounterRng& rng) {
  GeneratedInstance out;
  out.rules = sample_rules(config, rng);
  const std::size_t rows = s.rows;
  std::array<Grid, kAttributeCount> grids;
  for (std::size_t a = 0; a < kAttributeCount; ++a) {
    const auto attr = static_cast<Attribute>(a);
    const RulePair* rule = rule_for(out.rules, attr);
    grids[a] = fill_rows(rule ? rule->relation : Relation::constant, domain(attr), rule ? rows : 1, rng);
    if (!rule) grids[a].resize(rows, grids[a][0]);  // unruled: one value everywhere
  }
  auto cell = [&](std::size_t i, std::size_t j) {
    PanelAttributes t{};
    for (std::size_t a = 0; a < kAttributeCount; ++a) t[a] = grids[a][i][j];
    return t;
  };
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      if (i == rows - 1 && j == 2) break;
      out.attributes.push_back(cell(i, j));
    }
  }
  const PanelAttributes answer = cell(rows - 1, 2);

  std::vector<PanelAttributes> distractors;
  std::set<PanelAttributes> used{answer};
  for (std::size_t d = 0; d + 1 < s.answer_count; ++d) {
    PanelAttributes t{};
    for (int attempt = 0; attempt < kMaxRetries; ++attempt) {
      t = answer;
      const RulePair& broken = out.rules.pairs[rng.uniform_int(out.rules.pairs.size())];
      const auto a = static_cast<std::size_t>(broken.attribute);
      t[a] = other_value(t[a], kAttributeDomain[a], rng);
      if (rng.bernoulli(0.5)) {
        std::size_t b = rng.uniform_int(kAttributeCount - 1);
        if (b >= a) ++b;
        t[b] = other_value(t[b], kAttributeDomain[b], rng);
      }
      if (!used.count(t)) break;
    }
    used.insert(t);
    distractors.push_back(t);
  }

  const std::size_t label = rng.uniform_int(s.answer_count);
  for (std::size_t k = 0, d = 0; k < s.answer_count; ++k) {
    out.attributes.push_back(k == label ? answer : distractors[d++]);
  }
  out.instance.label = label;
  return out;
}

GeneratedInstance generate_o3(const GeneratorConfig& config, const TaskStructure& s, CounterRng& rng) {
  GeneratedInstance out;
  out.rules = sample_rules(config, rng);
  const std::size_t P = s.answer_count;
  const auto odd = static_cast<std::size_t>(out.rules.pairs.front().attribute);
  const std::size_t label = rng.uniform_int(P);
  out.attributes.assign(P, PanelAttributes{});
  for (std::size_t a = 0; a < kAttributeCount; ++a) {
    const std::size_t D = kAttributeDomain[a];
    if (a == odd) {
      const auto base = static_cast<std::uint8_t>(rng.uniform_int(D));
      const std::uint8_t deviant = other_value(base, D, rng);
      for (std::size_t k = 0; k < P; ++k) out.attributes[k][a] = k == label ? deviant : base;
      continue;
    }
    const auto constant = static_cast<std::uint8_t>(rng.uniform_int(D));
    for (auto& t : out.attributes) t[a] = constant;
    if (!rng.bernoulli(config.o3_variation)) continue;
    for (int attempt = 0; attempt < kMaxRetries; ++attempt) {
      std::vector<std::size_t> hist(D, 0);
      std::vector<std::uint8_t> vals(P);
      for (auto& v : vals) ++hist[v = static_cast<std::uint8_t>(rng.uniform_int(D))];
      // A value shared by exactly P-1 panels would single out a second panel.
      if (std::find(hist.begin(), hist.end(), P - 1) != hist.end()) continue;
      for (std::size_t k = 0; k < P; ++k) out.attributes[k][a] = vals[k];
      break;
    }
  }
  out.instance.label = label;
  return out;
}

std::vector<std::pair<double, double>> object_centers(std::size_t count) {
  switch (count) {
    case 1: return {{0.5, 0.5}};
    case 2: return {{0.25, 0.5}, {0.75, 0.5}};
    case 3: return {{0.25, 0.28}, {0.75, 0.28}, {0.5, 0.74}};
    default: return {{0.25, 0.25}, {0.75, 0.25}, {0.25, 0.75}, {0.75, 0.75}};
  }
}

bool inside(std::size_t shape, double dx, double dy, double r) {
  if (shape == 4) return dx * dx + dy * dy <= r * r;
  const std::size_t n = shape + 3;
  const double offset = shape == 1 ? -std::numbers::pi / 4 : -std::numbers::pi / 2;
  for (std::size_t i = 0; i < n; ++i) {
    const double a0 = offset + 2 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n);
    const double a1 = offset + 2 * std::numbers::pi * static_cast<double>(i + 1) / static_cast<double>(n);
    const double x0 = r * std::cos(a0), y0 = r * std::sin(a0);
    const double x1 = r * std::cos(a1), y1 = r * std::sin(a1);
    // Vertices run clockwise on screen (y down); inside is the non-negative side.
    if ((x1 - x0) * (dy - y0) - (y1 - y0) * (dx - x0) < 0) return false;
  }
  return true;
}

}  // namespace

std::string_view attribute_name(Attribute a) { return kAttributeNames.at(static_cast<std::size_t>(a)); }
std::string_view relation_name(Relation r) { return kRelationNames.at(static_cast<std::size_t>(r)); }

std::string to_string(const RulePair& p) {
  return fmt::format("{}:{}", attribute_name(p.attribute), relation_name(p.relation));
}

RulePair parse_rule_pair(std::string_view text) {
  const auto colon = text.find(':');
  if (colon == std::string_view::npos) {
    throw std::invalid_argument(fmt::format("rule '{}' must look like attribute:relation", text));
  }
  const auto attr = text.substr(0, colon);
  const auto rel = text.substr(colon + 1);
  RulePair p;
  auto a = std::find(kAttributeNames.begin(), kAttributeNames.end(), attr);
  auto r = std::find(kRelationNames.begin(), kRelationNames.end(), rel);
  if (a == kAttributeNames.end()) throw std::invalid_argument(fmt::format("unknown attribute '{}'", attr));
  if (r == kRelationNames.end()) throw std::invalid_argument(fmt::format("unknown relation '{}'", rel));
  p.attribute = static_cast<Attribute>(a - kAttributeNames.begin());
  p.relation = static_cast<Relation>(r - kRelationNames.begin());
  return p;
}

std::vector<RulePair> rule_vocabulary(TaskKind kind) {
  std::vector<RulePair> v;
  for (std::size_t a = 0; a < kAttributeCount; ++a) {
    if (kind == TaskKind::o3) {
      v.push_back({static_cast<Attribute>(a), Relation::odd});
    } else {
      for (std::size_t r = 0; r < 3; ++r) v.push_back({static_cast<Attribute>(a), static_cast<Relation>(r)});
    }
  }
  return v;
}

std::vector<std::uint8_t> encode_rules(const RuleSpec& spec, const std::vector<RulePair>& vocabulary) {
  std::vector<std::uint8_t> bits(vocabulary.size(), 0);
  for (const auto& p : spec.pairs) bits[vocabulary_index(p, vocabulary)] = 1;
  return bits;
}

RuleSpec decode_rules(const std::vector<std::uint8_t>& bits, const std::vector<RulePair>& vocabulary) {
  if (bits.size() != vocabulary.size()) {
    throw std::invalid_argument(
        fmt::format("rule vector of length {} for vocabulary of {}", bits.size(), vocabulary.size()));
  }
  RuleSpec spec;
  for (std::size_t i = 0; i < bits.size(); ++i) {
    if (bits[i]) spec.pairs.push_back(vocabulary[i]);
  }
  return spec;
}

std::vector<RulePair> GeneratorConfig::effective_rules() const {
  return allowed_rules.empty() ? rule_vocabulary(task) : allowed_rules;
}

void GeneratorConfig::validate() const {
  structure().validate();
  if (height < 8 || width < 8) throw std::invalid_argument("panels must be at least 8x8");
  if (count == 0) throw std::invalid_argument("instance count must be positive");
  if (distractor_features) throw std::invalid_argument("distractor features are not supported");
  if (o3_variation < 0 || o3_variation > 1) throw std::invalid_argument("o3 variation must be a probability");
  const auto vocab = rule_vocabulary(task);
  const auto rules = effective_rules();
  for (const auto& p : rules) vocabulary_index(p, vocab);
  if (min_rules == 0 || min_rules > max_rules) throw std::invalid_argument("need 1 <= min_rules <= max_rules");
}

GeneratedInstance generate_one(const GeneratorConfig& config, std::uint64_t index) {
  const TaskStructure s = config.structure();
  CounterRng rng(config.seed ^ (0xa5a5ULL << (8 * static_cast<int>(config.task))), index);
  GeneratedInstance g = s.kind == TaskKind::o3 ? generate_o3(config, s, rng) : generate_grid(config, s, rng);
  g.instance.height = config.height;
  g.instance.width = config.width;
  g.instance.rules = encode_rules(g.rules, rule_vocabulary(config.task));
  g.instance.pixels.reserve(g.attributes.size() * config.height * config.width);
  for (const auto& t : g.attributes) {
    const auto px = render_panel(t, config.height, config.width);
    g.instance.pixels.insert(g.instance.pixels.end(), px.begin(), px.end());
  }
  return g;
}

std::vector<ProblemInstance> generate_range(const GeneratorConfig& config, std::uint64_t begin, std::uint64_t end) {
  config.validate();
  std::vector<ProblemInstance> out;
  out.reserve(end > begin ? end - begin : 0);
  for (std::uint64_t i = begin; i < end; ++i) out.push_back(generate_one(config, i).instance);
  return out;
}

std::vector<ProblemInstance> generate(const GeneratorConfig& config) {
  return generate_range(config, 0, config.count);
}

std::vector<ProblemInstance> generate(const GeneratorConfig& config, std::size_t threads) {
  config.validate();
  threads = std::clamp<std::size_t>(threads, 1, config.count);
  if (threads == 1) return generate(config);
  std::vector<std::vector<ProblemInstance>> parts(threads);
  std::vector<std::exception_ptr> errors(threads);
  {
    std::vector<std::jthread> workers;
    for (std::size_t t = 0; t < threads; ++t) {
      workers.emplace_back([&, t] {
        try {
          parts[t] = generate_range(config, config.count * t / threads, config.count * (t + 1) / threads);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  std::vector<ProblemInstance> out;
  out.reserve(config.count);
  for (auto& part : parts) std::move(part.begin(), part.end(), std::back_inserter(out));
  return out;
}

std::uint8_t shade_byte(std::size_t level) { return kShadeBytes.at(level); }

std::vector<std::uint8_t> render_panel(const PanelAttributes& t, std::size_t height, std::size_t width) {
  for (std::size_t a = 0; a < kAttributeCount; ++a) {
    if (t[a] >= kAttributeDomain[a]) {
      throw std::invalid_argument(fmt::format("{} value {} outside its domain", kAttributeNames[a], t[a]));
    }
  }
  std::vector<std::uint8_t> px(height * width, 255);
  const std::size_t count = t[3] + 1u;
  const double extent = static_cast<double>(std::min(height, width));
  const double base = count == 1 ? 0.5 : 0.25;
  const double r = base * kSizeFractions[t[1]] * extent;
  const std::uint8_t ink = kShadeBytes[t[2]];
  for (const auto& [u, v] : object_centers(count)) {
    const double cx = u * static_cast<double>(width);
    const double cy = v * static_cast<double>(height);
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) {
        if (inside(t[0], static_cast<double>(x) + 0.5 - cx, static_cast<double>(y) + 0.5 - cy, r)) {
          px[y * width + x] = ink;
        }
      }
    }
  }
  return px;
}

PanelRecognizer::PanelRecognizer(std::size_t height, std::size_t width) : height_(height), width_(width) {
  PanelAttributes t{};
  for (t[0] = 0; t[0] < kAttributeDomain[0]; ++t[0])
    for (t[1] = 0; t[1] < kAttributeDomain[1]; ++t[1])
      for (t[2] = 0; t[2] < kAttributeDomain[2]; ++t[2])
        for (t[3] = 0; t[3] < kAttributeDomain[3]; ++t[3]) {
          std::vector<std::vector<std::uint8_t>> variants{render_panel(t, height, width)};
          variants.push_back(image::hflip(variants[0], height, width));
          variants.push_back(image::vflip(variants[0], height, width));
          variants.push_back(image::vflip(variants[1], height, width));
          if (height == width) {
            for (std::size_t i = 0; i < 4; ++i) variants.push_back(image::transpose(variants[i], height, width));
          }
          for (auto& v : variants) {
            auto [it, fresh] = table_.emplace(std::move(v), t);
            if (!fresh && it->second != t) {
              throw std::logic_error(fmt::format("renders of distinct attribute tuples coincide at {}x{}", height, width));
            }
          }
        }
}

std::optional<PanelAttributes> PanelRecognizer::recognize(std::span<const std::uint8_t> pixels) const {
  if (pixels.size() != height_ * width_) return std::nullopt;
  auto it = table_.find(std::vector<std::uint8_t>(pixels.begin(), pixels.end()));
  if (it == table_.end()) return std::nullopt;
  return it->second;
}

PanelAttributes solve_missing(const TaskStructure& s, const RuleSpec& rules, std::span<const PanelAttributes> context) {
  if (s.kind == TaskKind::o3 || context.size() != s.context_count) {
    throw std::invalid_argument("solve_missing: needs the context panels of an rpm or vap instance");
  }
  const std::size_t rows = s.rows;
  auto at = [&](std::size_t i, std::size_t j, std::size_t a) { return static_cast<int>(context[i * 3 + j][a]); };
  auto violated = [&](std::size_t a) {
    return std::invalid_argument(fmt::format("context violates the rule on {}", kAttributeNames[a]));
  };
  PanelAttributes answer{};
  for (std::size_t a = 0; a < kAttributeCount; ++a) {
    const RulePair* rule = rule_for(rules, static_cast<Attribute>(a));
    const std::size_t last = rows - 1;
    int value = 0;
    if (!rule) {
      value = at(0, 0, a);
      for (const auto& c : context) {
        if (c[a] != value) throw violated(a);
      }
    } else if (rule->relation == Relation::constant) {
      for (std::size_t i = 0; i < rows; ++i) {
        const std::size_t n = i == last ? 2 : 3;
        for (std::size_t j = 1; j < n; ++j) {
          if (at(i, j, a) != at(i, 0, a)) throw violated(a);
        }
      }
      value = at(last, 0, a);
    } else if (rule->relation == Relation::progression) {
      const int d = at(0, 1, a) - at(0, 0, a);
      if (d != 1 && d != -1) throw violated(a);
      for (std::size_t i = 0; i < rows; ++i) {
        const std::size_t n = i == last ? 2 : 3;
        for (std::size_t j = 1; j < n; ++j) {
          if (at(i, j, a) - at(i, j - 1, a) != d) throw violated(a);
        }
      }
      value = at(last, 1, a) + d;
    } else if (rule->relation == Relation::distribute_three) {
      std::set<int> pool{at(0, 0, a), at(0, 1, a), at(0, 2, a)};
      if (pool.size() != 3) throw violated(a);
      for (std::size_t i = 1; i < last; ++i) {
        if (std::set<int>{at(i, 0, a), at(i, 1, a), at(i, 2, a)} != pool) throw violated(a);
      }
      if (!pool.erase(at(last, 0, a)) || !pool.erase(at(last, 1, a))) throw violated(a);
      value = *pool.begin();
    } else {
      throw std::invalid_argument("solve_missing: odd relation in a grid task");
    }
    if (value < 0 || static_cast<std::size_t>(value) >= kAttributeDomain[a]) throw violated(a);
    answer[a] = static_cast<std::uint8_t>(value);
  }
  return answer;
}

std::optional<std::size_t> solve_instance(const ProblemInstance& instance, const TaskStructure& s,
                                          const PanelRecognizer& recognizer) {
  std::vector<PanelAttributes> attrs;
  for (std::size_t p = 0; p < instance.panel_count(); ++p) {
    const auto t = recognizer.recognize(instance.panel(p));
    if (!t) return std::nullopt;
    attrs.push_back(*t);
  }
  if (attrs.size() != s.panel_count()) return std::nullopt;
  const auto vocab = rule_vocabulary(s.kind);
  if (instance.rules.size() != vocab.size()) return std::nullopt;
  const RuleSpec rules = decode_rules(instance.rules, vocab);
  if (rules.pairs.empty()) return std::nullopt;

  std::vector<std::size_t> fits;
  if (s.kind == TaskKind::o3) {
    if (rules.pairs.size() != 1) return std::nullopt;
    // The odd attribute singles out one panel; no other attribute may do so.
    std::set<std::size_t> singled;
    std::optional<std::size_t> by_rule;
    for (std::size_t a = 0; a < kAttributeCount; ++a) {
      for (std::size_t k = 0; k < attrs.size(); ++k) {
        bool rest_equal = true;
        std::optional<std::uint8_t> shared;
        for (std::size_t j = 0; j < attrs.size() && rest_equal; ++j) {
          if (j == k) continue;
          if (!shared) shared = attrs[j][a];
          rest_equal = attrs[j][a] == *shared;
        }
        if (rest_equal && attrs[k][a] != *shared) {
          singled.insert(k);
          if (a == static_cast<std::size_t>(rules.pairs[0].attribute)) by_rule = k;
        }
      }
    }
    if (!by_rule || singled.size() != 1) return std::nullopt;
    return by_rule;
  }

  PanelAttributes expected{};
  try {
    expected = solve_missing(s, rules, std::span<const PanelAttributes>(attrs).first(s.context_count));
  } catch (const std::invalid_argument&) {
    return std::nullopt;
  }
  for (std::size_t k = 0; k < s.answer_count; ++k) {
    if (attrs[s.context_count + k] == expected) fits.push_back(k);
  }
  if (fits.size() != 1) return std::nullopt;
  return fits.front();
}

}  // namespace sal_lab
