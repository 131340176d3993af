#include "sal_lab/model/scar.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "sal_lab/core/ops.hpp"

namespace sal_lab {

ScarConfig ScarConfig::paper() {
  ScarConfig c;
  c.preset = "scar-paper";
  return c;
}

ScarConfig ScarConfig::tiny() {
  ScarConfig c;
  c.preset = "scar-tiny";
  c.panel_height = 32;
  c.panel_width = 32;
  c.conv_channels = {8, 8, 16, 16};
  c.spatial_width = 20;
  c.encoder_mixer_hidden = 32;
  c.encoder_mixer_kernel = 4;
  c.encoder_mixer_out = 4;
  c.d_h = 20;
  c.heads = 5;
  c.d_v = 16;
  c.reasoner_mixer_hidden = 8;
  c.reasoner_mixer_out = 4;
  c.d_g = 64;
  c.rn_hidden = 64;
  return c;
}

ScarConfig ScarConfig::preset_named(const std::string& name) {
  if (name == "scar-paper") return paper();
  if (name == "scar-tiny") return tiny();
  throw std::invalid_argument(fmt::format("unknown preset '{}' (expected scar-paper or scar-tiny)", name));
}

void ScarConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("ScarConfig: " + what); };
  if (panel_height < 2 || panel_width < 2) fail("panels must be at least 2x2");
  for (std::size_t c : conv_channels) {
    if (c == 0) fail("conv widths must be positive");
  }
  if (encoder_mixer_kernel == 0 || spatial_width % encoder_mixer_kernel != 0) {
    fail(fmt::format("spatial width {} not divisible by channel-mixer kernel {}", spatial_width,
                     encoder_mixer_kernel));
  }
  if (encoder_mixer_out * (spatial_width / encoder_mixer_kernel) != d_h) {
    fail(fmt::format("channel mixer yields {} x {} = {} but d_h = {}", encoder_mixer_out,
                     spatial_width / encoder_mixer_kernel, encoder_mixer_out * (spatial_width / encoder_mixer_kernel),
                     d_h));
  }
  if (heads == 0 || d_h % heads != 0) fail(fmt::format("{} heads do not divide d_h = {}", heads, d_h));
  if (R == 0 || C == 0 || d_v == 0 || d_g == 0 || token_multiplier == 0) fail("widths must be positive");
  if (reasoner_mixer_hidden == 0 || reasoner_mixer_out == 0 || rn_hidden == 0) fail("widths must be positive");
}

std::vector<double> ScarConfig::encode() const {
  const double preset_id = preset == "scar-paper" ? 1 : preset == "scar-tiny" ? 2 : 0;
  return {preset_id,
          double(panel_height),
          double(panel_width),
          double(conv_channels[0]),
          double(conv_channels[1]),
          double(conv_channels[2]),
          double(conv_channels[3]),
          double(spatial_width),
          double(token_multiplier),
          double(encoder_mixer_hidden),
          double(encoder_mixer_kernel),
          double(encoder_mixer_out),
          double(d_h),
          double(heads),
          double(d_v),
          double(R),
          double(C),
          sal_bias ? 1.0 : 0.0,
          double(reasoner_mixer_hidden),
          double(reasoner_mixer_out),
          double(d_g),
          double(static_cast<int>(aggregator)),
          double(rn_hidden)};
}

ScarConfig ScarConfig::decode(const std::vector<double>& f, const std::string& preset) {
  if (f.size() != 23) throw std::runtime_error(fmt::format("meta.config has {} fields, expected 23", f.size()));
  auto u = [&](std::size_t i) { return static_cast<std::size_t>(f[i]); };
  ScarConfig c;
  c.preset = preset.empty() ? (f[0] == 1 ? "scar-paper" : f[0] == 2 ? "scar-tiny" : "custom") : preset;
  c.panel_height = u(1);
  c.panel_width = u(2);
  c.conv_channels = {u(3), u(4), u(5), u(6)};
  c.spatial_width = u(7);
  c.token_multiplier = u(8);
  c.encoder_mixer_hidden = u(9);
  c.encoder_mixer_kernel = u(10);
  c.encoder_mixer_out = u(11);
  c.d_h = u(12);
  c.heads = u(13);
  c.d_v = u(14);
  c.R = u(15);
  c.C = u(16);
  c.sal_bias = f[17] != 0;
  c.reasoner_mixer_hidden = u(18);
  c.reasoner_mixer_out = u(19);
  c.d_g = u(20);
  c.aggregator = f[21] == 1 ? Aggregator::rn : Aggregator::sal;
  c.rn_hidden = u(22);
  c.validate();
  return c;
}

template <typename T>
TokenMixer<T>::TokenMixer(ParameterStore<T>& store, const std::string& name, std::size_t width,
                          std::size_t hidden, CounterRng& rng)
    : norm(store, name + ".norm", width),
      fc1(store, name + ".fc1", width, hidden, rng),
      fc2(store, name + ".fc2", hidden, width, rng) {}

template <typename T>
Var<T> TokenMixer<T>::operator()(const Var<T>& x) const {
  return ops::add(x, fc2(ops::gelu(fc1(norm(x)))));
}

template <typename T>
ChannelMixer<T>::ChannelMixer(ParameterStore<T>& store, const std::string& name, const ConvGeometry& first,
                              std::size_t out_channels, CounterRng& rng)
    : conv1(store, name + ".conv1", first, rng),
      conv2(store, name + ".conv2", ConvGeometry{first.out_channels, out_channels, 1, 1, 0}, rng) {}

template <typename T>
Var<T> ChannelMixer<T>::operator()(const Var<T>& x) const {
  const Var<T> y = conv2(ops::gelu(conv1(x)));
  return ops::reshape(y, {y.shape()[0], y.shape()[1] * y.shape()[2]});
}

template <typename T>
Mlp<T>::Mlp(ParameterStore<T>& store, const std::string& name, std::size_t in, std::size_t hidden,
            std::size_t out, CounterRng& rng)
    : fc1(store, name + ".fc1", in, hidden, rng), fc2(store, name + ".fc2", hidden, out, rng) {}

template <typename T>
Var<T> Mlp<T>::operator()(const Var<T>& x) const {
  return fc2(ops::gelu(fc1(x)));
}

std::size_t argmax(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("argmax of an empty vector");
  return static_cast<std::size_t>(std::max_element(values.begin(), values.end()) - values.begin());
}

template <typename T>
ScarModel<T>::ScarModel(ScarConfig config, std::uint64_t seed)
    : config_(std::move(config)),
      store_(std::make_unique<ParameterStore<T>>()),
      rng_(std::make_unique<CounterRng>(seed, 0x5ca7)) {
  config_.validate();
  const ScarConfig& c = config_;
  ParameterStore<T>& s = *store_;
  CounterRng& rng = *rng_;

  std::size_t in = 1;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string name = fmt::format("encoder.conv{}", i + 1);
    convs_[i] = Conv2d<T>(s, name, ConvGeometry{in, c.conv_channels[i], 3, i == 0 ? 2u : 1u, 1}, rng);
    norms_[i] = BatchNorm2d<T>(s, fmt::format("encoder.bn{}", i + 1), c.conv_channels[i]);
    in = c.conv_channels[i];
  }
  const std::size_t positions = c.conv_out_height() * c.conv_out_width();
  spatial_ = Linear<T>(s, "encoder.spatial", positions, c.spatial_width, rng);
  encoder_mixer1_ = TokenMixer<T>(s, "encoder.token_mixer1", c.spatial_width,
                                  c.token_multiplier * c.spatial_width, rng);
  encoder_channels_ = ChannelMixer<T>(
      s, "encoder.channel_mixer",
      ConvGeometry{c.conv_channels[3], c.encoder_mixer_hidden, c.encoder_mixer_kernel, c.encoder_mixer_kernel, 0},
      c.encoder_mixer_out, rng);
  encoder_mixer2_ = TokenMixer<T>(s, "encoder.token_mixer2", c.d_h, c.token_multiplier * c.d_h, rng);

  if (c.aggregator == Aggregator::sal) {
    sal_ = SalWeights<T>::create(s, "sal", c.R, c.C, c.d_h, c.heads, c.d_v, c.sal_bias, rng);
  } else {
    sal_.heads = c.heads;
    rn_ = Mlp<T>(s, "reasoner.rn", 2 * c.d_h, c.rn_hidden, c.heads * c.d_v, rng);
  }
  reasoner_channels_ = ChannelMixer<T>(s, "reasoner.channel_mixer",
                                       ConvGeometry{c.d_v, c.reasoner_mixer_hidden, 1, 1, 0},
                                       c.reasoner_mixer_out, rng);
  const std::size_t gw = c.group_width();
  reasoner_mixer_ = TokenMixer<T>(s, "reasoner.token_mixer", gw, c.token_multiplier * gw, rng);
  reasoner_out_ = Linear<T>(s, "reasoner.out", gw, c.d_g, rng);
  decoder_ = Mlp<T>(s, "decoder", c.d_g, c.d_g, 1, rng);
}

template <typename T>
Var<T> ScarModel<T>::encode(const Var<T>& panels, bool training) const {
  const Shape& ps = panels.shape();
  if (ps.size() != 4 || ps[1] != 1 || ps[2] != config_.panel_height || ps[3] != config_.panel_width) {
    throw std::invalid_argument(fmt::format("encode: panels {} expected [M, 1, {}, {}]", to_string(ps),
                                            config_.panel_height, config_.panel_width));
  }
  Var<T> x = panels;
  for (std::size_t i = 0; i < 4; ++i) x = ops::relu(norms_[i](convs_[i](x), training));
  const std::size_t M = ps[0];
  x = ops::reshape(x, {M, config_.conv_channels[3], x.shape()[2] * x.shape()[3]});
  x = ops::relu(spatial_(x));
  x = encoder_mixer1_(x);
  x = encoder_channels_(x);
  return encoder_mixer2_(x);
}

template <typename T>
Var<T> rn_aggregate(const Var<T>& groups, const Mlp<T>& mlp) {
  const Shape& gs = groups.shape();
  if (gs.size() != 3 || gs[1] == 0) {
    throw std::invalid_argument(fmt::format("rn_aggregate: groups {} expected [N, I, d]", to_string(gs)));
  }
  const std::size_t N = gs[0], I = gs[1];
  if (I < 2) {
    // No ordered pairs; the sum is empty.
    return Var<T>::constant(Tensor<T>::zeros({N, mlp.fc2.out_features()}));
  }
  std::vector<std::size_t> left, right;
  for (std::size_t i = 0; i < I; ++i) {
    for (std::size_t j = 0; j < I; ++j) {
      if (i == j) continue;
      left.push_back(i);
      right.push_back(j);
    }
  }
  const std::vector<Var<T>> halves{ops::gather(groups, 1, std::span<const std::size_t>(left)),
                                    ops::gather(groups, 1, std::span<const std::size_t>(right))};
  const Var<T> pairs = ops::concat<T>(halves, 2);  // [N, I(I-1), 2d]
  const std::array<std::int64_t, 1> axis{1};
  return ops::sum(mlp(pairs), std::span<const std::int64_t>(axis));
}

template <typename T>
Var<T> ScarModel<T>::aggregate(const Var<T>& groups, StructureSpec structure) const {
  if (config_.aggregator == Aggregator::sal) return sal_apply(groups, sal_, structure);
  const Var<T> pooled = rn_aggregate(groups, rn_);
  return ops::reshape(pooled, {groups.shape()[0], config_.heads, config_.d_v});
}

template <typename T>
Var<T> ScarModel<T>::reason(const Var<T>& groups, StructureSpec structure) const {
  static constexpr std::array<std::size_t, 3> kChannelsFirst{0, 2, 1};
  Var<T> v = aggregate(groups, structure);                           // [N, L, d_v]
  v = ops::permute(v, std::span<const std::size_t>(kChannelsFirst));  // [N, d_v, L]
  v = reasoner_channels_(ops::gelu(v));                              // [N, out * L]
  v = reasoner_mixer_(v);
  return reasoner_out_(v);
}

template <typename T>
Var<T> ScarModel<T>::decode(const Var<T>& g) const {
  const Var<T> s = decoder_(g);
  return ops::reshape(s, {s.shape()[0]});
}

template <typename T>
ScarBatchOutput<T> ScarModel<T>::forward(const Var<T>& panels, const TaskStructure& s, bool training,
                                         bool with_rules) const {
  s.validate();
  const Shape& ps = panels.shape();
  if (ps.size() != 4 || ps[1] != s.panel_count()) {
    throw std::invalid_argument(fmt::format("forward: panels {} expected [B, {}, h, w] for {}", to_string(ps),
                                            s.panel_count(), task_name(s.kind)));
  }
  const std::size_t B = ps[0], P = ps[1];
  const Var<T> emb = encode(ops::reshape(panels, {B * P, 1, ps[2], ps[3]}), training);
  const Var<T> groups = arrange_groups(ops::reshape(emb, {B, P, config_.d_h}), s);
  const Var<T> g = reason(groups, s.spec());
  ScarBatchOutput<T> out;
  out.scores = ops::reshape(decode(g), {B, s.answer_count});
  if (with_rules) {
    auto it = rule_heads_.find(s.kind);
    if (it != rule_heads_.end()) {
      const Var<T> r = it->second(g);
      out.rule_logits = ops::reshape(r, {B, s.answer_count, r.shape()[1]});
    }
  }
  return out;
}

template <typename T>
Tensor<T> batch_panels(std::span<const ProblemInstance* const> instances) {
  if (instances.empty()) throw std::invalid_argument("batch_panels: empty batch");
  const ProblemInstance& first = *instances[0];
  const std::size_t P = first.panel_count();
  Tensor<T> t(Shape{instances.size(), P, first.height, first.width});
  const std::size_t per = first.pixels.size();
  for (std::size_t b = 0; b < instances.size(); ++b) {
    const ProblemInstance& inst = *instances[b];
    if (inst.pixels.size() != per || inst.height != first.height) {
      throw std::invalid_argument("batch_panels: instances differ in panel count or size");
    }
    T* dst = t.data() + b * per;
    for (std::size_t i = 0; i < per; ++i) dst[i] = static_cast<T>(inst.pixels[i]) / T(255);
  }
  return t;
}

template <typename T>
ModelOutput ScarModel<T>::predict(const ProblemInstance& instance, const TaskStructure& s) const {
  instance.validate(s);
  NoGradGuard guard;
  const ProblemInstance* one[] = {&instance};
  const auto out = forward(Var<T>::constant(batch_panels<T>(one)), s, false, true);
  ModelOutput m;
  for (T v : out.scores.value().values()) m.scores.push_back(static_cast<double>(v));
  const double mx = *std::max_element(m.scores.begin(), m.scores.end());
  double total = 0;
  for (double v : m.scores) total += std::exp(v - mx);
  for (double v : m.scores) m.probabilities.push_back(std::exp(v - mx) / total);
  m.prediction = argmax(m.probabilities);
  if (out.rule_logits) {
    const std::size_t width = out.rule_logits.shape()[2];
    for (std::size_t k = 0; k < s.answer_count; ++k) {
      std::vector<double> row;
      for (std::size_t i = 0; i < width; ++i) row.push_back(out.rule_logits.value()[k * width + i]);
      m.rule_logits.push_back(std::move(row));
    }
  }
  return m;
}

template <typename T>
std::size_t ScarModel<T>::rule_width(TaskKind kind) const {
  auto it = rule_heads_.find(kind);
  return it == rule_heads_.end() ? 0 : it->second.fc2.out_features();
}

template <typename T>
void ScarModel<T>::ensure_rule_head(TaskKind kind, std::size_t width) {
  if (width == 0) throw std::invalid_argument("rule head width must be positive");
  auto it = rule_heads_.find(kind);
  if (it != rule_heads_.end()) {
    if (it->second.fc2.out_features() != width) {
      throw std::invalid_argument(fmt::format("rule head for {} has width {}, requested {}", task_name(kind),
                                              it->second.fc2.out_features(), width));
    }
    return;
  }
  rule_heads_.emplace(kind, Mlp<T>(*store_, fmt::format("rule_head.{}", task_name(kind)), config_.d_g,
                                   config_.d_g, width, *rng_));
}

template <typename T>
CheckpointEntries ScarModel<T>::to_checkpoint() const {
  CheckpointEntries entries;
  const auto meta = config_.encode();
  entries.emplace_back("meta.config", Tensor<double>(Shape{meta.size()}, meta));
  for (std::size_t i = 0; i < store_->names().size(); ++i) {
    entries.emplace_back(store_->names()[i], store_->parameters()[i].value());
  }
  for (const auto& [name, state] : store_->batchnorm_states()) {
    entries.emplace_back(name + ".running_mean", state->running_mean);
    entries.emplace_back(name + ".running_var", state->running_var);
  }
  return entries;
}

template <typename T>
void ScarModel<T>::load_values(const CheckpointEntries& entries) {
  std::map<std::string, const AnyTensor*> by_name;
  for (const auto& [name, t] : entries) by_name.emplace(name, &t);
  auto fetch = [&](const std::string& name, const Shape& shape) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::runtime_error(fmt::format("checkpoint lacks '{}'", name));
    Tensor<T> t = as_precision<T>(*it->second);
    if (t.shape() != shape) {
      throw std::runtime_error(fmt::format("checkpoint entry '{}' has shape {}, model expects {}", name,
                                           to_string(t.shape()), to_string(shape)));
    }
    return t;
  };
  for (std::size_t i = 0; i < store_->names().size(); ++i) {
    Var<T> p = store_->parameters()[i];
    p.assign(fetch(store_->names()[i], p.shape()));
  }
  for (const auto& [name, state] : store_->batchnorm_states()) {
    state->running_mean = fetch(name + ".running_mean", state->running_mean.shape());
    state->running_var = fetch(name + ".running_var", state->running_var.shape());
  }
}

template <typename T>
ScarModel<T> ScarModel<T>::from_checkpoint(const CheckpointEntries& entries) {
  const AnyTensor* meta = nullptr;
  for (const auto& [name, t] : entries) {
    if (name == "meta.config") meta = &t;
  }
  if (!meta) throw std::runtime_error("checkpoint lacks 'meta.config'");
  const Tensor<double> m = as_precision<double>(*meta);
  ScarModel model(ScarConfig::decode(std::vector<double>(m.values().begin(), m.values().end()), ""), 0);
  const std::string prefix = "rule_head.";
  const std::string suffix = ".fc2.bias";
  for (const auto& [name, t] : entries) {
    if (name.starts_with(prefix) && name.ends_with(suffix)) {
      const std::string task = name.substr(prefix.size(), name.size() - prefix.size() - suffix.size());
      const std::size_t width = std::visit([](const auto& x) { return x.size(); }, t);
      model.ensure_rule_head(parse_task(task), width);
    }
  }
  model.load_values(entries);
  return model;
}

template class ScarModel<float>;
template class ScarModel<double>;
template struct TokenMixer<float>;
template struct TokenMixer<double>;
template struct ChannelMixer<float>;
template struct ChannelMixer<double>;
template struct Mlp<float>;
template struct Mlp<double>;
template Tensor<float> batch_panels(std::span<const ProblemInstance* const>);
template Tensor<double> batch_panels(std::span<const ProblemInstance* const>);
template Var<float> rn_aggregate(const Var<float>&, const Mlp<float>&);
template Var<double> rn_aggregate(const Var<double>&, const Mlp<double>&);

}  // namespace sal_lab
