#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "sal_lab/avr/task.hpp"
#include "sal_lab/core/checkpoint.hpp"
#include "sal_lab/core/nn.hpp"
#include "sal_lab/model/sal.hpp"

namespace sal_lab {

enum class Aggregator : std::uint8_t { sal = 0, rn = 1 };

/// Layer widths of the whole network. Shapes along the encoder:
/// [1, h, w] -conv x4-> [c4, h/2, w/2] -flatten, linear-> [c4, spatial_width]
/// -token mixer, channel mixer-> [mixer_out, spatial_width / mixer_kernel] = d_h.
struct ScarConfig {
  std::string preset = "custom";
  std::size_t panel_height = 80;
  std::size_t panel_width = 80;
  std::array<std::size_t, 4> conv_channels{16, 16, 32, 32};
  std::size_t spatial_width = 80;
  std::size_t token_multiplier = 4;
  std::size_t encoder_mixer_hidden = 128;
  std::size_t encoder_mixer_kernel = 8;
  std::size_t encoder_mixer_out = 8;
  std::size_t d_h = 80;
  std::size_t heads = 20;
  std::size_t d_v = 64;
  std::size_t R = 6;
  std::size_t C = 60;
  bool sal_bias = true;
  std::size_t reasoner_mixer_hidden = 32;
  std::size_t reasoner_mixer_out = 5;
  std::size_t d_g = 128;
  Aggregator aggregator = Aggregator::sal;
  std::size_t rn_hidden = 128;

  static ScarConfig paper();
  static ScarConfig tiny();
  /// "scar-paper" or "scar-tiny".
  static ScarConfig preset_named(const std::string& name);

  /// Throws naming the first inconsistent width.
  void validate() const;
  std::size_t conv_out_height() const { return (panel_height - 1) / 2 + 1; }
  std::size_t conv_out_width() const { return (panel_width - 1) / 2 + 1; }
  std::size_t group_width() const { return reasoner_mixer_out * heads; }

  /// Numeric encoding stored in checkpoints as "meta.config".
  std::vector<double> encode() const;
  static ScarConfig decode(const std::vector<double>& fields, const std::string& preset);
};

/// Pre-norm residual MLP along the last axis: x + W2 GELU(W1 LN(x)).
template <typename T>
struct TokenMixer {
  LayerNorm<T> norm;
  Linear<T> fc1;
  Linear<T> fc2;

  TokenMixer() = default;
  TokenMixer(ParameterStore<T>& store, const std::string& name, std::size_t width, std::size_t hidden,
             CounterRng& rng);
  Var<T> operator()(const Var<T>& x) const;
};

/// conv1d - GELU - conv1d over [N, channels, length], then flatten to [N, out * length'].
template <typename T>
struct ChannelMixer {
  Conv1d<T> conv1;
  Conv1d<T> conv2;

  ChannelMixer() = default;
  ChannelMixer(ParameterStore<T>& store, const std::string& name, const ConvGeometry& first,
               std::size_t out_channels, CounterRng& rng);
  Var<T> operator()(const Var<T>& x) const;
};

/// Two-layer perceptron with GELU in between.
template <typename T>
struct Mlp {
  Linear<T> fc1;
  Linear<T> fc2;

  Mlp() = default;
  Mlp(ParameterStore<T>& store, const std::string& name, std::size_t in, std::size_t hidden, std::size_t out,
      CounterRng& rng);
  Var<T> operator()(const Var<T>& x) const;
};

/// Scores and rule logits for a batch of B instances of one task.
template <typename T>
struct ScarBatchOutput {
  Var<T> scores;       // [B, A]
  Var<T> rule_logits;  // [B, A, |r|]; empty when not requested or no head exists
};

/// Single-instance view used for prediction.
struct ModelOutput {
  std::vector<double> scores;
  std::vector<double> probabilities;
  std::size_t prediction = 0;
  std::vector<std::vector<double>> rule_logits;  // per answer group; empty if absent
};

/// argmax with ties to the lowest index.
std::size_t argmax(std::span<const double> values);

template <typename T>
class ScarModel {
 public:
  /// Parameters are initialized from a counter RNG keyed by `seed`.
  ScarModel(ScarConfig config, std::uint64_t seed);

  const ScarConfig& config() const { return config_; }
  ParameterStore<T>& store() { return *store_; }
  const ParameterStore<T>& store() const { return *store_; }
  const std::vector<Var<T>>& parameters() const { return store_->parameters(); }
  const SalWeights<T>& sal() const { return sal_; }

  /// panels [M, 1, h, w] -> embeddings [M, d_h].
  Var<T> encode(const Var<T>& panels, bool training) const;
  /// groups [N, I, d_h] -> SAL (or RN) output [N, L, d_v].
  Var<T> aggregate(const Var<T>& groups, StructureSpec structure) const;
  /// groups [N, I, d_h] -> g [N, d_g].
  Var<T> reason(const Var<T>& groups, StructureSpec structure) const;
  /// g [N, d_g] -> scores [N].
  Var<T> decode(const Var<T>& g) const;

  /// panels [B, P, h, w] (pixel values in [0,1]).
  ScarBatchOutput<T> forward(const Var<T>& panels, const TaskStructure& s, bool training,
                             bool with_rules = true) const;
  /// Eval-mode forward of one instance.
  ModelOutput predict(const ProblemInstance& instance, const TaskStructure& s) const;

  bool has_rule_head(TaskKind kind) const { return rule_heads_.count(kind) != 0; }
  std::size_t rule_width(TaskKind kind) const;
  /// Creates "rule_head.<task>.*" on first use; later calls must agree on width.
  void ensure_rule_head(TaskKind kind, std::size_t width);

  /// Parameters, batch-norm statistics and "meta.config".
  CheckpointEntries to_checkpoint() const;
  /// Overwrites values from entries produced by to_checkpoint() of a model of equal config.
  void load_values(const CheckpointEntries& entries);
  static ScarModel from_checkpoint(const CheckpointEntries& entries);

 private:
  ScarConfig config_;
  std::unique_ptr<ParameterStore<T>> store_;
  std::unique_ptr<CounterRng> rng_;
  std::array<Conv2d<T>, 4> convs_;
  std::array<BatchNorm2d<T>, 4> norms_;
  Linear<T> spatial_;
  TokenMixer<T> encoder_mixer1_;
  ChannelMixer<T> encoder_channels_;
  TokenMixer<T> encoder_mixer2_;
  SalWeights<T> sal_;
  Mlp<T> rn_;
  ChannelMixer<T> reasoner_channels_;
  TokenMixer<T> reasoner_mixer_;
  Linear<T> reasoner_out_;
  Mlp<T> decoder_;
  std::map<TaskKind, Mlp<T>> rule_heads_;
};

/// Panels of instances as one tensor [B, P, h, w] with values byte / 255.
template <typename T>
Tensor<T> batch_panels(std::span<const ProblemInstance* const> instances);

/// Sum over ordered pairs (i, j), i != j, of mlp([h_i, h_j]); groups [N, I, d] -> [N, out].
template <typename T>
Var<T> rn_aggregate(const Var<T>& groups, const Mlp<T>& mlp);

}  // namespace sal_lab
