#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "sal_lab/model/scar.hpp"

namespace sal_lab {

/// Which answer group's rule logits are compared with the rule target.
enum class RuleSelection : std::uint8_t {
  teacher,    // the group holding the correct answer
  mean,       // every group, losses averaged
  predicted,  // the group with the highest score (selection is not differentiated)
};

std::string_view rule_selection_name(RuleSelection s);
RuleSelection parse_rule_selection(std::string_view name);

template <typename T>
struct LossTerms {
  Var<T> total;  // ce + beta * aux
  Var<T> ce;
  Var<T> aux;    // zero constant when no rule supervision applies
};

/// Joint objective over a batch: mean cross-entropy of the scores against the
/// labels plus beta times the mean binary cross-entropy of the selected rule
/// logits against rule_targets [B, |r|]. The aux term is skipped when
/// rule_targets is null or the output carries no rule logits.
template <typename T>
LossTerms<T> compute_loss(const ScarBatchOutput<T>& output, std::span<const std::size_t> labels,
                          const Tensor<T>* rule_targets, double beta, RuleSelection selection = RuleSelection::teacher);

/// Single-instance form on plain numbers; rule logits are per answer group.
double compute_loss(const ModelOutput& output, std::size_t label, const std::optional<std::vector<double>>& rule_target,
                    double beta, RuleSelection selection = RuleSelection::teacher);

}  // namespace sal_lab
