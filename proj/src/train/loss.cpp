#include "sal_lab/train/loss.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <stdexcept>

namespace sal_lab {

std::string_view rule_selection_name(RuleSelection s) {
  switch (s) {
    case RuleSelection::teacher: return "teacher";
    case RuleSelection::mean: return "mean";
    case RuleSelection::predicted: return "predicted";
  }
  return "unknown";
}

RuleSelection parse_rule_selection(std::string_view name) {
  if (name == "teacher") return RuleSelection::teacher;
  if (name == "mean") return RuleSelection::mean;
  if (name == "predicted") return RuleSelection::predicted;
  throw std::invalid_argument(fmt::format("unknown rule selection '{}' (expected teacher, mean or predicted)", name));
}

template <typename T>
LossTerms<T> compute_loss(const ScarBatchOutput<T>& output, std::span<const std::size_t> labels,
                          const Tensor<T>* rule_targets, double beta, RuleSelection selection) {
  if (beta < 0) throw std::invalid_argument(fmt::format("beta must be non-negative, got {}", beta));
  const Shape& ss = output.scores.shape();
  if (ss.size() != 2 || ss[0] != labels.size()) {
    throw std::invalid_argument(
        fmt::format("compute_loss: scores {} for {} labels", to_string(ss), labels.size()));
  }
  const std::size_t B = ss[0], A = ss[1];
  LossTerms<T> terms;
  terms.ce = ops::cross_entropy_with_logits(output.scores, labels);
  if (!rule_targets || !output.rule_logits) {
    terms.aux = Var<T>::constant(Tensor<T>::scalar(T(0)));
    terms.total = terms.ce;
    return terms;
  }
  const Shape& rs = output.rule_logits.shape();
  if (rs.size() != 3 || rs[0] != B || rs[1] != A || rule_targets->shape() != Shape{B, rs[2]}) {
    throw std::invalid_argument(fmt::format("compute_loss: rule logits {} with targets {}", to_string(rs),
                                            to_string(rule_targets->shape())));
  }
  const std::size_t width = rs[2];
  const Var<T> flat = ops::reshape(output.rule_logits, {B * A, width});
  if (selection == RuleSelection::mean) {
    Tensor<T> repeated(Shape{B * A, width});
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t k = 0; k < A; ++k)
        std::copy_n(rule_targets->data() + b * width, width, repeated.data() + (b * A + k) * width);
    terms.aux = ops::bce_with_logits(flat, Var<T>::constant(std::move(repeated)));
  } else {
    std::vector<std::size_t> rows(B);
    for (std::size_t b = 0; b < B; ++b) {
      std::size_t k = labels[b];
      if (selection == RuleSelection::predicted) {
        const T* s = output.scores.value().data() + b * A;
        k = static_cast<std::size_t>(std::max_element(s, s + A) - s);
      }
      rows[b] = b * A + k;
    }
    const Var<T> picked = ops::gather(flat, 0, std::span<const std::size_t>(rows));
    terms.aux = ops::bce_with_logits(picked, Var<T>::constant(*rule_targets));
  }
  terms.total = beta == 0 ? terms.ce : ops::add(terms.ce, ops::scale(terms.aux, static_cast<T>(beta)));
  return terms;
}

double compute_loss(const ModelOutput& output, std::size_t label, const std::optional<std::vector<double>>& rule_target,
                    double beta, RuleSelection selection) {
  const std::size_t A = output.scores.size();
  if (label >= A) throw std::out_of_range(fmt::format("label {} out of range for {} answers", label, A));
  ScarBatchOutput<double> batch;
  batch.scores = Var<double>::constant(Tensor<double>(Shape{1, A}, output.scores));
  std::optional<Tensor<double>> targets;
  if (rule_target && !output.rule_logits.empty()) {
    const std::size_t width = rule_target->size();
    Tensor<double> logits(Shape{1, A, width});
    for (std::size_t k = 0; k < A; ++k) {
      if (output.rule_logits[k].size() != width) {
        throw std::invalid_argument(fmt::format("rule target has {} entries, logits have {}", width,
                                                output.rule_logits[k].size()));
      }
      std::copy(output.rule_logits[k].begin(), output.rule_logits[k].end(), logits.data() + k * width);
    }
    batch.rule_logits = Var<double>::constant(std::move(logits));
    targets = Tensor<double>(Shape{1, width}, *rule_target);
  }
  NoGradGuard guard;
  const std::size_t labels[] = {label};
  return compute_loss(batch, labels, targets ? &*targets : nullptr, beta, selection).total.item();
}

template LossTerms<float> compute_loss(const ScarBatchOutput<float>&, std::span<const std::size_t>,
                                       const Tensor<float>*, double, RuleSelection);
template LossTerms<double> compute_loss(const ScarBatchOutput<double>&, std::span<const std::size_t>,
                                        const Tensor<double>*, double, RuleSelection);

}  // namespace sal_lab
