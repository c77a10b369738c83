#pragma once
// Inner-loop loss terms. All operate on a B x 1 probability variable so the
// whole objective differentiates end-to-end through the backbone.

#include <map>
#include <optional>
#include <span>
#include <vector>

#include "fairm2s/autodiff.hpp"

namespace fairm2s {

struct LossWeights {
  double gamma = 0.5;          // equalized-odds surrogate
  double alpha = 0.1;          // margin
  double lambda_smooth = 0.1;  // label-smoothed BCE
  double margin_m = 0.5;
  double smooth_amount = 0.1;  // 1 -> 0.9, 0 -> 0.1

  void validate() const {
    if (gamma < 0 || alpha < 0 || lambda_smooth < 0) throw ConfigError("loss weights must be nonnegative");
    if (!(margin_m > 0)) throw ConfigError("margin_m must be > 0");
    if (!(smooth_amount >= 0 && smooth_amount < 0.5)) throw ConfigError("smooth_amount must be in [0, 0.5)");
  }

  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

inline constexpr double kProbClamp = 1e-7;

/// A loss value plus whether the batch was missing the cells the term needs.
/// Degenerate terms evaluate to a constant 0.
template <typename Scalar>
struct LossTerm {
  Var<Scalar> value;
  bool degenerate = false;
};

template <typename Scalar>
struct InnerLoss {
  Var<Scalar> total;
  bool eodd_degenerate = false;
  bool margin_degenerate = false;
};

namespace detail {

template <typename Scalar>
void check_lengths(const Var<Scalar>& probs, std::size_t n, const char* op) {
  if (probs.cols() != 1 || probs.rows() != static_cast<Eigen::Index>(n))
    throw ShapeError(std::string(op) + ": probs must be B x 1 with B = number of labels");
  if (n == 0) throw std::invalid_argument(std::string(op) + ": empty batch");
}

template <typename Scalar>
Tensor<Scalar> indicator(std::size_t n, auto&& pred) {
  Tensor<Scalar> w = Tensor<Scalar>::Zero(static_cast<Eigen::Index>(n), 1);
  for (std::size_t i = 0; i < n; ++i)
    if (pred(i)) w(static_cast<Eigen::Index>(i), 0) = Scalar(1);
  return w;
}

/// Mean of probs over rows where `w` is 1 (w has `count` ones).
template <typename Scalar>
Var<Scalar> masked_mean(Var<Scalar> probs, Tensor<Scalar> w, int count) {
  return scale(dot(probs, probs.tape->constant(std::move(w))), Scalar(1) / static_cast<Scalar>(count));
}

}  // namespace detail

/// Per-item BCE against real-valued targets, B x 1. Probabilities are clamped
/// to [1e-7, 1 - 1e-7] before the logs.
template <typename Scalar>
Var<Scalar> bce_per_item(Var<Scalar> probs, std::span<const Scalar> targets) {
  detail::check_lengths(probs, targets.size(), "bce");
  auto& tape = *probs.tape;
  Tensor<Scalar> t(static_cast<Eigen::Index>(targets.size()), 1);
  for (std::size_t i = 0; i < targets.size(); ++i) t(static_cast<Eigen::Index>(i), 0) = targets[i];
  Tensor<Scalar> one_minus_t = (Scalar(1) - t.array()).matrix();
  auto p = clamp(probs, Scalar(kProbClamp), Scalar(1 - kProbClamp));
  auto q = add_scalar(-p, Scalar(1));
  return -(mul(tape.constant(std::move(t)), log(p)) + mul(tape.constant(std::move(one_minus_t)), log(q)));
}

template <typename Scalar>
std::vector<Scalar> smoothed_targets(std::span<const int> labels, double smooth_amount) {
  std::vector<Scalar> t(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i)
    t[i] = static_cast<Scalar>(labels[i] ? 1.0 - smooth_amount : smooth_amount);
  return t;
}

template <typename Scalar>
Var<Scalar> bce_loss(Var<Scalar> probs, std::span<const int> labels) {
  const auto t = smoothed_targets<Scalar>(labels, 0.0);
  return mean(bce_per_item(probs, std::span<const Scalar>(t)));
}

template <typename Scalar>
Var<Scalar> smooth_loss(Var<Scalar> probs, std::span<const int> labels, double smooth_amount) {
  const auto t = smoothed_targets<Scalar>(labels, smooth_amount);
  return mean(bce_per_item(probs, std::span<const Scalar>(t)));
}

/// Soft equalized-odds gap using mean probabilities as TPR/FPR.
///
/// For each pair of groups present in the batch, the gap is the mean of
/// |TPR_a - TPR_b| and |FPR_a - FPR_b| over whichever of the two terms both
/// groups can support; the result averages those pair gaps.
template <typename Scalar>
LossTerm<Scalar> eodd_loss(Var<Scalar> probs, std::span<const int> labels, std::span<const int> groups) {
  detail::check_lengths(probs, labels.size(), "eodd_loss");
  if (groups.size() != labels.size()) throw ShapeError("eodd_loss: labels and groups differ in length");
  auto& tape = *probs.tape;
  const auto n = labels.size();

  struct Rates {
    std::optional<Var<Scalar>> tpr, fpr;
  };
  std::map<int, Rates> per_group;
  std::map<int, std::pair<int, int>> counts;  // positives, negatives
  for (std::size_t i = 0; i < n; ++i) {
    auto& c = counts[groups[i]];
    (labels[i] ? c.first : c.second)++;
  }
  for (const auto& [g, c] : counts) {
    Rates r;
    if (c.first > 0)
      r.tpr = detail::masked_mean(
          probs, detail::indicator<Scalar>(n, [&](std::size_t i) { return groups[i] == g && labels[i] == 1; }),
          c.first);
    if (c.second > 0)
      r.fpr = detail::masked_mean(
          probs, detail::indicator<Scalar>(n, [&](std::size_t i) { return groups[i] == g && labels[i] == 0; }),
          c.second);
    per_group.emplace(g, r);
  }

  std::vector<Var<Scalar>> pair_gaps;
  for (auto a = per_group.begin(); a != per_group.end(); ++a) {
    for (auto b = std::next(a); b != per_group.end(); ++b) {
      std::vector<Var<Scalar>> terms;
      if (a->second.tpr && b->second.tpr) terms.push_back(abs(*a->second.tpr - *b->second.tpr));
      if (a->second.fpr && b->second.fpr) terms.push_back(abs(*a->second.fpr - *b->second.fpr));
      if (terms.empty()) continue;
      Var<Scalar> s = terms[0];
      for (std::size_t k = 1; k < terms.size(); ++k) s = s + terms[k];
      pair_gaps.push_back(scale(s, Scalar(1) / static_cast<Scalar>(terms.size())));
    }
  }
  if (pair_gaps.empty()) return {tape.constant(Scalar(0)), true};
  Var<Scalar> total = pair_gaps[0];
  for (std::size_t k = 1; k < pair_gaps.size(); ++k) total = total + pair_gaps[k];
  return {scale(total, Scalar(1) / static_cast<Scalar>(pair_gaps.size())), false};
}

/// max(0, m - (mean p over positives - mean p over negatives)).
template <typename Scalar>
LossTerm<Scalar> margin_loss(Var<Scalar> probs, std::span<const int> labels, double margin_m) {
  detail::check_lengths(probs, labels.size(), "margin_loss");
  const auto n = labels.size();
  int pos = 0;
  for (int y : labels) pos += y ? 1 : 0;
  const int neg = static_cast<int>(n) - pos;
  if (pos == 0 || neg == 0) return {probs.tape->constant(Scalar(0)), true};
  auto zp = detail::masked_mean(probs, detail::indicator<Scalar>(n, [&](std::size_t i) { return labels[i] == 1; }), pos);
  auto zn = detail::masked_mean(probs, detail::indicator<Scalar>(n, [&](std::size_t i) { return labels[i] == 0; }), neg);
  return {max_with(add_scalar(-(zp - zn), static_cast<Scalar>(margin_m)), Scalar(0)), false};
}

/// bce + gamma * eodd + alpha * margin + lambda_smooth * smooth on one batch.
/// Terms with zero weight are not built.
template <typename Scalar>
InnerLoss<Scalar> inner_loss(Var<Scalar> probs, std::span<const int> labels, std::span<const int> groups,
                             const LossWeights& w) {
  InnerLoss<Scalar> out;
  out.total = bce_loss(probs, labels);
  if (w.gamma > 0) {
    auto e = eodd_loss(probs, labels, groups);
    out.eodd_degenerate = e.degenerate;
    out.total = out.total + scale(e.value, static_cast<Scalar>(w.gamma));
  }
  if (w.alpha > 0) {
    auto m = margin_loss(probs, labels, w.margin_m);
    out.margin_degenerate = m.degenerate;
    out.total = out.total + scale(m.value, static_cast<Scalar>(w.alpha));
  }
  if (w.lambda_smooth > 0) {
    out.total = out.total + scale(smooth_loss(probs, labels, w.smooth_amount), static_cast<Scalar>(w.lambda_smooth));
  }
  return out;
}

}  // namespace fairm2s
