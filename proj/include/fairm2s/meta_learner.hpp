#pragma once
// Fairness-aware first-order meta-learning.
//
// One meta-iteration, per task:
//   1. adapt theta -> phi with a few gradient steps on the support-set
//      objective (BCE + equalized-odds surrogate + margin + smoothed BCE);
//   2. at phi, take the query-loss gradient g and per-group gradients g^(k),
//      and the disparity direction d = sum_{i<j} (g^(i) - g^(j));
//   3. mask g elementwise with a tanh-bounded adversary: g_adv = m * g;
//   4. project out the disparity direction:
//        g_fair = g_adv - <g_adv, d> / (|d|^2 + eps) * d.
// The task-averaged g_fair drives the outer optimizer (Adam or plain SGD).
// Gradients at phi stand in for gradients at theta (first-order).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "fairm2s/autodiff.hpp"
#include "fairm2s/backbone.hpp"
#include "fairm2s/data.hpp"
#include "fairm2s/metrics.hpp"
#include "fairm2s/objectives.hpp"
#include "fairm2s/param_set.hpp"
#include "fairm2s/random.hpp"

namespace fairm2s {

enum class OuterOptimizer { adam, sgd };

struct MetaConfig {
  double eta_inner = 1e-3;
  double beta_meta = 1e-3;
  int inner_steps = 3;
  int tasks_per_batch = 32;
  int epochs = 50;
  int shots = 5;
  int query_size = 15;
  LossWeights weights;
  double epsilon_proj = 1e-8;

  bool use_agm = true;
  bool use_fcgp = true;
  bool use_eodd = true;
  bool use_margin = true;
  bool use_smooth = true;

  std::uint64_t seed = 0;
  bool first_order = true;

  OuterOptimizer optimizer = OuterOptimizer::adam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  int adv_hidden = 8;
  double adv_rate = 1e-3;
  double lambda_keep = 1.0;
  double adv_output_bias = 2.0;

  int n_groups = 2;
  int threads = 1;

  /// Loss weights with ablated terms zeroed.
  LossWeights effective_weights() const {
    LossWeights w = weights;
    if (!use_eodd) w.gamma = 0;
    if (!use_margin) w.alpha = 0;
    if (!use_smooth) w.lambda_smooth = 0;
    return w;
  }

  void validate() const {
    if (!(eta_inner >= 0)) throw ConfigError("meta: eta_inner must be >= 0");
    if (!(beta_meta >= 0)) throw ConfigError("meta: beta_meta must be >= 0");
    if (inner_steps < 0) throw ConfigError("meta: inner_steps must be >= 0");
    if (tasks_per_batch < 1) throw ConfigError("meta: tasks_per_batch must be >= 1");
    if (epochs < 0) throw ConfigError("meta: epochs must be >= 0");
    if (shots < 1) throw ConfigError("meta: shots must be >= 1");
    if (query_size < 1) throw ConfigError("meta: query_size must be >= 1");
    if (!(epsilon_proj > 0)) throw ConfigError("meta: epsilon_proj must be > 0");
    if (!first_order) throw ConfigError("meta: only first-order meta-gradients are supported");
    if (adv_hidden < 1) throw ConfigError("meta: adv_hidden must be >= 1");
    if (!(adv_rate >= 0)) throw ConfigError("meta: adv_rate must be >= 0");
    if (!(lambda_keep >= 0)) throw ConfigError("meta: lambda_keep must be >= 0");
    if (n_groups < 2) throw ConfigError("meta: n_groups must be >= 2");
    if (threads < 1) throw ConfigError("meta: threads must be >= 1");
    weights.validate();
  }
};

// ---------------------------------------------------------------------------
// Episodes

/// Indices into a participant pool.
struct EpisodeTask {
  std::vector<std::size_t> support;
  std::vector<std::size_t> query;
  std::uint64_t seed = 0;  // dropout seed for inner-loop passes
};

template <typename Scalar>
struct Batch {
  std::vector<Tensor<Scalar>> x;
  std::vector<int> labels;
  std::vector<int> groups;

  std::size_t size() const { return x.size(); }
};

template <typename Scalar>
Batch<Scalar> gather(const std::vector<ParticipantRecord>& pool, std::span<const std::size_t> idx) {
  Batch<Scalar> b;
  b.x.reserve(idx.size());
  for (auto i : idx) {
    const auto& r = pool.at(i);
    b.x.push_back(r.features.template cast<Scalar>());
    b.labels.push_back(r.label);
    b.groups.push_back(r.group);
  }
  return b;
}

/// Class-stratified few-shot task: `shots` per class in the support set, then
/// `query_size` from the remainder split as evenly across classes as the pool allows.
inline EpisodeTask sample_task(const std::vector<ParticipantRecord>& pool, int shots, int query_size,
                               std::mt19937_64& rng) {
  std::vector<std::size_t> by_class[2];
  for (std::size_t i = 0; i < pool.size(); ++i) by_class[pool[i].label ? 1 : 0].push_back(i);
  for (int c = 0; c < 2; ++c) {
    if (static_cast<int>(by_class[c].size()) < shots)
      throw DataError("insufficient pool: class " + std::to_string(c) + " has " + std::to_string(by_class[c].size()) +
                      " participants, need " + std::to_string(shots) + " for the support set");
  }
  const auto rest = pool.size() - 2 * static_cast<std::size_t>(shots);
  if (rest < static_cast<std::size_t>(query_size))
    throw DataError("insufficient pool: " + std::to_string(rest) + " participants left for a query set of " +
                    std::to_string(query_size));

  for (auto& v : by_class) std::shuffle(v.begin(), v.end(), rng);
  EpisodeTask t;
  for (int c = 0; c < 2; ++c)
    for (int k = 0; k < shots; ++k) t.support.push_back(by_class[c][static_cast<std::size_t>(k)]);

  const int left[2] = {static_cast<int>(by_class[0].size()) - shots, static_cast<int>(by_class[1].size()) - shots};
  int want_pos = query_size / 2;
  if (query_size % 2 == 1 && std::bernoulli_distribution(0.5)(rng)) ++want_pos;
  int q_pos = std::min(left[1], want_pos);
  int q_neg = std::min(left[0], query_size - q_pos);
  q_pos = std::min(left[1], query_size - q_neg);
  for (int k = 0; k < q_neg; ++k) t.query.push_back(by_class[0][static_cast<std::size_t>(shots + k)]);
  for (int k = 0; k < q_pos; ++k) t.query.push_back(by_class[1][static_cast<std::size_t>(shots + k)]);
  std::shuffle(t.query.begin(), t.query.end(), rng);
  t.seed = rng();
  return t;
}

// ---------------------------------------------------------------------------
// Inner loop

template <typename Scalar>
struct AdaptResult {
  ParamSet<Scalar> phi;
  std::vector<double> losses;  // support objective before each step
  bool eodd_degenerate = false;
  bool margin_degenerate = false;
};

/// `inner_steps` full-batch gradient-descent steps on the support objective,
/// dropout active. theta is not modified.
template <typename Scalar>
AdaptResult<Scalar> inner_adapt(const ParamSet<Scalar>& theta, const BackboneConfig& bb, const Batch<Scalar>& support,
                                const MetaConfig& cfg, std::uint64_t seed) {
  if (support.size() == 0) throw std::invalid_argument("inner_adapt: empty support set");
  AdaptResult<Scalar> r{theta, {}, false, false};
  const auto w = cfg.effective_weights();
  for (int s = 0; s < cfg.inner_steps; ++s) {
    Tape<Scalar> tape;
    const auto leaves = register_leaves(tape, r.phi);
    const auto vars = BackboneVars<Scalar>::bind(leaves);
    auto probs = forward_batch(tape, vars, bb, std::span<const Tensor<Scalar>>(support.x), Mode::train,
                               mix_seed(seed, static_cast<std::uint64_t>(s)));
    auto loss = inner_loss(probs, std::span<const int>(support.labels), std::span<const int>(support.groups), w);
    r.eodd_degenerate = r.eodd_degenerate || loss.eodd_degenerate;
    r.margin_degenerate = r.margin_degenerate || loss.margin_degenerate;
    r.losses.push_back(static_cast<double>(loss.total.item()));
    if (cfg.eta_inner == 0) continue;
    const auto grads = tape.backward(loss.total);
    const auto eta = static_cast<Scalar>(cfg.eta_inner);
    for (std::size_t k = 0; k < leaves.size(); ++k) r.phi.tensor(k) -= eta * grads[leaves[k]];
  }
  return r;
}

// ---------------------------------------------------------------------------
// Group gradients

template <typename Scalar>
struct GradientBundle {
  Vector<Scalar> g_full;
  std::vector<Vector<Scalar>> g_group;  // zero for groups absent from the query
  std::vector<bool> present;
  Vector<Scalar> d_disparity;
  double query_loss = 0;
};

/// sum over present pairs i < j of (g_i - g_j).
template <typename Scalar>
Vector<Scalar> disparity_direction(const std::vector<Vector<Scalar>>& g_group, const std::vector<bool>& present,
                                   Eigen::Index n) {
  Vector<Scalar> d = Vector<Scalar>::Zero(n);
  for (std::size_t i = 0; i < g_group.size(); ++i) {
    if (!present[i]) continue;
    for (std::size_t j = i + 1; j < g_group.size(); ++j) {
      if (!present[j]) continue;
      d += g_group[i] - g_group[j];
    }
  }
  return d;
}

/// Query-loss gradient and per-group gradients at phi (eval mode).
template <typename Scalar>
GradientBundle<Scalar> group_gradients(const ParamSet<Scalar>& phi, const BackboneConfig& bb,
                                       const Batch<Scalar>& query, int n_groups) {
  if (query.size() == 0) throw std::invalid_argument("group_gradients: empty query set");
  Tape<Scalar> tape;
  const auto leaves = register_leaves(tape, phi);
  const auto vars = BackboneVars<Scalar>::bind(leaves);
  auto probs = forward_batch(tape, vars, bb, std::span<const Tensor<Scalar>>(query.x), Mode::eval, 0);
  const auto targets = smoothed_targets<Scalar>(query.labels, 0.0);
  auto per_item = bce_per_item(probs, std::span<const Scalar>(targets));
  auto lq = mean(per_item);

  GradientBundle<Scalar> b;
  b.query_loss = static_cast<double>(lq.item());
  b.g_full = flat_gradient(tape.backward(lq), leaves);
  const auto n = b.g_full.size();
  b.g_group.assign(static_cast<std::size_t>(n_groups), Vector<Scalar>::Zero(n));
  b.present.assign(static_cast<std::size_t>(n_groups), false);
  for (int g = 0; g < n_groups; ++g) {
    int count = 0;
    Tensor<Scalar> w = Tensor<Scalar>::Zero(static_cast<Eigen::Index>(query.size()), 1);
    for (std::size_t i = 0; i < query.size(); ++i) {
      if (query.groups[i] == g) {
        w(static_cast<Eigen::Index>(i), 0) = Scalar(1);
        ++count;
      }
    }
    if (count == 0) continue;
    auto lg = scale(dot(per_item, tape.constant(std::move(w))), Scalar(1) / static_cast<Scalar>(count));
    b.g_group[static_cast<std::size_t>(g)] = flat_gradient(tape.backward(lg), leaves);
    b.present[static_cast<std::size_t>(g)] = true;
  }
  b.d_disparity = disparity_direction(b.g_group, b.present, n);
  return b;
}

// ---------------------------------------------------------------------------
// Adversarial gradient masking

/// Elementwise network shared over coordinates: 3 -> hidden (tanh) -> 1 (tanh).
template <typename Scalar>
struct AdversaryParams {
  ParamSet<Scalar> params;  // adv.w1 (3 x h), adv.b1 (1 x h), adv.w2 (h x 1), adv.b2 (1 x 1)
  friend bool operator==(const AdversaryParams&, const AdversaryParams&) = default;
};

template <typename Scalar>
AdversaryParams<Scalar> init_adversary(int hidden, double output_bias, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto weight = [&](int fan_in, int fan_out) {
    const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-s, s);
    Tensor<Scalar> w(fan_in, fan_out);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<Scalar>(dist(rng));
    return w;
  };
  AdversaryParams<Scalar> a;
  a.params.add("adv.w1", weight(3, hidden));
  a.params.add("adv.b1", Tensor<Scalar>::Zero(1, hidden));
  a.params.add("adv.w2", weight(hidden, 1));
  a.params.add("adv.b2", Tensor<Scalar>::Constant(1, 1, static_cast<Scalar>(output_bias)));
  return a;
}

/// Groups whose gradient difference has the largest norm (first on ties).
/// With a single present group the second index is -1.
template <typename Scalar>
std::pair<int, int> mask_input_groups(const GradientBundle<Scalar>& b) {
  std::vector<int> present;
  for (std::size_t g = 0; g < b.present.size(); ++g)
    if (b.present[g]) present.push_back(static_cast<int>(g));
  if (present.empty()) return {-1, -1};
  if (present.size() == 1) return {present[0], -1};
  std::pair<int, int> best{present[0], present[1]};
  Scalar best_norm = -1;
  for (std::size_t i = 0; i < present.size(); ++i) {
    for (std::size_t j = i + 1; j < present.size(); ++j) {
      const Scalar nrm = (b.g_group[static_cast<std::size_t>(present[i])] - b.g_group[static_cast<std::size_t>(present[j])]).norm();
      if (nrm > best_norm) {
        best_norm = nrm;
        best = {present[i], present[j]};
      }
    }
  }
  return best;
}

/// N x 3 adversary input (g_i, g^(a)_i, g^(b)_i), divided by the RMS of g so
/// the network sees unit-scale values regardless of the gradient magnitude.
template <typename Scalar>
Tensor<Scalar> mask_features(const GradientBundle<Scalar>& b) {
  const auto n = b.g_full.size();
  Tensor<Scalar> x = Tensor<Scalar>::Zero(n, 3);
  x.col(0) = b.g_full;
  const auto [ga, gb] = mask_input_groups(b);
  if (ga >= 0) x.col(1) = b.g_group[static_cast<std::size_t>(ga)];
  if (gb >= 0) x.col(2) = b.g_group[static_cast<std::size_t>(gb)];
  const Scalar rms = n > 0 ? b.g_full.norm() / std::sqrt(static_cast<Scalar>(n)) : Scalar(0);
  if (rms > Scalar(0) && std::isfinite(rms)) x /= rms;
  return x;
}

/// Mask on the tape; adversary params are `leaves` (bound to adv.params order).
template <typename Scalar>
Var<Scalar> mask_on_tape(Tape<Scalar>& tape, const std::vector<Var<Scalar>>& leaves, Tensor<Scalar> features) {
  auto x = tape.constant(std::move(features));
  auto hidden = tanh(add_row(matmul(x, leaves[0]), leaves[1]));
  auto out = tanh(add_row(matmul(hidden, leaves[2]), leaves[3]));
  // tanh can round to +-1 in finite precision; keep the mask strictly inside.
  const Scalar lim = std::nextafter(Scalar(1), Scalar(0));
  return clamp(out, -lim, lim);
}

template <typename Scalar>
Vector<Scalar> mask_values(const AdversaryParams<Scalar>& adv, const GradientBundle<Scalar>& b) {
  Tape<Scalar> tape;
  std::vector<Var<Scalar>> consts;
  for (const auto& [_, t] : adv.params) consts.push_back(tape.constant(t));
  return mask_on_tape(tape, consts, mask_features(b)).value().col(0);
}

template <typename Scalar>
struct MaskResult {
  Vector<Scalar> g_adv;
  Vector<Scalar> mask;
};

template <typename Scalar>
MaskResult<Scalar> mask_gradient(const AdversaryParams<Scalar>& adv, const GradientBundle<Scalar>& b, bool use_agm) {
  const auto n = b.g_full.size();
  for (const auto& g : b.g_group)
    if (g.size() != n) throw ShapeError("mask_gradient: group gradient length differs from g_full");
  if (b.d_disparity.size() != n) throw ShapeError("mask_gradient: disparity length differs from g_full");
  if (!use_agm) return {b.g_full, Vector<Scalar>::Ones(n)};
  MaskResult<Scalar> r;
  r.mask = mask_values(adv, b);
  r.g_adv = r.mask.cwiseProduct(b.g_full);
  return r;
}

// ---------------------------------------------------------------------------
// Fairness-constrained projection

template <typename Scalar>
Vector<Scalar> project_gradient(const Vector<Scalar>& g_adv, const Vector<Scalar>& d, double epsilon, bool use_fcgp = true) {
  if (g_adv.size() != d.size()) throw ShapeError("project_gradient: length mismatch");
  if (!use_fcgp) return g_adv;
  const Scalar coef = g_adv.dot(d) / (d.squaredNorm() + static_cast<Scalar>(epsilon));
  return g_adv - coef * d;
}

/// (<g_adv, d>)^2 / (|d|^2 |g|^2 + eps) + lambda_keep (1 - |g_adv|^2 / (|g|^2 + eps))^2,
/// one gradient step on the adversary only. Returns the loss before the step.
template <typename Scalar>
double update_adversary(AdversaryParams<Scalar>& adv, const GradientBundle<Scalar>& b, double rate,
                        double lambda_keep, double epsilon) {
  Tape<Scalar> tape;
  const auto leaves = register_leaves(tape, adv.params);
  auto m = mask_on_tape(tape, leaves, mask_features(b));
  auto g = tape.constant(Tensor<Scalar>(b.g_full));
  auto d = tape.constant(Tensor<Scalar>(b.d_disparity));
  auto g_adv = mul(m, g);
  const auto eps = static_cast<Scalar>(epsilon);
  const Scalar g2 = b.g_full.squaredNorm();
  const Scalar d2 = b.d_disparity.squaredNorm();

  auto ad = dot(g_adv, d);
  auto ortho = scale(mul(ad, ad), Scalar(1) / (d2 * g2 + eps));
  auto kept = add_scalar(scale(dot(g_adv, g_adv), Scalar(-1) / (g2 + eps)), Scalar(1));
  auto loss = ortho + scale(mul(kept, kept), static_cast<Scalar>(lambda_keep));
  const double value = static_cast<double>(loss.item());
  if (!std::isfinite(value)) throw NumericError("update_adversary: non-finite adversary loss");
  if (rate > 0) {
    const auto grads = tape.backward(loss);
    for (std::size_t k = 0; k < leaves.size(); ++k) adv.params.tensor(k) -= static_cast<Scalar>(rate) * grads[leaves[k]];
  }
  return value;
}

// ---------------------------------------------------------------------------
// Outer loop

template <typename Scalar>
struct OuterOptimizerState {
  Vector<Scalar> m, v;
  long step = 0;

  /// In-place update of `theta` against gradient `g`.
  void apply(Vector<Scalar>& theta, const Vector<Scalar>& g, const MetaConfig& cfg) {
    const auto lr = static_cast<Scalar>(cfg.beta_meta);
    if (cfg.optimizer == OuterOptimizer::sgd) {
      theta -= lr * g;
      return;
    }
    if (m.size() != g.size()) {
      m = Vector<Scalar>::Zero(g.size());
      v = Vector<Scalar>::Zero(g.size());
    }
    ++step;
    const auto b1 = static_cast<Scalar>(cfg.adam_beta1);
    const auto b2 = static_cast<Scalar>(cfg.adam_beta2);
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g.cwiseProduct(g);
    const Scalar c1 = Scalar(1) - static_cast<Scalar>(std::pow(cfg.adam_beta1, static_cast<double>(step)));
    const Scalar c2 = Scalar(1) - static_cast<Scalar>(std::pow(cfg.adam_beta2, static_cast<double>(step)));
    const auto eps = static_cast<Scalar>(cfg.adam_eps);
    theta.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
};

template <typename Scalar>
struct MetaState {
  ParamSet<Scalar> theta;
  AdversaryParams<Scalar> adversary;
  OuterOptimizerState<Scalar> optimizer;
};

template <typename Scalar>
MetaState<Scalar> init_meta_state(const BackboneConfig& bb, const MetaConfig& cfg) {
  return {init_params<Scalar>(bb, mix_seed(cfg.seed, 1)), init_adversary<Scalar>(cfg.adv_hidden, cfg.adv_output_bias, mix_seed(cfg.seed, 2)), {}};
}

struct StepDiagnostics {
  double mean_query_loss = 0;
  double mean_fair_dot = 0;      // mean <g_fair, d>
  double mean_abs_fair_dot = 0;  // mean |<g_fair, d>|
  double mask_mean = 1;
  double mask_std = 0;
  double adversary_loss = 0;
  int tasks_ok = 0;
  int tasks_failed = 0;
  std::vector<std::string> failures;
};

template <typename Scalar>
struct TaskOutcome {
  bool ok = false;
  std::string error;
  GradientBundle<Scalar> bundle;
  Vector<Scalar> mask;
  Vector<Scalar> g_fair;
};

template <typename Scalar>
TaskOutcome<Scalar> run_task(const ParamSet<Scalar>& theta, const AdversaryParams<Scalar>& adv, const BackboneConfig& bb,
                             const std::vector<ParticipantRecord>& pool, const EpisodeTask& task, const MetaConfig& cfg) {
  TaskOutcome<Scalar> out;
  try {
    const auto support = gather<Scalar>(pool, task.support);
    const auto query = gather<Scalar>(pool, task.query);
    const auto adapted = inner_adapt(theta, bb, support, cfg, task.seed);
    out.bundle = group_gradients(adapted.phi, bb, query, cfg.n_groups);
    auto masked = mask_gradient(adv, out.bundle, cfg.use_agm);
    out.mask = std::move(masked.mask);
    out.g_fair = project_gradient(masked.g_adv, out.bundle.d_disparity, cfg.epsilon_proj, cfg.use_fcgp);
    if (!out.g_fair.allFinite()) throw NumericError("non-finite meta-gradient");
    out.ok = true;
  } catch (const std::exception& e) {
    out.error = e.what();
  }
  return out;
}

namespace detail {

/// Runs fn(i) for i in [0, n) on up to `threads` workers; results are indexed, so
/// the caller's reduction order does not depend on scheduling.
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) fn(i);
    });
  for (auto& t : pool) t.join();
}

}  // namespace detail

/// One meta-iteration over `tasks`. Failed tasks are skipped; throws only if all fail.
template <typename Scalar>
StepDiagnostics meta_step(MetaState<Scalar>& state, const BackboneConfig& bb, const std::vector<ParticipantRecord>& pool,
                          std::span<const EpisodeTask> tasks, const MetaConfig& cfg) {
  if (tasks.empty()) throw std::invalid_argument("meta_step: empty task batch");
  std::vector<TaskOutcome<Scalar>> outcomes(tasks.size());
  detail::parallel_for(tasks.size(), cfg.threads,
                       [&](std::size_t i) { outcomes[i] = run_task(state.theta, state.adversary, bb, pool, tasks[i], cfg); });

  StepDiagnostics diag;
  const auto n = state.theta.total_size();
  Vector<Scalar> g_sum = Vector<Scalar>::Zero(n);
  GradientBundle<Scalar> avg;
  avg.g_full = Vector<Scalar>::Zero(n);
  avg.d_disparity = Vector<Scalar>::Zero(n);
  avg.g_group.assign(static_cast<std::size_t>(cfg.n_groups), Vector<Scalar>::Zero(n));
  avg.present.assign(static_cast<std::size_t>(cfg.n_groups), false);
  double mask_sum = 0, mask_sq = 0, mask_count = 0;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    const auto& o = outcomes[i];
    if (!o.ok) {
      ++diag.tasks_failed;
      diag.failures.push_back("task " + std::to_string(i) + ": " + o.error);
      continue;
    }
    ++diag.tasks_ok;
    g_sum += o.g_fair;
    avg.g_full += o.bundle.g_full;
    avg.d_disparity += o.bundle.d_disparity;
    for (std::size_t g = 0; g < avg.g_group.size(); ++g) {
      avg.g_group[g] += o.bundle.g_group[g];
      if (o.bundle.present[g]) avg.present[g] = true;
    }
    const double fd = static_cast<double>(o.g_fair.dot(o.bundle.d_disparity));
    diag.mean_query_loss += o.bundle.query_loss;
    diag.mean_fair_dot += fd;
    diag.mean_abs_fair_dot += std::abs(fd);
    mask_sum += o.mask.template cast<double>().sum();
    mask_sq += o.mask.template cast<double>().squaredNorm();
    mask_count += static_cast<double>(o.mask.size());
  }
  if (diag.tasks_ok == 0) throw NumericError("meta_step: every task in the batch failed");

  const auto k = static_cast<Scalar>(diag.tasks_ok);
  diag.mean_query_loss /= diag.tasks_ok;
  diag.mean_fair_dot /= diag.tasks_ok;
  diag.mean_abs_fair_dot /= diag.tasks_ok;
  diag.mask_mean = mask_sum / mask_count;
  diag.mask_std = std::sqrt(std::max(0.0, mask_sq / mask_count - diag.mask_mean * diag.mask_mean));

  avg.g_full /= k;
  avg.d_disparity /= k;
  for (auto& g : avg.g_group) g /= k;
  const Vector<Scalar> g_meta = g_sum / k;

  if (cfg.use_agm) {
    diag.adversary_loss = update_adversary(state.adversary, avg, cfg.adv_rate, cfg.lambda_keep, cfg.epsilon_proj);
  }
  Vector<Scalar> flat = flatten(state.theta);
  state.optimizer.apply(flat, g_meta, cfg);
  state.theta = unflatten<Scalar>(flat, state.theta);
  return diag;
}

/// Retries sampling up to 10 times; nullopt if every attempt failed.
inline std::optional<EpisodeTask> sample_task_retry(const std::vector<ParticipantRecord>& pool, int shots, int query_size,
                                                    std::mt19937_64& rng, std::string* error = nullptr) {
  for (int attempt = 0; attempt < 10; ++attempt) {
    try {
      return sample_task(pool, shots, query_size, rng);
    } catch (const std::exception& e) {
      if (error) *error = e.what();
    }
  }
  return std::nullopt;
}

struct EpochLog {
  int epoch = 0;
  int iterations = 0;
  double mean_query_loss = 0;
  double mean_fair_dot = 0;
  double mean_abs_fair_dot = 0;
  double mask_mean = 1;
  double mask_std = 0;
  double adversary_loss = 0;
  int tasks_failed = 0;
  std::optional<AggregateReport> eval;  // snapshot, when requested
};

template <typename Scalar>
struct TrainResult {
  MetaState<Scalar> state;
  std::vector<EpochLog> log;
};

/// Meta-iterations per epoch: pool size over participants consumed per batch, at least 1.
inline int iterations_per_epoch(std::size_t pool_size, const MetaConfig& cfg) {
  const auto per_batch = static_cast<std::size_t>(cfg.tasks_per_batch) * static_cast<std::size_t>(2 * cfg.shots + cfg.query_size);
  return std::max(1, static_cast<int>(pool_size / per_batch));
}

template <typename Scalar>
struct TrainHooks {
  std::function<void(const EpochLog&)> on_epoch;
  /// Called every `eval_every` epochs to fill EpochLog::eval.
  std::function<AggregateReport(int epoch, const MetaState<Scalar>&)> snapshot;
  int eval_every = 0;
};

template <typename Scalar>
TrainResult<Scalar> train(const std::vector<ParticipantRecord>& pool, const BackboneConfig& bb, const MetaConfig& cfg,
                          const TrainHooks<Scalar>& hooks = {}, std::optional<MetaState<Scalar>> initial = std::nullopt);

// ---------------------------------------------------------------------------
// Evaluation

template <typename Scalar>
struct EvalResult {
  AggregateReport summary;
  std::vector<FairnessReport> per_task;
};

/// Produces query probabilities for a task.
using TaskPredictor = std::function<std::vector<double>(const EpisodeTask&)>;

/// Samples `n_tasks` tasks from `pool` with `seed`, thresholds predictions at 0.5
/// and aggregates per-task metrics.
inline std::vector<FairnessReport> evaluate_tasks(const std::vector<ParticipantRecord>& pool, int shots, int query_size,
                                                  int n_tasks, std::uint64_t seed, int n_groups, int threads,
                                                  const TaskPredictor& predict) {
  if (n_tasks < 1) throw ConfigError("evaluate: n_tasks must be >= 1");
  std::mt19937_64 rng(seed);
  std::vector<EpisodeTask> tasks;
  tasks.reserve(static_cast<std::size_t>(n_tasks));
  for (int t = 0; t < n_tasks; ++t) tasks.push_back(sample_task(pool, shots, query_size, rng));
  std::vector<FairnessReport> reports(tasks.size());
  detail::parallel_for(tasks.size(), threads, [&](std::size_t i) {
    const auto probs = predict(tasks[i]);
    std::vector<int> labels, groups;
    for (auto q : tasks[i].query) {
      labels.push_back(pool[q].label);
      groups.push_back(pool[q].group);
    }
    const auto preds = threshold_predictions(probs);
    reports[i] = fairness_report(preds, labels, groups, n_groups);
  });
  return reports;
}

/// Adapts theta on each test task's support set (same objective as training),
/// then scores the query set in eval mode.
template <typename Scalar>
EvalResult<Scalar> evaluate(const ParamSet<Scalar>& theta, const BackboneConfig& bb, const std::vector<ParticipantRecord>& pool,
                            const MetaConfig& cfg, int shots, int n_tasks, std::uint64_t seed) {
  auto predict = [&](const EpisodeTask& task) {
    const auto support = gather<Scalar>(pool, task.support);
    const auto query = gather<Scalar>(pool, task.query);
    const auto phi = inner_adapt(theta, bb, support, cfg, task.seed).phi;
    const Vector<Scalar> p = forward_batch(phi, bb, std::span<const Tensor<Scalar>>(query.x), Mode::eval, 0);
    return std::vector<double>(p.data(), p.data() + p.size());
  };
  EvalResult<Scalar> r;
  r.per_task = evaluate_tasks(pool, shots, cfg.query_size, n_tasks, seed, cfg.n_groups, cfg.threads, predict);
  r.summary = aggregate(r.per_task);
  return r;
}

template <typename Scalar>
TrainResult<Scalar> train(const std::vector<ParticipantRecord>& pool, const BackboneConfig& bb, const MetaConfig& cfg,
                          const TrainHooks<Scalar>& hooks, std::optional<MetaState<Scalar>> initial) {
  cfg.validate();
  bb.validate();
  TrainResult<Scalar> result{initial ? std::move(*initial) : init_meta_state<Scalar>(bb, cfg), {}};
  if (cfg.epochs == 0) return result;

  std::mt19937_64 rng(mix_seed(cfg.seed, 3));
  const int iters = iterations_per_epoch(pool.size(), cfg);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochLog row;
    row.epoch = epoch;
    row.mask_mean = 0;
    for (int it = 0; it < iters; ++it) {
      std::vector<EpisodeTask> tasks;
      int skipped = 0;
      std::string why;
      for (int t = 0; t < cfg.tasks_per_batch; ++t) {
        if (auto task = sample_task_retry(pool, cfg.shots, cfg.query_size, rng, &why)) tasks.push_back(std::move(*task));
        else ++skipped;
      }
      if (tasks.empty()) throw DataError("train: could not sample any task: " + why);
      const auto d = meta_step(result.state, bb, pool, std::span<const EpisodeTask>(tasks), cfg);
      ++row.iterations;
      row.mean_query_loss += d.mean_query_loss;
      row.mean_fair_dot += d.mean_fair_dot;
      row.mean_abs_fair_dot += d.mean_abs_fair_dot;
      row.mask_mean += d.mask_mean;
      row.mask_std += d.mask_std;
      row.adversary_loss += d.adversary_loss;
      row.tasks_failed += d.tasks_failed + skipped;
    }
    const double k = row.iterations;
    row.mean_query_loss /= k;
    row.mean_fair_dot /= k;
    row.mean_abs_fair_dot /= k;
    row.mask_mean /= k;
    row.mask_std /= k;
    row.adversary_loss /= k;
    if (hooks.snapshot && hooks.eval_every > 0 && epoch % hooks.eval_every == 0) row.eval = hooks.snapshot(epoch, result.state);
    if (hooks.on_epoch) hooks.on_epoch(row);
    result.log.push_back(std::move(row));
  }
  return result;
}

}  // namespace fairm2s
