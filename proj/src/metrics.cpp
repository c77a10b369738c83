#include "fairm2s/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace fairm2s {

std::vector<int> threshold_predictions(std::span<const double> probs, double threshold) {
  std::vector<int> out(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) out[i] = probs[i] >= threshold ? 1 : 0;
  return out;
}

GroupConfusion confusion(std::span<const int> preds, std::span<const int> labels, std::span<const int> groups,
                         int n_groups) {
  if (preds.size() != labels.size() || preds.size() != groups.size())
    throw std::invalid_argument("confusion: preds, labels and groups differ in length");
  if (preds.empty()) throw std::invalid_argument("confusion: empty input");
  GroupConfusion c;
  c.groups.resize(static_cast<std::size_t>(n_groups));
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (groups[i] < 0 || groups[i] >= n_groups) throw std::invalid_argument("confusion: group id out of range");
    auto& g = c.groups[static_cast<std::size_t>(groups[i])];
    const bool p = preds[i] != 0;
    const bool y = labels[i] != 0;
    if (p && y) ++g.tp;
    else if (p && !y) ++g.fp;
    else if (!p && !y) ++g.tn;
    else ++g.fn;
  }
  return c;
}

double accuracy(const GroupConfusion& conf) {
  int correct = 0;
  int total = 0;
  for (const auto& g : conf.groups) {
    correct += g.tp + g.tn;
    total += g.size();
  }
  if (total == 0) throw std::invalid_argument("accuracy: empty confusion");
  return static_cast<double>(correct) / total;
}

double disparate_impact(const GroupConfusion& conf) {
  if (conf.groups.size() < 2) throw std::invalid_argument("disparate_impact: need at least two groups");
  double lo = 1.0;
  double hi = 0.0;
  for (std::size_t k = 0; k < conf.groups.size(); ++k) {
    const auto& g = conf.groups[k];
    if (g.size() == 0) throw std::invalid_argument("disparate_impact: group " + std::to_string(k) + " is empty");
    const double r = static_cast<double>(g.tp + g.fp) / g.size();
    lo = std::min(lo, r);
    hi = std::max(hi, r);
  }
  if (hi == 0.0) return 1.0;
  return lo / hi;
}

namespace {

// max - min over groups of num/den; nullopt if any denominator is zero.
std::optional<double> rate_spread(const GroupConfusion& conf, auto num, auto den) {
  if (conf.groups.size() < 2) return std::nullopt;
  double lo = 1.0;
  double hi = 0.0;
  for (const auto& g : conf.groups) {
    const int dd = den(g);
    if (dd == 0) return std::nullopt;
    const double r = static_cast<double>(num(g)) / dd;
    lo = std::min(lo, r);
    hi = std::max(hi, r);
  }
  return hi - lo;
}

std::optional<double> tpr_spread(const GroupConfusion& conf) {
  return rate_spread(conf, [](const GroupCounts& g) { return g.tp; }, [](const GroupCounts& g) { return g.positives(); });
}

std::optional<double> fpr_spread(const GroupConfusion& conf) {
  return rate_spread(conf, [](const GroupCounts& g) { return g.fp; }, [](const GroupCounts& g) { return g.negatives(); });
}

}  // namespace

std::optional<double> equal_opportunity(const GroupConfusion& conf) { return tpr_spread(conf); }

std::optional<double> equalized_odds_gap(const GroupConfusion& conf) {
  const auto dt = tpr_spread(conf);
  const auto df = fpr_spread(conf);
  if (!dt || !df) return std::nullopt;
  return 0.5 * (*dt + *df);
}

FairnessReport fairness_report(std::span<const int> preds, std::span<const int> labels, std::span<const int> groups,
                               int n_groups) {
  FairnessReport r;
  r.confusion = confusion(preds, labels, groups, n_groups);
  r.accuracy = accuracy(r.confusion);

  bool any_empty = false;
  for (const auto& g : r.confusion.groups) any_empty = any_empty || g.size() == 0;
  if (any_empty) {
    r.warnings.emplace_back("di undefined: a group has no samples");
  } else {
    r.di = disparate_impact(r.confusion);
  }
  r.eopp = equal_opportunity(r.confusion);
  if (!r.eopp) r.warnings.emplace_back("eopp undefined: a group has no positives");
  r.eodd = equalized_odds_gap(r.confusion);
  if (!r.eodd) r.warnings.emplace_back("eodd undefined: a group lacks positives or negatives");
  return r;
}

std::string to_text(const FairnessReport& report) {
  std::ostringstream os;
  auto opt = [&](const char* key, const std::optional<double>& v) {
    os << key << '=';
    if (v) os << *v;
    else os << "nan";
    os << '\n';
  };
  os << "accuracy=" << report.accuracy << '\n';
  opt("di", report.di);
  opt("eopp", report.eopp);
  opt("eodd", report.eodd);
  for (std::size_t g = 0; g < report.confusion.groups.size(); ++g) {
    const auto& c = report.confusion.groups[g];
    os << "group" << g << ".tp=" << c.tp << "\ngroup" << g << ".fp=" << c.fp << "\ngroup" << g << ".tn=" << c.tn
       << "\ngroup" << g << ".fn=" << c.fn << '\n';
  }
  for (const auto& w : report.warnings) os << "warning=" << w << '\n';
  return os.str();
}

MetricSummary summarize_values(std::span<const std::optional<double>> values) {
  MetricSummary s;
  double sum = 0;
  for (const auto& v : values) {
    if (v && std::isfinite(*v)) {
      sum += *v;
      ++s.count;
    } else {
      ++s.excluded;
    }
  }
  if (s.count == 0) {
    s.mean = std::nan("");
    s.std = std::nan("");
    return s;
  }
  s.mean = sum / s.count;
  double sq = 0;
  for (const auto& v : values)
    if (v && std::isfinite(*v)) sq += (*v - s.mean) * (*v - s.mean);
  s.std = std::sqrt(sq / s.count);
  return s;
}

AggregateReport aggregate(std::span<const FairnessReport> reports) {
  AggregateReport a;
  a.n_tasks = static_cast<int>(reports.size());
  std::vector<std::optional<double>> acc, di, eopp, eodd;
  for (const auto& r : reports) {
    acc.emplace_back(r.accuracy);
    di.push_back(r.di);
    eopp.push_back(r.eopp);
    eodd.push_back(r.eodd);
  }
  a.accuracy = summarize_values(acc);
  a.di = summarize_values(di);
  a.eopp = summarize_values(eopp);
  a.eodd = summarize_values(eodd);
  return a;
}

bool dominates(const ParetoPoint& a, const ParetoPoint& b) {
  return a.accuracy >= b.accuracy && a.eopp <= b.eopp && (a.accuracy > b.accuracy || a.eopp < b.eopp);
}

std::vector<ParetoPoint> pareto_frontier(std::span<const ParetoPoint> points) {
  // Sort by accuracy descending, then eopp ascending; a point is dominated iff
  // some earlier point (with a strictly better coordinate) beats it. A sweep
  // keeping the best eopp seen at strictly higher accuracy suffices.
  std::vector<std::size_t> order(points.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (points[a].accuracy != points[b].accuracy) return points[a].accuracy > points[b].accuracy;
    return points[a].eopp < points[b].eopp;
  });

  std::vector<char> keep(points.size(), 0);
  double best_eopp_higher = INFINITY;  // min eopp among strictly higher accuracy
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    const double acc = points[order[i]].accuracy;
    while (j < order.size() && points[order[j]].accuracy == acc) ++j;
    const double min_eopp_tie = points[order[i]].eopp;  // block sorted by eopp
    for (std::size_t k = i; k < j; ++k) {
      const double e = points[order[k]].eopp;
      keep[order[k]] = !(best_eopp_higher <= e) && !(min_eopp_tie < e);
    }
    best_eopp_higher = std::min(best_eopp_higher, min_eopp_tie);
    i = j;
  }

  std::vector<ParetoPoint> out;
  for (std::size_t k : order)
    if (keep[k]) out.push_back(points[k]);
  // Survivors within an accuracy tie share the same eopp, so the stable sort
  // above already left them in input order.
  return out;
}

}  // namespace fairm2s
