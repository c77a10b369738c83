#include "fairm2s/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "fairm2s/meta_learner.hpp"

namespace fairm2s {

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  // Shortest text that parses back to the same double.
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string short_num(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

using CellKey = std::tuple<std::string, int, std::uint64_t>;

double parse_metric(const std::string& s) {
  if (s == "nan" || s.empty()) return std::nan("");
  std::size_t pos = 0;
  const double v = std::stod(s, &pos);
  if (pos != s.size()) throw std::invalid_argument("bad number");
  return v;
}

}  // namespace

std::vector<GridPoint> expand_grid(const RunConfig& base) {
  std::vector<GridPoint> out;
  for (double g : base.experiment.gamma_grid) {
    for (double l : base.experiment.lambda_grid) {
      for (double a : base.experiment.alpha_grid) {
        GridPoint p;
        p.config = base;
        p.config.meta.weights.gamma = g;
        p.config.meta.weights.lambda_smooth = l;
        p.config.meta.weights.alpha = a;
        p.config_id = "g" + short_num(g) + "_l" + short_num(l) + "_a" + short_num(a);
        out.push_back(std::move(p));
      }
    }
  }
  return out;
}

RunConfig apply_ablation(RunConfig cfg, const std::string& arm) {
  if (arm == "All") return cfg;
  if (arm == "No_AGM") cfg.meta.use_agm = false;
  else if (arm == "No_Eodd") cfg.meta.use_eodd = false;
  else if (arm == "No_FCGP") cfg.meta.use_fcgp = false;
  else if (arm == "No_LS") cfg.meta.use_smooth = false;
  else if (arm == "No_M") cfg.meta.use_margin = false;
  else throw ConfigError("unknown ablation arm '" + arm + "'");
  return cfg;
}

std::vector<GridPoint> ablation_points(const RunConfig& base) {
  std::vector<GridPoint> out;
  for (const auto& arm : base.experiment.ablations) out.push_back({arm, apply_ablation(base, arm)});
  return out;
}

std::string to_csv_line(const ResultRow& r) {
  std::ostringstream os;
  std::string status = r.status;
  std::replace(status.begin(), status.end(), ',', ';');
  std::replace(status.begin(), status.end(), '\n', ' ');
  os << r.config_id << ',' << r.shot << ',' << r.seed << ',' << fmt(r.accuracy) << ',' << fmt(r.di) << ','
     << fmt(r.eopp) << ',' << fmt(r.eodd) << ',' << fmt(r.wall_time_s) << ',' << status;
  return os.str();
}

std::optional<ResultRow> parse_result_line(const std::string& raw, std::string* error) {
  std::string line = raw;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) cells.push_back(cell);
  if (cells.size() != 9) {
    if (error) *error = "expected 9 columns, got " + std::to_string(cells.size());
    return std::nullopt;
  }
  try {
    ResultRow r;
    r.config_id = cells[0];
    if (r.config_id.empty()) throw std::invalid_argument("empty config_id");
    std::size_t pos = 0;
    r.shot = std::stoi(cells[1], &pos);
    if (pos != cells[1].size()) throw std::invalid_argument("bad shot");
    r.seed = std::stoull(cells[2], &pos);
    if (pos != cells[2].size()) throw std::invalid_argument("bad seed");
    r.accuracy = parse_metric(cells[3]);
    r.di = parse_metric(cells[4]);
    r.eopp = parse_metric(cells[5]);
    r.eodd = parse_metric(cells[6]);
    r.wall_time_s = parse_metric(cells[7]);
    r.status = cells[8];
    return r;
  } catch (const std::exception& e) {
    if (error) *error = e.what();
    return std::nullopt;
  }
}

std::vector<ResultRow> read_results(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open results file " + path.string());
  std::vector<ResultRow> rows;
  std::vector<std::string> bad;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (lineno == 1 && line == kResultsHeader) continue;
    std::string err;
    if (auto r = parse_result_line(line, &err)) rows.push_back(std::move(*r));
    else bad.push_back("line " + std::to_string(lineno) + ": " + err);
  }
  if (!bad.empty()) {
    std::string msg = "malformed results file " + path.string() + ":\n";
    for (const auto& b : bad) msg += "  " + b + "\n";
    throw DataError(msg);
  }
  return rows;
}

void write_results(const std::filesystem::path& path, const std::vector<ResultRow>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write results file " + path.string());
  out << kResultsHeader << '\n';
  for (const auto& r : rows) out << to_csv_line(r) << '\n';
}

std::vector<ResultRow> run_grid(const std::vector<GridPoint>& points, const ExperimentSpec& spec,
                                const std::optional<std::filesystem::path>& results_path, const CellRunner& runner,
                                int threads) {
  std::map<CellKey, ResultRow> done;
  if (results_path && std::filesystem::exists(*results_path)) {
    for (auto& r : read_results(*results_path)) done.emplace(CellKey{r.config_id, r.shot, r.seed}, std::move(r));
  }

  std::ofstream out;
  if (results_path) {
    const bool fresh = !std::filesystem::exists(*results_path) || std::filesystem::file_size(*results_path) == 0;
    out.open(*results_path, std::ios::app);
    if (!out) throw DataError("cannot append to results file " + results_path->string());
    if (fresh) out << kResultsHeader << '\n' << std::flush;
  }

  struct Cell {
    const GridPoint* point;
    int shot;
    std::uint64_t seed;
  };
  std::vector<Cell> todo;
  std::vector<CellKey> order;
  std::set<CellKey> seen;
  for (const auto& p : points) {
    for (int shot : spec.shot_list) {
      for (auto seed : spec.seed_list) {
        CellKey key{p.config_id, shot, seed};
        if (!seen.insert(key).second) continue;
        order.push_back(key);
        if (!done.count(key)) todo.push_back({&p, shot, seed});
      }
    }
  }

  std::mutex mu;
  auto run_cell = [&](const Cell& c) {
    ResultRow row;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      row = runner(*c.point, c.shot, c.seed);
    } catch (const std::exception& e) {
      row = ResultRow{};
      row.accuracy = row.di = row.eopp = row.eodd = std::nan("");
      row.status = std::string("failed: ") + e.what();
    }
    row.config_id = c.point->config_id;
    row.shot = c.shot;
    row.seed = c.seed;
    row.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::lock_guard<std::mutex> lock(mu);
    if (out.is_open()) out << to_csv_line(row) << '\n' << std::flush;
    done.emplace(CellKey{row.config_id, row.shot, row.seed}, row);
  };
  detail::parallel_for(todo.size(), threads, [&](std::size_t i) { run_cell(todo[i]); });

  std::vector<ResultRow> rows;
  rows.reserve(order.size());
  for (const auto& k : order) rows.push_back(done.at(k));
  return rows;
}

PreparedData prepare_data(const Dataset& dataset, const DataConfig& data) {
  PreparedData p;
  p.header = dataset.header;
  p.pools = split_participants(dataset.records, data.test_fraction, data.split_seed);
  if (data.standardize) {
    p.standardizer = Standardizer::fit(p.pools.train);
    p.standardizer.apply(p.pools.train);
    p.standardizer.apply(p.pools.test);
  }
  return p;
}

Dataset synthetic_dataset(const RunConfig& cfg) {
  Dataset d;
  d.header = DatasetHeader::desk_scale();
  d.header.seq_len = cfg.backbone.seq_len;
  d.header.input_dim = cfg.backbone.input_dim;
  d.header.n_groups = cfg.meta.n_groups;
  d.records = generate_synthetic(cfg.data.synthetic_n, d.header, cfg.data.bias);
  d.header.n_participants = static_cast<int>(d.records.size());
  return d;
}

CellRunner make_training_runner(const Split& pools, int n_groups) {
  return [&pools, n_groups](const GridPoint& point, int shot, std::uint64_t seed) {
    RunConfig cfg = point.config;
    cfg.meta.seed = seed;
    cfg.meta.shots = shot;
    cfg.meta.n_groups = n_groups;
    cfg.meta.threads = 1;
    const auto trained = train<real>(pools.train, cfg.backbone, cfg.meta);
    const auto ev = evaluate<real>(trained.state.theta, cfg.backbone, pools.test, cfg.meta, shot,
                                   cfg.experiment.n_eval_tasks, cfg.experiment.eval_seed);
    ResultRow row;
    row.accuracy = ev.summary.accuracy.mean;
    row.di = ev.summary.di.mean;
    row.eopp = ev.summary.eopp.mean;
    row.eodd = ev.summary.eodd.mean;
    return row;
  };
}

std::vector<SummaryRow> summarize(const std::vector<ResultRow>& rows) {
  std::map<std::pair<int, std::string>, std::vector<const ResultRow*>> groups;
  for (const auto& r : rows) groups[{r.shot, r.config_id}].push_back(&r);

  std::vector<SummaryRow> out;
  for (const auto& [key, members] : groups) {
    SummaryRow s;
    s.shot = key.first;
    s.config_id = key.second;
    std::vector<std::optional<double>> acc, di, eopp, eodd;
    // Sort by seed so the summation order does not depend on row order.
    auto sorted = members;
    std::sort(sorted.begin(), sorted.end(), [](const ResultRow* a, const ResultRow* b) { return a->seed < b->seed; });
    for (const auto* r : sorted) {
      if (!r->ok()) continue;
      ++s.n_seeds;
      auto opt = [](double v) { return std::isnan(v) ? std::nullopt : std::optional<double>(v); };
      acc.push_back(opt(r->accuracy));
      di.push_back(opt(r->di));
      eopp.push_back(opt(r->eopp));
      eodd.push_back(opt(r->eodd));
    }
    s.accuracy = summarize_values(acc);
    s.di = summarize_values(di);
    s.eopp = summarize_values(eopp);
    s.eodd = summarize_values(eodd);
    out.push_back(std::move(s));
  }

  std::map<int, std::vector<std::size_t>> by_shot;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (!std::isnan(out[i].accuracy.mean) && !std::isnan(out[i].eopp.mean)) by_shot[out[i].shot].push_back(i);
  for (const auto& [_, idx] : by_shot) {
    std::vector<ParetoPoint> pts;
    for (auto i : idx) pts.push_back({out[i].accuracy.mean, out[i].eopp.mean, out[i].config_id});
    for (const auto& p : pareto_frontier(pts))
      for (auto i : idx)
        if (out[i].config_id == p.tag) out[i].non_dominated = true;
  }
  return out;
}

double median(std::vector<double> values) {
  values.erase(std::remove_if(values.begin(), values.end(), [](double v) { return !std::isfinite(v); }), values.end());
  if (values.empty()) return std::nan("");
  std::sort(values.begin(), values.end());
  const auto n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

}  // namespace fairm2s
