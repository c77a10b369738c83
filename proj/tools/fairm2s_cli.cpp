// fairm2s: dataset generation, training, evaluation, grids, ablations and
// Pareto export. Exit codes: 0 success, 2 validation error, 3 runtime error.

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "fairm2s/config.hpp"
#include "fairm2s/data.hpp"
#include "fairm2s/harness.hpp"
#include "fairm2s/meta_learner.hpp"
#include "fairm2s/metrics.hpp"
#include "fairm2s/model_io.hpp"

namespace fs = std::filesystem;
using namespace fairm2s;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitRuntime = 3;

struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

RunConfig resolve_config(const std::string& path, const std::vector<std::string>& overrides) {
  RunConfig cfg = path.empty() ? RunConfig{} : load_config(path);
  for (const auto& o : overrides) apply_override(cfg, o);
  cfg.validate();
  return cfg;
}

void print_summary(std::ostream& os, const std::vector<ParticipantRecord>& records, int n_groups) {
  const auto cells = count_cells(records, n_groups);
  os << "participants: " << records.size() << "\n";
  os << "group  negative  positive  total\n";
  for (std::size_t g = 0; g < cells.counts.size(); ++g) {
    const auto& c = cells.counts[g];
    os << std::setw(5) << g << std::setw(10) << c[0] << std::setw(10) << c[1] << std::setw(7) << c[0] + c[1] << "\n";
  }
}

std::string pm(const MetricSummary& s) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4);
  if (s.count == 0) os << "undefined";
  else os << s.mean << " +/- " << s.std;
  if (s.excluded > 0) os << "  (" << s.excluded << " tasks excluded)";
  return os.str();
}

nlohmann::json summary_json(const AggregateReport& r) {
  auto one = [](const MetricSummary& s) {
    nlohmann::json j;
    j["mean"] = s.count ? nlohmann::json(s.mean) : nlohmann::json(nullptr);
    j["std"] = s.count ? nlohmann::json(s.std) : nlohmann::json(nullptr);
    j["excluded"] = s.excluded;
    return j;
  };
  return {{"accuracy", one(r.accuracy)}, {"di", one(r.di)}, {"eopp", one(r.eopp)}, {"eodd", one(r.eodd)},
          {"n_tasks", r.n_tasks}};
}

/// Loads a manifest or, when none is given, builds the synthetic set from the config.
Dataset load_or_generate(const std::string& manifest, RunConfig& cfg) {
  Dataset ds = manifest.empty() ? synthetic_dataset(cfg) : load_dataset(manifest);
  cfg.backbone.seq_len = ds.header.seq_len;
  cfg.backbone.input_dim = ds.header.input_dim;
  cfg.meta.n_groups = ds.header.n_groups;
  return ds;
}

void check_header(const ModelFile& m, const DatasetHeader& h) {
  auto diff = [](const char* field, long model, long data) {
    throw ValidationError(std::string("model/data header mismatch in ") + field + ": model has " +
                          std::to_string(model) + ", data has " + std::to_string(data));
  };
  if (m.backbone.seq_len != h.seq_len) diff("seq_len (T)", m.backbone.seq_len, h.seq_len);
  if (m.backbone.input_dim != h.input_dim) diff("input_dim (d)", m.backbone.input_dim, h.input_dim);
  if (m.n_groups != h.n_groups) diff("n_groups", m.n_groups, h.n_groups);
}

// --- gen -------------------------------------------------------------------

struct GenArgs {
  std::string out;
  int n = 400, t = 20, d = 8;
  double delta = 0.8, ratio = 0.7, noise = 1.0, signal = 1.0;
  std::uint64_t seed = 0;
};

int cmd_gen(const GenArgs& a) {
  DatasetHeader h = DatasetHeader::desk_scale();
  h.seq_len = a.t;
  h.input_dim = a.d;
  BiasSpec b;
  b.delta = a.delta;
  b.group_ratio = a.ratio;
  b.noise_sigma = a.noise;
  b.signal = a.signal;
  b.seed = a.seed;
  h.validate();
  b.validate();
  if (a.n < 4) throw ValidationError("--n must be >= 4");
  const auto records = generate_synthetic(a.n, h, b);
  const auto manifest = save_dataset(h, records, a.out);
  std::cout << manifest.string() << "\n";
  std::cout << "T=" << h.seq_len << " d=" << h.input_dim << " delta=" << b.delta << " group_ratio=" << b.group_ratio
            << "\n";
  print_summary(std::cout, records, h.n_groups);
  return 0;
}

// --- train -----------------------------------------------------------------

struct TrainArgs {
  std::string config, data, out;
  std::vector<std::string> overrides;
  int threads = 1;
};

int cmd_train(const TrainArgs& a) {
  RunConfig cfg = resolve_config(a.config, a.overrides);
  cfg.meta.threads = a.threads;
  const Dataset ds = load_or_generate(a.data, cfg);
  cfg.validate();
  const auto prepared = prepare_data(ds, cfg.data);

  fs::create_directories(a.out);
  std::ofstream log(fs::path(a.out) / "train_log.jsonl", std::ios::trunc);
  if (!log) throw DataError("cannot write training log in " + a.out);
  {
    std::ofstream c(fs::path(a.out) / "config.ini", std::ios::trunc);
    c << to_text(cfg);
  }

  TrainHooks<real> hooks;
  hooks.eval_every = cfg.eval_every;
  hooks.snapshot = [&](int, const MetaState<real>& state) {
    return evaluate<real>(state.theta, cfg.backbone, prepared.pools.test, cfg.meta, cfg.meta.shots,
                          cfg.experiment.n_eval_tasks, cfg.experiment.eval_seed)
        .summary;
  };
  hooks.on_epoch = [&](const EpochLog& e) {
    nlohmann::json j{{"epoch", e.epoch},
                     {"iterations", e.iterations},
                     {"mean_query_loss", e.mean_query_loss},
                     {"mean_fair_dot", e.mean_fair_dot},
                     {"mean_abs_fair_dot", e.mean_abs_fair_dot},
                     {"mask_mean", e.mask_mean},
                     {"mask_std", e.mask_std},
                     {"adversary_loss", e.adversary_loss},
                     {"tasks_failed", e.tasks_failed}};
    if (e.eval) j["eval"] = summary_json(*e.eval);
    log << j.dump() << "\n" << std::flush;
    std::cerr << "epoch " << e.epoch << "/" << cfg.meta.epochs << "  query_loss " << e.mean_query_loss << "\n";
  };
  const auto result = train<real>(prepared.pools.train, cfg.backbone, cfg.meta, hooks);

  const auto model = make_model_file(cfg.backbone, result.state, cfg.meta.n_groups, cfg.meta.adv_hidden,
                                     cfg.data.split_seed, cfg.data.test_fraction, prepared.standardizer);
  const auto model_path = fs::path(a.out) / "model.fm2s";
  save_model(model_path, model);
  std::cout << model_path.string() << "\n";
  return 0;
}

// --- eval ------------------------------------------------------------------

struct EvalArgs {
  std::string model, data, config, csv;
  std::vector<std::string> overrides;
  int shots = 5, tasks = 200, threads = 1;
  std::uint64_t seed = 12345;
};

int cmd_eval(const EvalArgs& a) {
  RunConfig cfg = resolve_config(a.config, a.overrides);
  if (a.shots != 1 && a.shots != 3 && a.shots != 5) throw ValidationError("--shots must be 1, 3 or 5");
  if (a.tasks < 1) throw ValidationError("--tasks must be >= 1");
  const ModelFile m = load_model(a.model);
  const Dataset ds = load_dataset(a.data);
  check_header(m, ds.header);

  // Recreate the training split and standardization stored with the model.
  auto pools = split_participants(ds.records, m.test_fraction, m.split_seed);
  if (!m.standardizer.empty()) m.standardizer.apply(pools.test);

  cfg.backbone = m.backbone;
  cfg.meta.n_groups = m.n_groups;
  cfg.meta.threads = a.threads;
  const auto theta = m.theta.cast<real>();
  const auto ev = evaluate<real>(theta, cfg.backbone, pools.test, cfg.meta, a.shots, a.tasks, a.seed);
  const auto& s = ev.summary;
  std::cout << "shots     " << a.shots << "\n"
            << "tasks     " << s.n_tasks << "\n"
            << "accuracy  " << pm(s.accuracy) << "\n"
            << "di        " << pm(s.di) << "\n"
            << "eopp      " << pm(s.eopp) << "\n"
            << "eodd      " << pm(s.eodd) << "\n";

  auto num = [](const MetricSummary& v, bool want_std) {
    if (v.count == 0) return std::string("nan");
    std::ostringstream os;
    os << std::setprecision(10) << (want_std ? v.std : v.mean);
    return os.str();
  };
  std::ostringstream row;
  row << a.shots << ',' << s.n_tasks << ',' << num(s.accuracy, false) << ',' << num(s.accuracy, true) << ','
      << num(s.di, false) << ',' << num(s.di, true) << ',' << num(s.eopp, false) << ',' << num(s.eopp, true) << ','
      << num(s.eodd, false) << ',' << num(s.eodd, true);
  const std::string header =
      "shots,n_tasks,accuracy_mean,accuracy_std,di_mean,di_std,eopp_mean,eopp_std,eodd_mean,eodd_std";
  std::cout << header << "\n" << row.str() << "\n";
  if (!a.csv.empty()) {
    const bool fresh = !fs::exists(a.csv) || fs::file_size(a.csv) == 0;
    std::ofstream out(a.csv, std::ios::app);
    if (!out) throw DataError("cannot write " + a.csv);
    if (fresh) out << header << "\n";
    out << row.str() << "\n";
  }
  return 0;
}

// --- grid / ablate ---------------------------------------------------------

struct GridArgs {
  std::string config, data, results;
  std::vector<std::string> overrides;
  int threads = 1;
};

void print_summary_table(const std::vector<SummaryRow>& rows) {
  std::cout << std::left << std::setw(28) << "config" << std::right << std::setw(5) << "shot" << std::setw(6) << "n"
            << std::setw(20) << "accuracy" << std::setw(20) << "eopp" << std::setw(20) << "di" << "  pareto\n";
  std::cout << std::fixed << std::setprecision(4);
  for (const auto& r : rows) {
    auto cell = [](const MetricSummary& s) {
      std::ostringstream os;
      os << std::fixed << std::setprecision(4);
      if (s.count) os << s.mean << " +/- " << s.std;
      else os << "nan";
      return os.str();
    };
    std::cout << std::left << std::setw(28) << r.config_id << std::right << std::setw(5) << r.shot << std::setw(6)
              << r.n_seeds << std::setw(20) << cell(r.accuracy) << std::setw(20) << cell(r.eopp) << std::setw(20)
              << cell(r.di) << "  " << (r.non_dominated ? "*" : "") << "\n";
  }
}

int run_points(const GridArgs& a, bool ablate) {
  RunConfig cfg = resolve_config(a.config, a.overrides);
  const Dataset ds = load_or_generate(a.data, cfg);
  cfg.validate();
  const auto prepared = prepare_data(ds, cfg.data);
  const auto points = ablate ? ablation_points(cfg) : expand_grid(cfg);
  const auto runner = make_training_runner(prepared.pools, cfg.meta.n_groups);
  std::optional<fs::path> path;
  if (!a.results.empty()) path = a.results;
  const auto rows = run_grid(points, cfg.experiment, path, runner, a.threads);
  int failed = 0;
  for (const auto& r : rows) {
    if (!r.ok()) {
      ++failed;
      std::cerr << "cell " << r.config_id << " shot=" << r.shot << " seed=" << r.seed << " " << r.status << "\n";
    }
  }
  print_summary_table(summarize(rows));
  if (failed) std::cerr << failed << " of " << rows.size() << " cells failed\n";
  return 0;
}

// --- pareto ----------------------------------------------------------------

const char* kParetoHeader = "config_id,shot,n_seeds,accuracy,accuracy_std,eopp,eopp_std,di,eodd,status";

std::string cell(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

/// Reads rows previously written by `pareto` back as one-seed summaries.
std::vector<SummaryRow> read_pareto_output(const fs::path& path) {
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  std::vector<SummaryRow> rows;
  std::vector<std::string> bad;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::string c;
    std::istringstream is(line);
    while (std::getline(is, c, ',')) f.push_back(c);
    try {
      if (f.size() != 10) throw std::invalid_argument("expected 10 columns, got " + std::to_string(f.size()));
      SummaryRow r;
      r.config_id = f[0];
      r.shot = std::stoi(f[1]);
      r.n_seeds = std::stoi(f[2]);
      auto metric = [](const std::string& m, const std::string& sd) {
        MetricSummary s;
        if (m == "nan") return s;
        s.mean = std::stod(m);
        s.std = sd.empty() || sd == "nan" ? 0.0 : std::stod(sd);
        s.count = 1;
        return s;
      };
      r.accuracy = metric(f[3], f[4]);
      r.eopp = metric(f[5], f[6]);
      r.di = metric(f[7], "");
      r.eodd = metric(f[8], "");
      rows.push_back(r);
    } catch (const std::exception& e) {
      bad.push_back("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!bad.empty()) {
    std::string msg = "malformed pareto file " + path.string() + ":\n";
    for (const auto& b : bad) msg += "  " + b + "\n";
    throw DataError(msg);
  }
  return rows;
}

struct ParetoArgs {
  std::string results, out;
  bool front_only = false;
};

int cmd_pareto(const ParetoArgs& a) {
  std::ifstream probe(a.results);
  if (!probe) throw ValidationError("cannot open results file " + a.results);
  std::string first;
  std::getline(probe, first);
  if (!first.empty() && first.back() == '\r') first.pop_back();

  std::vector<SummaryRow> rows;
  if (first == kParetoHeader) {
    // Re-rank previously exported points; each row is already one aggregated point.
    rows = read_pareto_output(a.results);
    std::map<int, std::vector<std::size_t>> by_shot;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      rows[i].non_dominated = false;
      if (rows[i].accuracy.count && rows[i].eopp.count) by_shot[rows[i].shot].push_back(i);
    }
    for (const auto& [_, idx] : by_shot) {
      std::vector<ParetoPoint> pts;
      for (auto i : idx) pts.push_back({rows[i].accuracy.mean, rows[i].eopp.mean, rows[i].config_id});
      for (const auto& p : pareto_frontier(pts))
        for (auto i : idx)
          if (rows[i].config_id == p.tag) rows[i].non_dominated = true;
    }
  } else {
    const auto results = read_results(a.results);
    if (results.empty()) throw ValidationError("results file " + a.results + " has no rows");
    rows = summarize(results);
  }

  std::ofstream out;
  std::ostream* os = &std::cout;
  if (!a.out.empty()) {
    out.open(a.out, std::ios::trunc);
    if (!out) throw DataError("cannot write " + a.out);
    os = &out;
  }
  *os << kParetoHeader << "\n";
  auto mean = [](const MetricSummary& s) { return s.count ? s.mean : std::nan(""); };
  auto sd = [](const MetricSummary& s) { return s.count ? s.std : std::nan(""); };
  for (const auto& r : rows) {
    if (a.front_only && !r.non_dominated) continue;
    *os << r.config_id << ',' << r.shot << ',' << r.n_seeds << ',' << cell(mean(r.accuracy)) << ','
        << cell(sd(r.accuracy)) << ',' << cell(mean(r.eopp)) << ',' << cell(sd(r.eopp)) << ',' << cell(mean(r.di))
        << ',' << cell(mean(r.eodd)) << ',' << (r.non_dominated ? "non-dominated" : "dominated") << "\n";
  }
  if (!a.out.empty()) {
    int front = 0;
    for (const auto& r : rows) front += r.non_dominated;
    std::cout << front << " non-dominated of " << rows.size() << " points -> " << a.out << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FairM2S: fairness-aware few-shot meta-learning"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Generate a synthetic dataset with a controllable group bias");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--n", gen.n, "Participants");
  g->add_option("--t", gen.t, "Time steps per sequence");
  g->add_option("--d", gen.d, "Features per step");
  g->add_option("--delta", gen.delta, "Minority-group signal attenuation in [0,1]");
  g->add_option("--ratio", gen.ratio, "Fraction of participants in group 0");
  g->add_option("--noise", gen.noise, "Gaussian noise sigma");
  g->add_option("--signal", gen.signal, "Class-signal amplitude");
  g->add_option("--seed", gen.seed, "Generator seed");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Meta-train a model");
  t->add_option("--config", tr.config, "Run configuration file");
  t->add_option("--data", tr.data, "Dataset manifest (default: synthetic from config)");
  t->add_option("--out", tr.out, "Output directory")->required();
  t->add_option("--set", tr.overrides, "Override a config field: section.key=value");
  t->add_option("--threads", tr.threads, "Task-level worker threads")->check(CLI::PositiveNumber);

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a model on the held-out participants");
  e->add_option("--model", ev.model, "Model file")->required();
  e->add_option("--data", ev.data, "Dataset manifest")->required();
  e->add_option("--config", ev.config, "Run configuration (inner-loop settings)");
  e->add_option("--set", ev.overrides, "Override a config field: section.key=value");
  e->add_option("--shots", ev.shots, "Support examples per class (1, 3 or 5)");
  e->add_option("--tasks", ev.tasks, "Evaluation tasks");
  e->add_option("--seed", ev.seed, "Task sampling seed");
  e->add_option("--csv", ev.csv, "Append the summary row to this CSV");
  e->add_option("--threads", ev.threads, "Task-level worker threads")->check(CLI::PositiveNumber);

  GridArgs gr;
  auto* gcmd = app.add_subcommand("grid", "Sweep gamma x lambda_smooth x alpha over shots and seeds");
  GridArgs ab;
  auto* acmd = app.add_subcommand("ablate", "Run the ablation arms over shots and seeds");
  for (auto [cmd, args] : {std::pair{gcmd, &gr}, std::pair{acmd, &ab}}) {
    cmd->add_option("--config", args->config, "Run configuration file");
    cmd->add_option("--data", args->data, "Dataset manifest (default: synthetic from config)");
    cmd->add_option("--results", args->results, "Results CSV (appended, resumable)");
    cmd->add_option("--set", args->overrides, "Override a config field: section.key=value");
    cmd->add_option("--threads", args->threads, "Concurrent grid cells")->check(CLI::PositiveNumber);
  }

  ParetoArgs pa;
  auto* p = app.add_subcommand("pareto", "Aggregate results and tag the accuracy/Eopp Pareto front");
  p->add_option("--results", pa.results, "Results CSV from grid/ablate (or a previous pareto output)")->required();
  p->add_option("--out", pa.out, "Output CSV (default stdout)");
  p->add_flag("--front-only", pa.front_only, "Emit only non-dominated points");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    if (*g) return cmd_gen(gen);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_eval(ev);
    if (*gcmd) return run_points(gr, false);
    if (*acmd) return run_points(ab, true);
    if (*p) return cmd_pareto(pa);
  } catch (const ValidationError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitValidation;
  } catch (const ConfigError& err) {
    std::cerr << "config error:\n" << err.what() << "\n";
    return kExitValidation;
  } catch (const DataError& err) {
    std::cerr << "data error: " << err.what() << "\n";
    return kExitValidation;
  } catch (const ShapeError& err) {
    std::cerr << "shape error: " << err.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& err) {
    std::cerr << "runtime error: " << err.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
