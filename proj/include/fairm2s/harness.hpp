#pragma once
// Experiment grid: (grid point x shot x seed) cells, each trained and
// evaluated independently. Results are appended to a CSV one row per cell as
// cells finish, and completed keys are skipped on rerun.
//
// CSV columns: config_id,shot,seed,accuracy,di,eopp,eodd,wall_time_s,status

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fairm2s/config.hpp"
#include "fairm2s/data.hpp"
#include "fairm2s/metrics.hpp"

namespace fairm2s {

struct GridPoint {
  std::string config_id;
  RunConfig config;
};

struct ResultRow {
  std::string config_id;
  int shot = 0;
  std::uint64_t seed = 0;
  double accuracy = 0;
  double di = 0;    // NaN when undefined for every eval task
  double eopp = 0;
  double eodd = 0;
  double wall_time_s = 0;
  std::string status = "ok";  // "ok" or "failed: <reason>"

  bool ok() const { return status == "ok"; }
};

inline const char* kResultsHeader = "config_id,shot,seed,accuracy,di,eopp,eodd,wall_time_s,status";

/// Cartesian product of the gamma / lambda_smooth / alpha grids applied to `base`.
std::vector<GridPoint> expand_grid(const RunConfig& base);

/// The named arms of the ablation study; each differs from `base` in one flag.
std::vector<GridPoint> ablation_points(const RunConfig& base);

/// Applies an ablation arm to a config ("All" leaves it unchanged).
RunConfig apply_ablation(RunConfig cfg, const std::string& arm);

/// Standardized, participant-disjoint pools ready for training.
struct PreparedData {
  DatasetHeader header;
  Split pools;
  Standardizer standardizer;  // fitted on the train pool; empty if disabled
};

/// Splits with data.test_fraction / data.split_seed and standardizes both
/// pools with statistics from the train pool.
PreparedData prepare_data(const Dataset& dataset, const DataConfig& data);

/// The synthetic dataset described by cfg.data, shaped by cfg.backbone.
Dataset synthetic_dataset(const RunConfig& cfg);

using CellRunner = std::function<ResultRow(const GridPoint&, int shot, std::uint64_t seed)>;

/// Runs every missing (config, shot, seed) cell and returns all rows for the
/// requested cells, existing ones included. Runner exceptions become failed rows.
/// `threads` > 1 runs cells concurrently; rows are still appended one at a time.
std::vector<ResultRow> run_grid(const std::vector<GridPoint>& points, const ExperimentSpec& spec,
                                const std::optional<std::filesystem::path>& results_path, const CellRunner& runner,
                                int threads = 1);

/// Train on `pools.train` and evaluate on `pools.test` with the cell's shot and seed.
CellRunner make_training_runner(const Split& pools, int n_groups);

std::vector<ResultRow> read_results(const std::filesystem::path& path);
void write_results(const std::filesystem::path& path, const std::vector<ResultRow>& rows);
std::string to_csv_line(const ResultRow& row);

/// Parses one data line; nullopt (with `error` filled) if malformed.
std::optional<ResultRow> parse_result_line(const std::string& line, std::string* error = nullptr);

struct SummaryRow {
  std::string config_id;
  int shot = 0;
  int n_seeds = 0;
  MetricSummary accuracy, di, eopp, eodd;
  bool non_dominated = false;  // within its shot setting, on (mean accuracy, mean eopp)
};

/// Mean and population std over seeds per (config, shot); failed rows and NaN
/// metrics are excluded. Output is sorted by (shot, config_id).
std::vector<SummaryRow> summarize(const std::vector<ResultRow>& rows);

/// Median of the finite values; NaN if none.
double median(std::vector<double> values);

}  // namespace fairm2s
