#include "fairm2s/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

namespace fairm2s {

namespace fs = std::filesystem;

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

int parse_int(const std::string& s, const std::string& what) {
  try {
    std::size_t pos = 0;
    int v = std::stoi(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DatasetError(DatasetError::Kind::parse, "", "manifest: cannot parse " + what + " '" + s + "'");
  }
}

void write_f32_le(std::ostream& os, const Tensor<float>& m) {
  std::vector<char> buf(static_cast<std::size_t>(m.size()) * 4);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(m.data()[i]);
    for (int b = 0; b < 4; ++b) buf[static_cast<std::size_t>(i) * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xFFu);
  }
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

std::string trim_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

}  // namespace

void DatasetHeader::validate() const {
  if (seq_len < 1 || input_dim < 1) throw ConfigError("dataset header: T and d must be >= 1");
  if (n_groups < 2) throw ConfigError("dataset header: n_groups must be >= 2");
}

void BiasSpec::validate() const {
  if (!(delta >= 0 && delta <= 1)) throw ConfigError("bias: delta must be in [0, 1]");
  if (!(group_ratio > 0 && group_ratio < 1)) throw ConfigError("bias: group_ratio must be in (0, 1)");
  for (double s : label_skew)
    if (!(s > 0 && s < 1)) throw ConfigError("bias: label_skew entries must be in (0, 1)");
  if (!(noise_sigma > 0)) throw ConfigError("bias: noise_sigma must be > 0");
  if (!(signal >= 0)) throw ConfigError("bias: signal must be >= 0");
}

Dataset load_dataset(const fs::path& manifest_path) {
  using K = DatasetError::Kind;
  std::ifstream in(manifest_path);
  if (!in) throw DatasetError(K::missing_file, "", "cannot open manifest " + manifest_path.string());

  std::string line;
  if (!std::getline(in, line)) throw DatasetError(K::empty, "", "empty dataset");
  const auto head = split_csv(trim_cr(line));
  if (head.size() != 4) throw DatasetError(K::parse, "", "manifest: header must be T,d,n_groups,format_version");

  Dataset ds;
  ds.header.seq_len = parse_int(head[0], "T");
  ds.header.input_dim = parse_int(head[1], "d");
  ds.header.n_groups = parse_int(head[2], "n_groups");
  ds.header.format_version = parse_int(head[3], "format_version");
  if (ds.header.format_version != kDatasetFormatVersion)
    throw DatasetError(K::parse, "", "manifest: unsupported format_version " + head[3]);
  try {
    ds.header.validate();
  } catch (const ConfigError& e) {
    throw DatasetError(K::parse, "", e.what());
  }

  const auto base = manifest_path.parent_path();
  const auto T = ds.header.seq_len;
  const auto d = ds.header.input_dim;
  const auto expected_bytes = static_cast<std::uintmax_t>(T) * static_cast<std::uintmax_t>(d) * 4u;
  std::set<std::string> seen;
  int row = 1;
  while (std::getline(in, line)) {
    ++row;
    line = trim_cr(line);
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != 4)
      throw DatasetError(K::parse, "", "manifest row " + std::to_string(row) + ": expected id,group,label,path");
    ParticipantRecord r;
    r.id = cells[0];
    if (r.id.empty()) throw DatasetError(K::parse, "", "manifest row " + std::to_string(row) + ": empty id");
    if (!seen.insert(r.id).second) throw DatasetError(K::duplicate_id, r.id, "duplicate participant id '" + r.id + "'");
    r.group = parse_int(cells[1], "group");
    r.label = parse_int(cells[2], "label");
    if (r.group < 0 || r.group >= ds.header.n_groups)
      throw DatasetError(K::parse, r.id, "participant '" + r.id + "': group out of range");
    if (r.label != 0 && r.label != 1) throw DatasetError(K::parse, r.id, "participant '" + r.id + "': label not 0/1");

    const auto path = base / cells[3];
    std::error_code ec;
    const auto bytes = fs::file_size(path, ec);
    if (ec) throw DatasetError(K::missing_file, r.id, "participant '" + r.id + "': missing feature file " + path.string());
    if (bytes != expected_bytes) {
      std::ostringstream os;
      os << "participant '" << r.id << "': shape mismatch, feature file has " << bytes << " bytes, expected "
         << expected_bytes << " (" << T << "x" << d << " float32)";
      throw DatasetError(K::shape_mismatch, r.id, os.str());
    }
    std::ifstream f(path, std::ios::binary);
    std::vector<unsigned char> buf(static_cast<std::size_t>(bytes));
    if (!f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(bytes)))
      throw DatasetError(K::io, r.id, "participant '" + r.id + "': read failed");
    r.features.resize(T, d);
    for (Eigen::Index i = 0; i < r.features.size(); ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(buf[static_cast<std::size_t>(i) * 4 + b]) << (8 * b);
      r.features.data()[i] = std::bit_cast<float>(bits);
    }
    if (!r.features.allFinite())
      throw DatasetError(K::non_finite, r.id, "participant '" + r.id + "': non-finite feature values");
    ds.records.push_back(std::move(r));
  }
  if (ds.records.empty()) throw DatasetError(K::empty, "", "empty dataset");
  ds.header.n_participants = static_cast<int>(ds.records.size());
  return ds;
}

fs::path save_dataset(const DatasetHeader& header, const std::vector<ParticipantRecord>& records, const fs::path& dir) {
  using K = DatasetError::Kind;
  header.validate();
  std::error_code ec;
  fs::create_directories(dir / "features", ec);
  if (ec) throw DatasetError(K::io, "", "cannot create " + (dir / "features").string() + ": " + ec.message());

  const auto manifest = dir / "manifest.csv";
  std::ofstream m(manifest, std::ios::binary | std::ios::trunc);
  if (!m) throw DatasetError(K::io, "", "cannot write " + manifest.string());
  m << header.seq_len << ',' << header.input_dim << ',' << header.n_groups << ',' << kDatasetFormatVersion << '\n';
  for (const auto& r : records) {
    if (r.features.rows() != header.seq_len || r.features.cols() != header.input_dim)
      throw DatasetError(K::shape_mismatch, r.id, "participant '" + r.id + "': shape does not match header");
    const auto rel = fs::path("features") / (r.id + ".f32");
    m << r.id << ',' << r.group << ',' << r.label << ',' << rel.generic_string() << '\n';
    std::ofstream f(dir / rel, std::ios::binary | std::ios::trunc);
    if (!f) throw DatasetError(K::io, r.id, "cannot write features for '" + r.id + "'");
    write_f32_le(f, r.features);
  }
  if (!m) throw DatasetError(K::io, "", "write failed for " + manifest.string());
  return manifest;
}

Split split_participants(const std::vector<ParticipantRecord>& records, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0 && test_fraction < 1)) throw ConfigError("split: test_fraction must be in (0, 1)");
  const auto n = static_cast<int>(records.size());
  const int target = static_cast<int>(std::lround(test_fraction * n));
  if (target < 1 || target >= n) throw DataError("split: infeasible, test pool would be empty or the whole set");

  // Cells keyed by (label, group) in ascending order.
  std::map<std::pair<int, int>, std::vector<int>> cells;
  for (int i = 0; i < n; ++i) cells[{records[static_cast<std::size_t>(i)].label, records[static_cast<std::size_t>(i)].group}].push_back(i);

  struct Alloc {
    int size, lo, hi, take;
    double quota;
  };
  std::vector<Alloc> alloc;
  int total = 0;
  for (const auto& [_, members] : cells) {
    const int sz = static_cast<int>(members.size());
    const int lo = sz >= 2 ? 1 : 0;
    const int hi = sz >= 2 ? sz - 1 : sz;
    const double quota = test_fraction * sz;
    const int take = std::clamp(static_cast<int>(std::floor(quota)), lo, hi);
    alloc.push_back({sz, lo, hi, take, quota});
    total += take;
  }
  while (total < target) {
    int best = -1;
    for (int c = 0; c < static_cast<int>(alloc.size()); ++c) {
      const auto& a = alloc[static_cast<std::size_t>(c)];
      if (a.take >= a.hi) continue;
      if (best < 0 || a.quota - a.take > alloc[static_cast<std::size_t>(best)].quota - alloc[static_cast<std::size_t>(best)].take) best = c;
    }
    if (best < 0) throw DataError("split: infeasible stratification");
    ++alloc[static_cast<std::size_t>(best)].take;
    ++total;
  }
  while (total > target) {
    int best = -1;
    for (int c = 0; c < static_cast<int>(alloc.size()); ++c) {
      const auto& a = alloc[static_cast<std::size_t>(c)];
      if (a.take <= a.lo) continue;
      if (best < 0 || a.quota - a.take < alloc[static_cast<std::size_t>(best)].quota - alloc[static_cast<std::size_t>(best)].take) best = c;
    }
    if (best < 0) throw DataError("split: infeasible stratification");
    --alloc[static_cast<std::size_t>(best)].take;
    --total;
  }

  std::mt19937_64 rng(seed);
  std::vector<char> is_test(static_cast<std::size_t>(n), 0);
  std::size_t c = 0;
  for (auto& [_, members] : cells) {
    std::shuffle(members.begin(), members.end(), rng);
    for (int k = 0; k < alloc[c].take; ++k) is_test[static_cast<std::size_t>(members[static_cast<std::size_t>(k)])] = 1;
    ++c;
  }
  Split s;
  for (int i = 0; i < n; ++i) (is_test[static_cast<std::size_t>(i)] ? s.test : s.train).push_back(records[static_cast<std::size_t>(i)]);

  int test_pos = 0;
  for (const auto& r : s.test) test_pos += r.label;
  if (test_pos == 0 || test_pos == static_cast<int>(s.test.size()))
    throw DataError("split: infeasible, test pool lacks one class");
  return s;
}

std::vector<ParticipantRecord> generate_synthetic(int n, const DatasetHeader& header, const BiasSpec& bias) {
  if (n < 4) throw ConfigError("generate_synthetic: n must be >= 4");
  header.validate();
  bias.validate();
  const int T = header.seq_len;
  const int d = header.input_dim;
  constexpr int kBackground = 3;
  constexpr double kTwoPi = 2.0 * std::numbers::pi;

  std::mt19937_64 rng(bias.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  // Shared structure: background directions with integer frequencies and a
  // unit-norm class direction.
  Eigen::MatrixXd background(kBackground, d);
  for (Eigen::Index i = 0; i < background.size(); ++i) background.data()[i] = normal(rng) / std::sqrt(double(d));
  Eigen::RowVectorXd direction(d);
  for (int j = 0; j < d; ++j) direction(j) = normal(rng);
  direction /= direction.norm();
  const double class_phase = kTwoPi * unit(rng);

  std::vector<ParticipantRecord> out;
  out.reserve(static_cast<std::size_t>(n));
  const int width = std::max(4, static_cast<int>(std::to_string(n - 1).size()));
  for (int p = 0; p < n; ++p) {
    ParticipantRecord r;
    std::string num = std::to_string(p);
    r.id = "p" + std::string(static_cast<std::size_t>(width) - std::min<std::size_t>(num.size(), width), '0') + num;
    r.group = unit(rng) < bias.group_ratio ? 0 : 1;
    r.label = unit(rng) < bias.label_skew[static_cast<std::size_t>(r.group)] ? 1 : 0;

    double amp[kBackground];
    double phase[kBackground];
    for (int k = 0; k < kBackground; ++k) {
      amp[k] = 0.5 + unit(rng);
      phase[k] = kTwoPi * unit(rng);
    }
    // Only positives carry the class prototype, so attenuating it for group 1
    // lowers that group's true-positive rate without touching its negatives.
    const double strength = r.label ? bias.signal * (r.group == 1 ? 1.0 - bias.delta : 1.0) : 0.0;

    r.features.resize(T, d);
    for (int t = 0; t < T; ++t) {
      const double tau = static_cast<double>(t) / T;
      Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(d);
      for (int k = 0; k < kBackground; ++k) row += amp[k] * std::sin(kTwoPi * (k + 1) * tau + phase[k]) * background.row(k);
      row += strength * (0.6 + 0.4 * std::sin(kTwoPi * tau + class_phase)) * direction;
      for (int j = 0; j < d; ++j) r.features(t, j) = static_cast<float>(row(j) + bias.noise_sigma * normal(rng));
    }
    out.push_back(std::move(r));
  }
  return out;
}

Standardizer Standardizer::fit(const std::vector<ParticipantRecord>& records) {
  if (records.empty()) throw DataError("standardizer: no records");
  const auto d = records.front().features.cols();
  Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(d);
  Eigen::RowVectorXd sq = Eigen::RowVectorXd::Zero(d);
  double count = 0;
  for (const auto& r : records) {
    const Eigen::MatrixXd f = r.features.cast<double>();
    sum += f.colwise().sum();
    sq += f.array().square().matrix().colwise().sum();
    count += static_cast<double>(f.rows());
  }
  Standardizer s;
  const Eigen::RowVectorXd mu = sum / count;
  Eigen::RowVectorXd var = (sq / count).array() - mu.array().square();
  s.mean = mu.cast<float>();
  s.stddev = var.cwiseMax(0.0).cwiseSqrt().unaryExpr([](double v) { return v > 1e-8 ? v : 1.0; }).cast<float>();
  return s;
}

void Standardizer::apply(std::vector<ParticipantRecord>& records) const {
  for (auto& r : records) {
    if (r.features.cols() != mean.size()) throw ShapeError("standardizer: feature width mismatch for '" + r.id + "'");
    r.features = ((r.features.rowwise() - mean).array().rowwise() / stddev.array()).matrix();
  }
}

GroupLabelCounts count_cells(const std::vector<ParticipantRecord>& records, int n_groups) {
  GroupLabelCounts c;
  c.counts.assign(static_cast<std::size_t>(n_groups), {0, 0});
  for (const auto& r : records) {
    if (r.group < 0 || r.group >= n_groups) throw DataError("count_cells: group out of range for '" + r.id + "'");
    ++c.counts[static_cast<std::size_t>(r.group)][static_cast<std::size_t>(r.label)];
  }
  return c;
}

}  // namespace fairm2s
