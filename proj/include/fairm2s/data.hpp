#pragma once
// Participant datasets: on-disk format, participant-disjoint splitting,
// feature standardization and a synthetic generator with a controllable
// group bias.
//
// On-disk layout (paths relative to the manifest's directory):
//   manifest.csv      line 1: T,d,n_groups,format_version
//                     then one row per participant: id,group,label,relative_path
//   <relative_path>   T*d little-endian float32 values, row-major T x d

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fairm2s/autodiff.hpp"
#include "fairm2s/errors.hpp"

namespace fairm2s {

inline constexpr int kDatasetFormatVersion = 1;

struct ParticipantRecord {
  std::string id;
  int group = 0;  // 0 = majority, 1 = minority by convention
  int label = 0;  // 1 = positive (stressed)
  Tensor<float> features;  // T x d

  friend bool operator==(const ParticipantRecord&, const ParticipantRecord&) = default;
};

struct DatasetHeader {
  int seq_len = 20;    // T
  int input_dim = 8;   // d
  int n_groups = 2;
  int n_participants = 0;
  int format_version = kDatasetFormatVersion;

  void validate() const;
  friend bool operator==(const DatasetHeader&, const DatasetHeader&) = default;

  /// 120 steps x 67 features (37 video + 30 audio).
  static DatasetHeader paper_shaped() { return {120, 67, 2, 0, kDatasetFormatVersion}; }
  static DatasetHeader desk_scale() { return {20, 8, 2, 0, kDatasetFormatVersion}; }
};

struct Dataset {
  DatasetHeader header;
  std::vector<ParticipantRecord> records;
};

class DatasetError : public DataError {
 public:
  enum class Kind { empty, missing_file, parse, shape_mismatch, non_finite, duplicate_id, io };

  DatasetError(Kind kind, std::string id, const std::string& what)
      : DataError(what), kind_(kind), id_(std::move(id)) {}

  Kind kind() const noexcept { return kind_; }
  const std::string& participant_id() const noexcept { return id_; }

 private:
  Kind kind_;
  std::string id_;
};

Dataset load_dataset(const std::filesystem::path& manifest_path);

/// Writes manifest.csv and features/<id>.f32 under `dir`; returns the manifest path.
std::filesystem::path save_dataset(const DatasetHeader& header, const std::vector<ParticipantRecord>& records,
                                   const std::filesystem::path& dir);

struct Split {
  std::vector<ParticipantRecord> train;
  std::vector<ParticipantRecord> test;
};

/// Stratified by (label, group); exactly round(test_fraction * N) test ids.
/// Every cell with >= 2 members lands in both pools. Input order is kept
/// within each pool.
Split split_participants(const std::vector<ParticipantRecord>& records, double test_fraction, std::uint64_t seed);

struct BiasSpec {
  double delta = 0.8;         // minority-group signal attenuation
  double group_ratio = 0.7;   // P(group 0)
  std::array<double, 2> label_skew{0.5, 0.5};  // P(label 1 | group)
  double noise_sigma = 1.0;
  double signal = 1.0;        // class-signal amplitude before attenuation
  std::uint64_t seed = 0;

  void validate() const;
};

/// Synthetic participants: shared sinusoidal background with per-participant
/// phase and amplitude, plus (positives only) a stress prototype scaled by
/// 1 - delta for group 1, plus i.i.d. gaussian noise.
std::vector<ParticipantRecord> generate_synthetic(int n, const DatasetHeader& header, const BiasSpec& bias);

/// Per-feature mean/std over every time step of every participant.
struct Standardizer {
  Eigen::RowVectorXf mean;
  Eigen::RowVectorXf stddev;

  static Standardizer fit(const std::vector<ParticipantRecord>& records);
  void apply(std::vector<ParticipantRecord>& records) const;
  bool empty() const { return mean.size() == 0; }
};

struct GroupLabelCounts {
  // counts[group][label]
  std::vector<std::array<int, 2>> counts;
};
GroupLabelCounts count_cells(const std::vector<ParticipantRecord>& records, int n_groups);

}  // namespace fairm2s
