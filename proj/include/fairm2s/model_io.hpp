#pragma once
// Versioned binary model file (all integers and floats little-endian):
//
//   "FM2SMODL"                       8-byte magic
//   u32 format_version               currently 1
//   i32 seq_len, input_dim, lstm_hidden, gru_hidden
//   f64 dropout_rate
//   i32 n_groups, adv_hidden
//   u64 split_seed
//   f64 test_fraction
//   u32 n_std                        0 or input_dim
//   f32[n_std] feature means, f32[n_std] feature stds
//   u64 n_theta, f32[n_theta]        flattened backbone parameters
//   u64 n_adv,   f32[n_adv]          flattened adversary parameters

#include <cstdint>
#include <filesystem>

#include "fairm2s/backbone.hpp"
#include "fairm2s/data.hpp"
#include "fairm2s/meta_learner.hpp"
#include "fairm2s/param_set.hpp"

namespace fairm2s {

inline constexpr std::uint32_t kModelFormatVersion = 1;

struct ModelFile {
  BackboneConfig backbone;
  int n_groups = 2;
  int adv_hidden = 8;
  std::uint64_t split_seed = 0;
  double test_fraction = 0.25;
  Standardizer standardizer;
  ParamSet<float> theta;
  ParamSet<float> adversary;
};

void save_model(const std::filesystem::path& path, const ModelFile& model);
ModelFile load_model(const std::filesystem::path& path);

template <typename Scalar>
ModelFile make_model_file(const BackboneConfig& bb, const MetaState<Scalar>& state, int n_groups, int adv_hidden,
                          std::uint64_t split_seed, double test_fraction, const Standardizer& standardizer) {
  ModelFile m;
  m.backbone = bb;
  m.n_groups = n_groups;
  m.adv_hidden = adv_hidden;
  m.split_seed = split_seed;
  m.test_fraction = test_fraction;
  m.standardizer = standardizer;
  m.theta = state.theta.template cast<float>();
  m.adversary = state.adversary.params.template cast<float>();
  return m;
}

}  // namespace fairm2s
