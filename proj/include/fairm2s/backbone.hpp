#pragma once
// Sequence classifier: BiLSTM -> GRU -> mean pooling over time -> dropout ->
// linear head -> sigmoid.
//
// Batches are processed as one graph: at step t the input is a B x d matrix
// whose row b is x_b[t, :], so graph size grows with T, not with B.
//
// Gate layouts (columns of the fused weight matrices):
//   LSTM  [i | f | g | o]   c' = f*c + i*g,  h' = o*tanh(c')
//   GRU   [r | z | n]       n  = tanh(x W_in + b_in + r * (h W_hn + b_hn))
//                           h' = (1 - z) * n + z * h

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <sstream>
#include <vector>

#include "fairm2s/autodiff.hpp"
#include "fairm2s/param_set.hpp"

namespace fairm2s {

struct BackboneConfig {
  int input_dim = 8;
  int seq_len = 20;
  int lstm_hidden = 32;  // per direction
  int gru_hidden = 32;
  double dropout_rate = 0.3;

  void validate() const {
    if (input_dim < 1 || seq_len < 1 || lstm_hidden < 1 || gru_hidden < 1)
      throw ConfigError("backbone: all dimensions must be >= 1");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("backbone: dropout_rate must be in [0, 1)");
  }

  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

enum class Mode { train, eval };

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.
template <typename Scalar>
ParamSet<Scalar> init_params(const BackboneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  auto weight = [&](int fan_in, int fan_out) {
    const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-s, s);
    Tensor<Scalar> w(fan_in, fan_out);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<Scalar>(dist(rng));
    return w;
  };
  auto bias = [](int n) { return Tensor<Scalar>::Zero(1, n).eval(); };

  const int d = cfg.input_dim;
  const int h = cfg.lstm_hidden;
  const int g = cfg.gru_hidden;
  ParamSet<Scalar> p;
  for (const char* dir : {"lstm_fw", "lstm_bw"}) {
    p.add(std::string(dir) + ".w_ih", weight(d, 4 * h));
    p.add(std::string(dir) + ".w_hh", weight(h, 4 * h));
    p.add(std::string(dir) + ".b", bias(4 * h));
  }
  p.add("gru.w_ih", weight(2 * h, 3 * g));
  p.add("gru.w_hh", weight(g, 3 * g));
  p.add("gru.b_ih", bias(3 * g));
  p.add("gru.b_hh", bias(3 * g));
  p.add("head.w", weight(g, 1));
  p.add("head.b", bias(1));
  return p;
}

/// Tape handles for every backbone parameter.
template <typename Scalar>
struct BackboneVars {
  struct Lstm {
    Var<Scalar> w_ih, w_hh, b;
  };
  Lstm fw, bw;
  Var<Scalar> gru_w_ih, gru_w_hh, gru_b_ih, gru_b_hh;
  Var<Scalar> head_w, head_b;

  /// Binds to leaves produced by register_leaves() on an init_params() layout.
  static BackboneVars bind(std::span<const Var<Scalar>> leaves) {
    if (leaves.size() != 12) throw ShapeError("BackboneVars: expected 12 parameter tensors");
    BackboneVars v;
    v.fw = {leaves[0], leaves[1], leaves[2]};
    v.bw = {leaves[3], leaves[4], leaves[5]};
    v.gru_w_ih = leaves[6];
    v.gru_w_hh = leaves[7];
    v.gru_b_ih = leaves[8];
    v.gru_b_hh = leaves[9];
    v.head_w = leaves[10];
    v.head_b = leaves[11];
    return v;
  }
};

namespace detail {

template <typename Scalar>
void check_batch(const BackboneConfig& cfg, std::span<const Tensor<Scalar>> batch) {
  if (batch.empty()) throw ShapeError("backbone: empty batch");
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& x = batch[i];
    if (x.rows() != cfg.seq_len || x.cols() != cfg.input_dim) {
      std::ostringstream os;
      os << "backbone: item " << i << " has shape " << x.rows() << "x" << x.cols() << ", expected " << cfg.seq_len
         << "x" << cfg.input_dim;
      throw ShapeError(os.str());
    }
    if (!x.allFinite()) throw NumericError("backbone: non-finite input in item " + std::to_string(i));
  }
}

/// Step-major inputs: element t is B x d with row b = batch[b].row(t).
template <typename Scalar>
std::vector<Var<Scalar>> time_slices(Tape<Scalar>& tape, std::span<const Tensor<Scalar>> batch) {
  const auto steps = batch.front().rows();
  const auto dim = batch.front().cols();
  std::vector<Var<Scalar>> xs;
  xs.reserve(static_cast<std::size_t>(steps));
  for (Eigen::Index t = 0; t < steps; ++t) {
    Tensor<Scalar> xt(static_cast<Eigen::Index>(batch.size()), dim);
    for (std::size_t b = 0; b < batch.size(); ++b) xt.row(static_cast<Eigen::Index>(b)) = batch[b].row(t);
    xs.push_back(tape.constant(std::move(xt)));
  }
  return xs;
}

template <typename Scalar>
std::vector<Var<Scalar>> run_lstm(Tape<Scalar>& tape, const typename BackboneVars<Scalar>::Lstm& w,
                                  const std::vector<Var<Scalar>>& xs, bool reverse) {
  const auto batch = xs.front().rows();
  const auto hid = w.w_hh.rows();
  auto h = tape.constant(Tensor<Scalar>::Zero(batch, hid));
  auto c = tape.constant(Tensor<Scalar>::Zero(batch, hid));
  std::vector<Var<Scalar>> out(xs.size());
  const auto n = static_cast<std::ptrdiff_t>(xs.size());
  for (std::ptrdiff_t k = 0; k < n; ++k) {
    const auto t = static_cast<std::size_t>(reverse ? n - 1 - k : k);
    auto z = add_row(matmul(xs[t], w.w_ih) + matmul(h, w.w_hh), w.b);
    auto i = sigmoid(slice_cols(z, 0, hid));
    auto f = sigmoid(slice_cols(z, hid, hid));
    auto g = tanh(slice_cols(z, 2 * hid, hid));
    auto o = sigmoid(slice_cols(z, 3 * hid, hid));
    c = mul(f, c) + mul(i, g);
    h = mul(o, tanh(c));
    out[t] = h;
  }
  return out;
}

}  // namespace detail

/// Per-step concatenated [forward | backward] LSTM states, each B x 2H.
template <typename Scalar>
std::vector<Var<Scalar>> bilstm(Tape<Scalar>& tape, const BackboneVars<Scalar>& vars,
                                const std::vector<Var<Scalar>>& xs) {
  auto hf = detail::run_lstm(tape, vars.fw, xs, false);
  auto hb = detail::run_lstm(tape, vars.bw, xs, true);
  std::vector<Var<Scalar>> out;
  out.reserve(xs.size());
  for (std::size_t t = 0; t < xs.size(); ++t) out.push_back(concat_cols(hf[t], hb[t]));
  return out;
}

/// Inverted-dropout mask for one item: keep w.p. 1-rate, scaled by 1/(1-rate).
template <typename Scalar>
Tensor<Scalar> dropout_mask(int width, double rate, std::uint64_t seed) {
  Tensor<Scalar> m(1, width);
  if (rate <= 0.0) {
    m.setOnes();
    return m;
  }
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution keep(1.0 - rate);
  const auto kept = static_cast<Scalar>(1.0 / (1.0 - rate));
  for (int j = 0; j < width; ++j) m(0, j) = keep(rng) ? kept : Scalar(0);
  return m;
}

/// Probabilities for a batch as a B x 1 tape variable. Item b uses dropout seed `seed + b`.
template <typename Scalar>
Var<Scalar> forward_batch(Tape<Scalar>& tape, const BackboneVars<Scalar>& vars, const BackboneConfig& cfg,
                          std::span<const Tensor<Scalar>> batch, Mode mode, std::uint64_t seed) {
  detail::check_batch(cfg, batch);
  const auto xs = detail::time_slices(tape, batch);
  const auto seq = bilstm(tape, vars, xs);

  const auto B = static_cast<Eigen::Index>(batch.size());
  const auto G = vars.gru_w_hh.rows();
  auto h = tape.constant(Tensor<Scalar>::Zero(B, G));
  Var<Scalar> pooled;
  for (std::size_t t = 0; t < seq.size(); ++t) {
    auto gi = add_row(matmul(seq[t], vars.gru_w_ih), vars.gru_b_ih);
    auto gh = add_row(matmul(h, vars.gru_w_hh), vars.gru_b_hh);
    auto r = sigmoid(slice_cols(gi, 0, G) + slice_cols(gh, 0, G));
    auto z = sigmoid(slice_cols(gi, G, G) + slice_cols(gh, G, G));
    auto n = tanh(slice_cols(gi, 2 * G, G) + mul(r, slice_cols(gh, 2 * G, G)));
    // (1 - z) * n + z * h  ==  n + z * (h - n)
    h = n + mul(z, h - n);
    pooled = t == 0 ? h : pooled + h;
  }
  pooled = scale(pooled, Scalar(1) / static_cast<Scalar>(seq.size()));

  if (mode == Mode::train && cfg.dropout_rate > 0.0) {
    Tensor<Scalar> mask(B, G);
    for (Eigen::Index b = 0; b < B; ++b)
      mask.row(b) = dropout_mask<Scalar>(static_cast<int>(G), cfg.dropout_rate, seed + static_cast<std::uint64_t>(b));
    pooled = mul(pooled, tape.constant(std::move(mask)));
  }
  return sigmoid(add_row(matmul(pooled, vars.head_w), vars.head_b));
}

/// Value-only batch forward (no gradient bookkeeping).
template <typename Scalar>
Vector<Scalar> forward_batch(const ParamSet<Scalar>& params, const BackboneConfig& cfg,
                             std::span<const Tensor<Scalar>> batch, Mode mode, std::uint64_t seed) {
  Tape<Scalar> tape;
  std::vector<Var<Scalar>> consts;
  for (const auto& [_, t] : params) consts.push_back(tape.constant(t));
  const auto vars = BackboneVars<Scalar>::bind(consts);
  return forward_batch(tape, vars, cfg, batch, mode, seed).value().col(0);
}

template <typename Scalar>
Scalar forward(const ParamSet<Scalar>& params, const BackboneConfig& cfg, const Tensor<Scalar>& x, Mode mode,
               std::uint64_t dropout_seed) {
  return forward_batch(params, cfg, std::span<const Tensor<Scalar>>(&x, 1), mode, dropout_seed)(0);
}

}  // namespace fairm2s
