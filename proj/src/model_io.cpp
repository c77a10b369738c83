#include "fairm2s/model_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

namespace fairm2s {

namespace {

constexpr char kMagic[8] = {'F', 'M', '2', 'S', 'M', 'O', 'D', 'L'};

class Writer {
 public:
  template <typename U>
  void uint(U v) {
    for (std::size_t b = 0; b < sizeof(U); ++b) buf_.push_back(static_cast<char>((v >> (8 * b)) & 0xFF));
  }
  void i32(int v) { uint(static_cast<std::uint32_t>(v)); }
  void f32(float v) { uint(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
  void bytes(const char* p, std::size_t n) { buf_.insert(buf_.end(), p, p + n); }
  void vec(const Vector<float>& v) {
    uint(static_cast<std::uint64_t>(v.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i) f32(v(i));
  }
  const std::vector<char>& data() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  explicit Reader(std::vector<char> buf) : buf_(std::move(buf)) {}

  template <typename U>
  U uint() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t b = 0; b < sizeof(U); ++b) v |= static_cast<U>(static_cast<unsigned char>(buf_[pos_ + b])) << (8 * b);
    pos_ += sizeof(U);
    return v;
  }
  int i32() { return static_cast<int>(uint<std::uint32_t>()); }
  float f32() { return std::bit_cast<float>(uint<std::uint32_t>()); }
  double f64() { return std::bit_cast<double>(uint<std::uint64_t>()); }
  void bytes(char* out, std::size_t n) {
    need(n);
    std::memcpy(out, buf_.data() + pos_, n);
    pos_ += n;
  }
  Vector<float> vec() {
    const auto n = uint<std::uint64_t>();
    if (n > (buf_.size() - pos_) / 4) throw DataError("model file: truncated parameter block");
    Vector<float> v(static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = f32();
    return v;
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) throw DataError("model file: unexpected end of file");
  }
  std::vector<char> buf_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_model(const std::filesystem::path& path, const ModelFile& m) {
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.uint(kModelFormatVersion);
  w.i32(m.backbone.seq_len);
  w.i32(m.backbone.input_dim);
  w.i32(m.backbone.lstm_hidden);
  w.i32(m.backbone.gru_hidden);
  w.f64(m.backbone.dropout_rate);
  w.i32(m.n_groups);
  w.i32(m.adv_hidden);
  w.uint(m.split_seed);
  w.f64(m.test_fraction);
  const auto n_std = static_cast<std::uint32_t>(m.standardizer.mean.size());
  w.uint(n_std);
  for (std::uint32_t i = 0; i < n_std; ++i) w.f32(m.standardizer.mean(i));
  for (std::uint32_t i = 0; i < n_std; ++i) w.f32(m.standardizer.stddev(i));
  w.vec(flatten(m.theta));
  w.vec(flatten(m.adversary));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write model file " + path.string());
  out.write(w.data().data(), static_cast<std::streamsize>(w.data().size()));
  if (!out) throw DataError("write failed for model file " + path.string());
}

ModelFile load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open model file " + path.string());
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(std::move(buf));

  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw DataError("model file: bad magic");
  const auto version = r.uint<std::uint32_t>();
  if (version != kModelFormatVersion) throw DataError("model file: unsupported version " + std::to_string(version));

  ModelFile m;
  m.backbone.seq_len = r.i32();
  m.backbone.input_dim = r.i32();
  m.backbone.lstm_hidden = r.i32();
  m.backbone.gru_hidden = r.i32();
  m.backbone.dropout_rate = r.f64();
  m.n_groups = r.i32();
  m.adv_hidden = r.i32();
  m.split_seed = r.uint<std::uint64_t>();
  m.test_fraction = r.f64();
  try {
    m.backbone.validate();
  } catch (const ConfigError& e) {
    throw DataError(std::string("model file: ") + e.what());
  }
  if (m.adv_hidden < 1) throw DataError("model file: bad adversary width");

  const auto n_std = r.uint<std::uint32_t>();
  if (n_std != 0 && n_std != static_cast<std::uint32_t>(m.backbone.input_dim))
    throw DataError("model file: standardizer width does not match input_dim");
  if (n_std > 0) {
    m.standardizer.mean.resize(n_std);
    m.standardizer.stddev.resize(n_std);
    for (std::uint32_t i = 0; i < n_std; ++i) m.standardizer.mean(i) = r.f32();
    for (std::uint32_t i = 0; i < n_std; ++i) m.standardizer.stddev(i) = r.f32();
  }
  const auto theta_like = init_params<float>(m.backbone, 0);
  m.theta = unflatten<float>(r.vec(), theta_like);
  const auto adv_like = init_adversary<float>(m.adv_hidden, 0.0, 0).params;
  m.adversary = unflatten<float>(r.vec(), adv_like);
  if (!r.done()) throw DataError("model file: trailing bytes");
  return m;
}

}  // namespace fairm2s
