#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "fairm2s/config.hpp"
#include "fairm2s/model_io.hpp"

using namespace fairm2s;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

fs::path scratch_file(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "fairm2s_test_config";
  fs::create_directories(dir);
  return dir / name;
}

ModelFile sample_model() {
  BackboneConfig bb;
  bb.seq_len = 4;
  bb.input_dim = 3;
  bb.lstm_hidden = 2;
  bb.gru_hidden = 2;
  MetaConfig mc;
  mc.seed = 9;
  const auto state = init_meta_state<float>(bb, mc);
  Standardizer s;
  s.mean = Eigen::RowVectorXf::LinSpaced(3, -1.f, 1.f);
  s.stddev = Eigen::RowVectorXf::Constant(3, 2.f);
  return make_model_file(bb, state, 2, mc.adv_hidden, 42, 0.25, s);
}

}  // namespace

TEST_SUITE("config") {

TEST_CASE("defaults are valid and match the documented setup") {
  const RunConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.meta.eta_inner == 1e-3);
  CHECK(c.meta.beta_meta == 1e-3);
  CHECK(c.meta.tasks_per_batch == 32);
  CHECK(c.meta.epochs == 50);
  CHECK(c.meta.query_size == 15);
  CHECK(c.meta.optimizer == OuterOptimizer::adam);
  CHECK(c.experiment.gamma_grid.size() * c.experiment.lambda_grid.size() * c.experiment.alpha_grid.size() == 54);
}

TEST_CASE("sections and qualified keys both parse") {
  const auto r = parse_config("[meta]\nepochs = 7\n# comment\n[weights]\ngamma = 0.2\n");
  REQUIRE(r.errors.empty());
  CHECK(r.config.meta.epochs == 7);
  CHECK(r.config.meta.weights.gamma == 0.2);
  const auto q = parse_config("meta.epochs = 3\n");
  REQUIRE(q.errors.empty());
  CHECK(q.config.meta.epochs == 3);
}

TEST_CASE("every problem is reported at once") {
  const auto r = parse_config("[meta]\nepochs = many\nbogus = 1\n[nowhere]\n[weights]\ngamma = -1\n");
  CHECK(r.errors.size() >= 4);
  std::string all;
  for (const auto& e : r.errors) all += e + "\n";
  CHECK(all.find("epochs") != std::string::npos);
  CHECK(all.find("bogus") != std::string::npos);
  CHECK(all.find("nowhere") != std::string::npos);
  CHECK(all.find("nonnegative") != std::string::npos);
}

TEST_CASE("load_config throws with the whole list") {
  const auto p = scratch_file("bad.ini");
  std::ofstream(p) << "meta.epochs = x\nmeta.nope = 1\n";
  try {
    load_config(p);
    FAIL("expected an error");
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    CHECK(what.find("epochs") != std::string::npos);
    CHECK(what.find("nope") != std::string::npos);
  }
  CHECK_THROWS_AS(load_config(scratch_file("does_not_exist.ini")), ConfigError);
}

TEST_CASE("to_text round trips every field") {
  RunConfig c;
  c.meta.epochs = 11;
  c.meta.optimizer = OuterOptimizer::sgd;
  c.meta.use_agm = false;
  c.meta.weights.alpha = 0.3;
  c.data.bias.delta = 0.4;
  c.experiment.seed_list = {3, 9};
  c.experiment.gamma_grid = {0.1, 1.0};
  c.eval_every = 5;
  const auto r = parse_config(to_text(c));
  REQUIRE(r.errors.empty());
  CHECK(config_fields(r.config) == config_fields(c));
  CHECK(to_text(r.config) == to_text(c));
}

TEST_CASE("overrides") {
  RunConfig c;
  apply_override(c, "meta.epochs=2");
  apply_override(c, "weights.gamma = 0.05");
  apply_override(c, "experiment.seeds=1,2,3");
  CHECK(c.meta.epochs == 2);
  CHECK(c.meta.weights.gamma == 0.05);
  CHECK(c.experiment.seed_list == std::vector<std::uint64_t>{1, 2, 3});
  CHECK_THROWS_AS(apply_override(c, "meta.epochs"), ConfigError);
  CHECK_THROWS_AS(apply_override(c, "meta.unknown=1"), ConfigError);
  CHECK_THROWS_AS(apply_override(c, "meta.epochs=-1"), ConfigError);
}

TEST_CASE("second-order meta-gradients are refused") {
  RunConfig c;
  c.meta.first_order = false;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

}  // TEST_SUITE

TEST_SUITE("model_io") {

TEST_CASE("save, load, save is byte-identical") {
  const auto m = sample_model();
  const auto a = scratch_file("a.fm2s");
  const auto b = scratch_file("b.fm2s");
  save_model(a, m);
  const auto loaded = load_model(a);
  save_model(b, loaded);
  CHECK(slurp(a) == slurp(b));
  CHECK(loaded.split_seed == 42);
  CHECK(loaded.test_fraction == 0.25);
  CHECK(loaded.backbone.seq_len == 4);
  CHECK(loaded.standardizer.mean == m.standardizer.mean);
  const auto fa = flatten(m.theta);
  const auto fb = flatten(loaded.theta);
  REQUIRE(fa.size() == fb.size());
  CHECK(std::memcmp(fa.data(), fb.data(), static_cast<std::size_t>(fa.size()) * sizeof(float)) == 0);
}

TEST_CASE("corrupt files are rejected") {
  const auto m = sample_model();
  const auto p = scratch_file("c.fm2s");
  save_model(p, m);
  const auto bytes = slurp(p);
  SUBCASE("truncated") {
    std::ofstream(p, std::ios::binary | std::ios::trunc).write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 5));
    CHECK_THROWS(load_model(p));
  }
  SUBCASE("bad magic") {
    auto bad = bytes;
    bad[0] = 'X';
    std::ofstream(p, std::ios::binary | std::ios::trunc).write(bad.data(), static_cast<std::streamsize>(bad.size()));
    CHECK_THROWS(load_model(p));
  }
  SUBCASE("trailing bytes") {
    auto bad = bytes + "zz";
    std::ofstream(p, std::ios::binary | std::ios::trunc).write(bad.data(), static_cast<std::streamsize>(bad.size()));
    CHECK_THROWS(load_model(p));
  }
  SUBCASE("missing") { CHECK_THROWS(load_model(scratch_file("absent.fm2s"))); }
}

}  // TEST_SUITE
