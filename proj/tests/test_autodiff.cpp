#include <doctest.h>

#include <cstring>
#include <functional>
#include <limits>
#include <random>

#include "fairm2s/autodiff.hpp"
#include "fairm2s/param_set.hpp"
#include "support.hpp"

using namespace fairm2s;
using fm_test::numeric_gradient;
using fm_test::random_tensor;
using fm_test::relative_error;

namespace {

/// A unary-or-binary op under test: builds the output from leaves on a tape.
struct OpCase {
  const char* name;
  int arity;
  std::function<std::pair<Tensor<double>, Tensor<double>>(std::mt19937_64&)> inputs;
  std::function<Var<double>(Var<double>, Var<double>)> op;
};

/// Scalarizes op output with fixed random weights so every output entry matters.
double evaluate(const OpCase& c, const Tensor<double>& a, const Tensor<double>& b, const Tensor<double>* weights,
                Vector<double>* grad_out) {
  Tape<double> tape;
  auto va = tape.leaf(a);
  auto vb = tape.leaf(b);
  auto out = c.op(va, vb);
  auto w = tape.constant(*weights);
  auto root = sum(mul(out, w));
  if (grad_out) {
    auto g = tape.backward(root);
    Vector<double> ga = Eigen::Map<const Vector<double>>(g[va].data(), a.size());
    Vector<double> gb = Eigen::Map<const Vector<double>>(g[vb].data(), b.size());
    grad_out->resize(a.size() + (c.arity == 2 ? b.size() : 0));
    grad_out->head(a.size()) = ga;
    if (c.arity == 2) grad_out->tail(b.size()) = gb;
  }
  return root.item();
}

/// Moves entries away from the kinks of abs / max_with / clamp so central
/// differences do not straddle them.
Tensor<double> away_from(Tensor<double> t, std::initializer_list<double> kinks, double gap = 0.05) {
  for (Eigen::Index i = 0; i < t.size(); ++i)
    for (double k : kinks)
      if (std::abs(t.data()[i] - k) < gap) t.data()[i] = k + (t.data()[i] >= k ? gap : -gap);
  return t;
}

std::vector<OpCase> op_cases() {
  auto same = [](int r, int c) {
    return [r, c](std::mt19937_64& rng) { return std::pair{random_tensor(rng, r, c), random_tensor(rng, r, c)}; };
  };
  auto unary = [](int r, int c, double lo, double hi) {
    return [=](std::mt19937_64& rng) { return std::pair{random_tensor(rng, r, c, lo, hi), random_tensor(rng, 1, 1)}; };
  };
  return {
      {"add", 2, same(3, 4), [](auto a, auto b) { return a + b; }},
      {"sub", 2, same(3, 4), [](auto a, auto b) { return a - b; }},
      {"mul", 2, same(3, 4), [](auto a, auto b) { return mul(a, b); }},
      {"matmul", 2, [](auto& rng) { return std::pair{random_tensor(rng, 3, 5), random_tensor(rng, 5, 2)}; },
       [](auto a, auto b) { return matmul(a, b); }},
      {"add_row", 2, [](auto& rng) { return std::pair{random_tensor(rng, 4, 3), random_tensor(rng, 1, 3)}; },
       [](auto a, auto b) { return add_row(a, b); }},
      {"dot", 2, same(6, 1), [](auto a, auto b) { return dot(a, b); }},
      {"concat_cols", 2, [](auto& rng) { return std::pair{random_tensor(rng, 3, 2), random_tensor(rng, 3, 4)}; },
       [](auto a, auto b) { return concat_cols(a, b); }},
      {"sigmoid", 1, unary(3, 3, -4, 4), [](auto a, auto) { return sigmoid(a); }},
      {"tanh", 1, unary(3, 3, -3, 3), [](auto a, auto) { return tanh(a); }},
      {"log", 1, unary(3, 3, 0.2, 3), [](auto a, auto) { return log(a); }},
      {"abs", 1,
       [](auto& rng) { return std::pair{away_from(random_tensor(rng, 3, 3), {0.0}), random_tensor(rng, 1, 1)}; },
       [](auto a, auto) { return abs(a); }},
      {"max_with", 1,
       [](auto& rng) { return std::pair{away_from(random_tensor(rng, 3, 3), {0.1}), random_tensor(rng, 1, 1)}; },
       [](auto a, auto) { return max_with(a, 0.1); }},
      {"clamp", 1,
       [](auto& rng) {
         return std::pair{away_from(random_tensor(rng, 3, 3), {-0.5, 0.5}), random_tensor(rng, 1, 1)};
       },
       [](auto a, auto) { return clamp(a, -0.5, 0.5); }},
      {"scale", 1, unary(2, 3, -1, 1), [](auto a, auto) { return scale(a, 2.5); }},
      {"add_scalar", 1, unary(2, 3, -1, 1), [](auto a, auto) { return add_scalar(a, -0.7); }},
      {"negate", 1, unary(2, 3, -1, 1), [](auto a, auto) { return -a; }},
      {"slice_cols", 1, unary(3, 6, -1, 1), [](auto a, auto) { return slice_cols(a, 2, 3); }},
      {"slice_rows", 1, unary(5, 2, -1, 1), [](auto a, auto) { return slice_rows(a, 1, 2); }},
      {"sum", 1, unary(3, 4, -1, 1), [](auto a, auto) { return sum(a); }},
      {"mean", 1, unary(3, 4, -1, 1), [](auto a, auto) { return mean(a); }},
      {"mean_rows", 1, unary(3, 4, -1, 1), [](auto a, auto) { return mean_rows(a); }},
      {"mean_cols", 1, unary(3, 4, -1, 1), [](auto a, auto) { return mean_cols(a); }},
  };
}

}  // namespace

TEST_SUITE("autodiff") {

TEST_CASE("sigmoid and tanh at zero") {
  Tape<float> tape;
  auto z = tape.constant(0.0f);
  CHECK(sigmoid(z).item() == 0.5f);
  CHECK(tanh(z).item() == 0.0f);
}

TEST_CASE("sigmoid is finite and symmetric at large magnitude") {
  Tape<double> tape;
  Tensor<double> x(1, 4);
  x << -800, -30, 30, 800;
  auto s = sigmoid(tape.constant(x)).value();
  CHECK(s(0, 0) >= 0.0);
  CHECK(s(0, 3) <= 1.0);
  CHECK(s(0, 1) + s(0, 2) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("matmul matches a per-entry dot-product oracle") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = random_tensor(rng, 2, 3);
    const auto b = random_tensor(rng, 3, 1);
    Tape<double> tape;
    const auto c = matmul(tape.constant(a), tape.constant(b)).value();
    REQUIRE(c.rows() == 2);
    REQUIRE(c.cols() == 1);
    for (int i = 0; i < 2; ++i) {
      double expect = 0;
      for (int k = 0; k < 3; ++k) expect += a(i, k) * b(k, 0);
      CHECK(c(i, 0) == doctest::Approx(expect).epsilon(1e-14));
    }
  }
}

TEST_CASE("gradient of sum is all ones") {
  Tape<float> tape;
  auto theta = tape.leaf(Tensor<float>::Random(3, 4));
  const auto g = tape.backward(sum(theta));
  CHECK(g[theta] == Tensor<float>::Ones(3, 4));
}

TEST_CASE("leaf unreachable from the root gets exactly zero gradient") {
  Tape<double> tape;
  auto used = tape.leaf(Tensor<double>::Constant(2, 2, 0.3));
  auto unused = tape.leaf(Tensor<double>::Constant(3, 1, 1.7));
  const auto g = tape.backward(sum(tanh(used)));
  CHECK(g[unused] == Tensor<double>::Zero(3, 1));
}

TEST_CASE("root built only from constants leaves parameters at zero") {
  Tape<double> tape;
  auto p = tape.leaf(Tensor<double>::Ones(2, 2));
  auto c = tape.constant(Tensor<double>::Ones(2, 2));
  const auto root = sum(mul(c, c));
  CHECK_FALSE(tape.requires_grad(root));
  CHECK(tape.backward(root)[p] == Tensor<double>::Zero(2, 2));
}

TEST_CASE("sigmoid(w.x) gradient matches central differences") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto w = random_tensor(rng, 1, 5);
    const auto x = random_tensor(rng, 5, 1);
    auto f = [&](const Vector<double>& wv) {
      Tape<double> tape;
      Tensor<double> wt = Eigen::Map<const Tensor<double>>(wv.data(), 1, 5);
      return sigmoid(matmul(tape.constant(wt), tape.constant(x))).item();
    };
    Tape<double> tape;
    auto wl = tape.leaf(w);
    const auto g = tape.backward(sigmoid(matmul(wl, tape.constant(x))))[wl];
    const Vector<double> analytic = Eigen::Map<const Vector<double>>(g.data(), 5);
    const Vector<double> wv = Eigen::Map<const Vector<double>>(w.data(), 5);
    CHECK(relative_error(analytic, numeric_gradient(f, wv)) <= 1e-6);

    // 32-bit analytic gradient against the same 64-bit difference oracle.
    Tape<float> tf;
    auto wlf = tf.leaf(w.cast<float>());
    const auto gf = tf.backward(sigmoid(matmul(wlf, tf.constant(Tensor<float>(x.cast<float>())))))[wlf];
    const Vector<double> analytic32 = Eigen::Map<const Vector<float>>(gf.data(), 5).cast<double>();
    CHECK(relative_error(analytic32, numeric_gradient(f, wv)) <= 1e-3);
  }
}

TEST_CASE("every primitive matches central differences over 100 random trials") {
  for (const auto& c : op_cases()) {
    CAPTURE(c.name);
    std::mt19937_64 rng(1234);
    double worst = 0;
    for (int trial = 0; trial < 100; ++trial) {
      const auto [a, b] = c.inputs(rng);
      Tape<double> probe;
      const auto shape = c.op(probe.constant(a), probe.constant(b)).value();
      const auto weights = random_tensor(rng, static_cast<int>(shape.rows()), static_cast<int>(shape.cols()));

      Vector<double> analytic;
      evaluate(c, a, b, &weights, &analytic);

      Vector<double> x(a.size() + (c.arity == 2 ? b.size() : 0));
      x.head(a.size()) = Eigen::Map<const Vector<double>>(a.data(), a.size());
      if (c.arity == 2) x.tail(b.size()) = Eigen::Map<const Vector<double>>(b.data(), b.size());
      auto f = [&](const Vector<double>& v) {
        Tensor<double> av = Eigen::Map<const Tensor<double>>(v.data(), a.rows(), a.cols());
        Tensor<double> bv = c.arity == 2 ? Tensor<double>(Eigen::Map<const Tensor<double>>(v.data() + a.size(), b.rows(), b.cols())) : b;
        return evaluate(c, av, bv, &weights, nullptr);
      };
      worst = std::max(worst, relative_error(analytic, numeric_gradient(f, x)));
    }
    CHECK(worst <= 1e-6);
  }
}

TEST_CASE("backward is linear in the root") {
  std::mt19937_64 rng(3);
  Tape<double> tape;
  auto x = tape.leaf(random_tensor(rng, 3, 3));
  auto y = tape.leaf(random_tensor(rng, 3, 1));
  auto r1 = sum(tanh(matmul(x, y)));
  auto r2 = mean(mul(sigmoid(x), x));
  auto both = r1 + r2;
  const auto g1 = tape.backward(r1);
  const auto g2 = tape.backward(r2);
  const auto g12 = tape.backward(both);
  CHECK((g12[x] - (g1[x] + g2[x])).cwiseAbs().maxCoeff() <= 1e-15);
  CHECK((g12[y] - (g1[y] + g2[y])).cwiseAbs().maxCoeff() <= 1e-15);
}

TEST_CASE("ops do not mutate their inputs and repeat bit-identically") {
  std::mt19937_64 rng(5);
  const auto a = random_tensor(rng, 4, 3);
  const auto b = random_tensor(rng, 3, 2);
  auto run = [&] {
    Tape<double> tape;
    auto va = tape.leaf(a);
    auto vb = tape.leaf(b);
    auto out = sum(tanh(matmul(va, vb)));
    const auto g = tape.backward(out);
    CHECK(va.value() == a);
    CHECK(vb.value() == b);
    return std::pair{out.item(), g[va]};
  };
  const auto first = run();
  const auto second = run();
  CHECK(first.first == second.first);
  CHECK(first.second == second.second);
}

TEST_CASE("shape and value errors") {
  Tape<double> tape;
  auto a = tape.leaf(Tensor<double>::Ones(2, 3));
  auto b = tape.leaf(Tensor<double>::Ones(3, 2));
  CHECK_THROWS_AS(a + b, ShapeError);
  CHECK_THROWS_AS(mul(a, b), ShapeError);
  CHECK_THROWS_AS(matmul(a, a), ShapeError);
  CHECK_THROWS_AS(concat_cols(a, b), ShapeError);
  CHECK_THROWS_AS(slice_cols(a, 2, 2), ShapeError);
  CHECK_THROWS_AS(tape.backward(a), ShapeError);
  CHECK_THROWS_AS(log(tape.constant(0.0)), NumericError);
  CHECK_THROWS_AS(tape.constant(std::numeric_limits<double>::infinity()), NumericError);
  CHECK_THROWS_AS(scale(tape.constant(1e308), 1e10), NumericError);
}

TEST_CASE("flatten follows declaration order") {
  ParamSet<double> p;
  Tensor<double> a(2, 2);
  a << 1, 2, 3, 4;
  Tensor<double> b(1, 3);
  b << 5, 6, 7;
  p.add("a", a);
  p.add("b", b);
  const auto v = flatten(p);
  REQUIRE(v.size() == 7);
  for (int i = 0; i < 7; ++i) CHECK(v(i) == i + 1);
}

TEST_CASE("unflatten round-trips bit-exactly") {
  std::mt19937_64 rng(9);
  ParamSet<float> p;
  p.add("w", random_tensor(rng, 5, 4).cast<float>());
  p.add("b", random_tensor(rng, 1, 4).cast<float>());
  p.add("v", random_tensor(rng, 3, 1).cast<float>());
  const auto back = unflatten<float>(flatten(p), p);
  CHECK(back == p);
  CHECK(std::memcmp(flatten(back).data(), flatten(p).data(), sizeof(float) * static_cast<std::size_t>(p.total_size())) == 0);
}

TEST_CASE("flatten order is stable across constructions") {
  auto build = [] {
    ParamSet<double> p;
    p.add("x", Tensor<double>::Constant(2, 3, 0.5));
    p.add("y", Tensor<double>::Constant(1, 2, -1.5));
    return p;
  };
  CHECK(flatten(build()) == flatten(build()));
}

TEST_CASE("param set rejects duplicates and wrong lengths") {
  ParamSet<double> p;
  p.add("x", Tensor<double>::Zero(2, 2));
  CHECK_THROWS_AS(p.add("x", Tensor<double>::Zero(1, 1)), std::invalid_argument);
  CHECK_THROWS_AS(unflatten<double>(Vector<double>::Zero(5), p), ShapeError);
}

}  // TEST_SUITE
