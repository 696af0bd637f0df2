#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "navgen/error.hpp"
#include "navgen/ndgrad.hpp"
#include "support.hpp"

using namespace navgen;
using namespace navgen::ndgrad;

TEST_CASE("every op agrees with central differences") {
  for (const auto& r : testing::grad_check_all_ops(101)) {
    CAPTURE(r.op);
    CHECK(r.points == 20);
    CHECK(r.max_rel_err <= 1e-4);
  }
}

TEST_CASE("softmax and logsumexp small cases") {
  Tape tape;
  const auto s = softmax(tape.constant(Shape{1, 2}, {0.0, 0.0}), 1);
  CHECK(s.at(0) == 0.5);
  CHECK(s.at(1) == 0.5);
  const auto l = logsumexp(tape.constant(Shape{1, 2}, {std::log(0.2), std::log(0.1)}), 1);
  CHECK(l.item() == doctest::Approx(std::log(0.3)).epsilon(1e-14));
}

TEST_CASE("tanh slope at zero is one") {
  ParameterStore store;
  auto& x = store.add("x", Shape{1});
  Tape tape;
  tape.backward(tanh(tape.param(x)));
  CHECK(x.grad()[0] == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("gradient of sum is all ones") {
  ParameterStore store;
  auto& x = store.add("x", Shape{2, 3});
  x.value() = {1, -2, 3, 0.5, 7, -1};
  Tape tape;
  tape.backward(sum(tape.param(x)));
  for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("a second backward on the same tape is rejected") {
  ParameterStore store;
  auto& x = store.add("x", Shape{1});
  Tape tape;
  const auto y = mul(tape.param(x), tape.param(x));
  tape.backward(y);
  CHECK_THROWS_AS(tape.backward(y), ConfigError);
  tape.clear();
  CHECK_NOTHROW(tape.backward(mul(tape.param(x), tape.param(x))));
}

TEST_CASE("shape errors name both shapes") {
  Tape tape;
  const auto a = tape.constant(Shape{2, 3}, std::vector<double>(6, 1.0));
  const auto b = tape.constant(Shape{4, 2}, std::vector<double>(8, 1.0));
  try {
    (void)matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x2]") != std::string::npos);
  }
}

TEST_CASE("non-finite forward values raise") {
  Tape tape;
  const auto a = tape.constant(Shape{1}, {1e308});
  CHECK_THROWS_AS((void)scale(a, 10.0), NumericalError);
}

TEST_CASE("backward needs a scalar") {
  Tape tape;
  const auto a = tape.constant(Shape{2}, {1.0, 2.0});
  CHECK_THROWS_AS(tape.backward(a), ShapeError);
}

TEST_CASE("sgd on x squared contracts by 0.8 per step") {
  ParameterStore store;
  auto& x = store.add("x", Shape{1});
  x.value()[0] = 1.0;
  std::vector<Parameter*> ps{&x};
  for (int i = 0; i < 50; ++i) {
    x.zero_grad();
    Tape tape;
    const auto v = tape.param(x);
    tape.backward(mul(v, v));
    sgd_step(ps, 0.1);
  }
  CHECK(std::abs(x.value()[0]) < 1e-3);
  CHECK(x.value()[0] == doctest::Approx(std::pow(0.8, 50)).epsilon(1e-10));
  CHECK_THROWS_AS(sgd_step(ps, 0.0), ConfigError);
}

TEST_CASE("adam first step moves by lr times the gradient sign") {
  // With bias correction m_hat = g and v_hat = g^2 at t = 1.
  ParameterStore store;
  auto& x = store.add("x", Shape{2});
  x.value() = {0.5, -0.5};
  x.grad() = {3.0, -0.25};
  std::vector<Parameter*> ps{&x};
  Adam adam(0.01);
  adam.step(ps);
  CHECK(adam.steps() == 1);
  CHECK(x.value()[0] == doctest::Approx(0.5 - 0.01 * 3.0 / (3.0 + 1e-8)).epsilon(1e-12));
  CHECK(x.value()[1] == doctest::Approx(-0.5 + 0.01 * 0.25 / (0.25 + 1e-8)).epsilon(1e-12));
}

TEST_CASE("zero gradient leaves parameters unchanged") {
  ParameterStore store;
  auto& x = store.add("x", Shape{3});
  x.value() = {1.0, 2.0, 3.0};
  std::vector<Parameter*> ps{&x};
  Adam adam(0.1);
  adam.step(ps);
  sgd_step(ps, 0.1);
  CHECK(x.value() == std::vector<double>{1.0, 2.0, 3.0});
}

TEST_CASE("gradient clipping rescales to the bound") {
  ParameterStore store;
  auto& x = store.add("x", Shape{2});
  x.grad() = {3.0, 4.0};
  std::vector<Parameter*> ps{&x};
  CHECK(clip_grad_norm(ps, 1.0) == doctest::Approx(5.0));
  CHECK(x.grad()[0] == doctest::Approx(0.6));
  CHECK(x.grad()[1] == doctest::Approx(0.8));
}

TEST_CASE("checkpoints round trip") {
  ParameterStore a;
  auto& w = a.add("w", Shape{2, 2});
  w.value() = {1.5, -2.0, 0.25, 3.0};
  ParameterStore b;
  b.add("w", Shape{2, 2});
  const auto dir = std::filesystem::temp_directory_path() / "navgen_ckpt_test.json";
  save_checkpoint(dir.string(), a, {{"note", "x"}});
  const auto meta = load_checkpoint(dir.string(), b);
  CHECK(b.get("w").value() == w.value());
  CHECK(meta["note"] == "x");
  ParameterStore c;
  c.add("w", Shape{3});
  CHECK_THROWS_AS(load_checkpoint(dir.string(), c), DataError);
  std::filesystem::remove(dir);
}
