#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <doctest.h>

#include "gendf/tensor.hpp"
#include "helpers.hpp"

using namespace gendf;
using test::approx_equal;
using test::random_tensor;
using test::snapshot;

TEST_CASE("matmul identity, hand product, annihilator") {
  Tape tape;
  Tensor eye = Tensor::from_values({2, 2}, {1, 0, 0, 1});
  Tensor m = Tensor::from_values({2, 2}, {1, 2, 3, 4});
  CHECK(approx_equal(matmul(eye, m, tape).values(), m.values()));

  Tensor a = Tensor::from_values({1, 2}, {1, 2});
  Tensor b = Tensor::from_values({2, 1}, {3, 4});
  CHECK(matmul(a, b, tape).item() == doctest::Approx(11.0).epsilon(1e-15));

  Tensor zero = Tensor::zeros({2, 2});
  Tensor prod = matmul(zero, m, tape);
  for (double v : prod.values()) CHECK(v == 0.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tape tape;
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 3});
  try {
    matmul(a, b, tape);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("softmax closed forms") {
  Tape tape;
  Tensor sym = softmax(Tensor::from_values({2}, {0, 0}), 0, tape);
  CHECK(sym.values()[0] == doctest::Approx(0.5).epsilon(1e-15));

  Tensor big = softmax(Tensor::from_values({2}, {1000, 1000}), 0, tape);
  CHECK(big.values()[0] == doctest::Approx(0.5).epsilon(1e-15));

  Tensor closed = softmax(Tensor::from_values({2}, {0.0, std::log(3.0)}), 0, tape);
  CHECK(closed.values()[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(closed.values()[1] == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("softmax slices sum to one and shift invariance") {
  Rng rng(11);
  Tape tape;
  Tensor x = random_tensor({3, 5, 4}, rng);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    Tensor y = softmax(x, axis, tape);
    // sum along axis must be 1 within 1e-12 for every slice
    const auto& shape = x.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        double total = 0.0;
        for (std::size_t t = 0; t < shape[axis]; ++t) {
          total += y.values()[(o * shape[axis] + t) * inner + i];
        }
        CHECK(std::abs(total - 1.0) <= 1e-12);
      }
    }
  }
  // adding a constant to the slice leaves the output unchanged
  Tensor v = Tensor::from_values({4}, {0.3, -1.2, 2.0, 0.4});
  std::vector<double> shifted_vals = snapshot(v);
  for (double& e : shifted_vals) e += 17.5;
  Tensor shifted = Tensor::from_values({4}, shifted_vals);
  CHECK(approx_equal(softmax(v, 0, tape).values(), softmax(shifted, 0, tape).values(), 1e-13));

  CHECK_THROWS_AS(softmax(v, 1, tape), ShapeError);
}

TEST_CASE("layer_norm hand cases") {
  Tape tape;
  Tensor gain = Tensor::full({2}, 1.0);
  Tensor bias = Tensor::zeros({2});

  Tensor constant = Tensor::from_values({1, 2}, {3.0, 3.0});
  Tensor zeroed = layer_norm(constant, gain, bias, 1e-6, tape);
  for (double v : zeroed.values()) CHECK(std::abs(v) < 1e-9);

  Tensor row2 = Tensor::from_values({1, 2}, {1.0, 3.0});
  Tensor normed = layer_norm(row2, gain, bias, 1e-12, tape);
  CHECK(normed.values()[0] == doctest::Approx(-1.0).epsilon(1e-9));
  CHECK(normed.values()[1] == doctest::Approx(1.0).epsilon(1e-9));

  Tensor zero_gain = Tensor::zeros({2});
  Tensor bias2 = Tensor::from_values({2}, {0.5, -0.25});
  Tensor only_bias = layer_norm(row2, zero_gain, bias2, 1e-6, tape);
  CHECK(only_bias.values()[0] == 0.5);
  CHECK(only_bias.values()[1] == -0.25);

  CHECK_THROWS_AS(layer_norm(row2, gain, bias, 0.0, tape), ConfigError);
  CHECK_THROWS_AS(layer_norm(row2, gain, bias, -1.0, tape), ConfigError);
}

TEST_CASE("backward populates gradients and respects contracts") {
  SUBCASE("sum gives all-ones gradient") {
    Tape tape;
    Tensor x = Tensor::from_values({3}, {4.0, -1.0, 2.5}, true);
    Tensor loss = sum_all(x, tape);
    backward(loss, tape);
    for (double g : x.grad()) CHECK(g == 1.0);
  }
  SUBCASE("sum of squares") {
    Tape tape;
    Tensor x = Tensor::from_values({2}, {1.0, -2.0}, true);
    Tensor loss = sum_all(mul(x, x, tape), tape);
    backward(loss, tape);
    CHECK(x.grad()[0] == doctest::Approx(2.0));
    CHECK(x.grad()[1] == doctest::Approx(-4.0));
  }
  SUBCASE("backward twice errors") {
    Tape tape;
    Tensor x = Tensor::from_values({2}, {1.0, 2.0}, true);
    Tensor loss = sum_all(x, tape);
    backward(loss, tape);
    CHECK_THROWS_AS(backward(loss, tape), Error);
  }
  SUBCASE("non-scalar loss errors") {
    Tape tape;
    Tensor x = Tensor::from_values({2}, {1.0, 2.0}, true);
    Tensor y = add(x, x, tape);
    CHECK_THROWS_AS(backward(y, tape), ShapeError);
  }
  SUBCASE("loss must come from the tape") {
    Tape tape;
    Tensor loose = Tensor::scalar(1.0, true);
    CHECK_THROWS_AS(backward(loose, tape), Error);
  }
  SUBCASE("frozen tensors receive no grad") {
    Tape tape;
    Tensor frozen = Tensor::from_values({2}, {1.0, 2.0}, false);
    Tensor live = Tensor::from_values({2}, {3.0, 4.0}, true);
    Tensor loss = sum_all(mul(frozen, live, tape), tape);
    backward(loss, tape);
    CHECK(!frozen.has_grad());
    CHECK(live.has_grad());
  }
  SUBCASE("tensors unreachable from the loss stay gradient-free") {
    Tape tape;
    Tensor x = Tensor::from_values({2}, {1.0, 2.0}, true);
    Tensor used = mul(x, x, tape);
    Tensor unused = add(x, x, tape);  // recorded but not part of the loss
    Tensor loss = sum_all(used, tape);
    backward(loss, tape);
    CHECK(!unused.has_grad());
  }
}

TEST_CASE("operations never mutate their inputs") {
  Rng rng(23);
  Tape tape;
  Tensor a = random_tensor({3, 4}, rng, true);
  Tensor b = random_tensor({3, 4}, rng, true);
  Tensor w = random_tensor({5, 4}, rng, true);
  const auto sa = snapshot(a), sb = snapshot(b), sw = snapshot(w);
  add(a, b, tape);
  mul(a, b, tape);
  linear(a, w, tape);
  softmax(a, 1, tape);
  gelu(a, tape);
  mean_axis(a, 0, tape);
  permute(a, {1, 0}, tape);
  CHECK(snapshot(a) == sa);
  CHECK(snapshot(b) == sb);
  CHECK(snapshot(w) == sw);
}

TEST_CASE("finite difference oracle on closed forms") {
  SUBCASE("quadratic is exact to rounding") {
    Tensor x = Tensor::scalar(3.0, true);
    auto f = [&](Tape& tape) { return sum_all(mul(x, x, tape), tape); };
    CHECK(finite_difference_check(f, {x}, 1e-5) < 1e-8);
  }
  SUBCASE("two-layer perceptron") {
    Rng rng(5);
    Tensor w1 = random_tensor({6, 4}, rng, true, 0.5);
    Tensor b1 = random_tensor({6}, rng, true, 0.1);
    Tensor w2 = random_tensor({1, 6}, rng, true, 0.5);
    Tensor x = random_tensor({3, 4}, rng);
    auto f = [&](Tape& tape) {
      Tensor h = gelu(add_bias(linear(x, w1, tape), b1, tape), tape);
      return mean_all(linear(h, w2, tape), tape);
    };
    CHECK(finite_difference_check(f, {w1, b1, w2}, 1e-5) < 1e-4);
  }
  SUBCASE("frozen parameters are excluded") {
    Tensor x = Tensor::scalar(2.0, true);
    Tensor frozen = Tensor::scalar(100.0, false);
    auto f = [&](Tape& tape) { return mul(mul(x, x, tape), frozen, tape); };
    // passes because the frozen entry is skipped, not differentiated
    CHECK(finite_difference_check(f, {x, frozen}, 1e-5) < 1e-8);
  }
  SUBCASE("h must be positive") {
    Tensor x = Tensor::scalar(1.0, true);
    auto f = [&](Tape& tape) { return sum_all(x, tape); };
    CHECK_THROWS_AS(finite_difference_check(f, {x}, 0.0), ConfigError);
  }
}

// Every differentiable op has to pass the central-difference check on random
// small inputs.
TEST_CASE("per-op gradient checks") {
  Rng rng(77);
  struct OpCase {
    const char* name;
    std::function<double()> run;  // builds inputs, returns max rel err
  };

  auto fd = [](const std::function<Tensor(Tape&)>& f, std::vector<Tensor> params) {
    return finite_difference_check(f, params, 1e-5);
  };

  std::vector<OpCase> cases;
  cases.push_back({"add", [&] {
    Tensor a = random_tensor({2, 3}, rng, true), b = random_tensor({2, 3}, rng, true);
    return fd([&](Tape& t) { return sum_all(mul(add(a, b, t), add(a, b, t), t), t); }, {a, b});
  }});
  cases.push_back({"sub", [&] {
    Tensor a = random_tensor({2, 3}, rng, true), b = random_tensor({2, 3}, rng, true);
    return fd([&](Tape& t) { return sum_all(mul(sub(a, b, t), a, t), t); }, {a, b});
  }});
  cases.push_back({"mul_scale", [&] {
    Tensor a = random_tensor({2, 3}, rng, true);
    return fd([&](Tape& t) { return sum_all(scale(mul(a, a, t), 1.7, t), t); }, {a});
  }});
  cases.push_back({"gelu", [&] {
    Tensor a = random_tensor({8}, rng, true);
    return fd([&](Tape& t) { return sum_all(gelu(a, t), t); }, {a});
  }});
  cases.push_back({"softplus", [&] {
    Tensor a = random_tensor({8}, rng, true, 2.0);
    return fd([&](Tape& t) { return sum_all(softplus(a, t), t); }, {a});
  }});
  cases.push_back({"log_sqrt", [&] {
    Tensor a = Tensor::from_values({3}, {0.5, 1.7, 2.9}, true);
    return fd([&](Tape& t) { return sum_all(log_elem(sqrt_elem(a, t), t), t); }, {a});
  }});
  cases.push_back({"clamp_interior", [&] {
    Tensor a = Tensor::from_values({3}, {0.2, 0.5, 0.8}, true);
    return fd([&](Tape& t) { return sum_all(mul(clamp(a, 0.0, 1.0, t), a, t), t); }, {a});
  }});
  cases.push_back({"matmul", [&] {
    Tensor a = random_tensor({3, 4}, rng, true), b = random_tensor({4, 2}, rng, true);
    return fd([&](Tape& t) { return mean_all(mul(matmul(a, b, t), matmul(a, b, t), t), t); },
              {a, b});
  }});
  cases.push_back({"bmm", [&] {
    Tensor a = random_tensor({2, 3, 4}, rng, true), b = random_tensor({2, 4, 2}, rng, true);
    return fd([&](Tape& t) { return mean_all(mul(bmm(a, b, t), bmm(a, b, t), t), t); }, {a, b});
  }});
  cases.push_back({"linear", [&] {
    Tensor x = random_tensor({2, 3, 4}, rng, true), w = random_tensor({5, 4}, rng, true);
    return fd([&](Tape& t) { return mean_all(mul(linear(x, w, t), linear(x, w, t), t), t); },
              {x, w});
  }});
  cases.push_back({"dot", [&] {
    Tensor a = random_tensor({5}, rng, true), b = random_tensor({5}, rng, true);
    return fd([&](Tape& t) { return mul(dot(a, b, t), dot(a, b, t), t); }, {a, b});
  }});
  cases.push_back({"reshape_permute", [&] {
    Tensor a = random_tensor({2, 3, 4}, rng, true);
    return fd(
        [&](Tape& t) {
          Tensor p = permute(reshape(a, {2, 2, 2, 3}, t), {0, 2, 1, 3}, t);
          return sum_all(mul(p, p, t), t);
        },
        {a});
  }});
  cases.push_back({"mean_axis", [&] {
    Tensor a = random_tensor({3, 4, 2}, rng, true);
    return fd([&](Tape& t) { return sum_all(mul(mean_axis(a, 1, t), mean_axis(a, 1, t), t), t); },
              {a});
  }});
  cases.push_back({"softmax", [&] {
    Tensor a = random_tensor({3, 4}, rng, true);
    Tensor target = random_tensor({3, 4}, rng);
    return fd([&](Tape& t) { return sum_all(mul(softmax(a, 1, t), target, t), t); }, {a});
  }});
  cases.push_back({"layer_norm", [&] {
    Tensor a = random_tensor({3, 5}, rng, true);
    Tensor g = random_tensor({5}, rng, true), b = random_tensor({5}, rng, true);
    Tensor target = random_tensor({3, 5}, rng);
    return fd(
        [&](Tape& t) { return sum_all(mul(layer_norm(a, g, b, 1e-5, t), target, t), t); },
        {a, g, b});
  }});
  cases.push_back({"add_bias_mul_gain", [&] {
    Tensor x = random_tensor({2, 3, 4}, rng, true);
    Tensor g = random_tensor({4}, rng, true), b = random_tensor({4}, rng, true);
    return fd(
        [&](Tape& t) {
          Tensor y = add_bias(mul_gain(x, g, t), b, t);
          return sum_all(mul(y, y, t), t);
        },
        {x, g, b});
  }});
  cases.push_back({"add_tokenwise", [&] {
    Tensor x = random_tensor({2, 3, 4}, rng, true);
    Tensor p = random_tensor({3, 4}, rng, true);
    return fd(
        [&](Tape& t) {
          Tensor y = add_tokenwise(x, p, t);
          return sum_all(mul(y, y, t), t);
        },
        {x, p});
  }});
  cases.push_back({"add_samplewise", [&] {
    Tensor x = random_tensor({2, 3, 4}, rng, true);
    Tensor s = random_tensor({2, 4}, rng, true);
    return fd(
        [&](Tape& t) {
          Tensor y = add_samplewise(x, s, t);
          return sum_all(mul(y, y, t), t);
        },
        {x, s});
  }});
  cases.push_back({"prepend_token", [&] {
    Tensor tok = random_tensor({4}, rng, true);
    Tensor x = random_tensor({2, 3, 4}, rng, true);
    return fd(
        [&](Tape& t) {
          Tensor y = prepend_token(tok, x, t);
          return sum_all(mul(y, y, t), t);
        },
        {tok, x});
  }});
  cases.push_back({"rows_and_stacks", [&] {
    Tensor x = random_tensor({4, 3}, rng, true);
    return fd(
        [&](Tape& t) {
          Tensor sel = select_rows(x, {2, 0, 2}, t);
          Tensor r = row(x, 1, t);
          Tensor st = stack_rows({r, r}, t);
          Tensor d = stack_scalars({dot(r, r, t), sum_all(sel, t), sum_all(st, t)}, t);
          return sum_all(mul(d, d, t), t);
        },
        {x});
  }});
  cases.push_back({"gather_labels", [&] {
    Tensor x = random_tensor({3, 2}, rng, true);
    std::vector<int> labels = {1, 0, 1};
    return fd(
        [&](Tape& t) {
          Tensor p = softmax(x, 1, t);
          return sum_all(mul(gather_labels(p, labels, t), gather_labels(p, labels, t), t), t);
        },
        {x});
  }});
  cases.push_back({"mul_div_scalar", [&] {
    Tensor x = random_tensor({4}, rng, true);
    Tensor s = Tensor::scalar(1.3, true);
    return fd(
        [&](Tape& t) {
          Tensor y = div_scalar(mul_scalar(x, s, t), add(s, s, t), t);
          return sum_all(mul(y, y, t), t);
        },
        {x, s});
  }});
  cases.push_back({"l2_euclidean", [&] {
    Tensor a = random_tensor({5}, rng, true), b = random_tensor({5}, rng, true);
    return fd([&](Tape& t) { return add(l2_norm(a, t), euclidean(a, b, t), t); }, {a, b});
  }});

  for (const OpCase& c : cases) {
    CAPTURE(c.name);
    CHECK(c.run() < 1e-4);
  }
}

TEST_CASE("non-finite values are rejected, not propagated") {
  Tape tape;
  Tensor x = Tensor::from_values({2}, {-1.0, 2.0}, true);
  CHECK_THROWS_AS(sqrt_elem(x, tape), NumericError);  // sqrt(-1) -> NaN
  Tensor big = Tensor::full({2}, 1e308);
  CHECK_THROWS_AS(add(big, big, tape), NumericError);  // overflow -> inf
  CHECK_THROWS_AS(Tensor::from_values({1}, {std::nan("")}), NumericError);
}

TEST_CASE("tape bookkeeping") {
  Tape tape;
  Tensor x = Tensor::from_values({2}, {1.0, 2.0}, true);
  CHECK(tape.num_records() == 0);
  Tensor y = mul(x, x, tape);
  CHECK(tape.num_records() == 1);
  Tensor frozen = Tensor::from_values({2}, {5.0, 6.0}, false);
  add(frozen, frozen, tape);  // nothing trainable feeds this op
  CHECK(tape.num_records() == 1);
  Tensor loss = sum_all(y, tape);
  CHECK(!tape.backward_done());
  backward(loss, tape);
  CHECK(tape.backward_done());
}
