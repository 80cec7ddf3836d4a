#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "dgs/gradcheck.hpp"
#include "dgs/rng.hpp"
#include "dgs/tape.hpp"

using namespace dgs;

namespace {

Tensor random_tensor(Rng& rng, Shape s, float lo = -1.0f, float hi = 1.0f) {
  Tensor t(s);
  for (float& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("sum gradient is all ones") {
  Rng rng(1);
  Tape t(true);
  VarId x = t.leaf_input(random_tensor(rng, {1, 3, 4, 4}), true);
  t.backward(t.sum(x));
  for (float g : t.grad(x)) CHECK(g == 1.0f);
}

TEST_CASE("sum of squares gradient is 2x") {
  Tape t(true);
  VarId x = t.leaf_input(Tensor::full({1, 2, 2, 2}, 3.0f), true);
  t.backward(t.sum(t.square(x)));
  for (float g : t.grad(x)) CHECK(g == 6.0f);
}

TEST_CASE("backward validates scalar output and single use") {
  Rng rng(2);
  Tape t(true);
  VarId x = t.leaf_input(random_tensor(rng, {1, 2, 2, 2}), true);
  CHECK_THROWS_AS(t.backward(x), ValidationError);
  VarId s = t.sum(x);
  t.backward(s);
  CHECK_THROWS_AS(t.backward(s), ValidationError);

  Tape frozen(false);
  VarId y = frozen.leaf_input(random_tensor(rng, {1, 1, 1, 1}), true);
  CHECK_THROWS_AS(frozen.backward(y), ValidationError);
}

TEST_CASE("identical graphs give bitwise identical gradients") {
  Rng rng(3);
  Tensor xin = random_tensor(rng, {1, 4, 5, 5});
  Tensor w = random_tensor(rng, {4, 2, 3, 3}, -0.5f, 0.5f);
  ConvSpec spec{4, 4, 3, 1, 2, false};
  auto run = [&]() {
    Tape t(true);
    VarId x = t.leaf_input(xin, true);
    VarId wv = t.leaf_input(w, true);
    VarId y = t.leaky_relu(t.conv2d(x, wv, kNoVar, spec), 0.1f);
    t.backward(t.sum(y));
    return std::pair<std::vector<float>, std::vector<float>>(t.grad(x), t.grad(wv));
  };
  auto a = run();
  auto b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}

TEST_CASE("unreached parameters report zero gradients") {
  Rng rng(4);
  Tape t(true);
  VarId used = t.leaf_input(random_tensor(rng, {1, 2, 2, 2}), true);
  VarId unused = t.leaf_input(random_tensor(rng, {1, 2, 2, 2}), true);
  t.backward(t.sum(used));
  for (float g : t.grad(unused)) CHECK(g == 0.0f);
}

TEST_CASE("linear op gradient error is at machine precision") {
  Rng rng(5);
  Tensor xin = random_tensor(rng, {1, 3, 4, 4});
  Tape t(true);
  VarId x = t.leaf_input(xin, true);
  VarId y = t.affine(x, 1.7f, -0.3f);
  t.backward(t.sum(y));
  std::map<std::string, std::vector<float>> grads{{"x", t.grad(x)}};
  ref::RTensor rx = ref::RTensor::from(xin);
  ref::SlotList slots{{"x", &rx.data}};
  double err = refcheck::fd_max_err(
      slots, [&]() { return std::vector<double>{ref::sum(ref::affine(rx, 1.7, -0.3))}; }, {grads});
  CHECK(err < 1e-6);
}

TEST_CASE("attention probabilities: rows sum to one") {
  Rng rng(6);
  Tensor q = random_tensor(rng, {2, 8, 3, 3});
  Tensor k = random_tensor(rng, {2, 8, 3, 3});
  Tensor probs = ops::attention_probs(q, k, 2);
  CHECK(probs.shape == Shape{2, 2, 9, 9});
  for (std::int64_t r = 0; r < probs.numel() / 9; ++r) {
    float sum = 0.0f;
    for (int i = 0; i < 9; ++i) sum += probs.data[r * 9 + i];
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
  }
}

TEST_CASE("uniform attention averages the values per head") {
  Rng rng(7);
  // constant q and k make every score equal -> softmax uniform
  Tensor q = Tensor::full({1, 4, 2, 2}, 0.3f);
  Tensor k = Tensor::full({1, 4, 2, 2}, -0.9f);
  Tensor v = random_tensor(rng, {1, 4, 2, 2});
  Tape t(false);
  VarId out = t.mhsa(t.leaf_const(q), t.leaf_const(k), t.leaf_const(v), 2);
  const Tensor& y = t.val(out);
  for (int c = 0; c < 4; ++c) {
    float mean = 0.0f;
    for (int i = 0; i < 4; ++i) mean += v.plane(0, c)[i];
    mean /= 4.0f;
    for (int i = 0; i < 4; ++i) CHECK(y.plane(0, c)[i] == doctest::Approx(mean).epsilon(1e-5));
  }
}

TEST_CASE("op gradient suite (3 seeds)") {
  auto results = refcheck::op_suite(100, 3);
  for (const auto& r : results) {
    INFO(r.name, " err=", r.max_err);
    CHECK(r.max_err <= r.tol);
  }
}
