#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "consisaug/autodiff.hpp"
#include "consisaug/gradcheck_suite.hpp"
#include "consisaug/losses.hpp"
#include "consisaug/rng.hpp"

using namespace consisaug;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("elementwise forward values") {
  CHECK(add(Tensor::from({2}, {1, 2}), Tensor::from({2}, {3, 4})).data ==
        std::vector<double>{4, 6});
  CHECK(relu(Tensor::from({3}, {-1, 0, 2})).data == std::vector<double>{0, 0, 2});
  CHECK(sigmoid(Tensor::from({1}, {0})).data[0] == Catch::Approx(0.5).margin(1e-15));
  const Tensor lhs = Tensor::from({2}, {2, 3});
  const Tensor rhs = Tensor::from({2}, {4, 5});
  CHECK(elementwise(EwOp::Mul, lhs, &rhs).data == std::vector<double>{8, 15});
  CHECK_THROWS_AS(elementwise(EwOp::Neg, lhs, &rhs), Error);
}

TEST_CASE("elementwise shape rules") {
  Tensor a = Tensor::from({2}, {1, 2});
  Tensor b = Tensor::from({3}, {1, 2, 3});
  CHECK_THROWS_AS(add(a, b), Error);
  // scalar broadcast works on either side
  CHECK(add(a, Tensor::scalar(1)).data == std::vector<double>{2, 3});
  CHECK(sub(Tensor::scalar(1), a).data == std::vector<double>{0, -1});
  CHECK_THROWS_AS(log(Tensor::from({1}, {-1.0})), Error);  // strict mode
}

TEST_CASE("matmul values and frozen finite-difference gradient") {
  Tensor i2 = Tensor::from({2, 2}, {1, 0, 0, 1});
  CHECK(matmul(i2, i2).data == std::vector<double>{1, 0, 0, 1});
  CHECK(matmul(Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 1}, {3, 4})).data ==
        std::vector<double>{11});
  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), Error);

  // oracle: central differences of sum(A*B) w.r.t. A at A=I, B=[[2,3],[4,5]]
  const Tensor b = Tensor::from({2, 2}, {2, 3, 4, 5});
  auto f = [&](const Tensor& a) { return sum_all(matmul(a, b)); };
  const double h = 1e-6;
  std::vector<double> numeric(4);
  for (int i = 0; i < 4; ++i) {
    Tensor ap = detach(i2), am = detach(i2);
    ap.data[static_cast<std::size_t>(i)] += h;
    am.data[static_cast<std::size_t>(i)] -= h;
    numeric[static_cast<std::size_t>(i)] = (f(ap).value() - f(am).value()) / (2 * h);
  }
  const std::vector<double> frozen{5, 9, 5, 9};
  for (int i = 0; i < 4; ++i)
    CHECK(numeric[static_cast<std::size_t>(i)] == Catch::Approx(frozen[static_cast<std::size_t>(i)]).margin(1e-4));

  Tape tape;
  Tensor a = detach(i2);
  tape.watch(a);
  tape.backward(f(a));
  for (int i = 0; i < 4; ++i)
    CHECK((*a.grad)[static_cast<std::size_t>(i)] == Catch::Approx(frozen[static_cast<std::size_t>(i)]).margin(1e-12));
}

TEST_CASE("conv2d forward contract") {
  // 1x1 kernel [2] scales a 1x3x3 field of ones to twos
  Tensor img = Tensor::full({1, 3, 3}, 1.0);
  Tensor k = Tensor::from({1, 1, 1, 1}, {2});
  CHECK(conv2d(img, k, 1, 0).data == std::vector<double>(9, 2.0));

  // center-delta 3x3 kernel with pad 1 is the identity
  Rng rng(7);
  Tensor noise = random_tensor({1, 3, 3}, rng);
  Tensor delta = Tensor::zeros({1, 1, 3, 3});
  delta.data[4] = 1.0;
  const Tensor same = conv2d(noise, delta, 1, 1);
  for (std::size_t i = 0; i < noise.data.size(); ++i)
    CHECK(same.data[i] == Catch::Approx(noise.data[i]).margin(1e-15));

  // floor output geometry: (6 - 3)/2 + 1 = 2
  CHECK(conv2d(Tensor::zeros({1, 6, 6}), Tensor::zeros({1, 1, 3, 3}), 2, 0).shape ==
        Shape{1, 2, 2});
  // stride-2 pad-1 3x3 halves even extents (the backbone geometry)
  CHECK(conv2d(Tensor::zeros({1, 64, 64}), Tensor::zeros({1, 1, 3, 3}), 2, 1).shape ==
        Shape{1, 32, 32});
  // kernel must fit; even kernels are rejected
  CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 2, 2}), Tensor::zeros({1, 1, 3, 3}), 1, 0), Error);
  CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 4, 4}), Tensor::zeros({1, 1, 2, 2}), 1, 0), Error);
}

TEST_CASE("conv2d gradient check on random tensors") {
  Rng rng(11);
  Tensor x = random_tensor({2, 5, 5}, rng);
  Tensor k = random_tensor({3, 2, 3, 3}, rng);
  const double err_in =
      grad_check([&](const Tensor& t) { return sum_all(square(conv2d(t, k, 1, 1))); }, x);
  const double err_k =
      grad_check([&](const Tensor& t) { return sum_all(square(conv2d(x, t, 1, 1))); }, k);
  CHECK(err_in < 1e-4);
  CHECK(err_k < 1e-4);
}

TEST_CASE("softmax values, stability and distribution invariants") {
  CHECK(softmax(Tensor::from({2}, {0, 0}), 0).data == std::vector<double>{0.5, 0.5});
  const Tensor big = softmax(Tensor::from({2}, {1000, 1000}), 0);
  CHECK(big.data[0] == Catch::Approx(0.5).margin(1e-15));
  const Tensor closed = softmax(Tensor::from({2}, {std::log(2.0), 0}), 0);
  CHECK(closed.data[0] == Catch::Approx(2.0 / 3.0).margin(1e-12));
  CHECK(closed.data[1] == Catch::Approx(1.0 / 3.0).margin(1e-12));

  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = random_tensor({4, 6}, rng, -30, 30);
    Tensor y = softmax(x, 1);
    for (int r = 0; r < 4; ++r) {
      double s = 0;
      for (int c = 0; c < 6; ++c) s += y.data[static_cast<std::size_t>(r * 6 + c)];
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
    // shift invariance per row
    Tensor shifted = x;
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 6; ++c) shifted.data[static_cast<std::size_t>(r * 6 + c)] += 13.25;
    Tensor y2 = softmax(shifted, 1);
    for (std::size_t i = 0; i < y.data.size(); ++i)
      CHECK(y2.data[i] == Catch::Approx(y.data[i]).margin(1e-12));
  }
}

TEST_CASE("reductions") {
  CHECK(reduce_mean(Tensor::from({3}, {1, 2, 3})).value() == Catch::Approx(2.0));
  CHECK(reduce_sum(Tensor::from({2, 2}, {1, 2, 3, 4}), {0}).data == std::vector<double>{4, 6});
  CHECK(reduce_max(Tensor::from({2}, {-5, -1})).value() == -1.0);
  CHECK_THROWS_AS(reduce_sum(Tensor::zeros({2, 2}), {0, 0}), Error);
  CHECK_THROWS_AS(reduce_sum(Tensor::zeros({2, 2}), {2}), Error);
  CHECK_THROWS_AS(reduce_sum(Tensor::zeros({0})), Error);  // EmptyReduction
  try {
    reduce_sum(Tensor::zeros({0}));
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::EmptyReduction);
  }
}

TEST_CASE("backward basics") {
  // d/dx sum(x^2) = 2x
  Tape tape;
  Tensor x = Tensor::from({2}, {1, 2});
  tape.watch(x);
  Tensor loss = sum_all(square(x));
  tape.backward(loss);
  CHECK(*x.grad == std::vector<double>{2, 4});

  // a loss that does not depend on the watched leaves leaves them at zero
  Tape tape2;
  Tensor y = Tensor::from({3}, {1, 2, 3});
  Tensor c = Tensor::scalar(5.0);
  tape2.watch(y);
  tape2.watch(c);
  tape2.backward(c);
  CHECK(*y.grad == std::vector<double>{0, 0, 0});
}

TEST_CASE("backward error paths") {
  Tape tape;
  Tensor x = Tensor::from({2}, {1, 2});
  tape.watch(x);
  Tensor v = square(x);
  CHECK_THROWS_AS(tape.backward(v), Error);  // NotScalar
  Tensor off = Tensor::scalar(1.0);
  CHECK_THROWS_AS(tape.backward(off), Error);  // NoTape
  Tensor s = sum_all(v);
  tape.backward(s);
  CHECK_THROWS_AS(tape.backward(s), Error);  // TapeReused
  tape.reset();
  tape.backward(s);  // allowed again after reset
  CHECK((*x.grad)[0] == Catch::Approx(2.0));
}

TEST_CASE("dag reuse accumulates both paths") {
  Tape t1;
  Tensor x1 = Tensor::from({3}, {0.5, -1.5, 2.0});
  t1.watch(x1);
  t1.backward(sum_all(mul(x1, x1)));

  Tape t2;
  Tensor x2 = Tensor::from({3}, {0.5, -1.5, 2.0});
  t2.watch(x2);
  t2.backward(sum_all(square(x2)));

  for (int i = 0; i < 3; ++i)
    CHECK((*x1.grad)[static_cast<std::size_t>(i)] ==
          Catch::Approx((*x2.grad)[static_cast<std::size_t>(i)]).margin(1e-15));
}

TEST_CASE("tape replay is bit-deterministic") {
  auto run = [] {
    Rng rng(99);
    Tensor x = random_tensor({4, 4}, rng);
    Tape tape;
    tape.watch(x);
    Tensor loss = mean_all(mul(sigmoid(x), exp(scale(x, 0.3))));
    tape.backward(loss);
    return *x.grad;
  };
  const auto a = run();
  const auto b = run();
  CHECK(a == b);  // bit-identical
}

TEST_CASE("grad_check oracle behaves as specified") {
  Rng rng(21);
  // linear function: essentially exact
  Tensor x = random_tensor({6}, rng);
  CHECK(grad_check([](const Tensor& t) { return sum_all(t); }, x) < 1e-10);

  // sigmoid composite
  Tensor x2 = random_tensor({8}, rng);
  CHECK(grad_check([](const Tensor& t) { return sum_all(sigmoid(t)); }, x2) < 1e-6);

  // jsd after softmax (the classification-consistency integrand)
  Tensor logits = random_tensor({3, 4}, rng);
  Tensor q = Tensor::zeros({3, 4});
  for (int r = 0; r < 3; ++r) {
    double z = 0;
    for (int c = 0; c < 4; ++c) {
      q.data[static_cast<std::size_t>(r * 4 + c)] = rng.uniform(0.1, 1.0);
      z += q.data[static_cast<std::size_t>(r * 4 + c)];
    }
    for (int c = 0; c < 4; ++c) q.data[static_cast<std::size_t>(r * 4 + c)] /= z;
  }
  CHECK(grad_check([&](const Tensor& t) { return jsd_rows_sum(softmax(t, 1), q); }, logits) <
        1e-4);
}

TEST_CASE("every primitive passes grad_check across 20 seeds") {
  const auto cases = run_gradcheck_suite(2024, 20, "", /*with_full_objective=*/false);
  for (const auto& c : cases) {
    INFO(c.name << " max_rel_err=" << c.max_rel_err);
    CHECK(c.pass);
  }
}

TEST_CASE("gather scatter-add and kl_term conventions") {
  Tensor x = Tensor::from({4}, {1, 2, 3, 4});
  Tensor g = gather(x, {3, 3, 0}, {3});
  CHECK(g.data == std::vector<double>{4, 4, 1});

  Tape tape;
  Tensor xt = detach(x);
  tape.watch(xt);
  tape.backward(sum_all(gather(xt, {3, 3, 0}, {3})));
  CHECK(*xt.grad == std::vector<double>{1, 0, 0, 2});

  // 0 * ln(0/m) == 0 and no NaN leakage
  Tensor p = Tensor::from({2}, {0.0, 1.0});
  Tensor m = Tensor::from({2}, {0.5, 0.75});
  Tensor kl = kl_term(p, m);
  CHECK(kl.data[0] == 0.0);
  CHECK(kl.data[1] == Catch::Approx(std::log(1.0 / 0.75)));
}
