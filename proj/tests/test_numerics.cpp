#include <catch_amalgamated.hpp>

#include <cmath>

#include <perank/numerics.hpp>

using namespace perank;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

Matrix naive_matmul(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < b.cols; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < a.cols; ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
  return t;
}

Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c) {
  Matrix m(r, c);
  for (double& v : m.data) v = rng.normal();
  return m;
}

}  // namespace

TEST_CASE("matrix products agree with the naive triple loop") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng.below(6), k = 1 + rng.below(6), m = 1 + rng.below(6);
    Matrix a = random_matrix(rng, n, k), b = random_matrix(rng, k, m);
    const Matrix ref = naive_matmul(a, b);
    const Matrix c = matmul(a, b);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK_THAT(c.data[i], WithinAbs(ref.data[i], 1e-12));
    const Matrix cbt = matmul_bt(a, transpose(b));
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK_THAT(cbt.data[i], WithinAbs(ref.data[i], 1e-12));
  }
}

TEST_CASE("matmul_at_acc accumulates a transposed product") {
  Rng rng(5);
  Matrix a = random_matrix(rng, 4, 3), b = random_matrix(rng, 4, 2);
  Matrix c(3, 2, 0.5);
  matmul_at_acc(a, b, c);
  const Matrix ref = naive_matmul(transpose(a), b);
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK_THAT(c.data[i], WithinAbs(ref.data[i] + 0.5, 1e-12));
}

TEST_CASE("matmul rejects mismatched shapes with both shapes in the message") {
  Matrix a(2, 3), b(4, 2);
  CHECK_THROWS_WITH(matmul(a, b), Catch::Matchers::ContainsSubstring("2x3") && Catch::Matchers::ContainsSubstring("4x2"));
}

TEST_CASE("softmax is a distribution and is shift invariant") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> v(1 + rng.below(30));
    for (double& x : v) x = 30.0 * rng.normal();
    const auto p = softmax(v);
    double s = 0;
    for (double x : p) {
      CHECK(x >= 0.0);
      s += x;
    }
    CHECK_THAT(s, WithinAbs(1.0, 1e-12));
    auto shifted = v;
    for (double& x : shifted) x += 1000.0;
    const auto q = softmax(shifted);
    for (std::size_t i = 0; i < p.size(); ++i) CHECK_THAT(q[i], WithinAbs(p[i], 1e-12));
    const auto lp = log_softmax(v);
    for (std::size_t i = 0; i < p.size(); ++i)
      if (p[i] > 1e-300) CHECK_THAT(std::exp(lp[i]), WithinAbs(p[i], 1e-12));
  }
}

TEST_CASE("softmax of two logits matches the logistic function") {
  const auto p = softmax({0.3, -1.2});
  CHECK_THAT(p[0], WithinAbs(1.0 / (1.0 + std::exp(-1.5)), 1e-15));
}

TEST_CASE("softmax rejects empty and non-finite input") {
  CHECK_THROWS_WITH(softmax({}), Catch::Matchers::ContainsSubstring("empty distribution"));
  CHECK_THROWS(softmax({1.0, std::nan("")}));
  CHECK_THROWS_WITH(log_softmax({}), Catch::Matchers::ContainsSubstring("empty distribution"));
}

TEST_CASE("gelu uses the exact erf form") {
  CHECK_THAT(activate(Activation::gelu, 1.0), WithinAbs(0.8413447460685429, 1e-15));
  CHECK_THAT(activate(Activation::gelu, -1.0), WithinAbs(-0.15865525393145707, 1e-15));
  CHECK(activate(Activation::gelu, 0.0) == 0.0);
  CHECK(activate(Activation::identity, -2.5) == -2.5);
  for (auto a : {Activation::gelu, Activation::identity, Activation::tanh})
    for (double x : {-2.0, -0.3, 0.0, 0.7, 3.0}) {
      const double fd = (activate(a, x + 1e-6) - activate(a, x - 1e-6)) / 2e-6;
      CHECK_THAT(activate_grad(a, x), WithinAbs(fd, 1e-8));
    }
  CHECK(parse_activation("tanh") == Activation::tanh);
  CHECK_THROWS_AS(parse_activation("relu6"), UsageError);
}

TEST_CASE("linear backward matches finite differences and respects freezing") {
  Rng rng(2);
  Parameter W("W", 3, 4), b("b", 1, 4);
  W.value = random_matrix(rng, 3, 4);
  b.value = random_matrix(rng, 1, 4);
  const Matrix x = random_matrix(rng, 5, 3), target = random_matrix(rng, 5, 4);
  auto loss = [&] {
    const Matrix y = linear_forward(x, W, b);
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += 0.5 * (y.data[i] - target.data[i]) * (y.data[i] - target.data[i]);
    return s;
  };
  const Matrix y = linear_forward(x, W, b);
  Matrix dy(5, 4);
  for (std::size_t i = 0; i < dy.size(); ++i) dy.data[i] = y.data[i] - target.data[i];
  zero_grads({&W, &b});
  linear_backward(x, W, b, dy);
  CHECK(finite_diff_check(loss, {&W, &b}) < 1e-6);

  W.trainable = false;
  zero_grads({&W, &b});
  linear_backward(x, W, b, dy);
  for (double g : W.grad.data) CHECK(g == 0.0);
}

TEST_CASE("finite_diff_check flags a wrong gradient") {
  Parameter p("p", 1, 3);
  p.value.data = {1.0, -2.0, 0.5};
  auto f = [&] { return p.value.data[0] * p.value.data[0] + 3.0 * p.value.data[1] + std::sin(p.value.data[2]); };
  p.grad.data = {2.0, 3.0, std::cos(0.5)};
  CHECK(finite_diff_check(f, {&p}) < 1e-8);
  p.grad.data[1] = 3.1;
  CHECK(finite_diff_check(f, {&p}) > 0.01);
  CHECK_THROWS(finite_diff_check(f, {&p}, 0.0));
}

TEST_CASE("finite_diff_check samples at most the requested coordinates") {
  Parameter p("p", 40, 40);
  int calls = 0;
  auto f = [&] {
    ++calls;
    return 0.0;
  };
  finite_diff_check(f, {&p}, 1e-5, 256);
  CHECK(calls == 512);
}

TEST_CASE("adam first step moves each coordinate by about lr against the gradient") {
  Parameter p("p", 1, 3);
  p.value.data = {1.0, 1.0, 1.0};
  p.grad.data = {0.5, -2.0, 0.0};
  Adam opt(0.1);
  opt.step({&p});
  // after bias correction m_hat = g and v_hat = g^2
  CHECK_THAT(p.value.data[0], WithinAbs(1.0 - 0.1 * 0.5 / (0.5 + 1e-8), 1e-12));
  CHECK_THAT(p.value.data[1], WithinAbs(1.0 + 0.1 * 2.0 / (2.0 + 1e-8), 1e-12));
  CHECK(p.value.data[2] == 1.0);
}

TEST_CASE("adam minimizes a quadratic") {
  Parameter p("p", 1, 2);
  p.value.data = {3.0, -4.0};
  Adam opt(0.05);
  for (int i = 0; i < 2000; ++i) {
    for (std::size_t j = 0; j < 2; ++j) p.grad.data[j] = 2.0 * (p.value.data[j] - 1.0);
    opt.step({&p});
  }
  CHECK_THAT(p.value.data[0], WithinAbs(1.0, 1e-3));
  CHECK_THAT(p.value.data[1], WithinAbs(1.0, 1e-3));
}

TEST_CASE("frozen parameters stay bit-identical through optimizer steps") {
  Parameter a("a", 2, 2), b("b", 2, 2);
  Rng rng(4);
  a.value = random_matrix(rng, 2, 2);
  b.value = random_matrix(rng, 2, 2);
  b.trainable = false;
  const Matrix before = b.value;
  Adam opt(1e-2);
  for (int i = 0; i < 5; ++i) {
    a.grad = random_matrix(rng, 2, 2);
    b.grad = random_matrix(rng, 2, 2);
    opt.step({&a, &b});
  }
  CHECK(std::memcmp(before.data.data(), b.value.data.data(), before.size() * sizeof(double)) == 0);
}

TEST_CASE("gradient clipping rescales to the maximum norm") {
  Parameter p("p", 1, 2);
  p.grad.data = {3.0, 4.0};
  clip_grad_norm({&p}, 1.0);
  CHECK_THAT(grad_norm({&p}), WithinAbs(1.0, 1e-12));
  CHECK_THAT(p.grad.data[0], WithinAbs(0.6, 1e-12));
  p.grad.data = {0.3, 0.4};
  clip_grad_norm({&p}, 1.0);
  CHECK(p.grad.data[0] == 0.3);
}

TEST_CASE("rng streams are reproducible and distributions look right") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng r(9);
  double sum = 0, sq = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    sum += x;
    sq += x * x;
  }
  CHECK(std::abs(sum / n) < 0.03);
  CHECK(std::abs(sq / n - 1.0) < 0.05);
  std::vector<int> counts(5, 0);
  for (int i = 0; i < 5000; ++i) ++counts[r.below(5)];
  for (int c : counts) CHECK(std::abs(c - 1000) < 150);
  std::vector<int> v{0, 1, 2, 3, 4, 5, 6};
  r.shuffle(v);
  std::sort(v.begin(), v.end());
  CHECK(v == std::vector<int>{0, 1, 2, 3, 4, 5, 6});
  CHECK_THROWS(r.below(0));
}

TEST_CASE("scaled uniform init stays inside its bound") {
  Rng rng(1);
  Parameter p("p", 30, 50);
  init_uniform_scaled(p, rng);
  const double bound = std::sqrt(6.0 / 80.0);
  double mx = 0;
  for (double v : p.value.data) mx = std::max(mx, std::abs(v));
  CHECK(mx <= bound);
  CHECK(mx > 0.9 * bound);
}
