#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <functional>

#include "doctest.h"
#include "sitar/rng.hpp"
#include "sitar/tape.hpp"

using namespace sitar;

namespace {

ad::Tensor random_tensor(std::vector<std::size_t> shape, rng::Stream& s,
                         double lo = -1.0, double hi = 1.0) {
  ad::Tensor t(std::move(shape));
  for (auto& v : t.data) v = s.next_uniform(lo, hi);
  return t;
}

using Builder =
    std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

// Verifies reverse-mode gradients of a scalar-valued graph against the
// central-difference oracle for every input, rtol 1e-4 / atol 1e-6.
void check_grad(const Builder& build, const std::vector<ad::Tensor>& inputs,
                double step = 1e-5, double rtol = 1e-4, double atol = 1e-6) {
  ad::Tape t;
  std::vector<ad::Var> vars;
  for (const auto& in : inputs) vars.push_back(t.leaf(in));
  ad::Var loss = build(t, vars);
  REQUIRE(t.value(loss).size() == 1);
  t.backward(loss);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto f = [&](const ad::Tensor& x) {
      ad::Tape t2;
      std::vector<ad::Var> vs;
      for (std::size_t i = 0; i < inputs.size(); ++i)
        vs.push_back(t2.leaf(i == k ? x : inputs[i]));
      return t2.value(build(t2, vs)).data[0];
    };
    const ad::Tensor fd = ad::fd_gradient(f, inputs[k], step);
    const auto& g = t.grad(vars[k]);
    for (std::size_t i = 0; i < fd.size(); ++i) {
      const double tol = atol + rtol * std::fabs(fd.data[i]);
      CHECK(std::fabs(g[i] - fd.data[i]) <= tol);
    }
  }
}

std::vector<std::size_t> random_shape(rng::Stream& s) {
  const std::size_t nd = 1 + s.next_below(3);
  std::vector<std::size_t> shape(nd);
  for (auto& d : shape) d = 1 + s.next_below(5);
  return shape;
}

// Randomly reduce to a scalar via sum or mean so both reductions get coverage.
ad::Var reduce(ad::Var x, std::uint64_t pick) {
  return pick % 2 ? ad::sum(x) : ad::mean(x);
}

}  // namespace

TEST_CASE("elementwise and unary ops match finite differences on random shapes") {
  int checked = 0;
  for (std::uint64_t trial = 0; trial < 6; ++trial) {
    rng::Stream s(99, rng::Purpose::kEval, trial);
    const auto shape = random_shape(s);
    const ad::Tensor a = random_tensor(shape, s);
    const ad::Tensor b = random_tensor(shape, s);
    const ad::Tensor pos = random_tensor(shape, s, 0.2, 2.0);
    ad::Tensor away_from_zero = random_tensor(shape, s, 0.05, 1.0);
    for (std::size_t i = 0; i < away_from_zero.size(); ++i)
      if (i % 2) away_from_zero.data[i] = -away_from_zero.data[i];
    const std::uint64_t r = s.next_u64();

    check_grad([&](ad::Tape&, const std::vector<ad::Var>& v) {
      return reduce(ad::add(v[0], v[1]), r); }, {a, b});
    check_grad([&](ad::Tape&, const std::vector<ad::Var>& v) {
      return reduce(ad::sub(v[0], v[1]), r); }, {a, b});
    check_grad([&](ad::Tape&, const std::vector<ad::Var>& v) {
      return reduce(ad::mul(v[0], v[1]), r); }, {a, b});
    check_grad([&](ad::Tape&, const std::vector<ad::Var>& v) {
      return reduce(ad::add_const(v[0], b), r); }, {a});
    check_grad([&](ad::Tape&, const std::vector<ad::Var>& v) {
      return reduce(ad::mul_const(v[0], b), r); }, {a});
    check_grad([&](ad::Tape&, const std::vector<ad::Var>& v) {
      return reduce(ad::affine(v[0], -1.7, 0.4), r); }, {a});
    check_grad([&](ad::Tape&, const std::vector<ad::Var>& v) {
      return reduce(ad::relu(v[0]), r); }, {away_from_zero});
    check_grad([&](ad::Tape&, const std::vector<ad::Var>& v) {
      return reduce(ad::exp_(v[0]), r); }, {a});
    check_grad([&](ad::Tape&, const std::vector<ad::Var>& v) {
      return reduce(ad::log_(v[0]), r); }, {pos});
    check_grad([&](ad::Tape&, const std::vector<ad::Var>& v) {
      return reduce(ad::square(v[0]), r); }, {a});
    check_grad([&](ad::Tape&, const std::vector<ad::Var>& v) {
      return reduce(ad::tanh_(v[0]), r); }, {a});
    checked += 11;
  }
  CHECK(checked >= 60);
}

TEST_CASE("matrix, shape, softmax and CE ops match finite differences") {
  int checked = 0;
  for (std::uint64_t trial = 0; trial < 8; ++trial) {
    rng::Stream s(7, rng::Purpose::kEval, trial);
    const std::size_t M = 1 + s.next_below(4), K = 1 + s.next_below(4),
                      N = 1 + s.next_below(4);
    const ad::Tensor a = random_tensor({M, K}, s);
    const ad::Tensor b = random_tensor({K, N}, s);
    const ad::Tensor bias = random_tensor({K}, s);
    const ad::Tensor extra = random_tensor({M, N}, s);
    std::vector<int> labels(M);
    for (auto& y : labels) y = static_cast<int>(s.next_below(K));
    const std::uint64_t r = s.next_u64();

    check_grad([&](ad::Tape&, const std::vector<ad::Var>& v) {
      return reduce(ad::matmul(v[0], v[1]), r); }, {a, b});
    check_grad([&](ad::Tape&, const std::vector<ad::Var>& v) {
      return reduce(ad::add_rowvec(v[0], v[1]), r); }, {a, bias});
    check_grad([&](ad::Tape&, const std::vector<ad::Var>& v) {
      return reduce(ad::softmax(v[0]), r); }, {a});
    check_grad([&](ad::Tape&, const std::vector<ad::Var>& v) {
      return reduce(ad::square(ad::softmax(v[0])), r); }, {a});
    check_grad([&](ad::Tape&, const std::vector<ad::Var>& v) {
      return ad::cross_entropy_logits(v[0], labels); }, {a});
    check_grad([&](ad::Tape&, const std::vector<ad::Var>& v) {
      return reduce(ad::reshape(v[0], {K, M}), r); }, {a});
    check_grad([&](ad::Tape&, const std::vector<ad::Var>& v) {
      return reduce(ad::concat(v[0], v[1]), r); }, {a, extra});
    checked += 7;
  }
  CHECK(checked >= 40);
}

TEST_CASE("convolutions match finite differences") {
  int checked = 0;
  for (std::uint64_t trial = 0; trial < 4; ++trial) {
    rng::Stream s(13, rng::Purpose::kEval, trial);
    const std::size_t B = 1 + s.next_below(2), Cin = 1 + s.next_below(2),
                      Cout = 1 + s.next_below(3);
    const std::size_t H = 4 + 2 * s.next_below(2), W = 4 + 2 * s.next_below(2);
    const ad::Tensor x = random_tensor({B, Cin, H, W}, s);
    const ad::Tensor w = random_tensor({Cout, Cin, 4, 4}, s);
    const ad::Tensor wt = random_tensor({Cin, Cout, 4, 4}, s);
    const ad::Tensor bias = random_tensor({Cout}, s);
    const std::uint64_t r = s.next_u64();

    check_grad([&](ad::Tape&, const std::vector<ad::Var>& v) {
      return reduce(ad::conv2d(v[0], v[1], v[2]), r); }, {x, w, bias});
    check_grad([&](ad::Tape&, const std::vector<ad::Var>& v) {
      return reduce(ad::conv2d_transpose(v[0], v[1], v[2]), r); }, {x, wt, bias});
    checked += 2;
  }
  CHECK(checked >= 8);

  // Geometry: kernel 4 / stride 2 / pad 1 halves and doubles spatial extent.
  ad::Tape t;
  rng::Stream s(13, rng::Purpose::kEval, 100);
  ad::Var x = t.leaf(random_tensor({2, 3, 28, 28}, s));
  ad::Var w = t.leaf(random_tensor({16, 3, 4, 4}, s));
  ad::Var b = t.leaf(random_tensor({16}, s));
  ad::Var y = ad::conv2d(x, w, b);
  CHECK(t.value(y).shape == std::vector<std::size_t>{2, 16, 14, 14});
  ad::Var wt = t.leaf(random_tensor({16, 3, 4, 4}, s));
  ad::Var bt = t.leaf(random_tensor({3}, s));
  ad::Var up = ad::conv2d_transpose(y, wt, bt);
  CHECK(t.value(up).shape == std::vector<std::size_t>{2, 3, 28, 28});
}

TEST_CASE("gradient accumulation is additive when a value is reused") {
  ad::Tape t;
  ad::Var x = t.leaf(ad::Tensor({3}, std::vector<double>{1.0, -2.0, 0.5}));
  ad::Var loss = ad::sum(ad::add(x, x));
  t.backward(loss);
  for (double g : t.grad(x)) CHECK(g == doctest::Approx(2.0).epsilon(1e-12));

  ad::Tape t2;
  ad::Var x2 = t2.leaf(ad::Tensor({3}, std::vector<double>{1.0, -2.0, 0.5}));
  ad::Var loss2 = ad::sum(ad::mul(x2, x2));
  t2.backward(loss2);
  const auto& xv = t2.value(x2).data;
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(t2.grad(x2)[i] == doctest::Approx(2.0 * xv[i]).epsilon(1e-12));
}

TEST_CASE("relu subgradient at exactly zero is zero") {
  ad::Tape t;
  ad::Var x = t.leaf(ad::Tensor({3}, std::vector<double>{0.0, 1.0, -1.0}));
  t.backward(ad::sum(ad::relu(x)));
  CHECK(t.grad(x)[0] == 0.0);
  CHECK(t.grad(x)[1] == 1.0);
  CHECK(t.grad(x)[2] == 0.0);
}

TEST_CASE("softmax rows sum to one and CE gradient is softmax minus onehot") {
  rng::Stream s(5, rng::Purpose::kEval, 0);
  ad::Tape t;
  const ad::Tensor logits = random_tensor({4, 3}, s, -3.0, 3.0);
  ad::Var z = t.leaf(logits);
  ad::Var sm = ad::softmax(z);
  const auto& smv = t.value(sm);
  for (std::size_t r = 0; r < 4; ++r) {
    double row = 0.0;
    for (std::size_t c = 0; c < 3; ++c) row += smv.data[r * 3 + c];
    CHECK(row == doctest::Approx(1.0).epsilon(1e-12));
  }
  const std::vector<int> y{0, 2, 1, 0};
  ad::Tape t2;
  ad::Var z2 = t2.leaf(logits);
  t2.backward(ad::cross_entropy_logits(z2, y));
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 3; ++c) {
      const double expected =
          (smv.data[r * 3 + c] - (static_cast<std::size_t>(y[r]) == c ? 1.0 : 0.0)) /
          4.0;
      CHECK(t2.grad(z2)[r * 3 + c] == doctest::Approx(expected).epsilon(1e-10));
    }
}

TEST_CASE("stop_gradient yields a detached copy") {
  ad::Tape t;
  ad::Var x = t.leaf(ad::Tensor({2}, std::vector<double>{3.0, -1.0}));
  const ad::Tensor d = ad::stop_gradient(x);
  CHECK(d.data == t.value(x).data);
  // Using the detachment as a constant contributes nothing to x's gradient.
  t.backward(ad::sum(ad::mul_const(x, d)));
  CHECK(t.grad(x)[0] == doctest::Approx(3.0));
  CHECK(t.grad(x)[1] == doctest::Approx(-1.0));
}

TEST_CASE("backward rejects non-scalar losses and foreign vars") {
  ad::Tape t;
  ad::Var x = t.leaf(ad::Tensor({2}, 1.0));
  CHECK_THROWS(t.backward(x));
  ad::Tape other;
  ad::Var y = other.leaf(ad::Tensor::scalar(1.0));
  CHECK_THROWS(t.backward(y));
}

TEST_CASE("shape mismatches are rejected with descriptive errors") {
  ad::Tape t;
  ad::Var a = t.leaf(ad::Tensor({2, 3}, 1.0));
  ad::Var b = t.leaf(ad::Tensor({3, 2}, 1.0));
  CHECK_THROWS(ad::add(a, b));
  CHECK_THROWS(ad::matmul(a, a));
  CHECK_THROWS(ad::reshape(a, {4, 2}));
  CHECK_THROWS(ad::cross_entropy_logits(a, {0, 1, 0}));
  CHECK_THROWS(ad::cross_entropy_logits(a, {0, 5}));
}
