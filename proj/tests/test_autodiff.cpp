#include <doctest.h>

#include <cstring>

#include "litediff/tensor.hpp"
#include "support/oracles.hpp"

using namespace litediff;
using oracle::random_tensor;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

bool bit_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("elementwise arithmetic") {
  Tensor a({2}, {1, 2});
  Tensor b({2}, {3, 4});
  CHECK(values(add(a, b)) == std::vector<double>{4, 6});
  CHECK(values(sub(b, a)) == std::vector<double>{2, 2});
  CHECK(values(mul(Tensor({2}, {2, 3}), 0.0)) == std::vector<double>{0, 0});
  CHECK(values(add(a, 0.5)) == std::vector<double>{1.5, 2.5});
}

TEST_CASE("shape mismatch names both shapes") {
  Tensor a({2}, {1, 2});
  Tensor b({3}, {1, 2, 3});
  try {
    add(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(e.lhs() == Shape{2});
    CHECK(e.rhs() == Shape{3});
    CHECK(std::string(e.what()).find("[2]") != std::string::npos);
    CHECK(std::string(e.what()).find("[3]") != std::string::npos);
  }
  CHECK_THROWS_AS(mul(a, b), ShapeError);
}

TEST_CASE("gradient of sum(a*b) wrt a is b") {
  Tensor a({2}, {1, 2}, true);
  Tensor b({2}, {5, 7});
  auto f = [&] { return sum(mul(a, b)); };
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = f();
  }
  backward(loss, tape);
  CHECK(std::vector<double>(a.grad().begin(), a.grad().end()) == std::vector<double>{5, 7});
  auto numeric = oracle::numeric_grad([&] { return f().item(); }, a);
  CHECK(numeric[0] == doctest::Approx(5.0).epsilon(1e-8));
  CHECK(numeric[1] == doctest::Approx(7.0).epsilon(1e-8));
  CHECK_FALSE(b.has_grad());
}

TEST_CASE("matmul") {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor m({2, 2}, {1, 2, 3, 4});
  CHECK(values(matmul(eye, m)) == values(m));
  CHECK(values(matmul(Tensor({1, 2}, {1, 2}), Tensor({2, 1}, {3, 4}))) == std::vector<double>{11});
  CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);

  Rng rng(3);
  auto a = random_tensor({3, 4}, rng, true);
  auto b = random_tensor({4, 2}, rng, true);
  auto w = random_tensor({3, 2}, rng);
  CHECK(oracle::gradcheck([&] { return sum(mul(matmul(a, b), w)); }, {a, b}) < 1e-6);
}

TEST_CASE("conv2d trivial kernels") {
  Rng rng(11);
  auto x = random_tensor({1, 1, 4, 4}, rng);
  auto y = conv2d(x, Tensor({1, 1, 1, 1}, {1.0}), Tensor({1}, {0.25}), 1, 0);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i] + 0.25);

  auto z = conv2d(random_tensor({2, 3, 5, 5}, rng), Tensor::zeros({4, 3, 3, 3}), Tensor::zeros({4}), 1, 1);
  for (double v : z.data()) CHECK(v == 0.0);
}

TEST_CASE("conv2d matches the naive loop bit for bit") {
  Rng rng(5);
  struct Case {
    Shape in, k;
    std::size_t stride, pad;
  };
  for (const auto& c : {Case{{1, 2, 5, 5}, {3, 2, 3, 3}, 1, 0}, Case{{1, 2, 5, 5}, {3, 2, 3, 3}, 1, 1},
                        Case{{2, 3, 7, 6}, {5, 3, 3, 3}, 2, 1}, Case{{3, 4, 8, 8}, {9, 4, 1, 1}, 1, 0},
                        Case{{2, 16, 2, 2}, {16, 16, 3, 3}, 1, 1}, Case{{1, 1, 9, 9}, {2, 1, 4, 2}, 3, 2},
                        Case{{2, 3, 20, 21}, {5, 3, 3, 3}, 1, 1}, Case{{1, 8, 64, 64}, {1, 8, 3, 3}, 1, 1},
                        Case{{2, 4, 16, 40}, {6, 4, 1, 1}, 1, 0}, Case{{1, 2, 18, 18}, {3, 2, 2, 3}, 1, 1}}) {
    auto x = random_tensor(c.in, rng);
    auto w = random_tensor(c.k, rng);
    auto b = random_tensor({c.k[0]}, rng);
    auto got = conv2d(x, w, b, c.stride, c.pad);
    auto want = oracle::naive_conv2d(x, w, b, c.stride, c.pad);
    CHECK(got.dim(2) == (c.in[2] + 2 * c.pad - c.k[2]) / c.stride + 1);
    CHECK(bit_equal(got.data(), want));
  }
}

TEST_CASE("conv2d gradients match finite differences") {
  Rng rng(7);
  auto x = random_tensor({1, 2, 5, 5}, rng, true);
  auto w = random_tensor({3, 2, 3, 3}, rng, true);
  auto b = random_tensor({3}, rng, true);
  auto proj = random_tensor({1, 3, 5, 5}, rng);
  CHECK(oracle::gradcheck([&] { return sum(mul(conv2d(x, w, b, 1, 1), proj)); }, {x, w, b}) < 1e-5);
  auto proj2 = random_tensor({1, 3, 2, 2}, rng);
  CHECK(oracle::gradcheck([&] { return sum(mul(conv2d(x, w, b, 2, 0), proj2)); }, {x, w, b}) < 1e-5);

  // Wide rows take the direct kernel and the transposed input gradient.
  auto xw = random_tensor({2, 2, 6, 17}, rng, true);
  auto pw = random_tensor({2, 3, 6, 17}, rng);
  CHECK(oracle::gradcheck([&] { return sum(mul(conv2d(xw, w, b, 1, 1), pw)); }, {xw, w, b}) < 1e-5);
  auto w1 = random_tensor({3, 2, 1, 1}, rng, true);
  CHECK(oracle::gradcheck([&] { return sum(mul(conv2d(xw, w1, b, 1, 0), pw)); }, {xw, w1, b}) < 1e-5);
  auto wr = random_tensor({3, 2, 2, 3}, rng, true);
  auto pr = random_tensor({2, 3, 7, 17}, rng);
  CHECK(oracle::gradcheck([&] { return sum(mul(conv2d(xw, wr, b, 1, 1), pr)); }, {xw, wr, b}) < 1e-5);
}

TEST_CASE("conv2d errors") {
  CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 2, 5, 5}), Tensor::zeros({3, 1, 3, 3}), Tensor::zeros({3}), 1, 0),
                  ShapeError);
  CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 5, 5}), Tensor::zeros({1}), 1, 1),
                  ShapeError);
}

TEST_CASE("resample") {
  CHECK(values(resample(Tensor({1, 1, 2, 2}, {1, 1, 1, 1}), Resample::Down2)) == std::vector<double>{1});
  CHECK(values(resample(Tensor({1, 1, 1, 1}, {5}), Resample::Up2)) == std::vector<double>{5, 5, 5, 5});
  auto c = Tensor::full({2, 3, 4, 6}, -0.75);
  CHECK(values(resample(resample(c, Resample::Down2), Resample::Up2)) == values(c));
  CHECK_THROWS_AS(resample(Tensor::zeros({1, 1, 3, 4}), Resample::Down2), std::invalid_argument);

  Rng rng(2);
  auto x = random_tensor({1, 2, 4, 4}, rng, true);
  auto p1 = random_tensor({1, 2, 2, 2}, rng);
  auto p2 = random_tensor({1, 2, 8, 8}, rng);
  CHECK(oracle::gradcheck([&] { return sum(mul(resample(x, Resample::Down2), p1)); }, {x}) < 1e-6);
  CHECK(oracle::gradcheck([&] { return sum(mul(resample(x, Resample::Up2), p2)); }, {x}) < 1e-6);
}

TEST_CASE("backward contract") {
  SUBCASE("sum gives ones") {
    Tensor x({3}, {1, -2, 3}, true);
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      loss = sum(x);
    }
    backward(loss, tape);
    CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{1, 1, 1});
  }
  SUBCASE("unreachable leaf on the tape gets zeros") {
    Tensor x({2}, {1, 2}, true);
    Tensor unused({2}, {3, 4}, true);
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      auto side = mul(unused, 2.0);
      loss = sum(x);
      (void)side;
    }
    backward(loss, tape);
    CHECK(std::vector<double>(unused.grad().begin(), unused.grad().end()) == std::vector<double>{0, 0});
  }
  SUBCASE("frozen tensors get no grad storage") {
    Tensor x({2}, {1, 2}, true);
    Tensor frozen({2}, {3, 4}, false);
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      loss = sum(mul(x, frozen));
    }
    backward(loss, tape);
    CHECK_FALSE(frozen.has_grad());
    CHECK(x.has_grad());
  }
  SUBCASE("errors") {
    Tensor x({2}, {1, 2}, true);
    Tape tape;
    Tensor y;
    {
      TapeScope scope(tape);
      y = mul(x, 3.0);
    }
    CHECK_THROWS_AS(backward(y, tape), std::invalid_argument);
    Tape other;
    Tensor s;
    {
      TapeScope scope(tape);
      s = sum(y);
    }
    CHECK_THROWS_AS(backward(s, other), std::invalid_argument);
  }
  SUBCASE("no tape records nothing") {
    Tensor x({2}, {1, 2}, true);
    auto y = mul(x, 2.0);
    CHECK_FALSE(y.requires_grad());
  }
}

TEST_CASE("forward ops are deterministic") {
  Rng r1(9), r2(9);
  auto x1 = random_tensor({2, 3, 6, 6}, r1), w1 = random_tensor({4, 3, 3, 3}, r1), b1 = random_tensor({4}, r1);
  auto x2 = random_tensor({2, 3, 6, 6}, r2), w2 = random_tensor({4, 3, 3, 3}, r2), b2 = random_tensor({4}, r2);
  CHECK(bit_equal(conv2d(x1, w1, b1, 1, 1).data(), conv2d(x2, w2, b2, 1, 1).data()));
}

TEST_CASE("small helper ops have correct gradients") {
  Rng rng(21);
  auto x = random_tensor({2, 3, 2, 2}, rng, true);
  auto y = random_tensor({2, 1, 2, 2}, rng, true);
  auto v = random_tensor({2, 3}, rng, true);
  auto m = random_tensor({4, 3}, rng, true);
  auto bias = random_tensor({3}, rng, true);
  auto p4 = random_tensor({2, 4, 2, 2}, rng);
  auto p3 = random_tensor({2, 3, 2, 2}, rng);
  auto p2 = random_tensor({2, 3}, rng);
  auto pm = random_tensor({4, 3}, rng);
  CHECK(oracle::gradcheck([&] { return sum(mul(concat_channels(x, y), p4)); }, {x, y}) < 1e-6);
  CHECK(oracle::gradcheck([&] { return sum(mul(add_channel_bias(x, v), p3)); }, {x, v}) < 1e-6);
  CHECK(oracle::gradcheck([&] { return sum(mul(global_avg_pool(x), p2)); }, {x}) < 1e-6);
  CHECK(oracle::gradcheck([&] { return sum(mul(add_row_bias(m, bias), pm)); }, {m, bias}) < 1e-6);
  CHECK(oracle::gradcheck([&] { return mean(mul(reshape(x, {2, 12}), reshape(p3, {2, 12}))); }, {x}) < 1e-6);
}
