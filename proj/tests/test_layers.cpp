#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <cstring>

#include "litediff/layers.hpp"
#include "support/oracles.hpp"

using namespace litediff;
using oracle::random_tensor;

namespace {

double largest_singular_value(const Tensor& w) {
  const auto rows = static_cast<Eigen::Index>(w.dim(0));
  const auto cols = static_cast<Eigen::Index>(w.numel() / w.dim(0));
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(w.data().data(), rows,
                                                                                            cols);
  return Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues()(0);
}

}  // namespace

TEST_CASE("group_norm trivial cases") {
  auto x = Tensor::full({2, 4, 3, 3}, 1.7);
  auto out = group_norm(x, 2, Tensor::full({4}, 1.0), Tensor::zeros({4}));
  for (double v : out.data()) CHECK(std::abs(v) < 1e-12);

  Rng rng(1);
  auto y = random_tensor({1, 4, 3, 3}, rng);
  Tensor beta({4}, {0.5, -1, 2, 3});
  auto z = group_norm(y, 4, Tensor::zeros({4}), beta);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t i = 0; i < 9; ++i) CHECK(z[c * 9 + i] == beta[c]);

  CHECK_THROWS_AS(group_norm(y, 3, Tensor::full({4}, 1.0), Tensor::zeros({4})), std::invalid_argument);
}

TEST_CASE("group_norm standardises each group") {
  Rng rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    auto x = random_tensor({2, 8, 4, 4}, rng, false, 10.0);
    auto out = group_norm(x, 4, Tensor::full({8}, 1.0), Tensor::zeros({8}));
    const std::size_t group = 2 * 16;
    for (std::size_t g = 0; g < 2 * 4; ++g) {
      double mean = 0.0;
      for (std::size_t i = 0; i < group; ++i) mean += out[g * group + i];
      mean /= group;
      double var = 0.0;
      for (std::size_t i = 0; i < group; ++i) var += (out[g * group + i] - mean) * (out[g * group + i] - mean);
      var /= group;
      CHECK(std::abs(mean) < 1e-10);
      CHECK(std::abs(var - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("group_norm gradients") {
  Rng rng(8);
  auto x = random_tensor({2, 4, 3, 3}, rng, true);
  auto gamma = random_tensor({4}, rng, true);
  auto beta = random_tensor({4}, rng, true);
  auto p = random_tensor({2, 4, 3, 3}, rng);
  CHECK(oracle::gradcheck([&] { return sum(mul(group_norm(x, 2, gamma, beta), p)); }, {x, gamma, beta}) < 1e-4);
}

TEST_CASE("activations") {
  CHECK(relu(Tensor::scalar(-3)).item() == 0.0);
  CHECK(leaky_relu(Tensor::scalar(-2), 0.01).item() == doctest::Approx(-0.02).epsilon(1e-15));
  CHECK(sigmoid(Tensor::scalar(0)).item() == 0.5);
  CHECK(sigmoid(Tensor::scalar(200)).item() == 1.0 - kProbFloor);
  CHECK(sigmoid(Tensor::scalar(-200)).item() == kProbFloor);
  CHECK_THROWS_AS(leaky_relu(Tensor::scalar(1), 1.5), std::invalid_argument);

  Rng rng(12);
  auto x = random_tensor({3, 5}, rng, true);
  auto p = random_tensor({3, 5}, rng);
  for (auto act : {Activation::relu(), Activation::leaky(0.01), Activation::sigmoid(), Activation::tanh()}) {
    CHECK(oracle::gradcheck([&] { return sum(mul(activation(act, x), p)); }, {x}) < 1e-4);
  }
}

TEST_CASE("composite conv -> group_norm -> relu gradient") {
  Rng rng(13);
  auto x = random_tensor({2, 3, 5, 5}, rng, true);
  auto w = random_tensor({4, 3, 3, 3}, rng, true);
  auto b = random_tensor({4}, rng, true);
  auto gamma = random_tensor({4}, rng, true);
  auto beta = random_tensor({4}, rng, true);
  auto p = random_tensor({2, 4, 5, 5}, rng);
  auto f = [&] { return sum(mul(relu(group_norm(conv2d(x, w, b, 1, 1), 2, gamma, beta)), p)); };
  CHECK(oracle::gradcheck(f, {x, w, b, gamma, beta}) < 1e-4);
}

TEST_CASE("spectral normalisation") {
  Rng rng(17);
  SUBCASE("rank-1 weight is normalised to unit spectral norm") {
    // W = 3 * a b^T with unit a (3) and unit b (2*2*2).
    std::vector<double> a{1, 2, 2}, b(8);
    for (auto& v : a) v /= 3.0;
    double nb = 0.0;
    for (auto& v : b) {
      v = rng.normal();
      nb += v * v;
    }
    for (auto& v : b) v /= std::sqrt(nb);
    std::vector<double> w(24);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 8; ++j) w[i * 8 + j] = 3.0 * a[i] * b[j];
    Tensor weight({3, 2, 2, 2}, w);
    CHECK(largest_singular_value(weight) == doctest::Approx(3.0).epsilon(1e-12));

    auto state = SpectralState::random(3, rng);
    auto x = random_tensor({1, 2, 4, 4}, rng);
    auto bias = Tensor::zeros({3});
    for (int i = 0; i < 4; ++i) spectral_conv2d(x, weight, bias, state, 1, 0);
    auto probe = state;
    const double sigma = spectral_sigma(weight, probe);
    auto out = spectral_conv2d(x, weight, bias, state, 1, 0);
    auto want = conv2d(x, scale(weight, 1.0 / sigma), bias, 1, 0);
    for (std::size_t i = 0; i < out.numel(); ++i) CHECK(out[i] == want[i]);
    CHECK(std::abs(largest_singular_value(scale(weight, 1.0 / sigma)) - 1.0) < 0.02);
    double unorm = 0.0;
    for (double v : state.u) unorm += v * v;
    CHECK(unorm == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("zero weight gives bias") {
    auto state = SpectralState::random(2, rng);
    Tensor bias({2}, {0.3, -0.4});
    auto out = spectral_conv2d(random_tensor({1, 1, 3, 3}, rng), Tensor::zeros({2, 1, 3, 3}), bias, state, 1, 1);
    for (std::size_t i = 0; i < 9; ++i) {
      CHECK(out[i] == 0.3);
      CHECK(out[9 + i] == -0.4);
    }
  }
  SUBCASE("scaling the raw weight leaves the output unchanged") {
    auto w = random_tensor({4, 2, 3, 3}, rng);
    auto w2 = scale(w, 2.0);
    auto bias = random_tensor({4}, rng);
    auto x = random_tensor({2, 2, 6, 6}, rng);
    auto s1 = SpectralState::random(4, rng);
    auto s2 = s1;
    for (int i = 0; i < 10; ++i) {
      spectral_conv2d(x, w, bias, s1, 1, 1);
      spectral_conv2d(x, w2, bias, s2, 1, 1);
    }
    auto o1 = spectral_conv2d(x, w, bias, s1, 1, 1);
    auto o2 = spectral_conv2d(x, w2, bias, s2, 1, 1);
    for (std::size_t i = 0; i < o1.numel(); ++i) CHECK(std::abs(o1[i] - o2[i]) < 1e-6);
  }
  SUBCASE("sigma is a constant in backward") {
    auto w = random_tensor({3, 2, 3, 3}, rng, true);
    auto bias = random_tensor({3}, rng, true);
    auto x = random_tensor({1, 2, 5, 5}, rng, true);
    auto p = random_tensor({1, 3, 5, 5}, rng);
    auto st = SpectralState::random(3, rng);
    for (int i = 0; i < 200; ++i) spectral_sigma(w, st);
    CHECK(oracle::gradcheck([&] { return sum(mul(spectral_conv2d(x, w, bias, st, 1, 1), p)); }, {x, bias}) < 1e-4);
  }
  SUBCASE("u length mismatch") {
    auto st = SpectralState::random(5, rng);
    CHECK_THROWS_AS(spectral_conv2d(Tensor::zeros({1, 1, 3, 3}), Tensor::zeros({2, 1, 3, 3}), Tensor::zeros({2}), st,
                                    1, 1),
                    ShapeError);
  }
}

TEST_CASE("mse_loss") {
  Tensor a({2}, {0, 0});
  Tensor b({2}, {1, 1});
  CHECK(mse_loss(a, a).item() == 0.0);
  CHECK(mse_loss(a, b).item() == 1.0);
  CHECK_THROWS_AS(mse_loss(a, Tensor::zeros({3})), ShapeError);

  Rng rng(3);
  auto x = random_tensor({2, 3}, rng, true);
  auto y = random_tensor({2, 3}, rng, true);
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = mse_loss(x, y);
  }
  backward(loss, tape);
  for (std::size_t i = 0; i < 6; ++i) CHECK(x.grad()[i] == doctest::Approx(2.0 * (x[i] - y[i]) / 6.0).epsilon(1e-14));
  CHECK(oracle::gradcheck([&] { return mse_loss(x, y); }, {x, y}) < 1e-6);
}

TEST_CASE("bce_loss") {
  CHECK(bce_loss(Tensor::scalar(0.5), 1.0).item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(bce_loss(Tensor::scalar(1.0 - 1e-12), 1.0).item() < 1e-11);
  const double ld = 0.5 * (bce_loss(Tensor::scalar(0.5), 1.0).item() + bce_loss(Tensor::scalar(0.5), 0.0).item());
  CHECK(std::abs(ld - std::log(2.0)) < 1e-12);

  Rng rng(6);
  for (int i = 0; i < 50; ++i) {
    const double p = rng.uniform(1e-6, 1.0 - 1e-6);
    const double t = rng.uniform();
    CHECK(bce_loss(Tensor::scalar(p), t).item() >= 0.0);
  }
  auto logits = random_tensor({4}, rng, true);
  CHECK(oracle::gradcheck([&] { return bce_loss(sigmoid(logits), 1.0); }, {logits}) < 1e-4);
  CHECK(oracle::gradcheck([&] { return bce_loss(sigmoid(logits), 0.25); }, {logits}) < 1e-4);
}

TEST_CASE("param store") {
  ParamStore store;
  store.add("a.weight", Tensor::zeros({2}), true);
  CHECK_THROWS_AS(store.add("a.weight", Tensor::zeros({2}), true), std::invalid_argument);
  store.add("b", Tensor::zeros({3}), false);
  CHECK(store.param_count() == 5);
  CHECK(store.trainable_count() == 2);
  CHECK(store.get("a.weight").requires_grad());
  CHECK_FALSE(store.get("b").requires_grad());
  store.freeze_all();
  CHECK(store.all_frozen());
  CHECK_FALSE(store.get("a.weight").requires_grad());
}

TEST_CASE("optimizer step") {
  SUBCASE("sgd") {
    ParamStore store;
    store.add("p", Tensor::scalar(1.0), true);
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      loss = sum(store.get("p"));
    }
    backward(loss, tape);
    Optimizer(Sgd{0.1}).step(store);
    CHECK(store.get("p").item() == 0.9);
    CHECK_FALSE(store.get("p").has_grad());
  }
  SUBCASE("adam single step matches hand computation") {
    ParamStore store;
    store.add("p", Tensor::scalar(0.5), true);
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      loss = mul(store.get("p"), 0.2);
    }
    backward(loss, tape);
    Optimizer opt(Adam{1e-3, 0.9, 0.999, 1e-8});
    opt.step(store);
    const double m_hat = (0.1 * 0.2) / (1.0 - 0.9);
    const double v_hat = (0.001 * 0.04) / (1.0 - 0.999);
    const double expected = 0.5 - 1e-3 * m_hat / (std::sqrt(v_hat) + 1e-8);
    CHECK(store.get("p").item() == doctest::Approx(expected).epsilon(1e-14));
    CHECK(store.get("p").item() < 0.5);
  }
  SUBCASE("frozen entries stay bit-identical") {
    Rng rng(1);
    ParamStore store;
    store.add("live", random_tensor({3}, rng), true);
    store.add("frozen", random_tensor({3}, rng), false);
    auto before = store.get("frozen").clone();
    Optimizer opt(Adam{});
    for (int i = 0; i < 5; ++i) {
      Tape tape;
      Tensor loss;
      {
        TapeScope scope(tape);
        loss = sum(mul(store.get("live"), store.get("frozen")));
      }
      backward(loss, tape);
      opt.step(store);
    }
    CHECK(std::memcmp(before.data().data(), store.get("frozen").data().data(), 3 * sizeof(double)) == 0);
  }
  SUBCASE("step before backward") {
    ParamStore store;
    store.add("p", Tensor::scalar(1.0), true);
    Optimizer opt(Sgd{0.1});
    CHECK_THROWS_AS(opt.step(store), MissingGradientError);
    CHECK(store.get("p").item() == 1.0);
  }
  SUBCASE("state export round trip") {
    ParamStore store;
    store.add("p", Tensor({2}, {1, 2}), true);
    Optimizer a(Adam{});
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      loss = sum(mul(store.get("p"), store.get("p")));
    }
    backward(loss, tape);
    a.step(store);
    ParamStore saved;
    a.export_state(saved, "opt.");
    Optimizer b(Adam{});
    b.import_state(saved, "opt.");
    CHECK(b.steps() == 1);
    ParamStore again;
    b.export_state(again, "opt.");
    CHECK(again.get("opt.m.p")[1] == saved.get("opt.m.p")[1]);
  }
}

TEST_CASE("clip_grad_norm") {
  ParamStore store;
  store.add("a", Tensor({2}, {0, 0}), true);
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = sum(mul(store.get("a"), Tensor({2}, {3, 4})));
  }
  backward(loss, tape);
  CHECK(clip_grad_norm(store, 1.0) == doctest::Approx(5.0));
  CHECK(store.get("a").grad()[0] == doctest::Approx(0.6));
  CHECK(store.get("a").grad()[1] == doctest::Approx(0.8));
}
