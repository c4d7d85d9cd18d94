#include <gtest/gtest.h>

#include <cmath>
#include <thread>

#include "fimlab/network.hpp"
#include "fimlab/tensor_ad.hpp"

using namespace fimlab;
using namespace fimlab::ad;

namespace {

Var<double> vec_leaf(Tape& t, std::vector<double> v) {
  const auto n = v.size();
  return t.leaf(Shape::vector(n), std::move(v));
}

}  // namespace

TEST(Primitives, LogSoftmaxExamples) {
  Tape t;
  auto z = t.constant(Shape::vector(2), {0.0, 0.0});
  auto l = log_softmax(z);
  EXPECT_DOUBLE_EQ(l.value()[0], -std::log(2.0));
  EXPECT_DOUBLE_EQ(l.value()[1], -std::log(2.0));

  auto big = log_softmax(t.constant(Shape::vector(2), {1000.0, 0.0}));
  EXPECT_TRUE(std::isfinite(big.value()[0]));
  EXPECT_NEAR(big.value()[0], 0.0, 1e-300);
  EXPECT_NEAR(big.value()[1], -1000.0, 1e-12);
}

TEST(Primitives, GatherOfLogSoftmax) {
  Tape t;
  auto z = t.constant(Shape::matrix(1, 3), {1.0, 2.0, 3.0});
  auto g = gather(log_softmax(z), {2});
  const double expected = 3.0 - std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0));
  EXPECT_NEAR(g.value()[0], expected, 1e-15);
}

TEST(Primitives, ShapeMismatchRejectedAtRecordTime) {
  Tape t;
  auto a = t.leaf(Shape::matrix(2, 3), std::vector<double>(6, 1.0));
  auto b = t.leaf(Shape::matrix(2, 3), std::vector<double>(6, 1.0));
  auto v = vec_leaf(t, {1.0, 2.0});
  EXPECT_THROW(matmul(a, b), InvalidInput);
  EXPECT_THROW(add(a, v), InvalidInput);
  EXPECT_THROW(mul(a, v), InvalidInput);
  EXPECT_THROW(add_row(a, v), InvalidInput);
  EXPECT_THROW(gather(a, {0}), InvalidInput);
  EXPECT_THROW(gather(a, {0, 3}), InvalidInput);
  EXPECT_THROW(slice(v, 1, Shape::vector(2)), InvalidInput);
  EXPECT_THROW(t.leaf(Shape::vector(3), {1.0}), InvalidInput);
  Tape other;
  auto w = vec_leaf(other, {1.0, 2.0});
  EXPECT_THROW(add(v, w), InvalidInput);
}

TEST(StopGradient, ProductRuleWithFrozenFactor) {
  Tape t;
  auto th = t.leaf(Shape::scalar(), {3.0});
  auto y = mul(stop_gradient(th), th);
  EXPECT_EQ(y.item(), 9.0);
  EXPECT_EQ(t.backward(y).of(th)[0], 3.0);
}

TEST(StopGradient, AdjointIsExactlyZero) {
  Tape t;
  auto th = vec_leaf(t, {0.3, -1.2, 2.0});
  auto f = exp(tanh(th));
  auto s = stop_gradient(f);
  EXPECT_EQ(s.value(), f.value());
  auto root = sum(s);
  const auto g = t.backward(root).of(th);
  for (double v : g) EXPECT_EQ(v, 0.0);
}

TEST(Backward, Quadratic) {
  Tape t;
  auto th = vec_leaf(t, {1.0, 2.0});
  auto root = weighted_sum(th, th);
  const auto g = t.backward(root).of(th);
  EXPECT_EQ(g[0], 2.0);
  EXPECT_EQ(g[1], 4.0);
}

TEST(Backward, RejectsNonScalarRoot) {
  Tape t;
  auto th = vec_leaf(t, {1.0, 2.0});
  EXPECT_THROW(t.backward(tanh(th)), InvalidInput);
}

TEST(Backward, ConstantsReceiveNoGradient) {
  Tape t;
  auto c = t.constant(Shape::vector(2), {1.0, 2.0});
  auto th = vec_leaf(t, {0.5, 0.5});
  auto root = weighted_sum(c, th);
  const auto grads = t.backward(root);
  EXPECT_EQ(grads.of(c), (std::vector<double>{0.0, 0.0}));
  EXPECT_EQ(grads.of(th), (std::vector<double>{1.0, 2.0}));
}

TEST(Backward, SoftmaxLinearClosedForm) {
  Rng rng(1);
  const Index d = 4, c = 3;
  const auto spec = nn::NetworkSpec::linear(d, c);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    const Vector theta = nn::init_params(spec, rng);
    Vector x(d);
    for (Index i = 0; i < d; ++i) x[i] = n(rng);
    const std::size_t y = static_cast<std::size_t>(trial % c);

    Tape t;
    auto leaf = t.leaf(Shape::vector(static_cast<std::size_t>(theta.size())),
                       std::vector<double>(theta.data(), theta.data() + theta.size()));
    auto ell = sum(gather(log_softmax(nn::record_logits(spec, t, leaf, Matrix(x.transpose()))), {y}));
    const auto g = t.backward(ell).of(leaf);

    const Vector z = nn::unflatten(spec, theta)[0].weight * x;
    const Vector p = core::ProbVector::softmax(z).values();
    Vector r = -p;
    r[static_cast<Index>(y)] += 1.0;
    for (Index i = 0; i < c; ++i)
      for (Index k = 0; k < d; ++k) EXPECT_NEAR(g[static_cast<std::size_t>(i * d + k)], r[i] * x[k], 1e-14);
  }
}

TEST(Backward, AdjointLinearity) {
  Rng rng(4);
  const auto spec = nn::NetworkSpec::mlp({3, 5, 4});
  const Vector theta = nn::init_params(spec, rng);
  Matrix x = Matrix::Random(6, 3);
  const double a = 0.7, b = -2.3;

  auto grad_of = [&](auto build) {
    Tape t;
    auto leaf = t.leaf(Shape::vector(static_cast<std::size_t>(theta.size())),
                       std::vector<double>(theta.data(), theta.data() + theta.size()));
    auto z = nn::record_logits(spec, t, leaf, x);
    return t.backward(build(z)).of(leaf);
  };
  auto f = [](const Var<double>& z) { return sum(tanh(z)); };
  auto g = [](const Var<double>& z) { return sum(gather(log_softmax(z), {0, 1, 2, 3, 0, 1})); };
  const auto gf = grad_of(f), gg = grad_of(g);
  const auto gc = grad_of([&](const Var<double>& z) { return add(scale(f(z), a), scale(g(z), b)); });
  for (std::size_t i = 0; i < gc.size(); ++i) EXPECT_NEAR(gc[i], a * gf[i] + b * gg[i], 1e-12);
}

TEST(Tape, ReplayIsBitIdentical) {
  Rng rng(8);
  const auto spec = nn::NetworkSpec::mlp({3, 7, 7, 4});
  const Vector theta = nn::init_params(spec, rng);
  Tape t;
  auto leaf = t.leaf(Shape::vector(static_cast<std::size_t>(theta.size())),
                     std::vector<double>(theta.data(), theta.data() + theta.size()));
  auto root = sum(log_softmax(nn::record_logits(spec, t, leaf, Matrix::Random(5, 3))));
  std::vector<std::vector<double>> before;
  for (std::size_t i = 0; i < t.size(); ++i) before.push_back(t.node(static_cast<int>(i)).value);
  t.replay();
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(t.node(static_cast<int>(i)).value, before[i]);
  t.replay();
  EXPECT_EQ(root.value(), before.back());
}

TEST(Tape, BackwardCounterAndConcurrentReaders) {
  Tape t;
  auto th = vec_leaf(t, {1.0, 2.0, 3.0});
  auto root = sum(mul(th, th));
  EXPECT_EQ(t.backward_count(), 0u);
  std::vector<std::thread> pool;
  std::vector<std::vector<double>> results(8);
  for (int i = 0; i < 8; ++i)
    pool.emplace_back([&, i] { results[static_cast<std::size_t>(i)] = t.backward(root).of(th); });
  for (auto& th_ : pool) th_.join();
  EXPECT_EQ(t.backward_count(), 8u);
  for (const auto& r : results) EXPECT_EQ(r, (std::vector<double>{2.0, 4.0, 6.0}));
}

TEST(GradCheck, Examples) {
  Rng rng(12);
  Vector theta = Vector::Random(6);
  auto sq = [](auto& tape, auto th) {
    (void)tape;
    return weighted_sum(th, th);
  };
  EXPECT_LE(grad_check(sq, theta, 1e-5), 1e-10);

  auto constant = [](auto& tape, auto th) {
    using T = typename std::decay_t<decltype(th.value())>::value_type;
    auto c = tape.constant(Shape::vector(th.shape().numel()), std::vector<T>(th.shape().numel(), T(1)));
    return sum(stop_gradient(mul(c, th)));
  };
  EXPECT_EQ(grad_check(constant, theta, 1e-5), 0.0);
  EXPECT_THROW(grad_check(sq, theta, 0.0), InvalidInput);
}

TEST(GradCheck, RandomNetworksAllOps) {
  const std::vector<nn::NetworkSpec> archs = {
      nn::NetworkSpec::mlp({4, 6, 5, 3}, nn::Activation::Tanh),
      nn::NetworkSpec::mlp({4, 6, 5, 3}, nn::Activation::Relu),
      {{3, 4, 1}, nn::Activation::Tanh, true, nn::Head::Logistic},
  };
  for (const auto& spec : archs) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(seed);
      const Vector theta = nn::init_params(spec, rng);
      const Matrix x = Matrix::Random(3, spec.input_dim());
      auto f = [&](auto& tape, auto th) {
        auto z = nn::record_logits(spec, tape, th, x);
        auto l = log_softmax(z);
        auto lik = gather(l, {0, 1, 1});
        return add(sum(lik), sum(sqrt(clamp_min(exp(scale(z, 0.5)), 1e-30))));
      };
      EXPECT_LE(grad_check(f, theta, 1e-5), 1e-6) << "seed " << seed;
    }
  }
}
