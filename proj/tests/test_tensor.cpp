#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ntta/tensor.hpp"
#include "oracles.hpp"

namespace ntta {
namespace {

Tensor vec(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor({n}, std::move(v));
}

TEST(Elementwise, MulIsPointwise) {
  const Tensor r = mul(vec({1, 2, 3}), vec({4, 5, 6}));
  EXPECT_EQ(r.shape(), Shape({3}));
  EXPECT_EQ(r[0], 4);
  EXPECT_EQ(r[1], 10);
  EXPECT_EQ(r[2], 18);
}

TEST(Elementwise, AddZeroIsBitwiseIdentity) {
  std::mt19937_64 rng(3);
  const Tensor x = Tensor::randn({4, 5}, rng);
  EXPECT_TRUE((x + 0.0).bitwise_equal(x));
  EXPECT_TRUE(add(x, Tensor::scalar(0.0)).bitwise_equal(x));
}

TEST(Elementwise, MulGradientMatchesFiniteDifferences) {
  Tensor a = vec({1, 2});
  const Tensor b = vec({3, 4});
  a.set_requires_grad();
  Tape tape;
  {
    TapeScope scope(tape);
    backward(sum(mul(a, b)));
  }
  const auto expected = oracle::central_difference(
      [](const std::vector<double>& x) { return x[0] * 3 + x[1] * 4; }, {1, 2});
  ASSERT_EQ(expected.size(), 2u);
  EXPECT_NEAR(a.grad()[0], expected[0], 1e-8);
  EXPECT_NEAR(a.grad()[1], expected[1], 1e-8);
  EXPECT_DOUBLE_EQ(a.grad()[0], 3.0);
  EXPECT_DOUBLE_EQ(a.grad()[1], 4.0);
}

TEST(Elementwise, BroadcastTrailingSingletons) {
  const Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor b({2, 1}, {10, 20});
  const Tensor r = add(a, b);
  EXPECT_EQ(r.shape(), Shape({2, 3}));
  EXPECT_EQ(r[0], 11);
  EXPECT_EQ(r[5], 26);
}

TEST(Elementwise, ShapeMismatchNamesBothShapes) {
  try {
    add(Tensor({2, 3}), Tensor({4}));
    FAIL();
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[4]"), std::string::npos);
  }
}

TEST(Elementwise, LogOfNonPositiveIsDomainError) {
  EXPECT_THROW(log(vec({1.0, 0.0})), DomainError);
  EXPECT_THROW(log(vec({-2.0})), DomainError);
}

TEST(Broadcast, AssociativeUpToRankFour) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> rank_dist(0, 4);
  std::uniform_int_distribution<int> coin(0, 2);
  int checked = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    // Draw a target shape and derive three compatible shapes from it.
    Shape full(4);
    for (auto& d : full) d = 1 + coin(rng) + coin(rng);
    auto derive = [&]() {
      const int r = rank_dist(rng);
      Shape s(full.end() - r, full.end());
      for (auto& d : s)
        if (coin(rng) == 0) d = 1;
      return s;
    };
    const Shape s1 = derive(), s2 = derive(), s3 = derive();
    EXPECT_EQ(broadcast_shapes(broadcast_shapes(s1, s2), s3),
              broadcast_shapes(s1, broadcast_shapes(s2, s3)));
    ++checked;
  }
  EXPECT_EQ(checked, 2000);
}

TEST(Reduce, SumMeanMax) {
  EXPECT_EQ(sum(vec({1, 2, 3}), {0}).item(), 6.0);
  EXPECT_EQ(mean(Tensor({2, 2}, 1.0)).item(), 1.0);
  EXPECT_EQ(max(vec({-1, 5, 3})).item(), 5.0);
}

TEST(Reduce, KeepDimsAndAxes) {
  const Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor s = sum(a, {1}, true);
  EXPECT_EQ(s.shape(), Shape({2, 1}));
  EXPECT_EQ(s[0], 6);
  EXPECT_EQ(s[1], 15);
  const Tensor m = max(a, {0});
  EXPECT_EQ(m.shape(), Shape({3}));
  EXPECT_EQ(m[2], 6);
}

TEST(Reduce, InvalidAxisThrows) {
  EXPECT_THROW(sum(Tensor({2, 2}), {2}), ShapeError);
  EXPECT_THROW(sum(Tensor({2, 2}), {1, 1}), ShapeError);
}

TEST(Reduce, MaxGradientRoutesToArgmax) {
  Tensor x = vec({-1, 5, 3});
  x.set_requires_grad();
  Tape tape;
  {
    TapeScope scope(tape);
    backward(max(x));
  }
  const auto fd = oracle::central_difference(
      [](const std::vector<double>& v) { return std::max({v[0], v[1], v[2]}); }, {-1, 5, 3});
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(x.grad()[i], fd[i], 1e-8);
  EXPECT_EQ(x.grad()[1], 1.0);
  EXPECT_EQ(x.grad()[0], 0.0);
}

TEST(Reduce, MaxTieGoesToFirstIndex) {
  Tensor x = vec({2, 7, 7, 1});
  x.set_requires_grad();
  Tape tape;
  {
    TapeScope scope(tape);
    backward(max(x));
  }
  EXPECT_EQ(x.grad()[1], 1.0);
  EXPECT_EQ(x.grad()[2], 0.0);
}

TEST(Reduce, DeterministicBitwise) {
  std::mt19937_64 rng(5);
  const Tensor x = Tensor::randn({7, 13, 5}, rng, 1e3);
  EXPECT_TRUE(sum(x, {1}).bitwise_equal(sum(x, {1})));
  EXPECT_TRUE(mean(x).bitwise_equal(mean(x)));
}

TEST(Matmul, IdentityAndHandArithmetic) {
  std::mt19937_64 rng(1);
  const Tensor x = Tensor::randn({3, 4}, rng);
  Tensor eye({3, 3});
  for (int i = 0; i < 3; ++i) eye.mutable_data()[i * 3 + i] = 1.0;
  EXPECT_TRUE(matmul(eye, x).bitwise_equal(x));

  const Tensor r = matmul(Tensor({2, 2}, {1, 2, 3, 4}), Tensor({2, 1}, {1, 1}));
  EXPECT_EQ(r.shape(), Shape({2, 1}));
  EXPECT_EQ(r[0], 3);
  EXPECT_EQ(r[1], 7);
}

TEST(Matmul, InnerMismatchThrows) {
  EXPECT_THROW(matmul(Tensor({2, 3}), Tensor({2, 3})), ShapeError);
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  const Tensor a = Tensor::randn({3, 2}, rng);
  const Tensor b = Tensor::randn({2, 4}, rng);
  EXPECT_LE(grad_check([&](const Tensor& x) { return sum(matmul(x, b)); }, a), 1e-6);
  EXPECT_LE(grad_check([&](const Tensor& x) { return sum(matmul(a, x)); }, b), 1e-6);
}

TEST(Backward, SumGivesOnes) {
  Tensor x({2, 3, 2}, 0.5);
  x.set_requires_grad();
  Tape tape;
  {
    TapeScope scope(tape);
    backward(sum(x));
  }
  const Tensor g = x.grad();
  for (double v : g.data()) EXPECT_EQ(v, 1.0);
}

TEST(Backward, SquareGivesTwoX) {
  Tensor x = vec({1, -2});
  x.set_requires_grad();
  Tape tape;
  {
    TapeScope scope(tape);
    backward(sum(x * x));
  }
  EXPECT_EQ(x.grad()[0], 2.0);
  EXPECT_EQ(x.grad()[1], -4.0);
}

TEST(Backward, NonScalarAndDoubleCallAreErrors) {
  Tensor x = vec({1, 2});
  x.set_requires_grad();
  Tape tape;
  TapeScope scope(tape);
  const Tensor y = x * 2.0;
  EXPECT_THROW(backward(y), TapeError);
  const Tensor loss = sum(y);
  backward(loss);
  EXPECT_THROW(backward(loss), TapeError);
  tape.reset();
  EXPECT_THROW(backward(loss), TapeError);
  x.zero_grad();
  backward(sum(x * 2.0));
  EXPECT_EQ(x.grad()[0], 2.0);
}

TEST(Backward, TapeIsTopologicallyOrdered) {
  Tensor x = vec({1, 2, 3});
  x.set_requires_grad();
  Tape tape;
  TapeScope scope(tape);
  const Tensor a = exp(x);
  const Tensor b = a * x;
  const Tensor c = sum(b);
  ASSERT_TRUE(a.tape_id() && b.tape_id() && c.tape_id());
  EXPECT_LT(*a.tape_id(), *b.tape_id());
  EXPECT_LT(*b.tape_id(), *c.tape_id());
  EXPECT_EQ(tape.next_id(), 3u);
  EXPECT_FALSE(x.tape_id());
}

TEST(Backward, LinearityOverIndependentLosses) {
  std::mt19937_64 rng(21);
  Tensor x = Tensor::randn({5}, rng);
  x.set_requires_grad();
  auto loss1 = [&]() { return sum(exp(x) * x); };
  auto loss2 = [&]() { return mean(x * x * x); };

  Tape tape;
  {
    TapeScope scope(tape);
    backward(loss1() + loss2());
  }
  const Tensor joint = x.grad();
  x.zero_grad();
  tape.reset();
  {
    TapeScope scope(tape);
    backward(loss1());
  }
  const Tensor g1 = x.grad();
  x.zero_grad();
  tape.reset();
  {
    TapeScope scope(tape);
    backward(loss2());
  }
  const Tensor g2 = x.grad();
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(joint[i], g1[i] + g2[i], 1e-14);
}

TEST(GradCheck, LinearAndExp) {
  std::mt19937_64 rng(2);
  EXPECT_LE(grad_check([](const Tensor& x) { return sum(x); }, Tensor::uniform({3, 4}, rng, -0.1, 0.1)),
            1e-10);
  EXPECT_LE(grad_check([](const Tensor& x) { return sum(exp(x)); }, vec({0, 1})), 1e-6);
}

TEST(GradCheck, NonScalarThrows) {
  EXPECT_THROW(grad_check([](const Tensor& x) { return x * 2.0; }, vec({1, 2})), ShapeError);
}

TEST(GradCheck, EveryPrimitiveOnSeededInputs) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    const Tensor a = Tensor::randn({3, 4}, rng);
    const Tensor b = Tensor::randn({3, 4}, rng);
    const Tensor pos = Tensor::uniform({3, 4}, rng, 0.5, 2.0);
    const Tensor row = Tensor::randn({1, 4}, rng);
    const Tensor m = Tensor::randn({4, 2}, rng);
    const Tensor w = Tensor::randn({3, 4}, rng);  // fixed projection so sums are not trivial
    auto proj = [&](const Tensor& t) { return sum(t * w); };
    EXPECT_LE(grad_check([&](const Tensor& x) { return proj(x + b); }, a), 1e-5) << seed;
    EXPECT_LE(grad_check([&](const Tensor& x) { return proj(x - row); }, a), 1e-5) << seed;
    EXPECT_LE(grad_check([&](const Tensor& x) { return proj(a - x); }, row), 1e-5) << seed;
    EXPECT_LE(grad_check([&](const Tensor& x) { return proj(x * b); }, a), 1e-5) << seed;
    EXPECT_LE(grad_check([&](const Tensor& x) { return proj(a / x); }, pos), 1e-5) << seed;
    EXPECT_LE(grad_check([&](const Tensor& x) { return proj(x / pos); }, a), 1e-5) << seed;
    EXPECT_LE(grad_check([&](const Tensor& x) { return proj(exp(x)); }, a), 1e-5) << seed;
    EXPECT_LE(grad_check([&](const Tensor& x) { return proj(log(x)); }, pos), 1e-5) << seed;
    EXPECT_LE(grad_check([&](const Tensor& x) { return proj(-x); }, a), 1e-5) << seed;
    EXPECT_LE(grad_check([&](const Tensor& x) { return sum(mean(x, {0}) * row); }, a), 1e-5) << seed;
    EXPECT_LE(grad_check([&](const Tensor& x) { return sum(max(x, {1})); }, a), 1e-5) << seed;
    EXPECT_LE(grad_check([&](const Tensor& x) { return sum(matmul(x, m) * matmul(x, m)); }, a), 1e-5)
        << seed;
    EXPECT_LE(grad_check([&](const Tensor& x) { return proj(transpose(reshape(x, {4, 3}))); }, a), 1e-5)
        << seed;
    EXPECT_LE(grad_check(
                  [&](const Tensor& x) {
                    const Tensor parts[] = {x, b};
                    return sum(concat(parts, 1) * concat(parts, 1));
                  },
                  a),
              1e-5)
        << seed;
    EXPECT_LE(grad_check(
                  [&](const Tensor& x) {
                    const Tensor parts[] = {x, b, x};
                    return sum(exp(take(stack(parts), 0, 2)) * w);
                  },
                  a),
              1e-5)
        << seed;
  }
}

TEST(Layout, ConcatStackTake) {
  const Tensor a({1, 2}, {1, 2});
  const Tensor b({1, 3}, {3, 4, 5});
  const Tensor parts[] = {a, b};
  const Tensor c = concat(parts, 1);
  EXPECT_EQ(c.shape(), Shape({1, 5}));
  EXPECT_EQ(c[4], 5);
  const Tensor same[] = {a, a * 2.0};
  const Tensor s = stack(same);
  EXPECT_EQ(s.shape(), Shape({2, 1, 2}));
  EXPECT_EQ(take(s, 0, 1)[1], 4);
  EXPECT_THROW(take(s, 0, 2), ShapeError);
  EXPECT_THROW(concat(std::vector<Tensor>{a, Tensor({2, 2})}, 1), ShapeError);
}

TEST(TensorType, ShapeDataInvariant) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  const Tensor t({2, 3, 4});
  EXPECT_EQ(t.numel(), shape_numel(t.shape()));
}

}  // namespace
}  // namespace ntta
