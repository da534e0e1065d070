#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "moh/numcore/gradcheck.hpp"
#include "moh/numcore/ops.hpp"
#include "moh/numcore/params.hpp"
#include "moh/numcore/rng.hpp"

using namespace moh::nc;

namespace {

Tensor<double> random_tensor(Shape shape, CounterRng rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data) v = scale * rng.normal();
  return t;
}

// Plain triple loop.
std::vector<double> ref_matmul(const Tensor<double>& a, const Tensor<double>& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a.at(i, p) * b.at(p, j);
  return c;
}

}  // namespace

TEST(Rng, SameKeySameStream) {
  CounterRng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, DerivedStreamsDiffer) {
  const CounterRng root(7);
  auto a = root.derive("a"), b = root.derive("b"), c = root.derive(1), d = root.derive(2);
  EXPECT_NE(a.next_u64(), b.next_u64());
  EXPECT_NE(c.next_u64(), d.next_u64());
}

TEST(Rng, UniformAndBelowInRange) {
  CounterRng r(3);
  double mean = 0.0;
  for (int i = 0; i < 20000; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    mean += u;
    ASSERT_LT(r.below(7), 7u);
  }
  EXPECT_NEAR(mean / 20000, 0.5, 0.01);
}

TEST(Rng, NormalMoments) {
  CounterRng r(11);
  double s = 0, s2 = 0;
  const int n = 40000;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    s += x;
    s2 += x * x;
  }
  EXPECT_NEAR(s / n, 0.0, 0.02);
  EXPECT_NEAR(s2 / n, 1.0, 0.03);
}

TEST(Rng, TruncatedNormalBounded) {
  CounterRng r(5);
  for (int i = 0; i < 5000; ++i) ASSERT_LE(std::abs(r.truncated_normal(0.02)), 0.04 + 1e-15);
}

TEST(Matmul, SmallExample) {
  Tape<double> t;
  auto a = t.constant(Tensor<double>({2, 3}, {1, 2, 3, 4, 5, 6}));
  auto b = t.constant(Tensor<double>({3, 2}, {7, 8, 9, 10, 11, 12}));
  const auto c = matmul(a, b).value();
  EXPECT_EQ(c.shape, (Shape{2, 2}));
  EXPECT_EQ(c.data, (Buffer<double>{58, 64, 139, 154}));
}

TEST(Matmul, MatchesLoopReference) {
  CounterRng rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t m = 1 + rng.below(9), k = 1 + rng.below(9), n = 1 + rng.below(9);
    Tape<double> t;
    const auto A = random_tensor({m, k}, rng.derive(100 + trial));
    const auto B = random_tensor({k, n}, rng.derive(200 + trial));
    const auto c = matmul(t.constant(A), t.constant(B)).value();
    const auto ref = ref_matmul(A, B);
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(c.data[i], ref[i], 1e-12);
  }
}

TEST(Matmul, ShapeMismatchThrows) {
  Tape<double> t;
  auto a = t.constant(Tensor<double>({2, 3}));
  auto b = t.constant(Tensor<double>({2, 3}));
  EXPECT_THROW(matmul(a, b), DimensionError);
}

TEST(MaskedSoftmax, HandExample) {
  Tape<double> t;
  auto x = t.constant(Tensor<double>({1, 3}, {1.0, 2.0, 3.0}));
  Tensor<std::uint8_t> mask({1, 3}, {1, 0, 1});
  const auto y = masked_softmax(x, mask, 1).value();
  const double e1 = std::exp(1.0), e3 = std::exp(3.0);
  EXPECT_NEAR(y[0], e1 / (e1 + e3), 1e-15);
  EXPECT_EQ(y[1], 0.0);
  EXPECT_NEAR(y[2], e3 / (e1 + e3), 1e-15);
}

TEST(MaskedSoftmax, ShiftInvariantAndNormalized) {
  CounterRng rng(9);
  const auto X = random_tensor({6, 5}, rng, 3.0);
  Tensor<std::uint8_t> mask({6, 5}, 1);
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = (i % 3 != 1) ? 1 : 0;
  auto shifted = X;
  for (auto& v : shifted.data) v += 123.0;
  Tape<double> t;
  const auto a = masked_softmax(t.constant(X), mask, 1).value();
  const auto b = masked_softmax(t.constant(shifted), mask, 1).value();
  for (std::size_t r = 0; r < 6; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 5; ++c) {
      EXPECT_NEAR(a.at(r, c), b.at(r, c), 1e-12);
      if (!mask.at(r, c)) EXPECT_EQ(a.at(r, c), 0.0);
      s += a.at(r, c);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(MaskedSoftmax, EmptySliceIsAnError) {
  Tape<double> t;
  auto x = t.constant(Tensor<double>({1, 2}, {0.0, 0.0}));
  Tensor<std::uint8_t> mask({1, 2}, 0);
  EXPECT_ANY_THROW(masked_softmax(x, mask, 1));
}

TEST(Attention, MatchesDirectFormula) {
  CounterRng rng(21);
  const std::size_t L = 5, K = 6, d = 4;
  const auto Q = random_tensor({L, d}, rng.derive(1));
  const auto Kt = random_tensor({K, d}, rng.derive(2));
  const auto V = random_tensor({K, d}, rng.derive(3));
  Tensor<double> mask({L, K}, 0.0);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 0; j < K; ++j)
      if ((i + j) % 4 == 3) mask.at(i, j) = blocked_value<double>();
  Tape<double> t;
  const auto y = attention(t.constant(Q), t.constant(Kt), t.constant(V), mask).value();
  for (std::size_t i = 0; i < L; ++i) {
    std::vector<double> w(K);
    double mx = -1e300, s = 0;
    for (std::size_t j = 0; j < K; ++j) {
      double dot = 0;
      for (std::size_t c = 0; c < d; ++c) dot += Q.at(i, c) * Kt.at(j, c);
      w[j] = dot / std::sqrt(double(d)) + mask.at(i, j);
      mx = std::max(mx, w[j]);
    }
    for (auto& v : w) s += (v = std::exp(v - mx));
    for (std::size_t c = 0; c < d; ++c) {
      double o = 0;
      for (std::size_t j = 0; j < K; ++j) o += w[j] / s * V.at(j, c);
      EXPECT_NEAR(y.at(i, c), o, 1e-12);
    }
  }
}

TEST(Attention, FullyBlockedValidRowThrows) {
  Tape<double> t;
  auto q = t.constant(Tensor<double>({1, 2}, {1, 0}));
  Tensor<double> mask({1, 1}, blocked_value<double>());
  EXPECT_ANY_THROW(attention(q, q, q, mask));
}

TEST(GatherRows, MinusOneGivesZeroRowAndNoGradient) {
  Tape<double> t;
  auto x = t.input(Tensor<double>({2, 2}, {1, 2, 3, 4}), true);
  auto y = gather_rows(x, {1, -1, 0});
  EXPECT_EQ(y.value().data, (Buffer<double>{3, 4, 0, 0, 1, 2}));
  t.backward(sum(y));
  EXPECT_EQ(t.grad_tensor(x).data, (Buffer<double>{1, 1, 1, 1}));
}

TEST(Autodiff, SquareGradient) {
  Tape<double> t;
  auto x = t.input(Tensor<double>({3}, {1.0, -2.0, 0.5}), true);
  t.backward(sum(square(x)));
  EXPECT_EQ(t.grad_tensor(x).data, (Buffer<double>{2.0, -4.0, 1.0}));
}

TEST(Autodiff, ConstantFunctionHasZeroGradient) {
  Tape<double> t;
  auto x = t.input(Tensor<double>({3}, {1.0, 2.0, 3.0}), true);
  auto c = t.constant(Tensor<double>({3}, {4.0, 5.0, 6.0}));
  t.backward(sum(add(scale(x, 0.0), c)));
  for (double g : t.grad_tensor(x).data) EXPECT_EQ(g, 0.0);
}

// Finite-difference checks of every differentiable op.
class OpGrad : public ::testing::Test {
 protected:
  void check(const ScalarFn& f, std::vector<Tensor<double>> inputs, double tol = 1e-6) {
    const auto r = grad_check(f, inputs);
    EXPECT_LT(r.max_rel_error, tol) << "worst " << r.worst;
    EXPECT_GT(r.checked, 0u);
  }
  CounterRng rng{77};
  Tensor<double> r(Shape s, std::uint64_t tag, double scale = 1.0) {
    return random_tensor(std::move(s), rng.derive(tag), scale);
  }
  static Tensor<double> weights(std::size_t n) {
    Tensor<double> w({n});
    for (std::size_t i = 0; i < n; ++i) w[i] = std::sin(1.0 + 0.7 * double(i));
    return w;
  }
};

TEST_F(OpGrad, Elementwise) {
  const auto w = weights(12);
  check([&](Tape<double>&, auto v) { return weighted_sum(add(v[0], v[1]), w); }, {r({3, 4}, 1), r({3, 4}, 2)});
  check([&](Tape<double>&, auto v) { return weighted_sum(sub(v[0], v[1]), w); }, {r({3, 4}, 1), r({3, 4}, 2)});
  check([&](Tape<double>&, auto v) { return weighted_sum(mul(v[0], v[1]), w); }, {r({3, 4}, 1), r({3, 4}, 2)});
  check([&](Tape<double>&, auto v) { return weighted_sum(scale(v[0], 2.5), w); }, {r({3, 4}, 3)});
  check([&](Tape<double>&, auto v) { return weighted_sum(square(v[0]), w); }, {r({3, 4}, 4)});
  check([&](Tape<double>&, auto v) { return weighted_sum(gelu(v[0]), w); }, {r({3, 4}, 5, 2.0)});
  check([&](Tape<double>&, auto v) { return weighted_sum(exp(v[0]), w); }, {r({3, 4}, 6, 0.5)});
  auto pos = r({3, 4}, 7);
  for (auto& x : pos.data) x = 0.5 + std::abs(x);
  check([&](Tape<double>&, auto v) { return weighted_sum(log(v[0]), w); }, {pos});
  check([&](Tape<double>&, auto v) { return weighted_sum(abs(v[0]), w); }, {pos});
  check([&](Tape<double>&, auto v) { return weighted_sum(add_row(v[0], v[1]), w); }, {r({3, 4}, 8), r({4}, 9)});
}

TEST_F(OpGrad, Reductions) {
  check([&](Tape<double>&, auto v) { return sum(square(v[0])); }, {r({2, 5}, 1)});
  check([&](Tape<double>&, auto v) { return mean(square(v[0])); }, {r({2, 5}, 2)});
  const std::vector<int> group{0, 1, -1, 1, 0, 2};
  check(
      [&](Tape<double>&, auto v) {
        Tensor<double> w({6}, {1, 2, 3, 4, 5, 6});
        return sum(square(grouped_weighted_sum(v[0], w, group, 3)));
      },
      {r({6}, 3)});
  check(
      [&](Tape<double>&, auto v) {
        const Var<double> terms[] = {sum(square(v[0])), sum(v[1])};
        const double coeffs[] = {0.5, -2.0};
        return linear_combination<double>(terms, coeffs);
      },
      {r({3}, 4), r({2}, 5)});
}

TEST_F(OpGrad, LinearAlgebra) {
  const auto w = weights(15);
  check([&](Tape<double>&, auto v) { return weighted_sum(matmul(v[0], v[1]), w); }, {r({3, 4}, 1), r({4, 5}, 2)});
  check([&](Tape<double>&, auto v) { return weighted_sum(linear(v[0], v[1], v[2]), w); },
        {r({3, 4}, 3), r({4, 5}, 4), r({5}, 5)});
  check([&](Tape<double>&, auto v) { return weighted_sum(layer_norm(v[0], v[1], v[2]), w); },
        {r({3, 5}, 6), r({5}, 7), r({5}, 8)});
}

TEST_F(OpGrad, Normalizations) {
  const auto w = weights(12);
  check([&](Tape<double>&, auto v) { return weighted_sum(softmax(v[0]), w); }, {r({3, 4}, 1)});
  check([&](Tape<double>&, auto v) { return weighted_sum(log_softmax(v[0]), w); }, {r({3, 4}, 2)});
  Tensor<std::uint8_t> mask({3, 4}, {1, 1, 0, 1, 0, 1, 1, 1, 1, 0, 0, 0});
  check([&](Tape<double>&, auto v) { return weighted_sum(masked_softmax(v[0], mask, 1), w); }, {r({3, 4}, 3)});
  Tensor<std::uint8_t> mask0({3, 4}, {1, 1, 0, 1, 0, 1, 1, 1, 1, 0, 1, 0});
  check([&](Tape<double>&, auto v) { return weighted_sum(masked_softmax(v[0], mask0, 0), w); }, {r({3, 4}, 4)});
  auto pos = r({3, 4}, 5);
  for (auto& x : pos.data) x = 0.5 + std::abs(x);
  check([&](Tape<double>&, auto v) { return weighted_sum(normalize_rows(v[0]), w); }, {pos});
}

TEST_F(OpGrad, Indexing) {
  check([&](Tape<double>&, auto v) { return weighted_sum(take(v[0], {5, 0, 0, 3}, Shape{2, 2}), weights(4)); },
        {r({2, 3}, 1)});
  check([&](Tape<double>&, auto v) { return weighted_sum(gather_rows(v[0], {2, -1, 0, 2}), weights(12)); },
        {r({3, 3}, 2)});
  check(
      [&](Tape<double>&, auto v) {
        const Var<double> parts[] = {v[0], v[1]};
        return weighted_sum(concat_rows<double>(parts), weights(15));
      },
      {r({2, 3}, 3), r({3, 3}, 4)});
  check([&](Tape<double>&, auto v) { return weighted_sum(mix_rows(v[0], v[1]), weights(8)); },
        {r({4, 3}, 5), r({12, 2}, 6)});
  check([&](Tape<double>&, auto v) { return weighted_sum(reshape(v[0], Shape{3, 2}), weights(6)); },
        {r({2, 3}, 7)});
}

TEST_F(OpGrad, Attention) {
  Tensor<double> mask({4, 5}, 0.0);
  mask.at(0, 4) = mask.at(2, 1) = mask.at(3, 0) = blocked_value<double>();
  check([&](Tape<double>&, auto v) { return weighted_sum(attention(v[0], v[1], v[2], mask), weights(12)); },
        {r({4, 3}, 1), r({5, 3}, 2), r({5, 3}, 3)});

  auto layout = std::make_shared<AttentionLayout<double>>();
  AttentionMask<double> m;
  m.queries = 3;
  m.keys = 4;
  m.additive.assign(12, 0.0);
  m.additive[1 * 4 + 3] = blocked_value<double>();
  m.query_valid = {1, 1, 0};
  m.additive[2 * 4 + 0] = m.additive[2 * 4 + 1] = m.additive[2 * 4 + 2] = m.additive[2 * 4 + 3] =
      blocked_value<double>();
  layout->masks.push_back(m);
  layout->groups.push_back({{0, 1}, {0, 1}, -1});
  layout->groups.push_back({{2, 3, 4}, {0, 2, 3, 4}, 0});
  check([&](Tape<double>&, auto v) { return weighted_sum(multi_head_attention<double>(v[0], v[1], v[2], layout, 2), weights(20)); },
        {r({5, 4}, 4), r({5, 4}, 5), r({5, 4}, 6)});
}

TEST(MultiHeadAttention, InvalidQueryRowsAreZero) {
  CounterRng rng(4);
  auto layout = std::make_shared<AttentionLayout<double>>();
  AttentionMask<double> m;
  m.queries = 2;
  m.keys = 2;
  m.additive = {0.0, 0.0, blocked_value<double>(), blocked_value<double>()};
  m.query_valid = {1, 0};
  layout->masks.push_back(m);
  layout->groups.push_back({{0, 1}, {0, 1}, 0});
  Tape<double> t;
  auto x = t.constant(random_tensor({2, 4}, rng));
  const auto y = multi_head_attention<double>(x, x, x, layout, 2).value();
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(y.at(1, c), 0.0);
}

TEST(Params, StoreIsOrderedAndInitIsDeterministic) {
  ParamStore<double> a, b;
  a.add("z", truncated_normal<double>({3}, 0.02, CounterRng(1).derive("z")));
  a.add("a", zeros<double>({2}), false);
  b.add("a", zeros<double>({2}), false);
  b.add("z", truncated_normal<double>({3}, 0.02, CounterRng(1).derive("z")));
  EXPECT_EQ(a.names(), (std::vector<std::string>{"a", "z"}));
  EXPECT_EQ(a.get("z").value.data, b.get("z").value.data);
  EXPECT_EQ(a.scalar_count(), 5u);
}

TEST(Params, BinderBindsOnceAndAccumulates) {
  ParamStore<double> s;
  s.add("w", Tensor<double>({2}, {1.0, 2.0}));
  Tape<double> t;
  Binder<double> bind(t, s);
  auto w1 = bind("w");
  auto w2 = bind("w");
  EXPECT_EQ(w1.id, w2.id);
  t.backward(sum(mul(w1, w2)));
  EXPECT_EQ(s.get("w").grad.data, (Buffer<double>{2.0, 4.0}));
}

TEST(Matmul, IdentityAndHandCase) {
  CounterRng rng(2);
  const auto B = random_tensor({3, 3}, rng);
  Tape<double> t;
  Tensor<double> I({3, 3}, 0.0);
  for (std::size_t i = 0; i < 3; ++i) I.at(i, i) = 1.0;
  EXPECT_EQ(matmul(t.constant(I), t.constant(B)).value().data, B.data);
  const auto c = matmul(t.constant(Tensor<double>({2, 2}, {1, 2, 3, 4})), t.constant(Tensor<double>({2, 1}, {0, 1})));
  EXPECT_EQ(c.value().data, (Buffer<double>{2, 4}));
}

TEST(Matmul, GradientOfSumIsOnesTimesBTranspose) {
  CounterRng rng(8);
  const auto B = random_tensor({4, 2}, rng);
  Tape<double> t;
  auto a = t.input(random_tensor({3, 4}, rng.derive(1)), true);
  t.backward(sum(matmul(a, t.constant(B))));
  const auto g = t.grad_tensor(a);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(g.at(i, j), B.at(j, 0) + B.at(j, 1), 1e-14);
}

TEST(MaskedSoftmax, SymmetricCases) {
  Tape<double> t;
  const auto a = masked_softmax(t.constant(Tensor<double>({3}, {0, 0, 0})), Tensor<std::uint8_t>({3}, 1), 0).value();
  for (double v : a.data) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  const auto b = masked_softmax(t.constant(Tensor<double>({3}, {5, 5, -9})), Tensor<std::uint8_t>({3}, {1, 1, 0}), 0).value();
  EXPECT_NEAR(b[0], 0.5, 1e-15);
  EXPECT_NEAR(b[1], 0.5, 1e-15);
  EXPECT_EQ(b[2], 0.0);
  const auto c = masked_softmax(t.constant(Tensor<double>({2}, {1, 2})), Tensor<std::uint8_t>({2}, 1), 0).value();
  const double e = std::exp(1.0);
  EXPECT_NEAR(c[0], 1.0 / (1.0 + e), 1e-15);
  EXPECT_NEAR(c[1], e / (1.0 + e), 1e-15);
}

TEST(Attention, SingleTokenAndIdenticalKeys) {
  Tape<double> t;
  auto q = t.constant(Tensor<double>({1, 3}, {0.3, -1.0, 2.0}));
  auto v = t.constant(Tensor<double>({1, 3}, {4.0, 5.0, 6.0}));
  const auto vv = v.value().data;
  const auto y1 = attention(q, q, v, Tensor<double>({1, 1}, 0.0)).value().data;
  EXPECT_EQ(y1, vv);
  auto k2 = t.constant(Tensor<double>({2, 3}, {1, 2, 3, 1, 2, 3}));
  auto v2 = t.constant(Tensor<double>({2, 3}, {7, 8, 9, 7, 8, 9}));
  auto q2 = t.constant(Tensor<double>({2, 3}, {0.1, 0.2, 0.3, -1, 0, 1}));
  const auto y = attention(q2, k2, v2, Tensor<double>({2, 2}, 0.0)).value();
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(y.at(i, c), 7.0 + double(c), 1e-14);
}

TEST(GradCheck, SquareAtThree) {
  std::vector<Tensor<double>> x{Tensor<double>({1}, {3.0})};
  const auto r = grad_check([](Tape<double>&, auto v) { return sum(square(v[0])); }, x);
  EXPECT_LT(r.max_rel_error, 1e-8);
}
