#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "moh/horizon.hpp"
#include "moh/mixture.hpp"
#include "moh/numcore/gradcheck.hpp"

using namespace moh;
using namespace moh::nc;
using namespace moh::mixture;

namespace {

Tensor<double> random_tensor(Shape shape, CounterRng rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data) v = scale * rng.normal();
  return t;
}

// Direct CV^2 of a vector.
double cv2(const std::vector<double>& u) {
  double m = 0;
  for (double x : u) m += x;
  m /= double(u.size());
  double var = 0;
  for (double x : u) var += (x - m) * (x - m);
  var /= double(u.size());
  return var / (m * m + 1e-8);
}

}  // namespace

TEST(HorizonSet, Strides) {
  const auto a = HorizonSet::with_stride(30, 3);
  EXPECT_EQ(a.size(), 10u);
  EXPECT_EQ(a.horizons(), (std::vector<std::size_t>{3, 6, 9, 12, 15, 18, 21, 24, 27, 30}));
  EXPECT_EQ(HorizonSet::with_stride(30, 10).horizons(), (std::vector<std::size_t>{10, 20, 30}));
  EXPECT_EQ(HorizonSet::with_stride(30, 30), HorizonSet::single(30));
}

TEST(HorizonSet, InvalidSetsThrow) {
  EXPECT_ANY_THROW(HorizonSet::with_stride(30, 7));
  EXPECT_ANY_THROW(HorizonSet({}));
  EXPECT_ANY_THROW(HorizonSet({3, 3}));
  EXPECT_ANY_THROW(HorizonSet({6, 3}));
  EXPECT_ANY_THROW(HorizonSet({0, 3}));
}

TEST(HorizonSet, ActiveCountAndMask) {
  const auto s = HorizonSet::with_stride(30, 3);
  EXPECT_EQ(s.active_count(1), 10u);
  EXPECT_EQ(s.active_count(7), 8u);
  EXPECT_EQ(s.active_count(19), 4u);
  EXPECT_EQ(s.active_count(30), 1u);
  const auto m = s.step_mask();
  for (std::size_t k = 1; k <= 30; ++k) {
    std::size_t n_valid = 0;
    for (std::size_t n = 0; n < s.size(); ++n) {
      EXPECT_EQ(m.at(k - 1, n) != 0, k <= s[n]);
      n_valid += m.at(k - 1, n);
    }
    EXPECT_EQ(n_valid, s.active_count(k));
  }
}

TEST(Truncate, Rows) {
  ActionChunk c{random_tensor({30, 2}, CounterRng(1)), {}};
  EXPECT_EQ(truncate(c, 30).data, c.actions.data);
  const auto one = truncate(c, 1);
  EXPECT_EQ(one.shape, (Shape{1, 2}));
  EXPECT_EQ(one.data, (Buffer<double>{c.actions.at(0, 0), c.actions.at(0, 1)}));
  const auto ten = truncate(c, 10);
  EXPECT_EQ(ten.data, Buffer<double>(c.actions.data.begin(), c.actions.data.begin() + 20));
  EXPECT_ANY_THROW(truncate(c, 31));
}

TEST(Gate, EqualLogitsGiveUniformOverValid) {
  const auto s = HorizonSet::with_stride(30, 3);
  Tape<double> t;
  auto logits = t.constant(Tensor<double>({30, 10}, 0.5));
  const auto g = gate_from_logits(logits, s, 1);
  const auto a = g.alpha.value();
  for (std::size_t n = 0; n < 10; ++n) EXPECT_NEAR(a.at(6, n), n >= 2 ? 1.0 / 8.0 : 0.0, 1e-15);
}

TEST(Gate, SingleHorizonIsIdentity) {
  Tape<double> t;
  const auto g = gate_from_logits(t.constant(random_tensor({2 * 7, 1}, CounterRng(3))), HorizonSet::single(7), 2);
  for (double v : g.alpha.value().data) EXPECT_EQ(v, 1.0);
}

TEST(Gate, MatchesDirectFormulaAndNormalizes) {
  const auto s = HorizonSet::with_stride(12, 3);
  const std::size_t B = 3, H = 12, N = 4;
  const auto L = random_tensor({B * H, N}, CounterRng(5), 2.0);
  Tape<double> t;
  const auto a = gate_from_logits(t.constant(L), s, B).alpha.value();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 0; k < H; ++k) {
      const std::size_t row = b * H + k;
      double z = 0;
      for (std::size_t n = 0; n < N; ++n)
        if (k + 1 <= s[n]) z += std::exp(L.at(row, n));
      double total = 0;
      for (std::size_t n = 0; n < N; ++n) {
        if (k + 1 <= s[n]) {
          EXPECT_NEAR(a.at(row, n), std::exp(L.at(row, n)) / z, 1e-12);
        } else {
          EXPECT_EQ(a.at(row, n), 0.0);
        }
        total += a.at(row, n);
      }
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
}

TEST(Gate, LearnedHeadNormalizesAndHasGradient) {
  const auto s = HorizonSet::with_stride(6, 2);
  const std::size_t B = 2, H = 6, N = 3, d = 4;
  ParamStore<double> store;
  init_gate(store, d, CounterRng(9));
  EXPECT_EQ(store.scalar_count(), d + 1);
  const auto hidden = random_tensor({B * N * H, d}, CounterRng(10));
  const auto preds = random_tensor({B * N * H, 2}, CounterRng(11));
  const auto r = grad_check(
      [&](Binder<double>& bind) {
        Tape<double>& t = bind.tape();
        auto g = gate(bind, t.constant(hidden), s, B);
        return sum(square(fuse(t.constant(preds), g)));
      },
      store);
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Average, UniformOverValid) {
  const auto s = HorizonSet::with_stride(6, 2);
  Tape<double> t;
  const auto a = average_gate(t, s, 2).alpha.value();
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t k = 0; k < 6; ++k)
      for (std::size_t n = 0; n < 3; ++n)
        EXPECT_NEAR(a.at(b * 6 + k, n), k + 1 <= s[n] ? 1.0 / double(s.active_count(k + 1)) : 0.0, 1e-15);
}

TEST(Fuse, HandCase) {
  const HorizonSet s({1, 2});
  Tape<double> t;
  // alpha rows (b=0, k=0), (b=0, k=1)
  auto logits = t.constant(Tensor<double>({2, 2}, {std::log(0.25), std::log(0.75), 0.0, 0.0}));
  const auto g = gate_from_logits(logits, s, 1);
  // per-horizon rows (n, k): n=0 predicts 0, n=1 predicts 4
  auto preds = t.constant(Tensor<double>({4, 1}, {0.0, 0.0, 4.0, 4.0}));
  const auto f = fuse(preds, g).value();
  EXPECT_NEAR(f[0], 3.0, 1e-12);
  EXPECT_NEAR(f[1], 4.0, 1e-12);
}

TEST(Fuse, ConvexAndOneHot) {
  const auto s = HorizonSet::with_stride(9, 3);
  const std::size_t B = 2, H = 9, N = 3;
  Tape<double> t;
  Tensor<double> same({B * N * H, 2});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t k = 0; k < H; ++k) {
        const std::size_t r = (b * N + n) * H + k;
        same.at(r, 0) = double(k);
        same.at(r, 1) = -double(b);
      }
  const auto g = gate_from_logits(t.constant(random_tensor({B * H, N}, CounterRng(2))), s, B);
  const auto f = fuse(t.constant(same), g).value();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 0; k < H; ++k) {
      EXPECT_NEAR(f.at(b * H + k, 0), double(k), 1e-12);
      EXPECT_NEAR(f.at(b * H + k, 1), -double(b), 1e-12);
    }
  Tensor<double> hot({B * H, N}, -1e4);
  for (std::size_t r = 0; r < B * H; ++r) hot.at(r, N - 1) = 0.0;
  const auto preds = random_tensor({B * N * H, 2}, CounterRng(4));
  const auto f2 = fuse(t.constant(preds), gate_from_logits(t.constant(hot), s, B)).value();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 0; k < H; ++k)
      for (std::size_t c = 0; c < 2; ++c)
        EXPECT_NEAR(f2.at(b * H + k, c), preds.at((b * N + N - 1) * H + k, c), 1e-12);
}

TEST(Balance, HandCase) {
  // One interval with three active horizons and mean usage [0.5, 0.25, 0.25].
  const HorizonSet s({1, 2, 3});
  Tape<double> t;
  Tensor<double> alpha({3, 3}, 0.0);
  alpha.at(0, 0) = 0.5;
  alpha.at(0, 1) = 0.25;
  alpha.at(0, 2) = 0.25;
  // second interval has two horizons at equal usage, third has one
  alpha.at(1, 1) = 0.5;
  alpha.at(1, 2) = 0.5;
  alpha.at(2, 2) = 1.0;
  const double got = balance_loss(t.constant(alpha), s, 1).value()[0];
  EXPECT_NEAR(cv2({0.5, 0.25, 0.25}), 0.125, 1e-6);
  EXPECT_NEAR(got, (cv2({0.5, 0.25, 0.25}) + 0.0) / 2.0, 1e-9);
}

TEST(Balance, UniformIsZeroAndSingleHorizonIsZero) {
  const auto s = HorizonSet::with_stride(12, 3);
  Tape<double> t;
  EXPECT_NEAR(balance_loss(average_gate(t, s, 4).alpha, s, 4).value()[0], 0.0, 1e-12);
  Tensor<double> one({12, 1}, 1.0);
  EXPECT_EQ(balance_loss(t.constant(one), HorizonSet::single(12), 1).value()[0], 0.0);
}

TEST(Balance, MatchesIntervalOracle) {
  const auto s = HorizonSet::with_stride(12, 3);
  const std::size_t B = 3, H = 12, N = 4;
  Tape<double> t;
  const auto a = gate_from_logits(t.constant(random_tensor({B * H, N}, CounterRng(13), 2.0)), s, B).alpha;
  const auto av = a.value();
  const double got = balance_loss(a, s, B).value()[0];
  double acc = 0;
  int count = 0;
  std::size_t lo = 0;
  for (std::size_t i = 0; i < N; ++i) {
    const std::size_t hi = s[i];
    std::vector<double> u;
    for (std::size_t n = i; n < N; ++n) {
      double m = 0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t k = lo; k < hi; ++k) m += av.at(b * H + k, n);
      u.push_back(m / double(B * (hi - lo)));
    }
    if (u.size() > 1) {
      acc += cv2(u);
      ++count;
    }
    lo = hi;
  }
  EXPECT_NEAR(got, acc / count, 1e-10);
}

TEST(Balance, GradientChecks) {
  const auto s = HorizonSet::with_stride(6, 2);
  std::vector<Tensor<double>> in{random_tensor({2 * 6, 3}, CounterRng(17))};
  const auto r = grad_check([&](Tape<double>&, auto v) { return balance_loss(gate_from_logits(v[0], s, 2).alpha, s, 2); }, in);
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Objective, Arithmetic) {
  const double per[] = {2.0};
  const auto o = moh_objective(1.0, per, 3.0);
  EXPECT_NEAR(o.total, 3.003, 1e-12);
  EXPECT_EQ(o.ind, 2.0);
  const double zeros[] = {0.0, 0.0};
  EXPECT_EQ(moh_objective(0.0, zeros, 0.0).total, 0.0);
  const double single[] = {0.7};
  EXPECT_NEAR(moh_objective(0.7, single, 5.0, 1.0, 0.0).total, 1.4, 1e-15);
  const double two[] = {1.0, 3.0};
  EXPECT_NEAR(moh_objective(0.5, two, 0.0).total, 0.5 + 4.0, 1e-15);

  Tape<double> t;
  auto g = moh_objective(t.constant(Tensor<double>({1}, {1.0})), t.constant(Tensor<double>({2}, {1.0, 1.0})),
                         t.constant(Tensor<double>({1}, {3.0})), 1.0, 1e-3);
  EXPECT_NEAR(g.value()[0], 3.003, 1e-12);
}

TEST(GateStats, MeanAndInactiveZero) {
  const auto s = HorizonSet::with_stride(6, 3);
  GateStats st(s);
  Tape<double> t;
  st.add(gate_from_logits(t.constant(Tensor<double>({2 * 6, 2}, 0.0)), s, 2).alpha.value());
  const auto m = st.mean();
  EXPECT_EQ(st.samples(), 2u);
  for (std::size_t k = 0; k < 6; ++k) {
    EXPECT_NEAR(m.at(k, 0), k < 3 ? 0.5 : 0.0, 1e-15);
    EXPECT_NEAR(m.at(k, 1), k < 3 ? 0.5 : 1.0, 1e-15);
  }
  EXPECT_NEAR(st.interval_cv2(), 0.0, 1e-9);
  std::ostringstream os;
  st.write_csv(os);
  EXPECT_EQ(os.str().substr(0, 25), "step,horizon,mean_weight\n");
}
