#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "moh/envbench.hpp"

using namespace moh;
using namespace moh::envbench;

namespace fs = std::filesystem;

TEST(PointMass, DynamicsAndClipping) {
  EnvConstants c;
  PointMassEnv e;
  e.vel = {0.1, 0.0};
  e.step({5.0, -0.5}, c);
  EXPECT_DOUBLE_EQ(e.vel[0], c.gamma * 0.1 + c.accel_gain * 1.0);
  EXPECT_DOUBLE_EQ(e.vel[1], c.accel_gain * -0.5);
  EXPECT_DOUBLE_EQ(e.pos[0], e.vel[0]);
  PointMassEnv f;
  for (int i = 0; i < 10000; ++i) f.step({1.0, 1.0}, c);
  EXPECT_TRUE(std::isfinite(f.pos[0]));
  EXPECT_NEAR(f.vel[0], c.accel_gain / (1 - c.gamma), 1e-9);
}

TEST(Suite, Layout) {
  EnvConstants c;
  const auto s = make_suite(c);
  ASSERT_EQ(s.size(), suite_task_count(c));
  EXPECT_EQ(s[0].family, Family::precision);
  EXPECT_EQ(s[0].radius, c.precision_radius);
  for (std::size_t i = 1; i < s.size(); ++i) {
    EXPECT_EQ(s[i].family, Family::waypoint);
    EXPECT_GE(s[i].targets.size(), 4u);
    EXPECT_GT(s[i].radius, s[0].radius);
  }
  c.waypoints = 3;
  EXPECT_ANY_THROW(make_suite(c));
}

TEST(Expert, AtRestOnTargetIsQuiet) {
  EnvConstants c;
  PointMassEnv e;
  e.pos = {0.4, 0.6};
  const auto a = scripted_expert(c, e, {0.4, 0.6});
  EXPECT_NEAR(a[0], 0.0, 1e-12);
  EXPECT_NEAR(a[1], 0.0, 1e-12);
}

TEST(Expert, SucceedsAndPrecisionIsShorter) {
  EnvConstants c;
  const auto suite = make_suite(c);
  std::size_t ok = 0, total = 0;
  for (std::size_t t = 0; t < suite.size(); ++t)
    for (std::size_t e = 0; e < 200; ++e) {
      const auto r = run_expert(suite[t], c, nc::CounterRng(11).derive(t).derive(e));
      ok += r.success;
      ++total;
      EXPECT_EQ(r.actions.size(), r.steps);
      EXPECT_LE(r.steps, suite[t].max_steps);
    }
  EXPECT_GE(double(ok) / double(total), 0.99);
  for (std::size_t e = 0; e < 50; ++e) {
    const auto p = run_expert(suite[0], c, nc::CounterRng(3).derive(e));
    const auto w = run_expert(suite[1 + e % c.waypoint_layouts], c, nc::CounterRng(3).derive(e));
    EXPECT_LT(p.steps, w.steps);
  }
}

TEST(Dataset, WindowsAndPadding) {
  EnvConstants c;
  c.waypoint_layouts = 2;
  const std::size_t H = 10;
  const auto d = generate_dataset(c, 3, H, 5);
  // One window per executed step; rows past the episode end are padding
  // that repeats the final action. Precision gets one episode per layout.
  std::size_t expected = 0;
  const auto suite = make_suite(c);
  nc::CounterRng root(5);
  std::size_t row = 0;
  auto f32 = [](double v) { return double(float(v)); };
  for (const auto& task : suite)
    for (std::size_t e = 0; e < (task.family == Family::precision ? 3 * c.waypoint_layouts : 3); ++e) {
      const auto rec = run_expert(task, c, root.derive(task.task_id).derive(e));
      const std::size_t L = rec.steps;
      expected += L;
      for (std::size_t t = 0; t < L; ++t, ++row) {
        for (std::size_t i = 0; i < kObsDim; ++i)
          EXPECT_EQ(d.obs[row].features[i], f32(rec.observations[t].features[i]));
        for (std::size_t k = 0; k < H; ++k) {
          const bool valid = t + k < L;
          EXPECT_EQ(d.valid.at(row, k) != 0, valid);
          const auto& a = rec.actions[std::min(t + k, L - 1)];
          EXPECT_EQ(d.chunks[(row * H + k) * 2], f32(a[0]));
        }
      }
    }
  EXPECT_EQ(d.size(), expected);
  EXPECT_EQ(d.skipped, 0u);
}

TEST(Dataset, SaveLoadRoundTripIsBitIdentical) {
  EnvConstants c;
  c.waypoint_layouts = 2;
  const auto a = generate_dataset(c, 2, 8, 9);
  const auto b = generate_dataset(c, 2, 8, 9);
  EXPECT_EQ(a.chunks.data, b.chunks.data);
  const auto dir = fs::temp_directory_path() / "moh_test_dataset";
  fs::create_directories(dir);
  save_dataset(dir / "a.bin", a);
  save_dataset(dir / "b.bin", b);
  auto slurp = [](const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), {});
  };
  EXPECT_EQ(slurp(dir / "a.bin"), slurp(dir / "b.bin"));
  EXPECT_TRUE(fs::exists(dir / "a.json"));
  const auto l = load_dataset(dir / "a.bin");
  EXPECT_EQ(l.size(), a.size());
  EXPECT_EQ(l.horizon, 8u);
  EXPECT_EQ(l.chunks.data, a.chunks.data);
  EXPECT_EQ(l.valid.data, a.valid.data);
  fs::remove_all(dir);
}

TEST(Dataset, DifferentSeedsDiffer) {
  EnvConstants c;
  c.waypoint_layouts = 1;
  EXPECT_NE(generate_dataset(c, 2, 5, 1).chunks.data, generate_dataset(c, 2, 5, 2).chunks.data);
}

TEST(Evaluate, ExpertPolicyMatchesExpert) {
  EnvConstants c;
  c.sigma_obs = 0.0;
  EvalOptions o;
  o.trials = 60;
  const auto r = evaluate(expert_policy(c, 30), c, FixedPrefix{1}, o);
  for (const auto& f : r.families) {
    EXPECT_GE(f.success_rate, 0.99) << family_name(f.family);
    EXPECT_EQ(f.mean_prefix, 1.0);
  }
}

TEST(Evaluate, DeterministicAndBounded) {
  EnvConstants c;
  EvalOptions o;
  o.trials = 20;
  o.keep_records = true;
  const auto pol = expert_policy(c, 12);
  const auto a = evaluate(pol, c, FixedPrefix{5}, o);
  const auto b = evaluate(pol, c, FixedPrefix{5}, o);
  std::ostringstream sa, sb;
  write_success_csv(sa, a.families);
  write_success_csv(sb, b.families);
  EXPECT_EQ(sa.str(), sb.str());
  EXPECT_EQ(sa.str().substr(0, sa.str().find('\n')), "family,executor,success_rate,mean_steps,mean_prefix");
  for (const auto& f : a.families) {
    EXPECT_GE(f.success_rate, 0.0);
    EXPECT_LE(f.success_rate, 1.0);
    EXPECT_EQ(f.mean_prefix, 5.0);
  }
  for (const auto& rec : a.records) {
    std::size_t sum = 0;
    for (auto p : rec.prefixes) sum += p;
    EXPECT_EQ(sum, rec.actions.size());
    EXPECT_EQ(rec.steps, rec.actions.size());
  }
  // Batch size is an implementation detail.
  o.batch = 7;
  std::ostringstream sc;
  write_success_csv(sc, evaluate(pol, c, FixedPrefix{5}, o).families);
  EXPECT_EQ(sc.str(), sa.str());
}

TEST(Evaluate, FullChunkPrefixMeansOnePrediction) {
  EnvConstants c;
  c.sigma_obs = 0.0;
  c.precision_max_steps = 30;
  EvalOptions o;
  o.trials = 10;
  o.keep_records = true;
  const auto r = evaluate(expert_policy(c, 30), c, FixedPrefix{30}, o);
  for (std::size_t i = 0; i < r.records.size(); ++i) {
    if (r.records[i].success && r.records[i].steps <= 30) EXPECT_EQ(r.records[i].prefixes.size(), 1u);
  }
}

TEST(Evaluate, ConsensusPrefixAtLeastN) {
  EnvConstants c;
  EvalOptions o;
  o.trials = 10;
  const dyninfer::ConsensusConfig cc{1.1, 5, 1};
  const auto r = evaluate(expert_policy(c, 30), c, cc, o);
  for (const auto& f : r.families) {
    EXPECT_GE(f.mean_prefix, 5.0);
    EXPECT_LE(f.mean_prefix, 30.0);
  }
}

TEST(Constants, JsonRoundTrip) {
  EnvConstants c;
  c.sigma_obs = 0.123;
  c.waypoints = 6;
  const auto back = constants_from_json(constants_json(c));
  EXPECT_EQ(constants_json(back), constants_json(c));
}
