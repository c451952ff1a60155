#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "chunkrl/envs.hpp"

using namespace chunkrl;

TEST_CASE("reset is deterministic per (env id, seed)") {
  for (const std::string id : {"chain_waypoint", "latch_door"}) {
    auto e1 = make_env(id);
    auto e2 = make_env(id);
    Vec a = e1->reset(42);
    Vec b = e2->reset(42);
    REQUIRE((a - b).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE((e1->reset(43) - e2->reset(42)).cwiseAbs().maxCoeff() > 0.0);
  }
}

TEST_CASE("unknown environment id raises a registry error") {
  REQUIRE_THROWS_AS(make_env("cartpole"), Error);
}

TEST_CASE("chain_waypoint seed 0 spawns near the origin with positive waypoint distances") {
  ChainWaypointEnv env;
  env.reset(0);
  REQUIRE(env.position().cwiseAbs().maxCoeff() <= ChainWaypointEnv::kSpawnHalfWidth);
  REQUIRE(env.waypoints().size() == 3);
  for (const Vec& w : env.waypoints()) REQUIRE((w - env.position()).norm() > 0.0);
}

TEST_CASE("spawn position varies across seeds within the documented box") {
  ChainWaypointEnv env;
  double min_x = 1e9, max_x = -1e9;
  for (int s = 0; s < 100; ++s) {
    env.reset(s);
    REQUIRE(env.position().cwiseAbs().maxCoeff() <= ChainWaypointEnv::kSpawnHalfWidth);
    min_x = std::min(min_x, env.position()[0]);
    max_x = std::max(max_x, env.position()[0]);
  }
  REQUIRE(max_x - min_x > 0.05);  // genuinely varies
}

TEST_CASE("zero action from rest leaves the state unchanged") {
  ChainWaypointEnv env;
  Vec before = env.reset(7);
  StepResult r = env.step(Vec::Zero(2));
  REQUIRE(r.reward == 0.0);
  REQUIRE_FALSE(r.done);
  REQUIRE((r.obs.segment(0, 2) - before.segment(0, 2)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("identical seeds and action sequences give identical trajectories") {
  auto run = [](std::uint64_t seed) {
    LatchDoorEnv env;
    env.reset(seed);
    Rng rng(99);
    std::vector<Vec> trace;
    for (int t = 0; t < 40 && !env.done(); ++t) {
      Vec a(4);
      for (int i = 0; i < 4; ++i) a[i] = rng.uniform(-1.0, 1.0);
      trace.push_back(env.step(a).obs);
    }
    return trace;
  };
  auto t1 = run(5), t2 = run(5);
  REQUIRE(t1.size() == t2.size());
  for (size_t i = 0; i < t1.size(); ++i)
    REQUIRE((t1[i] - t2[i]).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("scripted expert succeeds from seed 0 before the episode cap") {
  for (const std::string id : {"chain_waypoint", "latch_door"}) {
    auto env = make_env(id);
    env->reset(0);
    bool success = false;
    while (!env->done()) success = env->step(env->expert_action()).success;
    REQUIRE(success);
    REQUIRE(env->step_count() < env->max_steps());
  }
}

TEST_CASE("noise-free expert succeeds on every spawn seed") {
  for (const std::string id : {"chain_waypoint", "latch_door"}) {
    auto env = make_env(id);
    int successes = 0;
    for (int s = 0; s < 100; ++s) {
      env->reset(derive_seed(1234, "soundness", s));
      bool success = false;
      while (!env->done()) success = env->step(env->expert_action()).success;
      successes += success ? 1 : 0;
    }
    INFO(id);
    REQUIRE(successes == 100);
  }
}

TEST_CASE("visiting waypoint 2 before waypoint 1 marks nothing") {
  ChainWaypointEnv env;
  env.reset(0);
  // drive straight at the second waypoint, ignoring the first
  const Vec w2 = env.waypoints()[1];
  for (int t = 0; t < 80; ++t) {
    if ((env.position() - w2).norm() <= 0.01) break;
    env.step(proportional_toward(env.position(), w2, 8.0));
  }
  REQUIRE((env.position() - w2).norm() <= ChainWaypointEnv::kTolerance);
  REQUIRE(env.visited_count() == 0);
  Vec obs = env.step(Vec::Zero(2)).obs;
  REQUIRE(obs.segment(4, 3).cwiseAbs().maxCoeff() == 0.0);  // no visited flags
}

TEST_CASE("expert controller is a fixed point at its target and points the right way") {
  Vec p(2);
  p << 0.2, -0.1;
  REQUIRE(proportional_toward(p, p, 8.0).cwiseAbs().maxCoeff() == 0.0);

  ChainWaypointEnv env;
  env.reset(0);
  // waypoint 1 lies to the right of the spawn region
  REQUIRE(env.expert_action()[0] > 0.0);
}

TEST_CASE("step after done and malformed actions are protocol errors") {
  ChainWaypointEnv env;
  env.reset(3);
  while (!env.done()) env.step(env.expert_action());
  REQUIRE_THROWS_AS(env.step(Vec::Zero(2)), Error);

  ChainWaypointEnv env2;
  env2.reset(3);
  REQUIRE_THROWS_AS(env2.step(Vec::Zero(3)), Error);
  Vec nan_action = Vec::Zero(2);
  nan_action[0] = std::numeric_limits<double>::quiet_NaN();
  REQUIRE_THROWS_AS(env2.step(nan_action), Error);
}

TEST_CASE("out-of-range actions are clipped and flagged") {
  ChainWaypointEnv env;
  env.reset(11);
  Vec big(2);
  big << 5.0, -7.0;
  StepResult r = env.step(big);
  REQUIRE(r.action_clipped);
  REQUIRE(r.obs.segment(2, 2).cwiseAbs().maxCoeff() <= 1.0);  // applied velocity is clipped
}

TEST_CASE("cumulative extrinsic reward per episode is 0 or 1 and caps are enforced") {
  Rng rng(77);
  for (const std::string id : {"chain_waypoint", "latch_door"}) {
    auto env = make_env(id);
    for (int ep = 0; ep < 5; ++ep) {
      env->reset(derive_seed(7, "sparse", ep));
      double total = 0.0;
      long steps = 0;
      while (!env->done()) {
        Vec a(env->action_dim());
        for (int i = 0; i < a.size(); ++i) a[i] = rng.uniform(-1.0, 1.0);
        total += env->step(a).reward;
        steps += 1;
      }
      REQUIRE((total == 0.0 || total == 1.0));
      REQUIRE(steps <= env->max_steps());
    }
  }
}

TEST_CASE("frame stacking pads with the initial observation and then concatenates history") {
  SECTION("F=1 is the identity") {
    auto plain = make_env_stacked("chain_waypoint", 1);
    auto raw = make_env("chain_waypoint");
    REQUIRE((plain->reset(5) - raw->reset(5)).cwiseAbs().maxCoeff() == 0.0);
  }
  SECTION("F=0 is rejected") {
    REQUIRE_THROWS_AS(FrameStackedEnv(make_env("chain_waypoint"), 0), Error);
  }
  SECTION("padding at t=0 and reconstruction at t>=3") {
    auto stacked = make_env_stacked("chain_waypoint", 4);
    auto raw = make_env("chain_waypoint");
    Vec s0 = stacked->reset(9);
    Vec r0 = raw->reset(9);
    const int d = raw->raw_obs_dim();
    for (int f = 0; f < 4; ++f)
      REQUIRE((s0.segment(f * d, d) - r0).cwiseAbs().maxCoeff() == 0.0);

    std::vector<Vec> raws{r0};
    Vec stacked_obs;
    Rng rng(4);
    for (int t = 0; t < 6; ++t) {
      Vec a(2);
      a << rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0);
      stacked_obs = stacked->step(a).obs;
      raws.push_back(raw->step(a).obs);
    }
    // newest frame last
    for (int f = 0; f < 4; ++f) {
      const Vec& expect = raws[raws.size() - 4 + f];
      REQUIRE((stacked_obs.segment(f * d, d) - expect).cwiseAbs().maxCoeff() == 0.0);
    }
  }
}

TEST_CASE("demo collection returns exactly N successful trajectories") {
  auto env = make_env_stacked("chain_waypoint", 2);
  SECTION("N=0 yields a valid empty set") {
    DemoSet set = collect_demos(*env, 0, 0.0, 1);
    REQUIRE(set.trajectories.empty());
    REQUIRE(set.env_id == "chain_waypoint");
  }
  SECTION("N=10 noise-free") {
    DemoSet set = collect_demos(*env, 10, 0.0, 1);
    REQUIRE(set.trajectories.size() == 10);
    for (const auto& t : set.trajectories) {
      REQUIRE(t.success);
      REQUIRE(t.length() >= 1);
      REQUIRE(t.rewards[t.length() - 1] == 1.0);
      if (t.length() > 1)
        REQUIRE(t.rewards.head(t.length() - 1).cwiseAbs().maxCoeff() == 0.0);
      REQUIRE(t.obs.rows() == t.length() + 1);
      REQUIRE(t.obs.cols() == env->obs_dim());
    }
  }
  SECTION("noisy demos succeed but take longer on average") {
    DemoSet clean = collect_demos(*env, 10, 0.0, 1);
    DemoSet noisy = collect_demos(*env, 10, 0.05, 1);
    auto mean_len = [](const DemoSet& s) {
      double n = 0;
      for (const auto& t : s.trajectories) n += t.length();
      return n / s.trajectories.size();
    };
    REQUIRE(noisy.trajectories.size() == 10);
    REQUIRE(mean_len(noisy) > mean_len(clean));
  }
}

TEST_CASE("demo JSONL round trip preserves every value") {
  auto env = make_env_stacked("latch_door", 2);
  DemoSet set = collect_demos(*env, 3, 0.02, 5);
  const std::string path = (std::filesystem::temp_directory_path() / "chunkrl_demos.jsonl").string();
  save_demos(path, set);
  DemoSet loaded = load_demos(path);
  REQUIRE(loaded.env_id == set.env_id);
  REQUIRE(loaded.frame_stack == set.frame_stack);
  REQUIRE(loaded.trajectories.size() == set.trajectories.size());
  for (size_t i = 0; i < set.trajectories.size(); ++i) {
    REQUIRE((loaded.trajectories[i].obs - set.trajectories[i].obs).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE((loaded.trajectories[i].actions - set.trajectories[i].actions).cwiseAbs().maxCoeff() ==
            0.0);
    REQUIRE((loaded.trajectories[i].rewards - set.trajectories[i].rewards).cwiseAbs().maxCoeff() ==
            0.0);
  }
  std::filesystem::remove(path);
}
