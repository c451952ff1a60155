#pragma once

// Deterministic long-horizon sparse-reward toy environments with scripted
// experts and demonstration collection. Two tasks are registered:
//
//   chain_waypoint  2-D point mass that must visit three waypoints in order.
//   latch_door      2-D body with a 2-D hand; the hand must hold a latch for
//                   several consecutive steps before the wall opens, then the
//                   body must traverse to the goal.
//
// Reward is 1 exactly once, on the step where success first becomes true.
// Episodes are deterministic given (env id, seed) and the action sequence.

#include <algorithm>
#include <deque>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "chunkrl/common.hpp"
#include "chunkrl/rng.hpp"

namespace chunkrl {

struct StepResult {
  Vec obs;
  double reward = 0.0;
  bool done = false;
  bool success = false;
  bool action_clipped = false;  // diagnostic: input had out-of-range components
};

// Proportional controller step toward a target, clipped to the action box.
inline Vec proportional_toward(const Vec& pos, const Vec& target, double gain) {
  Vec a = gain * (target - pos);
  for (Eigen::Index i = 0; i < a.size(); ++i) a[i] = clamp_unit(a[i]);
  return a;
}

class Env {
 public:
  virtual ~Env() = default;
  virtual const std::string& id() const = 0;
  virtual int raw_obs_dim() const = 0;
  virtual int obs_dim() const { return raw_obs_dim(); }
  virtual int action_dim() const = 0;
  virtual int max_steps() const = 0;
  virtual int frame_stack() const { return 1; }
  virtual Vec reset(std::uint64_t seed) = 0;
  virtual StepResult step(const Vec& action) = 0;
  // Deterministic scripted controller toward the current sub-goal.
  virtual Vec expert_action() const = 0;
  virtual bool done() const = 0;
  virtual long step_count() const = 0;
};

// ---------------------------------------------------------------------------
// chain_waypoint
// ---------------------------------------------------------------------------

class ChainWaypointEnv : public Env {
 public:
  static constexpr int kWaypoints = 3;
  static constexpr double kSpeed = 0.04;        // box units per step at full command
  static constexpr double kTolerance = 0.05;
  static constexpr double kSpawnHalfWidth = 0.1;  // spawn box around the origin
  static constexpr double kGain = 8.0;

  explicit ChainWaypointEnv(int max_steps = 200, double approach_offset = 0.1)
      : max_steps_(max_steps), approach_offset_(approach_offset) {
    waypoints_.resize(kWaypoints);
    waypoints_[0] = Vec(2);
    waypoints_[0] << 0.6, 0.0;
    waypoints_[1] = Vec(2);
    waypoints_[1] << 0.6, 0.6;
    waypoints_[2] = Vec(2);
    waypoints_[2] << -0.4, 0.6;
  }

  const std::string& id() const override {
    static const std::string name = "chain_waypoint";
    return name;
  }
  int raw_obs_dim() const override { return 9; }  // pos(2) vel(2) visited(3) delta(2)
  int action_dim() const override { return 2; }
  int max_steps() const override { return max_steps_; }
  bool done() const override { return done_; }
  long step_count() const override { return steps_; }
  const std::vector<Vec>& waypoints() const { return waypoints_; }
  const Vec& position() const { return pos_; }
  int visited_count() const { return active_; }

  Vec reset(std::uint64_t seed) override {
    Rng rng(seed);
    pos_ = Vec(2);
    pos_ << rng.uniform(-kSpawnHalfWidth, kSpawnHalfWidth),
        rng.uniform(-kSpawnHalfWidth, kSpawnHalfWidth);
    vel_ = Vec::Zero(2);
    active_ = 0;
    steps_ = 0;
    done_ = false;
    offsets_.clear();
    for (int k = 0; k < kWaypoints; ++k) {
      Vec d(2);
      d << rng.uniform(-approach_offset_, approach_offset_),
          rng.uniform(-approach_offset_, approach_offset_);
      offsets_.push_back(d);
    }
    return observe();
  }

  StepResult step(const Vec& action) override {
    require(!done_, Errc::protocol, "chain_waypoint: step() called after episode end");
    require(action.size() == 2, Errc::dimension,
            "chain_waypoint: action dimension " + std::to_string(action.size()) + " != 2");
    require_finite(action, "chain_waypoint action");

    StepResult r;
    Vec a(2);
    for (int i = 0; i < 2; ++i) {
      a[i] = clamp_unit(action[i]);
      if (a[i] != action[i]) r.action_clipped = true;
    }
    pos_ += kSpeed * a;
    pos_[0] = std::clamp(pos_[0], -1.0, 1.0);
    pos_[1] = std::clamp(pos_[1], -1.0, 1.0);
    vel_ = a;
    steps_ += 1;

    // only the first unvisited waypoint can be marked
    while (active_ < kWaypoints && (pos_ - waypoints_[active_]).norm() <= kTolerance) active_ += 1;

    r.success = active_ == kWaypoints;
    r.reward = r.success ? 1.0 : 0.0;
    done_ = r.success || steps_ >= max_steps_;
    r.done = done_;
    r.obs = observe();
    return r;
  }

  Vec expert_action() const override {
    if (active_ >= kWaypoints) return Vec::Zero(2);
    Vec target = waypoints_[active_];
    // per-episode approach offset while far away, exact homing when close
    if ((pos_ - (target + offsets_[active_])).norm() > 0.2)
      target += offsets_[active_];
    return proportional_toward(pos_, target, kGain);
  }

 private:
  Vec observe() const {
    Vec o(raw_obs_dim());
    o.segment(0, 2) = pos_;
    o.segment(2, 2) = vel_;
    for (int k = 0; k < kWaypoints; ++k) o[4 + k] = k < active_ ? 1.0 : 0.0;
    if (active_ < kWaypoints)
      o.segment(7, 2) = waypoints_[active_] - pos_;
    else
      o.segment(7, 2).setZero();
    return o;
  }

  int max_steps_;
  double approach_offset_;
  std::vector<Vec> waypoints_;
  std::vector<Vec> offsets_;
  Vec pos_{Vec::Zero(2)}, vel_{Vec::Zero(2)};
  int active_ = 0;
  long steps_ = 0;
  bool done_ = true;
};

// ---------------------------------------------------------------------------
// latch_door
// ---------------------------------------------------------------------------

class LatchDoorEnv : public Env {
 public:
  static constexpr double kBodySpeed = 0.04;
  static constexpr double kHandSpeed = 0.02;
  static constexpr double kHandBox = 0.25;      // hand offset limit per axis
  static constexpr double kLatchRadius = 0.06;
  static constexpr int kHoldSteps = 10;
  static constexpr double kGoalTolerance = 0.06;
  static constexpr double kWallX = -0.04;       // body cannot pass while locked
  static constexpr double kGain = 8.0;

  explicit LatchDoorEnv(int max_steps = 300, double approach_offset = 0.06)
      : max_steps_(max_steps), approach_offset_(approach_offset) {
    latch_ = Vec(2);
    latch_ << -0.15, 0.5;
    goal_ = Vec(2);
    goal_ << 0.6, -0.2;
    stand_ = Vec(2);
    stand_ << -0.15, 0.28;
  }

  const std::string& id() const override {
    static const std::string name = "latch_door";
    return name;
  }
  // body(2) hand(2) body-vel(2) hand-vel(2) hold-frac(1) unlocked(1)
  // latch-delta(2) goal-delta(2)
  int raw_obs_dim() const override { return 14; }
  int action_dim() const override { return 4; }
  int max_steps() const override { return max_steps_; }
  bool done() const override { return done_; }
  long step_count() const override { return steps_; }
  bool unlocked() const { return unlocked_; }
  const Vec& latch() const { return latch_; }
  const Vec& goal() const { return goal_; }

  Vec reset(std::uint64_t seed) override {
    Rng rng(seed);
    body_ = Vec(2);
    body_ << -0.7 + rng.uniform(-0.08, 0.08), -0.3 + rng.uniform(-0.08, 0.08);
    hand_ = Vec::Zero(2);
    body_vel_ = Vec::Zero(2);
    hand_vel_ = Vec::Zero(2);
    hold_ = 0;
    unlocked_ = false;
    steps_ = 0;
    done_ = false;
    stand_offset_ = rng.uniform(-approach_offset_, approach_offset_);
    return observe();
  }

  StepResult step(const Vec& action) override {
    require(!done_, Errc::protocol, "latch_door: step() called after episode end");
    require(action.size() == 4, Errc::dimension,
            "latch_door: action dimension " + std::to_string(action.size()) + " != 4");
    require_finite(action, "latch_door action");

    StepResult r;
    Vec a(4);
    for (int i = 0; i < 4; ++i) {
      a[i] = clamp_unit(action[i]);
      if (a[i] != action[i]) r.action_clipped = true;
    }

    body_ += kBodySpeed * a.segment(0, 2);
    body_[0] = std::clamp(body_[0], -1.0, 1.0);
    body_[1] = std::clamp(body_[1], -1.0, 1.0);
    if (!unlocked_) body_[0] = std::min(body_[0], kWallX);
    hand_ += kHandSpeed * a.segment(2, 2);
    hand_[0] = std::clamp(hand_[0], -kHandBox, kHandBox);
    hand_[1] = std::clamp(hand_[1], -kHandBox, kHandBox);
    body_vel_ = a.segment(0, 2);
    hand_vel_ = a.segment(2, 2);
    steps_ += 1;

    if (!unlocked_) {
      if ((body_ + hand_ - latch_).norm() <= kLatchRadius)
        hold_ += 1;
      else
        hold_ = 0;
      if (hold_ >= kHoldSteps) unlocked_ = true;
    }

    r.success = unlocked_ && (body_ - goal_).norm() <= kGoalTolerance;
    r.reward = r.success ? 1.0 : 0.0;
    done_ = r.success || steps_ >= max_steps_;
    r.done = done_;
    r.obs = observe();
    return r;
  }

  Vec expert_action() const override {
    Vec a(4);
    if (!unlocked_) {
      Vec stand = stand_;
      stand[0] += stand_offset_;
      Vec body_cmd = proportional_toward(body_, stand, kGain);
      Vec want_offset = latch_ - body_;
      want_offset[0] = std::clamp(want_offset[0], -kHandBox, kHandBox);
      want_offset[1] = std::clamp(want_offset[1], -kHandBox, kHandBox);
      Vec hand_cmd = proportional_toward(hand_, want_offset, kGain);
      a << body_cmd[0], body_cmd[1], hand_cmd[0], hand_cmd[1];
    } else {
      Vec body_cmd = proportional_toward(body_, goal_, kGain);
      Vec hand_cmd = proportional_toward(hand_, Vec::Zero(2), kGain);
      a << body_cmd[0], body_cmd[1], hand_cmd[0], hand_cmd[1];
    }
    return a;
  }

 private:
  Vec observe() const {
    Vec o(raw_obs_dim());
    o.segment(0, 2) = body_;
    o.segment(2, 2) = hand_;
    o.segment(4, 2) = body_vel_;
    o.segment(6, 2) = hand_vel_;
    o[8] = static_cast<double>(hold_) / kHoldSteps;
    o[9] = unlocked_ ? 1.0 : 0.0;
    o.segment(10, 2) = latch_ - (body_ + hand_);
    o.segment(12, 2) = goal_ - body_;
    return o;
  }

  int max_steps_;
  double approach_offset_;
  Vec latch_, goal_, stand_;
  Vec body_{Vec::Zero(2)}, hand_{Vec::Zero(2)}, body_vel_{Vec::Zero(2)}, hand_vel_{Vec::Zero(2)};
  double stand_offset_ = 0.0;
  int hold_ = 0;
  bool unlocked_ = false;
  long steps_ = 0;
  bool done_ = true;
};

// ---------------------------------------------------------------------------
// Frame stacking: concatenation of the last F raw observations, oldest first;
// missing frames at episode start repeat the initial observation.
// ---------------------------------------------------------------------------

class FrameStackedEnv : public Env {
 public:
  FrameStackedEnv(std::unique_ptr<Env> base, int frames) : base_(std::move(base)), frames_(frames) {
    require(frames_ >= 1, Errc::config, "frame_stack: F must be >= 1");
  }

  const std::string& id() const override { return base_->id(); }
  int raw_obs_dim() const override { return base_->raw_obs_dim(); }
  int obs_dim() const override { return frames_ * base_->raw_obs_dim(); }
  int action_dim() const override { return base_->action_dim(); }
  int max_steps() const override { return base_->max_steps(); }
  int frame_stack() const override { return frames_; }
  bool done() const override { return base_->done(); }
  long step_count() const override { return base_->step_count(); }
  Env& base() { return *base_; }

  Vec reset(std::uint64_t seed) override {
    Vec raw = base_->reset(seed);
    history_.assign(frames_, raw);
    return observe();
  }

  StepResult step(const Vec& action) override {
    StepResult r = base_->step(action);
    history_.pop_front();
    history_.push_back(r.obs);
    r.obs = observe();
    return r;
  }

  Vec expert_action() const override { return base_->expert_action(); }

 private:
  Vec observe() const {
    Vec o(obs_dim());
    int off = 0;
    for (const Vec& f : history_) {
      o.segment(off, f.size()) = f;
      off += static_cast<int>(f.size());
    }
    return o;
  }

  std::unique_ptr<Env> base_;
  int frames_;
  std::deque<Vec> history_;
};

inline std::unique_ptr<Env> make_env(const std::string& id, double approach_offset = -1.0) {
  if (id == "chain_waypoint")
    return std::make_unique<ChainWaypointEnv>(200, approach_offset < 0 ? 0.1 : approach_offset);
  if (id == "latch_door")
    return std::make_unique<LatchDoorEnv>(300, approach_offset < 0 ? 0.06 : approach_offset);
  throw Error(Errc::registry, "unknown environment id '" + id + "'");
}

inline std::unique_ptr<Env> make_env_stacked(const std::string& id, int frame_stack,
                                             double approach_offset = -1.0) {
  auto base = make_env(id, approach_offset);
  if (frame_stack <= 1) return base;
  return std::make_unique<FrameStackedEnv>(std::move(base), frame_stack);
}

// ---------------------------------------------------------------------------
// Demonstrations
// ---------------------------------------------------------------------------

struct DemoTrajectory {
  Mat obs;       // (L+1) x obs_dim, final row is the terminal observation
  Mat actions;   // L x action_dim
  Vec rewards;   // L extrinsic rewards
  bool success = true;

  long length() const { return actions.rows(); }
};

struct DemoSet {
  std::string env_id;
  int frame_stack = 1;
  int obs_dim = 0;
  int action_dim = 0;
  double expert_noise = 0.0;
  std::uint64_t seed = 0;
  std::vector<DemoTrajectory> trajectories;

  long total_steps() const {
    long n = 0;
    for (const auto& t : trajectories) n += t.length();
    return n;
  }
};

// Roll out the scripted expert until `count` successful trajectories are
// collected; failed noisy rollouts are discarded and resampled.
inline DemoSet collect_demos(Env& env, int count, double expert_noise, std::uint64_t seed,
                             int retry_budget_per_demo = 50) {
  require(expert_noise >= 0.0, Errc::config, "collect_demos: expert noise must be >= 0");
  require(count >= 0, Errc::config, "collect_demos: count must be >= 0");
  DemoSet set;
  set.env_id = env.id();
  set.frame_stack = env.frame_stack();
  set.obs_dim = env.obs_dim();
  set.action_dim = env.action_dim();
  set.expert_noise = expert_noise;
  set.seed = seed;

  Rng noise_rng(derive_seed(seed, "demo-noise"));
  for (int i = 0; i < count; ++i) {
    bool collected = false;
    for (int attempt = 0; attempt < retry_budget_per_demo && !collected; ++attempt) {
      const std::uint64_t ep_seed = derive_seed(seed, "demo-episode", i * 1009 + attempt);
      Vec obs = env.reset(ep_seed);
      std::vector<Vec> obs_list{obs};
      std::vector<Vec> act_list;
      std::vector<double> rew_list;
      bool success = false;
      while (!env.done()) {
        Vec a = env.expert_action();
        for (Eigen::Index j = 0; j < a.size(); ++j)
          a[j] = clamp_unit(a[j] + noise_rng.normal(expert_noise));
        StepResult r = env.step(a);
        obs_list.push_back(r.obs);
        act_list.push_back(a);
        rew_list.push_back(r.reward);
        success = r.success;
      }
      if (!success) continue;
      DemoTrajectory traj;
      const long L = static_cast<long>(act_list.size());
      traj.obs.resize(L + 1, set.obs_dim);
      for (long t = 0; t <= L; ++t) traj.obs.row(t) = obs_list[t].transpose();
      traj.actions.resize(L, set.action_dim);
      for (long t = 0; t < L; ++t) traj.actions.row(t) = act_list[t].transpose();
      traj.rewards = Eigen::Map<Vec>(rew_list.data(), L);
      traj.success = true;
      set.trajectories.push_back(std::move(traj));
      collected = true;
    }
    require(collected, Errc::config,
            "collect_demos: could not collect a successful demo on '" + env.id() +
                "' (noise=" + std::to_string(expert_noise) + ") within the retry budget");
  }
  return set;
}

// ---------------------------------------------------------------------------
// Demo JSONL persistence: a header object, then one trajectory per line.
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json mat_to_json(const Mat& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Mat mat_from_json(const nlohmann::json& rows) {
  if (rows.empty()) return Mat();
  Mat m(rows.size(), rows[0].size());
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = rows[r][c].get<double>();
  return m;
}

}  // namespace detail

inline void save_demos(const std::string& path, const DemoSet& set) {
  std::ofstream out(path);
  require(out.good(), Errc::io, "save_demos: cannot open '" + path + "' for writing");
  nlohmann::json header{{"format_version", "chunkrl-demos-v1"},
                        {"env_id", set.env_id},
                        {"frame_stack", set.frame_stack},
                        {"obs_dim", set.obs_dim},
                        {"action_dim", set.action_dim},
                        {"expert_noise", set.expert_noise},
                        {"seed", set.seed},
                        {"count", set.trajectories.size()}};
  out << header.dump() << "\n";
  for (const auto& t : set.trajectories) {
    nlohmann::json line{{"obs", detail::mat_to_json(t.obs)},
                        {"actions", detail::mat_to_json(t.actions)},
                        {"rewards", detail::mat_to_json(Mat(t.rewards))},
                        {"success", t.success}};
    out << line.dump() << "\n";
  }
  require(out.good(), Errc::io, "save_demos: write to '" + path + "' failed");
}

inline DemoSet load_demos(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), Errc::io, "load_demos: cannot open '" + path + "'");
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), Errc::io, "load_demos: empty file");
  nlohmann::json header = nlohmann::json::parse(line);
  require(header.value("format_version", "") == "chunkrl-demos-v1", Errc::io,
          "load_demos: unsupported format version");
  DemoSet set;
  set.env_id = header.at("env_id").get<std::string>();
  set.frame_stack = header.at("frame_stack").get<int>();
  set.obs_dim = header.at("obs_dim").get<int>();
  set.action_dim = header.at("action_dim").get<int>();
  set.expert_noise = header.at("expert_noise").get<double>();
  set.seed = header.at("seed").get<std::uint64_t>();
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    DemoTrajectory t;
    t.obs = detail::mat_from_json(j.at("obs"));
    t.actions = detail::mat_from_json(j.at("actions"));
    Mat r = detail::mat_from_json(j.at("rewards"));
    t.rewards = r.col(0);
    t.success = j.at("success").get<bool>();
    require(t.success, Errc::io, "load_demos: demo trajectories must be successful");
    require(t.length() >= 1, Errc::io, "load_demos: empty trajectory");
    set.trajectories.push_back(std::move(t));
  }
  return set;
}

}  // namespace chunkrl
