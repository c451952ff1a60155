#pragma once

// Trajectory-structured replay buffer. Transitions are pushed per step into
// an open trajectory, which becomes sampleable once finalized with its
// retroactive success flag. Sampling produces rows carrying an action chunk
// window, an n-step reward window with validity masks, the landing state
// with a bootstrap mask, and the trajectory's success mask.

#include <deque>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "chunkrl/common.hpp"
#include "chunkrl/envs.hpp"
#include "chunkrl/rng.hpp"

namespace chunkrl {

struct Transition {
  Vec obs;
  Vec action;
  double reward_ext = 0.0;
  double reward_int = 0.0;
  Vec next_obs;
  bool done = false;
  long traj_id = -1;
  int step_index = 0;
};

enum class TrajOrigin { demo, online };

struct TrajectoryRecord {
  long id = -1;
  std::vector<Transition> steps;
  bool success = false;
  bool finalized = false;
  TrajOrigin origin = TrajOrigin::online;
};

struct NStepBatch {
  Mat obs;        // B x d_s
  Mat chunks;     // B x (C * d_a), executed actions, tail-padded
  Mat rewards;    // B x n, stored reward (extrinsic + intrinsic), zero past end
  Mat valid;      // B x n, 1 while the reward slot exists
  Mat landing;    // B x d_s, s_{t+n} or the terminal observation
  Vec bootstrap;  // 1 iff the landing transition exists (no termination <= t+n)
  Vec succ_mask;  // source trajectory's success flag
  std::vector<std::pair<long, int>> source;  // (traj id, start index) per row
  int n = 0;
  int chunk = 0;
};

class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
    require(capacity_ >= 1, Errc::config, "replay capacity must be >= 1");
  }

  void push(Transition t) {
    require(t.obs.allFinite() && t.action.allFinite() && t.next_obs.allFinite(), Errc::numeric,
            "replay push: non-finite transition");
    require(finalized_ids_.find(t.traj_id) == finalized_ids_.end(), Errc::protocol,
            "replay push: trajectory " + std::to_string(t.traj_id) + " is already finalized");
    auto [it, inserted] = open_.try_emplace(t.traj_id);
    TrajectoryRecord& rec = it->second;
    if (inserted) {
      rec.id = t.traj_id;
      require(t.step_index == 0, Errc::protocol,
              "replay push: new trajectory must start at step index 0");
    } else {
      require(t.step_index == static_cast<int>(rec.steps.size()), Errc::protocol,
              "replay push: non-consecutive step index " + std::to_string(t.step_index));
    }
    rec.steps.push_back(std::move(t));
  }

  void finalize_trajectory(long traj_id, bool success, TrajOrigin origin = TrajOrigin::online) {
    require(finalized_ids_.find(traj_id) == finalized_ids_.end(), Errc::protocol,
            "replay finalize: trajectory " + std::to_string(traj_id) + " already finalized");
    auto it = open_.find(traj_id);
    require(it != open_.end(), Errc::protocol,
            "replay finalize: trajectory " + std::to_string(traj_id) + " is not open");
    require(origin != TrajOrigin::demo || success, Errc::protocol,
            "replay finalize: demo trajectories must be successful");
    TrajectoryRecord rec = std::move(it->second);
    open_.erase(it);
    rec.success = success;
    rec.finalized = true;
    rec.origin = origin;
    stored_steps_ += rec.steps.size();
    finalized_.push_back(std::move(rec));
    finalized_ids_.insert(traj_id);
    evict_if_needed();
  }

  // Ingest one demonstration trajectory; success is forced true. Per-step
  // intrinsic rewards are supplied by the caller (empty means all zero).
  long ingest_demo(const DemoTrajectory& demo, const Vec& intrinsic = Vec()) {
    require(intrinsic.size() == 0 || intrinsic.size() == demo.length(), Errc::dimension,
            "ingest_demo: intrinsic reward length mismatch");
    const long id = next_traj_id();
    const long L = demo.length();
    for (long t = 0; t < L; ++t) {
      Transition tr;
      tr.obs = demo.obs.row(t).transpose();
      tr.action = demo.actions.row(t).transpose();
      tr.reward_ext = demo.rewards[t];
      tr.reward_int = intrinsic.size() > 0 ? intrinsic[t] : 0.0;
      tr.next_obs = demo.obs.row(t + 1).transpose();
      tr.done = t + 1 == L;
      tr.traj_id = id;
      tr.step_index = static_cast<int>(t);
      push(std::move(tr));
    }
    finalize_trajectory(id, true, TrajOrigin::demo);
    return id;
  }

  long next_traj_id() { return next_id_++; }

  std::size_t total_transitions() const { return stored_steps_; }
  std::size_t finalized_count() const { return finalized_.size(); }
  std::size_t open_count() const { return open_.size(); }
  const std::deque<TrajectoryRecord>& trajectories() const { return finalized_; }

  // Fraction of finalized transitions whose trajectory succeeded.
  double success_fraction() const {
    if (stored_steps_ == 0) return 0.0;
    std::size_t succ = 0;
    for (const auto& rec : finalized_)
      if (rec.success) succ += rec.steps.size();
    return static_cast<double>(succ) / static_cast<double>(stored_steps_);
  }

  // Uniform over all valid (trajectory, t) start pairs. With aligned_only,
  // starts are restricted to chunk boundaries (t mod C == 0).
  NStepBatch sample(int batch, int n, int chunk, Rng& rng, bool aligned_only = false) const {
    require(batch >= 1 && n >= 1 && chunk >= 1, Errc::config, "sample: B, n, C must be >= 1");
    require(!finalized_.empty(), Errc::protocol, "sample: replay buffer has no finalized trajectories");

    std::vector<std::size_t> starts_per_traj(finalized_.size());
    std::size_t total = 0;
    for (std::size_t i = 0; i < finalized_.size(); ++i) {
      const std::size_t L = finalized_[i].steps.size();
      starts_per_traj[i] = aligned_only ? (L + chunk - 1) / chunk : L;
      total += starts_per_traj[i];
    }
    require(total > 0, Errc::protocol, "sample: no valid start indices");

    const auto& first = finalized_.front().steps.front();
    const int d_s = static_cast<int>(first.obs.size());
    const int d_a = static_cast<int>(first.action.size());

    NStepBatch b;
    b.n = n;
    b.chunk = chunk;
    b.obs.resize(batch, d_s);
    b.chunks.resize(batch, chunk * d_a);
    b.rewards = Mat::Zero(batch, n);
    b.valid = Mat::Zero(batch, n);
    b.landing.resize(batch, d_s);
    b.bootstrap = Vec::Zero(batch);
    b.succ_mask = Vec::Zero(batch);
    b.source.resize(batch);

    for (int row = 0; row < batch; ++row) {
      std::size_t pick = rng.uniform_index(total);
      std::size_t ti = 0;
      while (pick >= starts_per_traj[ti]) {
        pick -= starts_per_traj[ti];
        ti += 1;
      }
      const TrajectoryRecord& rec = finalized_[ti];
      const long L = static_cast<long>(rec.steps.size());
      const long t = aligned_only ? static_cast<long>(pick) * chunk : static_cast<long>(pick);

      b.source[row] = {rec.id, static_cast<int>(t)};
      b.obs.row(row) = rec.steps[t].obs.transpose();
      b.succ_mask[row] = rec.success ? 1.0 : 0.0;

      for (int k = 0; k < chunk; ++k) {
        const long idx = std::min(t + k, L - 1);  // repeat the final action past the end
        b.chunks.row(row).segment(k * d_a, d_a) = rec.steps[idx].action.transpose();
      }
      for (int k = 0; k < n; ++k) {
        if (t + k < L) {
          b.rewards(row, k) = rec.steps[t + k].reward_ext + rec.steps[t + k].reward_int;
          b.valid(row, k) = 1.0;
        }
      }
      if (t + n <= L - 1) {
        b.bootstrap[row] = 1.0;
        b.landing.row(row) = rec.steps[t + n].obs.transpose();
      } else {
        b.landing.row(row) = rec.steps[L - 1].next_obs.transpose();
      }
    }
    return b;
  }

  // Snapshot persistence reuses the demo JSONL layout plus success flags and
  // stored intrinsic rewards, for run resumption and post-hoc audits.
  void export_snapshot(const std::string& path) const {
    std::ofstream out(path);
    require(out.good(), Errc::io, "replay export: cannot open '" + path + "'");
    nlohmann::json header{{"format_version", "chunkrl-replay-v1"},
                          {"trajectories", finalized_.size()}};
    out << header.dump() << "\n";
    for (const auto& rec : finalized_) {
      const long L = static_cast<long>(rec.steps.size());
      Mat obs(L + 1, rec.steps.front().obs.size());
      Mat act(L, rec.steps.front().action.size());
      Vec rew(L), rint(L);
      for (long t = 0; t < L; ++t) {
        obs.row(t) = rec.steps[t].obs.transpose();
        act.row(t) = rec.steps[t].action.transpose();
        rew[t] = rec.steps[t].reward_ext;
        rint[t] = rec.steps[t].reward_int;
      }
      obs.row(L) = rec.steps[L - 1].next_obs.transpose();
      nlohmann::json line{{"obs", detail::mat_to_json(obs)},
                          {"actions", detail::mat_to_json(act)},
                          {"rewards", detail::mat_to_json(Mat(rew))},
                          {"intrinsic", detail::mat_to_json(Mat(rint))},
                          {"success", rec.success},
                          {"origin", rec.origin == TrajOrigin::demo ? "demo" : "online"}};
      out << line.dump() << "\n";
    }
    require(out.good(), Errc::io, "replay export: write failed");
  }

  void import_snapshot(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), Errc::io, "replay import: cannot open '" + path + "'");
    std::string line;
    require(static_cast<bool>(std::getline(in, line)), Errc::io, "replay import: empty file");
    nlohmann::json header = nlohmann::json::parse(line);
    require(header.value("format_version", "") == "chunkrl-replay-v1", Errc::io,
            "replay import: unsupported format version");
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      nlohmann::json j = nlohmann::json::parse(line);
      Mat obs = detail::mat_from_json(j.at("obs"));
      Mat act = detail::mat_from_json(j.at("actions"));
      Vec rew = detail::mat_from_json(j.at("rewards")).col(0);
      Vec rint = detail::mat_from_json(j.at("intrinsic")).col(0);
      const bool success = j.at("success").get<bool>();
      const bool is_demo = j.at("origin").get<std::string>() == "demo";
      const long id = next_traj_id();
      const long L = act.rows();
      for (long t = 0; t < L; ++t) {
        Transition tr;
        tr.obs = obs.row(t).transpose();
        tr.action = act.row(t).transpose();
        tr.reward_ext = rew[t];
        tr.reward_int = rint[t];
        tr.next_obs = obs.row(t + 1).transpose();
        tr.done = t + 1 == L;
        tr.traj_id = id;
        tr.step_index = static_cast<int>(t);
        push(std::move(tr));
      }
      finalize_trajectory(id, success, is_demo ? TrajOrigin::demo : TrajOrigin::online);
    }
  }

 private:
  void evict_if_needed() {
    while (stored_steps_ > capacity_ && !finalized_.empty()) {
      stored_steps_ -= finalized_.front().steps.size();
      finalized_.pop_front();
    }
  }

  std::size_t capacity_;
  std::size_t stored_steps_ = 0;
  long next_id_ = 0;
  std::map<long, TrajectoryRecord> open_;
  std::deque<TrajectoryRecord> finalized_;
  std::set<long> finalized_ids_;
};

}  // namespace chunkrl
