#pragma once

// Self-supervised reward shaping. A goal embedding network is pretrained on
// demonstration states with a triplet loss (temporally close states in the
// same trajectory are positives, far-away or cross-trajectory states are
// negatives). All demo states are then encoded into a latent bank; during
// rollouts, anchor steps (t mod K == 0) whose minimum squared latent distance
// to the bank falls below the margin earn a small intrinsic reward.

#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "chunkrl/common.hpp"
#include "chunkrl/envs.hpp"
#include "chunkrl/nn.hpp"
#include "chunkrl/rng.hpp"

namespace chunkrl {

// ---------------------------------------------------------------------------
// Triplet mining
// ---------------------------------------------------------------------------

struct TripletSpec {
  int query_traj = 0;
  int query_t = 0;
  int pos_t = 0;  // same trajectory as the query
  int neg_traj = 0;
  int neg_t = 0;
};

struct MiningConfig {
  int positive_window = 5;      // |dt| <= window, dt != 0
  int negatives_per_positive = 5;
};

struct MiningStats {
  long queries = 0;
  long skipped_queries = 0;  // no feasible positive or negative
  long triplets = 0;
};

inline int negative_min_gap(long traj_len) {
  return static_cast<int>(std::ceil(0.1 * static_cast<double>(traj_len)));
}

// For each demo state: positives are the clipped +-window neighborhood, and
// each positive is paired with `negatives_per_positive` uniform draws over
// {far-away states of the same trajectory} u {all states of other
// trajectories}.
inline std::vector<TripletSpec> mine_triplets(const DemoSet& demos, Rng& rng,
                                              const MiningConfig& cfg = {},
                                              MiningStats* stats = nullptr) {
  require(cfg.positive_window >= 1 && cfg.negatives_per_positive >= 1, Errc::config,
          "mine_triplets: window and negative count must be >= 1");
  const int n_traj = static_cast<int>(demos.trajectories.size());
  require(n_traj > 0, Errc::config, "mine_triplets: no demonstrations");

  std::vector<long> lens(n_traj);
  long total_states = 0;
  for (int i = 0; i < n_traj; ++i) {
    lens[i] = demos.trajectories[i].length();
    total_states += lens[i];
  }

  std::vector<TripletSpec> out;
  MiningStats st;
  for (int ti = 0; ti < n_traj; ++ti) {
    const long L = lens[ti];
    const int gap = negative_min_gap(L);
    const long other_states = total_states - L;
    for (long t = 0; t < L; ++t) {
      st.queries += 1;
      std::vector<long> positives;
      for (int dt = -cfg.positive_window; dt <= cfg.positive_window; ++dt) {
        if (dt == 0) continue;
        const long p = t + dt;
        if (p >= 0 && p < L) positives.push_back(p);
      }
      // in-trajectory negatives: |u - t| >= gap
      std::vector<long> far;
      for (long u = 0; u < L; ++u)
        if (std::abs(u - t) >= gap) far.push_back(u);
      const long neg_count = static_cast<long>(far.size()) + other_states;
      if (positives.empty() || neg_count == 0) {
        st.skipped_queries += 1;
        continue;
      }
      for (long p : positives) {
        for (int j = 0; j < cfg.negatives_per_positive; ++j) {
          long pick = static_cast<long>(rng.uniform_index(neg_count));
          TripletSpec ts;
          ts.query_traj = ti;
          ts.query_t = static_cast<int>(t);
          ts.pos_t = static_cast<int>(p);
          if (pick < static_cast<long>(far.size())) {
            ts.neg_traj = ti;
            ts.neg_t = static_cast<int>(far[pick]);
          } else {
            pick -= static_cast<long>(far.size());
            int tj = 0;
            while (true) {
              if (tj == ti) tj += 1;
              if (pick < lens[tj]) break;
              pick -= lens[tj];
              tj += 1;
            }
            ts.neg_traj = tj;
            ts.neg_t = static_cast<int>(pick);
          }
          out.push_back(ts);
          st.triplets += 1;
        }
      }
    }
  }
  if (stats) *stats = st;
  return out;
}

// ---------------------------------------------------------------------------
// Triplet loss: max(|zq - zp|^2 - |zq - zn|^2 + m, 0)
// ---------------------------------------------------------------------------

inline double triplet_loss(const Vec& zq, const Vec& zp, const Vec& zn, double margin) {
  require(zq.size() == zp.size() && zq.size() == zn.size(), Errc::dimension,
          "triplet_loss: latent dimensions differ");
  return std::max((zq - zp).squaredNorm() - (zq - zn).squaredNorm() + margin, 0.0);
}

struct TripletGrad {
  double loss = 0.0;
  Vec dq, dp, dn;
};

inline TripletGrad triplet_loss_grad(const Vec& zq, const Vec& zp, const Vec& zn, double margin) {
  TripletGrad g;
  g.loss = triplet_loss(zq, zp, zn, margin);
  if (g.loss > 0.0) {
    g.dq = 2.0 * (zn - zp);
    g.dp = 2.0 * (zp - zq);
    g.dn = 2.0 * (zq - zn);
  } else {
    g.dq = Vec::Zero(zq.size());
    g.dp = Vec::Zero(zq.size());
    g.dn = Vec::Zero(zq.size());
  }
  return g;
}

// ---------------------------------------------------------------------------
// Goal network pretraining
// ---------------------------------------------------------------------------

struct GoalPretrainConfig {
  int selections = 5;           // independent triplet-mining passes
  int epochs_per_selection = 5;
  double learning_rate = 1e-5;
  double weight_decay = 0.01;
  int batch = 128;
  double margin = 0.5;
  MiningConfig mining;
};

struct GoalPretrainResult {
  ApproximatorParams params;
  std::vector<double> epoch_losses;  // mean triplet loss per epoch
  MiningStats mining;
};

// Mean triplet loss of fixed parameters over a triplet list (no training).
inline double mean_triplet_loss(const GoalNet& net, const Vec& values, const DemoSet& demos,
                                const std::vector<TripletSpec>& triplets, double margin) {
  require(!triplets.empty(), Errc::config, "mean_triplet_loss: no triplets");
  double total = 0.0;
  for (const auto& ts : triplets) {
    const auto& tq = demos.trajectories[ts.query_traj];
    const auto& tn = demos.trajectories[ts.neg_traj];
    Mat batch(3, net.obs_dim());
    batch.row(0) = tq.obs.row(ts.query_t);
    batch.row(1) = tq.obs.row(ts.pos_t);
    batch.row(2) = tn.obs.row(ts.neg_t);
    Mat z = net.forward(values, batch);
    total += triplet_loss(z.row(0).transpose(), z.row(1).transpose(), z.row(2).transpose(), margin);
  }
  return total / static_cast<double>(triplets.size());
}

inline GoalPretrainResult pretrain_goal(const DemoSet& demos, const GoalNet& net,
                                        const GoalPretrainConfig& cfg, Rng& rng) {
  require(!demos.trajectories.empty(), Errc::config, "pretrain_goal: no demonstrations");
  require(cfg.batch >= 1, Errc::config, "pretrain_goal: batch must be >= 1");

  GoalPretrainResult result;
  result.params = make_params(net.layer_shapes());
  init_params(result.params, rng);

  for (int sel = 0; sel < cfg.selections; ++sel) {
    MiningStats st;
    std::vector<TripletSpec> triplets = mine_triplets(demos, rng, cfg.mining, &st);
    result.mining.queries += st.queries;
    result.mining.skipped_queries += st.skipped_queries;
    result.mining.triplets += st.triplets;
    require(!triplets.empty(), Errc::config, "pretrain_goal: mining produced no triplets");

    const long T = static_cast<long>(triplets.size());
    std::vector<long> order(T);
    for (long i = 0; i < T; ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg.epochs_per_selection; ++epoch) {
      // seeded Fisher-Yates shuffle per epoch
      for (long i = T - 1; i > 0; --i)
        std::swap(order[i], order[rng.uniform_index(i + 1)]);

      double epoch_loss = 0.0;
      for (long start = 0; start < T; start += cfg.batch) {
        const long bsz = std::min<long>(cfg.batch, T - start);
        Mat states(3 * bsz, net.obs_dim());
        for (long i = 0; i < bsz; ++i) {
          const TripletSpec& ts = triplets[order[start + i]];
          states.row(3 * i + 0) = demos.trajectories[ts.query_traj].obs.row(ts.query_t);
          states.row(3 * i + 1) = demos.trajectories[ts.query_traj].obs.row(ts.pos_t);
          states.row(3 * i + 2) = demos.trajectories[ts.neg_traj].obs.row(ts.neg_t);
        }
        MlpTape tape;
        Mat z = net.forward(result.params.values, states, &tape);
        Mat dz = Mat::Zero(z.rows(), z.cols());
        double batch_loss = 0.0;
        for (long i = 0; i < bsz; ++i) {
          TripletGrad g = triplet_loss_grad(z.row(3 * i).transpose(), z.row(3 * i + 1).transpose(),
                                            z.row(3 * i + 2).transpose(), cfg.margin);
          batch_loss += g.loss;
          dz.row(3 * i + 0) = g.dq.transpose() / static_cast<double>(bsz);
          dz.row(3 * i + 1) = g.dp.transpose() / static_cast<double>(bsz);
          dz.row(3 * i + 2) = g.dn.transpose() / static_cast<double>(bsz);
        }
        Vec grad = net.backward(result.params.values, tape, dz);
        adamw_step(result.params, grad, cfg.learning_rate, cfg.weight_decay);
        epoch_loss += batch_loss;
      }
      result.epoch_losses.push_back(epoch_loss / static_cast<double>(T));
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Latent bank and intrinsic reward
// ---------------------------------------------------------------------------

struct LatentBank {
  Mat rows;  // one embedding per demonstration state

  long size() const { return rows.rows(); }
  int dim() const { return static_cast<int>(rows.cols()); }
};

inline LatentBank build_latent_bank(const GoalNet& net, const Vec& goal_values,
                                    const DemoSet& demos) {
  long total = 0;
  for (const auto& t : demos.trajectories) total += t.length();
  LatentBank bank;
  bank.rows.resize(total, net.latent_dim());
  long row = 0;
  for (const auto& t : demos.trajectories) {
    Mat z = net.forward(goal_values, t.obs.topRows(t.length()));
    require_finite(z, "latent bank embeddings");
    bank.rows.middleRows(row, t.length()) = z;
    row += t.length();
  }
  return bank;
}

// Minimum squared latent distance to the bank (exhaustive scan).
inline double latent_distance(const Vec& obs, const GoalNet& net, const Vec& goal_values,
                              const LatentBank& bank) {
  require(bank.size() > 0, Errc::config, "latent_distance: empty bank");
  Mat z = net.forward(goal_values, obs.transpose());
  double best = std::numeric_limits<double>::infinity();
  for (long r = 0; r < bank.size(); ++r) {
    const double d = (bank.rows.row(r) - z.row(0)).squaredNorm();
    if (d < best) best = d;
  }
  return best;
}

struct AnchorRewardConfig {
  int interval = 16;      // K
  double margin = 0.5;    // m, shared with the triplet loss margin
  double reward = 0.1;    // a

  void validate() const {
    require(interval >= 1, Errc::config, "anchor interval must be >= 1");
    require(margin > 0.0, Errc::config, "anchor margin must be positive");
    require(reward > 0.0 && reward <= 1.0, Errc::config,
            "anchor reward must lie in (0, 1] (not exceeding the success reward)");
  }
};

// a if t is an anchor step and the state lies within the margin of the
// demonstration manifold, else 0.
inline double intrinsic_reward(const Vec& obs, long t, const AnchorRewardConfig& cfg,
                               const GoalNet& net, const Vec& goal_values, const LatentBank& bank) {
  require(t >= 0, Errc::config, "intrinsic_reward: negative step index");
  if (t % cfg.interval != 0) return 0.0;
  return latent_distance(obs, net, goal_values, bank) < cfg.margin ? cfg.reward : 0.0;
}

// Misspecified variant used by the ablation harness: grows linearly with the
// episode step at anchor points, independent of the latent distance.
inline double intrinsic_reward_linear(long t, long episode_cap, const AnchorRewardConfig& cfg) {
  require(t >= 0 && episode_cap >= 1, Errc::config, "intrinsic_reward_linear: bad arguments");
  if (t % cfg.interval != 0) return 0.0;
  return cfg.reward * static_cast<double>(t) / static_cast<double>(episode_cap);
}

// ---------------------------------------------------------------------------
// Bank persistence: binary matrix plus a JSON manifest.
// ---------------------------------------------------------------------------

inline void save_latent_bank(const std::string& dir, const LatentBank& bank) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json manifest{{"format_version", "chunkrl-bank-v1"},
                          {"rows", bank.size()},
                          {"dim", bank.dim()},
                          {"file", "bank.bin"}};
  std::ofstream mf(fs::path(dir) / "bank.json");
  require(mf.good(), Errc::io, "save_latent_bank: cannot write manifest");
  mf << manifest.dump(2) << "\n";
  std::ofstream bf(fs::path(dir) / "bank.bin", std::ios::binary);
  require(bf.good(), Errc::io, "save_latent_bank: cannot write bank.bin");
  static_assert(std::endian::native == std::endian::little,
                "bank format is little-endian float64");
  bf.write(reinterpret_cast<const char*>(bank.rows.data()),
           sizeof(double) * bank.rows.size());
  require(bf.good(), Errc::io, "save_latent_bank: write failed");
}

inline LatentBank load_latent_bank(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream mf(fs::path(dir) / "bank.json");
  require(mf.good(), Errc::io, "load_latent_bank: missing bank.json in '" + dir + "'");
  nlohmann::json manifest = nlohmann::json::parse(mf);
  require(manifest.value("format_version", "") == "chunkrl-bank-v1", Errc::io,
          "load_latent_bank: unsupported format version");
  LatentBank bank;
  const long rows = manifest.at("rows").get<long>();
  const int dim = manifest.at("dim").get<int>();
  bank.rows.resize(rows, dim);
  if (rows > 0) {
    std::ifstream bf(fs::path(dir) / "bank.bin", std::ios::binary);
    require(bf.good(), Errc::io, "load_latent_bank: missing bank.bin");
    bf.read(reinterpret_cast<char*>(bank.rows.data()), sizeof(double) * rows * dim);
    require(bf.gcount() == static_cast<std::streamsize>(sizeof(double) * rows * dim), Errc::io,
            "load_latent_bank: truncated bank.bin");
  }
  return bank;
}

}  // namespace chunkrl
