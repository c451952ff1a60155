#pragma once

// Function-approximator core: feed-forward layers, a gated recurrent unit,
// the fixed network topologies the agent needs (chunk policy, chunk critic,
// goal embedding), AdamW, target-network soft updates, and gradient checking.
// All math is double precision; parameters live in one flat vector per
// network so optimizer steps, soft updates, and checkpoints stay trivial.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "chunkrl/common.hpp"
#include "chunkrl/rng.hpp"

namespace chunkrl {

enum class Act { identity, tanh_fn, relu };

inline Mat apply_act(Act a, const Mat& z) {
  switch (a) {
    case Act::identity: return z;
    case Act::tanh_fn: return z.array().tanh().matrix();
    case Act::relu: return z.cwiseMax(0.0);
  }
  return z;
}

// derivative expressed through the post-activation value
inline Mat act_grad_from_output(Act a, const Mat& y) {
  switch (a) {
    case Act::identity: return Mat::Ones(y.rows(), y.cols());
    case Act::tanh_fn: return (1.0 - y.array().square()).matrix();
    case Act::relu: return (y.array() > 0.0).cast<double>().matrix();
  }
  return Mat::Ones(y.rows(), y.cols());
}

// ---------------------------------------------------------------------------
// Shapes and flat parameter storage
// ---------------------------------------------------------------------------

struct LayerShape {
  std::string name;
  int rows = 0;
  int cols = 0;
  int count() const { return rows * cols; }
  bool operator==(const LayerShape&) const = default;
};

inline int total_param_count(const std::vector<LayerShape>& shapes) {
  int n = 0;
  for (const auto& s : shapes) n += s.count();
  return n;
}

struct AdamState {
  Vec m;
  Vec v;
  long step = 0;
};

struct ApproximatorParams {
  Vec values;
  std::vector<LayerShape> shapes;
  AdamState opt;

  int size() const { return static_cast<int>(values.size()); }

  void validate() const {
    require(values.size() == total_param_count(shapes), Errc::dimension,
            "parameter vector length does not match layer shape descriptors");
    require(opt.m.size() == values.size() && opt.v.size() == values.size(), Errc::dimension,
            "optimizer moment vectors must match parameter vector length");
  }
};

inline ApproximatorParams make_params(const std::vector<LayerShape>& shapes) {
  ApproximatorParams p;
  p.shapes = shapes;
  const int n = total_param_count(shapes);
  p.values = Vec::Zero(n);
  p.opt.m = Vec::Zero(n);
  p.opt.v = Vec::Zero(n);
  p.opt.step = 0;
  return p;
}

// ---------------------------------------------------------------------------
// MLP block over a flat parameter slice
// ---------------------------------------------------------------------------

struct MlpSpec {
  std::vector<int> widths;  // [in, ..., out]; a single entry means passthrough
  Act hidden = Act::tanh_fn;
  Act output = Act::identity;

  int layer_count() const { return widths.size() <= 1 ? 0 : static_cast<int>(widths.size()) - 1; }
  int in_dim() const { return widths.front(); }
  int out_dim() const { return widths.back(); }
  Act act_at(int layer) const { return layer + 1 == layer_count() ? output : hidden; }

  int param_count() const {
    int n = 0;
    for (int l = 0; l < layer_count(); ++l) n += widths[l] * widths[l + 1] + widths[l + 1];
    return n;
  }

  std::vector<LayerShape> layer_shapes(const std::string& prefix) const {
    std::vector<LayerShape> out;
    for (int l = 0; l < layer_count(); ++l) {
      out.push_back({prefix + ".W" + std::to_string(l), widths[l], widths[l + 1]});
      out.push_back({prefix + ".b" + std::to_string(l), 1, widths[l + 1]});
    }
    return out;
  }
};

struct MlpTape {
  std::vector<Mat> acts;  // acts[0] = input, acts[l+1] = post-activation of layer l
};

class MlpPack {
 public:
  MlpPack() = default;
  MlpPack(MlpSpec spec, int offset) : spec_(std::move(spec)), offset_(offset) {}

  const MlpSpec& spec() const { return spec_; }
  int offset() const { return offset_; }
  int param_count() const { return spec_.param_count(); }

  Mat forward(const Vec& values, const Mat& X, MlpTape* tape = nullptr) const {
    require(X.cols() == spec_.in_dim(), Errc::dimension,
            "mlp forward: input width " + std::to_string(X.cols()) + " != expected " +
                std::to_string(spec_.in_dim()));
    if (tape) tape->acts.assign(1, X);
    Mat a = X;
    int off = offset_;
    for (int l = 0; l < spec_.layer_count(); ++l) {
      const int in = spec_.widths[l], out = spec_.widths[l + 1];
      Eigen::Map<const Mat> W(values.data() + off, in, out);
      Eigen::Map<const Vec> b(values.data() + off + in * out, out);
      off += in * out + out;
      Mat z = a * W;
      z.rowwise() += b.transpose();
      a = apply_act(spec_.act_at(l), z);
      if (tape) tape->acts.push_back(a);
    }
    return a;
  }

  // Returns gradient w.r.t. the block input. Parameter gradients are added
  // into `grad` (full-length vector) when param_grads is set.
  Mat backward(const Vec& values, const MlpTape& tape, const Mat& dY, Vec* grad,
               bool param_grads = true) const {
    Mat d = dY;
    int off = offset_ + param_count();
    for (int l = spec_.layer_count() - 1; l >= 0; --l) {
      const int in = spec_.widths[l], out = spec_.widths[l + 1];
      off -= in * out + out;
      Eigen::Map<const Mat> W(values.data() + off, in, out);
      const Mat& a_out = tape.acts[l + 1];
      const Mat& a_in = tape.acts[l];
      Mat dz = d.cwiseProduct(act_grad_from_output(spec_.act_at(l), a_out));
      if (param_grads) {
        Eigen::Map<Mat> dW(grad->data() + off, in, out);
        Eigen::Map<Vec> db(grad->data() + off + in * out, out);
        dW.noalias() += a_in.transpose() * dz;
        db += dz.colwise().sum().transpose();
      }
      d.noalias() = dz * W.transpose();
    }
    return d;
  }

 private:
  MlpSpec spec_;
  int offset_ = 0;
};

// ---------------------------------------------------------------------------
// GRU cell block (standard reset/update/candidate gates)
//
//   r = sigmoid(x Wi_r + bi_r + h Wh_r + bh_r)
//   z = sigmoid(x Wi_z + bi_z + h Wh_z + bh_z)
//   n = tanh  (x Wi_n + bi_n + r .* (h Wh_n + bh_n))
//   h' = (1 - z) .* n + z .* h
//
// Gate blocks are stored side by side ([r | z | n]) so each side of the cell
// is a single GEMM. The input-side affine is exposed separately so callers
// that feed a constant input across steps can hoist it out of the unroll.
// ---------------------------------------------------------------------------

struct GruSpec {
  int input = 0;
  int hidden = 0;

  bool present() const { return hidden > 0; }
  int param_count() const {
    return present() ? input * 3 * hidden + 3 * hidden + hidden * 3 * hidden + 3 * hidden : 0;
  }
  std::vector<LayerShape> layer_shapes(const std::string& prefix) const {
    if (!present()) return {};
    return {{prefix + ".Wi", input, 3 * hidden},
            {prefix + ".bi", 1, 3 * hidden},
            {prefix + ".Wh", hidden, 3 * hidden},
            {prefix + ".bh", 1, 3 * hidden}};
  }
};

struct GruTape {
  Mat h_prev, r, z, n, hn_aff;  // hn_aff = h Wh_n + bh_n
};

inline Mat sigmoid(const Mat& z) { return (1.0 / (1.0 + (-z.array()).exp())).matrix(); }

class GruPack {
 public:
  GruPack() = default;
  GruPack(GruSpec spec, int offset) : spec_(spec), offset_(offset) {}

  const GruSpec& spec() const { return spec_; }
  int param_count() const { return spec_.param_count(); }

  // x Wi + bi for the three gates at once
  Mat input_affine(const Vec& values, const Mat& X) const {
    require(X.cols() == spec_.input, Errc::dimension,
            "gru input width " + std::to_string(X.cols()) + " != expected " +
                std::to_string(spec_.input));
    const int H3 = 3 * spec_.hidden;
    Eigen::Map<const Mat> Wi(values.data() + offset_, spec_.input, H3);
    Eigen::Map<const Vec> bi(values.data() + offset_ + spec_.input * H3, H3);
    Mat gi = X * Wi;
    gi.rowwise() += bi.transpose();
    return gi;
  }

  Mat step(const Vec& values, const Mat& Gi, const Mat& h_prev, GruTape* tape = nullptr) const {
    const int H = spec_.hidden, H3 = 3 * H;
    require(h_prev.cols() == H, Errc::dimension, "gru hidden width mismatch");
    const int woff = offset_ + spec_.input * H3 + H3;
    Eigen::Map<const Mat> Wh(values.data() + woff, H, H3);
    Eigen::Map<const Vec> bh(values.data() + woff + H * H3, H3);

    Mat gh = h_prev * Wh;
    gh.rowwise() += bh.transpose();

    Mat r = sigmoid(Gi.leftCols(H) + gh.leftCols(H));
    Mat z = sigmoid(Gi.middleCols(H, H) + gh.middleCols(H, H));
    Mat hn_aff = gh.rightCols(H);
    Mat n = (Gi.rightCols(H) + r.cwiseProduct(hn_aff)).array().tanh().matrix();
    Mat h = (1.0 - z.array()).matrix().cwiseProduct(n) + z.cwiseProduct(h_prev);
    if (tape) *tape = GruTape{h_prev, r, z, n, std::move(hn_aff)};
    return h;
  }

  // Backward through one step. Adds the input-side gate gradient into dGi
  // (caller folds it into Wi/bi/dX), returns dH_prev, and accumulates the
  // hidden-side parameter gradients when param_grads is set.
  Mat step_backward(const Vec& values, const GruTape& t, const Mat& dh, Mat* dGi, Vec* grad,
                    bool param_grads) const {
    const int H = spec_.hidden, H3 = 3 * H;
    const int woff = offset_ + spec_.input * H3 + H3;
    Eigen::Map<const Mat> Wh(values.data() + woff, H, H3);

    Mat dn = dh.cwiseProduct((1.0 - t.z.array()).matrix());
    Mat dz = dh.cwiseProduct(t.h_prev - t.n);
    Mat dh_prev = dh.cwiseProduct(t.z);

    Mat dn_pre = dn.cwiseProduct((1.0 - t.n.array().square()).matrix());
    Mat dhn_aff = dn_pre.cwiseProduct(t.r);
    Mat dr = dn_pre.cwiseProduct(t.hn_aff);
    Mat dr_pre = dr.cwiseProduct(t.r).cwiseProduct((1.0 - t.r.array()).matrix());
    Mat dz_pre = dz.cwiseProduct(t.z).cwiseProduct((1.0 - t.z.array()).matrix());

    Mat dgh(dh.rows(), H3);
    dgh.leftCols(H) = dr_pre;
    dgh.middleCols(H, H) = dz_pre;
    dgh.rightCols(H) = dhn_aff;

    dGi->leftCols(H) += dr_pre;
    dGi->middleCols(H, H) += dz_pre;
    dGi->rightCols(H) += dn_pre;

    if (param_grads) {
      Eigen::Map<Mat> dWh(grad->data() + woff, H, H3);
      Eigen::Map<Vec> dbh(grad->data() + woff + H * H3, H3);
      dWh.noalias() += t.h_prev.transpose() * dgh;
      dbh += dgh.colwise().sum().transpose();
    }
    dh_prev.noalias() += dgh * Wh.transpose();
    return dh_prev;
  }

  // Fold an accumulated dGi into the input-side parameter gradients and,
  // optionally, the gradient w.r.t. the input that produced it.
  void input_affine_backward(const Vec& values, const Mat& X, const Mat& dGi, Mat* dX, Vec* grad,
                             bool param_grads) const {
    const int H3 = 3 * spec_.hidden;
    if (param_grads) {
      Eigen::Map<Mat> dWi(grad->data() + offset_, spec_.input, H3);
      Eigen::Map<Vec> dbi(grad->data() + offset_ + spec_.input * H3, H3);
      dWi.noalias() += X.transpose() * dGi;
      dbi += dGi.colwise().sum().transpose();
    }
    if (dX) {
      Eigen::Map<const Mat> Wi(values.data() + offset_, spec_.input, H3);
      dX->noalias() += dGi * Wi.transpose();
    }
  }

 private:
  GruSpec spec_;
  int offset_ = 0;
};

// ---------------------------------------------------------------------------
// Generic MLP -> GRU -> MLP unit applied over an input sequence.
// Row t of the input matrix is the step-t input; the encoder runs per step,
// its output drives the recurrence, and the head reads the hidden state.
// Without a recurrent block the unit degenerates to head(encoder(x)).
// ---------------------------------------------------------------------------

struct MlpGruUnit {
  MlpSpec encoder;
  GruSpec gru;
  MlpSpec head;

  void validate() const {
    if (gru.present()) {
      require(encoder.out_dim() == gru.input, Errc::dimension,
              "unit: encoder output width must equal recurrent input width");
      require(head.in_dim() == gru.hidden, Errc::dimension,
              "unit: head input width must equal recurrent hidden width");
    } else {
      require(head.in_dim() == encoder.out_dim(), Errc::dimension,
              "unit: head input width must equal encoder output width");
    }
  }

  int in_dim() const { return encoder.in_dim(); }
  int out_dim() const { return head.out_dim(); }
  int hidden_dim() const { return gru.hidden; }

  std::vector<LayerShape> layer_shapes() const {
    std::vector<LayerShape> out = encoder.layer_shapes("enc");
    auto g = gru.layer_shapes("gru");
    out.insert(out.end(), g.begin(), g.end());
    auto h = head.layer_shapes("head");
    out.insert(out.end(), h.begin(), h.end());
    return out;
  }
  int param_count() const { return encoder.param_count() + gru.param_count() + head.param_count(); }
};

struct UnitTape {
  std::vector<MlpTape> enc;
  std::vector<GruTape> gru;
  std::vector<MlpTape> head;
  std::vector<Mat> enc_out;  // per-step encoder outputs (the recurrent inputs)
};

struct UnitOutput {
  Mat outputs;    // one row per input row
  Vec final_hidden;
};

class UnitEngine {
 public:
  explicit UnitEngine(MlpGruUnit unit) : unit_(std::move(unit)) {
    unit_.validate();
    enc_ = MlpPack(unit_.encoder, 0);
    gru_ = GruPack(unit_.gru, unit_.encoder.param_count());
    head_ = MlpPack(unit_.head, unit_.encoder.param_count() + unit_.gru.param_count());
  }

  const MlpGruUnit& unit() const { return unit_; }
  std::vector<LayerShape> layer_shapes() const { return unit_.layer_shapes(); }
  ApproximatorParams make_zero_params() const { return make_params(layer_shapes()); }

  UnitOutput forward(const ApproximatorParams& params, const Mat& inputs, const Vec& initial_hidden,
                     UnitTape* tape = nullptr) const {
    params.validate();
    require_finite(inputs, "unit inputs");
    require(inputs.cols() == unit_.in_dim(), Errc::dimension,
            "unit forward: input feature width " + std::to_string(inputs.cols()) +
                " != descriptor width " + std::to_string(unit_.in_dim()));
    const long T = inputs.rows();
    UnitOutput out;
    out.outputs.resize(T, unit_.out_dim());

    if (!unit_.gru.present()) {
      MlpTape et, ht;
      Mat e = enc_.forward(params.values, inputs, tape ? &et : nullptr);
      Mat y = head_.forward(params.values, e, tape ? &ht : nullptr);
      out.outputs = y;
      out.final_hidden = Vec();
      if (tape) {
        tape->enc = {std::move(et)};
        tape->head = {std::move(ht)};
      }
      return out;
    }

    require(initial_hidden.size() == unit_.hidden_dim(), Errc::dimension,
            "unit forward: initial hidden width " + std::to_string(initial_hidden.size()) +
                " != recurrent width " + std::to_string(unit_.hidden_dim()));
    require_finite(initial_hidden, "unit initial hidden");

    Mat h = initial_hidden.transpose();
    if (tape) {
      tape->enc.resize(T);
      tape->gru.resize(T);
      tape->head.resize(T);
      tape->enc_out.resize(T);
    }
    for (long t = 0; t < T; ++t) {
      Mat e = enc_.forward(params.values, inputs.row(t), tape ? &tape->enc[t] : nullptr);
      Mat gi = gru_.input_affine(params.values, e);
      h = gru_.step(params.values, gi, h, tape ? &tape->gru[t] : nullptr);
      Mat y = head_.forward(params.values, h, tape ? &tape->head[t] : nullptr);
      out.outputs.row(t) = y.row(0);
      if (tape) tape->enc_out[t] = std::move(e);
    }
    out.final_hidden = h.transpose();
    return out;
  }

  // Gradient of a scalar loss w.r.t. the flat parameter vector, given the
  // loss gradient w.r.t. the unit outputs (and optionally w.r.t. the final
  // hidden state). Deterministic for a fixed tape.
  Vec backward(const ApproximatorParams& params, const UnitTape& tape, const Mat& output_grad,
               const Vec& final_hidden_grad = Vec()) const {
    require(output_grad.cols() == unit_.out_dim(), Errc::dimension,
            "unit backward: output gradient width mismatch");
    Vec grad = Vec::Zero(params.size());

    if (!unit_.gru.present()) {
      Mat de = head_.backward(params.values, tape.head[0], output_grad, &grad);
      enc_.backward(params.values, tape.enc[0], de, &grad);
      return grad;
    }

    const long T = output_grad.rows();
    require(static_cast<long>(tape.gru.size()) == T, Errc::dimension,
            "unit backward: tape does not match output gradient row count");
    const int H3 = 3 * unit_.gru.hidden;
    Mat dh = Mat::Zero(1, unit_.gru.hidden);
    if (final_hidden_grad.size() > 0) {
      require(final_hidden_grad.size() == unit_.hidden_dim(), Errc::dimension,
              "unit backward: final hidden gradient width mismatch");
      dh = final_hidden_grad.transpose();
    }
    for (long t = T - 1; t >= 0; --t) {
      dh += head_.backward(params.values, tape.head[t], output_grad.row(t), &grad);
      Mat dgi = Mat::Zero(1, H3);
      dh = gru_.step_backward(params.values, tape.gru[t], dh, &dgi, &grad, true);
      Mat de = Mat::Zero(1, unit_.gru.input);
      gru_.input_affine_backward(params.values, tape.enc_out[t], dgi, &de, &grad, true);
      enc_.backward(params.values, tape.enc[t], de, &grad);
    }
    return grad;
  }

 private:
  MlpGruUnit unit_;
  MlpPack enc_;
  GruPack gru_;
  MlpPack head_;
};

// ---------------------------------------------------------------------------
// Fixed topologies used by the agent
// ---------------------------------------------------------------------------

// Deterministic chunk policy: the encoded state seeds the recurrent hidden
// state and is also fed as the recurrent input at every unroll step; each of
// the C steps emits one action through a tanh head.
class ChunkPolicyNet {
 public:
  ChunkPolicyNet() = default;
  ChunkPolicyNet(int obs_dim, int action_dim, int chunk, int hidden)
      : obs_dim_(obs_dim), action_dim_(action_dim), chunk_(chunk), hidden_(hidden) {
    enc_spec_ = MlpSpec{{obs_dim, hidden, hidden}, Act::tanh_fn, Act::tanh_fn};
    gru_spec_ = GruSpec{hidden, hidden};
    head_spec_ = MlpSpec{{hidden, action_dim}, Act::tanh_fn, Act::tanh_fn};
    enc_ = MlpPack(enc_spec_, 0);
    gru_ = GruPack(gru_spec_, enc_spec_.param_count());
    head_ = MlpPack(head_spec_, enc_spec_.param_count() + gru_spec_.param_count());
    param_count_ = enc_spec_.param_count() + gru_spec_.param_count() + head_spec_.param_count();
  }

  int param_count() const { return param_count_; }

  int obs_dim() const { return obs_dim_; }
  int action_dim() const { return action_dim_; }
  int chunk() const { return chunk_; }
  int flat_dim() const { return chunk_ * action_dim_; }

  std::vector<LayerShape> layer_shapes() const {
    auto s = enc_spec_.layer_shapes("enc");
    auto g = gru_spec_.layer_shapes("gru");
    s.insert(s.end(), g.begin(), g.end());
    auto h = head_spec_.layer_shapes("head");
    s.insert(s.end(), h.begin(), h.end());
    return s;
  }

  struct Tape {
    MlpTape enc;
    Mat E;
    std::vector<GruTape> steps;
    std::vector<MlpTape> heads;
  };

  // S: one observation per row. Returns B x (C*action_dim); step k occupies
  // column block [k*action_dim, (k+1)*action_dim).
  Mat forward(const Vec& values, const Mat& S, Tape* tape = nullptr) const {
    require(S.cols() == obs_dim_, Errc::dimension,
            "policy forward: observation width " + std::to_string(S.cols()) + " != " +
                std::to_string(obs_dim_));
    const long B = S.rows();
    Mat E = enc_.forward(values, S, tape ? &tape->enc : nullptr);
    Mat Gi = gru_.input_affine(values, E);
    Mat H = E;
    Mat A(B, flat_dim());
    if (tape) {
      tape->steps.resize(chunk_);
      tape->heads.resize(chunk_);
    }
    for (int k = 0; k < chunk_; ++k) {
      H = gru_.step(values, Gi, H, tape ? &tape->steps[k] : nullptr);
      A.middleCols(k * action_dim_, action_dim_) =
          head_.forward(values, H, tape ? &tape->heads[k] : nullptr);
    }
    if (tape) tape->E = std::move(E);
    return A;
  }

  Vec backward(const Vec& values, const Tape& tape, const Mat& dA) const {
    Vec grad = Vec::Zero(param_count_);
    const long B = dA.rows();
    Mat dh = Mat::Zero(B, hidden_);
    Mat dgi = Mat::Zero(B, 3 * hidden_);
    for (int k = chunk_ - 1; k >= 0; --k) {
      dh += head_.backward(values, tape.heads[k], dA.middleCols(k * action_dim_, action_dim_),
                           &grad);
      dh = gru_.step_backward(values, tape.steps[k], dh, &dgi, &grad, true);
    }
    // dh now carries the gradient w.r.t. the initial hidden state (= E);
    // dgi carries the summed input-side gate gradient (input = E each step).
    Mat dE = dh;
    gru_.input_affine_backward(values, tape.E, dgi, &dE, &grad, true);
    enc_.backward(values, tape.enc, dE, &grad);
    return grad;
  }

 private:
  int obs_dim_ = 0, action_dim_ = 0, chunk_ = 0, hidden_ = 0, param_count_ = 0;
  MlpSpec enc_spec_, head_spec_;
  GruSpec gru_spec_;
  MlpPack enc_, head_;
  GruPack gru_;
};

// Chunk critic: the encoded state seeds the hidden state, the recurrence
// consumes the chunk one action per step, and a linear head reads the final
// hidden state as the scalar value of executing the whole chunk.
class ChunkCriticNet {
 public:
  ChunkCriticNet() = default;
  ChunkCriticNet(int obs_dim, int action_dim, int chunk, int hidden)
      : obs_dim_(obs_dim), action_dim_(action_dim), chunk_(chunk), hidden_(hidden) {
    enc_spec_ = MlpSpec{{obs_dim, hidden, hidden}, Act::tanh_fn, Act::tanh_fn};
    gru_spec_ = GruSpec{action_dim, hidden};
    head_spec_ = MlpSpec{{hidden, 1}, Act::tanh_fn, Act::identity};
    enc_ = MlpPack(enc_spec_, 0);
    gru_ = GruPack(gru_spec_, enc_spec_.param_count());
    head_ = MlpPack(head_spec_, enc_spec_.param_count() + gru_spec_.param_count());
    param_count_ = enc_spec_.param_count() + gru_spec_.param_count() + head_spec_.param_count();
  }

  int param_count() const { return param_count_; }

  int obs_dim() const { return obs_dim_; }
  int action_dim() const { return action_dim_; }
  int chunk() const { return chunk_; }
  int flat_dim() const { return chunk_ * action_dim_; }

  std::vector<LayerShape> layer_shapes() const {
    auto s = enc_spec_.layer_shapes("enc");
    auto g = gru_spec_.layer_shapes("gru");
    s.insert(s.end(), g.begin(), g.end());
    auto h = head_spec_.layer_shapes("head");
    s.insert(s.end(), h.begin(), h.end());
    return s;
  }

  struct Tape {
    MlpTape enc;
    Mat A;  // chunk inputs, kept for input-side parameter gradients
    std::vector<GruTape> steps;
    MlpTape head;
  };

  Vec forward(const Vec& values, const Mat& S, const Mat& A, Tape* tape = nullptr) const {
    require(S.cols() == obs_dim_, Errc::dimension, "critic forward: observation width mismatch");
    require(A.cols() == flat_dim(), Errc::dimension,
            "critic forward: chunk width " + std::to_string(A.cols()) + " != " +
                std::to_string(flat_dim()));
    require(S.rows() == A.rows(), Errc::dimension, "critic forward: batch size mismatch");
    Mat H = enc_.forward(values, S, tape ? &tape->enc : nullptr);
    if (tape) tape->steps.resize(chunk_);
    for (int k = 0; k < chunk_; ++k) {
      Mat gi = gru_.input_affine(values, A.middleCols(k * action_dim_, action_dim_));
      H = gru_.step(values, gi, H, tape ? &tape->steps[k] : nullptr);
    }
    Mat q = head_.forward(values, H, tape ? &tape->head : nullptr);
    if (tape) tape->A = A;
    return q.col(0);
  }

  // dq: per-row gradient of the loss w.r.t. the critic output. Fills the
  // parameter gradient when grad is non-null and the chunk-input gradient
  // when dA is non-null (used to push value gradients into the policy).
  void backward(const Vec& values, const Tape& tape, const Vec& dq, Vec* grad, Mat* dA) const {
    const bool param_grads = grad != nullptr;
    Vec dummy;
    Vec& g = param_grads ? *grad : dummy;
    if (param_grads && g.size() == 0) g = Vec::Zero(param_count_);
    const long B = dq.size();
    if (dA) *dA = Mat::Zero(B, flat_dim());
    Mat dh = head_.backward(values, tape.head, Mat(dq), param_grads ? &g : nullptr, param_grads);
    for (int k = chunk_ - 1; k >= 0; --k) {
      Mat dgi = Mat::Zero(B, 3 * hidden_);
      dh = gru_.step_backward(values, tape.steps[k], dh, &dgi, param_grads ? &g : nullptr,
                              param_grads);
      Mat dAk = Mat::Zero(B, action_dim_);
      gru_.input_affine_backward(values, tape.A.middleCols(k * action_dim_, action_dim_), dgi,
                                 dA ? &dAk : nullptr, param_grads ? &g : nullptr, param_grads);
      if (dA) dA->middleCols(k * action_dim_, action_dim_) = dAk;
    }
    if (param_grads) enc_.backward(values, tape.enc, dh, &g);
  }

 private:
  int obs_dim_ = 0, action_dim_ = 0, chunk_ = 0, hidden_ = 0, param_count_ = 0;
  MlpSpec enc_spec_, head_spec_;
  GruSpec gru_spec_;
  MlpPack enc_, head_;
  GruPack gru_;
};

// Goal embedding network: plain MLP with the same encoder structure as the
// policy/critic state encoders and a linear projection to the latent space.
class GoalNet {
 public:
  GoalNet() = default;
  GoalNet(int obs_dim, int hidden, int latent_dim)
      : spec_{{obs_dim, hidden, latent_dim}, Act::tanh_fn, Act::identity}, pack_(spec_, 0) {}

  int obs_dim() const { return spec_.in_dim(); }
  int latent_dim() const { return spec_.out_dim(); }
  std::vector<LayerShape> layer_shapes() const { return spec_.layer_shapes("goal"); }

  Mat forward(const Vec& values, const Mat& S, MlpTape* tape = nullptr) const {
    return pack_.forward(values, S, tape);
  }
  Vec backward(const Vec& values, const MlpTape& tape, const Mat& dZ) const {
    Vec grad = Vec::Zero(total_param_count(layer_shapes()));
    pack_.backward(values, tape, dZ, &grad);
    return grad;
  }

 private:
  MlpSpec spec_;
  MlpPack pack_;
};

// ---------------------------------------------------------------------------
// Initialization, optimizer, target updates
// ---------------------------------------------------------------------------

// Uniform +-1/sqrt(fan-in) for weight matrices, zero biases. Output heads
// (names starting with "head.W" / the goal projection excluded) start near
// zero so fresh critics emit near-zero values.
inline void init_params(ApproximatorParams& params, Rng& rng, double head_scale = 1e-3) {
  int off = 0;
  for (const auto& s : params.shapes) {
    const bool is_bias = s.rows == 1 && s.name.find(".b") != std::string::npos;
    const bool is_head_weight = !is_bias && s.name.rfind("head.W", 0) == 0;
    for (int i = 0; i < s.count(); ++i) {
      if (is_bias) {
        params.values[off + i] = 0.0;
      } else if (is_head_weight) {
        params.values[off + i] = rng.uniform(-head_scale, head_scale);
      } else {
        const double bound = 1.0 / std::sqrt(static_cast<double>(s.rows));
        params.values[off + i] = rng.uniform(-bound, bound);
      }
    }
    off += s.count();
  }
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Decoupled weight decay: the decay term multiplies the parameters directly
// and never enters the moment estimates.
inline void adamw_step(ApproximatorParams& params, const Vec& grad, double lr, double weight_decay,
                       const AdamWConfig& cfg = {}) {
  require(grad.size() == params.values.size(), Errc::dimension,
          "adamw: gradient length " + std::to_string(grad.size()) + " != parameter length " +
              std::to_string(params.values.size()));
  require(grad.allFinite(), Errc::numeric, "adamw: non-finite gradient entries; step rejected");
  auto& st = params.opt;
  st.step += 1;
  st.m = cfg.beta1 * st.m + (1.0 - cfg.beta1) * grad;
  st.v = cfg.beta2 * st.v + (1.0 - cfg.beta2) * grad.array().square().matrix();
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  Vec update = (st.m / bc1).array() / ((st.v / bc2).array().sqrt() + cfg.eps);
  params.values -= lr * update + (lr * weight_decay) * params.values;
  require_finite(params.values, "adamw: parameters after step");
}

inline void soft_update(ApproximatorParams& target, const ApproximatorParams& online, double mu) {
  require(mu > 0.0 && mu <= 1.0, Errc::config, "soft_update: mu must lie in (0, 1]");
  require(target.shapes == online.shapes, Errc::dimension,
          "soft_update: target and online layer shapes differ");
  target.values = (1.0 - mu) * target.values + mu * online.values;
}

// ---------------------------------------------------------------------------
// Gradient verification
// ---------------------------------------------------------------------------

inline double max_relative_error(const Vec& analytic, const Vec& numeric) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < analytic.size(); ++i) {
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

// Central finite differences of an arbitrary scalar loss over flat values.
inline double finite_diff_check_loss(const std::function<double(const Vec&)>& loss,
                                     const Vec& values, const Vec& analytic_grad, double eps) {
  require(eps > 0.0, Errc::config, "finite_diff_check: step size must be positive");
  Vec numeric(values.size());
  Vec work = values;
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    const double orig = work[i];
    work[i] = orig + eps;
    const double up = loss(work);
    work[i] = orig - eps;
    const double down = loss(work);
    work[i] = orig;
    numeric[i] = (up - down) / (2.0 * eps);
  }
  return max_relative_error(analytic_grad, numeric);
}

struct ProbeResult {
  double loss = 0.0;
  Mat output_grad;
  Vec final_hidden_grad;
};

using LossProbe = std::function<ProbeResult(const Mat& outputs, const Vec& final_hidden)>;

// Max relative error between the unit's analytic gradient and central finite
// differences of a deterministic scalar probe of its outputs.
inline double finite_diff_check(const UnitEngine& engine, const ApproximatorParams& params,
                                const Mat& inputs, const Vec& initial_hidden,
                                const LossProbe& probe, double eps) {
  require(eps > 0.0, Errc::config, "finite_diff_check: step size must be positive");
  UnitTape tape;
  UnitOutput out = engine.forward(params, inputs, initial_hidden, &tape);
  ProbeResult pr = probe(out.outputs, out.final_hidden);
  Vec analytic = engine.backward(params, tape, pr.output_grad, pr.final_hidden_grad);

  ApproximatorParams work = params;
  auto loss_at = [&](const Vec& v) {
    work.values = v;
    UnitOutput o = engine.forward(work, inputs, initial_hidden);
    return probe(o.outputs, o.final_hidden).loss;
  };
  return finite_diff_check_loss(loss_at, params.values, analytic, eps);
}

}  // namespace chunkrl
