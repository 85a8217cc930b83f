#pragma once

// Forward math of the multimodal transformer blocks: rotary position
// embeddings, MultiStream blocks (per-modality projections and FFNs with
// joint or independent attention), and SingleStream blocks (one attention
// over the time-concatenated sequence plus a parallel nonlinear branch).

#include "sfx/core.hpp"

#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace sfx {

enum class Modality { text, video, audio };

inline const char* modality_name(Modality m) {
  switch (m) {
    case Modality::text: return "text";
    case Modality::video: return "video";
    case Modality::audio: return "audio";
  }
  return "?";
}

// Audio latents and video tokens carry positions in seconds; RoPE phases
// are taken at this reference rate so equal wall-clock times get equal
// phase. Text positions are token indices.
inline constexpr double kRopeReferenceRate = 100.0;
inline constexpr double kAudioTokenRate = 100.0;
inline constexpr double kVideoTokenRate = 24.0;

inline double rope_rate(Modality m) { return m == Modality::text ? 1.0 : kRopeReferenceRate; }

struct ModalitySequence {
  Matrix tokens;  // L x d
  Modality modality = Modality::audio;
  Vector positions;          // L
  std::vector<bool> valid;   // L; empty means all valid

  Index length() const { return tokens.rows(); }
  bool is_valid(Index i) const { return valid.empty() || valid[static_cast<std::size_t>(i)]; }
};

// Positions k / rate for k = 0..L-1 (text: k).
inline Vector default_positions(Modality m, Index length) {
  Vector p(length);
  const double rate = m == Modality::audio ? kAudioTokenRate : (m == Modality::video ? kVideoTokenRate : 1.0);
  for (Index i = 0; i < length; ++i) p(i) = static_cast<double>(i) / rate;
  return p;
}

struct RopeConfig {
  int rotary_dims = 0;  // d_r per head; 0 rotates the whole head
  double base = 10000.0;
};

// Rotates pairs (2j, 2j+1) of each row by theta_j * position * rate with
// theta_j = base^(-2j/d_r); dimensions past d_r pass through.
inline Matrix rope_apply(const Eigen::Ref<const Matrix>& q, const Vector& positions, double rate_hz,
                         const RopeConfig& rope = {}) {
  const Index dh = q.cols();
  if (dh % 2 != 0) throw DomainError("rope_apply: head dimension must be even, got " + std::to_string(dh));
  const Index dr = rope.rotary_dims == 0 ? dh : rope.rotary_dims;
  require(dr % 2 == 0 && dr > 0 && dr <= dh, "rope_apply: rotary dims must be even and at most the head dimension");
  require(positions.size() == q.rows(), "rope_apply: one position per row required");
  Matrix out = q;
  for (Index j = 0; j < dr / 2; ++j) {
    const double theta = std::pow(rope.base, -2.0 * static_cast<double>(j) / static_cast<double>(dr));
    for (Index i = 0; i < q.rows(); ++i) {
      const double phase = theta * positions(i) * rate_hz;
      const double c = std::cos(phase), s = std::sin(phase);
      const double a = q(i, 2 * j), b = q(i, 2 * j + 1);
      out(i, 2 * j) = c * a - s * b;
      out(i, 2 * j + 1) = s * a + c * b;
    }
  }
  return out;
}

struct LayerNorm {
  Vector gamma;
  Vector beta;
  double eps = 1e-6;
};

inline Matrix layer_norm(const Matrix& x, const LayerNorm& ln) {
  Matrix out(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().mean();
    out.row(i) = ((x.row(i).array() - mu) / std::sqrt(var + ln.eps)).matrix().cwiseProduct(ln.gamma.transpose()) +
                 ln.beta.transpose();
  }
  return out;
}

// Two-layer MLP with SiLU: W2 silu(W1 x + b1) + b2, row-wise.
struct FeedForward {
  LayerNorm norm;
  Matrix w1;  // d_i x d
  Vector b1;
  Matrix w2;  // d x d_i
  Vector b2;
};

inline Matrix feed_forward(const Matrix& x, const FeedForward& f) {
  Matrix h = x * f.w1.transpose();
  h.rowwise() += f.b1.transpose();
  h = h.unaryExpr([](double z) { return z * sigmoid(z); });
  Matrix y = h * f.w2.transpose();
  y.rowwise() += f.b2.transpose();
  return y;
}

struct ModalityParams {
  Matrix wq, wk, wv, wo;  // d x d, applied as X W
  FeedForward ffn;
};

enum class AttentionMode {
  automatic,    // joint for three or more modalities, independent otherwise
  joint,        // one softmax over the concatenation of all modalities
  independent,  // each modality attends only to itself
};

struct MultiStreamParams {
  std::vector<ModalityParams> modalities;  // one per input sequence, same order
  int heads = 1;
  RopeConfig rope;
  AttentionMode mode = AttentionMode::automatic;
};

struct SingleStreamParams {
  Matrix wq, wk, wv, wo;  // d x d
  FeedForward branch;     // applied to LN(X), added after the attention projection
  int heads = 1;
  RopeConfig rope;
};

struct BlockShape {
  int d = 0;
  int d_inner = 0;
  int heads = 1;
  int rotary_dims = 0;
};

namespace detail {

inline Matrix random_dense(Index rows, Index cols, Rng& rng) {
  return randn(rows, cols, rng, 1.0 / std::sqrt(static_cast<double>(cols)));
}

inline FeedForward make_ffn(const BlockShape& s, Rng& rng) {
  FeedForward f;
  f.norm = {Vector::Ones(s.d), Vector::Zero(s.d), 1e-6};
  f.w1 = random_dense(s.d_inner, s.d, rng);
  f.b1 = Vector::Zero(s.d_inner);
  f.w2 = random_dense(s.d, s.d_inner, rng);
  f.b2 = Vector::Zero(s.d);
  return f;
}

inline void check_shape(const BlockShape& s) {
  require(s.d > 0 && s.d_inner > 0 && s.heads > 0, "block: dimensions must be positive");
  require(s.d % s.heads == 0, "block: model dimension must be divisible by the head count");
  require((s.d / s.heads) % 2 == 0, "block: head dimension must be even for RoPE");
  require(s.rotary_dims >= 0 && s.rotary_dims <= s.d / s.heads, "block: rotary dims exceed head dimension");
}

}  // namespace detail

inline MultiStreamParams make_multistream(const BlockShape& s, int n_modalities, Rng& rng) {
  detail::check_shape(s);
  MultiStreamParams p;
  p.heads = s.heads;
  p.rope.rotary_dims = s.rotary_dims;
  for (int m = 0; m < n_modalities; ++m) {
    ModalityParams mp;
    mp.wq = detail::random_dense(s.d, s.d, rng);
    mp.wk = detail::random_dense(s.d, s.d, rng);
    mp.wv = detail::random_dense(s.d, s.d, rng);
    mp.wo = detail::random_dense(s.d, s.d, rng);
    mp.ffn = detail::make_ffn(s, rng);
    p.modalities.push_back(std::move(mp));
  }
  return p;
}

inline SingleStreamParams make_singlestream(const BlockShape& s, Rng& rng) {
  detail::check_shape(s);
  SingleStreamParams p;
  p.heads = s.heads;
  p.rope.rotary_dims = s.rotary_dims;
  p.wq = detail::random_dense(s.d, s.d, rng);
  p.wk = detail::random_dense(s.d, s.d, rng);
  p.wv = detail::random_dense(s.d, s.d, rng);
  p.wo = detail::random_dense(s.d, s.d, rng);
  p.branch = detail::make_ffn(s, rng);
  return p;
}

// Parameter counts: four d x d projections, plus per FFN/branch a layer
// norm (2d) and W1, b1, W2, b2.
inline long long ffn_param_count(long long d, long long di) { return 2 * d + di * d + di + d * di + d; }
inline long long multistream_param_count(const BlockShape& s, int n_modalities) {
  const long long d = s.d;
  return n_modalities * (4 * d * d + ffn_param_count(d, s.d_inner));
}
inline long long singlestream_param_count(const BlockShape& s) {
  const long long d = s.d;
  return 4 * d * d + ffn_param_count(d, s.d_inner);
}
inline long long stack_param_count(const BlockShape& s, int n_multi, int n_single, int n_modalities) {
  return n_multi * multistream_param_count(s, n_modalities) + n_single * singlestream_param_count(s);
}

inline long long count_params(const FeedForward& f) {
  return f.norm.gamma.size() + f.norm.beta.size() + f.w1.size() + f.b1.size() + f.w2.size() + f.b2.size();
}
inline long long count_params(const MultiStreamParams& p) {
  long long n = 0;
  for (const auto& m : p.modalities) n += m.wq.size() + m.wk.size() + m.wv.size() + m.wo.size() + count_params(m.ffn);
  return n;
}
inline long long count_params(const SingleStreamParams& p) {
  return p.wq.size() + p.wk.size() + p.wv.size() + p.wo.size() + count_params(p.branch);
}

// Production shape: 6 MultiStream + 6 SingleStream blocks.
inline constexpr BlockShape kProductionShape{1024, 4096, 8, 112};
inline constexpr int kProductionMultiStream = 6;
inline constexpr int kProductionSingleStream = 6;

// Per-head attention weights (queries x keys); masked keys are exactly zero.
struct AttentionTrace {
  std::vector<Matrix> weights;
};

// Multi-head scaled dot-product attention. Q, K already carry RoPE. Keys
// with valid == false get zero weight; a query with no valid key yields 0.
// group[i] restricts token i to keys of the same group (independent mode).
inline Matrix masked_attention(const Matrix& q, const Matrix& k, const Matrix& v, const std::vector<bool>& key_valid,
                               const std::vector<int>& group, int heads, AttentionTrace* trace = nullptr) {
  const Index L = q.rows();
  const Index d = q.cols();
  const Index dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Matrix out = Matrix::Zero(L, d);
  if (trace) trace->weights.assign(static_cast<std::size_t>(heads), Matrix::Zero(L, L));
  for (int h = 0; h < heads; ++h) {
    const Index c0 = h * dh;
    const Matrix scores = scale * q.middleCols(c0, dh) * k.middleCols(c0, dh).transpose();
    Matrix w = Matrix::Zero(L, L);
    for (Index i = 0; i < L; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (Index j = 0; j < L; ++j)
        if (key_valid[static_cast<std::size_t>(j)] && group[static_cast<std::size_t>(i)] == group[static_cast<std::size_t>(j)])
          mx = std::max(mx, scores(i, j));
      if (!std::isfinite(mx)) continue;
      double total = 0.0;
      for (Index j = 0; j < L; ++j) {
        if (key_valid[static_cast<std::size_t>(j)] && group[static_cast<std::size_t>(i)] == group[static_cast<std::size_t>(j)]) {
          w(i, j) = std::exp(scores(i, j) - mx);
          total += w(i, j);
        }
      }
      w.row(i) /= total;
    }
    out.middleCols(c0, dh) = w * v.middleCols(c0, dh);
    if (trace) trace->weights[static_cast<std::size_t>(h)] = std::move(w);
  }
  return out;
}

// Applies RoPE head by head.
inline Matrix rope_heads(const Matrix& x, const Vector& positions, const Vector& rates, int heads,
                         const RopeConfig& rope) {
  const Index dh = x.cols() / heads;
  Matrix out(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const Vector p = Vector::Constant(1, positions(i));
    for (int h = 0; h < heads; ++h)
      out.block(i, h * dh, 1, dh) = rope_apply(x.block(i, h * dh, 1, dh), p, rates(i), rope);
  }
  return out;
}

namespace detail {

struct Concat {
  Matrix x;
  Vector positions;
  Vector rates;
  std::vector<bool> valid;
  std::vector<int> modality_index;
  std::vector<Index> offsets;
};

inline Concat concat(const std::vector<ModalitySequence>& seqs) {
  require(!seqs.empty(), "block: no input sequences");
  const Index d = seqs.front().tokens.cols();
  Index total = 0;
  for (const auto& s : seqs) {
    if (s.tokens.cols() != d) throw DomainError("block: modality sequences must share the model dimension");
    require(s.positions.size() == s.length(), "block: one position per token required");
    require(s.valid.empty() || static_cast<Index>(s.valid.size()) == s.length(), "block: validity mask length mismatch");
    require(s.tokens.allFinite() && s.positions.allFinite(), "block: non-finite input");
    for (Index i = 1; i < s.length(); ++i)
      require(s.positions(i) >= s.positions(i - 1), "block: positions must be nondecreasing");
    total += s.length();
  }
  Concat c;
  c.x.resize(total, d);
  c.positions.resize(total);
  c.rates.resize(total);
  Index off = 0;
  for (std::size_t m = 0; m < seqs.size(); ++m) {
    const auto& s = seqs[m];
    c.offsets.push_back(off);
    c.x.middleRows(off, s.length()) = s.tokens;
    c.positions.segment(off, s.length()) = s.positions;
    c.rates.segment(off, s.length()).setConstant(rope_rate(s.modality));
    for (Index i = 0; i < s.length(); ++i) {
      c.valid.push_back(s.is_valid(i));
      c.modality_index.push_back(static_cast<int>(m));
    }
    off += s.length();
  }
  c.offsets.push_back(off);
  return c;
}

// Invalid video tokens go back to the fixed zero embedding.
inline void reset_invalid(ModalitySequence& s) {
  if (s.modality != Modality::video) return;
  for (Index i = 0; i < s.length(); ++i)
    if (!s.is_valid(i)) s.tokens.row(i).setZero();
}

}  // namespace detail

inline bool uses_joint_attention(const MultiStreamParams& p, std::size_t n_modalities) {
  if (p.mode == AttentionMode::automatic) return n_modalities >= 3;
  return p.mode == AttentionMode::joint;
}

// Q_m = X_m W^Q_m (likewise K, V), attention over the joint (or per-modality)
// sequence, Z_m = attn_m W^O_m, Y_m = (X_m + Z_m) + FFN_m(LN(X_m + Z_m)).
inline std::vector<ModalitySequence> multistream_block(const std::vector<ModalitySequence>& seqs,
                                                       const MultiStreamParams& params,
                                                       AttentionTrace* trace = nullptr) {
  if (params.modalities.size() != seqs.size())
    throw DomainError("multistream_block: expected " + std::to_string(params.modalities.size()) +
                      " modality sequences, got " + std::to_string(seqs.size()));
  const detail::Concat c = detail::concat(seqs);
  const Index d = c.x.cols();
  require(params.heads > 0 && d % params.heads == 0, "multistream_block: d must be divisible by the head count");
  Matrix q(c.x.rows(), d), k(c.x.rows(), d), v(c.x.rows(), d);
  for (std::size_t m = 0; m < seqs.size(); ++m) {
    const auto& mp = params.modalities[m];
    if (mp.wq.rows() != d || mp.wq.cols() != d)
      throw DomainError("multistream_block: projection shape does not match model dimension");
    const Index off = c.offsets[m], len = seqs[m].length();
    q.middleRows(off, len) = seqs[m].tokens * mp.wq;
    k.middleRows(off, len) = seqs[m].tokens * mp.wk;
    v.middleRows(off, len) = seqs[m].tokens * mp.wv;
  }
  q = rope_heads(q, c.positions, c.rates, params.heads, params.rope);
  k = rope_heads(k, c.positions, c.rates, params.heads, params.rope);
  std::vector<int> group = c.modality_index;
  if (uses_joint_attention(params, seqs.size())) std::fill(group.begin(), group.end(), 0);
  const Matrix attn = masked_attention(q, k, v, c.valid, group, params.heads, trace);

  std::vector<ModalitySequence> out = seqs;
  for (std::size_t m = 0; m < seqs.size(); ++m) {
    const auto& mp = params.modalities[m];
    const Matrix h = seqs[m].tokens + attn.middleRows(c.offsets[m], seqs[m].length()) * mp.wo;
    out[m].tokens = h + feed_forward(layer_norm(h, mp.ffn.norm), mp.ffn);
    detail::reset_invalid(out[m]);
  }
  return out;
}

// One attention over the time-concatenated sequences with shared weights;
// Y = X + attn(X) W^O + branch(LN(X)). Returns the sequences split back.
inline std::vector<ModalitySequence> singlestream_block(const std::vector<ModalitySequence>& seqs,
                                                        const SingleStreamParams& params,
                                                        AttentionTrace* trace = nullptr) {
  const detail::Concat c = detail::concat(seqs);
  const Index d = c.x.cols();
  if (params.wq.rows() != d || params.wq.cols() != d)
    throw DomainError("singlestream_block: projection shape does not match model dimension");
  require(params.heads > 0 && d % params.heads == 0, "singlestream_block: d must be divisible by the head count");
  const Matrix q = rope_heads(c.x * params.wq, c.positions, c.rates, params.heads, params.rope);
  const Matrix k = rope_heads(c.x * params.wk, c.positions, c.rates, params.heads, params.rope);
  const Matrix v = c.x * params.wv;
  const std::vector<int> group(c.valid.size(), 0);
  const Matrix attn = masked_attention(q, k, v, c.valid, group, params.heads, trace);
  const Matrix y = c.x + attn * params.wo + feed_forward(layer_norm(c.x, params.branch.norm), params.branch);

  std::vector<ModalitySequence> out = seqs;
  for (std::size_t m = 0; m < seqs.size(); ++m) {
    out[m].tokens = y.middleRows(c.offsets[m], seqs[m].length());
    detail::reset_invalid(out[m]);
  }
  return out;
}

struct BlockStack {
  std::vector<MultiStreamParams> multi;
  std::vector<SingleStreamParams> single;
};

inline BlockStack make_stack(const BlockShape& s, int n_multi, int n_single, int n_modalities, Rng& rng) {
  BlockStack st;
  for (int i = 0; i < n_multi; ++i) st.multi.push_back(make_multistream(s, n_modalities, rng));
  for (int i = 0; i < n_single; ++i) st.single.push_back(make_singlestream(s, rng));
  return st;
}

inline long long count_params(const BlockStack& st) {
  long long n = 0;
  for (const auto& m : st.multi) n += count_params(m);
  for (const auto& s : st.single) n += count_params(s);
  return n;
}

inline std::vector<ModalitySequence> run_stack(std::vector<ModalitySequence> seqs, const BlockStack& st) {
  for (const auto& m : st.multi) seqs = multistream_block(seqs, m);
  for (const auto& s : st.single) seqs = singlestream_block(seqs, s);
  return seqs;
}

}  // namespace sfx
