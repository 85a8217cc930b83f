#pragma once

// Dense velocity network u(x, t, r, c) with exact reverse-mode gradients,
// exact forward-mode directional derivatives, Adam with warmup, global-norm
// clipping and EMA, and a lossless textual checkpoint format.

#include "sfx/core.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace sfx {

struct Dense {
  Matrix w;  // out x in
  Vector b;  // out
};

struct ModelConfig {
  int state_dim = 2;
  int time_features = 32;  // sinusoidal features per time input (sin/cos pairs)
  double max_frequency = 100.0;
  int time_embed_dim = 32;
  bool use_r = false;  // joint (t, r) embedding for average-velocity models
  int num_classes = 0;  // 0 = unconditional; otherwise row num_classes is the null condition
  int cond_dim = 16;
  int hidden = 128;
  int depth = 3;  // hidden layers

  int time_input_dim() const { return use_r ? 2 * time_features : time_features; }
  int cond_input_dim() const { return num_classes > 0 ? cond_dim : 0; }
  int mlp_input_dim() const { return state_dim + time_embed_dim + cond_input_dim(); }
  int null_class() const { return num_classes; }

  bool operator==(const ModelConfig&) const = default;
};

inline void validate(const ModelConfig& c) {
  if (c.state_dim < 1 || c.time_features < 2 || c.time_features % 2 != 0 || c.time_embed_dim < 1 ||
      c.hidden < 1 || c.depth < 1 || c.num_classes < 0 || (c.num_classes > 0 && c.cond_dim < 1) ||
      !(c.max_frequency >= 1.0))
    throw ConfigError("invalid model configuration");
}

struct Parameters {
  Dense time_embed;
  Matrix cond_table;  // (num_classes + 1) x cond_dim, empty when unconditional
  std::vector<Dense> layers;

  template <class F>
  void for_each(F&& f) {
    f(time_embed.w);
    f(time_embed.b);
    f(cond_table);
    for (auto& l : layers) {
      f(l.w);
      f(l.b);
    }
  }
  template <class F>
  void for_each(F&& f) const {
    f(time_embed.w);
    f(time_embed.b);
    f(cond_table);
    for (const auto& l : layers) {
      f(l.w);
      f(l.b);
    }
  }

  Index size() const {
    Index n = 0;
    for_each([&n](const auto& m) { n += m.size(); });
    return n;
  }

  Parameters zeros_like() const {
    Parameters z = *this;
    z.for_each([](auto& m) { m.setZero(); });
    return z;
  }
};

inline Vector flatten(const Parameters& p) {
  Vector out(p.size());
  Index off = 0;
  p.for_each([&](const auto& m) {
    out.segment(off, m.size()) = Eigen::Map<const Vector>(m.data(), m.size());
    off += m.size();
  });
  return out;
}

inline void unflatten(Parameters& p, const Vector& flat) {
  require(flat.size() == p.size(), "unflatten: size mismatch");
  Index off = 0;
  p.for_each([&](auto& m) {
    Eigen::Map<Vector>(m.data(), m.size()) = flat.segment(off, m.size());
    off += m.size();
  });
}

struct VelocityModel {
  ModelConfig config;
  Parameters params;
};

inline VelocityModel make_model(const ModelConfig& config, Rng& rng) {
  validate(config);
  VelocityModel model;
  model.config = config;
  auto dense = [&rng](int out, int in) {
    return Dense{randn(out, in, rng, 1.0 / std::sqrt(static_cast<double>(in))), Vector::Zero(out)};
  };
  model.params.time_embed = dense(config.time_embed_dim, config.time_input_dim());
  if (config.num_classes > 0) model.params.cond_table = randn(config.num_classes + 1, config.cond_dim, rng);
  int in = config.mlp_input_dim();
  for (int l = 0; l < config.depth; ++l) {
    model.params.layers.push_back(dense(config.hidden, in));
    in = config.hidden;
  }
  model.params.layers.push_back(dense(config.state_dim, in));
  return model;
}

// Batch inputs: x is B x state_dim; t, r hold one time per row; cond holds a
// class id per row (-1 or num_classes selects the null condition).
struct Batch {
  Matrix x;
  Vector t;
  Vector r;
  std::vector<int> cond;

  Index size() const { return x.rows(); }
};

inline Batch single(const Vector& x, double t, double r, int cond = -1) {
  Batch b;
  b.x = x.transpose();
  b.t = Vector::Constant(1, t);
  b.r = Vector::Constant(1, r);
  b.cond = {cond};
  return b;
}

namespace detail {

inline Vector time_frequencies(const ModelConfig& c) {
  const int k = c.time_features / 2;
  Vector w(k);
  for (int i = 0; i < k; ++i)
    w(i) = k == 1 ? 1.0 : std::pow(c.max_frequency, static_cast<double>(i) / (k - 1));
  return w;
}

// Sinusoidal features and their derivative w.r.t. the time input.
inline void time_features(const ModelConfig& c, const Vector& times, Matrix& phi, Matrix& dphi, Index col0) {
  const Vector w = time_frequencies(c);
  const Index k = w.size();
  for (Index b = 0; b < times.size(); ++b) {
    for (Index i = 0; i < k; ++i) {
      const double a = w(i) * times(b);
      phi(b, col0 + i) = std::sin(a);
      phi(b, col0 + k + i) = std::cos(a);
      dphi(b, col0 + i) = w(i) * std::cos(a);
      dphi(b, col0 + k + i) = -w(i) * std::sin(a);
    }
  }
}

inline double silu(double z) { return z * sigmoid(z); }
inline double silu_grad(double z) {
  const double s = sigmoid(z);
  return s * (1.0 + z * (1.0 - s));
}

struct ForwardCache {
  Matrix phi;   // B x time_input_dim
  Matrix dphi;  // derivative of phi; t columns first, then r columns
  std::vector<int> cond_rows;
  std::vector<Matrix> inputs;  // inputs[l] feeds layer l
  std::vector<Matrix> pre;     // pre-activations z_l
  Matrix output;
};

inline int cond_row(const ModelConfig& c, int id) {
  if (id < 0 || id >= c.num_classes) {
    if (id != -1 && id != c.num_classes) throw DomainError("condition id out of range: " + std::to_string(id));
    return c.num_classes;
  }
  return id;
}

inline void check_batch(const VelocityModel& m, const Batch& b) {
  require(b.x.cols() == m.config.state_dim, "velocity model: state dimension mismatch");
  require(b.x.rows() >= 1, "velocity model: empty batch");
  require(b.t.size() == b.x.rows() && b.r.size() == b.x.rows(), "velocity model: time vector size mismatch");
  require(b.cond.size() == static_cast<std::size_t>(b.x.rows()), "velocity model: condition vector size mismatch");
}

inline ForwardCache forward_cached(const VelocityModel& model, const Batch& batch) {
  check_batch(model, batch);
  const ModelConfig& c = model.config;
  const Parameters& p = model.params;
  const Index B = batch.size();
  ForwardCache cache;
  cache.phi.resize(B, c.time_input_dim());
  cache.dphi.resize(B, c.time_input_dim());
  time_features(c, batch.t, cache.phi, cache.dphi, 0);
  if (c.use_r) time_features(c, batch.r, cache.phi, cache.dphi, c.time_features);

  Matrix h0(B, c.mlp_input_dim());
  h0.leftCols(c.state_dim) = batch.x;
  Matrix emb = cache.phi * p.time_embed.w.transpose();
  emb.rowwise() += p.time_embed.b.transpose();
  h0.middleCols(c.state_dim, c.time_embed_dim) = emb;
  if (c.num_classes > 0) {
    cache.cond_rows.resize(static_cast<std::size_t>(B));
    for (Index b = 0; b < B; ++b) {
      const int row = cond_row(c, batch.cond[static_cast<std::size_t>(b)]);
      cache.cond_rows[static_cast<std::size_t>(b)] = row;
      h0.block(b, c.state_dim + c.time_embed_dim, 1, c.cond_dim) = p.cond_table.row(row);
    }
  }

  const std::size_t L = p.layers.size();
  cache.inputs.reserve(L);
  cache.pre.reserve(L);
  cache.inputs.push_back(std::move(h0));
  for (std::size_t l = 0; l < L; ++l) {
    Matrix z = cache.inputs[l] * p.layers[l].w.transpose();
    z.rowwise() += p.layers[l].b.transpose();
    cache.pre.push_back(z);
    if (l + 1 < L) cache.inputs.push_back(z.unaryExpr(&silu));
  }
  cache.output = cache.pre.back();
  return cache;
}

// Reverse pass starting from the gradient w.r.t. pre-activation z_top.
inline Matrix backprop_layers(const VelocityModel& model, const ForwardCache& cache, Matrix dz, std::size_t top,
                              Parameters* grads) {
  const Parameters& p = model.params;
  for (std::size_t l = top + 1; l-- > 0;) {
    if (grads) {
      grads->layers[l].w.noalias() += dz.transpose() * cache.inputs[l];
      grads->layers[l].b += dz.colwise().sum().transpose();
    }
    Matrix dh = dz * p.layers[l].w;
    if (l == 0) return dh;
    dz = dh.cwiseProduct(cache.pre[l - 1].unaryExpr(&silu_grad));
  }
  return {};
}

// Distributes the gradient w.r.t. the MLP input into embedding parameters
// and returns the part that belongs to x.
inline Matrix backprop_inputs(const VelocityModel& model, const ForwardCache& cache, const Matrix& dh0,
                              Parameters* grads) {
  const ModelConfig& c = model.config;
  if (grads) {
    const Matrix d_emb = dh0.middleCols(c.state_dim, c.time_embed_dim);
    grads->time_embed.w.noalias() += d_emb.transpose() * cache.phi;
    grads->time_embed.b += d_emb.colwise().sum().transpose();
    if (c.num_classes > 0) {
      for (Index b = 0; b < dh0.rows(); ++b)
        grads->cond_table.row(cache.cond_rows[static_cast<std::size_t>(b)]) +=
            dh0.block(b, c.state_dim + c.time_embed_dim, 1, c.cond_dim);
    }
  }
  return dh0.leftCols(c.state_dim);
}

}  // namespace detail

inline Matrix forward(const VelocityModel& model, const Batch& batch) {
  return detail::forward_cached(model, batch).output;
}

inline Vector forward(const VelocityModel& model, const Vector& x, double t, double r, int cond = -1) {
  return forward(model, single(x, t, r, cond)).row(0).transpose();
}

struct GradTape {
  Parameters grads;
  Matrix d_x;  // gradient w.r.t. the state input
};

// Exact gradients of sum(output .* upstream) w.r.t. parameters and x.
inline GradTape backward(const VelocityModel& model, const Batch& batch, const Matrix& upstream) {
  const auto cache = detail::forward_cached(model, batch);
  require(upstream.rows() == cache.output.rows() && upstream.cols() == cache.output.cols(),
          "backward: upstream shape mismatch");
  GradTape tape;
  tape.grads = model.params.zeros_like();
  const Matrix dh0 = detail::backprop_layers(model, cache, upstream, model.params.layers.size() - 1, &tape.grads);
  tape.d_x = detail::backprop_inputs(model, cache, dh0, &tape.grads);
  return tape;
}

struct Tangent {
  Matrix dx;
  double dt = 0.0;
  double dr = 0.0;
};

struct JvpResult {
  Matrix value;
  Matrix derivative;
};

// Value and directional derivative along (dx, dt, dr), by dual-number
// propagation through the embeddings and every layer.
inline JvpResult jvp(const VelocityModel& model, const Batch& batch, const Tangent& tangent) {
  const auto cache = detail::forward_cached(model, batch);
  const ModelConfig& c = model.config;
  const Parameters& p = model.params;
  require(tangent.dx.rows() == batch.x.rows() && tangent.dx.cols() == batch.x.cols(), "jvp: tangent shape mismatch");

  Matrix dphi = cache.dphi;
  dphi.leftCols(c.time_features) *= tangent.dt;
  if (c.use_r) dphi.rightCols(c.time_features) *= tangent.dr;

  Matrix dh(batch.size(), c.mlp_input_dim());
  dh.setZero();
  dh.leftCols(c.state_dim) = tangent.dx;
  dh.middleCols(c.state_dim, c.time_embed_dim) = dphi * p.time_embed.w.transpose();

  const std::size_t L = p.layers.size();
  for (std::size_t l = 0; l < L; ++l) {
    Matrix dz = dh * p.layers[l].w.transpose();
    if (l + 1 == L) return {cache.output, dz};
    dh = dz.cwiseProduct(cache.pre[l].unaryExpr(&detail::silu_grad));
  }
  return {};
}

// Post-activation output of the last hidden layer, B x hidden.
inline Matrix hidden_features(const VelocityModel& model, const Batch& batch) {
  return detail::forward_cached(model, batch).inputs.back();
}

// Gradient w.r.t. x of sum(hidden_features .* upstream); parameters untouched.
inline Matrix hidden_input_gradient(const VelocityModel& model, const Batch& batch, const Matrix& upstream) {
  const auto cache = detail::forward_cached(model, batch);
  const std::size_t top = model.params.layers.size() - 2;
  require(upstream.rows() == cache.inputs.back().rows() && upstream.cols() == cache.inputs.back().cols(),
          "hidden_input_gradient: upstream shape mismatch");
  Matrix dz = upstream.cwiseProduct(cache.pre[top].unaryExpr(&detail::silu_grad));
  const Matrix dh0 = detail::backprop_layers(model, cache, std::move(dz), top, nullptr);
  return dh0.leftCols(model.config.state_dim);
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long long warmup_steps = 1000;
  double clip_norm = 1.0;  // <= 0 disables clipping
  double ema_decay = 0.999;
};

struct OptimizerState {
  AdamConfig config;
  Vector m;
  Vector v;
  Vector ema;
  long long step = 0;

  static OptimizerState init(const Vector& params, const AdamConfig& config) {
    if (!(config.ema_decay > 0.0 && config.ema_decay < 1.0)) throw ConfigError("EMA decay must lie in (0, 1)");
    if (!(config.lr > 0.0)) throw ConfigError("learning rate must be positive");
    OptimizerState s;
    s.config = config;
    s.m = Vector::Zero(params.size());
    s.v = Vector::Zero(params.size());
    s.ema = params;
    return s;
  }
  static OptimizerState init(const VelocityModel& model, const AdamConfig& config) {
    return init(flatten(model.params), config);
  }
};

// Linear warmup: lr * min(1, step / warmup_steps) for 1-based step.
inline double scheduled_lr(const AdamConfig& c, long long step) {
  if (c.warmup_steps <= 0) return c.lr;
  return c.lr * std::min(1.0, static_cast<double>(step) / static_cast<double>(c.warmup_steps));
}

struct StepReport {
  bool applied = false;
  double grad_norm = 0.0;
  double clip_scale = 1.0;
  double lr = 0.0;
  std::string error;
};

inline StepReport adam_step(OptimizerState& s, Vector& params, const Vector& grads) {
  require(params.size() == s.m.size() && grads.size() == s.m.size(), "adam_step: parameter shape mismatch");
  StepReport rep;
  rep.grad_norm = grads.norm();
  if (!std::isfinite(rep.grad_norm)) {
    rep.error = "non-finite gradient at step " + std::to_string(s.step + 1) + "; update skipped";
    return rep;
  }
  const AdamConfig& c = s.config;
  if (c.clip_norm > 0.0 && rep.grad_norm > c.clip_norm) rep.clip_scale = c.clip_norm / rep.grad_norm;
  const Vector g = grads * rep.clip_scale;

  ++s.step;
  rep.lr = scheduled_lr(c, s.step);
  s.m = c.beta1 * s.m + (1.0 - c.beta1) * g;
  s.v = c.beta2 * s.v + (1.0 - c.beta2) * g.cwiseProduct(g);
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(s.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(s.step));
  params.array() -= rep.lr * (s.m.array() / bc1) / ((s.v.array() / bc2).sqrt() + c.eps);
  s.ema = c.ema_decay * s.ema + (1.0 - c.ema_decay) * params;
  rep.applied = true;
  return rep;
}

inline StepReport adam_step(OptimizerState& s, VelocityModel& model, const Parameters& grads) {
  Vector flat = flatten(model.params);
  StepReport rep = adam_step(s, flat, flatten(grads));
  if (rep.applied) unflatten(model.params, flat);
  return rep;
}

inline VelocityModel ema_model(const VelocityModel& model, const OptimizerState& s) {
  VelocityModel out = model;
  unflatten(out.params, s.ema);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: a versioned text dump with hexadecimal floats, so that
// save -> load reproduces every parameter bit-exactly.

inline constexpr const char* kCheckpointMagic = "sfxflow-checkpoint";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  VelocityModel model;
  std::optional<OptimizerState> optimizer;
};

namespace detail {

inline void write_array(std::ostream& os, const std::string& name, const double* data, Index rows, Index cols) {
  os << "array " << name << ' ' << rows << ' ' << cols << '\n';
  os << std::hexfloat;
  for (Index i = 0; i < rows * cols; ++i) os << data[i] << (i + 1 == rows * cols || (i + 1) % 8 == 0 ? '\n' : ' ');
  os << std::defaultfloat;
}

inline std::string hex(double v) {
  std::ostringstream os;
  os << std::hexfloat << v;
  return os.str();
}

inline double parse_double(const std::string& s, const std::string& what) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') throw IoError("checkpoint: malformed number for " + what + ": " + s);
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const VelocityModel& model,
                            const OptimizerState* opt = nullptr) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write checkpoint: " + path.string());
  const ModelConfig& c = model.config;
  os << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
  os << "config state_dim=" << c.state_dim << " time_features=" << c.time_features
     << " max_frequency=" << detail::hex(c.max_frequency) << " time_embed_dim=" << c.time_embed_dim
     << " use_r=" << (c.use_r ? 1 : 0) << " num_classes=" << c.num_classes << " cond_dim=" << c.cond_dim
     << " hidden=" << c.hidden << " depth=" << c.depth << '\n';
  int idx = 0;
  model.params.for_each([&](const auto& m) {
    detail::write_array(os, "param" + std::to_string(idx++), m.data(), m.rows(), m.cols());
  });
  if (opt) {
    const AdamConfig& a = opt->config;
    os << "optimizer step=" << opt->step << " lr=" << detail::hex(a.lr) << " beta1=" << detail::hex(a.beta1)
       << " beta2=" << detail::hex(a.beta2) << " eps=" << detail::hex(a.eps) << " warmup_steps=" << a.warmup_steps
       << " clip_norm=" << detail::hex(a.clip_norm) << " ema_decay=" << detail::hex(a.ema_decay) << '\n';
    detail::write_array(os, "adam_m", opt->m.data(), opt->m.size(), 1);
    detail::write_array(os, "adam_v", opt->v.data(), opt->v.size(), 1);
    detail::write_array(os, "ema", opt->ema.data(), opt->ema.size(), 1);
  }
  os << "end\n";
  if (!os) throw IoError("write failed: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  auto fail = [&](const std::string& what) { throw IoError("checkpoint " + path.string() + ": " + what); };

  std::string magic;
  int version = 0;
  in >> magic >> version;
  if (magic != kCheckpointMagic) fail("bad magic");
  if (version != kCheckpointVersion) fail("unsupported version " + std::to_string(version));

  auto read_kv = [&](const std::string& tag) {
    std::string word;
    in >> word;
    if (word != tag) fail("expected '" + tag + "', got '" + word + "'");
    std::string line;
    std::getline(in, line);
    std::istringstream ls(line);
    std::map<std::string, std::string> kv;
    std::string item;
    while (ls >> item) {
      const auto eq = item.find('=');
      if (eq == std::string::npos) fail("malformed key=value: " + item);
      kv[item.substr(0, eq)] = item.substr(eq + 1);
    }
    return kv;
  };
  auto get = [&](const std::map<std::string, std::string>& kv, const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) fail("missing key " + key);
    return it->second;
  };
  auto read_array = [&](const std::string& name, Index rows, Index cols, double* out) {
    std::string word, got;
    Index r = 0, c = 0;
    in >> word >> got >> r >> c;
    if (word != "array" || got != name) fail("expected array " + name);
    if (r != rows || c != cols) fail("shape mismatch for " + name);
    std::string tok;
    for (Index i = 0; i < rows * cols; ++i) {
      if (!(in >> tok)) fail("truncated array " + name);
      out[i] = detail::parse_double(tok, name);
    }
  };

  const auto ckv = read_kv("config");
  ModelConfig c;
  c.state_dim = std::stoi(get(ckv, "state_dim"));
  c.time_features = std::stoi(get(ckv, "time_features"));
  c.max_frequency = detail::parse_double(get(ckv, "max_frequency"), "max_frequency");
  c.time_embed_dim = std::stoi(get(ckv, "time_embed_dim"));
  c.use_r = get(ckv, "use_r") == "1";
  c.num_classes = std::stoi(get(ckv, "num_classes"));
  c.cond_dim = std::stoi(get(ckv, "cond_dim"));
  c.hidden = std::stoi(get(ckv, "hidden"));
  c.depth = std::stoi(get(ckv, "depth"));

  Rng rng(0);
  Checkpoint ck;
  ck.model = make_model(c, rng);
  int idx = 0;
  ck.model.params.for_each([&](auto& m) { read_array("param" + std::to_string(idx++), m.rows(), m.cols(), m.data()); });

  std::string word;
  in >> word;
  if (word == "optimizer") {
    std::string line;
    std::getline(in, line);
    std::istringstream ls(line);
    std::map<std::string, std::string> kv;
    std::string item;
    while (ls >> item) {
      const auto eq = item.find('=');
      if (eq == std::string::npos) fail("malformed key=value: " + item);
      kv[item.substr(0, eq)] = item.substr(eq + 1);
    }
    AdamConfig a;
    a.lr = detail::parse_double(get(kv, "lr"), "lr");
    a.beta1 = detail::parse_double(get(kv, "beta1"), "beta1");
    a.beta2 = detail::parse_double(get(kv, "beta2"), "beta2");
    a.eps = detail::parse_double(get(kv, "eps"), "eps");
    a.warmup_steps = std::stoll(get(kv, "warmup_steps"));
    a.clip_norm = detail::parse_double(get(kv, "clip_norm"), "clip_norm");
    a.ema_decay = detail::parse_double(get(kv, "ema_decay"), "ema_decay");
    OptimizerState s;
    s.config = a;
    s.step = std::stoll(get(kv, "step"));
    const Index n = ck.model.params.size();
    s.m.resize(n);
    s.v.resize(n);
    s.ema.resize(n);
    read_array("adam_m", n, 1, s.m.data());
    read_array("adam_v", n, 1, s.v.data());
    read_array("ema", n, 1, s.ema.data());
    ck.optimizer = std::move(s);
    in >> word;
  }
  if (word != "end") fail("missing end marker");
  return ck;
}

}  // namespace sfx
