#pragma once

// Linear data-to-noise paths and the training objectives built on them:
// flow matching, average-velocity (MeanFlow) matching, and its distillation
// variants with guidance baked into the teacher target.

#include "sfx/losses.hpp"
#include "sfx/net.hpp"

#include <limits>
#include <optional>
#include <utility>
#include <vector>

namespace sfx {

inline constexpr double kMinTime = 0.001;

// x_t = (1 - t) x0 + t x1, target velocity x1 - x0; one row per sample.
struct PathSample {
  Matrix x0;
  Matrix x1;
  Vector t;
  Matrix xt;
  Matrix v_target;
};

inline Matrix interpolate(const Matrix& x0, const Matrix& x1, const Vector& t) {
  require(x0.rows() == x1.rows() && x0.cols() == x1.cols() && t.size() == x0.rows(), "interpolate: shape mismatch");
  Matrix xt(x0.rows(), x0.cols());
  for (Index i = 0; i < x0.rows(); ++i) xt.row(i) = (1.0 - t(i)) * x0.row(i) + t(i) * x1.row(i);
  return xt;
}

inline PathSample make_path(Matrix x0, Matrix x1, Vector t) {
  PathSample p;
  p.xt = interpolate(x0, x1, t);
  p.v_target = x1 - x0;
  p.x0 = std::move(x0);
  p.x1 = std::move(x1);
  p.t = std::move(t);
  return p;
}

// t ~ U(0.001, 1), x1 ~ N(0, I).
inline PathSample sample_path(const Matrix& x0, Rng& rng) {
  require(x0.allFinite(), "sample_path: non-finite data");
  Vector t(x0.rows());
  for (Index i = 0; i < t.size(); ++i) t(i) = uniform(rng, kMinTime, 1.0);
  Matrix x1 = randn(x0.rows(), x0.cols(), rng);
  return make_path(x0, std::move(x1), std::move(t));
}

// Draws (t, r) with 0 <= r <= t: t ~ U(t_min, 1); r = t with probability
// p_equal, otherwise r ~ U(0, t).
struct TrScheduler {
  double t_min = kMinTime;
  double t_max = 1.0;
  double p_equal = 0.5;

  std::pair<double, double> sample(Rng& rng) const {
    const double t = uniform(rng, t_min, t_max);
    const double u = uniform(rng);
    const double r = u < p_equal ? t : uniform(rng, 0.0, t);
    return {t, r};
  }

  std::pair<Vector, Vector> sample(Index n, Rng& rng) const {
    Vector t(n), r(n);
    for (Index i = 0; i < n; ++i) std::tie(t(i), r(i)) = sample(rng);
    return {t, r};
  }
};

struct LossResult {
  double loss = 0.0;
  Parameters grads;
};

// Mean squared error between u(x_t, t, r = t) and x1 - x0.
inline LossResult fm_loss(const VelocityModel& model, const PathSample& path, const std::vector<int>& cond) {
  const Batch batch{path.xt, path.t, path.t, cond};
  const Matrix u = forward(model, batch);
  const Matrix diff = u - path.v_target;
  const double n = static_cast<double>(diff.size());
  LossResult res;
  res.loss = diff.squaredNorm() / n;
  res.grads = backward(model, batch, (2.0 / n) * diff).grads;
  return res;
}

struct MeanFlowResult {
  double loss = 0.0;
  Parameters grads;
  Matrix u;         // model output at (x_t, t, r)
  Matrix du_dt;     // total derivative along the (v_target, 1, 0) tangent
  Matrix residual;  // u - v_target + (t - r) du/dt before clipping
  Matrix g;         // clipped, detached residual
};

inline constexpr double kNoClip = std::numeric_limits<double>::infinity();

// Stop-gradient average-velocity objective: the value is mean(g^2) with
// g = clip(u - v + (t - r) du/dt, -c, c) held constant, and the gradient is
// that of mean((u - sg(u) + g)^2), i.e. (2/n) g du/dtheta.
inline MeanFlowResult meanflow_objective(const VelocityModel& model, const Batch& batch, const Matrix& v_target,
                                         double clip = 1.0, bool with_grads = true) {
  require(v_target.rows() == batch.x.rows() && v_target.cols() == batch.x.cols(),
          "meanflow_objective: target shape mismatch");
  require(clip > 0.0, "meanflow_objective: clip bound must be positive");
  const JvpResult jr = jvp(model, batch, Tangent{v_target, 1.0, 0.0});
  MeanFlowResult res;
  res.u = jr.value;
  res.du_dt = jr.derivative;
  res.residual = res.u - v_target;
  for (Index i = 0; i < res.residual.rows(); ++i)
    res.residual.row(i) += (batch.t(i) - batch.r(i)) * res.du_dt.row(i);
  res.g = res.residual.cwiseMax(-clip).cwiseMin(clip);
  const double n = static_cast<double>(res.g.size());
  res.loss = res.g.squaredNorm() / n;
  if (with_grads) res.grads = backward(model, batch, (2.0 / n) * res.g).grads;
  return res;
}

// From-scratch variant: target velocity x1 - x0, given per-row (t, r).
inline MeanFlowResult meanflow_loss(const VelocityModel& model, const Matrix& x0, const Matrix& x1, const Vector& t,
                                    const Vector& r, const std::vector<int>& cond, double clip = 1.0) {
  require(r.size() == t.size(), "meanflow_loss: t/r size mismatch");
  for (Index i = 0; i < t.size(); ++i) require(r(i) <= t(i) && r(i) >= 0.0, "meanflow_loss: need 0 <= r <= t");
  const Batch batch{interpolate(x0, x1, t), t, r, cond};
  return meanflow_objective(model, batch, x1 - x0, clip);
}

inline MeanFlowResult meanflow_loss(const VelocityModel& model, const Matrix& x0, const TrScheduler& scheduler,
                                    const std::vector<int>& cond, Rng& rng, double clip = 1.0) {
  const Matrix x1 = randn(x0.rows(), x0.cols(), rng);
  auto [t, r] = scheduler.sample(x0.rows(), rng);
  return meanflow_loss(model, x0, x1, t, r, cond, clip);
}

struct CfgDistillOptions {
  double scale_min = 1.0;
  double scale_max = 9.0;
  double drop_prob = 0.1;
  CfgMode mode = CfgMode::standard;
};

// Replaces each id by the null id with probability drop_prob.
inline std::vector<int> drop_conditions(const std::vector<int>& cond, double drop_prob, int null_id, Rng& rng) {
  std::vector<int> out = cond;
  for (int& c : out)
    if (uniform(rng) < drop_prob) c = null_id;
  return out;
}

// Teacher velocity at (x_t, t); with guidance options, per-row guidance
// scales w ~ U[scale_min, scale_max] mix conditional and null-condition calls.
inline Matrix teacher_target(const VelocityModel& teacher, const Matrix& xt, const Vector& t,
                             const std::vector<int>& cond, const std::optional<CfgDistillOptions>& cfg,
                             const Vector* scales = nullptr) {
  const Batch cond_batch{xt, t, t, cond};
  const Matrix v_cond = forward(teacher, cond_batch);
  if (!cfg) return v_cond;
  const std::vector<int> null_cond(cond.size(), teacher.config.null_class());
  const Matrix v_uncond = forward(teacher, Batch{xt, t, t, null_cond});
  require(scales && scales->size() == xt.rows(), "teacher_target: missing guidance scales");
  Matrix out(xt.rows(), xt.cols());
  for (Index i = 0; i < xt.rows(); ++i)
    out.row(i) = cfg_combine(v_cond.row(i), v_uncond.row(i), (*scales)(i), cfg->mode);
  return out;
}

struct DistillBatch {
  Batch batch;  // (x_t, t, r, possibly dropped cond)
  Matrix v_target;
};

// Builds the distillation inputs: condition dropout, guidance scales, and
// the frozen teacher's (guided) velocity at (x_t, t).
inline DistillBatch make_distill_batch(const VelocityModel& teacher, const Matrix& x0, const Matrix& x1,
                                       const Vector& t, const Vector& r, const std::vector<int>& cond,
                                       const std::optional<CfgDistillOptions>& cfg, Rng& rng) {
  DistillBatch db;
  std::vector<int> c = cond;
  Vector scales;
  if (cfg) {
    require(cfg->scale_min <= cfg->scale_max, "distill: empty guidance range");
    c = drop_conditions(cond, cfg->drop_prob, teacher.config.null_class(), rng);
    scales.resize(x0.rows());
    for (Index i = 0; i < scales.size(); ++i) scales(i) = uniform(rng, cfg->scale_min, cfg->scale_max);
  }
  const Matrix xt = interpolate(x0, x1, t);
  db.v_target = teacher_target(teacher, xt, t, c, cfg, cfg ? &scales : nullptr);
  db.batch = Batch{xt, t, r, std::move(c)};
  return db;
}

inline MeanFlowResult meanflow_distill_loss(const VelocityModel& student, const VelocityModel& teacher,
                                            const Matrix& x0, const Matrix& x1, const Vector& t, const Vector& r,
                                            const std::vector<int>& cond,
                                            const std::optional<CfgDistillOptions>& cfg, Rng& rng,
                                            double clip = 1.0) {
  require(student.config.state_dim == teacher.config.state_dim, "distill: student/teacher state dims differ");
  const DistillBatch db = make_distill_batch(teacher, x0, x1, t, r, cond, cfg, rng);
  return meanflow_objective(student, db.batch, db.v_target, clip);
}

}  // namespace sfx
