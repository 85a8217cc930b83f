#pragma once

// Few-step distillation of a flow-matching teacher into an average-velocity
// student, with an adversarial term from a discriminator built on the frozen
// teacher's hidden features.

#include "sfx/flow.hpp"
#include "sfx/net.hpp"

#include <Eigen/Eigenvalues>

#include <functional>
#include <optional>
#include <vector>

namespace sfx {

// ---------------------------------------------------------------------------
// Discriminator: trainable dense heads over the teacher's last hidden layer
// evaluated at (x_r, r). The score is the mean over heads.

struct DiscHead {
  Dense hidden;  // width x trunk_dim
  Dense out;     // 1 x width
};

struct Discriminator {
  std::vector<DiscHead> heads;

  Vector flat() const {
    Index n = 0;
    for (const auto& h : heads) n += h.hidden.w.size() + h.hidden.b.size() + h.out.w.size() + h.out.b.size();
    Vector v(n);
    Index off = 0;
    auto put = [&](const auto& m) {
      v.segment(off, m.size()) = Eigen::Map<const Vector>(m.data(), m.size());
      off += m.size();
    };
    for (const auto& h : heads) {
      put(h.hidden.w);
      put(h.hidden.b);
      put(h.out.w);
      put(h.out.b);
    }
    return v;
  }

  void set_flat(const Vector& v) {
    Index off = 0;
    auto get = [&](auto& m) {
      Eigen::Map<Vector>(m.data(), m.size()) = v.segment(off, m.size());
      off += m.size();
    };
    for (auto& h : heads) {
      get(h.hidden.w);
      get(h.hidden.b);
      get(h.out.w);
      get(h.out.b);
    }
    require(off == v.size(), "discriminator: flat parameter size mismatch");
  }
};

inline Discriminator make_discriminator(const VelocityModel& teacher, int n_heads, int width, Rng& rng) {
  require(n_heads >= 1 && width >= 1, "discriminator: need at least one head of positive width");
  const int trunk = teacher.config.hidden;
  Discriminator d;
  for (int i = 0; i < n_heads; ++i) {
    DiscHead h;
    h.hidden = {randn(width, trunk, rng, 1.0 / std::sqrt(static_cast<double>(trunk))), Vector::Zero(width)};
    h.out = {randn(1, width, rng, 1.0 / std::sqrt(static_cast<double>(width))), Vector::Zero(1)};
    d.heads.push_back(std::move(h));
  }
  return d;
}

struct DiscEval {
  Vector score;  // one per sample
  Matrix trunk;
  std::vector<Matrix> pre;   // per-head hidden pre-activations
  std::vector<Matrix> post;  // per-head hidden activations
};

inline DiscEval disc_forward(const Discriminator& d, const VelocityModel& teacher, const Matrix& x_r, const Vector& r,
                             const std::vector<int>& cond) {
  DiscEval e;
  e.trunk = hidden_features(teacher, Batch{x_r, r, r, cond});
  e.score = Vector::Zero(x_r.rows());
  const double inv = 1.0 / static_cast<double>(d.heads.size());
  for (const auto& h : d.heads) {
    Matrix a = e.trunk * h.hidden.w.transpose();
    a.rowwise() += h.hidden.b.transpose();
    Matrix s = a.unaryExpr(&detail::silu);
    e.score += inv * ((s * h.out.w.transpose()).col(0).array() + h.out.b(0)).matrix();
    e.pre.push_back(std::move(a));
    e.post.push_back(std::move(s));
  }
  return e;
}

struct DiscGrad {
  Vector params;  // flat, matching Discriminator::flat
  Matrix trunk;   // gradient w.r.t. trunk features
};

// Gradient of sum(score .* upstream).
inline DiscGrad disc_backward(const Discriminator& d, const DiscEval& e, const Vector& upstream) {
  DiscGrad g;
  g.trunk = Matrix::Zero(e.trunk.rows(), e.trunk.cols());
  std::vector<double> flat;
  const double inv = 1.0 / static_cast<double>(d.heads.size());
  const Vector d_out = inv * upstream;
  for (std::size_t i = 0; i < d.heads.size(); ++i) {
    const DiscHead& h = d.heads[i];
    const Matrix dw2 = d_out.transpose() * e.post[i];
    const double db2 = d_out.sum();
    const Matrix ds = d_out * h.out.w;  // B x width
    const Matrix da = ds.cwiseProduct(e.pre[i].unaryExpr(&detail::silu_grad));
    const Matrix dw1 = da.transpose() * e.trunk;
    const Vector db1 = da.colwise().sum().transpose();
    g.trunk += da * h.hidden.w;
    flat.insert(flat.end(), dw1.data(), dw1.data() + dw1.size());
    flat.insert(flat.end(), db1.data(), db1.data() + db1.size());
    flat.insert(flat.end(), dw2.data(), dw2.data() + dw2.size());
    flat.push_back(db2);
  }
  g.params = Eigen::Map<Vector>(flat.data(), static_cast<Index>(flat.size()));
  return g;
}

// ---------------------------------------------------------------------------
// Student construction and (t, r) embedding matching.

// Copies the teacher and widens its time embedding to take (t, r); the new
// r columns start random, so embed(t, t) initially differs from the teacher.
inline VelocityModel make_student(const VelocityModel& teacher, Rng& rng, double r_init_scale = 0.1) {
  require(!teacher.config.use_r, "make_student: teacher already has an r embedding");
  VelocityModel s = teacher;
  s.config.use_r = true;
  const Matrix& wt = teacher.params.time_embed.w;
  Matrix w(wt.rows(), 2 * wt.cols());
  w.leftCols(wt.cols()) = wt;
  w.rightCols(wt.cols()) = randn(wt.rows(), wt.cols(), rng, r_init_scale);
  s.params.time_embed.w = std::move(w);
  return s;
}

// Raw (pre-MLP) time embedding, B x time_embed_dim.
inline Matrix time_embedding(const VelocityModel& m, const Vector& t, const Vector& r) {
  Matrix phi(t.size(), m.config.time_input_dim()), dphi(t.size(), m.config.time_input_dim());
  detail::time_features(m.config, t, phi, dphi, 0);
  if (m.config.use_r) detail::time_features(m.config, r, phi, dphi, m.config.time_features);
  Matrix e = phi * m.params.time_embed.w.transpose();
  e.rowwise() += m.params.time_embed.b.transpose();
  return e;
}

struct EmbedMatchReport {
  std::vector<double> held_mse;  // entry 0 is before matching
};

inline Vector uniform_grid(int n, double lo, double hi, bool midpoints) {
  Vector g(n);
  for (int i = 0; i < n; ++i) g(i) = lo + (hi - lo) * (midpoints ? (i + 0.5) / n : static_cast<double>(i) / (n - 1));
  return g;
}

inline double embed_mismatch(const VelocityModel& student, const VelocityModel& teacher, const Vector& grid) {
  return (time_embedding(student, grid, grid) - time_embedding(teacher, grid, grid)).squaredNorm() /
         static_cast<double>(grid.size() * student.config.time_embed_dim);
}

// Fits embed_student(t, t) to embed_teacher(t) by full-batch gradient
// descent on a 256-point training grid with step 1/L (L the gradient
// Lipschitz constant), so the quadratic objective never increases. Only the
// time-embedding parameters change. Progress is tracked on 64 held-out
// midpoints.
inline EmbedMatchReport embed_match_phase(VelocityModel& student, const VelocityModel& teacher, int steps) {
  require(student.config.use_r && !teacher.config.use_r, "embed_match: expects an (t, r) student and a t teacher");
  require(student.config.time_embed_dim == teacher.config.time_embed_dim &&
              student.config.time_features == teacher.config.time_features,
          "embed_match: embedding shapes differ");
  const Vector train = uniform_grid(256, kMinTime, 1.0, false);
  const Vector held = uniform_grid(64, kMinTime, 1.0, true);

  EmbedMatchReport rep;
  rep.held_mse.push_back(embed_mismatch(student, teacher, held));
  if (steps <= 0) return rep;

  const int F = student.config.time_input_dim();
  Matrix phi(train.size(), F), dphi(train.size(), F);
  detail::time_features(student.config, train, phi, dphi, 0);
  detail::time_features(student.config, train, phi, dphi, student.config.time_features);
  Matrix z(train.size(), F + 1);
  z.leftCols(F) = phi;
  z.col(F).setOnes();
  const Matrix target = time_embedding(teacher, train, train);  // G x E
  const double scale = 2.0 / static_cast<double>(train.size() * student.config.time_embed_dim);
  const Matrix gram = z.transpose() * z;
  const double lipschitz = scale * Eigen::SelfAdjointEigenSolver<Matrix>(gram, Eigen::EigenvaluesOnly).eigenvalues().maxCoeff();
  const double step = 1.0 / lipschitz;

  Matrix a(student.config.time_embed_dim, F + 1);
  a.leftCols(F) = student.params.time_embed.w;
  a.col(F) = student.params.time_embed.b;
  for (int s = 0; s < steps; ++s) {
    const Matrix resid = z * a.transpose() - target;  // G x E
    a -= step * scale * (resid.transpose() * z);
    student.params.time_embed.w = a.leftCols(F);
    student.params.time_embed.b = a.col(F);
    rep.held_mse.push_back(embed_mismatch(student, teacher, held));
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Training loop.

struct DistillConfig {
  long long steps = 2000;
  int batch_size = 256;
  long long warmup_steps = 5000;  // discriminator and adversarial term start after this step
  double adv_weight = 0.5;
  double lr = 5e-6;
  double disc_lr = 5e-6;
  double clip_norm = 1.0;
  double ema_decay = 0.99;
  double tangent_clip = 1.0;
  std::optional<CfgDistillOptions> cfg = CfgDistillOptions{};
  int embed_match_steps = 1000;
  int disc_heads = 4;
  int disc_width = 16;
  TrScheduler scheduler;
};

// Samples one data batch: x0 rows and their class ids.
using DataSampler = std::function<void(int batch, Rng& rng, Matrix& x0, std::vector<int>& cond)>;

struct DistillState {
  const VelocityModel* teacher = nullptr;
  VelocityModel student;
  Discriminator disc;
  OptimizerState student_opt;
  OptimizerState disc_opt;
  DistillConfig config;
  Rng data_rng;
  Rng disc_rng;
  Rng gen_rng;
  long long step = 0;
};

// Clones the teacher into a student, runs the embedding-matching phase, and
// sets up discriminator and optimizers. Separate RNG streams keep the
// generator's draws independent of whether the discriminator runs.
inline DistillState init_distillation(const VelocityModel& teacher, const DistillConfig& config, std::uint64_t seed,
                                      EmbedMatchReport* match_report = nullptr) {
  DistillState st;
  st.teacher = &teacher;
  st.config = config;
  Rng init_rng(seed);
  st.data_rng.seed(seed + 1);
  st.disc_rng.seed(seed + 2);
  st.gen_rng.seed(seed + 3);
  st.student = make_student(teacher, init_rng);
  const auto rep = embed_match_phase(st.student, teacher, config.embed_match_steps);
  if (match_report) *match_report = rep;
  st.disc = make_discriminator(teacher, config.disc_heads, config.disc_width, init_rng);
  AdamConfig sa{config.lr, 0.9, 0.999, 1e-8, 0, config.clip_norm, config.ema_decay};
  AdamConfig da{config.disc_lr, 0.9, 0.999, 1e-8, 0, config.clip_norm, config.ema_decay};
  st.student_opt = OptimizerState::init(st.student, sa);
  st.disc_opt = OptimizerState::init(st.disc.flat(), da);
  return st;
}

// x_r(fake) = x_t - (t - r) student(x_t, t, r), x_r(true) = (1 - r) x0 + r x1,
// hinge loss; only the discriminator heads are updated.
inline double disc_step(DistillState& st, const Matrix& x0, const Matrix& x1, const std::vector<int>& cond) {
  auto [t, r] = st.config.scheduler.sample(x0.rows(), st.disc_rng);
  const Matrix xt = interpolate(x0, x1, t);
  const Matrix u = forward(st.student, Batch{xt, t, r, cond});
  Matrix x_fake = xt;
  for (Index i = 0; i < xt.rows(); ++i) x_fake.row(i) -= (t(i) - r(i)) * u.row(i);
  const Matrix x_true = interpolate(x0, x1, r);

  const DiscEval real = disc_forward(st.disc, *st.teacher, x_true, r, cond);
  const DiscEval fake = disc_forward(st.disc, *st.teacher, x_fake, r, cond);
  const double loss = hinge_disc_loss(real.score, fake.score);

  const double inv_b = 1.0 / static_cast<double>(x0.rows());
  // d/dscore of mean(relu(1 - s_true)) + mean(relu(1 + s_fake)).
  const Vector up_real = real.score.unaryExpr([inv_b](double s) { return s < 1.0 ? -inv_b : 0.0; });
  const Vector up_fake = fake.score.unaryExpr([inv_b](double s) { return s > -1.0 ? inv_b : 0.0; });
  const Vector grad = disc_backward(st.disc, real, up_real).params + disc_backward(st.disc, fake, up_fake).params;
  Vector params = st.disc.flat();
  const StepReport rep = adam_step(st.disc_opt, params, grad);
  if (!rep.applied) throw NumericError("disc_step: " + rep.error);
  st.disc.set_flat(params);
  return loss;
}

struct GenReport {
  double mf_loss = 0.0;
  std::optional<double> adv_loss;
  double total = 0.0;
  StepReport step;
};

// Average-velocity distillation loss plus, when adversarial, adv_weight times
// -mean(disc(x_t - (t - r) u)); the discriminator is held fixed.
inline GenReport gen_step(DistillState& st, const Matrix& x0, const Matrix& x1, const std::vector<int>& cond,
                          bool adversarial) {
  auto [t, r] = st.config.scheduler.sample(x0.rows(), st.gen_rng);
  const DistillBatch db = make_distill_batch(*st.teacher, x0, x1, t, r, cond, st.config.cfg, st.gen_rng);
  const MeanFlowResult mf = meanflow_objective(st.student, db.batch, db.v_target, st.config.tangent_clip, false);

  GenReport rep;
  rep.mf_loss = mf.loss;
  rep.total = mf.loss;
  Matrix upstream = (2.0 / static_cast<double>(mf.g.size())) * mf.g;
  if (adversarial) {
    Matrix x_r = db.batch.x;
    for (Index i = 0; i < x_r.rows(); ++i) x_r.row(i) -= (t(i) - r(i)) * mf.u.row(i);
    const DiscEval e = disc_forward(st.disc, *st.teacher, x_r, r, db.batch.cond);
    const double adv = -e.score.mean();
    rep.adv_loss = adv;
    rep.total += st.config.adv_weight * adv;
    if (st.config.adv_weight != 0.0) {
      const double inv_b = 1.0 / static_cast<double>(x_r.rows());
      const DiscGrad dg = disc_backward(st.disc, e, Vector::Constant(x_r.rows(), 1.0));
      const Matrix dscore_dx = hidden_input_gradient(*st.teacher, Batch{x_r, r, r, db.batch.cond}, dg.trunk);
      // adv = -mean(score(x_r)), x_r = x_t - (t - r) u  =>  dadv/du = (t - r) dscore/dx / B.
      for (Index i = 0; i < x_r.rows(); ++i)
        upstream.row(i) += st.config.adv_weight * inv_b * (t(i) - r(i)) * dscore_dx.row(i);
    }
  }
  const Parameters grads = backward(st.student, db.batch, upstream).grads;
  rep.step = adam_step(st.student_opt, st.student, grads);
  if (!rep.step.applied) throw NumericError("gen_step: " + rep.step.error);
  return rep;
}

struct DistillLogRow {
  long long step = 0;
  double mf_loss = 0.0;
  std::optional<double> adv_loss;
  std::optional<double> disc_loss;
  double lr = 0.0;
};

// One iteration of the loop: shared (x0, x1) batch, a discriminator step
// once past warmup, then a generator step.
inline DistillLogRow distill_iteration(DistillState& st, const DataSampler& data) {
  Matrix x0;
  std::vector<int> cond;
  data(st.config.batch_size, st.data_rng, x0, cond);
  const Matrix x1 = randn(x0.rows(), x0.cols(), st.data_rng);
  ++st.step;
  DistillLogRow row;
  row.step = st.step;
  const bool past_warmup = st.step > st.config.warmup_steps;
  if (past_warmup) row.disc_loss = disc_step(st, x0, x1, cond);
  const GenReport g = gen_step(st, x0, x1, cond, past_warmup);
  row.mf_loss = g.mf_loss;
  row.adv_loss = g.adv_loss;
  row.lr = g.step.lr;
  return row;
}

}  // namespace sfx
