#include "sfx/net.hpp"

#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cstring>
#include <fstream>

using namespace sfx;

namespace {

ModelConfig small_config(bool use_r, int classes) {
  ModelConfig c;
  c.state_dim = 3;
  c.time_features = 8;
  c.time_embed_dim = 6;
  c.use_r = use_r;
  c.num_classes = classes;
  c.cond_dim = 4;
  c.hidden = 10;
  c.depth = 2;
  return c;
}

Batch random_batch(const ModelConfig& c, Index n, Rng& rng) {
  Batch b;
  b.x = randn(n, c.state_dim, rng);
  b.t.resize(n);
  b.r.resize(n);
  for (Index i = 0; i < n; ++i) {
    b.t(i) = uniform(rng, 0.001, 1.0);
    b.r(i) = uniform(rng, 0.0, b.t(i));
    b.cond.push_back(c.num_classes > 0 ? static_cast<int>(i % (c.num_classes + 1)) : -1);
  }
  return b;
}

double weighted_output(const VelocityModel& m, const Batch& b, const Matrix& w) {
  return forward(m, b).cwiseProduct(w).sum();
}

}  // namespace

TEST(Net, ForwardShapesAndDeterminism) {
  Rng rng(1);
  const auto cfg = small_config(true, 3);
  const VelocityModel m = make_model(cfg, rng);
  const Batch b = random_batch(cfg, 5, rng);
  const Matrix y = forward(m, b);
  EXPECT_EQ(y.rows(), 5);
  EXPECT_EQ(y.cols(), 3);
  EXPECT_TRUE((forward(m, b).array() == y.array()).all());
  // Row-wise independence: single-row calls match the batched rows.
  for (Index i = 0; i < 5; ++i) {
    const Vector yi = forward(m, b.x.row(i).transpose(), b.t(i), b.r(i), b.cond[static_cast<std::size_t>(i)]);
    EXPECT_LT((yi.transpose() - y.row(i)).norm(), 1e-14);
  }
}

TEST(Net, NullConditionAliases) {
  Rng rng(2);
  const auto cfg = small_config(false, 3);
  const VelocityModel m = make_model(cfg, rng);
  const Vector x = Vector::Random(3);
  EXPECT_TRUE((forward(m, x, 0.3, 0.3, -1).array() == forward(m, x, 0.3, 0.3, 3).array()).all());
  EXPECT_THROW(forward(m, x, 0.3, 0.3, 4), DomainError);
  EXPECT_THROW(forward(m, x, 0.3, 0.3, -2), DomainError);
}

TEST(Net, ShapeErrors) {
  Rng rng(3);
  const auto cfg = small_config(false, 0);
  const VelocityModel m = make_model(cfg, rng);
  EXPECT_THROW(forward(m, Vector::Zero(2), 0.5, 0.5), DomainError);
  Batch b = random_batch(cfg, 2, rng);
  EXPECT_THROW(jvp(m, b, Tangent{Matrix::Zero(3, 3), 0, 0}), DomainError);
  EXPECT_THROW(backward(m, b, Matrix::Zero(2, 2)), DomainError);
  ModelConfig bad = cfg;
  bad.time_features = 7;
  EXPECT_THROW(make_model(bad, rng), ConfigError);
}

TEST(Net, BackwardMatchesFiniteDifferences) {
  for (int trial = 0; trial < 10; ++trial) {
    Rng rng(100 + static_cast<std::uint64_t>(trial));
    const auto cfg = small_config(trial % 2 == 0, trial % 3 == 0 ? 0 : 2);
    VelocityModel m = make_model(cfg, rng);
    const Batch b = random_batch(cfg, 3, rng);
    const Matrix up = randn(3, cfg.state_dim, rng);
    const GradTape tape = backward(m, b, up);
    const Vector g = flatten(tape.grads);
    const Vector p0 = flatten(m.params);
    // Directional finite difference along a random parameter direction.
    const Vector dir = randn(p0.size(), 1, rng);
    const double h = 1e-5;
    VelocityModel mp = m, mm = m;
    unflatten(mp.params, p0 + h * dir);
    unflatten(mm.params, p0 - h * dir);
    const double fd = (weighted_output(mp, b, up) - weighted_output(mm, b, up)) / (2 * h);
    EXPECT_LT(test_util::rel_err(g.dot(dir), fd), 1e-6) << trial;
    // Input gradient.
    const Matrix dx = randn(3, cfg.state_dim, rng);
    Batch bp = b, bm = b;
    bp.x += h * dx;
    bm.x -= h * dx;
    const double fdx = (weighted_output(m, bp, up) - weighted_output(m, bm, up)) / (2 * h);
    EXPECT_LT(test_util::rel_err(tape.d_x.cwiseProduct(dx).sum(), fdx), 1e-6) << trial;
  }
}

TEST(Net, JvpMatchesFiniteDifferences) {
  for (int trial = 0; trial < 10; ++trial) {
    Rng rng(200 + static_cast<std::uint64_t>(trial));
    const auto cfg = small_config(true, 2);
    const VelocityModel m = make_model(cfg, rng);
    const Batch b = random_batch(cfg, 4, rng);
    const Tangent tan{randn(4, 3, rng), normal(rng), normal(rng)};
    const JvpResult jr = jvp(m, b, tan);
    EXPECT_TRUE((jr.value.array() == forward(m, b).array()).all());
    // sin(100 t) features give third derivatives near 1e6; keep h small.
    const double h = 1e-6;
    Batch bp = b, bm = b;
    bp.x += h * tan.dx;
    bm.x -= h * tan.dx;
    bp.t.array() += h * tan.dt;
    bm.t.array() -= h * tan.dt;
    bp.r.array() += h * tan.dr;
    bm.r.array() -= h * tan.dr;
    const Matrix fd = (forward(m, bp) - forward(m, bm)) / (2 * h);
    EXPECT_LT(test_util::rel_err(jr.derivative, fd), 1e-6) << trial;
  }
}

TEST(Net, JvpZeroTangentAndLinearity) {
  Rng rng(5);
  const auto cfg = small_config(true, 0);
  const VelocityModel m = make_model(cfg, rng);
  const Batch b = random_batch(cfg, 3, rng);
  EXPECT_EQ(jvp(m, b, Tangent{Matrix::Zero(3, 3), 0, 0}).derivative.cwiseAbs().maxCoeff(), 0.0);
  const Tangent u{randn(3, 3, rng), 0.7, -0.2}, v{randn(3, 3, rng), -1.1, 0.4};
  const double a = 1.7, c = -0.6;
  const Tangent w{a * u.dx + c * v.dx, a * u.dt + c * v.dt, a * u.dr + c * v.dr};
  const Matrix lhs = jvp(m, b, w).derivative;
  const Matrix rhs = a * jvp(m, b, u).derivative + c * jvp(m, b, v).derivative;
  EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Net, AdjointConsistency) {
  Rng rng(6);
  const auto cfg = small_config(false, 2);
  const VelocityModel m = make_model(cfg, rng);
  const Batch b = random_batch(cfg, 2, rng);
  const Matrix dx = randn(2, 3, rng);
  const Matrix jv = jvp(m, b, Tangent{dx, 0, 0}).derivative;
  for (Index row = 0; row < 2; ++row) {
    for (Index i = 0; i < 3; ++i) {
      Matrix e = Matrix::Zero(2, 3);
      e(row, i) = 1.0;
      const Matrix gx = backward(m, b, e).d_x;
      EXPECT_NEAR(gx.cwiseProduct(dx).sum(), jv(row, i), 1e-9);
    }
  }
}

TEST(Net, HiddenInputGradientMatchesFiniteDifferences) {
  Rng rng(7);
  const auto cfg = small_config(false, 2);
  const VelocityModel m = make_model(cfg, rng);
  const Batch b = random_batch(cfg, 3, rng);
  const Matrix up = randn(3, cfg.hidden, rng);
  const Matrix g = hidden_input_gradient(m, b, up);
  const Matrix dx = randn(3, 3, rng);
  const double h = 1e-5;
  Batch bp = b, bm = b;
  bp.x += h * dx;
  bm.x -= h * dx;
  const double fd = ((hidden_features(m, bp) - hidden_features(m, bm)).cwiseProduct(up)).sum() / (2 * h);
  EXPECT_LT(test_util::rel_err(g.cwiseProduct(dx).sum(), fd), 1e-6);
}

TEST(Adam, ClipScalesLargeGradients) {
  AdamConfig cfg;
  cfg.warmup_steps = 0;
  Vector p = Vector::Zero(4);
  auto s = OptimizerState::init(p, cfg);
  Vector g(4);
  g << 10, 0, 0, 0;  // norm 10
  const auto rep = adam_step(s, p, g);
  EXPECT_TRUE(rep.applied);
  EXPECT_DOUBLE_EQ(rep.grad_norm, 10.0);
  EXPECT_DOUBLE_EQ(rep.clip_scale, 0.1);
  EXPECT_NEAR(s.m(0), 0.1 * 1.0, 1e-15);  // (1 - beta1) * clipped grad
}

TEST(Adam, LinearWarmup) {
  AdamConfig cfg;
  EXPECT_DOUBLE_EQ(scheduled_lr(cfg, 500), 0.5e-4);
  EXPECT_DOUBLE_EQ(scheduled_lr(cfg, 1000), 1e-4);
  EXPECT_DOUBLE_EQ(scheduled_lr(cfg, 5000), 1e-4);
  EXPECT_DOUBLE_EQ(scheduled_lr(cfg, 1), 1e-7);
}

TEST(Adam, ScalarTrajectoryMatchesHandComputation) {
  AdamConfig cfg{0.1, 0.9, 0.999, 1e-8, 0, 0.0, 0.5};
  Vector p(1);
  p << 1.0;
  auto s = OptimizerState::init(p, cfg);
  const double grads[3] = {0.5, -0.2, 0.3};
  double m = 0, v = 0, x = 1.0, ema = 1.0;
  for (int k = 1; k <= 3; ++k) {
    const double g = grads[k - 1];
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1 - std::pow(0.9, k)), vh = v / (1 - std::pow(0.999, k));
    x -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
    ema = 0.5 * ema + 0.5 * x;
    adam_step(s, p, Vector::Constant(1, g));
    EXPECT_NEAR(p(0), x, 1e-15) << k;
    EXPECT_NEAR(s.ema(0), ema, 1e-15) << k;
  }
  // First step of Adam moves by exactly lr * sign(g) (up to eps).
  EXPECT_NEAR(1.0 - 0.1 * 0.5 / (0.5 + 1e-8), 0.9, 1e-7);
}

TEST(Adam, NonFiniteGradientSkipsStep) {
  AdamConfig cfg;
  Vector p = Vector::Ones(3);
  auto s = OptimizerState::init(p, cfg);
  Vector g = Vector::Ones(3);
  g(1) = std::numeric_limits<double>::quiet_NaN();
  const auto rep = adam_step(s, p, g);
  EXPECT_FALSE(rep.applied);
  EXPECT_FALSE(rep.error.empty());
  EXPECT_EQ(s.step, 0);
  EXPECT_TRUE((p.array() == 1.0).all());
}

TEST(Adam, EmaConvergesToFrozenParameters) {
  AdamConfig cfg{1e-2, 0.9, 0.999, 1e-8, 0, 1.0, 0.9};
  Vector p = Vector::Zero(2);
  auto s = OptimizerState::init(p, cfg);
  p << 3.0, -1.0;  // parameters jump, then training halts (zero moments, zero gradients)
  for (int i = 0; i < 400; ++i) adam_step(s, p, Vector::Zero(2));
  EXPECT_TRUE((p.array() == Vector(Vector{{3.0, -1.0}}).array()).all());
  EXPECT_LT((s.ema - p).norm(), 1e-12);
}

TEST(Checkpoint, RoundtripIsBitExact) {
  Rng rng(9);
  const auto cfg = small_config(true, 3);
  VelocityModel m = make_model(cfg, rng);
  auto opt = OptimizerState::init(m, AdamConfig{});
  const Batch b = random_batch(cfg, 4, rng);
  for (int i = 0; i < 3; ++i) adam_step(opt, m, backward(m, b, Matrix::Ones(4, 3)).grads);
  const auto dir = test_util::temp_dir("ckpt");
  save_checkpoint(dir / "m.ckpt", m, &opt);
  const Checkpoint c = load_checkpoint(dir / "m.ckpt");
  EXPECT_EQ(c.model.config, cfg);
  const Vector a = flatten(m.params), bb = flatten(c.model.params);
  ASSERT_EQ(a.size(), bb.size());
  EXPECT_EQ(0, std::memcmp(a.data(), bb.data(), sizeof(double) * static_cast<std::size_t>(a.size())));
  ASSERT_TRUE(c.optimizer.has_value());
  EXPECT_EQ(c.optimizer->step, 3);
  EXPECT_TRUE((c.optimizer->m.array() == opt.m.array()).all());
  EXPECT_TRUE((c.optimizer->v.array() == opt.v.array()).all());
  EXPECT_TRUE((c.optimizer->ema.array() == opt.ema.array()).all());
  EXPECT_EQ(c.optimizer->config.lr, opt.config.lr);
  EXPECT_EQ(c.optimizer->config.warmup_steps, opt.config.warmup_steps);
  EXPECT_EQ(c.optimizer->config.ema_decay, opt.config.ema_decay);
}

TEST(Checkpoint, WithoutOptimizerAndCorruptFiles) {
  Rng rng(10);
  const VelocityModel m = make_model(small_config(false, 0), rng);
  const auto dir = test_util::temp_dir("ckpt2");
  save_checkpoint(dir / "m.ckpt", m);
  EXPECT_FALSE(load_checkpoint(dir / "m.ckpt").optimizer.has_value());
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), IoError);
  {
    std::ofstream os(dir / "bad.ckpt");
    os << "not a checkpoint\n";
  }
  EXPECT_THROW(load_checkpoint(dir / "bad.ckpt"), IoError);
}
