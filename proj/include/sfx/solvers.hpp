#pragma once

// ODE samplers: fixed-step Euler over a uniform grid (with optional
// renoising, for average-velocity students) and adaptive Dormand-Prince 5(4).
// Both count model calls (NFE), doubling when guidance needs a second call.

#include "sfx/losses.hpp"
#include "sfx/net.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace sfx {

// A velocity field u(x, t, r). calls_per_eval is the number of model calls
// one evaluation costs (2 for guided conditional/unconditional pairs).
struct VelocityField {
  std::function<Vector(const Vector&, double, double)> eval;
  int calls_per_eval = 1;
};

inline VelocityField model_field(const VelocityModel& model, int cond = -1) {
  return {[&model, cond](const Vector& x, double t, double r) { return forward(model, x, t, r, cond); }, 1};
}

// Guided field; falls back to a single call at the neutral scale or when the
// condition is already the null condition.
inline VelocityField guided_field(const VelocityModel& model, int cond, double scale,
                                  CfgMode mode = CfgMode::standard) {
  const int null_id = model.config.null_class();
  const bool is_null = model.config.num_classes == 0 || cond < 0 || cond == null_id;
  if (is_null || scale == cfg_neutral_scale(mode)) return model_field(model, cond);
  return {[&model, cond, null_id, scale, mode](const Vector& x, double t, double r) {
            const Vector vc = forward(model, x, t, r, cond);
            const Vector vu = forward(model, x, t, r, null_id);
            return Vector(cfg_combine(vc, vu, scale, mode));
          },
          2};
}

enum class SolverKind { euler, dopri5 };
enum class RenoiseMode { remix, additive };

struct SolverConfig {
  SolverKind kind = SolverKind::euler;
  int steps = 4;
  std::vector<double> renoise_weights;  // empty = no renoising
  RenoiseMode renoise = RenoiseMode::remix;
  double atol = 1e-3;
  double rtol = 1e-3;
  double cfg_scale = 7.0;
  CfgMode cfg_mode = CfgMode::standard;
  long long max_nfe = 100000;
  double initial_step = 0.05;
  double safety = 0.9;
  double min_factor = 0.2;
  double max_factor = 5.0;
  double min_step = 1e-10;
};

struct SampleTrace {
  Vector final;
  long long nfe = 0;
  std::vector<double> t_grid;
  int accepted = 0;
  int rejected = 0;
};

class SolverError : public NumericError {
 public:
  using NumericError::NumericError;
};

// Integrates from t = 1 down to t = 0 on a uniform grid. Each step uses
// u(x, t_k, t_{k+1}) and x <- x - (t_k - t_{k+1}) u, which is plain Euler for
// instantaneous-velocity models and exact for exact average velocities.
//
// Renoising before step k with weight w_k (remix mode): estimate
// x0 = x - t_k u(x, t_k, 0) and eps = (x - (1 - t_k) x0) / t_k, mix
// eps <- sqrt(1 - w^2) eps + w n with fresh n ~ N(0, I), rebuild
// x = (1 - t_k) x0 + t_k eps. Additive mode adds w t_k n directly.
inline SampleTrace euler_sample(const VelocityField& field, const Vector& x1, const SolverConfig& config, Rng& rng) {
  if (config.steps < 1) throw ConfigError("euler: steps must be >= 1");
  if (!config.renoise_weights.empty() && static_cast<int>(config.renoise_weights.size()) != config.steps)
    throw ConfigError("euler: renoise weights must have one entry per step");
  for (double w : config.renoise_weights)
    if (!(w >= 0.0 && w <= 1.0)) throw ConfigError("euler: renoise weights must lie in [0, 1]");

  SampleTrace trace;
  Vector x = x1;
  const int n = config.steps;
  auto check = [&](int k) {
    if (!x.allFinite()) throw SolverError("euler: non-finite state at step " + std::to_string(k));
  };
  for (int k = 0; k < n; ++k) {
    const double t = 1.0 - static_cast<double>(k) / n;
    const double r = 1.0 - static_cast<double>(k + 1) / n;
    trace.t_grid.push_back(t);
    const double w = config.renoise_weights.empty() ? 0.0 : config.renoise_weights[static_cast<std::size_t>(k)];
    if (w > 0.0) {
      Vector fresh(x.size());
      for (Index i = 0; i < fresh.size(); ++i) fresh(i) = normal(rng);
      if (config.renoise == RenoiseMode::remix) {
        const Vector u0 = field.eval(x, t, 0.0);
        trace.nfe += field.calls_per_eval;
        const Vector x0_hat = x - t * u0;
        const Vector eps_hat = (x - (1.0 - t) * x0_hat) / t;
        const Vector eps = std::sqrt(1.0 - w * w) * eps_hat + w * fresh;
        x = (1.0 - t) * x0_hat + t * eps;
      } else {
        x += w * t * fresh;
      }
      check(k);
    }
    const Vector u = field.eval(x, t, r);
    trace.nfe += field.calls_per_eval;
    x -= (t - r) * u;
    check(k);
  }
  trace.t_grid.push_back(0.0);
  trace.accepted = n;
  if (trace.nfe > config.max_nfe) throw SolverError("euler: NFE budget exceeded");
  trace.final = std::move(x);
  return trace;
}

namespace detail {

struct DormandPrince {
  static constexpr std::array<double, 7> c{0.0, 1.0 / 5, 3.0 / 10, 4.0 / 5, 8.0 / 9, 1.0, 1.0};
  static constexpr double a[7][6] = {
      {0, 0, 0, 0, 0, 0},
      {1.0 / 5, 0, 0, 0, 0, 0},
      {3.0 / 40, 9.0 / 40, 0, 0, 0, 0},
      {44.0 / 45, -56.0 / 15, 32.0 / 9, 0, 0, 0},
      {19372.0 / 6561, -25360.0 / 2187, 64448.0 / 6561, -212.0 / 729, 0, 0},
      {9017.0 / 3168, -355.0 / 33, 46732.0 / 5247, 49.0 / 176, -5103.0 / 18656, 0},
      {35.0 / 384, 0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84},
  };
  // 5th-order weights minus embedded 4th-order weights.
  static constexpr std::array<double, 7> e{71.0 / 57600,  0.0,          -71.0 / 16695, 71.0 / 1920,
                                           -17253.0 / 339200, 22.0 / 525, -1.0 / 40};
};

}  // namespace detail

// Adaptive Dormand-Prince 5(4) with FSAL, mixed RMS error norm
// sqrt(mean((err / (atol + rtol max(|y|, |y_new|)))^2)) and a PI controller.
// rhs_calls is the number of model calls per right-hand-side evaluation.
inline SampleTrace dopri5_integrate(const std::function<Vector(const Vector&, double)>& rhs, const Vector& y0,
                                    double t0, double t1, const SolverConfig& config, int rhs_calls = 1) {
  if (!(config.atol > 0.0 && config.rtol > 0.0)) throw ConfigError("dopri5: tolerances must be positive");
  using DP = detail::DormandPrince;
  constexpr double beta = 0.04;
  constexpr double alpha = 0.2 - 0.75 * beta;

  SampleTrace trace;
  Vector y = y0;
  double t = t0;
  const double dir = t1 >= t0 ? 1.0 : -1.0;
  const double span = std::abs(t1 - t0);
  double h = std::min(config.initial_step, span);
  double err_prev = 1e-4;
  bool last_rejected = false;
  trace.t_grid.push_back(t);

  auto eval = [&](const Vector& x, double tt) {
    trace.nfe += rhs_calls;
    if (trace.nfe > config.max_nfe)
      throw SolverError("dopri5: NFE budget of " + std::to_string(config.max_nfe) + " exceeded");
    Vector k = rhs(x, tt);
    if (!k.allFinite()) throw SolverError("dopri5: non-finite derivative at t=" + std::to_string(tt));
    return k;
  };

  if (span == 0.0) {
    trace.final = y;
    return trace;
  }
  std::array<Vector, 7> k;
  k[0] = eval(y, t);
  while (dir * (t1 - t) > 0.0) {
    const double remaining = std::abs(t1 - t);
    if (h >= remaining) h = remaining;
    if (h < config.min_step)
      throw SolverError("dopri5: step size underflow at t=" + std::to_string(t));
    const double hs = dir * h;

    for (int s = 1; s < 7; ++s) {
      Vector ys = y;
      for (int j = 0; j < s; ++j)
        if (DP::a[s][j] != 0.0) ys += hs * DP::a[s][j] * k[static_cast<std::size_t>(j)];
      k[static_cast<std::size_t>(s)] = eval(ys, t + DP::c[static_cast<std::size_t>(s)] * hs);
    }
    Vector y_new = y;
    for (int j = 0; j < 6; ++j)
      if (DP::a[6][j] != 0.0) y_new += hs * DP::a[6][j] * k[static_cast<std::size_t>(j)];
    Vector err = Vector::Zero(y.size());
    for (int j = 0; j < 7; ++j)
      if (DP::e[static_cast<std::size_t>(j)] != 0.0) err += hs * DP::e[static_cast<std::size_t>(j)] * k[static_cast<std::size_t>(j)];

    const Vector scale = (config.atol + config.rtol * y.cwiseAbs().cwiseMax(y_new.cwiseAbs()).array()).matrix();
    const double err_norm = std::sqrt((err.array() / scale.array()).square().mean());

    if (err_norm <= 1.0) {
      double factor = config.max_factor;
      if (err_norm > 0.0)
        factor = std::clamp(config.safety * std::pow(err_norm, -alpha) * std::pow(err_prev, beta), config.min_factor,
                            config.max_factor);
      if (last_rejected) factor = std::min(factor, 1.0);
      t = (h == remaining) ? t1 : t + hs;
      y = std::move(y_new);
      k[0] = k[6];  // first-same-as-last
      err_prev = std::max(err_norm, 1e-4);
      ++trace.accepted;
      trace.t_grid.push_back(t);
      last_rejected = false;
      h *= factor;
    } else {
      const double factor = std::max(config.min_factor, config.safety * std::pow(err_norm, -alpha));
      h *= factor;
      ++trace.rejected;
      last_rejected = true;
    }
  }
  trace.final = std::move(y);
  return trace;
}

// Solves dx/dt = u(x, t) from t = 1 (noise) down to t = 0 (data).
inline SampleTrace dopri5_sample(const VelocityField& field, const Vector& x1, const SolverConfig& config) {
  auto rhs = [&field](const Vector& x, double t) { return field.eval(x, t, t); };
  return dopri5_integrate(rhs, x1, 1.0, 0.0, config, field.calls_per_eval);
}

inline SampleTrace sample(const VelocityField& field, const Vector& x1, const SolverConfig& config, Rng& rng) {
  return config.kind == SolverKind::euler ? euler_sample(field, x1, config, rng) : dopri5_sample(field, x1, config);
}

}  // namespace sfx
