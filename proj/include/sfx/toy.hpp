#pragma once

// Two-dimensional toy problem used by the CLI and the end-to-end tests:
// eight Gaussians on the unit ring with class labels, a flow-matching
// training loop, and an exact empirical 2-Wasserstein distance.

#include "sfx/flow.hpp"
#include "sfx/net.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <vector>

namespace sfx {

struct EightGaussians {
  int modes = 8;
  double radius = 1.0;
  double sigma = 0.1;

  Vector center(int k) const {
    const double a = 2.0 * std::numbers::pi * k / modes;
    Vector c(2);
    c << radius * std::cos(a), radius * std::sin(a);
    return c;
  }

  // Rows of x0 and their mode ids.
  void sample(int n, Rng& rng, Matrix& x0, std::vector<int>& labels) const {
    x0.resize(n, 2);
    labels.resize(static_cast<std::size_t>(n));
    std::uniform_int_distribution<int> pick(0, modes - 1);
    for (int i = 0; i < n; ++i) {
      const int k = pick(rng);
      labels[static_cast<std::size_t>(i)] = k;
      const Vector c = center(k);
      x0(i, 0) = c(0) + sigma * normal(rng);
      x0(i, 1) = c(1) + sigma * normal(rng);
    }
  }
};

inline ModelConfig toy_model_config(int num_classes = 8) {
  ModelConfig c;
  c.state_dim = 2;
  c.num_classes = num_classes;
  return c;
}

struct FmTrainConfig {
  long long steps = 4000;
  int batch_size = 256;
  double cond_drop = 0.1;
  AdamConfig adam{1e-3, 0.9, 0.999, 1e-8, 1000, 1.0, 0.999};
};

struct FmLogRow {
  long long step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
};

// Flow-matching training on the ring. Labels are replaced by the null id with
// probability cond_drop so the model also learns the unconditional field.
// Throws NumericError naming the step on a non-finite loss or gradient.
inline void train_fm(VelocityModel& model, OptimizerState& opt, const EightGaussians& data, const FmTrainConfig& cfg,
                     Rng& rng, const std::function<void(const FmLogRow&)>& log = {}) {
  for (long long s = 0; s < cfg.steps; ++s) {
    Matrix x0;
    std::vector<int> labels;
    data.sample(cfg.batch_size, rng, x0, labels);
    if (model.config.num_classes > 0)
      labels = drop_conditions(labels, cfg.cond_drop, model.config.null_class(), rng);
    else
      std::fill(labels.begin(), labels.end(), -1);
    const PathSample path = sample_path(x0, rng);
    const LossResult lr = fm_loss(model, path, labels);
    const long long step = opt.step + 1;
    if (!std::isfinite(lr.loss)) throw NumericError("train-fm: non-finite loss at step " + std::to_string(step));
    const StepReport rep = adam_step(opt, model, lr.grads);
    if (!rep.applied) throw NumericError("train-fm: step " + std::to_string(step) + ": " + rep.error);
    if (log) log({step, lr.loss, rep.lr, rep.grad_norm});
  }
}

// Minimum-cost perfect matching on a square cost matrix (Hungarian method,
// O(n^3)). Returns assignment[row] = column.
inline std::vector<int> hungarian(const Matrix& cost) {
  require(cost.rows() == cost.cols(), "hungarian: cost matrix must be square");
  const int n = static_cast<int>(cost.rows());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> assignment(static_cast<std::size_t>(n));
  for (int j = 1; j <= n; ++j) assignment[static_cast<std::size_t>(p[j] - 1)] = j - 1;
  return assignment;
}

// Exact W2 between two equal-size empirical distributions (rows = points).
inline double wasserstein2(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols() && a.rows() > 0, "wasserstein2: point sets must match in shape");
  const Index n = a.rows();
  Matrix cost(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) cost(i, j) = (a.row(i) - b.row(j)).squaredNorm();
  const std::vector<int> match = hungarian(cost);
  double total = 0.0;
  for (Index i = 0; i < n; ++i) total += cost(i, match[static_cast<std::size_t>(i)]);
  return std::sqrt(total / static_cast<double>(n));
}

}  // namespace sfx
