#pragma once

#include "sfx/mmdit.hpp"

#include <cmath>
#include <complex>
#include <vector>

namespace sfx::test_util {

// Independent RoPE: pairs as complex numbers multiplied by e^{i theta_j p}.
inline Matrix rope_oracle(const Matrix& x, const Vector& positions, const Vector& rates, int heads, int rotary = 0) {
  const Index dh = x.cols() / heads;
  const Index dr = rotary == 0 ? dh : rotary;
  Matrix out = x;
  for (Index i = 0; i < x.rows(); ++i)
    for (int h = 0; h < heads; ++h)
      for (Index j = 0; j < dr / 2; ++j) {
        const double theta = std::pow(10000.0, -static_cast<double>(2 * j) / static_cast<double>(dr));
        const std::complex<double> z(x(i, h * dh + 2 * j), x(i, h * dh + 2 * j + 1));
        const std::complex<double> r = z * std::polar(1.0, theta * positions(i) * rates(i));
        out(i, h * dh + 2 * j) = r.real();
        out(i, h * dh + 2 * j + 1) = r.imag();
      }
  return out;
}

// Brute-force joint attention: explicit softmax per query over valid keys.
inline Matrix attention_oracle(const Matrix& q, const Matrix& k, const Matrix& v, const std::vector<bool>& valid, int heads) {
  const Index L = q.rows(), dh = q.cols() / heads;
  Matrix out = Matrix::Zero(L, q.cols());
  for (int h = 0; h < heads; ++h)
    for (Index i = 0; i < L; ++i) {
      std::vector<double> s(static_cast<std::size_t>(L), 0.0);
      double total = 0.0;
      for (Index j = 0; j < L; ++j) {
        if (!valid[static_cast<std::size_t>(j)]) continue;
        double dot = 0.0;
        for (Index c = 0; c < dh; ++c) dot += q(i, h * dh + c) * k(j, h * dh + c);
        s[static_cast<std::size_t>(j)] = std::exp(dot / std::sqrt(static_cast<double>(dh)));
        total += s[static_cast<std::size_t>(j)];
      }
      for (Index j = 0; j < L; ++j)
        for (Index c = 0; c < dh; ++c) out(i, h * dh + c) += s[static_cast<std::size_t>(j)] / total * v(j, h * dh + c);
    }
  return out;
}

}  // namespace sfx::test_util
