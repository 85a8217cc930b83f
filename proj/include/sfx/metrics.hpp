#pragma once

// Evaluation metrics: SI-SDR, log-mel and log-STFT distances, Frechet
// distance between embedding sets, KL divergence of class posteriors, CLAP
// cosine score, and text/audio retrieval recall@k. Embedding and report CSV
// I/O lives here as well.

#include "sfx/dsp.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace sfx {

struct EmbeddingSet {
  Matrix rows;  // N x D
  std::vector<std::string> ids;

  Index size() const { return rows.rows(); }
  Index dim() const { return rows.cols(); }
};

inline constexpr double kSiSdrCapDb = 100.0;

// 10 log10(|a s|^2 / |a s - s_hat|^2), a = <s_hat, s> / |s|^2, clamped to
// [-100, 100] dB.
inline double si_sdr(const AudioBuffer& reference, const AudioBuffer& estimate) {
  require(reference.size() == estimate.size(), "si_sdr: length mismatch");
  require(!reference.empty(), "si_sdr: empty audio");
  const Eigen::Map<const Vector> s(reference.samples.data(), static_cast<Index>(reference.size()));
  const Eigen::Map<const Vector> e(estimate.samples.data(), static_cast<Index>(estimate.size()));
  require(s.allFinite() && e.allFinite(), "si_sdr: non-finite samples");
  const double ss = s.squaredNorm();
  if (ss == 0.0) throw DomainError("si_sdr: reference is all zeros");
  const double alpha = e.dot(s) / ss;
  const double signal = alpha * alpha * ss;
  const double noise = (alpha * s - e).squaredNorm();
  if (noise == 0.0) return signal > 0.0 ? kSiSdrCapDb : -kSiSdrCapDb;
  if (signal == 0.0) return -kSiSdrCapDb;
  return std::clamp(10.0 * std::log10(signal / noise), -kSiSdrCapDb, kSiSdrCapDb);
}

inline constexpr int kMelDistBands = 128;
inline constexpr StftConfig kMelDistStft{2048, 512};
inline constexpr StftConfig kStftDistStft{512, 128};

namespace detail {

inline void check_pair(const AudioBuffer& a, const AudioBuffer& b, const char* what) {
  if (a.size() != b.size()) throw DomainError(std::string(what) + ": length mismatch");
  if (a.sample_rate != b.sample_rate) throw DomainError(std::string(what) + ": sample rate mismatch");
  if (a.empty()) throw DomainError(std::string(what) + ": empty audio");
}

inline Matrix log_magnitude(const AudioBuffer& a, const StftConfig& cfg, double floor) {
  return magnitude(stft(a, cfg)).unaryExpr([floor](double v) { return std::log(std::max(v, floor)); });
}

}  // namespace detail

// Mean absolute difference of 128-band log-mel spectra.
inline double mel_dist(const AudioBuffer& a, const AudioBuffer& b) {
  detail::check_pair(a, b, "mel_dist");
  const MelFilterbank fb = mel_filterbank(kMelDistBands, kMelDistStft, a.sample_rate);
  return (log_mel(a, fb, kMelDistStft) - log_mel(b, fb, kMelDistStft)).cwiseAbs().mean();
}

// Mean absolute difference of log STFT magnitudes, n_fft = 512.
inline double stft_dist(const AudioBuffer& a, const AudioBuffer& b) {
  detail::check_pair(a, b, "stft_dist");
  return (detail::log_magnitude(a, kStftDistStft, kLogFloor) - detail::log_magnitude(b, kStftDistStft, kLogFloor))
      .cwiseAbs()
      .mean();
}

struct GaussianStats {
  Vector mean;
  Matrix cov;
};

// Mean and unbiased covariance; adds 1e-6 I when N <= D.
inline GaussianStats gaussian_stats(const EmbeddingSet& x) {
  const Index n = x.size();
  if (n < 2) throw DomainError("frechet_distance: need at least 2 embeddings, got " + std::to_string(n));
  require(x.rows.allFinite(), "frechet_distance: non-finite embeddings");
  GaussianStats s;
  s.mean = x.rows.colwise().mean().transpose();
  const Matrix centered = x.rows.rowwise() - s.mean.transpose();
  s.cov = centered.transpose() * centered / static_cast<double>(n - 1);
  if (n <= x.dim()) s.cov.diagonal().array() += 1e-6;
  return s;
}

namespace detail {

// Symmetric PSD square root; eigenvalues slightly below zero are clamped.
inline Matrix psd_sqrt(const Matrix& a) {
  const Matrix sym = 0.5 * (a + a.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> es(sym);
  Vector ev = es.eigenvalues();
  for (Index i = 0; i < ev.size(); ++i) {
    if (ev(i) < -1e-8) throw NumericError("frechet_distance: covariance is not positive semidefinite");
    ev(i) = std::sqrt(std::max(ev(i), 0.0));
  }
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

// |mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2).
inline double frechet_from_stats(const GaussianStats& a, const GaussianStats& b) {
  require(a.mean.size() == b.mean.size() && a.cov.rows() == b.cov.rows(), "frechet_distance: dimension mismatch");
  const Matrix s1 = detail::psd_sqrt(a.cov);
  const Matrix inner = s1 * b.cov * s1;
  const double tr_cross = detail::psd_sqrt(inner).trace();
  const double fd = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * tr_cross;
  return std::max(fd, 0.0);
}

inline double frechet_distance(const EmbeddingSet& x, const EmbeddingSet& y) {
  if (x.dim() != y.dim()) throw DomainError("frechet_distance: embedding dimensions differ");
  return frechet_from_stats(gaussian_stats(x), gaussian_stats(y));
}

inline constexpr double kKlFloor = 1e-10;

inline Vector softmax(const Eigen::Ref<const Vector>& logits) {
  const double mx = logits.maxCoeff();
  Vector p = (logits.array() - mx).exp().matrix();
  return p / p.sum();
}

// Rows are logit vectors; softmax each and average KL(p_i || q_i) over rows.
inline double kl_divergence(const Eigen::Ref<const Matrix>& p_logits, const Eigen::Ref<const Matrix>& q_logits) {
  if (p_logits.rows() != q_logits.rows() || p_logits.cols() != q_logits.cols())
    throw DomainError("kl_divergence: logit shapes differ");
  require(p_logits.rows() >= 1 && p_logits.cols() >= 1, "kl_divergence: empty input");
  require(p_logits.allFinite() && q_logits.allFinite(), "kl_divergence: non-finite logits");
  double total = 0.0;
  for (Index i = 0; i < p_logits.rows(); ++i) {
    const Vector p = softmax(p_logits.row(i).transpose());
    const Vector q = softmax(q_logits.row(i).transpose());
    double kl = 0.0;
    for (Index j = 0; j < p.size(); ++j) {
      const double pj = std::max(p(j), kKlFloor), qj = std::max(q(j), kKlFloor);
      kl += p(j) * std::log(pj / qj);
    }
    total += std::max(kl, 0.0);
  }
  return total / static_cast<double>(p_logits.rows());
}

inline Matrix normalize_rows(const Matrix& m) {
  Matrix out = m;
  for (Index i = 0; i < out.rows(); ++i) {
    const double n = out.row(i).norm();
    if (n == 0.0) throw DomainError("embedding row " + std::to_string(i) + " has zero norm");
    out.row(i) /= n;
  }
  return out;
}

// Mean cosine similarity of paired rows.
inline double clap_score(const EmbeddingSet& text, const EmbeddingSet& audio) {
  if (text.size() != audio.size() || text.dim() != audio.dim())
    throw DomainError("clap_score: text and audio sets must have equal shapes");
  require(text.size() >= 1, "clap_score: empty sets");
  const Matrix t = normalize_rows(text.rows), a = normalize_rows(audio.rows);
  return (t.cwiseProduct(a)).rowwise().sum().mean();
}

// Row = text query, column = audio candidate.
inline Matrix cosine_similarity(const EmbeddingSet& text, const EmbeddingSet& audio) {
  require(text.dim() == audio.dim(), "cosine_similarity: dimension mismatch");
  return normalize_rows(text.rows) * normalize_rows(audio.rows).transpose();
}

struct Recall {
  double t2a = 0.0;
  double a2t = 0.0;
};

namespace detail {

// Rank of the target among values (0 = best). Ties go to the lower index,
// so an equal score earlier in the list outranks the target.
inline Index rank_of(const Eigen::Ref<const RowVector>& values, Index target) {
  Index rank = 0;
  const double v = values(target);
  for (Index j = 0; j < values.size(); ++j)
    if (values(j) > v || (values(j) == v && j < target)) ++rank;
  return rank;
}

}  // namespace detail

inline Recall recall_at_k(const Eigen::Ref<const Matrix>& sim, int k) {
  require(sim.rows() == sim.cols() && sim.rows() > 0, "recall_at_k: similarity matrix must be square and non-empty");
  if (k < 1 || k > sim.rows())
    throw DomainError("recall_at_k: k must lie in [1, " + std::to_string(sim.rows()) + "], got " + std::to_string(k));
  require(sim.allFinite(), "recall_at_k: non-finite similarities");
  const Index n = sim.rows();
  Index hits_t2a = 0, hits_a2t = 0;
  for (Index i = 0; i < n; ++i) {
    if (detail::rank_of(sim.row(i), i) < k) ++hits_t2a;
    if (detail::rank_of(sim.col(i).transpose(), i) < k) ++hits_a2t;
  }
  return {static_cast<double>(hits_t2a) / n, static_cast<double>(hits_a2t) / n};
}

// ---------------------------------------------------------------------------
// CSV I/O.

// Header "id,dim0,...,dimN"; one row per embedding.
inline EmbeddingSet read_embeddings_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open embedding file " + path.string());
  EmbeddingSet set;
  std::string line;
  std::size_t offset = 0;
  auto fail = [&](const std::string& msg, std::size_t line_no) {
    throw IoError(path.string() + ": line " + std::to_string(line_no) + " (byte " + std::to_string(offset) +
                  "): " + msg);
  };
  if (!std::getline(in, line)) throw IoError(path.string() + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::size_t header_cols = 0;
  {
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    if (cell != "id") fail("header must start with 'id'", 1);
    while (std::getline(ss, cell, ',')) ++header_cols;
    if (header_cols == 0) fail("header has no dimension columns", 1);
  }
  offset += line.size() + 1;
  std::vector<std::vector<double>> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t line_bytes = line.size() + 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) {
      offset += line_bytes;
      continue;
    }
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    set.ids.push_back(cell);
    std::vector<double> vals;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        vals.push_back(std::stod(cell, &used));
        if (used != cell.size()) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        fail("malformed number '" + cell + "'", line_no);
      }
    }
    if (vals.size() != header_cols)
      fail("expected " + std::to_string(header_cols) + " values, found " + std::to_string(vals.size()), line_no);
    rows.push_back(std::move(vals));
    offset += line_bytes;
  }
  set.rows.resize(static_cast<Index>(rows.size()), static_cast<Index>(header_cols));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < header_cols; ++j) set.rows(static_cast<Index>(i), static_cast<Index>(j)) = rows[i][j];
  if (!set.rows.allFinite()) throw IoError(path.string() + ": non-finite embedding values");
  return set;
}

inline void write_embeddings_csv(const std::filesystem::path& path, const EmbeddingSet& set) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "id";
  for (Index j = 0; j < set.dim(); ++j) out << ",dim" << j;
  out << '\n';
  out.precision(17);
  for (Index i = 0; i < set.size(); ++i) {
    out << (static_cast<std::size_t>(i) < set.ids.size() ? set.ids[static_cast<std::size_t>(i)] : std::to_string(i));
    for (Index j = 0; j < set.dim(); ++j) out << ',' << set.rows(i, j);
    out << '\n';
  }
}

struct MetricRow {
  std::string metric;
  double value = 0.0;
  long long n_items = 0;
};

inline std::string format_metric_value(double v) {
  if (std::isnan(v)) return "nan";
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

inline void write_report_csv(const std::filesystem::path& path, const std::vector<MetricRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "metric,value,n_items\n";
  for (const auto& r : rows) out << r.metric << ',' << format_metric_value(r.value) << ',' << r.n_items << '\n';
}

}  // namespace sfx
