#pragma once

// STFT analysis/synthesis, mel filterbanks, the softplus complex head, and a
// phase-modulation test-signal generator.

#include "sfx/core.hpp"

#include <unsupported/Eigen/FFT>

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <string>
#include <vector>

namespace sfx {

using Complex = std::complex<double>;
using ComplexMatrix = Eigen::MatrixXcd;

struct AudioBuffer {
  std::vector<double> samples;
  int sample_rate = 48000;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
};

enum class WindowKind { hann };

struct StftConfig {
  int n_fft = 960;
  int hop = 480;
  WindowKind window = WindowKind::hann;

  int bins() const { return n_fft / 2 + 1; }
};

// frames x bins complex coefficients.
struct ComplexSpectrogram {
  ComplexMatrix data;
  StftConfig config;
  std::size_t signal_length = 0;
  int sample_rate = 48000;

  Index frames() const { return data.rows(); }
  Index bins() const { return data.cols(); }
};

struct MelFilterbank {
  Matrix weights;  // n_mels x bins
  int n_mels = 0;
  int sample_rate = 0;
  std::vector<double> center_hz;
};

// Raw codec-head outputs: magnitude pre-activation and unnormalized
// real/imaginary parts, all frames x bins.
struct HeadOutput {
  Matrix m;
  Matrix x_raw;
  Matrix y_raw;
};

namespace detail {

inline void validate(const StftConfig& c) {
  require(c.n_fft >= 2 && c.n_fft % 2 == 0, "stft: n_fft must be even and >= 2");
  require(c.hop >= 1 && c.hop <= c.n_fft, "stft: hop must be in [1, n_fft]");
}

// Mirror an out-of-range index back into [0, n) (numpy "reflect" mode,
// applied repeatedly for pads longer than the signal).
inline std::size_t reflect_index(long long i, std::size_t n) {
  if (n == 1) return 0;
  const long long period = 2 * (static_cast<long long>(n) - 1);
  long long k = i % period;
  if (k < 0) k += period;
  if (k >= static_cast<long long>(n)) k = period - k;
  return static_cast<std::size_t>(k);
}

}  // namespace detail

// Periodic Hann window of length n.
inline std::vector<double> hann_window(int n) {
  std::vector<double> w(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    w[static_cast<std::size_t>(i)] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n);
  return w;
}

inline std::size_t stft_frame_count(std::size_t length, int hop) {
  return (length + static_cast<std::size_t>(hop) - 1) / static_cast<std::size_t>(hop);
}

inline ComplexSpectrogram stft(const AudioBuffer& audio, const StftConfig& config) {
  detail::validate(config);
  require(!audio.empty(), "stft: empty audio");
  require(audio.sample_rate > 0, "stft: sample rate must be positive");

  const int n = config.n_fft;
  const int half = n / 2;
  const std::size_t len = audio.size();
  const std::size_t frames = stft_frame_count(len, config.hop);
  const auto window = hann_window(n);

  ComplexSpectrogram out;
  out.config = config;
  out.signal_length = len;
  out.sample_rate = audio.sample_rate;
  out.data.resize(static_cast<Index>(frames), config.bins());

  Eigen::FFT<double> fft;
  std::vector<double> frame(static_cast<std::size_t>(n));
  std::vector<Complex> spectrum;
  for (std::size_t f = 0; f < frames; ++f) {
    const long long start = static_cast<long long>(f) * config.hop - half;
    for (int i = 0; i < n; ++i) {
      const std::size_t src = detail::reflect_index(start + i, len);
      frame[static_cast<std::size_t>(i)] = audio.samples[src] * window[static_cast<std::size_t>(i)];
    }
    fft.fwd(spectrum, frame);
    for (int k = 0; k < config.bins(); ++k)
      out.data(static_cast<Index>(f), k) = spectrum[static_cast<std::size_t>(k)];
  }
  return out;
}

// Weighted overlap-add inverse, normalized by the summed squared window.
inline AudioBuffer istft(const ComplexSpectrogram& spec) {
  const StftConfig& config = spec.config;
  detail::validate(config);
  require(spec.bins() == config.bins(), "istft: bin count does not match n_fft/2+1");
  require(spec.frames() >= 1, "istft: no frames");
  require(spec.data.allFinite(), "istft: non-finite coefficients");

  const int n = config.n_fft;
  const int half = n / 2;
  const std::size_t frames = static_cast<std::size_t>(spec.frames());
  const std::size_t length =
      spec.signal_length > 0 ? spec.signal_length : frames * static_cast<std::size_t>(config.hop);
  require(stft_frame_count(length, config.hop) == frames,
          "istft: frame count inconsistent with signal length");

  const auto window = hann_window(n);
  const std::size_t padded = (frames - 1) * static_cast<std::size_t>(config.hop) + static_cast<std::size_t>(n);
  std::vector<double> acc(padded, 0.0);
  std::vector<double> wsum(padded, 0.0);

  Eigen::FFT<double> fft;
  std::vector<Complex> full(static_cast<std::size_t>(n));
  std::vector<Complex> time;
  for (std::size_t f = 0; f < frames; ++f) {
    for (int k = 0; k <= half; ++k) full[static_cast<std::size_t>(k)] = spec.data(static_cast<Index>(f), k);
    // Hermitian completion; DC and Nyquist must be real for a real frame.
    full[0] = Complex(full[0].real(), 0.0);
    full[static_cast<std::size_t>(half)] = Complex(full[static_cast<std::size_t>(half)].real(), 0.0);
    for (int k = half + 1; k < n; ++k) full[static_cast<std::size_t>(k)] = std::conj(full[static_cast<std::size_t>(n - k)]);
    fft.inv(time, full);
    const std::size_t offset = f * static_cast<std::size_t>(config.hop);
    for (int i = 0; i < n; ++i) {
      const double w = window[static_cast<std::size_t>(i)];
      acc[offset + static_cast<std::size_t>(i)] += time[static_cast<std::size_t>(i)].real() * w;
      wsum[offset + static_cast<std::size_t>(i)] += w * w;
    }
  }

  AudioBuffer out;
  out.sample_rate = spec.sample_rate;
  out.samples.resize(length);
  for (std::size_t i = 0; i < length; ++i) {
    const std::size_t p = i + static_cast<std::size_t>(half);
    const double ws = wsum[p];
    out.samples[i] = ws > 1e-12 ? acc[p] / ws : 0.0;
  }
  return out;
}

// softplus(m) * (x' + j y') / |x' + j y'|; phase 0 when x' = y' = 0.
inline Complex head_coefficient(double m, double x_raw, double y_raw) {
  const double mag = softplus(m);
  const double norm = std::hypot(x_raw, y_raw);
  if (norm == 0.0) return {mag, 0.0};
  return {mag * (x_raw / norm), mag * (y_raw / norm)};
}

inline ComplexSpectrogram head_to_complex(const HeadOutput& h, const StftConfig& config = {},
                                          int sample_rate = 48000, std::size_t signal_length = 0) {
  require(h.m.rows() == h.x_raw.rows() && h.m.cols() == h.x_raw.cols() &&
              h.m.rows() == h.y_raw.rows() && h.m.cols() == h.y_raw.cols(),
          "head_to_complex: m, x', y' shapes differ");
  require(h.m.allFinite() && h.x_raw.allFinite() && h.y_raw.allFinite(),
          "head_to_complex: non-finite input");
  ComplexSpectrogram out;
  out.config = config;
  out.sample_rate = sample_rate;
  out.signal_length = signal_length;
  out.data.resize(h.m.rows(), h.m.cols());
  for (Index j = 0; j < h.m.cols(); ++j)
    for (Index i = 0; i < h.m.rows(); ++i)
      out.data(i, j) = head_coefficient(h.m(i, j), h.x_raw(i, j), h.y_raw(i, j));
  return out;
}

// Inverse of head_to_complex up to the positive scale of (x', y'):
// m = softplus^-1(|X|), (x', y') = (Re X, Im X).
inline HeadOutput complex_to_head(const ComplexSpectrogram& spec) {
  HeadOutput h;
  h.m.resize(spec.frames(), spec.bins());
  h.x_raw.resize(spec.frames(), spec.bins());
  h.y_raw.resize(spec.frames(), spec.bins());
  for (Index j = 0; j < spec.bins(); ++j) {
    for (Index i = 0; i < spec.frames(); ++i) {
      const Complex c = spec.data(i, j);
      const double mag = std::max(std::abs(c), 1e-300);
      h.m(i, j) = mag > 30.0 ? mag + std::log(-std::expm1(-mag)) : std::log(std::expm1(mag));
      h.x_raw(i, j) = c.real();
      h.y_raw(i, j) = c.imag();
    }
  }
  return h;
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// Triangular filters with centers equally spaced on the mel scale between 0
// and Nyquist, peak height 1. A filter too narrow to cover any FFT bin gets
// a unit weight on the bin nearest its center.
inline MelFilterbank mel_filterbank(int n_mels, const StftConfig& config, int sample_rate) {
  detail::validate(config);
  require(n_mels >= 1, "mel_filterbank: n_mels must be >= 1");
  require(sample_rate > 0, "mel_filterbank: sample rate must be positive");
  const int bins = config.bins();
  require(n_mels <= bins, "mel_filterbank: n_mels larger than number of bins");

  const double mel_max = hz_to_mel(sample_rate / 2.0);
  std::vector<double> edges(static_cast<std::size_t>(n_mels) + 2);
  for (std::size_t i = 0; i < edges.size(); ++i)
    edges[i] = mel_to_hz(mel_max * static_cast<double>(i) / static_cast<double>(n_mels + 1));

  MelFilterbank fb;
  fb.n_mels = n_mels;
  fb.sample_rate = sample_rate;
  fb.weights = Matrix::Zero(n_mels, bins);
  fb.center_hz.resize(static_cast<std::size_t>(n_mels));
  const double bin_hz = static_cast<double>(sample_rate) / config.n_fft;
  for (int m = 0; m < n_mels; ++m) {
    const double lo = edges[static_cast<std::size_t>(m)];
    const double center = edges[static_cast<std::size_t>(m) + 1];
    const double hi = edges[static_cast<std::size_t>(m) + 2];
    fb.center_hz[static_cast<std::size_t>(m)] = center;
    for (int k = 0; k < bins; ++k) {
      const double f = k * bin_hz;
      const double rise = (f - lo) / (center - lo);
      const double fall = (hi - f) / (hi - center);
      fb.weights(m, k) = std::max(0.0, std::min(rise, fall));
    }
    if (fb.weights.row(m).maxCoeff() <= 0.0) {
      const int nearest = std::clamp(static_cast<int>(std::lround(center / bin_hz)), 0, bins - 1);
      fb.weights(m, nearest) = 1.0;
    }
  }
  return fb;
}

inline constexpr double kLogFloor = 1e-5;

// frames x bins magnitudes.
inline Matrix magnitude(const ComplexSpectrogram& spec) { return spec.data.cwiseAbs(); }

// log(max(fb * |stft|, eps)), frames x n_mels.
inline Matrix log_mel(const AudioBuffer& audio, const MelFilterbank& fb, const StftConfig& config,
                      double floor = kLogFloor) {
  require(audio.sample_rate == fb.sample_rate, "log_mel: sample rate differs from filterbank");
  require(fb.weights.cols() == config.bins(), "log_mel: filterbank does not match n_fft");
  const Matrix mel = magnitude(stft(audio, config)) * fb.weights.transpose();
  return mel.unaryExpr([floor](double v) { return std::log(std::max(v, floor)); });
}

// Reciprocal conventions for the codec's compression: samples per latent
// value (hop / latent_dim) and latent values per sample (latent_dim / hop).
inline double samples_per_latent_value(int hop, int latent_dim) {
  return static_cast<double>(hop) / latent_dim;
}
inline double latent_values_per_sample(int hop, int latent_dim) {
  return static_cast<double>(latent_dim) / hop;
}

struct WapyConfig {
  int min_components = 1;
  int max_components = 3;
  int min_partials = 1;
  int max_partials = 20;
  double min_f0_hz = 40.0;
  double max_f0_hz = 2000.0;
  int min_breakpoints = 2;
  int max_breakpoints = 6;
  double max_harmonic_deviation = 0.03;  // relative detuning per partial
  double max_pm_index = 2.0;
  double peak = 0.9;
};

// Phase-modulation synthesis: a mix of 1-3 components, each a stack of
// partials following a piecewise-linear pitch trajectory, with a random
// spectral envelope and per-partial inharmonic detuning.
inline AudioBuffer wapy_synthesize(std::uint64_t seed, double duration_s, int sample_rate,
                                   const WapyConfig& cfg = {}) {
  require(duration_s > 0.0, "wapy_synthesize: duration must be positive");
  require(sample_rate > 0, "wapy_synthesize: sample rate must be positive");
  require(cfg.min_components >= 1 && cfg.min_components <= cfg.max_components,
          "wapy_synthesize: invalid component range");
  require(cfg.min_partials >= 1 && cfg.min_partials <= cfg.max_partials && cfg.max_partials <= 20,
          "wapy_synthesize: partial count must lie in [1, 20]");

  Rng rng(seed);
  auto rand_int = [&rng](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };

  const std::size_t n = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(duration_s * sample_rate)));
  const double nyquist_guard = 0.45 * sample_rate;
  const double two_pi = 2.0 * std::numbers::pi;
  AudioBuffer out;
  out.sample_rate = sample_rate;
  out.samples.assign(n, 0.0);

  const int components = rand_int(cfg.min_components, cfg.max_components);
  for (int c = 0; c < components; ++c) {
    const int partials = rand_int(cfg.min_partials, cfg.max_partials);
    const int breakpoints = rand_int(cfg.min_breakpoints, cfg.max_breakpoints);
    std::vector<double> bp_f0(static_cast<std::size_t>(breakpoints));
    const double log_lo = std::log(cfg.min_f0_hz);
    const double log_hi = std::log(cfg.max_f0_hz);
    for (auto& f : bp_f0) f = std::exp(uniform(rng, log_lo, log_hi));

    const double tilt = uniform(rng, 0.0, 2.0);
    std::vector<double> amp(static_cast<std::size_t>(partials));
    std::vector<double> detune(static_cast<std::size_t>(partials));
    std::vector<double> phase(static_cast<std::size_t>(partials));
    for (int k = 0; k < partials; ++k) {
      amp[static_cast<std::size_t>(k)] = std::pow(k + 1.0, -tilt) * uniform(rng, 0.2, 1.0);
      detune[static_cast<std::size_t>(k)] = uniform(rng, -cfg.max_harmonic_deviation, cfg.max_harmonic_deviation);
      phase[static_cast<std::size_t>(k)] = uniform(rng, 0.0, two_pi);
    }
    const double mod_ratio = uniform(rng, 0.5, 3.0);
    const double mod_index = uniform(rng, 0.0, cfg.max_pm_index);
    const double gain = uniform(rng, 0.3, 1.0);

    double mod_phase = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      // Linear interpolation of f0 between evenly spaced breakpoints.
      const double pos = (n > 1 ? static_cast<double>(i) / static_cast<double>(n - 1) : 0.0) * (breakpoints - 1);
      const int seg = std::min(static_cast<int>(pos), breakpoints - 2);
      const double frac = pos - seg;
      const double f0 = (1.0 - frac) * bp_f0[static_cast<std::size_t>(seg)] + frac * bp_f0[static_cast<std::size_t>(seg) + 1];

      const double modulation = mod_index * std::sin(mod_phase);
      double s = 0.0;
      for (int k = 0; k < partials; ++k) {
        const auto ku = static_cast<std::size_t>(k);
        const double fk = (k + 1) * f0 * (1.0 + detune[ku]);
        if (fk < nyquist_guard) s += amp[ku] * std::sin(phase[ku] + modulation);
        phase[ku] = std::fmod(phase[ku] + two_pi * fk / sample_rate, two_pi);
      }
      mod_phase = std::fmod(mod_phase + two_pi * mod_ratio * f0 / sample_rate, two_pi);
      out.samples[i] += gain * s;
    }
  }

  double peak = 0.0;
  for (double v : out.samples) peak = std::max(peak, std::abs(v));
  if (peak > 0.0) {
    const double scale = cfg.peak / peak;
    for (double& v : out.samples) v *= scale;
  }
  return out;
}

}  // namespace sfx
