#pragma once

// Scalar training objectives: codec spectral/adversarial/feature-matching
// losses, the symmetric contrastive loss for text-audio alignment, hinge
// loss for distillation discriminators, and guidance velocity mixing.

#include "sfx/dsp.hpp"

#include <array>
#include <cmath>
#include <utility>
#include <vector>

namespace sfx {

struct SpectralScale {
  int window;
  int n_mels;
};

// Multi-scale windows and mel sizes of the codec's reconstruction loss.
inline constexpr std::array<SpectralScale, 7> kSpectralScales{{
    {32, 5}, {64, 10}, {128, 20}, {256, 40}, {512, 80}, {1024, 160}, {2048, 320}}};

// Sum over scales of the mean L1 distance between log-mel spectrograms,
// hop = window / 4.
inline double spectral_loss(const AudioBuffer& x, const AudioBuffer& y) {
  require(x.size() == y.size(), "spectral_loss: length mismatch");
  require(x.sample_rate == y.sample_rate, "spectral_loss: sample rate mismatch");
  require(!x.empty(), "spectral_loss: empty audio");
  double total = 0.0;
  for (const auto& scale : kSpectralScales) {
    const StftConfig cfg{scale.window, scale.window / 4};
    const MelFilterbank fb = mel_filterbank(scale.n_mels, cfg, x.sample_rate);
    total += (log_mel(x, fb, cfg) - log_mel(y, fb, cfg)).cwiseAbs().mean();
  }
  return total;
}

struct LsganLosses {
  double disc_loss;
  double adv_loss;
};

// disc = 1/2 E[(D(x)-1)^2] + 1/2 E[(D(G(x))+1)^2], adv = E[(D(G(x))-1)^2].
inline LsganLosses lsgan_losses(const Eigen::Ref<const Matrix>& d_real, const Eigen::Ref<const Matrix>& d_fake) {
  require(d_real.size() > 0 && d_fake.size() > 0, "lsgan_losses: empty scores");
  require(d_real.allFinite() && d_fake.allFinite(), "lsgan_losses: non-finite scores");
  const double real_term = (d_real.array() - 1.0).square().mean();
  const double fake_term = (d_fake.array() + 1.0).square().mean();
  return {0.5 * real_term + 0.5 * fake_term, (d_fake.array() - 1.0).square().mean()};
}

// Activations of one discriminator; units_per_layer[i] is N_i, the number
// of elements in layers[i].
struct FeatureMaps {
  std::vector<Matrix> layers;
  std::vector<Index> units_per_layer;

  static FeatureMaps from_layers(std::vector<Matrix> layers) {
    FeatureMaps fm;
    for (const auto& l : layers) fm.units_per_layer.push_back(l.size());
    fm.layers = std::move(layers);
    return fm;
  }
};

// Mean over discriminators of the mean over layers of ||real_i - fake_i||_1 / N_i.
inline double feature_matching_loss(const std::vector<FeatureMaps>& real, const std::vector<FeatureMaps>& fake) {
  require(real.size() == fake.size(), "feature_matching_loss: discriminator count mismatch");
  require(!real.empty(), "feature_matching_loss: no discriminators");
  double total = 0.0;
  for (std::size_t k = 0; k < real.size(); ++k) {
    const FeatureMaps& r = real[k];
    const FeatureMaps& f = fake[k];
    require(r.layers.size() == f.layers.size() && r.layers.size() == r.units_per_layer.size() &&
                f.layers.size() == f.units_per_layer.size(),
            "feature_matching_loss: layer count mismatch");
    require(!r.layers.empty(), "feature_matching_loss: discriminator without layers");
    double disc_sum = 0.0;
    for (std::size_t i = 0; i < r.layers.size(); ++i) {
      const Matrix& a = r.layers[i];
      const Matrix& b = f.layers[i];
      require(a.rows() == b.rows() && a.cols() == b.cols(), "feature_matching_loss: layer shape mismatch");
      require(r.units_per_layer[i] == a.size() && f.units_per_layer[i] == b.size() && a.size() > 0,
              "feature_matching_loss: units_per_layer does not match layer size");
      require(a.allFinite() && b.allFinite(), "feature_matching_loss: non-finite activations");
      disc_sum += (a - b).cwiseAbs().sum() / static_cast<double>(r.units_per_layer[i]);
    }
    total += disc_sum / static_cast<double>(r.layers.size());
  }
  return total / static_cast<double>(real.size());
}

inline constexpr double kSpecWeight = 15.0;
inline constexpr double kAdvWeight = 1.0;
inline constexpr double kFmWeight = 2.0;

inline double ae_total_loss(double spec, double adv, double fm) {
  return kSpecWeight * spec + kAdvWeight * adv + kFmWeight * fm;
}

// Linear map into the shared text-audio space.
struct ProjectionHead {
  Matrix weight;  // d_out x d_in
  Vector bias;    // d_out
};

// Rows of raw are pooled encoder outputs; returns L2-normalized W x + b rows.
inline Matrix clap_project(const Eigen::Ref<const Matrix>& raw, const ProjectionHead& head) {
  require(head.weight.rows() == head.bias.size(), "clap_project: bias size mismatch");
  require(raw.cols() == head.weight.cols(), "clap_project: input dimension mismatch");
  require(raw.allFinite() && head.weight.allFinite() && head.bias.allFinite(), "clap_project: non-finite input");
  Matrix out = raw * head.weight.transpose();
  out.rowwise() += head.bias.transpose();
  for (Index i = 0; i < out.rows(); ++i) {
    const double n = out.row(i).norm();
    require(n > 0.0, "clap_project: projected embedding has zero norm");
    out.row(i) /= n;
  }
  return out;
}

struct ClapBatch {
  Matrix text_embeddings;   // N x D
  Matrix audio_embeddings;  // N x D
  double temperature = 0.2;
};

namespace detail {

// Mean over rows of -log softmax(logits row)[i, i].
inline double diagonal_nll(const Matrix& logits) {
  double total = 0.0;
  for (Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    const double lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
    total += lse - logits(i, i);
  }
  return total / static_cast<double>(logits.rows());
}

}  // namespace detail

// Symmetric InfoNCE over audio->text and text->audio softmaxes; this is the
// negated log-likelihood, so it is >= 0 and minimized by aligned pairs.
inline double contrastive_loss(const ClapBatch& batch) {
  const Matrix& t = batch.text_embeddings;
  const Matrix& a = batch.audio_embeddings;
  require(t.rows() >= 1, "contrastive_loss: empty batch");
  require(t.rows() == a.rows() && t.cols() == a.cols(), "contrastive_loss: text/audio shape mismatch");
  require(batch.temperature > 0.0, "contrastive_loss: temperature must be positive");
  require(t.allFinite() && a.allFinite(), "contrastive_loss: non-finite embeddings");
  for (Index i = 0; i < t.rows(); ++i) {
    require(std::abs(t.row(i).norm() - 1.0) <= 1e-9 && std::abs(a.row(i).norm() - 1.0) <= 1e-9,
            "contrastive_loss: embeddings must be unit-normalized");
  }
  const Matrix logits = (a * t.transpose()) / batch.temperature;  // audio i vs text j
  return 0.5 * (detail::diagonal_nll(logits) + detail::diagonal_nll(logits.transpose()));
}

enum class CfgMode {
  standard,       // v_u + w (v_c - v_u); neutral at w = 1
  swapped,  // (1 - w) v_c + w v_u; neutral at w = 0
};

inline double cfg_neutral_scale(CfgMode mode) { return mode == CfgMode::standard ? 1.0 : 0.0; }

inline Matrix cfg_combine(const Eigen::Ref<const Matrix>& v_cond, const Eigen::Ref<const Matrix>& v_uncond,
                          double scale, CfgMode mode = CfgMode::standard) {
  require(v_cond.rows() == v_uncond.rows() && v_cond.cols() == v_uncond.cols(), "cfg_combine: shape mismatch");
  // Exact at the neutral point; v_u + (v_c - v_u) is not bitwise v_c.
  if (scale == cfg_neutral_scale(mode)) return v_cond;
  if (mode == CfgMode::standard) return v_uncond + scale * (v_cond - v_uncond);
  return (1.0 - scale) * v_cond + scale * v_uncond;
}

// E[relu(1 - D(x_true))] + E[relu(1 + D(x_fake))].
inline double hinge_disc_loss(const Eigen::Ref<const Matrix>& d_true, const Eigen::Ref<const Matrix>& d_fake) {
  require(d_true.size() > 0 && d_fake.size() > 0, "hinge_disc_loss: empty scores");
  require(d_true.allFinite() && d_fake.allFinite(), "hinge_disc_loss: non-finite scores");
  return (1.0 - d_true.array()).max(0.0).mean() + (1.0 + d_fake.array()).max(0.0).mean();
}

}  // namespace sfx
