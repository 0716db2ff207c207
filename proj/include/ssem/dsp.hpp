#pragma once

// Signal front end: framing, STFT/ISTFT with a square-root Hann pair,
// mel analysis with power-law compression and the QEQ affine, and mel-mask
// application back onto the linear spectrum.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ssem/fft.hpp"
#include "ssem/quant.hpp"

namespace ssem {

enum class WindowKind : std::uint16_t { SqrtHann = 0 };

struct DspConfig {
  std::uint32_t sample_rate = 16000;
  std::uint32_t frame_size = 512;
  std::uint32_t hop_size = 256;
  std::uint32_t mel_bins = 128;
  double power_exponent = 0.3;
  WindowKind window = WindowKind::SqrtHann;

  std::size_t fft_bins() const { return frame_size / 2 + 1; }
  double hop_seconds() const { return static_cast<double>(hop_size) / sample_rate; }
  double frame_seconds() const { return static_cast<double>(frame_size) / sample_rate; }

  void validate() const {
    if (sample_rate == 0) throw std::invalid_argument("DspConfig: sample rate must be positive");
    if (frame_size < 2 || frame_size % 2 != 0) throw std::invalid_argument("DspConfig: frame size must be even");
    if (hop_size * 2 != frame_size) throw std::invalid_argument("DspConfig: hop must be half the frame size");
    if (mel_bins == 0 || mel_bins > fft_bins()) throw std::invalid_argument("DspConfig: mel bins out of range");
    if (!(power_exponent > 0.0 && power_exponent <= 1.0)) {
      throw std::invalid_argument("DspConfig: power exponent must be in (0, 1]");
    }
    if (window != WindowKind::SqrtHann) throw std::invalid_argument("DspConfig: unknown window");
  }

  friend bool operator==(const DspConfig&, const DspConfig&) = default;
};

/// Periodic square-root Hann; its square overlap-adds to exactly 1 at 50% hop.
inline std::vector<double> sqrt_hann(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double h = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
    w[i] = std::sqrt(h);
  }
  return w;
}

/// Complex frames, bins x frames, stored frame-major.
class Spectrogram {
 public:
  Spectrogram() = default;
  Spectrogram(std::size_t bins, std::size_t frames) : bins_(bins), frames_(frames), data_(bins * frames) {}

  std::size_t bins() const { return bins_; }
  std::size_t frames() const { return frames_; }
  std::complex<double>& at(std::size_t bin, std::size_t frame) { return data_[frame * bins_ + bin]; }
  const std::complex<double>& at(std::size_t bin, std::size_t frame) const { return data_[frame * bins_ + bin]; }
  std::span<std::complex<double>> frame(std::size_t t) { return {data_.data() + t * bins_, bins_}; }
  std::span<const std::complex<double>> frame(std::size_t t) const { return {data_.data() + t * bins_, bins_}; }

 private:
  std::size_t bins_ = 0;
  std::size_t frames_ = 0;
  std::vector<std::complex<double>> data_;
};

/// Real matrix, rows x cols, row-major (used for mel features and masks).
struct RealMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  RealMatrix() = default;
  RealMatrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

/// Per-frame analysis/synthesis shared by the batch transforms and the
/// streaming engine.
class FrameTransform {
 public:
  explicit FrameTransform(const DspConfig& cfg)
      : frame_(cfg.frame_size), window_(sqrt_hann(cfg.frame_size)), fft_(cfg.frame_size), scratch_(cfg.frame_size) {}

  std::size_t frame_size() const { return frame_; }
  std::size_t bins() const { return fft_.bins(); }

  void analyze(std::span<const double> samples, std::span<std::complex<double>> spectrum) {
    for (std::size_t i = 0; i < frame_; ++i) scratch_[i] = samples[i] * window_[i];
    fft_.forward(scratch_, spectrum);
  }

  /// Inverse transform with synthesis windowing, added into `ola`.
  void synthesize_add(std::span<const std::complex<double>> spectrum, std::span<double> ola) {
    fft_.inverse(spectrum, scratch_);
    for (std::size_t i = 0; i < frame_; ++i) ola[i] += scratch_[i] * window_[i];
  }

 private:
  std::size_t frame_;
  std::vector<double> window_;
  RealFft fft_;
  std::vector<double> scratch_;
};

/// Frames start at multiples of the hop; no padding is applied.
inline Spectrogram stft(std::span<const double> signal, const DspConfig& cfg) {
  if (signal.size() < cfg.frame_size) {
    throw std::invalid_argument("stft: signal shorter than one frame (" + std::to_string(signal.size()) + " < " +
                                std::to_string(cfg.frame_size) + ")");
  }
  const std::size_t frames = 1 + (signal.size() - cfg.frame_size) / cfg.hop_size;
  FrameTransform ft(cfg);
  Spectrogram spec(ft.bins(), frames);
  for (std::size_t t = 0; t < frames; ++t) ft.analyze(signal.subspan(t * cfg.hop_size, cfg.frame_size), spec.frame(t));
  return spec;
}

/// Overlap-add resynthesis; output length is (frames - 1) * hop + frame.
/// Samples in [hop, frames * hop) are perfectly reconstructed.
inline std::vector<double> istft(const Spectrogram& spec, const DspConfig& cfg) {
  if (spec.bins() != cfg.fft_bins()) throw std::invalid_argument("istft: bin count does not match frame size");
  if (spec.frames() == 0) return {};
  std::vector<double> out((spec.frames() - 1) * cfg.hop_size + cfg.frame_size, 0.0);
  FrameTransform ft(cfg);
  for (std::size_t t = 0; t < spec.frames(); ++t) {
    ft.synthesize_add(spec.frame(t), std::span<double>(out).subspan(t * cfg.hop_size, cfg.frame_size));
  }
  return out;
}

/// Nonnegative B_g x B_f projection; each row is a contiguous band.
struct MelFilterbank {
  std::size_t mel_bins = 0;
  std::size_t fft_bins = 0;
  std::vector<float> weights;  // row-major

  float at(std::size_t m, std::size_t k) const { return weights[m * fft_bins + k]; }

  void validate() const {
    if (weights.size() != mel_bins * fft_bins) throw std::invalid_argument("MelFilterbank: size mismatch");
    for (std::size_t m = 0; m < mel_bins; ++m) {
      std::size_t first = fft_bins, last = 0;
      for (std::size_t k = 0; k < fft_bins; ++k) {
        const float w = at(m, k);
        if (!(w >= 0.0f) || !std::isfinite(w)) throw std::invalid_argument("MelFilterbank: negative or non-finite weight");
        if (w > 0.0f) {
          first = std::min(first, k);
          last = k;
        }
      }
      if (first == fft_bins) throw std::invalid_argument("MelFilterbank: empty filter row " + std::to_string(m));
      for (std::size_t k = first; k <= last; ++k) {
        if (at(m, k) == 0.0f) throw std::invalid_argument("MelFilterbank: non-contiguous filter row " + std::to_string(m));
      }
    }
  }

  friend bool operator==(const MelFilterbank&, const MelFilterbank&) = default;
};

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Triangular filters, mel-spaced from 0 Hz to Nyquist, apex height 1.
/// A filter too narrow to cover any bin collapses onto its nearest bin.
inline MelFilterbank make_mel_filterbank(const DspConfig& cfg) {
  cfg.validate();
  MelFilterbank fb;
  fb.mel_bins = cfg.mel_bins;
  fb.fft_bins = cfg.fft_bins();
  fb.weights.assign(fb.mel_bins * fb.fft_bins, 0.0f);
  const double nyquist = cfg.sample_rate / 2.0;
  const double bin_hz = static_cast<double>(cfg.sample_rate) / cfg.frame_size;
  const double mel_max = hz_to_mel(nyquist);
  std::vector<double> edges(cfg.mel_bins + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(mel_max * static_cast<double>(i) / static_cast<double>(cfg.mel_bins + 1));
  }
  for (std::size_t m = 0; m < fb.mel_bins; ++m) {
    const double lo = edges[m], center = edges[m + 1], hi = edges[m + 2];
    bool any = false;
    for (std::size_t k = 0; k < fb.fft_bins; ++k) {
      const double f = k * bin_hz;
      const double w = std::max(0.0, std::min((f - lo) / (center - lo), (hi - f) / (hi - center)));
      if (w > 0.0) {
        fb.weights[m * fb.fft_bins + k] = static_cast<float>(w);
        any = true;
      }
    }
    if (!any) {
      const auto k = std::min(fb.fft_bins - 1, static_cast<std::size_t>(std::lround(center / bin_hz)));
      fb.weights[m * fb.fft_bins + k] = 1.0f;
    }
  }
  return fb;
}

struct QeqParams {
  std::vector<float> gain;
  std::vector<float> bias;

  static QeqParams identity(std::size_t n) { return {std::vector<float>(n, 1.0f), std::vector<float>(n, 0.0f)}; }

  void validate(std::size_t n) const {
    if (gain.size() != n || bias.size() != n) throw std::invalid_argument("QeqParams: length does not match mel bins");
    for (std::size_t i = 0; i < n; ++i) {
      if (!std::isfinite(gain[i]) || !std::isfinite(bias[i])) throw std::invalid_argument("QeqParams: non-finite value");
    }
  }

  friend bool operator==(const QeqParams&, const QeqParams&) = default;
};

/// One frame of g * (G|Y|)^p + b.
inline void mel_frame(std::span<const std::complex<double>> spectrum, const MelFilterbank& fb, const QeqParams& qeq,
                      double power, std::span<double> out) {
  if (spectrum.size() != fb.fft_bins || out.size() != fb.mel_bins || qeq.gain.size() != fb.mel_bins ||
      qeq.bias.size() != fb.mel_bins) {
    throw std::invalid_argument("mel_features: shape mismatch");
  }
  for (std::size_t m = 0; m < fb.mel_bins; ++m) {
    double e = 0.0;
    const float* row = fb.weights.data() + m * fb.fft_bins;
    for (std::size_t k = 0; k < fb.fft_bins; ++k) {
      if (row[k] != 0.0f) e += static_cast<double>(row[k]) * std::abs(spectrum[k]);
    }
    out[m] = static_cast<double>(qeq.gain[m]) * std::pow(e, power) + static_cast<double>(qeq.bias[m]);
  }
}

inline RealMatrix mel_features(const Spectrogram& spec, const MelFilterbank& fb, const QeqParams& qeq,
                               double power = 0.3) {
  if (spec.bins() != fb.fft_bins) throw std::invalid_argument("mel_features: shape mismatch");
  RealMatrix z(fb.mel_bins, spec.frames());
  std::vector<double> col(fb.mel_bins);
  for (std::size_t t = 0; t < spec.frames(); ++t) {
    mel_frame(spec.frame(t), fb, qeq, power, col);
    for (std::size_t m = 0; m < fb.mel_bins; ++m) z.at(m, t) = col[m];
  }
  return z;
}

/// Clamp to [-1, 1] then quantize into Q8: the network input.
inline void quantize_features(std::span<const double> features, std::span<std::int16_t> out) {
  for (std::size_t i = 0; i < features.size(); ++i) {
    out[i] = static_cast<std::int16_t>(quantize(std::clamp(features[i], -1.0, 1.0), kQ8));
  }
}

/// Linear-frequency gain G^T m, clipped to [0, 1].
inline void mask_gain(const MelFilterbank& fb, std::span<const double> mask, std::span<double> gain) {
  if (mask.size() != fb.mel_bins || gain.size() != fb.fft_bins) throw std::invalid_argument("apply_mask: shape mismatch");
  std::fill(gain.begin(), gain.end(), 0.0);
  for (std::size_t m = 0; m < fb.mel_bins; ++m) {
    const float* row = fb.weights.data() + m * fb.fft_bins;
    for (std::size_t k = 0; k < fb.fft_bins; ++k) gain[k] += static_cast<double>(row[k]) * mask[m];
  }
  for (double& g : gain) g = std::clamp(g, 0.0, 1.0);
}

inline Spectrogram apply_mask(const RealMatrix& mask, const Spectrogram& spec, const MelFilterbank& fb) {
  if (mask.rows != fb.mel_bins || mask.cols != spec.frames() || spec.bins() != fb.fft_bins) {
    throw std::invalid_argument("apply_mask: shape mismatch");
  }
  Spectrogram out(spec.bins(), spec.frames());
  std::vector<double> m(fb.mel_bins), gain(fb.fft_bins);
  for (std::size_t t = 0; t < spec.frames(); ++t) {
    for (std::size_t i = 0; i < fb.mel_bins; ++i) m[i] = mask.at(i, t);
    mask_gain(fb, m, gain);
    for (std::size_t k = 0; k < fb.fft_bins; ++k) out.at(k, t) = spec.at(k, t) * gain[k];
  }
  return out;
}

}  // namespace ssem
