#pragma once

// Integrated loudness (ITU-R BS.1770-4 style: K-weighting, 400 ms blocks with
// 75% overlap, -70 LUFS absolute gate, -10 LU relative gate) and a mixer that
// sets speech-to-noise ratios in loudness units.

#include <array>
#include <cmath>
#include <complex>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

namespace ssem {

struct Biquad {
  std::array<double, 3> b{1.0, 0.0, 0.0};
  std::array<double, 3> a{1.0, 0.0, 0.0};

  /// |H(e^{jw})| at frequency `hz`.
  double magnitude(double hz, double sample_rate) const {
    const double w = 2.0 * std::numbers::pi * hz / sample_rate;
    const std::complex<double> z1 = std::polar(1.0, -w), z2 = std::polar(1.0, -2.0 * w);
    return std::abs((b[0] + b[1] * z1 + b[2] * z2) / (a[0] + a[1] * z1 + a[2] * z2));
  }
};

/// The two K-weighting stages (high shelf, then RLB high-pass), designed for
/// any sample rate from the analog prototype used by BS.1770.
inline std::array<Biquad, 2> k_weighting(double sample_rate) {
  std::array<Biquad, 2> stages;
  {
    const double f0 = 1681.974450955533, gain_db = 3.999843853973347, q = 0.7071752369554196;
    const double k = std::tan(std::numbers::pi * f0 / sample_rate);
    const double vh = std::pow(10.0, gain_db / 20.0);
    const double vb = std::pow(vh, 0.4996667741545416);
    const double a0 = 1.0 + k / q + k * k;
    stages[0].b = {(vh + vb * k / q + k * k) / a0, 2.0 * (k * k - vh) / a0, (vh - vb * k / q + k * k) / a0};
    stages[0].a = {1.0, 2.0 * (k * k - 1.0) / a0, (1.0 - k / q + k * k) / a0};
  }
  {
    const double f0 = 38.13547087602444, q = 0.5003270373238773;
    const double k = std::tan(std::numbers::pi * f0 / sample_rate);
    const double a0 = 1.0 + k / q + k * k;
    stages[1].b = {1.0, -2.0, 1.0};
    stages[1].a = {1.0, 2.0 * (k * k - 1.0) / a0, (1.0 - k / q + k * k) / a0};
  }
  return stages;
}

inline std::vector<double> k_weight(std::span<const double> x, double sample_rate) {
  std::vector<double> y(x.begin(), x.end());
  for (const Biquad& s : k_weighting(sample_rate)) {
    double x1 = 0, x2 = 0, y1 = 0, y2 = 0;
    for (double& v : y) {
      const double in = v;
      const double out = s.b[0] * in + s.b[1] * x1 + s.b[2] * x2 - s.a[1] * y1 - s.a[2] * y2;
      x2 = x1;
      x1 = in;
      y2 = y1;
      y1 = out;
      v = out;
    }
  }
  return y;
}

inline constexpr double kSilentLoudness = -std::numeric_limits<double>::infinity();

/// Integrated loudness in LUFS; kSilentLoudness when every block is gated.
inline double lufs(std::span<const double> signal, double sample_rate) {
  const auto block = static_cast<std::size_t>(std::llround(0.4 * sample_rate));
  const auto step = static_cast<std::size_t>(std::llround(0.1 * sample_rate));
  if (signal.size() < block) throw std::invalid_argument("lufs: signal shorter than 400 ms");

  const std::vector<double> y = k_weight(signal, sample_rate);
  std::vector<double> powers;
  for (std::size_t start = 0; start + block <= y.size(); start += step) {
    double sum = 0.0;
    for (std::size_t i = start; i < start + block; ++i) sum += y[i] * y[i];
    powers.push_back(sum / static_cast<double>(block));
  }

  auto loudness_of = [](double power) { return -0.691 + 10.0 * std::log10(power); };
  const double absolute_gate = -70.0;
  double sum = 0.0;
  std::size_t n = 0;
  for (double p : powers) {
    if (p > 0.0 && loudness_of(p) > absolute_gate) {
      sum += p;
      ++n;
    }
  }
  if (n == 0) return kSilentLoudness;
  const double relative_gate = loudness_of(sum / static_cast<double>(n)) - 10.0;
  sum = 0.0;
  n = 0;
  for (double p : powers) {
    if (p > 0.0 && loudness_of(p) > absolute_gate && loudness_of(p) > relative_gate) {
      sum += p;
      ++n;
    }
  }
  if (n == 0) return kSilentLoudness;
  return loudness_of(sum / static_cast<double>(n));
}

struct Mixture {
  std::vector<double> samples;
  double noise_gain = 1.0;  // linear gain applied to the noise stem
};

/// Scales `noise` so that LUFS(speech) - LUFS(scaled noise) == snr_db, then sums.
inline Mixture mix_at_snr(std::span<const double> speech, std::span<const double> noise, double snr_db,
                          double sample_rate) {
  if (speech.size() != noise.size()) throw std::invalid_argument("mix_at_snr: stems differ in length");
  const double ls = lufs(speech, sample_rate);
  const double ln = lufs(noise, sample_rate);
  if (ls == kSilentLoudness || ln == kSilentLoudness) throw std::invalid_argument("mix_at_snr: silent stem");
  Mixture m;
  m.noise_gain = std::pow(10.0, (ls - ln - snr_db) / 20.0);
  m.samples.resize(speech.size());
  for (std::size_t i = 0; i < speech.size(); ++i) m.samples[i] = speech[i] + m.noise_gain * noise[i];
  return m;
}

}  // namespace ssem
