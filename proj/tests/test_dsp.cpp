#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "ssem/dsp.hpp"
#include "ssem/fft.hpp"
#include "support/oracles.hpp"

using namespace ssem;

namespace {

DspConfig small_cfg() {
  DspConfig c;
  c.frame_size = 64;
  c.hop_size = 32;
  c.mel_bins = 12;
  return c;
}

}  // namespace

TEST(DspConfig, Defaults) {
  DspConfig c;
  EXPECT_EQ(c.fft_bins(), 257u);
  EXPECT_DOUBLE_EQ(c.hop_seconds(), 0.016);
  EXPECT_DOUBLE_EQ(c.frame_seconds(), 0.032);
  EXPECT_NO_THROW(c.validate());
  c.hop_size = 200;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Window, SquaredWindowsOverlapToOne) {
  const auto w = sqrt_hann(512);
  for (std::size_t i = 0; i < 256; ++i) EXPECT_NEAR(w[i] * w[i] + w[i + 256] * w[i + 256], 1.0, 1e-12);
  EXPECT_EQ(w[0], 0.0);
}

TEST(RealFft, MatchesNaiveDft) {
  std::mt19937_64 rng(1);
  for (std::size_t n : {8u, 64u, 512u}) {
    RealFft fft(n);
    const auto x = oracle::random_signal(rng, n);
    std::vector<std::complex<double>> y(n / 2 + 1);
    fft.forward(x, y);
    const auto ref = oracle::dft(x);
    for (std::size_t k = 0; k < y.size(); ++k) EXPECT_LT(std::abs(y[k] - ref[k]), 1e-9 * n);
    std::vector<double> back(n);
    fft.inverse(y, back);
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(back[i], x[i], 1e-12);
  }
}

TEST(Stft, FrameCountAndShortInput) {
  DspConfig c;
  std::vector<double> x(16000, 0.0);
  EXPECT_EQ(stft(x, c).frames(), 1 + (16000 - 512) / 256);
  std::vector<double> tiny(100);
  EXPECT_THROW(stft(tiny, c), std::invalid_argument);
}

TEST(Stft, SingleFrameIsWindowedDft) {
  std::mt19937_64 rng(2);
  const auto cfg = small_cfg();
  const auto x = oracle::random_signal(rng, 64);
  const auto w = sqrt_hann(64);
  std::vector<double> xw(64);
  for (std::size_t i = 0; i < 64; ++i) xw[i] = x[i] * w[i];
  const auto ref = oracle::dft(xw);
  const auto spec = stft(x, cfg);
  ASSERT_EQ(spec.frames(), 1u);
  for (std::size_t k = 0; k < ref.size(); ++k) EXPECT_LT(std::abs(spec.at(k, 0) - ref[k]), 1e-10);
}

TEST(Stft, ZeroSignalGivesZeroSpectrogram) {
  std::vector<double> x(1024, 0.0);
  const auto s = stft(x, DspConfig{});
  for (std::size_t t = 0; t < s.frames(); ++t) {
    for (auto v : s.frame(t)) EXPECT_EQ(v, std::complex<double>(0.0));
  }
}

TEST(Istft, InteriorReconstructionIsExact) {
  std::mt19937_64 rng(3);
  DspConfig c;
  const auto x = oracle::random_signal(rng, 16000);
  const auto y = istft(stft(x, c), c);
  ASSERT_EQ(y.size(), (stft(x, c).frames() - 1) * 256 + 512);
  double err = 0, ref = 0;
  for (std::size_t i = 256; i + 256 < y.size(); ++i) {
    err += (y[i] - x[i]) * (y[i] - x[i]);
    ref += x[i] * x[i];
  }
  EXPECT_LT(std::sqrt(err / ref), 1e-12);
}

TEST(Istft, ImpulseSpectrumGivesWindowedImpulse) {
  // A flat unit spectrum is the DFT of a unit impulse at 0; the synthesis
  // window multiplies it by w[0] = 0, so shift the impulse by a linear phase.
  const auto cfg = small_cfg();
  Spectrogram s(cfg.fft_bins(), 1);
  const std::size_t n0 = 10;
  for (std::size_t k = 0; k < s.bins(); ++k) {
    const double a = -2.0 * std::numbers::pi * static_cast<double>(k * n0) / 64.0;
    s.at(k, 0) = std::complex<double>(std::cos(a), std::sin(a));
  }
  const auto y = istft(s, cfg);
  const auto w = sqrt_hann(64);
  for (std::size_t i = 0; i < 64; ++i) EXPECT_NEAR(y[i], i == n0 ? w[n0] : 0.0, 1e-12) << i;
}

TEST(MelFilterbank, ShapeAndProperties) {
  DspConfig c;
  const auto fb = make_mel_filterbank(c);
  EXPECT_EQ(fb.mel_bins, 128u);
  EXPECT_EQ(fb.fft_bins, 257u);
  EXPECT_NO_THROW(fb.validate());
  float max_w = 0;
  for (float w : fb.weights) max_w = std::max(max_w, w);
  EXPECT_LE(max_w, 1.0f);
  // Band centres increase with the row index.
  std::size_t prev = 0;
  for (std::size_t m = 0; m < fb.mel_bins; ++m) {
    std::size_t arg = 0;
    for (std::size_t k = 0; k < fb.fft_bins; ++k) {
      if (fb.at(m, k) > fb.at(m, arg)) arg = k;
    }
    EXPECT_GE(arg, prev);
    prev = arg;
  }
}

TEST(MelFilterbank, MelScaleInverse) {
  for (double hz : {0.0, 100.0, 1000.0, 8000.0}) EXPECT_NEAR(mel_to_hz(hz_to_mel(hz)), hz, 1e-9);
  EXPECT_NEAR(hz_to_mel(1000.0), 1000.0, 0.1);
}

TEST(MelFilterbank, ValidateRejectsNegativeAndGaps) {
  DspConfig c = small_cfg();
  auto fb = make_mel_filterbank(c);
  auto neg = fb;
  neg.weights[0] = -0.1f;
  EXPECT_THROW(neg.validate(), std::invalid_argument);
  auto empty = fb;
  for (std::size_t k = 0; k < empty.fft_bins; ++k) empty.weights[3 * empty.fft_bins + k] = 0.0f;
  EXPECT_THROW(empty.validate(), std::invalid_argument);
}

TEST(MelFeatures, ZeroSpectrumZeroBiasIsZero) {
  const auto c = small_cfg();
  const auto fb = make_mel_filterbank(c);
  Spectrogram s(c.fft_bins(), 3);
  const auto z = mel_features(s, fb, QeqParams::identity(c.mel_bins));
  for (double v : z.data) EXPECT_EQ(v, 0.0);
}

TEST(MelFeatures, MatchesHandComputation) {
  const auto c = small_cfg();
  const auto fb = make_mel_filterbank(c);
  std::mt19937_64 rng(9);
  Spectrogram s(c.fft_bins(), 2);
  std::normal_distribution<double> n;
  for (std::size_t t = 0; t < 2; ++t) {
    for (std::size_t k = 0; k < s.bins(); ++k) s.at(k, t) = {n(rng), n(rng)};
  }
  QeqParams q = QeqParams::identity(c.mel_bins);
  q.gain[2] = 0.5f;
  q.bias[2] = -0.25f;
  const auto z = mel_features(s, fb, q, 0.3);
  for (std::size_t t = 0; t < 2; ++t) {
    for (std::size_t m = 0; m < c.mel_bins; ++m) {
      double e = 0;
      for (std::size_t k = 0; k < s.bins(); ++k) e += fb.at(m, k) * std::abs(s.at(k, t));
      EXPECT_NEAR(z.at(m, t), q.gain[m] * std::pow(e, 0.3) + q.bias[m], 1e-12);
    }
  }
}

TEST(QuantizeFeatures, ClampsToUnitRange) {
  const std::vector<double> f = {-3.0, -1.0, 0.0, 0.5, 0.999, 7.0};
  std::vector<std::int16_t> q(f.size());
  quantize_features(f, q);
  EXPECT_EQ(q, (std::vector<std::int16_t>{-128, -128, 0, 64, 127, 127}));
}

TEST(ApplyMask, ZeroMaskSilences) {
  const auto c = small_cfg();
  const auto fb = make_mel_filterbank(c);
  Spectrogram s(c.fft_bins(), 2);
  for (std::size_t k = 0; k < s.bins(); ++k) s.at(k, 0) = s.at(k, 1) = {1.0, -2.0};
  const auto out = apply_mask(RealMatrix(c.mel_bins, 2, 0.0), s, fb);
  for (std::size_t k = 0; k < s.bins(); ++k) EXPECT_EQ(out.at(k, 1), std::complex<double>(0.0));
}

TEST(ApplyMask, UnitMaskScalesByClippedColumnSums) {
  const auto c = small_cfg();
  const auto fb = make_mel_filterbank(c);
  Spectrogram s(c.fft_bins(), 1);
  for (std::size_t k = 0; k < s.bins(); ++k) s.at(k, 0) = {0.5, 0.25};
  const auto out = apply_mask(RealMatrix(c.mel_bins, 1, 1.0), s, fb);
  for (std::size_t k = 0; k < s.bins(); ++k) {
    double colsum = 0;
    for (std::size_t m = 0; m < c.mel_bins; ++m) colsum += fb.at(m, k);
    const double g = std::min(1.0, colsum);
    EXPECT_NEAR(std::abs(out.at(k, 0) - g * s.at(k, 0)), 0.0, 1e-12) << k;
  }
}

TEST(ApplyMask, ShapeMismatchThrows) {
  const auto c = small_cfg();
  const auto fb = make_mel_filterbank(c);
  Spectrogram s(c.fft_bins(), 2);
  EXPECT_THROW(apply_mask(RealMatrix(c.mel_bins, 3), s, fb), std::invalid_argument);
}
