#pragma once

// Reproducible pseudo-random models at any scale, from desk-sized (16-unit
// LSTMs) to the full 128 -> 256 -> 256 -> 128 -> 128 architecture.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "ssem/dsp.hpp"
#include "ssem/model.hpp"

namespace ssem {

struct ModelDims {
  std::uint32_t sample_rate = 16000;
  std::uint32_t frame_size = 512;
  std::uint32_t mel_bins = 128;
  std::size_t lstm_units = 256;
  std::size_t dense_units = 128;

  static ModelDims full() { return {}; }
  static ModelDims toy() { return {16000, 512, 16, 16, 16}; }

  DspConfig dsp() const {
    DspConfig c;
    c.sample_rate = sample_rate;
    c.frame_size = frame_size;
    c.hop_size = frame_size / 2;
    c.mel_bins = mel_bins;
    return c;
  }
};

namespace detail {

/// Uniform nonzero integer in [-amp, amp], drawn without relying on the
/// implementation-defined standard distributions.
inline std::int16_t nonzero_code(std::mt19937_64& rng, int amp) {
  if (amp <= 0) return 0;
  const auto r = static_cast<int>(rng() % static_cast<std::uint64_t>(2 * amp));
  return static_cast<std::int16_t>(r < amp ? r - amp : r - amp + 1);
}

inline DenseMatrix random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols, QuantFormat fmt, int amp) {
  DenseMatrix m(rows, cols, fmt);
  for (auto& v : m.values) v = nonzero_code(rng, amp);
  return m;
}

inline std::vector<std::int16_t> random_vector(std::mt19937_64& rng, std::size_t n, int amp) {
  std::vector<std::int16_t> v(n);
  for (auto& x : v) x = nonzero_code(rng, amp);
  return v;
}

/// Code amplitude giving roughly unit-variance pre-activations for `fan_in`.
inline int amplitude_for(QuantFormat fmt, std::size_t fan_in, double scale) {
  const double a = std::min(1.0, scale * std::sqrt(3.0 / static_cast<double>(fan_in)));
  return std::max(1, static_cast<int>(std::lround(a * fmt.max_code())));
}

}  // namespace detail

/// Model with every weight and bias set to zero.
inline SeModel make_zero_model(const ModelDims& dims) {
  SeModel m;
  m.dsp = dims.dsp();
  m.filterbank = make_mel_filterbank(m.dsp);
  m.qeq = QeqParams::identity(dims.mel_bins);
  auto lstm = [](std::size_t in, std::size_t units) {
    LstmLayer l;
    l.inputs = in;
    l.units = units;
    for (auto& g : l.gates) {
      g.input = DenseMatrix(units, in, kQ8);
      g.recurrent = DenseMatrix(units, units, kQ8);
      g.bias.assign(units, 0);
    }
    return l;
  };
  m.lstm1 = lstm(dims.mel_bins, dims.lstm_units);
  m.lstm2 = lstm(dims.lstm_units, dims.lstm_units);
  m.dense1 = DenseLayer{dims.lstm_units, dims.dense_units, kQ8, Activation::Tanh, {},
                        DenseMatrix(dims.dense_units, dims.lstm_units, kQ8),
                        std::vector<std::int16_t>(dims.dense_units, 0)};
  m.dense2 = DenseLayer{dims.dense_units, dims.mel_bins, kQ16, Activation::Sigmoid, {},
                        DenseMatrix(dims.mel_bins, dims.dense_units, kQ16),
                        std::vector<std::int16_t>(dims.mel_bins, 0)};
  return m;
}

/// Random model with nonzero weights; `scale` sets pre-activation spread.
inline SeModel make_toy_model(std::uint64_t seed, const ModelDims& dims, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  SeModel m = make_zero_model(dims);
  for (std::size_t i = 0; i < dims.mel_bins; ++i) {
    m.qeq.gain[i] = 0.15f + 0.1f * static_cast<float>(rng() % 1000) / 1000.0f;
    m.qeq.bias[i] = -0.5f + 0.2f * static_cast<float>(rng() % 1000) / 1000.0f;
  }
  for (LstmLayer* l : {&m.lstm1, &m.lstm2}) {
    const int amp = detail::amplitude_for(kQ8, l->inputs + l->units, scale);
    for (auto& g : l->gates) {
      g.input = detail::random_matrix(rng, l->units, l->inputs, kQ8, amp);
      g.recurrent = detail::random_matrix(rng, l->units, l->units, kQ8, amp);
      g.bias = detail::random_vector(rng, l->units, 32);
    }
  }
  m.dense1.weight = detail::random_matrix(rng, dims.dense_units, dims.lstm_units, kQ8,
                                          detail::amplitude_for(kQ8, dims.lstm_units, scale));
  m.dense1.bias = detail::random_vector(rng, dims.dense_units, 32);
  m.dense2.weight = detail::random_matrix(rng, dims.mel_bins, dims.dense_units, kQ16,
                                          detail::amplitude_for(kQ16, dims.dense_units, scale));
  m.dense2.bias = detail::random_vector(rng, dims.mel_bins, 32 * 256);
  return m;
}

}  // namespace ssem
