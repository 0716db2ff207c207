#pragma once

// Integer inference for the mask network and the streaming enhancer built
// around it.
//
// Formats inside one LSTM step:
//   x, h, gate outputs     Q8  (post-nonlinearity quantization)
//   pre-activations, c     int16 with 12 fractional bits, range [-8, 8)
//   nonlinearities         table lookup, Q15 out
// The output layer runs Q16 weights on Q8 inputs and emits a Q16 mask.

#include <algorithm>
#include <array>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ssem/activation.hpp"
#include "ssem/dsp.hpp"
#include "ssem/model.hpp"
#include "ssem/quant.hpp"
#include "ssem/sparse.hpp"

namespace ssem {

struct SampleRateMismatch : std::invalid_argument {
  SampleRateMismatch(std::uint32_t model_rate, std::uint32_t input_rate)
      : std::invalid_argument("sample rate mismatch: model expects " + std::to_string(model_rate) +
                              " Hz, input is " + std::to_string(input_rate) + " Hz"),
        expected(model_rate),
        actual(input_rate) {}
  std::uint32_t expected;
  std::uint32_t actual;
};

/// Compact (kept-unit) hidden and cell vectors of one LSTM layer.
struct LstmState {
  std::vector<std::int16_t> h;  // Q8
  std::vector<std::int16_t> c;  // Q12

  explicit LstmState(std::size_t n = 0) : h(n, 0), c(n, 0) {}
  void reset() {
    std::fill(h.begin(), h.end(), 0);
    std::fill(c.begin(), c.end(), 0);
  }
  friend bool operator==(const LstmState&, const LstmState&) = default;
};

namespace detail {

/// acc (acc_frac fractional bits) + bias (bias_frac) -> Q12 pre-activation.
inline std::int32_t to_preactivation(std::int64_t acc, int acc_frac, std::int32_t bias, int bias_frac) {
  const std::int64_t total = acc + static_cast<std::int64_t>(bias) * (std::int64_t{1} << (acc_frac - bias_frac));
  return saturate(shift_round_half_even(total, acc_frac - kPreActFrac), -32768, 32767);
}

}  // namespace detail

/// One LSTM time step over compact vectors; updates h and c in place.
inline void lstm_step_inplace(const LstmLayer& layer, std::span<const std::int16_t> x, LstmState& state,
                              KernelCounter* counter = nullptr) {
  const std::size_t n = layer.active_units();
  if (state.h.size() != n || state.c.size() != n) throw std::invalid_argument("lstm_step: state dimension mismatch");
  const auto idx = layer.active_indices();
  const int acc_frac = layer.format.frac_bits + kQ8.frac_bits;

  std::array<std::vector<std::int32_t>, 4> gate_q8;
  std::vector<std::int32_t> acc(n);
  for (std::size_t g = 0; g < 4; ++g) {
    const LstmGate& gate = layer.gates[g];
    std::fill(acc.begin(), acc.end(), 0);
    accumulate(gate.input, x, acc, counter);
    accumulate(gate.recurrent, state.h, acc, counter);
    const ActivationTable& f = (static_cast<Gate>(g) == Gate::Cell) ? tanh_table() : sigmoid_table();
    gate_q8[g].resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      const std::int32_t pre = detail::to_preactivation(acc[k], acc_frac, gate.bias[idx[k]], layer.format.frac_bits);
      gate_q8[g][k] = q15_to(f(pre), kQ8);
    }
  }
  const auto& i = gate_q8[static_cast<std::size_t>(Gate::Input)];
  const auto& fg = gate_q8[static_cast<std::size_t>(Gate::Forget)];
  const auto& o = gate_q8[static_cast<std::size_t>(Gate::Output)];
  const auto& u = gate_q8[static_cast<std::size_t>(Gate::Cell)];
  // c: (Q8 * Q12 -> frac 19) + (Q8 * Q8 -> frac 14, aligned to 19), back to Q12.
  for (std::size_t k = 0; k < n; ++k) {
    const std::int64_t fc = static_cast<std::int64_t>(fg[k]) * state.c[k];
    const std::int64_t iu = static_cast<std::int64_t>(i[k]) * u[k] * (1 << 5);
    state.c[k] = static_cast<std::int16_t>(saturate(shift_round_half_even(fc + iu, 7), -32768, 32767));
    const std::int64_t hq = static_cast<std::int64_t>(o[k]) * tanh_table()(state.c[k]);  // frac 22
    state.h[k] = static_cast<std::int16_t>(requantize(hq, 22, kQ8));
  }
  if (counter) counter->macs += 3 * n;
}

/// Functional form: returns the new (h, c).
inline std::pair<std::vector<std::int16_t>, std::vector<std::int16_t>> lstm_step(const LstmLayer& layer,
                                                                                 std::span<const std::int16_t> x,
                                                                                 std::span<const std::int16_t> h_prev,
                                                                                 std::span<const std::int16_t> c_prev) {
  LstmState s;
  s.h.assign(h_prev.begin(), h_prev.end());
  s.c.assign(c_prev.begin(), c_prev.end());
  lstm_step_inplace(layer, x, s);
  return {std::move(s.h), std::move(s.c)};
}

/// Dense layer on a compact Q8 input; output in the layer format.
inline std::vector<std::int16_t> dense_forward(const DenseLayer& layer, std::span<const std::int16_t> x,
                                               KernelCounter* counter = nullptr) {
  const std::size_t n = layer.active_outputs();
  const auto idx = layer.active_indices();
  std::vector<std::int32_t> acc(n, 0);
  accumulate(layer.weight, x, acc, counter);
  const int acc_frac = layer.format.frac_bits + kQ8.frac_bits;
  const ActivationTable& f = layer.activation == Activation::Sigmoid ? sigmoid_table() : tanh_table();
  std::vector<std::int16_t> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::int32_t pre = detail::to_preactivation(acc[k], acc_frac, layer.bias[idx[k]], layer.format.frac_bits);
    out[k] = static_cast<std::int16_t>(q15_to(f(pre), layer.format));
  }
  return out;
}

/// Recurrent state of the network alone.
struct NetworkState {
  LstmState lstm1;
  LstmState lstm2;

  explicit NetworkState(const SeModel& m) : lstm1(m.lstm1.active_units()), lstm2(m.lstm2.active_units()) {}
  void reset() {
    lstm1.reset();
    lstm2.reset();
  }
  friend bool operator==(const NetworkState&, const NetworkState&) = default;
};

/// Advances the network one frame; returns the Q16 mel mask (length mel_bins).
inline std::vector<std::int16_t> predict_mask_frame(const SeModel& model, NetworkState& state,
                                                    std::span<const std::int16_t> features,
                                                    KernelCounter* counter = nullptr) {
  if (features.size() != model.dsp.mel_bins) {
    throw std::invalid_argument("predict_mask_frame: expected " + std::to_string(model.dsp.mel_bins) +
                                " features, got " + std::to_string(features.size()));
  }
  lstm_step_inplace(model.lstm1, features, state.lstm1, counter);
  lstm_step_inplace(model.lstm2, state.lstm1.h, state.lstm2, counter);
  const auto d1 = dense_forward(model.dense1, state.lstm2.h, counter);
  return dense_forward(model.dense2, d1, counter);
}

/// Full per-stream state: network recurrences plus framing and overlap-add
/// buffers.
struct EnhancerState {
  NetworkState network;
  std::vector<double> pending;  // input samples not yet consumed by a full frame
  std::vector<double> ola;      // overlap-add accumulator, frame_size long
  std::uint64_t samples_in = 0;
  std::uint64_t samples_out = 0;

  explicit EnhancerState(const SeModel& m) : network(m), ola(m.dsp.frame_size, 0.0) {}
  void reset() {
    network.reset();
    pending.clear();
    std::fill(ola.begin(), ola.end(), 0.0);
    samples_in = samples_out = 0;
  }
  friend bool operator==(const EnhancerState&, const EnhancerState&) = default;
};

/// Streaming enhancer. Emits hop-sized blocks as frames complete; output
/// sample n corresponds to input sample n. Not thread-safe; use one instance
/// per stream. The model must outlive the enhancer.
class Enhancer {
 public:
  explicit Enhancer(const SeModel& model)
      : model_(&model),
        state_(model),
        transform_(model.dsp),
        spectrum_(model.dsp.fft_bins()),
        features_(model.dsp.mel_bins),
        features_q8_(model.dsp.mel_bins),
        mask_(model.dsp.mel_bins),
        gain_(model.dsp.fft_bins()) {
    model.validate();
  }

  const EnhancerState& state() const { return state_; }
  void reset() { state_.reset(); }

  std::vector<double> process(std::span<const double> chunk) {
    std::vector<double> out;
    state_.samples_in += chunk.size();
    push(chunk, out);
    return out;
  }

  /// Zero-pads the stream so that every input sample has been emitted;
  /// total output length then equals total input length.
  std::vector<double> flush() {
    std::vector<double> out;
    const std::vector<double> zeros(model_->dsp.hop_size, 0.0);
    while (state_.samples_out < state_.samples_in) push(zeros, out);
    const std::uint64_t excess = state_.samples_out - state_.samples_in;
    out.resize(out.size() - static_cast<std::size_t>(excess));
    state_.samples_out -= excess;
    return out;
  }

 private:
  void push(std::span<const double> chunk, std::vector<double>& out) {
    const std::size_t frame = model_->dsp.frame_size;
    const std::size_t hop = model_->dsp.hop_size;
    std::size_t pos = 0;
    while (pos < chunk.size()) {
      const std::size_t take = std::min(chunk.size() - pos, frame - state_.pending.size());
      state_.pending.insert(state_.pending.end(), chunk.begin() + static_cast<std::ptrdiff_t>(pos),
                            chunk.begin() + static_cast<std::ptrdiff_t>(pos + take));
      pos += take;
      if (state_.pending.size() == frame) {
        process_frame();
        out.insert(out.end(), state_.ola.begin(), state_.ola.begin() + static_cast<std::ptrdiff_t>(hop));
        std::copy(state_.ola.begin() + static_cast<std::ptrdiff_t>(hop), state_.ola.end(), state_.ola.begin());
        std::fill(state_.ola.end() - static_cast<std::ptrdiff_t>(hop), state_.ola.end(), 0.0);
        state_.pending.erase(state_.pending.begin(), state_.pending.begin() + static_cast<std::ptrdiff_t>(hop));
        state_.samples_out += hop;
      }
    }
  }

  void process_frame() {
    const SeModel& m = *model_;
    transform_.analyze(state_.pending, spectrum_);
    mel_frame(spectrum_, m.filterbank, m.qeq, m.dsp.power_exponent, features_);
    quantize_features(features_, features_q8_);
    const auto mask_q16 = predict_mask_frame(m, state_.network, features_q8_);
    for (std::size_t i = 0; i < mask_.size(); ++i) mask_[i] = dequantize(mask_q16[i], kQ16);
    mask_gain(m.filterbank, mask_, gain_);
    for (std::size_t k = 0; k < spectrum_.size(); ++k) spectrum_[k] *= gain_[k];
    transform_.synthesize_add(spectrum_, state_.ola);
  }

  const SeModel* model_;
  EnhancerState state_;
  FrameTransform transform_;
  std::vector<std::complex<double>> spectrum_;
  std::vector<double> features_;
  std::vector<std::int16_t> features_q8_;
  std::vector<double> mask_;
  std::vector<double> gain_;
};

/// One-shot enhancement; output has the same length as the input.
inline std::vector<double> enhance(const SeModel& model, std::span<const double> noisy, std::uint32_t sample_rate) {
  if (sample_rate != model.dsp.sample_rate) throw SampleRateMismatch(model.dsp.sample_rate, sample_rate);
  if (noisy.empty()) throw std::invalid_argument("enhance: empty input");
  Enhancer e(model);
  auto out = e.process(noisy);
  const auto tail = e.flush();
  out.insert(out.end(), tail.begin(), tail.end());
  return out;
}

struct OpsCount {
  std::uint64_t matvec_macs = 0;   // products executed in weight kernels
  std::uint64_t mac_groups = 0;    // whole-block issues for block payloads, single MACs otherwise
  std::uint64_t elementwise = 0;   // cell/hidden updates in the LSTM layers
  std::uint64_t total() const { return matvec_macs + elementwise; }
};

/// MACs executed per frame, honoring stored sparsity.
inline OpsCount ops_per_frame(const SeModel& model) {
  OpsCount ops;
  auto add = [&](const Matrix& m) {
    const std::size_t macs = stored_values(m);
    ops.matvec_macs += macs;
    if (auto* s = std::get_if<SparseMatrix>(&m); s && s->structure().kind == StructureKind::Block) {
      ops.mac_groups += s->stored_blocks();
    } else {
      ops.mac_groups += macs;
    }
  };
  for (const LstmLayer* l : {&model.lstm1, &model.lstm2}) {
    for (std::size_t k = 0; k < 8; ++k) add(l->matrix(k));
    ops.elementwise += 3 * l->active_units();
  }
  add(model.dense1.weight);
  add(model.dense2.weight);
  return ops;
}

}  // namespace ssem
