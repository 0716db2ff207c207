#pragma once

// Network description: two LSTM layers, a tanh dense layer and a sigmoid
// (16-bit) output layer producing a mel-domain mask, plus the DSP front-end
// parameters that travel with the weights.
//
// Unit pruning shrinks layers physically: a layer with pruned units lists its
// surviving units in `kept`, its activations are compact vectors over those
// units, and every matrix touching a pruned dimension is Unit-encoded with
// matching kept rows/columns. Logical dimensions are never changed.

#include <array>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ssem/dsp.hpp"
#include "ssem/quant.hpp"
#include "ssem/sparse.hpp"

namespace ssem {

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

enum class Activation : std::uint8_t { Tanh = 0, Sigmoid = 1 };
enum class Gate : std::size_t { Input = 0, Forget = 1, Output = 2, Cell = 3 };

inline constexpr std::array<std::string_view, 8> kLstmMatrixNames = {"W_xi", "W_hi", "W_xf", "W_hf",
                                                                     "W_xo", "W_ho", "W_xc", "W_hc"};
inline constexpr std::array<std::string_view, 4> kLayerNames = {"lstm1", "lstm2", "dense1", "dense2"};

inline std::vector<std::uint16_t> iota_u16(std::size_t n) {
  std::vector<std::uint16_t> v(n);
  std::iota(v.begin(), v.end(), std::uint16_t{0});
  return v;
}

struct LstmGate {
  Matrix input;                   // units x inputs
  Matrix recurrent;               // units x units
  std::vector<std::int16_t> bias;  // logical length `units`
};

struct LstmLayer {
  std::size_t inputs = 0;
  std::size_t units = 0;
  QuantFormat format = kQ8;
  std::vector<std::uint16_t> kept;  // empty: all units active
  std::array<LstmGate, 4> gates;

  LstmGate& gate(Gate g) { return gates[static_cast<std::size_t>(g)]; }
  const LstmGate& gate(Gate g) const { return gates[static_cast<std::size_t>(g)]; }

  /// Matrices in W_xi, W_hi, W_xf, W_hf, W_xo, W_ho, W_xc, W_hc order.
  Matrix& matrix(std::size_t k) { return k % 2 == 0 ? gates[k / 2].input : gates[k / 2].recurrent; }
  const Matrix& matrix(std::size_t k) const { return k % 2 == 0 ? gates[k / 2].input : gates[k / 2].recurrent; }

  std::size_t active_units() const { return kept.empty() ? units : kept.size(); }
  std::vector<std::uint16_t> active_indices() const { return kept.empty() ? iota_u16(units) : kept; }
};

struct DenseLayer {
  std::size_t inputs = 0;
  std::size_t outputs = 0;
  QuantFormat format = kQ8;
  Activation activation = Activation::Tanh;
  std::vector<std::uint16_t> kept;  // empty: all outputs active
  Matrix weight;                    // outputs x inputs
  std::vector<std::int16_t> bias;    // logical length `outputs`

  std::size_t active_outputs() const { return kept.empty() ? outputs : kept.size(); }
  std::vector<std::uint16_t> active_indices() const { return kept.empty() ? iota_u16(outputs) : kept; }
};

struct SeModel {
  DspConfig dsp;
  MelFilterbank filterbank;
  QeqParams qeq;
  LstmLayer lstm1;
  LstmLayer lstm2;
  DenseLayer dense1;
  DenseLayer dense2;

  void validate() const;
};

namespace detail {

inline void check_kept(const std::vector<std::uint16_t>& kept, std::size_t n, const std::string& where) {
  for (std::size_t i = 0; i < kept.size(); ++i) {
    if (kept[i] >= n || (i > 0 && kept[i] <= kept[i - 1])) {
      throw ShapeError(where + ": kept index list not strictly increasing / in range");
    }
  }
}

inline void check_bias(const std::vector<std::int16_t>& bias, std::size_t n, QuantFormat fmt, const std::string& where) {
  if (bias.size() != n) throw ShapeError(where + ": bias length " + std::to_string(bias.size()) + " != " + std::to_string(n));
  for (std::int16_t b : bias) {
    if (b < fmt.min_code() || b > fmt.max_code()) throw ShapeError(where + ": bias outside format range");
  }
}

/// Checks logical shape, format and compact-chain consistency of one matrix.
inline void check_matrix(const Matrix& m, std::size_t rows, std::size_t cols, QuantFormat fmt,
                         const std::vector<std::uint16_t>& row_kept, const std::vector<std::uint16_t>& col_kept,
                         const std::string& where) {
  if (ssem::rows(m) != rows || ssem::cols(m) != cols) {
    throw ShapeError(where + ": shape " + std::to_string(ssem::rows(m)) + "x" + std::to_string(ssem::cols(m)) +
                     ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
  }
  if (format_of(m) != fmt) throw ShapeError(where + ": quantization format mismatch");
  if (auto* d = std::get_if<DenseMatrix>(&m)) {
    for (std::int16_t v : d->values) {
      if (v < fmt.min_code() || v > fmt.max_code()) throw ShapeError(where + ": weight outside format range");
    }
  }
  const bool rows_reduced = !row_kept.empty() && row_kept.size() != rows;
  const bool cols_reduced = !col_kept.empty() && col_kept.size() != cols;
  const auto* s = std::get_if<SparseMatrix>(&m);
  const auto* unit = s ? std::get_if<UnitPayload>(&s->payload()) : nullptr;
  if (unit) {
    const auto want_rows = row_kept.empty() ? iota_u16(rows) : row_kept;
    const auto want_cols = col_kept.empty() ? iota_u16(cols) : col_kept;
    if (unit->kept_rows != want_rows) throw ShapeError(where + ": unit rows disagree with the layer's kept units");
    if (unit->kept_cols != want_cols) throw ShapeError(where + ": unit columns disagree with the upstream kept units");
  } else if (rows_reduced || cols_reduced) {
    throw ShapeError(where + ": layer dimensions are unit-reduced but the matrix is not unit-encoded");
  }
}

}  // namespace detail

inline void SeModel::validate() const {
  dsp.validate();
  if (filterbank.mel_bins != dsp.mel_bins || filterbank.fft_bins != dsp.fft_bins()) {
    throw ShapeError("filterbank shape does not match the DSP configuration");
  }
  filterbank.validate();
  qeq.validate(dsp.mel_bins);

  if (lstm1.inputs != dsp.mel_bins) throw ShapeError("lstm1 input width must equal mel bins");
  if (lstm2.inputs != lstm1.units) throw ShapeError("lstm2 input width must equal lstm1 units");
  if (dense1.inputs != lstm2.units) throw ShapeError("dense1 input width must equal lstm2 units");
  if (dense2.inputs != dense1.outputs) throw ShapeError("dense2 input width must equal dense1 outputs");
  if (dense2.outputs != dsp.mel_bins) throw ShapeError("dense2 output width must equal mel bins");
  if (dense1.activation != Activation::Tanh) throw ShapeError("dense1 must use tanh");
  if (dense2.activation != Activation::Sigmoid) throw ShapeError("dense2 must use sigmoid");
  if (lstm1.format != kQ8 || lstm2.format != kQ8 || dense1.format != kQ8) throw ShapeError("hidden layers must be Q8");
  if (dense2.format != kQ16) throw ShapeError("output layer must be Q16");
  if (!dense2.kept.empty() && dense2.kept.size() != dense2.outputs) throw ShapeError("output layer cannot be unit-pruned");

  const std::vector<std::uint16_t> none;
  auto check_lstm = [&](const LstmLayer& l, const std::vector<std::uint16_t>& upstream, const std::string& name) {
    detail::check_kept(l.kept, l.units, name);
    if (l.units == 0 || l.active_units() == 0) throw ShapeError(name + ": no active units");
    for (std::size_t g = 0; g < 4; ++g) {
      const std::string gname = name + "." + std::string(kLstmMatrixNames[2 * g]);
      const std::string rname = name + "." + std::string(kLstmMatrixNames[2 * g + 1]);
      detail::check_matrix(l.gates[g].input, l.units, l.inputs, l.format, l.kept, upstream, gname);
      detail::check_matrix(l.gates[g].recurrent, l.units, l.units, l.format, l.kept, l.kept, rname);
      detail::check_bias(l.gates[g].bias, l.units, l.format, name + ".bias");
    }
  };
  check_lstm(lstm1, none, "lstm1");
  check_lstm(lstm2, lstm1.kept, "lstm2");

  auto check_dense = [&](const DenseLayer& d, const std::vector<std::uint16_t>& upstream, const std::string& name) {
    detail::check_kept(d.kept, d.outputs, name);
    if (d.outputs == 0 || d.active_outputs() == 0) throw ShapeError(name + ": no active outputs");
    detail::check_matrix(d.weight, d.outputs, d.inputs, d.format, d.kept, upstream, name + ".W");
    detail::check_bias(d.bias, d.outputs, d.format, name + ".bias");
  };
  check_dense(dense1, lstm2.kept, "dense1");
  check_dense(dense2, dense1.kept, "dense2");
}

/// Total number of weight-matrix entries and bias entries (logical).
inline std::size_t parameter_count(const SeModel& m) {
  auto lstm = [](const LstmLayer& l) { return 4 * (l.units * l.inputs + l.units * l.units + l.units); };
  auto dense = [](const DenseLayer& d) { return d.outputs * d.inputs + d.outputs; };
  return lstm(m.lstm1) + lstm(m.lstm2) + dense(m.dense1) + dense(m.dense2);
}

}  // namespace ssem
