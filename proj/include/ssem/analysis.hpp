#pragma once

// Evaluation metrics, the model-selection score, and the deployment
// estimators: throughput speedup by sparsity structure, memory footprint, and
// the real-time / memory constraint check.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <istream>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ssem/dsp.hpp"
#include "ssem/engine.hpp"
#include "ssem/model.hpp"
#include "ssem/sparse.hpp"

namespace ssem {

inline constexpr double kMetricCapDb = 100.0;

namespace detail {
inline double energy(std::span<const double> x) {
  return std::inner_product(x.begin(), x.end(), x.begin(), 0.0);
}
inline double clamp_db(double db) { return std::clamp(db, -kMetricCapDb, kMetricCapDb); }
}  // namespace detail

/// Scale-invariant SDR in dB, clamped to +/-100 dB.
inline double si_sdr(std::span<const double> reference, std::span<const double> estimate) {
  if (reference.size() != estimate.size()) throw std::invalid_argument("si_sdr: length mismatch");
  const double ref_energy = detail::energy(reference);
  if (ref_energy == 0.0) throw std::invalid_argument("si_sdr: silent reference");
  const double alpha = std::inner_product(estimate.begin(), estimate.end(), reference.begin(), 0.0) / ref_energy;
  double target = 0.0, noise = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const double t = alpha * reference[i];
    const double e = t - estimate[i];
    target += t * t;
    noise += e * e;
  }
  if (target == 0.0) return -kMetricCapDb;
  if (noise == 0.0 || target >= noise * 1e10) return kMetricCapDb;
  return detail::clamp_db(10.0 * std::log10(target / noise));
}

/// Plain signal-to-distortion ratio (no projection, no distortion filters).
inline double sdr(std::span<const double> reference, std::span<const double> estimate) {
  if (reference.size() != estimate.size()) throw std::invalid_argument("sdr: length mismatch");
  const double ref_energy = detail::energy(reference);
  if (ref_energy == 0.0) throw std::invalid_argument("sdr: silent reference");
  double noise = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) noise += (reference[i] - estimate[i]) * (reference[i] - estimate[i]);
  if (noise == 0.0 || ref_energy >= noise * 1e10) return kMetricCapDb;
  return detail::clamp_db(10.0 * std::log10(ref_energy / noise));
}

/// Magnitude-compressed complex value |z|^p e^{i arg z}.
inline std::complex<double> compress(std::complex<double> z, double power) {
  const double mag = std::abs(z);
  if (mag == 0.0) return {0.0, 0.0};
  return z * (std::pow(mag, power) / mag);
}

/// Phase-sensitive spectral approximation loss:
/// 0.1 * || |X|^p - |Xh|^p ||_2 + 0.9 * || X^p - Xh^p ||_2.
inline double psa_loss(const Spectrogram& clean, const Spectrogram& estimate, double power = 0.3) {
  if (clean.bins() != estimate.bins() || clean.frames() != estimate.frames()) {
    throw std::invalid_argument("psa_loss: shape mismatch");
  }
  double mag = 0.0, cpx = 0.0;
  for (std::size_t t = 0; t < clean.frames(); ++t) {
    for (std::size_t k = 0; k < clean.bins(); ++k) {
      const auto x = clean.at(k, t), y = estimate.at(k, t);
      const double dm = std::pow(std::abs(x), power) - std::pow(std::abs(y), power);
      mag += dm * dm;
      cpx += std::norm(compress(x, power) - compress(y, power));
    }
  }
  return 0.1 * std::sqrt(mag) + 0.9 * std::sqrt(cpx);
}

inline constexpr double kStoiWeight = 0.1;
inline constexpr double kPesqWeight = 0.2;
inline constexpr double kSiSdrWeight = 0.6;

inline double q_score(double stoi, double pesq, double si_sdr_db) {
  return kStoiWeight * stoi + kPesqWeight * pesq + kSiSdrWeight * si_sdr_db;
}

// --- Speedup ----------------------------------------------------------------

/// Piecewise-linear sparsity -> speedup curves per structure, clamped at the
/// end anchors.
class SpeedupModel {
 public:
  using Anchors = std::vector<std::pair<double, double>>;

  /// Default anchors for the 0.97M parameter network
  /// (sparsity = 1 - params / 0.97M).
  static SpeedupModel defaults() {
    SpeedupModel m;
    m.anchors_[StructureKind::Weight] = {{0.0, 1.0}, {0.485, 0.6}, {0.701, 0.6}, {0.907, 1.84}};
    m.anchors_[StructureKind::Block] = {{0.0, 1.0}, {0.402, 1.7}, {0.742, 2.7}, {0.907, 6.7}};
    m.anchors_[StructureKind::Unit] = {{0.0, 1.0}, {0.371, 2.2}, {0.660, 3.3}};
    return m;
  }

  /// Replaces the curves of every structure named in `in`. Lines hold
  /// "<structure> <sparsity> <factor>"; '#' starts a comment.
  void load_overrides(std::istream& in) {
    std::map<StructureKind, Anchors> fresh;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      std::istringstream ls(line);
      std::string name;
      if (!(ls >> name)) continue;
      double s = 0, f = 0;
      if (!(ls >> s >> f)) throw std::invalid_argument("anchor file line " + std::to_string(lineno) + ": expected 3 fields");
      if (s < 0.0 || s >= 1.0 || f <= 0.0) {
        throw std::invalid_argument("anchor file line " + std::to_string(lineno) + ": sparsity in [0,1), factor > 0");
      }
      fresh[parse_structure_kind(name)].emplace_back(s, f);
    }
    for (auto& [kind, a] : fresh) {
      std::sort(a.begin(), a.end());
      anchors_[kind] = std::move(a);
    }
  }

  const Anchors& anchors(StructureKind k) const { return anchors_.at(k); }

  double estimate(StructureKind kind, double sparsity) const {
    const Anchors& a = anchors_.at(kind);
    if (a.empty()) return 1.0;
    if (sparsity <= a.front().first) return a.front().second;
    if (sparsity >= a.back().first) return a.back().second;
    for (std::size_t i = 1; i < a.size(); ++i) {
      if (sparsity == a[i].first) return a[i].second;
      if (sparsity < a[i].first) {
        const auto [x0, y0] = a[i - 1];
        const auto [x1, y1] = a[i];
        return y0 + (y1 - y0) * (sparsity - x0) / (x1 - x0);
      }
    }
    return a.back().second;
  }

 private:
  std::map<StructureKind, Anchors> anchors_;
};

inline double estimate_speedup(StructureKind kind, double sparsity) {
  static const SpeedupModel model = SpeedupModel::defaults();
  return model.estimate(kind, sparsity);
}

// --- Footprint --------------------------------------------------------------

enum class Precision { Fp32, Quantized };

/// Byte accounting. Weights: stored values, biases and QEQ parameters at their
/// storage width. Index: sparse payload metadata. Working: activation vectors
/// and recurrent state at deployment widths, plus the 16-bit framing buffers
/// and a 32-bit in-place FFT workspace.
struct Footprint {
  std::uint64_t weight_bytes = 0;
  std::uint64_t index_bytes = 0;
  std::uint64_t working_bytes = 0;

  /// Everything a device must hold.
  std::uint64_t total() const { return weight_bytes + index_bytes + working_bytes; }
  /// Parameter storage plus working memory, excluding sparse index metadata.
  std::uint64_t without_index() const { return weight_bytes + working_bytes; }
};

namespace detail {

inline std::uint64_t index_bytes(const Matrix& m) {
  const auto* s = std::get_if<SparseMatrix>(&m);
  if (!s) return 0;
  return std::visit(
      [&](const auto& p) -> std::uint64_t {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, WeightPayload>) {
          return 2 * p.col_index.size() + 4 * p.row_ptr.size();
        } else if constexpr (std::is_same_v<P, BlockPayload>) {
          return 2 * p.block_col.size() + 4 * p.row_ptr.size();
        } else {
          return 2 * p.kept_rows.size();
        }
      },
      s->payload());
}

}  // namespace detail

inline Footprint estimate_footprint(const SeModel& model, Precision precision = Precision::Quantized) {
  Footprint fp;
  auto width = [&](QuantFormat f) -> std::uint64_t { return precision == Precision::Fp32 ? 4 : f.bits / 8; };
  auto add_matrix = [&](const Matrix& m) {
    fp.weight_bytes += stored_values(m) * width(format_of(m));
    fp.index_bytes += detail::index_bytes(m);
  };
  for (const LstmLayer* l : {&model.lstm1, &model.lstm2}) {
    for (std::size_t k = 0; k < 8; ++k) add_matrix(l->matrix(k));
    fp.weight_bytes += 4 * l->active_units() * width(l->format);
  }
  for (const DenseLayer* d : {&model.dense1, &model.dense2}) {
    add_matrix(d->weight);
    fp.weight_bytes += d->active_outputs() * width(d->format);
  }
  fp.weight_bytes += 2 * model.qeq.gain.size() * (precision == Precision::Fp32 ? 4 : 2);

  const std::uint64_t act = precision == Precision::Fp32 ? 4 : 1;
  const std::uint64_t cell = precision == Precision::Fp32 ? 4 : 2;
  std::uint64_t working = model.dsp.mel_bins * act;  // input features
  for (const LstmLayer* l : {&model.lstm1, &model.lstm2}) {
    // previous and next h, cell state
    working += l->active_units() * (2 * act + cell);
  }
  working += model.dense1.active_outputs() * act;
  working += model.dense2.active_outputs() * (precision == Precision::Fp32 ? 4 : 2);
  working += model.dsp.frame_size * 2;  // input frame, 16-bit PCM
  working += model.dsp.frame_size * 4;  // in-place real FFT workspace
  working += model.dsp.hop_size * 2;    // overlap-add tail
  fp.working_bytes = working;
  return fp;
}

// --- Constraints ------------------------------------------------------------

struct HwProfile {
  double macs_per_cycle = 8;
  double clock_hz = 100e6;
  std::uint64_t sram_bytes = 640 * 1024;

  void validate() const {
    if (!(macs_per_cycle > 0 && clock_hz > 0 && sram_bytes > 0)) {
      throw std::invalid_argument("HwProfile: all fields must be positive");
    }
  }
};

inline constexpr double kAudioLatencyBudgetMs = 30.0;

struct ConstraintReport {
  bool causal = false;
  bool quantized = false;
  std::uint64_t ops_per_frame = 0;
  double compute_latency_s = 0;
  double deadline_s = 0;
  bool compute_ok = false;
  std::uint64_t footprint_bytes = 0;
  std::uint64_t sram_bytes = 0;
  bool memory_ok = false;
  double audio_latency_ms = 0;
  bool audio_latency_ok = false;  // advisory target, not part of `pass()`

  bool pass() const { return causal && quantized && compute_ok && memory_ok; }
};

/// True when every weight and bias sits in a Q8/Q16 container.
inline bool is_quantized(const SeModel& m) {
  auto ok = [](const Matrix& x) { return format_of(x).valid(); };
  for (const LstmLayer* l : {&m.lstm1, &m.lstm2}) {
    for (std::size_t k = 0; k < 8; ++k) {
      if (!ok(l->matrix(k))) return false;
    }
  }
  return ok(m.dense1.weight) && ok(m.dense2.weight);
}

inline ConstraintReport validate_constraints(const SeModel& model, const HwProfile& hw) {
  hw.validate();
  ConstraintReport r;
  // Unidirectional recurrences and frame-in/frame-out processing: no
  // lookahead beyond the current frame.
  r.causal = true;
  r.quantized = is_quantized(model);
  r.ops_per_frame = ops_per_frame(model).total();
  r.compute_latency_s = static_cast<double>(r.ops_per_frame) / (hw.macs_per_cycle * hw.clock_hz);
  r.deadline_s = model.dsp.hop_seconds();
  r.compute_ok = r.compute_latency_s <= r.deadline_s;
  r.footprint_bytes = estimate_footprint(model).total();
  r.sram_bytes = hw.sram_bytes;
  r.memory_ok = r.footprint_bytes <= hw.sram_bytes;
  r.audio_latency_ms = 1000.0 * (model.dsp.frame_seconds() + model.dsp.hop_seconds());
  r.audio_latency_ok = r.audio_latency_ms <= kAudioLatencyBudgetMs;
  return r;
}

}  // namespace ssem
