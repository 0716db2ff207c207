#pragma once

// Fixed-point sigmoid/tanh: 1024-interval linear-interpolated tables over the
// Q12 pre-activation domain [-8, 8), producing Q15 outputs.

#include <array>
#include <cmath>
#include <cstdint>

#include "ssem/quant.hpp"

namespace ssem {

/// Pre-activation format: int16 with 12 fractional bits, range [-8, 8).
inline constexpr int kPreActFrac = 12;
/// Cell state uses the same format.
inline constexpr int kCellFrac = 12;

class ActivationTable {
 public:
  static constexpr int kIntervals = 1024;
  static constexpr int kShift = 6;  // 65536 / 1024 inputs per interval

  template <class F>
  explicit ActivationTable(F f) {
    for (int i = 0; i <= kIntervals; ++i) {
      const double x = -8.0 + 16.0 * static_cast<double>(i) / kIntervals;
      table_[i] = static_cast<std::int32_t>(round_half_even(f(x) * 32768.0));
    }
  }

  /// Q12 input -> Q15 output (saturated to int16).
  std::int32_t operator()(std::int32_t q12) const {
    const std::int32_t u = saturate(q12, -32768, 32767) + 32768;
    const std::int32_t idx = u >> kShift;
    const std::int32_t frac = u & ((1 << kShift) - 1);
    const std::int32_t lo = table_[idx];
    const std::int32_t hi = table_[idx + 1];
    const std::int32_t y = lo + static_cast<std::int32_t>(shift_round_half_even((hi - lo) * frac, kShift));
    return saturate(y, -32768, 32767);
  }

 private:
  std::array<std::int32_t, kIntervals + 1> table_{};
};

inline const ActivationTable& sigmoid_table() {
  static const ActivationTable t([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
  return t;
}

inline const ActivationTable& tanh_table() {
  static const ActivationTable t([](double x) { return std::tanh(x); });
  return t;
}

/// Q15 value requantized to Q8 or kept in Q16.
inline std::int32_t q15_to(std::int32_t q15, QuantFormat out) { return requantize(q15, 15, out); }

}  // namespace ssem
