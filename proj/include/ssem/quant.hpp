#pragma once

// Fixed-point substrate: symmetric Q-formats with a fixed [-1, 1) range,
// round-half-to-even quantization and exact 32-bit multiply-accumulate.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#if !defined(NDEBUG) || defined(SSEM_CHECKED_ARITHMETIC)
#define SSEM_CHECK_MAC 1
#else
#define SSEM_CHECK_MAC 0
#endif

namespace ssem {

struct QuantFormat {
  int bits = 8;
  int frac_bits = 7;

  static constexpr QuantFormat of_bits(int bits) {
    if (bits != 8 && bits != 16) {
      throw std::invalid_argument("unsupported quantization width: " + std::to_string(bits));
    }
    return QuantFormat{bits, bits - 1};
  }

  constexpr std::int32_t min_code() const { return -(std::int32_t{1} << (bits - 1)); }
  constexpr std::int32_t max_code() const { return (std::int32_t{1} << (bits - 1)) - 1; }
  constexpr double scale() const { return 1.0 / static_cast<double>(std::int64_t{1} << frac_bits); }
  constexpr bool valid() const { return (bits == 8 || bits == 16) && frac_bits == bits - 1; }

  friend constexpr bool operator==(const QuantFormat&, const QuantFormat&) = default;
};

inline constexpr QuantFormat kQ8{8, 7};
inline constexpr QuantFormat kQ16{16, 15};

/// Round-half-to-even of a real value, independent of the FP environment.
inline double round_half_even(double x) {
  const double r = std::round(x);  // half away from zero
  if (std::fabs(x - std::trunc(x)) == 0.5) {
    return 2.0 * std::round(x / 2.0);
  }
  return r;
}

inline std::int32_t saturate(std::int64_t v, std::int32_t lo, std::int32_t hi) {
  if (v < lo) return lo;
  if (v > hi) return hi;
  return static_cast<std::int32_t>(v);
}

inline std::int32_t saturate(std::int64_t v, QuantFormat fmt) {
  return saturate(v, fmt.min_code(), fmt.max_code());
}

inline std::int32_t quantize(double x, QuantFormat fmt) {
  if (std::isnan(x)) return 0;
  const double scaled = x * static_cast<double>(std::int64_t{1} << fmt.frac_bits);
  const double lo = fmt.min_code();
  const double hi = fmt.max_code();
  if (scaled <= lo) return fmt.min_code();
  if (scaled >= hi) return fmt.max_code();
  return saturate(static_cast<std::int64_t>(round_half_even(scaled)), fmt);
}

inline double dequantize(std::int32_t q, QuantFormat fmt) { return static_cast<double>(q) * fmt.scale(); }

/// Arithmetic right shift by `shift` bits with round-half-to-even; negative
/// shifts scale up exactly.
inline std::int64_t shift_round_half_even(std::int64_t v, int shift) {
  if (shift <= 0) return v * (std::int64_t{1} << -shift);
  const std::int64_t q = v >> shift;  // floor
  const std::int64_t rem = v - (q * (std::int64_t{1} << shift));
  const std::int64_t half = std::int64_t{1} << (shift - 1);
  if (rem > half || (rem == half && (q & 1) != 0)) return q + 1;
  return q;
}

struct Accumulator {
  std::int32_t value = 0;
  friend constexpr bool operator==(const Accumulator&, const Accumulator&) = default;
};

inline Accumulator mac(Accumulator acc, std::int32_t a, std::int32_t b) {
#if SSEM_CHECK_MAC
  const std::int64_t wide = static_cast<std::int64_t>(acc.value) + static_cast<std::int64_t>(a) * b;
  if (wide < INT32_MIN || wide > INT32_MAX) {
    throw std::overflow_error("32-bit accumulator overflow in mac()");
  }
  return Accumulator{static_cast<std::int32_t>(wide)};
#else
  return Accumulator{acc.value + a * b};
#endif
}

/// Rescales an accumulator holding `acc_frac` fractional bits into `out`.
inline std::int32_t requantize(std::int64_t acc, int acc_frac, QuantFormat out) {
  return saturate(shift_round_half_even(acc, acc_frac - out.frac_bits), out);
}

/// Accumulator of `in`×`in` products rescaled into `out`.
inline std::int32_t requantize(Accumulator acc, QuantFormat in, QuantFormat out) {
  return requantize(acc.value, 2 * in.frac_bits, out);
}

class QuantTensor {
 public:
  QuantTensor() = default;

  QuantTensor(std::vector<std::size_t> shape, QuantFormat format)
      : shape_(std::move(shape)), format_(format), data_(element_count(shape_), 0) {}

  QuantTensor(std::vector<std::int16_t> data, std::vector<std::size_t> shape, QuantFormat format)
      : shape_(std::move(shape)), format_(format), data_(std::move(data)) {
    if (data_.size() != element_count(shape_)) {
      throw std::invalid_argument("QuantTensor: element count does not match shape");
    }
    for (std::int16_t v : data_) {
      if (v < format_.min_code() || v > format_.max_code()) {
        throw std::out_of_range("QuantTensor: element outside format range");
      }
    }
  }

  static QuantTensor from_real(std::span<const double> values, QuantFormat format) {
    std::vector<std::int16_t> codes(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
      codes[i] = static_cast<std::int16_t>(quantize(values[i], format));
    }
    return QuantTensor(std::move(codes), {values.size()}, format);
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  QuantFormat format() const { return format_; }
  std::size_t size() const { return data_.size(); }
  std::span<const std::int16_t> data() const { return data_; }
  std::span<std::int16_t> data() { return data_; }
  std::int16_t operator[](std::size_t i) const { return data_[i]; }

  std::vector<double> to_real() const {
    std::vector<double> out(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = dequantize(data_[i], format_);
    return out;
  }

  friend bool operator==(const QuantTensor&, const QuantTensor&) = default;

 private:
  static std::size_t element_count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }

  std::vector<std::size_t> shape_;
  QuantFormat format_ = kQ8;
  std::vector<std::int16_t> data_;
};

}  // namespace ssem
