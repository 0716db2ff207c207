#pragma once

// Thin RAII wrapper over FFTW's real-to-complex / complex-to-real transforms.

#include <fftw3.h>

#include <complex>
#include <cstddef>
#include <mutex>
#include <span>
#include <stdexcept>

namespace ssem {

namespace detail {
// The FFTW planner is not reentrant; execution on distinct plans is.
inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace detail

class RealFft {
 public:
  explicit RealFft(std::size_t n) : n_(n) {
    if (n == 0) throw std::invalid_argument("RealFft: size must be positive");
    time_ = static_cast<double*>(fftw_malloc(sizeof(double) * n));
    freq_ = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * bins()));
    if (!time_ || !freq_) {
      release();
      throw std::bad_alloc();
    }
    std::lock_guard lock(detail::fftw_planner_mutex());
    forward_ = fftw_plan_dft_r2c_1d(static_cast<int>(n), time_, freq_, FFTW_ESTIMATE);
    inverse_ = fftw_plan_dft_c2r_1d(static_cast<int>(n), freq_, time_, FFTW_ESTIMATE);
  }

  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;
  ~RealFft() { release(); }

  std::size_t size() const { return n_; }
  std::size_t bins() const { return n_ / 2 + 1; }

  /// Unnormalized forward DFT of n real samples into n/2+1 bins.
  void forward(std::span<const double> in, std::span<std::complex<double>> out) {
    if (in.size() != n_ || out.size() != bins()) throw std::invalid_argument("RealFft::forward: size mismatch");
    std::copy(in.begin(), in.end(), time_);
    fftw_execute(forward_);
    for (std::size_t k = 0; k < bins(); ++k) out[k] = {freq_[k][0], freq_[k][1]};
  }

  /// Inverse DFT scaled by 1/n, so inverse(forward(x)) == x.
  void inverse(std::span<const std::complex<double>> in, std::span<double> out) {
    if (in.size() != bins() || out.size() != n_) throw std::invalid_argument("RealFft::inverse: size mismatch");
    for (std::size_t k = 0; k < bins(); ++k) {
      freq_[k][0] = in[k].real();
      freq_[k][1] = in[k].imag();
    }
    fftw_execute(inverse_);
    const double scale = 1.0 / static_cast<double>(n_);
    for (std::size_t i = 0; i < n_; ++i) out[i] = time_[i] * scale;
  }

 private:
  void release() {
    {
      std::lock_guard lock(detail::fftw_planner_mutex());
      if (forward_) fftw_destroy_plan(forward_);
      if (inverse_) fftw_destroy_plan(inverse_);
    }
    forward_ = inverse_ = nullptr;
    if (time_) fftw_free(time_);
    if (freq_) fftw_free(freq_);
    time_ = nullptr;
    freq_ = nullptr;
  }

  std::size_t n_;
  double* time_ = nullptr;
  fftw_complex* freq_ = nullptr;
  fftw_plan forward_ = nullptr;
  fftw_plan inverse_ = nullptr;
};

}  // namespace ssem
