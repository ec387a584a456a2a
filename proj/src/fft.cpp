#include "fft.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numbers>

namespace beatframe::detail {

namespace {
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace

RealFft::RealFft(std::size_t n) : n_(n) {
  std::lock_guard lock(planner_mutex());
  real_ = fftw_alloc_real(n_);
  spectrum_ = fftw_alloc_complex(bins());
  forward_ = fftw_plan_dft_r2c_1d(static_cast<int>(n_), real_, spectrum_, FFTW_ESTIMATE);
  inverse_ = fftw_plan_dft_c2r_1d(static_cast<int>(n_), spectrum_, real_, FFTW_ESTIMATE);
}

RealFft::~RealFft() {
  std::lock_guard lock(planner_mutex());
  fftw_destroy_plan(forward_);
  fftw_destroy_plan(inverse_);
  fftw_free(real_);
  fftw_free(spectrum_);
}

void RealFft::forward(std::span<const double> input, std::span<std::complex<double>> output) {
  std::copy(input.begin(), input.end(), real_);
  fftw_execute(forward_);
  for (std::size_t k = 0; k < bins(); ++k) {
    output[k] = {spectrum_[k][0], spectrum_[k][1]};
  }
}

void RealFft::inverse(std::span<const std::complex<double>> input, std::span<double> output) {
  for (std::size_t k = 0; k < bins(); ++k) {
    spectrum_[k][0] = input[k].real();
    spectrum_[k][1] = input[k].imag();
  }
  // c2r destroys its input array, which is our private buffer.
  fftw_execute(inverse_);
  std::copy(real_, real_ + n_, output.begin());
}

std::vector<double> hann_window(std::size_t n) {
  // Periodic Hann, the usual STFT choice.
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
  }
  return w;
}

}  // namespace beatframe::detail
