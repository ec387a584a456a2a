#pragma once

#include <fftw3.h>

#include <complex>
#include <cstddef>
#include <span>
#include <vector>

namespace beatframe::detail {

// Owns an FFTW real<->complex plan pair of one size. Planning is serialized
// through a process-wide lock; execution on distinct instances is thread-safe.
class RealFft {
 public:
  explicit RealFft(std::size_t n);
  ~RealFft();
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  std::size_t size() const { return n_; }
  std::size_t bins() const { return n_ / 2 + 1; }

  // input.size() == n, output.size() == bins()
  void forward(std::span<const double> input, std::span<std::complex<double>> output);
  // Unnormalized inverse: output is n * x.
  void inverse(std::span<const std::complex<double>> input, std::span<double> output);

 private:
  std::size_t n_;
  double* real_ = nullptr;
  fftw_complex* spectrum_ = nullptr;
  fftw_plan forward_ = nullptr;
  fftw_plan inverse_ = nullptr;
};

std::vector<double> hann_window(std::size_t n);

}  // namespace beatframe::detail
