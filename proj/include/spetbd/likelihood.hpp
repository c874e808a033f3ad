#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace spetbd {

/// log of the modified Bessel function I0 for x >= 0.
inline double log_i0(double x) {
  if (x < 0) x = -x;
  if (x <= 30.0) {
    // sum_k ((x/2)^2)^k / (k!)^2
    const double q = 0.25 * x * x;
    double term = 1.0, sum = 1.0;
    for (int k = 1; k < 200; ++k) {
      term *= q / (static_cast<double>(k) * k);
      sum += term;
      if (term < sum * 1e-17) break;
    }
    return std::log(sum);
  }
  // I0(x) ~ e^x / sqrt(2 pi x) * sum_k ((2k-1)!!)^2 / (k! (8x)^k)
  double term = 1.0, sum = 1.0;
  for (int k = 1; k <= 12; ++k) {
    const double odd = 2.0 * k - 1.0;
    term *= odd * odd / (8.0 * k * x);
    sum += term;
  }
  return x - 0.5 * std::log(2.0 * std::numbers::pi * x) + std::log(sum);
}

/// log of the Rician-to-Rayleigh density ratio at amplitude z for peak amplitude A and noise sigma.
inline double pixel_log_lr(double z, double A, double sigma) {
  if (!(sigma > 0)) throw std::invalid_argument("noise sigma must be positive");
  if (z < 0) throw std::invalid_argument("amplitude must be non-negative");
  if (A == 0.0) return 0.0;
  const double s2 = sigma * sigma;
  return log_i0(A * z / s2) - A * A / (2.0 * s2);
}

}  // namespace spetbd
