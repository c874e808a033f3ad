#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

namespace spetbd {

inline constexpr double kDegToRad = std::numbers::pi / 180.0;

/// One quantized radar axis: value(i) = offset + i * step for i in [first, first + count).
struct Axis {
  double offset = 0.0;
  double step = 1.0;
  int first = 0;
  int count = 0;

  double value(int index) const { return offset + index * step; }
  int last() const { return first + count - 1; }
  bool contains(int index) const { return index >= first && index <= last(); }
  int nearest(double v) const { return static_cast<int>(std::lround((v - offset) / step)); }
  /// Zero-based position of an index inside the axis.
  std::size_t slot(int index) const { return static_cast<std::size_t>(index - first); }

  /// All integers i with offset + i*step inside [lo, hi].
  static Axis spanning(double offset, double step, double lo, double hi) {
    constexpr double kEps = 1e-9;
    Axis a;
    a.offset = offset;
    a.step = step;
    a.first = static_cast<int>(std::ceil((lo - offset) / step - kEps));
    const int last = static_cast<int>(std::floor((hi - offset) / step + kEps));
    a.count = last - a.first + 1;
    return a;
  }
};

struct Cell3 {
  int r = 0;
  int d = 0;
  int theta = 0;
  friend bool operator==(const Cell3&, const Cell3&) = default;
  friend auto operator<=>(const Cell3&, const Cell3&) = default;
};

struct Cell4 {
  int r = 0;
  int d = 0;
  int theta = 0;
  int l = 0;
  Cell3 cell3() const { return {r, d, theta}; }
  friend bool operator==(const Cell4&, const Cell4&) = default;
  friend auto operator<=>(const Cell4&, const Cell4&) = default;
};

/// Radar FOV, resolution and mounting. Defaults are the automotive corner radar
/// used throughout the simulations (0.5 m, 1.5 m/s, 4.5 deg cells; 70 ms scans).
///
/// Cell values follow R = r*dr, Rdot = d_min + d*dd, Theta = theta*dtheta,
/// Thetadot = theta_rate_min + l*dtheta/T. Index ranges are every integer whose
/// value falls inside the configured bounds; the azimuth-rate axis has an explicit
/// cell count.
struct RadarParams {
  double dr = 0.5;
  double dd = 1.5;
  double dtheta = 4.5 * kDegToRad;
  double r_min = 0.2;
  double r_max = 35.0;
  double d_min = -33.3;
  double d_max = 33.3;
  double theta_min = -45.0 * kDegToRad;
  double theta_max = 45.0 * kDegToRad;
  double scan_period = 0.07;
  double mounting_angle = -28.0 * kDegToRad;
  double noise_sigma = 1.0;
  int n_theta_rate = 7;
  /// NaN selects a grid centred on zero: -(n+1)/2 cells.
  double theta_rate_min = std::numeric_limits<double>::quiet_NaN();

  double dtheta_rate() const { return dtheta / scan_period; }
  double theta_rate_offset() const {
    return std::isnan(theta_rate_min) ? -0.5 * (n_theta_rate + 1) * dtheta_rate() : theta_rate_min;
  }

  Axis range_axis() const { return Axis::spanning(0.0, dr, r_min, r_max); }
  Axis doppler_axis() const { return Axis::spanning(d_min, dd, d_min, d_max); }
  Axis azimuth_axis() const { return Axis::spanning(0.0, dtheta, theta_min, theta_max); }
  Axis azimuth_rate_axis() const {
    Axis a;
    a.offset = theta_rate_offset();
    a.step = dtheta_rate();
    a.first = 1;
    a.count = n_theta_rate;
    return a;
  }

  std::size_t n_range() const { return static_cast<std::size_t>(range_axis().count); }
  std::size_t n_doppler() const { return static_cast<std::size_t>(doppler_axis().count); }
  std::size_t n_azimuth() const { return static_cast<std::size_t>(azimuth_axis().count); }
  std::size_t cube_size() const { return n_range() * n_doppler() * n_azimuth(); }

  bool contains(const Cell3& c) const {
    return range_axis().contains(c.r) && doppler_axis().contains(c.d) && azimuth_axis().contains(c.theta);
  }
  bool contains(const Cell4& c) const { return contains(c.cell3()) && azimuth_rate_axis().contains(c.l); }

  /// Row-major (r, d, theta) offset into a data cube.
  std::size_t flat_index(const Cell3& c) const {
    return (range_axis().slot(c.r) * n_doppler() + doppler_axis().slot(c.d)) * n_azimuth() +
           azimuth_axis().slot(c.theta);
  }
  Cell3 cell_at(std::size_t flat) const {
    const std::size_t nt = n_azimuth();
    const std::size_t nd = n_doppler();
    Cell3 c;
    c.theta = azimuth_axis().first + static_cast<int>(flat % nt);
    c.d = doppler_axis().first + static_cast<int>((flat / nt) % nd);
    c.r = range_axis().first + static_cast<int>(flat / (nt * nd));
    return c;
  }

  /// Cartesian extent of a resolution cell at range R: max(dr, R*dtheta).
  double position_cell_extent(double range) const { return std::max(dr, range * dtheta); }

  void validate() const {
    if (!(dr > 0 && dd > 0 && dtheta > 0 && scan_period > 0)) {
      throw std::invalid_argument("radar resolution and scan period must be positive");
    }
    if (!(noise_sigma > 0)) throw std::invalid_argument("radar noise sigma must be positive");
    if (n_theta_rate < 1) throw std::invalid_argument("azimuth-rate axis needs at least one cell");
    if (range_axis().count < 1 || doppler_axis().count < 1 || azimuth_axis().count < 1) {
      throw std::invalid_argument("radar FOV bounds select no cells on some axis");
    }
  }
};

}  // namespace spetbd
