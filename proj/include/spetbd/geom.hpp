#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>

#include "spetbd/radar_params.hpp"

namespace spetbd {

/// State ordering everywhere is (x, xdot, y, ydot).
using Vec4 = Eigen::Matrix<double, 4, 1>;
using Mat4 = Eigen::Matrix<double, 4, 4>;
using Vec2 = Eigen::Matrix<double, 2, 1>;
using Mat2 = Eigen::Matrix<double, 2, 2>;

/// Raised when a covariance that must be PSD is not, beyond round-off.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Frame { kRadar, kVehicle, kYawCalibrated, kGeodetic };

inline const char* to_string(Frame f) {
  switch (f) {
    case Frame::kRadar: return "radar";
    case Frame::kVehicle: return "vehicle";
    case Frame::kYawCalibrated: return "yaw-calibrated";
    case Frame::kGeodetic: return "geodetic";
  }
  return "?";
}

struct MeasurementState {
  double range = 0.0;
  double range_rate = 0.0;
  double azimuth = 0.0;
  double azimuth_rate = 0.0;
};

/// Gaussian measurement error on (R, Rdot, Theta, Thetadot) with range-Doppler coupling rho.
struct PolarNoiseModel {
  double sigma_range = 0.0;
  double sigma_doppler = 0.0;
  double sigma_azimuth = 0.0;
  double sigma_azimuth_rate = 0.0;
  double rho = 0.0;

  /// Uniform quantization error of one resolution cell on every axis.
  static PolarNoiseModel from_resolution(const RadarParams& p) {
    const double k = 1.0 / std::sqrt(12.0);
    return {p.dr * k, p.dd * k, p.dtheta * k, p.dtheta_rate() * k, 0.0};
  }

  void validate() const {
    if (sigma_range < 0 || sigma_doppler < 0 || sigma_azimuth < 0 || sigma_azimuth_rate < 0) {
      throw std::domain_error("polar noise standard deviations must be non-negative");
    }
    if (!(std::abs(rho) < 1.0)) {
      throw std::domain_error("range-Doppler correlation must satisfy |rho| < 1");
    }
  }

  Mat4 covariance() const {
    Mat4 m = Mat4::Zero();
    m(0, 0) = sigma_range * sigma_range;
    m(1, 1) = sigma_doppler * sigma_doppler;
    m(0, 1) = m(1, 0) = rho * sigma_range * sigma_doppler;
    m(2, 2) = sigma_azimuth * sigma_azimuth;
    m(3, 3) = sigma_azimuth_rate * sigma_azimuth_rate;
    return m;
  }
};

struct CartesianState {
  Vec4 v = Vec4::Zero();
  Frame frame = Frame::kRadar;

  double x() const { return v[0]; }
  double xdot() const { return v[1]; }
  double y() const { return v[2]; }
  double ydot() const { return v[3]; }
};

struct MomentPair {
  Vec4 mean = Vec4::Zero();
  Mat4 cov = Mat4::Zero();
};

/// Clockwise rotation acting jointly on position and velocity.
inline Mat4 rotation(double angle) {
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  Mat4 r;
  r << c, 0, s, 0,
       0, c, 0, s,
       -s, 0, c, 0,
       0, -s, 0, c;
  return r;
}

inline double wrap_angle(double a) {
  a = std::remainder(a, 2.0 * std::numbers::pi);
  if (a <= -std::numbers::pi) a += 2.0 * std::numbers::pi;
  return a;
}

/// Checks symmetry and PSD-ness of a covariance. Eigenvalues in (-tol, 0) are clamped to zero,
/// tol = max(1e-10*trace, 1e-12*scale); anything more negative throws NumericalError. `scale` is
/// the magnitude of the terms whose difference formed q (cancellation round-off).
inline Mat4 repair_psd(const Mat4& q, const char* what = "covariance", double scale = 0.0) {
  Mat4 sym = 0.5 * (q + q.transpose());
  const double tr = sym.trace();
  const double tol = std::max({1e-10 * std::abs(tr), 1e-12 * std::abs(scale), 1e-300});
  // Cheap path: an LDL^T with non-negative pivots is PSD already.
  Eigen::LDLT<Mat4> ldlt(sym);
  if (ldlt.info() == Eigen::Success && ldlt.isPositive() && ldlt.vectorD().minCoeff() >= 0.0) {
    return sym;
  }
  Eigen::SelfAdjointEigenSolver<Mat4> es(sym);
  Vec4 ev = es.eigenvalues();
  if (ev.minCoeff() >= 0.0) return sym;
  if (ev.minCoeff() < -tol) {
    throw NumericalError(std::string(what) + " is not positive semidefinite (min eigenvalue " +
                         std::to_string(ev.minCoeff()) + ")");
  }
  ev = ev.cwiseMax(0.0);
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

inline bool is_psd(const Mat4& q, double rel_tol = 1e-10) {
  Eigen::SelfAdjointEigenSolver<Mat4> es(0.5 * (q + q.transpose()), Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff() >= -rel_tol * std::max(std::abs(q.trace()), 1e-300);
}

/// Measurement state of a 4-D resolution cell. Throws std::domain_error outside the grid.
inline MeasurementState measurement_state_from_cell(const Cell4& cell, const RadarParams& p) {
  if (!p.contains(cell)) throw std::domain_error("cell index outside the 4-D resolution grid");
  return {p.range_axis().value(cell.r), p.doppler_axis().value(cell.d),
          p.azimuth_axis().value(cell.theta), p.azimuth_rate_axis().value(cell.l)};
}

/// Nearest cell to a measurement state (no bounds check).
inline Cell4 nearest_cell(const MeasurementState& y, const RadarParams& p) {
  return {p.range_axis().nearest(y.range), p.doppler_axis().nearest(y.range_rate),
          p.azimuth_axis().nearest(y.azimuth), p.azimuth_rate_axis().nearest(y.azimuth_rate)};
}

inline CartesianState polar_to_cartesian(const MeasurementState& y) {
  if (!std::isfinite(y.range) || !std::isfinite(y.range_rate) || !std::isfinite(y.azimuth) ||
      !std::isfinite(y.azimuth_rate)) {
    throw std::domain_error("measurement state must be finite");
  }
  const double c = std::cos(y.azimuth);
  const double s = std::sin(y.azimuth);
  CartesianState x;
  x.frame = Frame::kRadar;
  x.v << y.range * c, y.range_rate * c - y.range * y.azimuth_rate * s, y.range * s,
      y.range_rate * s + y.range * y.azimuth_rate * c;
  return x;
}

/// Inverse of polar_to_cartesian for a radar-frame state.
inline MeasurementState cartesian_to_polar(const Vec4& v) {
  const double x = v[0], xd = v[1], y = v[2], yd = v[3];
  const double r2 = x * x + y * y;
  const double r = std::sqrt(r2);
  MeasurementState m;
  m.range = r;
  m.azimuth = std::atan2(y, x);
  m.range_rate = r > 0 ? (x * xd + y * yd) / r : 0.0;
  m.azimuth_rate = r2 > 0 ? (x * yd - y * xd) / r2 : 0.0;
  return m;
}

/// Mean and covariance of v = s(y) - s(y - n), n ~ N(0, M), with y the observed cell.
///
/// The trigonometric factors depend only on the azimuth error, the amplitudes (R, Rdot, R*Thetadot)
/// only on the remaining components, so every moment factorizes into Gaussian trig moments
/// times polynomial moments and is exact.
inline MomentPair converted_measurement_moments(const MeasurementState& y, const PolarNoiseModel& noise) {
  noise.validate();
  const double sr = noise.sigma_range, sd = noise.sigma_doppler;
  const double st = noise.sigma_azimuth, sw = noise.sigma_azimuth_rate;
  const double rsd = noise.rho * sr * sd;
  const double R = y.range, Rd = y.range_rate, th = y.azimuth, w = y.azimuth_rate;

  // Amplitudes a = (R, Rdot, R*Thetadot) of the true state.
  const std::array<double, 3> ea{R, Rd, R * w};
  std::array<std::array<double, 3>, 3> paa{};
  paa[0][0] = R * R + sr * sr;
  paa[1][1] = Rd * Rd + sd * sd;
  paa[0][1] = paa[1][0] = R * Rd + rsd;
  paa[2][2] = (R * R + sr * sr) * (w * w + sw * sw);
  paa[0][2] = paa[2][0] = (R * R + sr * sr) * w;
  paa[1][2] = paa[2][1] = (R * Rd + rsd) * w;

  // Trig factors t = (cos, sin) of the true azimuth.
  const double lam1 = std::exp(-0.5 * st * st);
  const double lam2 = std::exp(-2.0 * st * st);
  const std::array<double, 2> et{lam1 * std::cos(th), lam1 * std::sin(th)};
  std::array<std::array<double, 2>, 2> ptt{};
  ptt[0][0] = 0.5 * (1.0 + lam2 * std::cos(2 * th));
  ptt[1][1] = 0.5 * (1.0 - lam2 * std::cos(2 * th));
  ptt[0][1] = ptt[1][0] = 0.5 * lam2 * std::sin(2 * th);

  // s_i = sum_{p,q} g[i][p][q] a_p t_q
  double g[4][3][2] = {};
  g[0][0][0] = 1;                   // R cos
  g[1][1][0] = 1;  g[1][2][1] = -1; // Rdot cos - R Thetadot sin
  g[2][0][1] = 1;                   // R sin
  g[3][1][1] = 1;  g[3][2][0] = 1;  // Rdot sin + R Thetadot cos

  Vec4 es = Vec4::Zero();
  Mat4 ess = Mat4::Zero();
  for (int i = 0; i < 4; ++i) {
    for (int p = 0; p < 3; ++p)
      for (int q = 0; q < 2; ++q) es[i] += g[i][p][q] * ea[p] * et[q];
    for (int j = 0; j <= i; ++j) {
      double acc = 0.0;
      for (int p = 0; p < 3; ++p)
        for (int q = 0; q < 2; ++q) {
          if (g[i][p][q] == 0) continue;
          for (int pp = 0; pp < 3; ++pp)
            for (int qq = 0; qq < 2; ++qq) acc += g[i][p][q] * g[j][pp][qq] * paa[p][pp] * ptt[q][qq];
        }
      ess(i, j) = ess(j, i) = acc;
    }
  }
  MomentPair out;
  out.mean = polar_to_cartesian(y).v - es;
  out.cov = ess - es * es.transpose();
  out.cov = repair_psd(out.cov, "converted measurement covariance", ess.trace());
  return out;
}

namespace detail {
inline Frame rotated_frame(Frame f) {
  switch (f) {
    case Frame::kRadar: return Frame::kVehicle;
    case Frame::kVehicle: return Frame::kYawCalibrated;
    default: throw std::logic_error(std::string("cannot rotate a state tagged ") + to_string(f));
  }
}
}  // namespace detail

/// R(angle) * x; the frame tag advances radar -> vehicle -> yaw-calibrated.
inline CartesianState rotate_state(const CartesianState& x, double angle) {
  return {rotation(angle) * x.v, detail::rotated_frame(x.frame)};
}

inline MomentPair rotated_moments(const MomentPair& m, double angle) {
  const Mat4 r = rotation(angle);
  MomentPair out;
  out.mean = r * m.mean;
  out.cov = r * m.cov * r.transpose();
  out.cov = 0.5 * (out.cov + out.cov.transpose());
  return out;
}

/// Mean of the conversion error after compensating a measured yaw alpha whose error has
/// variance q55: lambda = exp(-q55/2) damps every bracket.
inline Vec4 yaw_calibration_mean(const Vec4& xv, const Vec4& mu, double alpha, double q55) {
  if (q55 < 0) throw std::domain_error("yaw error variance must be non-negative");
  const double lam = std::exp(-0.5 * q55);
  const double c = std::cos(alpha), s = std::sin(alpha);
  const double x = xv[0], xd = xv[1], y = xv[2], yd = xv[3];
  Vec4 out;
  out[0] = x * c + y * s + lam * (mu[0] - x) * c + lam * (mu[2] - y) * s;
  out[1] = xd * c + yd * s + lam * (mu[1] - xd) * c + lam * (mu[3] - yd) * s;
  out[2] = y * c - x * s + lam * (x - mu[0]) * s + lam * (mu[2] - y) * c;
  out[3] = yd * c - xd * s + lam * (xd - mu[1]) * s + lam * (mu[3] - yd) * c;
  return out;
}

/// Covariance of the conversion error after yaw compensation, entry by entry.
///
/// S_ij = Q_ij + m_i m_j with m = x - mu are the second moments of the true vehicle-frame state;
/// wcc, wss, wcs are E[cos^2], E[sin^2], E[sin cos] of (alpha - yaw error), and lb2 = lambda_B^2.
/// Two entries differ from the textbook transcription: Q23 weights S23 by wcc (not wss), and
/// Q44 uses the velocity means mu_2, mu_4 in its squared-mean terms.
inline Mat4 yaw_calibration_cov_raw(const Vec4& xv, const Vec4& mu, const Mat4& qv, double alpha, double q55) {
  if (q55 < 0) throw std::domain_error("yaw error variance must be non-negative");
  const double lb = std::exp(-0.5 * q55);
  const double lb2 = lb * lb;
  const double e2 = std::exp(-2.0 * q55);
  const double lc = 0.5 * (1.0 + e2);
  const double ld = 0.5 * (1.0 - e2);
  const double c = std::cos(alpha), s = std::sin(alpha);
  const double c2 = c * c, s2 = s * s, sin2 = std::sin(2 * alpha), cos2 = std::cos(2 * alpha);
  const double wcc = lc * c2 + ld * s2;
  const double wss = lc * s2 + ld * c2;
  const double wcs = 0.5 * (lc - ld) * sin2;

  const double m1 = xv[0] - mu[0], m2 = xv[1] - mu[1], m3 = xv[2] - mu[2], m4 = xv[3] - mu[3];
  auto S = [&](int i, int j) {
    const double m[4] = {m1, m2, m3, m4};
    return qv(i, j) + m[i] * m[j];
  };
  const double S11 = S(0, 0), S22 = S(1, 1), S33 = S(2, 2), S44 = S(3, 3);
  const double S12 = S(0, 1), S13 = S(0, 2), S14 = S(0, 3), S23 = S(1, 2), S24 = S(1, 3), S34 = S(2, 3);

  Mat4 q;
  q(0, 0) = sin2 * (lc - ld) * S13 - sin2 * lb2 * m1 * m3 + S11 * wcc + S33 * wss - lb2 * m1 * m1 * c2 -
            lb2 * m3 * m3 * s2;
  q(1, 1) = sin2 * (lc - ld) * S24 - sin2 * lb2 * m2 * m4 + S22 * wcc + S44 * wss - lb2 * m2 * m2 * c2 -
            lb2 * m4 * m4 * s2;
  q(2, 2) = sin2 * lb2 * m1 * m3 - sin2 * (lc - ld) * S13 + S11 * wss + S33 * wcc - lb2 * m1 * m1 * s2 -
            lb2 * m3 * m3 * c2;
  q(3, 3) = sin2 * lb2 * m2 * m4 - sin2 * (lc - ld) * S24 + S22 * wss + S44 * wcc - lb2 * m2 * m2 * s2 -
            lb2 * m4 * m4 * c2;
  q(0, 1) = S12 * wcc + wcs * (S23 + S14) + S34 * wss - lb2 * (m1 * c + m3 * s) * (m2 * c + m4 * s);
  q(0, 2) = S13 * (lc - ld) * cos2 + wcs * (S33 - S11) - lb2 * (m1 * c + m3 * s) * (m3 * c - m1 * s);
  q(0, 3) = S14 * wcc + wcs * (S34 - S12) - S23 * wss - lb2 * (m1 * c + m3 * s) * (m4 * c - m2 * s);
  q(1, 2) = S23 * wcc + wcs * (S34 - S12) - S14 * wss - lb2 * (m2 * c + m4 * s) * (m3 * c - m1 * s);
  q(1, 3) = S24 * (lc - ld) * cos2 + wcs * (S44 - S22) - lb2 * (m2 * c + m4 * s) * (m4 * c - m2 * s);
  q(2, 3) = S12 * wss + S34 * wcc - wcs * (S14 + S23) - lb2 * (m3 * c - m1 * s) * (m4 * c - m2 * s);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < i; ++j) q(i, j) = q(j, i);
  return q;
}

/// yaw_calibration_cov_raw followed by the PSD check/repair.
inline Mat4 yaw_calibration_cov(const Vec4& xv, const Vec4& mu, const Mat4& qv, double alpha, double q55) {
  return repair_psd(yaw_calibration_cov_raw(xv, mu, qv, alpha, q55), "yaw-calibrated covariance");
}

/// Adds the ego translation error: mean unchanged, covariance summed.
inline MomentPair geodetic_moments(const MomentPair& yaw, const Mat4& ego_cov) {
  return {yaw.mean, yaw.cov + ego_cov};
}

/// x = x^Y + p^c. Requires a yaw-calibrated state.
inline CartesianState to_geodetic(const CartesianState& xy, const Vec4& ego_pc) {
  if (xy.frame != Frame::kYawCalibrated) {
    throw std::logic_error(std::string("geodetic translation expects a yaw-calibrated state, got ") +
                           to_string(xy.frame));
  }
  return {xy.v + ego_pc, Frame::kGeodetic};
}

}  // namespace spetbd
