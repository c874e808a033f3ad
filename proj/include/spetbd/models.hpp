#pragma once

#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "spetbd/geom.hpp"

namespace spetbd {

/// Ego centroid state. Heading vector in the geodetic frame is (cos yaw, -sin yaw).
struct EgoState {
  double px = 0.0;
  double py = 0.0;
  double vx = 0.0;
  double vy = 0.0;
  double yaw = 0.0;
  bool measured = false;

  /// (px, vx, py, vy): the translation added by the final conversion step.
  Vec4 translation() const { return Vec4(px, vx, py, vy); }
};

/// Q^p = diag(ex^2, evx^2, ey^2, evy^2, eyaw^2) / (3 eta).
struct EgoNoiseModel {
  double e_x = 1.69;
  double e_vx = 0.04;
  double e_y = 0.83;
  double e_vy = 0.04;
  double e_yaw = 2.54 * kDegToRad;
  /// eta = +inf gives a perfect navigation solution.
  double eta = 10.0;

  void validate() const {
    if (!(eta > 0)) throw std::invalid_argument("positioning error factor eta must be positive");
    if (e_x < 0 || e_vx < 0 || e_y < 0 || e_vy < 0 || e_yaw < 0) {
      throw std::invalid_argument("positioning error magnitudes must be non-negative");
    }
  }
  double scale() const { return std::isinf(eta) ? 0.0 : 1.0 / (3.0 * eta); }
  double var_x() const { return e_x * e_x * scale(); }
  double var_vx() const { return e_vx * e_vx * scale(); }
  double var_y() const { return e_y * e_y * scale(); }
  double var_vy() const { return e_vy * e_vy * scale(); }
  double var_yaw() const { return e_yaw * e_yaw * scale(); }

  /// 4x4 translation block Q^c in (x, xdot, y, ydot) order.
  Mat4 translation_cov() const {
    Mat4 q = Mat4::Zero();
    q(0, 0) = var_x();
    q(1, 1) = var_vx();
    q(2, 2) = var_y();
    q(3, 3) = var_vy();
    return q;
  }
};

enum class EgoModel { kCV, kCA, kCT };

inline EgoModel ego_model_from_string(const std::string& s) {
  if (s == "CV" || s == "cv") return EgoModel::kCV;
  if (s == "CA" || s == "ca") return EgoModel::kCA;
  if (s == "CT" || s == "ct") return EgoModel::kCT;
  throw std::invalid_argument("unknown ego motion model '" + s + "' (expected CV, CA or CT)");
}

inline const char* to_string(EgoModel m) {
  switch (m) {
    case EgoModel::kCV: return "CV";
    case EgoModel::kCA: return "CA";
    case EgoModel::kCT: return "CT";
  }
  return "?";
}

struct EgoMotionSpec {
  EgoModel model = EgoModel::kCV;
  /// Along-heading acceleration (CA), m/s^2.
  double accel = 0.0;
  /// Clockwise turn rate (CT), rad/s.
  double turn_rate = 0.0;
  EgoState initial{};
};

/// Geodetic target state (x, xdot, y, ydot).
using TargetState = Vec4;

/// Constant-velocity transition.
inline Mat4 cv_transition(double T) {
  Mat4 f = Mat4::Identity();
  f(0, 1) = T;
  f(2, 3) = T;
  return f;
}

/// Maps the 2-D acceleration noise onto the state.
inline Eigen::Matrix<double, 4, 2> noise_gain(double T) {
  Eigen::Matrix<double, 4, 2> c = Eigen::Matrix<double, 4, 2>::Zero();
  c(0, 0) = 0.5 * T * T;
  c(1, 0) = T;
  c(2, 1) = 0.5 * T * T;
  c(3, 1) = T;
  return c;
}

/// C Q^t C^T.
inline Mat4 process_cov(double T, const Mat2& qt) {
  const auto c = noise_gain(T);
  return c * qt * c.transpose();
}

template <class Rng>
TargetState propagate_target(const TargetState& x, double T, const Mat2& qt, Rng& rng) {
  if (!(T > 0)) throw std::invalid_argument("propagation interval must be positive");
  TargetState out = cv_transition(T) * x;
  if (qt.isZero(0.0)) return out;
  Eigen::LLT<Mat2> llt(qt);
  if (llt.info() != Eigen::Success) throw std::invalid_argument("target process noise must be positive definite");
  std::normal_distribution<double> n01;
  Vec2 w(n01(rng), n01(rng));
  out += noise_gain(T) * (llt.matrixL() * w);
  return out;
}

/// K true ego states spaced by T, starting at spec.initial.
inline std::vector<EgoState> ego_true_trajectory(const EgoMotionSpec& spec, int K, double T) {
  if (K < 1) throw std::invalid_argument("trajectory needs at least one frame");
  if (!(T > 0)) throw std::invalid_argument("scan period must be positive");
  std::vector<EgoState> out;
  out.reserve(static_cast<std::size_t>(K));
  EgoState s = spec.initial;
  s.measured = false;
  s.yaw = wrap_angle(s.yaw);
  out.push_back(s);
  for (int k = 1; k < K; ++k) {
    const double speed = std::hypot(s.vx, s.vy);
    switch (spec.model) {
      case EgoModel::kCV:
        s.px += s.vx * T;
        s.py += s.vy * T;
        break;
      case EgoModel::kCA: {
        const double hx = std::cos(s.yaw), hy = -std::sin(s.yaw);
        s.px += s.vx * T + 0.5 * spec.accel * T * T * hx;
        s.py += s.vy * T + 0.5 * spec.accel * T * T * hy;
        s.vx += spec.accel * T * hx;
        s.vy += spec.accel * T * hy;
        break;
      }
      case EgoModel::kCT: {
        const double w = spec.turn_rate;
        if (w == 0.0) {
          s.px += s.vx * T;
          s.py += s.vy * T;
          break;
        }
        // Velocity direction angle a measured clockwise like yaw.
        const double a0 = std::atan2(-s.vy, s.vx);
        const double a1 = a0 + w * T;
        s.px += speed / w * (std::sin(a1) - std::sin(a0));
        s.py += speed / w * (std::cos(a1) - std::cos(a0));
        s.vx = speed * std::cos(a1);
        s.vy = -speed * std::sin(a1);
        s.yaw = wrap_angle(s.yaw + w * T);
        break;
      }
    }
    out.push_back(s);
  }
  return out;
}

template <class Rng>
EgoState measure_ego(const EgoState& truth, const EgoNoiseModel& noise, Rng& rng) {
  noise.validate();
  std::normal_distribution<double> n01;
  EgoState m = truth;
  m.measured = true;
  m.px += std::sqrt(noise.var_x()) * n01(rng);
  m.vx += std::sqrt(noise.var_vx()) * n01(rng);
  m.py += std::sqrt(noise.var_y()) * n01(rng);
  m.vy += std::sqrt(noise.var_vy()) * n01(rng);
  m.yaw = wrap_angle(m.yaw + std::sqrt(noise.var_yaw()) * n01(rng));
  return m;
}

/// Moments of the prediction error -F v_{k-1} + C w + v_k given the previous and current
/// geodetic error moments.
inline MomentPair prediction_moments(const MomentPair& prev, const MomentPair& curr, const Mat2& qt,
                                     const Mat4& F, const Eigen::Matrix<double, 4, 2>& C) {
  MomentPair out;
  out.mean = curr.mean - F * prev.mean;
  out.cov = F * prev.cov * F.transpose() + C * qt * C.transpose() + curr.cov;
  out.cov = repair_psd(out.cov, "prediction covariance");
  return out;
}

}  // namespace spetbd
