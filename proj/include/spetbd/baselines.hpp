#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "spetbd/geom.hpp"
#include "spetbd/likelihood.hpp"
#include "spetbd/models.hpp"
#include "spetbd/sensor.hpp"
#include "spetbd/tbd.hpp"

namespace spetbd {

// ---------------------------------------------------------------------------
// Classical MF-TBD on per-scan radar cells
// ---------------------------------------------------------------------------

struct VelocityGateSpec {
  double max_speed = 15.0;
  double max_accel = 33.0;

  void validate() const {
    if (!(max_speed > 0 && max_accel > 0)) throw std::invalid_argument("velocity gate bounds must be positive");
  }
};

/// Radar-frame cells and their fixed neighbor lists (CSR). A previous cell p neighbors a
/// current cell c when |dx|, |dy| <= vmax*T + extent and |dRdot| <= amax*T + dd, with extent
/// the larger Cartesian cell size of the two.
struct ClassicalGrid {
  RadarParams params;
  std::vector<Cell3> cells;
  std::vector<double> px, py, rdot;
  std::vector<std::uint32_t> start;
  std::vector<std::uint32_t> nbr;

  ClassicalGrid(const RadarParams& p, const VelocityGateSpec& g) : params(p) {
    p.validate();
    g.validate();
    const std::size_t n = p.cube_size();
    cells.resize(n);
    px.resize(n);
    py.resize(n);
    rdot.resize(n);
    std::vector<double> ext(n);
    for (std::size_t i = 0; i < n; ++i) {
      const Cell3 c = p.cell_at(i);
      cells[i] = c;
      const double R = p.range_axis().value(c.r), th = p.azimuth_axis().value(c.theta);
      px[i] = R * std::cos(th);
      py[i] = R * std::sin(th);
      rdot[i] = p.doppler_axis().value(c.d);
      ext[i] = p.position_cell_extent(R);
    }
    const double T = p.scan_period;
    const double dv = g.max_accel * T + p.dd;
    start.assign(n + 1, 0);
    for (std::size_t c = 0; c < n; ++c) {
      for (std::size_t q = 0; q < n; ++q) {
        const double dp = g.max_speed * T + std::max(ext[c], ext[q]);
        if (std::abs(px[c] - px[q]) <= dp && std::abs(py[c] - py[q]) <= dp && std::abs(rdot[c] - rdot[q]) <= dv) {
          nbr.push_back(static_cast<std::uint32_t>(q));
        }
      }
      start[c + 1] = static_cast<std::uint32_t>(nbr.size());
    }
  }
  std::size_t size() const { return cells.size(); }
};

struct ClassicalFrame {
  std::vector<double> merit;
  std::vector<int> pred;
  std::vector<int> ell;
};

/// Merit recursion over radar cells with the fixed neighbor gate. No transmission.
inline std::vector<ClassicalFrame> run_classical_mftbd(const std::vector<DataCube>& cubes, const ClassicalGrid& grid,
                                                       double design_amplitude) {
  std::vector<ClassicalFrame> out;
  const std::size_t n = grid.size();
  const double s = grid.params.noise_sigma;
  for (std::size_t k = 0; k < cubes.size(); ++k) {
    if (!cubes[k].matches(grid.params)) throw std::invalid_argument("cube dimensions do not match the radar parameters");
    ClassicalFrame f;
    f.merit.resize(n);
    f.pred.assign(n, -1);
    f.ell.assign(n, 1);
    for (std::size_t c = 0; c < n; ++c) {
      const double lam = pixel_log_lr(cubes[k].data[c], design_amplitude, s);
      f.merit[c] = lam;
      if (k == 0) continue;
      const ClassicalFrame& pf = out.back();
      int best = -1;
      double bm = -std::numeric_limits<double>::infinity();
      for (std::uint32_t j = grid.start[c]; j < grid.start[c + 1]; ++j) {
        const std::uint32_t q = grid.nbr[j];
        if (pf.merit[q] > bm) {
          bm = pf.merit[q];
          best = static_cast<int>(q);
        }
      }
      if (best >= 0) {
        f.merit[c] = bm + lam;
        f.pred[c] = best;
        f.ell[c] = pf.ell[static_cast<std::size_t>(best)] + 1;
      }
    }
    out.push_back(std::move(f));
  }
  return out;
}

inline double classical_max_merit(const std::vector<ClassicalFrame>& frames) {
  if (frames.empty()) return -std::numeric_limits<double>::infinity();
  return *std::max_element(frames.back().merit.begin(), frames.back().merit.end());
}

/// Geodetic state of a radar cell seen from a measured ego pose (zero azimuth rate).
inline Vec4 radar_cell_to_geodetic(const Cell3& c, const EgoState& ego, const RadarParams& p) {
  MeasurementState y{p.range_axis().value(c.r), p.doppler_axis().value(c.d), p.azimuth_axis().value(c.theta), 0.0};
  return rotation(ego.yaw) * (rotation(p.mounting_angle) * polar_to_cartesian(y).v) + ego.translation();
}

/// Declares the best final cell when it exceeds the single threshold; positions are reported
/// through the measured ego pose of each frame.
inline std::vector<Track> classical_declare(const std::vector<ClassicalFrame>& frames, const std::vector<DataCube>& cubes,
                                            const ClassicalGrid& grid, double threshold) {
  if (frames.empty()) return {};
  const auto& last = frames.back();
  std::size_t best = 0;
  for (std::size_t i = 1; i < last.merit.size(); ++i)
    if (last.merit[i] > last.merit[best]) best = i;
  if (!(last.merit[best] > threshold)) return {};
  Track t;
  t.merit = last.merit[best];
  t.ell = last.ell[best];
  t.final_index = best;
  int idx = static_cast<int>(best);
  for (int k = static_cast<int>(frames.size()) - 1; k >= 0 && idx >= 0; --k) {
    const auto& f = frames[static_cast<std::size_t>(k)];
    const Cell3 c = grid.cells[static_cast<std::size_t>(idx)];
    TrackPoint pt;
    pt.frame = k;
    pt.x = radar_cell_to_geodetic(c, cubes[static_cast<std::size_t>(k)].ego_measured, grid.params);
    pt.in_fov = true;
    pt.cell = {c.r, c.d, c.theta, 0};
    pt.merit = f.merit[static_cast<std::size_t>(idx)];
    t.points.push_back(pt);
    idx = f.pred[static_cast<std::size_t>(idx)];
  }
  std::reverse(t.points.begin(), t.points.end());
  return {t};
}

// ---------------------------------------------------------------------------
// Detect-before-track
// ---------------------------------------------------------------------------

struct PointMeasurement {
  int frame = 0;
  Cell3 peak{};
  double amplitude = 0.0;
  double range = 0.0;
  double range_rate = 0.0;
  double azimuth = 0.0;
  /// Radar-frame Cartesian position of the centroid.
  Vec2 position = Vec2::Zero();
};

inline double sfd_threshold(double sigma, double pfa) {
  if (!(pfa > 0 && pfa < 1)) throw std::invalid_argument("single-frame false-alarm probability must lie in (0, 1)");
  return sigma * std::sqrt(-2.0 * std::log(pfa));
}

/// Cells strictly above the Rayleigh threshold, merged over 26-connectivity into
/// amplitude-weighted centroids.
inline std::vector<PointMeasurement> single_frame_detect(const DataCube& cube, const RadarParams& p, double pfa) {
  if (!cube.matches(p)) throw std::invalid_argument("cube dimensions do not match the radar parameters");
  const double thr = sfd_threshold(p.noise_sigma, pfa);
  const std::size_t n = cube.data.size();
  std::vector<std::uint8_t> pass(n, 0), seen(n, 0);
  for (std::size_t i = 0; i < n; ++i) pass[i] = cube.data[i] > thr ? 1 : 0;
  std::vector<PointMeasurement> out;
  std::vector<std::size_t> stack;
  const Axis ar = p.range_axis(), ad = p.doppler_axis(), at = p.azimuth_axis();
  for (std::size_t i = 0; i < n; ++i) {
    if (!pass[i] || seen[i]) continue;
    double w = 0, sr = 0, sd = 0, st = 0, peak_amp = -1;
    Cell3 peak{};
    stack.assign(1, i);
    seen[i] = 1;
    while (!stack.empty()) {
      const std::size_t j = stack.back();
      stack.pop_back();
      const Cell3 c = p.cell_at(j);
      const double a = cube.data[j];
      w += a;
      sr += a * c.r;
      sd += a * c.d;
      st += a * c.theta;
      if (a > peak_amp) {
        peak_amp = a;
        peak = c;
      }
      for (int dr = -1; dr <= 1; ++dr)
        for (int dd = -1; dd <= 1; ++dd)
          for (int dt = -1; dt <= 1; ++dt) {
            const Cell3 nb{c.r + dr, c.d + dd, c.theta + dt};
            if (!p.contains(nb)) continue;
            const std::size_t k = p.flat_index(nb);
            if (pass[k] && !seen[k]) {
              seen[k] = 1;
              stack.push_back(k);
            }
          }
    }
    PointMeasurement m;
    m.frame = cube.frame;
    m.peak = peak;
    m.amplitude = w;
    m.range = ar.offset + ar.step * (sr / w);
    m.range_rate = ad.offset + ad.step * (sd / w);
    m.azimuth = at.offset + at.step * (st / w);
    m.position = Vec2(m.range * std::cos(m.azimuth), m.range * std::sin(m.azimuth));
    out.push_back(m);
  }
  return out;
}

/// Minimum-cost assignment of rows to columns (rows <= cols). Returns the column per row.
inline std::vector<int> hungarian(const std::vector<std::vector<double>>& cost) {
  const int n = static_cast<int>(cost.size());
  if (n == 0) return {};
  const int m = static_cast<int>(cost[0].size());
  if (m < n) throw std::invalid_argument("hungarian expects rows <= columns");
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n) + 1, 0), v(static_cast<std::size_t>(m) + 1, 0);
  std::vector<int> p(static_cast<std::size_t>(m) + 1, 0), way(static_cast<std::size_t>(m) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(m) + 1, inf);
    std::vector<char> used(static_cast<std::size_t>(m) + 1, 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int i0 = p[static_cast<std::size_t>(j0)];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = cost[static_cast<std::size_t>(i0 - 1)][static_cast<std::size_t>(j - 1)] -
                           u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_to_col(static_cast<std::size_t>(n), -1);
  for (int j = 1; j <= m; ++j)
    if (p[static_cast<std::size_t>(j)] > 0) row_to_col[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
  return row_to_col;
}

/// chi-square 2 dof, 0.99 quantile.
inline constexpr double kChi2Dof2P99 = 9.210340371976184;

struct DbtParams {
  double pfa_sfd = 1e-3;
  double gate = kChi2Dof2P99;
  int confirm_hits = 2;
  int confirm_window = 3;
  int max_misses = 2;
  /// Velocity standard deviation at track birth, m/s.
  double init_velocity_sigma = 5.0;
  Mat2 process_noise = Mat2::Identity() * 0.25;
  /// Measurement standard deviations (R, Theta, Rdot); non-positive selects cell/sqrt(12).
  double sigma_range = 0.0;
  double sigma_azimuth = 0.0;
  double sigma_doppler = 0.0;
};

using Vec3 = Eigen::Matrix<double, 3, 1>;
using Mat3 = Eigen::Matrix<double, 3, 3>;
using Mat34 = Eigen::Matrix<double, 3, 4>;

/// (R, Theta, Rdot) of a geodetic state seen from `ego`, and its Jacobian.
inline Vec3 dbt_measurement(const Vec4& x, const EgoState& ego, const RadarParams& p, Mat34* jac) {
  const Mat4 M = rotation(-p.mounting_angle) * rotation(-ego.yaw);
  const Vec4 xr = M * (x - ego.translation());
  const double px = xr[0], vx = xr[1], py = xr[2], vy = xr[3];
  const double r2 = std::max(px * px + py * py, 1e-12);
  const double r = std::sqrt(r2);
  const double rd = (px * vx + py * vy) / r;
  if (jac) {
    Mat34 J = Mat34::Zero();
    J(0, 0) = px / r;
    J(0, 2) = py / r;
    J(1, 0) = -py / r2;
    J(1, 2) = px / r2;
    J(2, 0) = (vx - px * rd / r) / r;
    J(2, 2) = (vy - py * rd / r) / r;
    J(2, 1) = px / r;
    J(2, 3) = py / r;
    *jac = J * M;
  }
  return Vec3(r, std::atan2(py, px), rd);
}

struct DbtTrack {
  Vec4 x = Vec4::Zero();
  Mat4 P = Mat4::Identity();
  int born = 0;
  int hits = 0;
  int misses = 0;
  int age = 0;
  bool confirmed = false;
  double amplitude = 0.0;
  std::vector<TrackPoint> history;
};

/// GNN + EKF tracker over per-frame point measurements. Returns every track alive at the last
/// frame that has been confirmed, ordered by decreasing summed amplitude.
inline std::vector<Track> dbt_track(const std::vector<std::vector<PointMeasurement>>& points,
                                    const std::vector<EgoState>& ego_measured, const RadarParams& p,
                                    const DbtParams& prm) {
  if (points.size() != ego_measured.size()) throw std::invalid_argument("one ego state per frame is required");
  const double T = p.scan_period;
  const Mat4 F = cv_transition(T);
  const Mat4 Qp = process_cov(T, prm.process_noise);
  const double k12 = 1.0 / std::sqrt(12.0);
  const double sr = prm.sigma_range > 0 ? prm.sigma_range : p.dr * k12;
  const double st = prm.sigma_azimuth > 0 ? prm.sigma_azimuth : p.dtheta * k12;
  const double sd = prm.sigma_doppler > 0 ? prm.sigma_doppler : p.dd * k12;
  Mat3 Rm = Mat3::Zero();
  Rm(0, 0) = sr * sr;
  Rm(1, 1) = st * st;
  Rm(2, 2) = sd * sd;

  std::vector<DbtTrack> tracks;
  for (std::size_t k = 0; k < points.size(); ++k) {
    const EgoState& ego = ego_measured[k];
    const auto& meas = points[k];
    for (auto& t : tracks) {
      t.x = F * t.x;
      t.P = F * t.P * F.transpose() + Qp;
    }
    // Gated costs on the (R, Theta) innovation.
    const std::size_t nt = tracks.size(), nm = meas.size();
    const double big = 1e9;
    std::vector<std::vector<double>> cost(nt, std::vector<double>(nm, big));
    for (std::size_t i = 0; i < nt; ++i) {
      Mat34 H;
      const Vec3 zh = dbt_measurement(tracks[i].x, ego, p, &H);
      const Mat3 S = H * tracks[i].P * H.transpose() + Rm;
      const Mat2 S2 = S.topLeftCorner<2, 2>();
      const Mat2 S2i = S2.inverse();
      for (std::size_t j = 0; j < nm; ++j) {
        const Vec2 nu(meas[j].range - zh[0], wrap_angle(meas[j].azimuth - zh[1]));
        const double d2 = nu.dot(S2i * nu);
        if (d2 <= prm.gate) cost[i][j] = d2;
      }
    }
    std::vector<int> assign(nt, -1);
    if (nt > 0 && nm > 0) {
      // Pad to a square problem so rows never exceed columns.
      const std::size_t n = std::max(nt, nm);
      std::vector<std::vector<double>> sq(n, std::vector<double>(n, big));
      for (std::size_t i = 0; i < nt; ++i)
        for (std::size_t j = 0; j < nm; ++j) sq[i][j] = cost[i][j];
      const auto a = hungarian(sq);
      for (std::size_t i = 0; i < nt; ++i) {
        const int j = a[i];
        if (j >= 0 && static_cast<std::size_t>(j) < nm && cost[i][static_cast<std::size_t>(j)] < big) assign[i] = j;
      }
    }
    std::vector<std::uint8_t> used(nm, 0);
    for (std::size_t i = 0; i < nt; ++i) {
      DbtTrack& t = tracks[i];
      ++t.age;
      TrackPoint pt;
      pt.frame = static_cast<int>(k);
      if (assign[i] >= 0) {
        const PointMeasurement& m = meas[static_cast<std::size_t>(assign[i])];
        used[static_cast<std::size_t>(assign[i])] = 1;
        Mat34 H;
        const Vec3 zh = dbt_measurement(t.x, ego, p, &H);
        Vec3 nu(m.range - zh[0], wrap_angle(m.azimuth - zh[1]), m.range_rate - zh[2]);
        const Mat3 S = H * t.P * H.transpose() + Rm;
        const Eigen::Matrix<double, 4, 3> K = t.P * H.transpose() * S.inverse();
        t.x += K * nu;
        const Mat4 I_KH = Mat4::Identity() - K * H;
        t.P = I_KH * t.P * I_KH.transpose() + K * Rm * K.transpose();
        t.P = 0.5 * (t.P + t.P.transpose());
        ++t.hits;
        t.misses = 0;
        t.amplitude += m.amplitude;
        pt.in_fov = true;
        pt.cell = {m.peak.r, m.peak.d, m.peak.theta, 0};
      } else {
        ++t.misses;
      }
      if (!t.confirmed && t.age <= prm.confirm_window && t.hits >= prm.confirm_hits) t.confirmed = true;
      pt.x = t.x;
      pt.merit = t.amplitude;
      t.history.push_back(pt);
    }
    std::erase_if(tracks, [&](const DbtTrack& t) {
      return t.misses >= prm.max_misses || (!t.confirmed && t.age >= prm.confirm_window);
    });
    // Births from unassociated points.
    for (std::size_t j = 0; j < nm; ++j) {
      if (used[j]) continue;
      const PointMeasurement& m = meas[j];
      const Mat4 M = rotation(ego.yaw) * rotation(p.mounting_angle);
      const double c = std::cos(m.azimuth), s = std::sin(m.azimuth);
      const Vec4 xr(m.range * c, m.range_rate * c, m.range * s, m.range_rate * s);
      DbtTrack t;
      t.x = M * xr + ego.translation();
      Eigen::Matrix<double, 2, 2> Jp;
      Jp << c, -m.range * s, s, m.range * c;
      const Mat2 Pp = Jp * Eigen::Vector2d(sr * sr, st * st).asDiagonal() * Jp.transpose();
      Mat4 P0 = Mat4::Zero();
      P0(0, 0) = Pp(0, 0);
      P0(0, 2) = P0(2, 0) = Pp(0, 1);
      P0(2, 2) = Pp(1, 1);
      const double v2 = prm.init_velocity_sigma * prm.init_velocity_sigma;
      P0(1, 1) = v2;
      P0(3, 3) = v2;
      const Mat4 Mr = rotation(ego.yaw) * rotation(p.mounting_angle);
      t.P = Mr * P0 * Mr.transpose();
      t.born = static_cast<int>(k);
      t.hits = 1;
      t.age = 1;
      t.amplitude = m.amplitude;
      t.confirmed = prm.confirm_hits <= 1;
      TrackPoint pt;
      pt.frame = static_cast<int>(k);
      pt.x = t.x;
      pt.in_fov = true;
      pt.cell = {m.peak.r, m.peak.d, m.peak.theta, 0};
      pt.merit = t.amplitude;
      t.history.push_back(pt);
      tracks.push_back(std::move(t));
    }
  }
  std::vector<Track> out;
  for (const auto& t : tracks) {
    if (!t.confirmed) continue;
    Track tr;
    tr.points = t.history;
    tr.merit = t.amplitude;
    tr.ell = t.hits;
    out.push_back(std::move(tr));
  }
  std::stable_sort(out.begin(), out.end(), [](const Track& a, const Track& b) { return a.merit > b.merit; });
  return out;
}

}  // namespace spetbd
