#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "spetbd/geom.hpp"
#include "spetbd/likelihood.hpp"
#include "spetbd/models.hpp"
#include "spetbd/sensor.hpp"

namespace spetbd {

/// chi-square 4 dof, 0.99 quantile.
inline constexpr double kChi2Dof4P99 = 13.276704135987622;

struct TbdConfig {
  double gate = kChi2Dof4P99;
  Mat2 process_noise = Mat2::Identity() * 0.25;
  PolarNoiseModel polar_noise{};
  EgoNoiseModel ego_noise{};
  /// Peak amplitude assumed by the likelihood ratio.
  double design_amplitude = 1.0;
  /// Sum the likelihood ratio over the PSF support instead of the peak cell.
  bool psf_sum = false;
  PsfModel psf{};
  /// Spatial bucketing of predecessors; false selects the all-pairs reference path.
  bool bucketed = true;
};

struct GridState {
  Vec4 x = Vec4::Zero();
  Vec4 mu = Vec4::Zero();
  Mat4 Q = Mat4::Zero();
  double merit = 0.0;
  double lambda = 0.0;
  /// Index into the previous frame's states, -1 when the path starts here.
  int pred = -1;
  int ell = 0;
  bool in_fov = false;
  Cell4 cell{};
};

struct FrameStateSet {
  int frame = 0;
  std::vector<GridState> states;
  /// states[0, n_in_fov) came from the cube; the rest were transmitted.
  std::size_t n_in_fov = 0;

  std::size_t n_transmitted() const { return states.size() - n_in_fov; }
};

/// Frame-independent part of the conversion chain for every 4-D cell: the vehicle-frame
/// state and its measurement-error moments.
struct GridCache {
  RadarParams params;
  std::vector<Cell4> cells;
  std::vector<std::size_t> flat3;
  std::vector<Vec4> xv;
  std::vector<Vec4> muv;
  std::vector<Mat4> qv;

  GridCache(const RadarParams& p, const PolarNoiseModel& noise) : params(p) {
    p.validate();
    noise.validate();
    const Axis ar = p.range_axis(), ad = p.doppler_axis(), at = p.azimuth_axis(), al = p.azimuth_rate_axis();
    const std::size_t n = p.cube_size() * static_cast<std::size_t>(al.count);
    cells.reserve(n);
    flat3.reserve(n);
    xv.reserve(n);
    muv.reserve(n);
    qv.reserve(n);
    for (int r = ar.first; r <= ar.last(); ++r)
      for (int d = ad.first; d <= ad.last(); ++d)
        for (int t = at.first; t <= at.last(); ++t)
          for (int l = al.first; l <= al.last(); ++l) {
            const Cell4 c{r, d, t, l};
            const MeasurementState y = measurement_state_from_cell(c, p);
            const MomentPair mr = converted_measurement_moments(y, noise);
            const MomentPair mv = rotated_moments(mr, p.mounting_angle);
            cells.push_back(c);
            flat3.push_back(p.flat_index(c.cell3()));
            xv.push_back(rotation(p.mounting_angle) * polar_to_cartesian(y).v);
            muv.push_back(mv.mean);
            qv.push_back(mv.cov);
          }
  }
  std::size_t size() const { return cells.size(); }
};

/// Per-cell likelihood ratio of one cube.
inline std::vector<double> cell_log_lr(const DataCube& cube, const RadarParams& p, const TbdConfig& cfg) {
  if (!cube.matches(p)) throw std::invalid_argument("cube dimensions do not match the radar parameters");
  const double s = p.noise_sigma, a = cfg.design_amplitude;
  std::vector<double> lr(cube.data.size());
  if (!cfg.psf_sum) {
    for (std::size_t i = 0; i < lr.size(); ++i) lr[i] = pixel_log_lr(cube.data[i], a, s);
    return lr;
  }
  const int h = cfg.psf.half_width;
  for (std::size_t i = 0; i < lr.size(); ++i) {
    const Cell3 c = p.cell_at(i);
    double acc = 0.0;
    for (int dr = -h; dr <= h; ++dr)
      for (int dd = -h; dd <= h; ++dd)
        for (int dt = -h; dt <= h; ++dt) {
          const Cell3 n{c.r + dr, c.d + dd, c.theta + dt};
          if (!p.contains(n)) continue;
          acc += pixel_log_lr(cube.data[p.flat_index(n)], a * cfg.psf.weight(dr, dd, dt), s);
        }
    lr[i] = acc;
  }
  return lr;
}

/// Grid states of one frame: every 4-D cell converted to the geodetic frame with the measured
/// ego pose, calibrated error moments, and a fresh path (merit = Lambda, ell = 1).
inline FrameStateSet build_frame_states(const DataCube& cube, const EgoState& ego_measured, const GridCache& cache,
                                        const TbdConfig& cfg, int frame) {
  const RadarParams& p = cache.params;
  const std::vector<double> lr = cell_log_lr(cube, p, cfg);
  const double q55 = cfg.ego_noise.var_yaw();
  const Mat4 qc = cfg.ego_noise.translation_cov();
  const Vec4 pc = ego_measured.translation();
  const Mat4 ra = rotation(ego_measured.yaw);
  FrameStateSet out;
  out.frame = frame;
  out.states.resize(cache.size());
  out.n_in_fov = cache.size();
  for (std::size_t i = 0; i < cache.size(); ++i) {
    GridState& g = out.states[i];
    g.x = ra * cache.xv[i] + pc;
    g.mu = yaw_calibration_mean(cache.xv[i], cache.muv[i], ego_measured.yaw, q55);
    g.Q = yaw_calibration_cov(cache.xv[i], cache.muv[i], cache.qv[i], ego_measured.yaw, q55) + qc;
    g.lambda = lr[cache.flat3[i]];
    g.merit = g.lambda;
    g.pred = -1;
    g.ell = 1;
    g.in_fov = true;
    g.cell = cache.cells[i];
  }
  return out;
}

namespace detail {

inline constexpr int kPacked[4][4] = {{0, 1, 2, 3}, {1, 4, 5, 6}, {2, 5, 7, 8}, {3, 6, 8, 9}};

inline void pack(const Mat4& m, double* out) {
  for (int i = 0; i < 4; ++i)
    for (int j = i; j < 4; ++j) out[kPacked[i][j]] = m(i, j);
}

/// d^T S^{-1} d by Cholesky. `min_pivot` receives the smallest squared pivot; returns false
/// when a pivot is non-positive.
inline bool chol_quad(const double* s, const double* d, double& out, double& min_pivot) {
  double l[4][4];
  double y[4];
  min_pivot = std::numeric_limits<double>::infinity();
  for (int j = 0; j < 4; ++j) {
    double v = s[kPacked[j][j]];
    for (int k = 0; k < j; ++k) v -= l[j][k] * l[j][k];
    min_pivot = std::min(min_pivot, v);
    if (!(v > 0)) return false;
    l[j][j] = std::sqrt(v);
    for (int i = j + 1; i < 4; ++i) {
      double w = s[kPacked[i][j]];
      for (int k = 0; k < j; ++k) w -= l[i][k] * l[j][k];
      l[i][j] = w / l[j][j];
    }
    double r = d[j];
    for (int k = 0; k < j; ++k) r -= l[j][k] * y[k];
    y[j] = r / l[j][j];
  }
  out = y[0] * y[0] + y[1] * y[1] + y[2] * y[2] + y[3] * y[3];
  return true;
}

/// Mahalanobis distance with near-singular regularization: when a squared Cholesky pivot falls
/// below 1e-12 of the largest diagonal entry, epsilon*I with epsilon = 1e-9*trace is added.
inline double mahalanobis(const double* s, const double* d) {
  double out = 0.0, piv = 0.0;
  const double diag_max = std::max({s[0], s[4], s[7], s[9]});
  if (chol_quad(s, d, out, piv) && piv > 1e-12 * diag_max) return out;
  const double trace = s[0] + s[4] + s[7] + s[9];
  double r[10];
  std::copy(s, s + 10, r);
  const double eps = 1e-9 * trace;
  r[0] += eps;
  r[4] += eps;
  r[7] += eps;
  r[9] += eps;
  if (!(trace > 0) || !chol_quad(r, d, out, piv)) {
    throw NumericalError("gate covariance is singular after regularization");
  }
  return out;
}

/// LDL^T quadratic form with early rejection: returns false as soon as the partial sum of
/// d^T S^{-1} d exceeds `limit`. Near-singular pivots defer to the regularized path.
inline bool gated_quad(const double* s, const double* d, double limit, double& out) {
  const double tiny = 1e-12 * std::max({s[0], s[4], s[7], s[9]});
  auto fallback = [&] {
    out = mahalanobis(s, d);
    return out <= limit;
  };
  const double d0 = s[0];
  if (!(d0 > tiny)) return fallback();
  const double l10 = s[1] / d0, l20 = s[2] / d0, l30 = s[3] / d0;
  const double z0 = d[0];
  double acc = z0 * z0 / d0;
  if (acc > limit) return false;
  const double d1 = s[4] - l10 * l10 * d0;
  if (!(d1 > tiny)) return fallback();
  const double l21 = (s[5] - l20 * l10 * d0) / d1;
  const double l31 = (s[6] - l30 * l10 * d0) / d1;
  const double z1 = d[1] - l10 * z0;
  acc += z1 * z1 / d1;
  if (acc > limit) return false;
  const double d2 = s[7] - l20 * l20 * d0 - l21 * l21 * d1;
  if (!(d2 > tiny)) return fallback();
  const double l32 = (s[8] - l30 * l20 * d0 - l31 * l21 * d1) / d2;
  const double z2 = d[2] - l20 * z0 - l21 * z1;
  acc += z2 * z2 / d2;
  if (acc > limit) return false;
  const double d3 = s[9] - l30 * l30 * d0 - l31 * l31 * d1 - l32 * l32 * d2;
  if (!(d3 > tiny)) return fallback();
  const double z3 = d[3] - l30 * z0 - l31 * z1 - l32 * z2;
  acc += z3 * z3 / d3;
  out = acc;
  return acc <= limit;
}

/// Source-side gate terms: w = F(x - mu), a = F Q F^T + C Q^t C^T.
struct PredGate {
  double w[4];
  double a[10];
  double merit;
  std::uint32_t id;
};

}  // namespace detail

/// Gate of a destination state against a source state:
/// (x_k - F x_{k-1} - mu_{k|k-1})^T Q_{k|k-1}^{-1} (.) with the prediction moments of the pair.
inline double transition_distance(const GridState& src, const GridState& dst, double T, const Mat2& qt) {
  const Mat4 F = cv_transition(T);
  const Vec4 w = F * (src.x - src.mu);
  const Mat4 a = F * src.Q * F.transpose() + process_cov(T, qt) + dst.Q;
  const Vec4 u = dst.x - dst.mu;
  double s[10], d[4];
  detail::pack(a, s);
  for (int i = 0; i < 4; ++i) d[i] = u[i] - w[i];
  double out = 0.0;
  detail::gated_quad(s, d, std::numeric_limits<double>::infinity(), out);
  return out;
}

inline bool in_transition_set(const GridState& src, const GridState& dst, double T, const Mat2& qt, double gate) {
  return transition_distance(src, dst, T, qt) <= gate;
}

struct UpdateResult {
  /// prev state lies in some current state's inverse gate.
  std::vector<std::uint8_t> consumed;
  std::size_t pairs_tested = 0;
  std::size_t pairs_gated = 0;
};

/// Scores every in-FOV current state from its best gated predecessor, or restarts it when
/// no predecessor passes the gate. Ties go to the smaller distance, then the lower index.
inline UpdateResult update_stage(const FrameStateSet& prev, FrameStateSet& curr, double T, const TbdConfig& cfg) {
  const Mat4 F = cv_transition(T);
  const Mat4 cq = process_cov(T, cfg.process_noise);
  const std::size_t np = prev.states.size();
  const std::size_t nc = curr.n_in_fov;
  const double gate = cfg.gate;

  std::vector<detail::PredGate> pg(np);
  double max_a[4] = {0, 0, 0, 0};
  for (std::size_t i = 0; i < np; ++i) {
    const GridState& s = prev.states[i];
    const Vec4 w = F * (s.x - s.mu);
    const Mat4 a = F * s.Q * F.transpose() + cq;
    for (int j = 0; j < 4; ++j) pg[i].w[j] = w[j];
    detail::pack(a, pg[i].a);
    pg[i].merit = s.merit;
    pg[i].id = static_cast<std::uint32_t>(i);
    max_a[0] = std::max(max_a[0], pg[i].a[0]);
    max_a[1] = std::max(max_a[1], pg[i].a[4]);
    max_a[2] = std::max(max_a[2], pg[i].a[7]);
    max_a[3] = std::max(max_a[3], pg[i].a[9]);
  }

  UpdateResult res;
  res.consumed.assign(np, 0);

  // Buckets over predicted positions (w_x, w_y); gates are stored in bucket order.
  double bx0 = 0, by0 = 0, h = 1.0;
  int bnx = 1, bny = 1;
  std::vector<std::uint32_t> start;
  if (cfg.bucketed && np > 0) {
    h = 3.0 * std::sqrt(std::max(max_a[0], max_a[2]));
    if (!(h > 0)) h = 1.0;
    double xmin = pg[0].w[0], xmax = xmin, ymin = pg[0].w[2], ymax = ymin;
    for (const auto& g : pg) {
      xmin = std::min(xmin, g.w[0]);
      xmax = std::max(xmax, g.w[0]);
      ymin = std::min(ymin, g.w[2]);
      ymax = std::max(ymax, g.w[2]);
    }
    while (((xmax - xmin) / h + 1) * ((ymax - ymin) / h + 1) > 4e6) h *= 2;
    bx0 = xmin;
    by0 = ymin;
    bnx = static_cast<int>((xmax - xmin) / h) + 1;
    bny = static_cast<int>((ymax - ymin) / h) + 1;
    const std::size_t nb = static_cast<std::size_t>(bnx) * bny;
    std::vector<std::uint32_t> key(np);
    start.assign(nb + 1, 0);
    for (std::size_t i = 0; i < np; ++i) {
      const int ix = std::min(bnx - 1, static_cast<int>((pg[i].w[0] - bx0) / h));
      const int iy = std::min(bny - 1, static_cast<int>((pg[i].w[2] - by0) / h));
      key[i] = static_cast<std::uint32_t>(iy) * bnx + ix;
      ++start[key[i] + 1];
    }
    for (std::size_t b = 0; b < nb; ++b) start[b + 1] += start[b];
    std::vector<detail::PredGate> sorted(np);
    std::vector<std::uint32_t> fill(start.begin(), start.end() - 1);
    for (std::size_t i = 0; i < np; ++i) sorted[fill[key[i]]++] = pg[i];
    pg.swap(sorted);
  }

  for (std::size_t c = 0; c < nc; ++c) {
    GridState& cs = curr.states[c];
    double u[4], q[10];
    const Vec4 uv = cs.x - cs.mu;
    for (int j = 0; j < 4; ++j) u[j] = uv[j];
    detail::pack(cs.Q, q);

    std::int64_t best = -1;
    double best_merit = -std::numeric_limits<double>::infinity();
    double best_d2 = std::numeric_limits<double>::infinity();
    auto consider = [&](const detail::PredGate& g) {
      double d[4];
      for (int j = 0; j < 4; ++j) d[j] = u[j] - g.w[j];
      // Necessary per-axis condition of the quadratic form.
      if (d[0] * d[0] > gate * (g.a[0] + q[0]) || d[2] * d[2] > gate * (g.a[7] + q[7]) ||
          d[1] * d[1] > gate * (g.a[4] + q[4]) || d[3] * d[3] > gate * (g.a[9] + q[9])) {
        return;
      }
      ++res.pairs_tested;
      double s[10];
      for (int j = 0; j < 10; ++j) s[j] = g.a[j] + q[j];
      double d2 = 0.0;
      if (!detail::gated_quad(s, d, gate, d2)) return;
      ++res.pairs_gated;
      res.consumed[g.id] = 1;
      const double m = g.merit;
      if (m > best_merit ||
          (m == best_merit && (d2 < best_d2 || (d2 == best_d2 && static_cast<std::int64_t>(g.id) < best)))) {
        best = g.id;
        best_merit = m;
        best_d2 = d2;
      }
    };

    if (!cfg.bucketed) {
      for (const auto& g : pg) consider(g);
    } else if (np > 0) {
      const double rx = std::sqrt(gate * (max_a[0] + q[0]));
      const double ry = std::sqrt(gate * (max_a[2] + q[7]));
      const int ix0 = std::max(0, static_cast<int>(std::floor((u[0] - rx - bx0) / h)));
      const int ix1 = std::min(bnx - 1, static_cast<int>(std::floor((u[0] + rx - bx0) / h)));
      const int iy0 = std::max(0, static_cast<int>(std::floor((u[2] - ry - by0) / h)));
      const int iy1 = std::min(bny - 1, static_cast<int>(std::floor((u[2] + ry - by0) / h)));
      for (int iy = iy0; iy <= iy1; ++iy) {
        const std::size_t row = static_cast<std::size_t>(iy) * bnx;
        for (std::uint32_t k = start[row + ix0]; k < start[row + ix1 + 1]; ++k) consider(pg[k]);
      }
    }

    if (best >= 0) {
      const GridState& ps = prev.states[static_cast<std::size_t>(best)];
      cs.merit = ps.merit + cs.lambda;
      cs.pred = static_cast<int>(best);
      cs.ell = ps.ell + 1;
    } else {
      cs.merit = cs.lambda;
      cs.pred = -1;
      cs.ell = 1;
    }
  }
  return res;
}

/// Appends every previous state outside all inverse gates, propagated one step with its merit
/// and ell unchanged.
inline std::size_t transmission_stage(const FrameStateSet& prev, FrameStateSet& curr,
                                      const std::vector<std::uint8_t>& consumed, double T, const Mat2& qt) {
  if (consumed.size() != prev.states.size()) throw std::invalid_argument("consumed mask size mismatch");
  const Mat4 F = cv_transition(T);
  const Mat4 cq = process_cov(T, qt);
  curr.states.resize(curr.n_in_fov);
  std::size_t n = 0;
  for (std::size_t i = 0; i < prev.states.size(); ++i) {
    if (consumed[i]) continue;
    const GridState& s = prev.states[i];
    GridState t;
    t.x = F * s.x;
    t.mu = F * s.mu;
    t.Q = F * s.Q * F.transpose() + cq;
    t.Q = 0.5 * (t.Q + t.Q.transpose());
    t.merit = s.merit;
    t.lambda = 0.0;
    t.pred = static_cast<int>(i);
    t.ell = s.ell;
    t.in_fov = false;
    t.cell = s.cell;
    curr.states.push_back(t);
    ++n;
  }
  return n;
}

struct IntegrationStats {
  std::vector<std::size_t> states_per_frame;
  std::vector<std::size_t> transmitted_per_frame;
  std::size_t pairs_tested = 0;
  std::size_t pairs_gated = 0;
};

/// Runs the K-frame recursion over already-built frame sets (in place).
inline IntegrationStats integrate_frames(std::vector<FrameStateSet>& frames, double T, const TbdConfig& cfg) {
  IntegrationStats st;
  for (std::size_t k = 0; k < frames.size(); ++k) {
    if (k > 0) {
      UpdateResult u = update_stage(frames[k - 1], frames[k], T, cfg);
      st.pairs_tested += u.pairs_tested;
      st.pairs_gated += u.pairs_gated;
      transmission_stage(frames[k - 1], frames[k], u.consumed, T, cfg.process_noise);
    }
    st.states_per_frame.push_back(frames[k].states.size());
    st.transmitted_per_frame.push_back(frames[k].n_transmitted());
  }
  return st;
}

/// Builds and integrates K frames. cubes[k].ego_measured is the pose used for frame k.
inline std::vector<FrameStateSet> run_spe_mftbd(const std::vector<DataCube>& cubes, const GridCache& cache,
                                                const TbdConfig& cfg, IntegrationStats* stats = nullptr) {
  std::vector<FrameStateSet> frames;
  frames.reserve(cubes.size());
  for (std::size_t k = 0; k < cubes.size(); ++k) {
    frames.push_back(build_frame_states(cubes[k], cubes[k].ego_measured, cache, cfg, static_cast<int>(k)));
  }
  IntegrationStats st = integrate_frames(frames, cache.params.scan_period, cfg);
  if (stats) *stats = std::move(st);
  return frames;
}

struct TrackPoint {
  int frame = 0;
  Vec4 x = Vec4::Zero();
  bool in_fov = false;
  Cell4 cell{};
  double merit = 0.0;
};

struct Track {
  std::vector<TrackPoint> points;
  double merit = 0.0;
  int ell = 0;
  std::size_t final_index = 0;

  int first_frame() const { return points.empty() ? 0 : points.front().frame; }
  const TrackPoint* at_frame(int k) const {
    for (const auto& p : points)
      if (p.frame == k) return &p;
    return nullptr;
  }
  int fov_count() const {
    int n = 0;
    for (const auto& p : points) n += p.in_fov ? 1 : 0;
    return n;
  }
};

/// Follows predecessor links from a final-frame state back to where its path started.
inline Track backtrack(const std::vector<FrameStateSet>& frames, std::size_t final_index) {
  if (frames.empty()) throw std::invalid_argument("no frames to backtrack");
  Track t;
  t.final_index = final_index;
  const GridState& last = frames.back().states.at(final_index);
  t.merit = last.merit;
  t.ell = last.ell;
  int idx = static_cast<int>(final_index);
  for (int k = static_cast<int>(frames.size()) - 1; k >= 0 && idx >= 0; --k) {
    const GridState& s = frames[static_cast<std::size_t>(k)].states.at(static_cast<std::size_t>(idx));
    t.points.push_back({frames[static_cast<std::size_t>(k)].frame, s.x, s.in_fov, s.cell, s.merit});
    idx = s.pred;
  }
  std::reverse(t.points.begin(), t.points.end());
  return t;
}

/// Per-ell detection thresholds, ell = 1..K.
struct ThresholdTable {
  std::string algorithm = "spe";
  int K = 0;
  double pfa = 0.0;
  std::size_t trials = 0;
  std::uint64_t seed = 0;
  std::string mode = "familywise";
  std::vector<double> lambda;

  double threshold(int ell) const {
    if (ell < 1 || ell > static_cast<int>(lambda.size())) {
      throw std::out_of_range("no threshold for ell = " + std::to_string(ell));
    }
    return lambda[static_cast<std::size_t>(ell - 1)];
  }
  bool exceeds(double merit, int ell) const { return merit > threshold(ell); }
};

namespace detail {
inline std::string fmt_num(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}
inline double parse_num(const std::string& s) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  std::size_t pos = 0;
  const double v = std::stod(s, &pos);
  if (pos != s.size()) throw std::invalid_argument("bad number '" + s + "'");
  return v;
}
}  // namespace detail

inline void write_thresholds(std::ostream& os, const ThresholdTable& t) {
  os << "# spetbd threshold table v1\n"
     << "algorithm " << t.algorithm << '\n'
     << "K " << t.K << '\n'
     << "pfa " << detail::fmt_num(t.pfa) << '\n'
     << "trials " << t.trials << '\n'
     << "seed " << t.seed << '\n'
     << "mode " << t.mode << '\n'
     << "# ell lambda\n";
  for (std::size_t i = 0; i < t.lambda.size(); ++i) os << (i + 1) << ' ' << detail::fmt_num(t.lambda[i]) << '\n';
  if (!os) throw std::runtime_error("failed to write threshold table");
}

inline ThresholdTable read_thresholds(std::istream& is) {
  ThresholdTable t;
  std::string line;
  std::map<int, double> rows;
  bool have_k = false;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string key, val;
    ls >> key >> val;
    if (key == "algorithm") t.algorithm = val;
    else if (key == "K") { t.K = std::stoi(val); have_k = true; }
    else if (key == "pfa") t.pfa = detail::parse_num(val);
    else if (key == "trials") t.trials = std::stoull(val);
    else if (key == "seed") t.seed = std::stoull(val);
    else if (key == "mode") t.mode = val;
    else rows[std::stoi(key)] = detail::parse_num(val);
  }
  if (!have_k) throw std::runtime_error("threshold table has no K line");
  for (int ell = 1; ell <= static_cast<int>(rows.size()); ++ell) {
    auto it = rows.find(ell);
    if (it == rows.end()) throw std::runtime_error("threshold table misses ell = " + std::to_string(ell));
    t.lambda.push_back(it->second);
  }
  return t;
}

inline void save_thresholds(const std::string& path, const ThresholdTable& t) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  write_thresholds(f, t);
}

inline ThresholdTable load_thresholds(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open threshold table " + path + "; run `calibrate` first");
  return read_thresholds(f);
}

/// Largest final merit per ell (index ell-1) in one integrated batch; -inf where no state has that ell.
inline std::vector<double> max_merit_per_ell(const FrameStateSet& last, int K) {
  std::vector<double> m(static_cast<std::size_t>(K), -std::numeric_limits<double>::infinity());
  for (const auto& s : last.states) {
    if (s.ell >= 1 && s.ell <= K) m[static_cast<std::size_t>(s.ell - 1)] = std::max(m[static_cast<std::size_t>(s.ell - 1)], s.merit);
  }
  return m;
}

inline std::size_t min_calibration_trials(double pfa) {
  if (!(pfa > 0 && pfa < 1)) throw std::invalid_argument("false-alarm probability must lie in (0, 1)");
  return static_cast<std::size_t>(std::ceil(1.0 / pfa - 1e-9));
}

enum class CalibrationMode { kPerEll, kFamilywise };

/// Thresholds from per-trial maxima [trial][ell-1].
///
/// Per-ell: lambda_ell is the order statistic v_(n - floor(pfa n)), so at most floor(pfa n)
/// trials strictly exceed it. Familywise: every ell uses the same tail rank m, the largest
/// one for which the number of trials exceeding any lambda_ell stays within floor(pfa n).
inline ThresholdTable thresholds_from_maxima(const std::vector<std::vector<double>>& maxima, int K, double pfa,
                                             CalibrationMode mode) {
  const std::size_t n = maxima.size();
  const std::size_t need = min_calibration_trials(pfa);
  if (n < need) {
    throw std::invalid_argument("calibration needs at least " + std::to_string(need) + " trials for pfa " +
                                detail::fmt_num(pfa) + ", got " + std::to_string(n));
  }
  const std::size_t budget = static_cast<std::size_t>(std::floor(pfa * static_cast<double>(n) + 1e-9));
  std::vector<std::vector<double>> sorted(static_cast<std::size_t>(K));
  for (int e = 0; e < K; ++e) {
    auto& v = sorted[static_cast<std::size_t>(e)];
    v.reserve(n);
    for (const auto& row : maxima) v.push_back(row.at(static_cast<std::size_t>(e)));
    std::sort(v.begin(), v.end());
  }
  auto lambda_at_rank = [&](std::size_t m) {
    std::vector<double> lam(static_cast<std::size_t>(K));
    for (int e = 0; e < K; ++e) {
      const auto& v = sorted[static_cast<std::size_t>(e)];
      double x = v[n - 1 - m];
      if (std::isinf(x) && x < 0) {
        double mx = -std::numeric_limits<double>::infinity();
        for (double y : v)
          if (std::isfinite(y)) mx = std::max(mx, y);
        x = std::isfinite(mx) ? mx : std::numeric_limits<double>::infinity();
      }
      lam[static_cast<std::size_t>(e)] = x;
    }
    return lam;
  };
  ThresholdTable t;
  t.K = K;
  t.pfa = pfa;
  t.trials = n;
  if (mode == CalibrationMode::kPerEll) {
    t.mode = "per-ell";
    t.lambda = lambda_at_rank(budget);
    return t;
  }
  t.mode = "familywise";
  auto union_count = [&](const std::vector<double>& lam) {
    std::size_t c = 0;
    for (const auto& row : maxima) {
      for (int e = 0; e < K; ++e) {
        if (row[static_cast<std::size_t>(e)] > lam[static_cast<std::size_t>(e)]) {
          ++c;
          break;
        }
      }
    }
    return c;
  };
  std::size_t m = 0;
  for (std::size_t cand = budget; cand > 0; --cand) {
    if (union_count(lambda_at_rank(cand)) <= budget) {
      m = cand;
      break;
    }
  }
  t.lambda = lambda_at_rank(m);
  return t;
}

/// Final-frame states exceeding their ell threshold, by decreasing merit (ties: lower index).
inline std::vector<std::size_t> exceeding_states(const FrameStateSet& last, const ThresholdTable& th) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < last.states.size(); ++i) {
    const GridState& s = last.states[i];
    if (s.ell >= 1 && s.ell <= static_cast<int>(th.lambda.size()) && th.exceeds(s.merit, s.ell)) idx.push_back(i);
  }
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return last.states[a].merit > last.states[b].merit; });
  return idx;
}

/// Single-target declaration: the best exceeding final state, backtracked. Empty under H0.
inline std::vector<Track> declare(const std::vector<FrameStateSet>& frames, const ThresholdTable& th) {
  if (frames.empty()) return {};
  const auto idx = exceeding_states(frames.back(), th);
  if (idx.empty()) return {};
  return {backtrack(frames, idx.front())};
}

/// Number of (frame, r, d, theta) measurement cells two tracks have in common.
inline int shared_cells(const Track& a, const Track& b) {
  int n = 0;
  for (const auto& p : a.points) {
    if (!p.in_fov) continue;
    const TrackPoint* q = b.at_frame(p.frame);
    if (q && q->in_fov && q->cell.cell3() == p.cell.cell3()) ++n;
  }
  return n;
}

/// Successive track cancellation within each ell group. Returns ell -> extracted tracks.
inline std::map<int, std::vector<Track>> extract_multi(const std::vector<FrameStateSet>& frames,
                                                       const ThresholdTable& th, int overlap_cap = 1) {
  if (overlap_cap < 1) throw std::invalid_argument("overlap cap L must be at least 1");
  std::map<int, std::vector<Track>> out;
  if (frames.empty()) return out;
  const FrameStateSet& last = frames.back();
  for (std::size_t i : exceeding_states(last, th)) {
    const int ell = last.states[i].ell;
    auto& group = out[ell];
    Track cand = backtrack(frames, i);
    bool keep = true;
    for (const auto& kept : group) {
      if (shared_cells(cand, kept) >= overlap_cap) {
        keep = false;
        break;
      }
    }
    if (keep) group.push_back(std::move(cand));
  }
  return out;
}

/// Flattened STC output ordered by decreasing merit.
inline std::vector<Track> extract_multi_flat(const std::vector<FrameStateSet>& frames, const ThresholdTable& th,
                                             int overlap_cap = 1) {
  std::vector<Track> all;
  for (auto& [ell, v] : extract_multi(frames, th, overlap_cap))
    for (auto& t : v) all.push_back(std::move(t));
  std::stable_sort(all.begin(), all.end(), [](const Track& a, const Track& b) { return a.merit > b.merit; });
  return all;
}

}  // namespace spetbd
