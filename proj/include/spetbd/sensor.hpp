#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "spetbd/geom.hpp"
#include "spetbd/models.hpp"

namespace spetbd {

/// One frame of amplitudes, row-major (r, d, theta).
struct DataCube {
  int frame = 0;
  std::size_t n_r = 0;
  std::size_t n_d = 0;
  std::size_t n_theta = 0;
  std::vector<float> data;
  EgoState ego_true{};
  EgoState ego_measured{};

  DataCube() = default;
  DataCube(const RadarParams& p, int k)
      : frame(k), n_r(p.n_range()), n_d(p.n_doppler()), n_theta(p.n_azimuth()), data(p.cube_size(), 0.0f) {}

  bool matches(const RadarParams& p) const {
    return n_r == p.n_range() && n_d == p.n_doppler() && n_theta == p.n_azimuth() && data.size() == p.cube_size();
  }
  float at(const RadarParams& p, const Cell3& c) const { return data[p.flat_index(c)]; }
};

/// Separable truncated Gaussian over a (2h+1)^3 neighborhood.
struct PsfModel {
  double sigma_cells = 0.7;
  int half_width = 1;

  double weight(int dr, int dd, int dt) const {
    const double s2 = sigma_cells * sigma_cells;
    return std::exp(-0.5 * (dr * dr + dd * dd + dt * dt) / s2);
  }
};

inline double snr_to_amplitude(double snr_db, double sigma) { return sigma * std::pow(10.0, snr_db / 20.0); }

/// Geodetic state seen from the radar of an ego at pose `ego`: translate, undo yaw, undo mounting.
inline MeasurementState project_to_measurement(const TargetState& x, const EgoState& ego, const RadarParams& p) {
  const Vec4 rel = x - ego.translation();
  const Vec4 xr = rotation(-p.mounting_angle) * (rotation(-ego.yaw) * rel);
  return cartesian_to_polar(xr);
}

/// Containing (r, d, theta) cell, or nullopt when the state lies outside the FOV.
inline std::optional<Cell3> project_to_cell(const TargetState& x, const EgoState& ego, const RadarParams& p) {
  if (!x.allFinite()) return std::nullopt;
  const MeasurementState m = project_to_measurement(x, ego, p);
  const Cell3 c{p.range_axis().nearest(m.range), p.doppler_axis().nearest(m.range_rate),
                p.azimuth_axis().nearest(m.azimuth)};
  if (!p.contains(c)) return std::nullopt;
  return c;
}

inline bool in_fov(const TargetState& x, const EgoState& ego, const RadarParams& p) {
  return project_to_cell(x, ego, p).has_value();
}

struct RenderTarget {
  TargetState state;
  double snr_db = 0.0;
};

/// Draws one frame: Rayleigh noise everywhere, Rician amplitudes over each in-FOV target's PSF.
/// Noise is drawn from `rng` in flat-index order; target cells are redrawn afterwards.
template <class Rng>
DataCube render_frame(const std::vector<RenderTarget>& targets, const EgoState& ego, const RadarParams& p,
                      const PsfModel& psf, Rng& rng, int frame = 0) {
  DataCube cube(p, frame);
  cube.ego_true = ego;
  std::normal_distribution<double> n01;
  const double s = p.noise_sigma;
  for (float& v : cube.data) {
    const double i = s * n01(rng), q = s * n01(rng);
    v = static_cast<float>(std::hypot(i, q));
  }
  // Superposed mean field over all targets, then redraw affected cells.
  std::vector<std::pair<std::size_t, double>> field;
  for (const auto& t : targets) {
    if (!std::isfinite(t.snr_db)) {
      if (t.snr_db < 0) continue;
      throw std::invalid_argument("target SNR must be finite");
    }
    const auto c = project_to_cell(t.state, ego, p);
    if (!c) continue;
    const double a = snr_to_amplitude(t.snr_db, s);
    for (int dr = -psf.half_width; dr <= psf.half_width; ++dr)
      for (int dd = -psf.half_width; dd <= psf.half_width; ++dd)
        for (int dt = -psf.half_width; dt <= psf.half_width; ++dt) {
          const Cell3 n{c->r + dr, c->d + dd, c->theta + dt};
          if (!p.contains(n)) continue;
          const std::size_t idx = p.flat_index(n);
          const double amp = a * psf.weight(dr, dd, dt);
          bool merged = false;
          for (auto& f : field) {
            if (f.first == idx) {
              f.second += amp;
              merged = true;
              break;
            }
          }
          if (!merged) field.emplace_back(idx, amp);
        }
  }
  for (const auto& [idx, nu] : field) {
    const double i = nu + s * n01(rng), q = s * n01(rng);
    cube.data[idx] = static_cast<float>(std::hypot(i, q));
  }
  return cube;
}

/// Binary dump: text header terminated by "end\n", then little-endian float32 (r, d, theta) row-major.
inline void write_cube(std::ostream& os, const DataCube& c, const RadarParams& p, std::uint64_t seed) {
  std::ostringstream h;
  h.precision(17);
  h << "spetbd-cube 1\n"
    << "dims " << c.n_r << ' ' << c.n_d << ' ' << c.n_theta << '\n'
    << "frame " << c.frame << '\n'
    << "seed " << seed << '\n'
    << "range_first " << p.range_axis().first << " dr " << p.dr << '\n'
    << "doppler_first " << p.doppler_axis().first << " d_min " << p.d_min << " dd " << p.dd << '\n'
    << "azimuth_first " << p.azimuth_axis().first << " dtheta " << p.dtheta << '\n'
    << "noise_sigma " << p.noise_sigma << '\n'
    << "ego_true " << c.ego_true.px << ' ' << c.ego_true.py << ' ' << c.ego_true.vx << ' ' << c.ego_true.vy << ' '
    << c.ego_true.yaw << '\n'
    << "ego_measured " << c.ego_measured.px << ' ' << c.ego_measured.py << ' ' << c.ego_measured.vx << ' '
    << c.ego_measured.vy << ' ' << c.ego_measured.yaw << '\n'
    << "end\n";
  os << h.str();
  for (float v : c.data) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    const char b[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                       static_cast<char>((bits >> 16) & 0xff), static_cast<char>((bits >> 24) & 0xff)};
    os.write(b, 4);
  }
  if (!os) throw std::runtime_error("failed to write cube");
}

/// Reads a dump produced by write_cube (amplitudes and dims only).
inline DataCube read_cube(std::istream& is) {
  DataCube c;
  std::string line;
  bool seen_magic = false;
  while (std::getline(is, line)) {
    if (line == "end") break;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "spetbd-cube") seen_magic = true;
    else if (key == "dims") ls >> c.n_r >> c.n_d >> c.n_theta;
    else if (key == "frame") ls >> c.frame;
  }
  if (!seen_magic || line != "end") throw std::runtime_error("not a cube dump");
  c.data.resize(c.n_r * c.n_d * c.n_theta);
  for (float& v : c.data) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("truncated cube dump");
    const std::uint32_t bits = std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
                               std::uint32_t(b[3]) << 24;
    std::memcpy(&v, &bits, sizeof v);
  }
  return c;
}

}  // namespace spetbd
