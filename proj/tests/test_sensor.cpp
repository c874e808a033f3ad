#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

#include "spetbd/likelihood.hpp"
#include "spetbd/sensor.hpp"

using namespace spetbd;

namespace {

RadarParams small_radar() {
  RadarParams p;
  p.r_min = 5.0;
  p.r_max = 10.0;
  p.d_min = -3.0;
  p.d_max = 3.0;
  p.theta_min = -20.0 * kDegToRad;
  p.theta_max = 20.0 * kDegToRad;
  p.n_theta_rate = 1;
  return p;
}

/// Geodetic state that appears at the given radar-frame range/azimuth for an ego at the origin.
Vec4 target_at(const RadarParams& p, const EgoState& ego, double R, double th) {
  const Vec4 rel(R * std::cos(th), 0.0, R * std::sin(th), 0.0);
  Vec4 x = rotation(ego.yaw) * (rotation(p.mounting_angle) * rel);
  return x + ego.translation();
}

}  // namespace

TEST(LogI0, FrozenReferenceValues) {
  // High-precision values of log I0(x).
  const std::pair<double, double> ref[] = {
      {0.5, 0.06154971918548130}, {1.0, 0.2359143585071786}, {3.75, 2.210354211972019},
      {10.0, 7.942972083118696},  {15.0, 12.73566910947691}, {20.0, 17.58961042824427},
      {50.0, 47.12757550187180},  {200.0, 196.4325293542235}, {1000.0, 995.6273088898695}};
  for (const auto& [x, v] : ref) EXPECT_NEAR(log_i0(x), v, 1e-12 * std::max(1.0, v)) << x;
  EXPECT_EQ(log_i0(0.0), 0.0);
  EXPECT_NEAR(log_i0(30.0 - 1e-9), log_i0(30.0 + 1e-9), 1e-8);
  EXPECT_DOUBLE_EQ(log_i0(-3.0), log_i0(3.0));
}

TEST(PixelLikelihood, Definition) {
  EXPECT_EQ(pixel_log_lr(3.0, 0.0, 1.0), 0.0);
  EXPECT_NEAR(pixel_log_lr(2.0, 2.0, 1.0), log_i0(4.0) - 2.0, 1e-15);
  EXPECT_THROW(pixel_log_lr(-1.0, 1.0, 1.0), std::invalid_argument);
  EXPECT_THROW(pixel_log_lr(1.0, 1.0, 0.0), std::invalid_argument);
}

TEST(Render, NoiseIsRayleigh) {
  const RadarParams p = small_radar();
  std::mt19937_64 rng(7);
  double s1 = 0, s2 = 0;
  std::size_t n = 0;
  for (int f = 0; f < 20; ++f) {
    const DataCube c = render_frame({}, EgoState{}, p, PsfModel{}, rng, f);
    EXPECT_EQ(c.frame, f);
    for (float v : c.data) {
      s1 += v;
      s2 += double(v) * v;
      ++n;
    }
  }
  const double mean = std::sqrt(std::numbers::pi / 2.0);
  const double var = 2.0 - std::numbers::pi / 2.0;
  EXPECT_NEAR(s1 / n, mean, 4 * std::sqrt(var / n));
  EXPECT_NEAR(s2 / n, 2.0, 4 * 2.0 * std::sqrt(1.0 / n));
}

TEST(Render, PeakCellIsRician) {
  // Rician mean for nu = 10, sigma = 1: sqrt(pi/2) L_{1/2}(-50) = 10.049876...
  const RadarParams p = small_radar();
  const EgoState ego{};
  const Vec4 x = target_at(p, ego, 7.5, 0.0);
  const auto cell = project_to_cell(x, ego, p);
  ASSERT_TRUE(cell.has_value());
  std::mt19937_64 rng(8);
  const int N = 10000;
  double s = 0;
  for (int i = 0; i < N; ++i) s += render_frame({{x, 20.0}}, ego, p, PsfModel{}, rng).at(p, *cell);
  const double lhalf = std::exp(-25.0) * ((1.0 + 50.0) * std::cyl_bessel_i(0.0, 25.0) + 50.0 * std::cyl_bessel_i(1.0, 25.0));
  EXPECT_NEAR(s / N, std::sqrt(std::numbers::pi / 2.0) * lhalf, 4.0 / std::sqrt(double(N)));
}

TEST(Render, NegativeInfiniteSnrIsNoiseOnly) {
  const RadarParams p = small_radar();
  const Vec4 x = target_at(p, EgoState{}, 7.5, 0.0);
  std::mt19937_64 a(9), b(9);
  const DataCube c0 = render_frame({}, EgoState{}, p, PsfModel{}, a);
  const DataCube c1 = render_frame({{x, -std::numeric_limits<double>::infinity()}}, EgoState{}, p, PsfModel{}, b);
  EXPECT_EQ(c0.data, c1.data);
  std::mt19937_64 c(9);
  EXPECT_THROW(render_frame({{x, std::numeric_limits<double>::infinity()}}, EgoState{}, p, PsfModel{}, c),
               std::invalid_argument);
}

TEST(Render, OutOfFovTargetLeavesCubeUntouched) {
  const RadarParams p = small_radar();
  const Vec4 x = target_at(p, EgoState{}, 30.0, 0.0);
  EXPECT_FALSE(in_fov(x, EgoState{}, p));
  std::mt19937_64 a(10), b(10);
  EXPECT_EQ(render_frame({}, EgoState{}, p, PsfModel{}, a).data,
            render_frame({{x, 20.0}}, EgoState{}, p, PsfModel{}, b).data);
}

TEST(Fov, ProjectionMatchesCellMembership) {
  const RadarParams p = small_radar();
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-15, 15), uv(-3, 3), uy(-3, 3);
  for (int i = 0; i < 2000; ++i) {
    const EgoState ego{u(rng) * 0.1, u(rng) * 0.1, 1.0, 0.0, uy(rng), false};
    const Vec4 x(u(rng), uv(rng), u(rng), uv(rng));
    const MeasurementState m = project_to_measurement(x, ego, p);
    const Cell3 c{p.range_axis().nearest(m.range), p.doppler_axis().nearest(m.range_rate),
                  p.azimuth_axis().nearest(m.azimuth)};
    EXPECT_EQ(in_fov(x, ego, p), p.contains(c));
  }
}

TEST(Fov, ProjectionInvertsConversion) {
  const RadarParams p = small_radar();
  const EgoState ego{3.0, -1.0, 2.0, 0.5, 0.7, false};
  const Vec4 x = target_at(p, ego, 8.0, 0.1);
  const MeasurementState m = project_to_measurement(x, ego, p);
  EXPECT_NEAR(m.range, 8.0, 1e-12);
  EXPECT_NEAR(m.azimuth, 0.1, 1e-12);
}

TEST(CubeIo, RoundTrip) {
  const RadarParams p = small_radar();
  std::mt19937_64 rng(12);
  DataCube c = render_frame({}, EgoState{}, p, PsfModel{}, rng, 3);
  std::stringstream ss;
  write_cube(ss, c, p, 42);
  const std::string bytes = ss.str();
  const std::size_t hdr = bytes.find("end\n") + 4;
  EXPECT_EQ(bytes.size() - hdr, 4 * c.data.size());
  // Little-endian float32.
  float first;
  const unsigned char* b = reinterpret_cast<const unsigned char*>(bytes.data() + hdr);
  const std::uint32_t bits = std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
                             std::uint32_t(b[3]) << 24;
  std::memcpy(&first, &bits, 4);
  EXPECT_EQ(first, c.data[0]);
  const DataCube r = read_cube(ss);
  EXPECT_EQ(r.frame, 3);
  EXPECT_EQ(r.n_r, c.n_r);
  EXPECT_EQ(r.n_d, c.n_d);
  EXPECT_EQ(r.n_theta, c.n_theta);
  EXPECT_EQ(r.data, c.data);
  std::stringstream bad("garbage\n");
  EXPECT_THROW(read_cube(bad), std::runtime_error);
}

TEST(Snr, AmplitudeConversion) {
  EXPECT_NEAR(snr_to_amplitude(20.0, 1.0), 10.0, 1e-12);
  EXPECT_NEAR(snr_to_amplitude(6.0, 2.0), 2.0 * std::pow(10.0, 0.3), 1e-12);
}
