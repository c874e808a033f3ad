#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "spetbd/baselines.hpp"

using namespace spetbd;

namespace {

RadarParams tiny_radar() {
  RadarParams p;
  p.r_min = 6.0;
  p.r_max = 9.0;
  p.d_min = -1.5;
  p.d_max = 1.5;
  p.theta_min = -22.5 * kDegToRad;
  p.theta_max = 22.5 * kDegToRad;
  p.n_theta_rate = 1;
  return p;
}

DataCube flat_cube(const RadarParams& p, float v) {
  DataCube c(p, 0);
  std::fill(c.data.begin(), c.data.end(), v);
  return c;
}

}  // namespace

TEST(Sfd, ThresholdMatchesRayleighTail) {
  const double thr = sfd_threshold(1.0, 1e-3);
  EXPECT_NEAR(std::exp(-thr * thr / 2.0), 1e-3, 1e-15);
  EXPECT_THROW(sfd_threshold(1.0, 0.0), std::invalid_argument);
}

TEST(Sfd, StrictlyAboveThresholdOnly) {
  const RadarParams p = tiny_radar();
  const double thr = sfd_threshold(p.noise_sigma, 1e-3);
  DataCube c = flat_cube(p, 0.0f);
  const std::size_t i = p.flat_index({14, 1, 0});
  c.data[i] = static_cast<float>(thr);
  // The float may round either way; pick values bracketing the threshold explicitly.
  c.data[i] = std::nextafter(static_cast<float>(thr), 0.0f);
  EXPECT_TRUE(single_frame_detect(c, p, 1e-3).empty());
  c.data[i] = std::nextafter(static_cast<float>(thr), 100.0f);
  EXPECT_EQ(single_frame_detect(c, p, 1e-3).size(), 1u);
}

TEST(Sfd, ConnectedCellsMergeIntoWeightedCentroid) {
  const RadarParams p = tiny_radar();
  DataCube c = flat_cube(p, 0.0f);
  c.data[p.flat_index({14, 0, 0})] = 10.0f;
  c.data[p.flat_index({15, 1, 1})] = 5.0f;  // diagonal neighbour
  c.data[p.flat_index({17, 0, 0})] = 8.0f;  // separate cluster
  const auto m = single_frame_detect(c, p, 1e-3);
  ASSERT_EQ(m.size(), 2u);
  const auto& a = m[0].amplitude > 14 ? m[0] : m[1];
  EXPECT_NEAR(a.amplitude, 15.0, 1e-6);
  EXPECT_NEAR(a.range, p.dr * (14.0 * 10 + 15.0 * 5) / 15.0, 1e-9);
  EXPECT_EQ(a.peak, (Cell3{14, 0, 0}));
  EXPECT_NEAR(a.azimuth, p.dtheta * (5.0 / 15.0), 1e-9);
}

TEST(Hungarian, MatchesExhaustiveSearch) {
  std::mt19937_64 rng(40);
  std::uniform_real_distribution<double> u(0, 10);
  for (int t = 0; t < 50; ++t) {
    const int n = 1 + t % 5, m = n + t % 3;
    std::vector<std::vector<double>> cost(n, std::vector<double>(m));
    for (auto& r : cost)
      for (double& v : r) v = u(rng);
    const auto a = hungarian(cost);
    double got = 0;
    for (int i = 0; i < n; ++i) got += cost[i][a[i]];
    std::vector<int> cols(m);
    std::iota(cols.begin(), cols.end(), 0);
    double best = 1e300;
    do {
      double s = 0;
      for (int i = 0; i < n; ++i) s += cost[i][cols[i]];
      best = std::min(best, s);
    } while (std::next_permutation(cols.begin(), cols.end()));
    EXPECT_NEAR(got, best, 1e-9);
  }
  EXPECT_THROW(hungarian({{1.0}, {2.0}}), std::invalid_argument);
}

TEST(Dbt, MeasurementJacobianMatchesFiniteDifferences) {
  const RadarParams p = tiny_radar();
  const EgoState ego{1.0, 2.0, 1.5, -0.5, 0.4, true};
  const Vec4 x(9.0, 0.7, -1.0, 1.2);
  Mat34 J;
  dbt_measurement(x, ego, p, &J);
  for (int j = 0; j < 4; ++j) {
    Vec4 a = x, b = x;
    a[j] += 1e-6;
    b[j] -= 1e-6;
    const Vec3 fd = (dbt_measurement(a, ego, p, nullptr) - dbt_measurement(b, ego, p, nullptr)) / 2e-6;
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(J(i, j), fd[i], 1e-6);
  }
}

TEST(Dbt, TracksStrongTargetWithPsdCovariance) {
  const RadarParams p = tiny_radar();
  std::mt19937_64 rng(41);
  const EgoState ego{};
  const Vec4 rel(7.5, 0.0, 0.2, 0.0);
  const Vec4 x = rotation(p.mounting_angle) * rel;
  std::vector<std::vector<PointMeasurement>> pts;
  std::vector<EgoState> egos;
  for (int k = 0; k < 6; ++k) {
    DataCube c = render_frame({{x, 25.0}}, ego, p, PsfModel{}, rng, k);
    pts.push_back(single_frame_detect(c, p, 1e-3));
    egos.push_back(ego);
  }
  const auto tracks = dbt_track(pts, egos, p, DbtParams{});
  ASSERT_FALSE(tracks.empty());
  const Track& t = tracks.front();
  EXPECT_EQ(t.first_frame(), 0);
  for (const auto& pt : t.points) EXPECT_LT(std::hypot(pt.x[0] - x[0], pt.x[2] - x[2]), 2 * p.position_cell_extent(7.5));
  EXPECT_THROW(dbt_track(pts, {}, p, DbtParams{}), std::invalid_argument);
}

TEST(Dbt, NoiseOnlyRarelyConfirms) {
  const RadarParams p = tiny_radar();
  std::mt19937_64 rng(42);
  int confirmed = 0;
  for (int t = 0; t < 50; ++t) {
    std::vector<std::vector<PointMeasurement>> pts;
    std::vector<EgoState> egos(6);
    for (int k = 0; k < 6; ++k) pts.push_back(single_frame_detect(render_frame({}, EgoState{}, p, PsfModel{}, rng, k), p, 1e-3));
    confirmed += !dbt_track(pts, egos, p, DbtParams{}).empty();
  }
  EXPECT_LE(confirmed, 5);
}

TEST(Classical, NeighborGateIsSymmetricAndContainsSelf) {
  const RadarParams p = tiny_radar();
  const ClassicalGrid g(p, VelocityGateSpec{});
  auto has = [&](std::size_t c, std::size_t q) {
    return std::binary_search(g.nbr.begin() + g.start[c], g.nbr.begin() + g.start[c + 1], static_cast<std::uint32_t>(q));
  };
  for (std::size_t c = 0; c < g.size(); c += 5) {
    EXPECT_TRUE(has(c, c));
    for (std::uint32_t j = g.start[c]; j < g.start[c + 1]; ++j) EXPECT_TRUE(has(g.nbr[j], c));
  }
  EXPECT_THROW(ClassicalGrid(p, VelocityGateSpec{0.0, 1.0}), std::invalid_argument);
}

TEST(Classical, DeclaresStationaryStrongTarget) {
  const RadarParams p = tiny_radar();
  const ClassicalGrid g(p, VelocityGateSpec{});
  std::mt19937_64 rng(43);
  const Vec4 x = rotation(p.mounting_angle) * Vec4(7.5, 0.0, 0.0, 0.0);
  std::vector<DataCube> cubes;
  for (int k = 0; k < 6; ++k) cubes.push_back(render_frame({{x, 20.0}}, EgoState{}, p, PsfModel{}, rng, k));
  const auto frames = run_classical_mftbd(cubes, g, 2.0);
  const auto tracks = classical_declare(frames, cubes, g, 10.0);
  ASSERT_EQ(tracks.size(), 1u);
  EXPECT_EQ(tracks[0].ell, 6);
  for (const auto& pt : tracks[0].points) {
    EXPECT_LE(std::abs(pt.cell.r - 15), 1);
    EXPECT_LE(std::abs(pt.cell.theta), 1);
  }
  EXPECT_TRUE(classical_declare(frames, cubes, g, 1e9).empty());
  EXPECT_DOUBLE_EQ(classical_max_merit(frames), tracks[0].merit);
}
