#pragma once

// Reference computations shared by the unit tests and the acceptance runner. Each one is
// written independently of the library code path it checks.

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include "spetbd/tbd.hpp"

namespace oracle {

using spetbd::Mat4;
using spetbd::Vec4;

/// Radical inverse of i in base b.
inline double radical_inverse(std::uint64_t i, unsigned b) {
  double f = 1.0, r = 0.0;
  while (i > 0) {
    f /= b;
    r += f * static_cast<double>(i % b);
    i /= b;
  }
  return r;
}

/// Randomly shifted Halton point set mapped to standard normals, dims <= 8.
class NormalQmc {
 public:
  NormalQmc(int dims, std::uint64_t seed) : dims_(dims), shift_(static_cast<std::size_t>(dims)) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (double& s : shift_) s = u(rng);
  }
  void point(std::uint64_t i, double* z) const {
    static constexpr unsigned kPrimes[8] = {2, 3, 5, 7, 11, 13, 17, 19};
    const boost::math::normal n01;
    for (int d = 0; d < dims_; ++d) {
      double u = radical_inverse(i + 1, kPrimes[d]) + shift_[static_cast<std::size_t>(d)];
      u -= std::floor(u);
      u = std::clamp(u, 1e-15, 1.0 - 1e-15);
      z[d] = boost::math::quantile(n01, u);
    }
  }

 private:
  int dims_;
  std::vector<double> shift_;
};

struct SampleMoments {
  Vec4 mean = Vec4::Zero();
  Mat4 cov = Mat4::Zero();
  Vec4 mean_se = Vec4::Zero();
  Mat4 cov_se = Mat4::Zero();
};

/// Sample mean/covariance with naive standard errors from a two-pass accumulation.
template <class Gen>
SampleMoments sample_moments(std::size_t n, Gen&& gen) {
  std::vector<Vec4> xs(n);
  SampleMoments m;
  for (std::size_t i = 0; i < n; ++i) {
    xs[i] = gen(i);
    m.mean += xs[i];
  }
  m.mean /= static_cast<double>(n);
  Mat4 m2 = Mat4::Zero(), m4 = Mat4::Zero();
  for (const auto& x : xs) {
    const Vec4 d = x - m.mean;
    const Mat4 p = d * d.transpose();
    m2 += p;
    m4 += p.cwiseProduct(p);
  }
  m2 /= static_cast<double>(n);
  m4 /= static_cast<double>(n);
  m.cov = m2 * (static_cast<double>(n) / static_cast<double>(n - 1));
  const double sn = std::sqrt(static_cast<double>(n));
  for (int i = 0; i < 4; ++i) {
    m.mean_se[i] = std::sqrt(m2(i, i)) / sn;
    for (int j = 0; j < 4; ++j) m.cov_se(i, j) = std::sqrt(std::max(m4(i, j) - m2(i, j) * m2(i, j), 0.0)) / sn;
  }
  return m;
}

/// Error of the yaw-compensated conversion: e = R(alpha) xv - R(alpha - eps) t with
/// t ~ N(xv - mu, qv) the true vehicle-frame state and eps ~ N(0, q55).
inline SampleMoments yaw_error_moments(const Vec4& xv, const Vec4& mu, const Mat4& qv, double alpha, double q55,
                                       std::size_t n, std::uint64_t seed) {
  const NormalQmc qmc(5, seed);
  const Eigen::LLT<Mat4> llt(qv);
  const Mat4 L = llt.matrixL();
  const Vec4 m = xv - mu;
  const Vec4 est = spetbd::rotation(alpha) * xv;
  const double sq = std::sqrt(q55);
  return sample_moments(n, [&](std::size_t i) {
    double z[5];
    qmc.point(i, z);
    const Vec4 t = m + L * Vec4(z[0], z[1], z[2], z[3]);
    return Vec4(est - spetbd::rotation(alpha - sq * z[4]) * t);
  });
}

/// Error of the polar-to-Cartesian conversion: v = s(y) - s(y - n), n ~ N(0, M).
inline SampleMoments conversion_error_moments(const spetbd::MeasurementState& y, const spetbd::PolarNoiseModel& noise,
                                              std::size_t n, std::uint64_t seed) {
  const NormalQmc qmc(4, seed);
  const Eigen::LLT<Mat4> llt(noise.covariance() + Mat4::Identity() * 1e-300);
  const Mat4 L = llt.matrixL();
  const Vec4 sy = spetbd::polar_to_cartesian(y).v;
  return sample_moments(n, [&](std::size_t i) {
    double z[4];
    qmc.point(i, z);
    const Vec4 e = L * Vec4(z[0], z[1], z[2], z[3]);
    const spetbd::MeasurementState yt{y.range - e[0], y.range_rate - e[1], y.azimuth - e[2], y.azimuth_rate - e[3]};
    return Vec4(sy - spetbd::polar_to_cartesian(yt).v);
  });
}

/// Gate statistic evaluated with a dense solve.
inline double gate_distance(const spetbd::GridState& src, const spetbd::GridState& dst, double T,
                            const spetbd::Mat2& qt) {
  Mat4 F = Mat4::Identity();
  F(0, 1) = T;
  F(2, 3) = T;
  Eigen::Matrix<double, 4, 2> C = Eigen::Matrix<double, 4, 2>::Zero();
  C(0, 0) = C(2, 1) = 0.5 * T * T;
  C(1, 0) = C(3, 1) = T;
  const Mat4 S = F * src.Q * F.transpose() + C * qt * C.transpose() + dst.Q;
  const Vec4 d = (dst.x - dst.mu) - F * (src.x - src.mu);
  return d.dot(S.fullPivLu().solve(d));
}

struct BruteState {
  spetbd::GridState g;
  /// For transmitted states: index of the source in the previous frame.
  int source = -1;
  std::vector<int> preds;
};

struct BrutePath {
  double merit = -std::numeric_limits<double>::infinity();
  int ell = 0;
  /// (frame, index) from the first frame of the path to the last.
  std::vector<std::pair<int, int>> nodes;
};

/// Builds every frame's state list (in-FOV cells first, then transmitted ones in source order)
/// and lists all legal predecessors, then scores each final state by exhaustive enumeration of
/// every legal path. A path may only start where no predecessor passes the gate.
class BruteForceDp {
 public:
  BruteForceDp(const std::vector<std::vector<spetbd::GridState>>& in_fov, double T, const spetbd::Mat2& qt,
               double gate) {
    Mat4 F = Mat4::Identity();
    F(0, 1) = T;
    F(2, 3) = T;
    Eigen::Matrix<double, 4, 2> C = Eigen::Matrix<double, 4, 2>::Zero();
    C(0, 0) = C(2, 1) = 0.5 * T * T;
    C(1, 0) = C(3, 1) = T;
    for (std::size_t k = 0; k < in_fov.size(); ++k) {
      std::vector<BruteState> cur;
      for (const auto& g : in_fov[k]) cur.push_back({g, -1, {}});
      if (k > 0) {
        const auto& prev = frames_.back();
        std::vector<char> hit(prev.size(), 0);
        for (auto& c : cur) {
          for (std::size_t p = 0; p < prev.size(); ++p) {
            if (gate_distance(prev[p].g, c.g, T, qt) <= gate) {
              c.preds.push_back(static_cast<int>(p));
              hit[p] = 1;
            }
          }
        }
        for (std::size_t p = 0; p < prev.size(); ++p) {
          if (hit[p]) continue;
          BruteState t;
          t.g = prev[p].g;
          t.g.x = F * prev[p].g.x;
          t.g.mu = F * prev[p].g.mu;
          t.g.Q = F * prev[p].g.Q * F.transpose() + C * qt * C.transpose();
          t.g.in_fov = false;
          t.source = static_cast<int>(p);
          cur.push_back(t);
        }
      }
      frames_.push_back(std::move(cur));
    }
  }

  const std::vector<std::vector<BruteState>>& frames() const { return frames_; }

  /// Best path ending at state i of frame k.
  BrutePath best(int k, int i) const {
    BrutePath best;
    std::vector<std::pair<int, int>> suffix;
    enumerate(k, i, suffix, best);
    return best;
  }

 private:
  void enumerate(int k, int i, std::vector<std::pair<int, int>>& suffix, BrutePath& best) const {
    const BruteState& s = frames_[static_cast<std::size_t>(k)][static_cast<std::size_t>(i)];
    suffix.emplace_back(k, i);
    if (s.source >= 0) {
      enumerate(k - 1, s.source, suffix, best);
    } else if (k == 0 || s.preds.empty()) {
      score(suffix, best);
    } else {
      for (int p : s.preds) enumerate(k - 1, p, suffix, best);
    }
    suffix.pop_back();
  }

  void score(const std::vector<std::pair<int, int>>& suffix, BrutePath& best) const {
    double merit = 0.0;
    int ell = 0;
    bool first = true;
    for (auto it = suffix.rbegin(); it != suffix.rend(); ++it) {
      const BruteState& s = frames_[static_cast<std::size_t>(it->first)][static_cast<std::size_t>(it->second)];
      if (!s.g.in_fov) continue;
      merit = first ? s.g.lambda : merit + s.g.lambda;
      first = false;
      ++ell;
    }
    if (merit > best.merit) {
      best.merit = merit;
      best.ell = ell;
      best.nodes.assign(suffix.rbegin(), suffix.rend());
    }
  }

  std::vector<std::vector<BruteState>> frames_;
};

/// Random SPD matrix with eigenvalues in [lo, hi].
template <class Rng>
Mat4 random_spd(Rng& rng, double lo, double hi) {
  std::normal_distribution<double> n01;
  std::uniform_real_distribution<double> u(lo, hi);
  Mat4 a;
  for (int i = 0; i < 16; ++i) a(i) = n01(rng);
  const Eigen::HouseholderQR<Mat4> qr(a);
  const Mat4 q = qr.householderQ();
  const Vec4 ev(u(rng), u(rng), u(rng), u(rng));
  return q * ev.asDiagonal() * q.transpose();
}

/// Random K-frame DP instance: jittered planar grid of states per frame, a random half-plane
/// and a random subset dropped from the FOV after the first frame.
template <class Rng>
std::vector<std::vector<spetbd::GridState>> random_dp_instance(Rng& rng, int K, int max_states) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> n01;
  std::vector<std::vector<spetbd::GridState>> out;
  for (int k = 0; k < K; ++k) {
    std::vector<spetbd::GridState> f;
    const double cut = k == 0 ? 1e9 : 4.0 + 6.0 * u(rng);
    const double drop = k == 0 ? 0.0 : 0.2 * u(rng);
    for (int ix = 0; ix < 22; ++ix)
      for (int iy = 0; iy < 22; ++iy) {
        if (static_cast<int>(f.size()) >= max_states) break;
        spetbd::GridState g;
        g.x = Vec4(0.5 * ix + 0.1 * n01(rng), n01(rng), 0.5 * iy + 0.1 * n01(rng), n01(rng));
        if (g.x[0] > cut || u(rng) < drop) continue;
        g.mu = Vec4(0.05 * n01(rng), 0.05 * n01(rng), 0.05 * n01(rng), 0.05 * n01(rng));
        g.Q = random_spd(rng, 0.02, 0.4);
        g.lambda = n01(rng);
        g.merit = g.lambda;
        g.ell = 1;
        g.pred = -1;
        g.in_fov = true;
        g.cell = {ix, 0, iy, 0};
        f.push_back(g);
      }
    out.push_back(std::move(f));
  }
  return out;
}

}  // namespace oracle
