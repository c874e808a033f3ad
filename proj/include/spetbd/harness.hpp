#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "spetbd/baselines.hpp"
#include "spetbd/geom.hpp"
#include "spetbd/models.hpp"
#include "spetbd/sensor.hpp"
#include "spetbd/tbd.hpp"

namespace spetbd {

// ---------------------------------------------------------------------------
// Seeds and parallelism
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_string(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

/// Per-trial seed: hash(master, axis value, algorithm, trial).
inline std::uint64_t trial_seed(std::uint64_t master, double axis_value, const std::string& algorithm,
                                std::uint64_t trial) {
  std::uint64_t bits = 0;
  std::memcpy(&bits, &axis_value, sizeof bits);
  std::uint64_t h = splitmix64(master);
  h = splitmix64(h ^ bits);
  h = splitmix64(h ^ hash_string(algorithm));
  return splitmix64(h ^ trial);
}

/// Seed stream for H0 calibration trials, disjoint from the evaluation stream.
inline std::uint64_t calibration_seed(std::uint64_t master, const std::string& algorithm, std::uint64_t trial) {
  return trial_seed(splitmix64(master ^ 0x63616c6962726174ULL), 0.0, algorithm, trial);
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Exceptions are rethrown on the caller.
inline void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, std::max<std::size_t>(n, 1)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lk(err_mu);
          if (!err) err = std::current_exception();
          next = n;
          return;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

// ---------------------------------------------------------------------------
// Scenario
// ---------------------------------------------------------------------------

enum class Algorithm { kSpe, kClassical, kDbt };

inline const char* to_string(Algorithm a) {
  switch (a) {
    case Algorithm::kSpe: return "spe";
    case Algorithm::kClassical: return "classical";
    case Algorithm::kDbt: return "dbt";
  }
  return "?";
}

inline std::vector<Algorithm> parse_algorithms(const std::string& s) {
  if (s == "all") return {Algorithm::kSpe, Algorithm::kClassical, Algorithm::kDbt};
  if (s == "spe") return {Algorithm::kSpe};
  if (s == "classical") return {Algorithm::kClassical};
  if (s == "dbt") return {Algorithm::kDbt};
  throw std::invalid_argument("unknown algorithm '" + s + "' (expected spe, classical, dbt or all)");
}

enum class FovSchedule { kAlways, kAppear, kDisappear };

inline const char* to_string(FovSchedule f) {
  switch (f) {
    case FovSchedule::kAlways: return "always";
    case FovSchedule::kAppear: return "appear";
    case FovSchedule::kDisappear: return "disappear";
  }
  return "?";
}

inline FovSchedule parse_schedule(const std::string& s) {
  if (s == "always") return FovSchedule::kAlways;
  if (s == "appear") return FovSchedule::kAppear;
  if (s == "disappear") return FovSchedule::kDisappear;
  throw std::invalid_argument("unknown FOV schedule '" + s + "' (expected always, appear or disappear)");
}

struct EgoSpec {
  EgoModel model = EgoModel::kCT;
  double speed = 2.0;
  double yaw0 = 0.0;
  double accel_lo = 0.0;
  double accel_hi = 28.0;
  double turn_lo = 0.0;
  double turn_hi = 0.873 * std::numbers::pi;
};

struct TargetSpec {
  double snr_db = 6.0;
  double speed_max = 2.0;
  double range_lo = 7.0;
  double range_hi = 15.0;
  FovSchedule schedule = FovSchedule::kAlways;
  /// Frames outside the FOV at the start (appear) or at the end (disappear).
  int kappa = 0;
  int count = 1;
  /// Minimum spacing between planted targets, m.
  double min_separation = 3.0;
};

struct Scenario {
  std::string id = "desk";
  RadarParams radar{};
  EgoSpec ego{};
  EgoNoiseModel ego_noise{};
  /// Empty selects cell/sqrt(12) per axis.
  std::optional<PolarNoiseModel> polar_noise;
  double rho = 0.0;
  TargetSpec target{};
  PsfModel psf{};
  double process_accel_var = 0.25;
  double gate = kChi2Dof4P99;
  double design_snr_db = 6.0;
  bool psf_sum = false;
  bool bucketed = true;
  int overlap_cap = 1;
  bool multi_target = false;
  VelocityGateSpec classical{};
  DbtParams dbt{};
  int K = 6;
  std::size_t trials = 200;
  std::uint64_t seed = 1;
  double pfa = 1e-3;
  CalibrationMode calibration_mode = CalibrationMode::kFamilywise;
  std::size_t calibration_trials = 1000;
  double detect_cells = 2.0;
  bool strict_polar = false;
  std::string sweep_axis = "snr";
  std::vector<double> sweep_values{};
  std::vector<Algorithm> algorithms{Algorithm::kSpe, Algorithm::kClassical, Algorithm::kDbt};

  Mat2 process_noise() const { return Mat2::Identity() * process_accel_var; }

  PolarNoiseModel polar() const {
    PolarNoiseModel m = polar_noise ? *polar_noise : PolarNoiseModel::from_resolution(radar);
    m.rho = rho;
    return m;
  }

  TbdConfig tbd_config() const {
    TbdConfig c;
    c.gate = gate;
    c.process_noise = process_noise();
    c.polar_noise = polar();
    c.ego_noise = ego_noise;
    c.design_amplitude = snr_to_amplitude(design_snr_db, radar.noise_sigma);
    c.psf_sum = psf_sum;
    c.psf = psf;
    c.bucketed = bucketed;
    return c;
  }

  void validate() const {
    radar.validate();
    ego_noise.validate();
    polar().validate();
    classical.validate();
    if (K < 2) throw std::invalid_argument("scenario needs K >= 2 frames");
    if (trials < 1) throw std::invalid_argument("scenario needs at least one trial");
    if (target.count < 1) throw std::invalid_argument("target count must be at least 1");
    if (target.schedule != FovSchedule::kAlways && (target.kappa < 1 || target.kappa >= K)) {
      throw std::invalid_argument("kappa must satisfy 1 <= kappa < K for appear/disappear schedules");
    }
    if (!(target.range_lo > 0 && target.range_hi > target.range_lo)) {
      throw std::invalid_argument("target placement range must satisfy 0 < lo < hi");
    }
    if (!(gate >= 0)) throw std::invalid_argument("gate threshold must be non-negative");
    if (!(process_accel_var > 0)) throw std::invalid_argument("process noise variance must be positive");
    if (overlap_cap < 1) throw std::invalid_argument("overlap cap L must be at least 1");
  }

  /// Fields the H0 merit distribution depends on; thresholds are reusable across scenarios
  /// sharing this key.
  std::string calibration_key(Algorithm a) const {
    std::ostringstream s;
    s << std::setprecision(17) << to_string(a) << '|' << K << '|' << pfa << '|'
      << (calibration_mode == CalibrationMode::kFamilywise ? "fw" : "pe") << '|' << calibration_trials << '|' << seed
      << '|' << radar.dr << ',' << radar.dd << ',' << radar.dtheta << ',' << radar.r_min << ',' << radar.r_max << ','
      << radar.d_min << ',' << radar.d_max << ',' << radar.theta_min << ',' << radar.theta_max << ','
      << radar.scan_period << ',' << radar.mounting_angle << ',' << radar.noise_sigma << ',' << radar.n_theta_rate
      << ',' << radar.theta_rate_offset() << '|' << design_snr_db << '|' << psf_sum;
    if (a == Algorithm::kSpe) {
      const PolarNoiseModel pn = polar();
      s << '|' << to_string(ego.model) << ',' << ego.speed << ',' << ego.yaw0 << ',' << ego.accel_lo << ','
        << ego.accel_hi << ',' << ego.turn_lo << ',' << ego.turn_hi << '|' << ego_noise.eta << ',' << ego_noise.e_x
        << ',' << ego_noise.e_vx << ',' << ego_noise.e_y << ',' << ego_noise.e_vy << ',' << ego_noise.e_yaw << '|'
        << pn.sigma_range << ',' << pn.sigma_doppler << ',' << pn.sigma_azimuth << ',' << pn.sigma_azimuth_rate
        << ',' << pn.rho << '|' << gate << ',' << process_accel_var;
    } else if (a == Algorithm::kClassical) {
      s << '|' << classical.max_speed << ',' << classical.max_accel;
    }
    return s.str();
  }
};

namespace detail {

using nlohmann::json;

inline void check_keys(const json& j, const std::string& section, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw std::invalid_argument("config section '" + section + "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) throw std::invalid_argument("unknown config key '" + section + "." + it.key() + "'");
  }
}

template <class T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void read_deg(const json& j, const char* key, double& out) {
  if (j.contains(key)) out = j.at(key).get<double>() * kDegToRad;
}

}  // namespace detail

/// Builds a scenario from a JSON document (sections radar, ego, noise, target, algorithm, sweep).
/// Every field is optional; absent fields keep their defaults. Angles are given in degrees.
inline Scenario scenario_from_json(const nlohmann::json& j) {
  using detail::read;
  using detail::read_deg;
  Scenario s;
  detail::check_keys(j, "", {"id", "K", "trials", "seed", "radar", "ego", "noise", "target", "algorithm", "sweep"});
  read(j, "id", s.id);
  read(j, "K", s.K);
  read(j, "trials", s.trials);
  read(j, "seed", s.seed);
  if (j.contains("radar")) {
    const auto& r = j["radar"];
    detail::check_keys(r, "radar", {"dr", "dd", "dtheta_deg", "r_min", "r_max", "d_min", "d_max", "theta_min_deg",
                                    "theta_max_deg", "scan_period", "mounting_angle_deg", "noise_sigma",
                                    "n_theta_rate", "theta_rate_min_deg_s"});
    read(r, "dr", s.radar.dr);
    read(r, "dd", s.radar.dd);
    read_deg(r, "dtheta_deg", s.radar.dtheta);
    read(r, "r_min", s.radar.r_min);
    read(r, "r_max", s.radar.r_max);
    read(r, "d_min", s.radar.d_min);
    read(r, "d_max", s.radar.d_max);
    read_deg(r, "theta_min_deg", s.radar.theta_min);
    read_deg(r, "theta_max_deg", s.radar.theta_max);
    read(r, "scan_period", s.radar.scan_period);
    read_deg(r, "mounting_angle_deg", s.radar.mounting_angle);
    read(r, "noise_sigma", s.radar.noise_sigma);
    read(r, "n_theta_rate", s.radar.n_theta_rate);
    read_deg(r, "theta_rate_min_deg_s", s.radar.theta_rate_min);
  }
  if (j.contains("ego")) {
    const auto& e = j["ego"];
    detail::check_keys(e, "ego", {"model", "speed", "yaw0_deg", "accel_range", "turn_rate_range"});
    if (e.contains("model")) s.ego.model = ego_model_from_string(e["model"].get<std::string>());
    read(e, "speed", s.ego.speed);
    read_deg(e, "yaw0_deg", s.ego.yaw0);
    if (e.contains("accel_range")) {
      const auto v = e["accel_range"].get<std::vector<double>>();
      if (v.size() != 2) throw std::invalid_argument("ego.accel_range needs two values");
      s.ego.accel_lo = v[0];
      s.ego.accel_hi = v[1];
    }
    if (e.contains("turn_rate_range")) {
      const auto v = e["turn_rate_range"].get<std::vector<double>>();
      if (v.size() != 2) throw std::invalid_argument("ego.turn_rate_range needs two values (rad/s)");
      s.ego.turn_lo = v[0];
      s.ego.turn_hi = v[1];
    }
  }
  if (j.contains("noise")) {
    const auto& n = j["noise"];
    detail::check_keys(n, "noise", {"eta", "e_x", "e_vx", "e_y", "e_vy", "e_yaw_deg", "sigma_range",
                                    "sigma_doppler", "sigma_azimuth_deg", "sigma_azimuth_rate_deg_s", "rho",
                                    "process_accel_var"});
    if (n.contains("eta")) {
      const auto& v = n["eta"];
      s.ego_noise.eta = v.is_string() && v.get<std::string>() == "inf" ? std::numeric_limits<double>::infinity()
                                                                        : v.get<double>();
    }
    read(n, "e_x", s.ego_noise.e_x);
    read(n, "e_vx", s.ego_noise.e_vx);
    read(n, "e_y", s.ego_noise.e_y);
    read(n, "e_vy", s.ego_noise.e_vy);
    read_deg(n, "e_yaw_deg", s.ego_noise.e_yaw);
    read(n, "rho", s.rho);
    read(n, "process_accel_var", s.process_accel_var);
    if (n.contains("sigma_range") || n.contains("sigma_doppler") || n.contains("sigma_azimuth_deg") ||
        n.contains("sigma_azimuth_rate_deg_s")) {
      PolarNoiseModel m = PolarNoiseModel::from_resolution(s.radar);
      read(n, "sigma_range", m.sigma_range);
      read(n, "sigma_doppler", m.sigma_doppler);
      read_deg(n, "sigma_azimuth_deg", m.sigma_azimuth);
      read_deg(n, "sigma_azimuth_rate_deg_s", m.sigma_azimuth_rate);
      s.polar_noise = m;
    }
  }
  if (j.contains("target")) {
    const auto& t = j["target"];
    detail::check_keys(t, "target", {"snr_db", "speed_max", "range", "schedule", "kappa", "count",
                                     "min_separation", "psf_sigma_cells", "psf_half_width"});
    read(t, "snr_db", s.target.snr_db);
    read(t, "speed_max", s.target.speed_max);
    if (t.contains("range")) {
      const auto v = t["range"].get<std::vector<double>>();
      if (v.size() != 2) throw std::invalid_argument("target.range needs two values");
      s.target.range_lo = v[0];
      s.target.range_hi = v[1];
    }
    if (t.contains("schedule")) s.target.schedule = parse_schedule(t["schedule"].get<std::string>());
    read(t, "kappa", s.target.kappa);
    read(t, "count", s.target.count);
    read(t, "min_separation", s.target.min_separation);
    read(t, "psf_sigma_cells", s.psf.sigma_cells);
    read(t, "psf_half_width", s.psf.half_width);
  }
  if (j.contains("algorithm")) {
    const auto& a = j["algorithm"];
    detail::check_keys(a, "algorithm", {"gate", "design_snr_db", "psf_sum", "bucketed", "overlap_cap",
                                        "multi_target", "pfa", "calibration_mode", "calibration_trials",
                                        "classical_max_speed", "classical_max_accel", "dbt_pfa_sfd", "dbt_gate",
                                        "dbt_confirm_hits", "dbt_confirm_window", "dbt_max_misses",
                                        "dbt_init_velocity_sigma", "detect_cells", "strict_polar"});
    read(a, "gate", s.gate);
    read(a, "design_snr_db", s.design_snr_db);
    read(a, "psf_sum", s.psf_sum);
    read(a, "bucketed", s.bucketed);
    read(a, "overlap_cap", s.overlap_cap);
    read(a, "multi_target", s.multi_target);
    read(a, "pfa", s.pfa);
    if (a.contains("calibration_mode")) {
      const auto m = a["calibration_mode"].get<std::string>();
      if (m == "familywise") s.calibration_mode = CalibrationMode::kFamilywise;
      else if (m == "per-ell") s.calibration_mode = CalibrationMode::kPerEll;
      else throw std::invalid_argument("calibration_mode must be familywise or per-ell");
    }
    read(a, "calibration_trials", s.calibration_trials);
    read(a, "classical_max_speed", s.classical.max_speed);
    read(a, "classical_max_accel", s.classical.max_accel);
    read(a, "dbt_pfa_sfd", s.dbt.pfa_sfd);
    read(a, "dbt_gate", s.dbt.gate);
    read(a, "dbt_confirm_hits", s.dbt.confirm_hits);
    read(a, "dbt_confirm_window", s.dbt.confirm_window);
    read(a, "dbt_max_misses", s.dbt.max_misses);
    read(a, "dbt_init_velocity_sigma", s.dbt.init_velocity_sigma);
    read(a, "detect_cells", s.detect_cells);
    read(a, "strict_polar", s.strict_polar);
  }
  if (j.contains("sweep")) {
    const auto& w = j["sweep"];
    detail::check_keys(w, "sweep", {"axis", "values", "algorithms"});
    read(w, "axis", s.sweep_axis);
    read(w, "values", s.sweep_values);
    if (w.contains("algorithms")) {
      s.algorithms.clear();
      for (const auto& a : w["algorithms"]) {
        for (Algorithm x : parse_algorithms(a.get<std::string>())) s.algorithms.push_back(x);
      }
    }
  }
  s.dbt.process_noise = s.process_noise();
  s.validate();
  return s;
}

inline Scenario load_scenario(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("cannot parse config " + path + ": " + e.what());
  }
  return scenario_from_json(j);
}

/// Sets one sweep axis (snr, eta, K, kappa) on a copy of the scenario.
inline Scenario with_axis(Scenario s, const std::string& axis, double value) {
  if (axis == "snr") s.target.snr_db = value;
  else if (axis == "eta") s.ego_noise.eta = value;
  else if (axis == "K") s.K = static_cast<int>(std::lround(value));
  else if (axis == "kappa") s.target.kappa = static_cast<int>(std::lround(value));
  else throw std::invalid_argument("unknown sweep axis '" + axis + "' (expected snr, eta, K or kappa)");
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Trial generation
// ---------------------------------------------------------------------------

struct TrialData {
  EgoMotionSpec ego_spec{};
  std::vector<EgoState> ego_true;
  std::vector<EgoState> ego_measured;
  /// truth[target][frame]
  std::vector<std::vector<TargetState>> truth;
  std::vector<std::vector<std::uint8_t>> truth_in_fov;
  std::vector<DataCube> cubes;
};

namespace detail {

template <class Rng>
EgoMotionSpec sample_ego(const EgoSpec& e, Rng& rng) {
  EgoMotionSpec m;
  m.model = e.model;
  m.initial.yaw = e.yaw0;
  m.initial.vx = e.speed * std::cos(e.yaw0);
  m.initial.vy = -e.speed * std::sin(e.yaw0);
  if (e.model == EgoModel::kCA) m.accel = std::uniform_real_distribution<double>(e.accel_lo, e.accel_hi)(rng);
  if (e.model == EgoModel::kCT) m.turn_rate = std::uniform_real_distribution<double>(e.turn_lo, e.turn_hi)(rng);
  return m;
}

inline bool schedule_ok(const std::vector<std::uint8_t>& fov, FovSchedule s, int kappa) {
  const int K = static_cast<int>(fov.size());
  for (int k = 0; k < K; ++k) {
    bool want = true;
    if (s == FovSchedule::kAppear) want = k >= kappa;
    if (s == FovSchedule::kDisappear) want = k < K - kappa;
    if (static_cast<bool>(fov[static_cast<std::size_t>(k)]) != want) return false;
  }
  return true;
}

}  // namespace detail

/// Samples ego motion and (optionally) targets satisfying the FOV schedule, then renders K cubes.
/// Targets are placed by rejection against the true ego poses; the ego is resampled every 200
/// rejected placements.
template <class Rng>
TrialData generate_trial(const Scenario& s, bool with_targets, Rng& rng) {
  const RadarParams& p = s.radar;
  const double T = p.scan_period;
  const Mat2 qt = s.process_noise();
  TrialData d;
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const int n_targets = with_targets ? s.target.count : 0;
  const double margin = s.target.schedule == FovSchedule::kAlways ? 0.0 : 60.0 * kDegToRad;
  constexpr int kMaxAttempts = 200000;
  int attempts = 0;
  for (;;) {
    d.ego_spec = detail::sample_ego(s.ego, rng);
    d.ego_true = ego_true_trajectory(d.ego_spec, s.K, T);
    d.truth.clear();
    d.truth_in_fov.clear();
    bool ok = true;
    for (int t = 0; t < n_targets && ok; ++t) {
      bool placed = false;
      for (int a = 0; a < 200 && !placed; ++a, ++attempts) {
        const double R = s.target.range_lo + (s.target.range_hi - s.target.range_lo) * u01(rng);
        const double th = p.theta_min - margin + (p.theta_max - p.theta_min + 2 * margin) * u01(rng);
        const double sp = s.target.speed_max * u01(rng);
        const double hd = 2.0 * std::numbers::pi * u01(rng);
        // Position from the radar polar sample at frame 0, velocity in the geodetic frame.
        const EgoState& e0 = d.ego_true[0];
        const Vec4 rel_r(R * std::cos(th), 0.0, R * std::sin(th), 0.0);
        Vec4 x = rotation(e0.yaw) * (rotation(p.mounting_angle) * rel_r);
        x[0] += e0.px;
        x[2] += e0.py;
        x[1] = sp * std::cos(hd);
        x[3] = sp * std::sin(hd);
        std::vector<TargetState> traj{x};
        for (int k = 1; k < s.K; ++k) traj.push_back(propagate_target(traj.back(), T, qt, rng));
        std::vector<std::uint8_t> fov(static_cast<std::size_t>(s.K));
        for (int k = 0; k < s.K; ++k) {
          fov[static_cast<std::size_t>(k)] = in_fov(traj[static_cast<std::size_t>(k)], d.ego_true[static_cast<std::size_t>(k)], p);
        }
        const FovSchedule sched = n_targets > 1 ? FovSchedule::kAlways : s.target.schedule;
        if (!detail::schedule_ok(fov, sched, s.target.kappa)) continue;
        // Planted targets keep disjoint PSF supports and a minimum spacing at every frame.
        bool apart = true;
        for (const auto& other : d.truth) {
          for (int k = 0; k < s.K && apart; ++k) {
            const auto& a = traj[static_cast<std::size_t>(k)];
            const auto& b = other[static_cast<std::size_t>(k)];
            if (std::hypot(a[0] - b[0], a[2] - b[2]) < s.target.min_separation) apart = false;
            const auto ca = project_to_cell(a, d.ego_true[static_cast<std::size_t>(k)], p);
            const auto cb = project_to_cell(b, d.ego_true[static_cast<std::size_t>(k)], p);
            if (ca && cb) {
              const int cheb = std::max({std::abs(ca->r - cb->r), std::abs(ca->d - cb->d), std::abs(ca->theta - cb->theta)});
              if (cheb <= 2 * s.psf.half_width) apart = false;
            }
          }
        }
        if (!apart) continue;
        d.truth.push_back(std::move(traj));
        d.truth_in_fov.push_back(std::move(fov));
        placed = true;
      }
      ok = placed;
    }
    if (ok) break;
    if (attempts >= kMaxAttempts) {
      throw std::runtime_error("could not place targets satisfying the FOV schedule after " +
                               std::to_string(attempts) + " attempts");
    }
  }
  for (const auto& e : d.ego_true) d.ego_measured.push_back(measure_ego(e, s.ego_noise, rng));
  for (int k = 0; k < s.K; ++k) {
    std::vector<RenderTarget> rts;
    for (const auto& tr : d.truth) rts.push_back({tr[static_cast<std::size_t>(k)], s.target.snr_db});
    DataCube c = render_frame(rts, d.ego_true[static_cast<std::size_t>(k)], p, s.psf, rng, k);
    c.ego_measured = d.ego_measured[static_cast<std::size_t>(k)];
    d.cubes.push_back(std::move(c));
  }
  return d;
}

// ---------------------------------------------------------------------------
// Algorithms on one trial
// ---------------------------------------------------------------------------

/// Per-scenario precomputation shared by all trials.
class Engine {
 public:
  explicit Engine(const Scenario& s) : scenario_(s) { s.validate(); }

  const Scenario& scenario() const { return scenario_; }

  const GridCache& grid() {
    std::call_once(grid_once_, [&] { grid_ = std::make_unique<GridCache>(scenario_.radar, scenario_.polar()); });
    return *grid_;
  }
  const ClassicalGrid& classical_grid() {
    std::call_once(cgrid_once_, [&] { cgrid_ = std::make_unique<ClassicalGrid>(scenario_.radar, scenario_.classical); });
    return *cgrid_;
  }

 private:
  Scenario scenario_;
  std::once_flag grid_once_, cgrid_once_;
  std::unique_ptr<GridCache> grid_;
  std::unique_ptr<ClassicalGrid> cgrid_;
};

/// H0 statistic of one batch: largest final merit per ell (spe) or overall (classical).
inline std::vector<double> h0_statistic(Engine& eng, Algorithm alg, const TrialData& d) {
  const Scenario& s = eng.scenario();
  if (alg == Algorithm::kSpe) {
    const auto frames = run_spe_mftbd(d.cubes, eng.grid(), s.tbd_config());
    return max_merit_per_ell(frames.back(), s.K);
  }
  if (alg == Algorithm::kClassical) {
    const auto frames = run_classical_mftbd(d.cubes, eng.classical_grid(), s.tbd_config().design_amplitude);
    return {classical_max_merit(frames)};
  }
  throw std::invalid_argument("dbt uses a fixed single-frame threshold and needs no calibration");
}

/// Calibrates the detection thresholds of `alg` on noise-only batches.
inline ThresholdTable calibrate(Engine& eng, Algorithm alg, std::size_t trials, std::uint64_t seed, unsigned threads,
                                const std::function<void(std::size_t)>& progress = {}) {
  const Scenario& s = eng.scenario();
  const std::size_t need = min_calibration_trials(s.pfa);
  if (trials < need) {
    throw std::invalid_argument("calibration needs at least " + std::to_string(need) + " trials for pfa " +
                                detail::fmt_num(s.pfa) + ", got " + std::to_string(trials));
  }
  std::vector<std::vector<double>> maxima(trials);
  std::atomic<std::size_t> done{0};
  parallel_for(trials, threads, [&](std::size_t i) {
    std::mt19937_64 rng(calibration_seed(seed, to_string(alg), i));
    const TrialData d = generate_trial(s, false, rng);
    maxima[i] = h0_statistic(eng, alg, d);
    const std::size_t n = ++done;
    if (progress) progress(n);
  });
  ThresholdTable t;
  if (alg == Algorithm::kClassical) {
    t = thresholds_from_maxima(maxima, 1, s.pfa, CalibrationMode::kPerEll);
    t.lambda.assign(static_cast<std::size_t>(s.K), t.lambda[0]);
    t.mode = "single";
  } else {
    t = thresholds_from_maxima(maxima, s.K, s.pfa, s.calibration_mode);
  }
  t.algorithm = to_string(alg);
  t.K = s.K;
  t.seed = seed;
  return t;
}

/// Declared tracks of one algorithm on one trial.
inline std::vector<Track> run_algorithm(Engine& eng, Algorithm alg, const TrialData& d, const ThresholdTable* th) {
  const Scenario& s = eng.scenario();
  if (alg != Algorithm::kDbt && !th) {
    throw std::invalid_argument(std::string("no threshold table for ") + to_string(alg) + "; run `calibrate` first");
  }
  if (th && alg != Algorithm::kDbt && static_cast<int>(th->lambda.size()) != s.K) {
    throw std::invalid_argument("threshold table was calibrated for K = " + std::to_string(th->lambda.size()) +
                                ", scenario has K = " + std::to_string(s.K));
  }
  switch (alg) {
    case Algorithm::kSpe: {
      const auto frames = run_spe_mftbd(d.cubes, eng.grid(), s.tbd_config());
      return s.multi_target ? extract_multi_flat(frames, *th, s.overlap_cap) : declare(frames, *th);
    }
    case Algorithm::kClassical: {
      const auto frames = run_classical_mftbd(d.cubes, eng.classical_grid(), s.tbd_config().design_amplitude);
      return classical_declare(frames, d.cubes, eng.classical_grid(), th->threshold(s.K));
    }
    case Algorithm::kDbt: {
      std::vector<std::vector<PointMeasurement>> pts;
      for (const auto& c : d.cubes) pts.push_back(single_frame_detect(c, s.radar, s.dbt.pfa_sfd));
      auto tracks = dbt_track(pts, d.ego_measured, s.radar, s.dbt);
      if (!s.multi_target && tracks.size() > 1) tracks.resize(1);
      return tracks;
    }
  }
  return {};
}

struct DetectionCheck {
  bool detected = false;
  std::vector<double> sq_errors;
};

/// Detection test of one track against one truth trajectory: at every checked frame with the
/// truth inside the FOV the track must lie within detect_cells position cells of the truth.
/// Radar-cell tracks (classical) are compared in each scan's radar frame; DBT tracks only from
/// their first frame on.
inline DetectionCheck check_detection(const Track& t, const TrialData& d, std::size_t target, const Scenario& s,
                                      Algorithm alg) {
  DetectionCheck out;
  const RadarParams& p = s.radar;
  const int first = alg == Algorithm::kDbt ? t.first_frame() : 0;
  int checked = 0;
  for (int k = first; k < s.K; ++k) {
    if (!d.truth_in_fov[target][static_cast<std::size_t>(k)]) continue;
    const TrackPoint* pt = t.at_frame(k);
    if (!pt) return {};
    const Vec4& xt = d.truth[target][static_cast<std::size_t>(k)];
    const EgoState& et = d.ego_true[static_cast<std::size_t>(k)];
    const MeasurementState mt = project_to_measurement(xt, et, p);
    double ex = 0, ey = 0;
    if (alg == Algorithm::kClassical) {
      const double R = p.range_axis().value(pt->cell.r), th = p.azimuth_axis().value(pt->cell.theta);
      ex = R * std::cos(th) - mt.range * std::cos(mt.azimuth);
      ey = R * std::sin(th) - mt.range * std::sin(mt.azimuth);
    } else {
      ex = pt->x[0] - xt[0];
      ey = pt->x[2] - xt[2];
    }
    bool ok;
    if (s.strict_polar) {
      MeasurementState me;
      if (alg == Algorithm::kClassical) {
        me.range = p.range_axis().value(pt->cell.r);
        me.azimuth = p.azimuth_axis().value(pt->cell.theta);
      } else {
        me = project_to_measurement(pt->x, et, p);
      }
      ok = std::abs(me.range - mt.range) <= s.detect_cells * p.dr &&
           std::abs(wrap_angle(me.azimuth - mt.azimuth)) <= s.detect_cells * p.dtheta;
    } else {
      ok = std::hypot(ex, ey) <= s.detect_cells * p.position_cell_extent(mt.range);
    }
    if (!ok) return {};
    out.sq_errors.push_back(ex * ex + ey * ey);
    ++checked;
  }
  out.detected = checked > 0;
  if (!out.detected) out.sq_errors.clear();
  return out;
}

struct TrialResult {
  bool declared = false;
  /// Per planted target: some declared track satisfies the detection test.
  std::vector<std::uint8_t> target_detected;
  bool detected = false;
  std::vector<double> sq_errors;
  std::vector<Track> tracks;
  /// Every pair of extracted tracks in the same ell group shares fewer than L cells.
  bool stc_disjoint = true;
};

inline TrialResult evaluate_trial(Engine& eng, Algorithm alg, const TrialData& d, const ThresholdTable* th) {
  const Scenario& s = eng.scenario();
  TrialResult r;
  r.tracks = run_algorithm(eng, alg, d, th);
  r.declared = !r.tracks.empty();
  r.target_detected.assign(d.truth.size(), 0);
  for (std::size_t t = 0; t < d.truth.size(); ++t) {
    for (const auto& tr : r.tracks) {
      DetectionCheck c = check_detection(tr, d, t, s, alg);
      if (c.detected) {
        r.target_detected[t] = 1;
        if (t == 0 && r.sq_errors.empty()) r.sq_errors = std::move(c.sq_errors);
        break;
      }
    }
  }
  r.detected = !d.truth.empty() && std::all_of(r.target_detected.begin(), r.target_detected.end(),
                                                [](std::uint8_t v) { return v != 0; });
  if (!r.detected) r.sq_errors.clear();
  for (std::size_t i = 0; i < r.tracks.size(); ++i)
    for (std::size_t j = i + 1; j < r.tracks.size(); ++j)
      if (r.tracks[i].ell == r.tracks[j].ell && shared_cells(r.tracks[i], r.tracks[j]) >= s.overlap_cap)
        r.stc_disjoint = false;
  return r;
}

/// One seeded trial: generate, run, evaluate.
inline TrialResult run_trial(Engine& eng, Algorithm alg, const ThresholdTable* th, std::uint64_t seed,
                             TrialData* data_out = nullptr) {
  std::mt19937_64 rng(seed);
  TrialData d = generate_trial(eng.scenario(), true, rng);
  TrialResult r = evaluate_trial(eng, alg, d, th);
  if (data_out) *data_out = std::move(d);
  return r;
}

// ---------------------------------------------------------------------------
// Metrics and output
// ---------------------------------------------------------------------------

/// Root mean square of position errors; nullopt when there are none.
inline std::optional<double> compute_rmse(const std::vector<std::vector<double>>& sq_errors_per_trial) {
  double sum = 0;
  std::size_t n = 0;
  for (const auto& v : sq_errors_per_trial)
    for (double e : v) {
      sum += e;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return std::sqrt(sum / static_cast<double>(n));
}

struct MetricsRow {
  std::string scenario;
  std::string algorithm;
  double snr_db = 0;
  double eta = 0;
  int K = 0;
  int kappa = 0;
  std::string schedule;
  double pd = 0;
  std::optional<double> rmse;
  std::size_t trials = 0;
  double wall_time_s = 0;
  std::string flag;

  /// Two-sigma binomial half-width.
  double pd_band() const { return trials ? 2.0 * std::sqrt(std::max(pd * (1 - pd), 1e-12) / trials) : 1.0; }
};

struct TrialSet {
  MetricsRow row;
  std::vector<TrialResult> results;
};

/// Runs `trials` seeded trials of one algorithm on one scenario.
inline TrialSet run_trials(Engine& eng, Algorithm alg, const ThresholdTable* th, double axis_value,
                           std::size_t trials, unsigned threads) {
  const Scenario& s = eng.scenario();
  TrialSet out;
  out.results.resize(trials);
  const auto t0 = std::chrono::steady_clock::now();
  parallel_for(trials, threads, [&](std::size_t i) {
    out.results[i] = run_trial(eng, alg, th, trial_seed(s.seed, axis_value, to_string(alg), i));
  });
  const auto t1 = std::chrono::steady_clock::now();
  std::size_t det = 0;
  std::vector<std::vector<double>> errs;
  for (const auto& r : out.results) {
    if (r.detected) {
      ++det;
      errs.push_back(r.sq_errors);
    }
  }
  MetricsRow& m = out.row;
  m.scenario = s.id;
  m.algorithm = to_string(alg);
  m.snr_db = s.target.snr_db;
  m.eta = s.ego_noise.eta;
  m.K = s.K;
  m.kappa = s.target.schedule == FovSchedule::kAlways ? 0 : s.target.kappa;
  m.schedule = to_string(s.target.schedule);
  m.trials = trials;
  m.pd = trials ? static_cast<double>(det) / static_cast<double>(trials) : 0.0;
  m.rmse = compute_rmse(errs);
  m.wall_time_s = std::chrono::duration<double>(t1 - t0).count();
  return out;
}

/// Supplies the threshold table for a scenario and algorithm (load or calibrate).
using ThresholdProvider = std::function<ThresholdTable(const Scenario&, Algorithm)>;

/// Threshold files cached under `dir`, keyed by the calibration signature. Missing tables are
/// calibrated on demand unless `auto_calibrate` is false.
inline std::string threshold_cache_path(const std::string& dir, const Scenario& s, Algorithm a) {
  std::ostringstream name;
  name << dir << '/' << to_string(a) << '_' << std::hex << std::setw(16) << std::setfill('0')
       << hash_string(s.calibration_key(a)) << ".txt";
  return name.str();
}

inline ThresholdProvider cached_thresholds(const std::string& dir, unsigned threads, bool auto_calibrate = true,
                                           std::ostream* log = nullptr) {
  return [=](const Scenario& s, Algorithm a) {
    const std::string path = threshold_cache_path(dir, s, a);
    if (std::ifstream(path).good()) return load_thresholds(path);
    if (!auto_calibrate) {
      throw std::runtime_error("no threshold table at " + path + "; run `calibrate` first");
    }
    if (log) *log << "calibrating " << to_string(a) << " (" << s.calibration_trials << " noise-only trials)\n";
    Engine eng(s);
    ThresholdTable t = calibrate(eng, a, s.calibration_trials, s.seed, threads);
    std::filesystem::create_directories(dir);
    save_thresholds(path, t);
    return t;
  };
}

/// One row per (axis value, algorithm). Pd drops of the SPE algorithm along an SNR sweep that
/// exceed the two-sigma band are flagged, not fatal.
inline std::vector<MetricsRow> sweep(const Scenario& base, const std::string& axis, const std::vector<double>& values,
                                     const std::vector<Algorithm>& algorithms, const ThresholdProvider& thresholds,
                                     unsigned threads) {
  if (values.empty()) throw std::invalid_argument("sweep needs at least one axis value");
  std::vector<MetricsRow> rows;
  for (double v : values) {
    const Scenario s = with_axis(base, axis, v);
    Engine eng(s);
    for (Algorithm a : algorithms) {
      std::optional<ThresholdTable> th;
      if (a != Algorithm::kDbt) th = thresholds(s, a);
      rows.push_back(run_trials(eng, a, th ? &*th : nullptr, v, s.trials, threads).row);
    }
  }
  if (axis == "snr") {
    const MetricsRow* prev = nullptr;
    for (auto& r : rows) {
      if (r.algorithm != "spe") continue;
      if (prev && r.pd + std::hypot(r.pd_band(), prev->pd_band()) < prev->pd) r.flag = "pd_drop";
      prev = &r;
    }
  }
  return rows;
}

namespace detail {
inline std::string csv_num(double v) {
  std::ostringstream s;
  s << std::setprecision(10) << v;
  return s.str();
}
}  // namespace detail

inline void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows, bool timing = false) {
  os << "# spetbd metrics v1\n"
     << "scenario,algorithm,snr_db,eta,K,kappa,schedule,pd,rmse_m,trials,wall_time_s,flag\n";
  for (const auto& r : rows) {
    os << r.scenario << ',' << r.algorithm << ',' << detail::csv_num(r.snr_db) << ',' << detail::csv_num(r.eta) << ','
       << r.K << ',' << r.kappa << ',' << r.schedule << ',' << detail::csv_num(r.pd) << ','
       << (r.rmse ? detail::csv_num(*r.rmse) : std::string("NA")) << ',' << r.trials << ','
       << (timing ? detail::csv_num(r.wall_time_s) : std::string("NA")) << ',' << r.flag << '\n';
  }
}

inline void write_tracks_csv(std::ostream& os, const std::vector<std::pair<std::size_t, Track>>& tracks) {
  os << "# spetbd tracks v1\n"
     << "trial,frame,x,y,xdot,ydot,in_fov,merit\n";
  for (const auto& [trial, t] : tracks) {
    for (const auto& p : t.points) {
      os << trial << ',' << p.frame << ',' << detail::csv_num(p.x[0]) << ',' << detail::csv_num(p.x[2]) << ','
         << detail::csv_num(p.x[1]) << ',' << detail::csv_num(p.x[3]) << ',' << (p.in_fov ? 1 : 0) << ','
         << detail::csv_num(p.merit) << '\n';
    }
  }
}

}  // namespace spetbd
