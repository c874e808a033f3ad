#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "spetbd/harness.hpp"

namespace fs = std::filesystem;
using namespace spetbd;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> trials;
  unsigned threads = 0;
  std::string algorithm = "all";
  std::string out = "out";
  std::string thresholds = "thresholds";
  bool no_auto_calibrate = false;
  bool timing = false;
};

void add_common(CLI::App* app, Common& c, bool with_algorithm = true) {
  app->add_option("--config", c.config, "scenario JSON file (defaults apply when omitted)");
  app->add_option("--seed", c.seed, "master seed");
  app->add_option("--trials", c.trials, "Monte Carlo trials per point (calibration trials for calibrate)");
  app->add_option("--threads", c.threads, "worker threads (0: all cores)");
  if (with_algorithm) {
    app->add_option("--algorithm", c.algorithm, "spe, classical, dbt or all")
        ->check(CLI::IsMember({"spe", "classical", "dbt", "all"}));
  }
  app->add_option("--out", c.out, "output directory");
}

Scenario load(const Common& c) {
  Scenario s = c.config.empty() ? Scenario{} : load_scenario(c.config);
  if (c.seed) s.seed = *c.seed;
  return s;
}

std::vector<double> parse_values(const std::string& text) {
  std::vector<double> v;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) v.push_back(std::stod(item));
  }
  return v;
}

int cmd_calibrate(const Common& c) {
  Scenario s = load(c);
  if (c.trials) s.calibration_trials = *c.trials;
  fs::create_directories(c.out);
  Engine eng(s);
  for (Algorithm a : parse_algorithms(c.algorithm)) {
    if (a == Algorithm::kDbt) continue;
    const ThresholdTable t = calibrate(eng, a, s.calibration_trials, s.seed, c.threads);
    const std::string path = threshold_cache_path(c.out, s, a);
    save_thresholds(path, t);
    std::cout << to_string(a) << " thresholds -> " << path << '\n';
    write_thresholds(std::cout, t);
  }
  return 0;
}

int cmd_run(const Common& c) {
  Scenario s = load(c);
  if (c.trials) s.trials = *c.trials;
  fs::create_directories(c.out);
  const auto provider = cached_thresholds(c.thresholds, c.threads, !c.no_auto_calibrate, &std::cerr);
  Engine eng(s);
  std::vector<MetricsRow> rows;
  std::ofstream tracks(fs::path(c.out) / "tracks.csv");
  for (Algorithm a : parse_algorithms(c.algorithm)) {
    std::optional<ThresholdTable> th;
    if (a != Algorithm::kDbt) th = provider(s, a);
    TrialSet set = run_trials(eng, a, th ? &*th : nullptr, 0.0, s.trials, c.threads);
    rows.push_back(set.row);
    std::vector<std::pair<std::size_t, Track>> tr;
    for (std::size_t i = 0; i < set.results.size(); ++i)
      for (const auto& t : set.results[i].tracks) tr.emplace_back(i, t);
    tracks << "# algorithm " << to_string(a) << '\n';
    write_tracks_csv(tracks, tr);
  }
  std::ofstream metrics(fs::path(c.out) / "metrics.csv");
  write_metrics_csv(metrics, rows, c.timing);
  write_metrics_csv(std::cout, rows, c.timing);
  return 0;
}

int cmd_sweep(const Common& c, std::string axis, const std::string& values) {
  Scenario s = load(c);
  if (c.trials) s.trials = *c.trials;
  if (axis.empty()) axis = s.sweep_axis;
  std::vector<double> v = values.empty() ? s.sweep_values : parse_values(values);
  fs::create_directories(c.out);
  const auto provider = cached_thresholds(c.thresholds, c.threads, !c.no_auto_calibrate, &std::cerr);
  const auto rows = sweep(s, axis, v, parse_algorithms(c.algorithm), provider, c.threads);
  std::ofstream metrics(fs::path(c.out) / "metrics.csv");
  write_metrics_csv(metrics, rows, c.timing);
  write_metrics_csv(std::cout, rows, c.timing);
  return 0;
}

int cmd_render(const Common& c, std::size_t trial, bool h0) {
  const Scenario s = load(c);
  const std::uint64_t seed = trial_seed(s.seed, 0.0, "render", trial);
  std::mt19937_64 rng(seed);
  const TrialData d = generate_trial(s, !h0, rng);
  fs::create_directories(c.out);
  for (const auto& cube : d.cubes) {
    const fs::path path = fs::path(c.out) / ("frame_" + std::to_string(cube.frame) + ".cube");
    std::ofstream f(path, std::ios::binary);
    write_cube(f, cube, s.radar, seed);
    std::cout << path.string() << '\n';
  }
  std::ofstream truth(fs::path(c.out) / "truth.csv");
  truth << "target,frame,x,y,xdot,ydot,in_fov\n";
  for (std::size_t t = 0; t < d.truth.size(); ++t)
    for (std::size_t k = 0; k < d.truth[t].size(); ++k) {
      const auto& x = d.truth[t][k];
      truth << t << ',' << k << ',' << x[0] << ',' << x[2] << ',' << x[1] << ',' << x[3] << ','
            << int(d.truth_in_fov[t][k]) << '\n';
    }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Track-before-detect for automotive radar with ego-motion uncertainty"};
  app.require_subcommand(1);
  Common c;
  std::string axis, values;
  std::size_t render_trial = 0;
  bool h0 = false;

  auto* cal = app.add_subcommand("calibrate", "estimate detection thresholds from noise-only trials");
  add_common(cal, c);

  auto* run = app.add_subcommand("run", "Monte Carlo evaluation of one scenario");
  add_common(run, c);
  auto* sw = app.add_subcommand("sweep", "evaluate along one axis (snr, eta, K, kappa)");
  add_common(sw, c);
  sw->add_option("--axis", axis, "sweep axis (default: config)");
  sw->add_option("--values", values, "comma-separated axis values (default: config)");
  for (auto* sub : {run, sw}) {
    sub->add_option("--thresholds", c.thresholds, "threshold cache directory");
    sub->add_flag("--no-auto-calibrate", c.no_auto_calibrate, "fail instead of calibrating missing thresholds");
    sub->add_flag("--timing", c.timing, "report wall time in the metrics");
  }

  auto* ren = app.add_subcommand("render", "write the cubes of one trial");
  add_common(ren, c, false);
  ren->add_option("--trial", render_trial, "trial index");
  ren->add_flag("--h0", h0, "noise only");

  CLI11_PARSE(app, argc, argv);
  try {
    if (cal->parsed()) return cmd_calibrate(c);
    if (run->parsed()) return cmd_run(c);
    if (sw->parsed()) return cmd_sweep(c, axis, values);
    if (ren->parsed()) return cmd_render(c, render_trial, h0);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
