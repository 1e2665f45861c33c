#pragma once

// Benchmark harness: grid, sweep, single-episode, and bound-table
// experiments driven by one JSON config. Runs are seeded, order
// independent, resumable through per-cell result files, and rerunning the
// same config + seed reproduces every output byte.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "mpt/common.hpp"
#include "mpt/control.hpp"
#include "mpt/mdp.hpp"
#include "mpt/pushcar.hpp"
#include "mpt/runner.hpp"
#include "mpt/tree.hpp"

namespace mpt {

struct GridSpec {
  double x_min = -2.0, x_max = 2.0;
  double y_min = -2.0, y_max = 2.0;
  int resolution = 5;
  int seeds_per_cell = 10;
};

struct SweepSpec {
  std::vector<std::uint64_t> L_values{25, 50, 100, 200, 400};
  int trials = 30;
  Vec<5> initial_state = (Vec<5>() << -1.5, -0.5, 0.0, 0.0, 0.0).finished();
};

struct SingleSpec {
  Vec<5> initial_state = (Vec<5>() << -1.5, -0.5, 0.0, 0.0, 0.0).finished();
  std::string planner = "mpt";
};

struct BoundsSpec {
  std::vector<int> K_values{5, 10, 20};
  std::vector<double> eta_values{0.0, 0.01};
  std::vector<double> eps_values{0.0, 0.05};
  double alpha = 0.5;
  double m_lower = 1.0;
  double m_upper = 1.0;
};

struct DisturbanceSpec {
  std::string type = "none";  // none | constant | sinusoidal
  Vec<5> bias = Vec<5>::Zero();
  Vec<5> amplitude = Vec<5>::Zero();
  double omega = 0.1;
  Vec<5> phase = Vec<5>::Zero();
};

struct ControllerSpec {
  bool enabled = false;
  std::vector<double> q_diag;  // sized to the feedback dims; default ones
  std::vector<double> r_diag;  // default ones
  std::vector<int> feedback_dims;
  double jacobian_step = 1e-5;
  bool linearize_at_measured = false;
};

struct ExperimentConfig {
  std::string experiment = "single";  // grid | sweep | single | bounds
  std::vector<std::string> planners{"mpt"};
  std::uint64_t master_seed = 0;
  std::int64_t horizon_steps = 100;
  double gamma = 0.95;
  double tau = 0.5;
  SearchParams search{200, 7, 10, 2.0, 0};
  int cem_iterations = 10;
  double cem_elite_frac = 0.10;
  Vec<2> cem_init_std = Vec<2>(1.0, 0.42);
  int cem_horizon = 0;  // 0 = derive as K+1 to match the tree's lookahead
  // Benchmark default pins D to the initial barrel-goal distance so an
  // untouched barrel scores the reward floor and episode value measures
  // pushing progress alone.
  EnvParams env = [] {
    EnvParams e;
    e.D = 4.0;
    return e;
  }();
  GridSpec grid;
  SweepSpec sweep;
  SingleSpec single;
  BoundsSpec bounds;
  DisturbanceSpec disturbance;
  std::string estimator = "none";  // none | residual
  ControllerSpec controller;
  std::uint64_t config_hash = 0;

  void validate() const {
    static const std::vector<std::string> kinds{"grid", "sweep", "single", "bounds"};
    if (std::find(kinds.begin(), kinds.end(), experiment) == kinds.end()) {
      throw std::invalid_argument("config: unknown experiment '" + experiment + "'");
    }
    if (planners.empty()) throw std::invalid_argument("config: planners empty");
    auto known_planner = [](const std::string& p) {
      return p == "mpt" || p == "uct" || p == "cem" || p == "cem-reuse";
    };
    for (const auto& p : planners) {
      if (!known_planner(p)) {
        throw std::invalid_argument("config: unknown planner '" + p + "'");
      }
    }
    // single.planner bypasses the planners list, so it needs its own check
    if (!known_planner(single.planner)) {
      throw std::invalid_argument("config: unknown planner '" + single.planner + "'");
    }
    if (horizon_steps < 1) throw std::invalid_argument("config: horizon_steps >= 1");
    search.validate();
    env.validate();
    if (grid.resolution < 1 || grid.seeds_per_cell < 1) {
      throw std::invalid_argument("config: grid resolution and seeds_per_cell >= 1");
    }
    if (sweep.trials < 1) throw std::invalid_argument("config: sweep trials >= 1");
    if (disturbance.type != "none" && disturbance.type != "constant" &&
        disturbance.type != "sinusoidal") {
      throw std::invalid_argument("config: unknown disturbance type");
    }
    if (estimator != "none" && estimator != "residual") {
      throw std::invalid_argument("config: unknown estimator type");
    }
  }

  int cem_population(std::uint64_t L) const {
    return std::max<int>(1, static_cast<int>(L / static_cast<std::uint64_t>(cem_iterations)));
  }

  int effective_cem_horizon() const { return cem_horizon > 0 ? cem_horizon : search.K + 1; }
};

namespace bench_detail {

using nlohmann::json;

template <int N>
Vec<N> parse_vec(const json& j, const char* name) {
  if (!j.is_array() || j.size() != static_cast<std::size_t>(N)) {
    throw std::invalid_argument(std::string("config: ") + name + " must be a " +
                                std::to_string(N) + "-element array");
  }
  Vec<N> v;
  for (int i = 0; i < N; ++i) v[i] = j.at(i).get<double>();
  return v;
}

inline void parse_env(const json& j, EnvParams& env) {
  if (j.contains("dt")) env.dt = j["dt"].get<double>();
  if (j.contains("wheelbase")) env.wheelbase = j["wheelbase"].get<double>();
  if (j.contains("barrel_radius")) env.barrel_radius = j["barrel_radius"].get<double>();
  if (j.contains("goal")) {
    const Vec<2> g = parse_vec<2>(j["goal"], "env.goal");
    env.goal = Eigen::Vector2d(g[0], g[1]);
  }
  if (j.contains("D")) env.D = j["D"].get<double>();
  if (j.contains("workspace")) {
    const auto& w = j["workspace"];
    const Vec<2> lo = parse_vec<2>(w.at(0), "env.workspace lo");
    const Vec<2> hi = parse_vec<2>(w.at(1), "env.workspace hi");
    env.workspace = Box<2>(lo, hi);
  }
  if (j.contains("car_geometry")) {
    env.car_geometry.clear();
    for (const auto& v : j["car_geometry"]) {
      env.car_geometry.emplace_back(v.at(0).get<double>(), v.at(1).get<double>());
    }
  }
  if (j.contains("obstacles")) {
    env.obstacles.clear();
    for (const auto& o : j["obstacles"]) {
      DiskObstacle ob;
      ob.center = Eigen::Vector2d(o.at("center").at(0).get<double>(),
                                  o.at("center").at(1).get<double>());
      ob.radius = o.at("radius").get<double>();
      env.obstacles.push_back(ob);
    }
  }
}

inline ExperimentConfig parse_config(const json& j) {
  ExperimentConfig c;
  if (j.contains("experiment")) c.experiment = j["experiment"].get<std::string>();
  if (j.contains("planners")) c.planners = j["planners"].get<std::vector<std::string>>();
  if (j.contains("master_seed")) c.master_seed = j["master_seed"].get<std::uint64_t>();
  if (j.contains("horizon_steps")) c.horizon_steps = j["horizon_steps"].get<std::int64_t>();
  if (j.contains("gamma")) c.gamma = j["gamma"].get<double>();
  if (j.contains("tau")) c.tau = j["tau"].get<double>();
  if (j.contains("search")) {
    const auto& s = j["search"];
    if (s.contains("L")) c.search.L = s["L"].get<std::uint64_t>();
    if (s.contains("b")) c.search.b = s["b"].get<int>();
    if (s.contains("K")) c.search.K = s["K"].get<int>();
    if (s.contains("epsilon_explore")) {
      c.search.epsilon_explore = s["epsilon_explore"].get<double>();
    }
  }
  if (j.contains("cem")) {
    const auto& s = j["cem"];
    if (s.contains("iterations")) c.cem_iterations = s["iterations"].get<int>();
    if (s.contains("elite_frac")) c.cem_elite_frac = s["elite_frac"].get<double>();
    if (s.contains("init_std")) c.cem_init_std = parse_vec<2>(s["init_std"], "cem.init_std");
    if (s.contains("horizon")) c.cem_horizon = s["horizon"].get<int>();
  }
  if (j.contains("env")) parse_env(j["env"], c.env);
  if (j.contains("grid")) {
    const auto& g = j["grid"];
    if (g.contains("x_range")) {
      c.grid.x_min = g["x_range"].at(0).get<double>();
      c.grid.x_max = g["x_range"].at(1).get<double>();
    }
    if (g.contains("y_range")) {
      c.grid.y_min = g["y_range"].at(0).get<double>();
      c.grid.y_max = g["y_range"].at(1).get<double>();
    }
    if (g.contains("resolution")) c.grid.resolution = g["resolution"].get<int>();
    if (g.contains("seeds_per_cell")) {
      c.grid.seeds_per_cell = g["seeds_per_cell"].get<int>();
    }
  }
  if (j.contains("sweep")) {
    const auto& s = j["sweep"];
    if (s.contains("L_values")) {
      c.sweep.L_values = s["L_values"].get<std::vector<std::uint64_t>>();
    }
    if (s.contains("trials")) c.sweep.trials = s["trials"].get<int>();
    if (s.contains("initial_state")) {
      c.sweep.initial_state = parse_vec<5>(s["initial_state"], "sweep.initial_state");
    }
  }
  if (j.contains("single")) {
    const auto& s = j["single"];
    if (s.contains("initial_state")) {
      c.single.initial_state = parse_vec<5>(s["initial_state"], "single.initial_state");
    }
    if (s.contains("planner")) c.single.planner = s["planner"].get<std::string>();
  }
  if (j.contains("bounds")) {
    const auto& b = j["bounds"];
    if (b.contains("K_values")) c.bounds.K_values = b["K_values"].get<std::vector<int>>();
    if (b.contains("eta_values")) {
      c.bounds.eta_values = b["eta_values"].get<std::vector<double>>();
    }
    if (b.contains("eps_values")) {
      c.bounds.eps_values = b["eps_values"].get<std::vector<double>>();
    }
    if (b.contains("alpha")) c.bounds.alpha = b["alpha"].get<double>();
    if (b.contains("m_lower")) c.bounds.m_lower = b["m_lower"].get<double>();
    if (b.contains("m_upper")) c.bounds.m_upper = b["m_upper"].get<double>();
  }
  if (j.contains("disturbance")) {
    const auto& d = j["disturbance"];
    if (d.contains("type")) c.disturbance.type = d["type"].get<std::string>();
    if (d.contains("bias")) c.disturbance.bias = parse_vec<5>(d["bias"], "disturbance.bias");
    if (d.contains("amplitude")) {
      c.disturbance.amplitude = parse_vec<5>(d["amplitude"], "disturbance.amplitude");
    }
    if (d.contains("omega")) c.disturbance.omega = d["omega"].get<double>();
    if (d.contains("phase")) c.disturbance.phase = parse_vec<5>(d["phase"], "disturbance.phase");
  }
  if (j.contains("estimator")) c.estimator = j["estimator"].get<std::string>();
  if (j.contains("controller")) {
    const auto& t = j["controller"];
    if (t.contains("enabled")) c.controller.enabled = t["enabled"].get<bool>();
    if (t.contains("q_diag")) c.controller.q_diag = t["q_diag"].get<std::vector<double>>();
    if (t.contains("r_diag")) c.controller.r_diag = t["r_diag"].get<std::vector<double>>();
    if (t.contains("feedback_dims")) {
      c.controller.feedback_dims = t["feedback_dims"].get<std::vector<int>>();
    }
    if (t.contains("jacobian_step")) {
      c.controller.jacobian_step = t["jacobian_step"].get<double>();
    }
    if (t.contains("linearize_at_measured")) {
      c.controller.linearize_at_measured = t["linearize_at_measured"].get<bool>();
    }
  }
  return c;
}

inline void atomic_write(const std::filesystem::path& path, const std::string& content) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw MptError("cannot write " + tmp.string());
    os << content;
  }
  std::filesystem::rename(tmp, path);
}

inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
  if (xs.empty()) return {0.0, 0.0};
  double mu = 0.0;
  for (double x : xs) mu += x;
  mu /= static_cast<double>(xs.size());
  if (xs.size() < 2) return {mu, 0.0};
  double var = 0.0;
  for (double x : xs) var += (x - mu) * (x - mu);
  var /= static_cast<double>(xs.size() - 1);
  return {mu, std::sqrt(var)};
}

inline void parallel_for(std::size_t n, int workers,
                         const std::function<void(std::size_t)>& fn) {
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  const int count = std::min<std::size_t>(static_cast<std::size_t>(workers), n);
  pool.reserve(count);
  for (int w = 0; w < count; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace bench_detail

// Loads and validates a config file. Seed and experiment overrides fold
// into the config hash, so resumable state is keyed by the effective run.
inline ExperimentConfig load_config(const std::string& path,
                                    std::optional<std::uint64_t> seed_override = {},
                                    std::optional<std::string> experiment_override = {}) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MptError("cannot open config file: " + path);
  std::stringstream buf;
  buf << is.rdbuf();
  const std::string text = buf.str();
  ExperimentConfig cfg = bench_detail::parse_config(nlohmann::json::parse(text));
  if (seed_override) cfg.master_seed = *seed_override;
  if (experiment_override) cfg.experiment = *experiment_override;
  cfg.validate();
  cfg.config_hash = fnv1a64(text) ^ splitmix64(cfg.master_seed) ^
                    fnv1a64(cfg.experiment);
  return cfg;
}

class BenchRunner {
 public:
  BenchRunner(ExperimentConfig cfg, std::string out_dir, int workers = 1)
      : cfg_(std::move(cfg)), out_(std::move(out_dir)), workers_(workers),
        nominal_(cfg_.env) {
    cfg_.validate();
    std::filesystem::create_directories(out_);
    if (cfg_.disturbance.type == "constant") {
      disturbance_ = std::make_unique<ConstantBias<5, 2>>(cfg_.disturbance.bias);
    } else if (cfg_.disturbance.type == "sinusoidal") {
      disturbance_ = std::make_unique<SinusoidalDrift<5, 2>>(
          cfg_.disturbance.amplitude, cfg_.disturbance.omega, cfg_.disturbance.phase);
    }
  }

  void set_progress(std::function<void(const std::string&)> fn) {
    progress_ = std::move(fn);
  }

  // Dispatch on the configured experiment; returns the process exit code
  // (0 clean, 2 when any cell was flagged).
  int run() {
    if (cfg_.experiment == "grid") return run_grid();
    if (cfg_.experiment == "sweep") return run_sweep();
    if (cfg_.experiment == "single") return run_single();
    return run_bounds();
  }

  int run_grid() {
    const GridSpec& g = cfg_.grid;
    std::vector<std::pair<double, double>> cells;
    for (int iy = 0; iy < g.resolution; ++iy) {
      for (int ix = 0; ix < g.resolution; ++ix) {
        cells.emplace_back(lerp(g.x_min, g.x_max, ix, g.resolution),
                           lerp(g.y_min, g.y_max, iy, g.resolution));
      }
    }

    struct Row {
      std::vector<double> values;
      bool flagged = false;
    };
    const std::size_t n_jobs = cfg_.planners.size() * cells.size();
    std::vector<Row> rows(n_jobs);
    const std::filesystem::path cell_dir = cell_directory();
    std::filesystem::create_directories(cell_dir);

    bench_detail::parallel_for(n_jobs, workers_, [&](std::size_t job) {
      const std::size_t pi = job / cells.size();
      const std::size_t ci = job % cells.size();
      const std::string& planner = cfg_.planners[pi];
      const auto cell_path =
          cell_dir / (planner + "-" + std::to_string(ci) + ".json");
      Row& row = rows[job];
      if (load_cell(cell_path, g.seeds_per_cell, row.values, row.flagged)) {
        report(planner + " cell " + std::to_string(ci) + " (cached)");
        return;
      }
      Vec<5> x0 = Vec<5>::Zero();
      x0[kCarX] = cells[ci].first;
      x0[kCarY] = cells[ci].second;
      for (int s = 0; s < g.seeds_per_cell; ++s) {
        const std::uint64_t stream =
            fnv1a64(planner + "/grid/" + std::to_string(ci) + "/" + std::to_string(s));
        run_one(planner, x0, derive_seed(cfg_.master_seed, stream), cfg_.search.L,
                row.values, row.flagged);
      }
      save_cell(cell_path, row.values, row.flagged);
      report(planner + " cell " + std::to_string(ci) + "/" +
             std::to_string(cells.size()));
    });

    std::string csv = "planner,x,y,mean_value,std,seeds\n";
    bool any_flagged = false;
    std::string summary = "{\"experiment\":\"grid\",\"config_hash\":\"" + hash_hex() +
                          "\",\"planner_means\":{";
    for (std::size_t pi = 0; pi < cfg_.planners.size(); ++pi) {
      double total = 0.0;
      for (std::size_t ci = 0; ci < cells.size(); ++ci) {
        const Row& row = rows[pi * cells.size() + ci];
        any_flagged = any_flagged || row.flagged;
        const auto [mu, sd] = bench_detail::mean_std(row.values);
        total += mu;
        csv += cfg_.planners[pi] + "," + fmt_double(cells[ci].first) + "," +
               fmt_double(cells[ci].second) + "," + fmt_double(mu) + "," +
               fmt_double(sd) + "," + std::to_string(row.values.size()) + "\n";
      }
      summary += (pi ? "," : "") + std::string("\"") + cfg_.planners[pi] +
                 "\":" + fmt_double(total / static_cast<double>(cells.size()));
    }
    summary += "},\"flagged\":" + std::string(any_flagged ? "true" : "false") + "}\n";
    bench_detail::atomic_write(out_ / "grid_results.csv", csv);
    bench_detail::atomic_write(out_ / "summary.json", summary);
    return any_flagged ? 2 : 0;
  }

  int run_sweep() {
    const SweepSpec& sw = cfg_.sweep;
    struct Row {
      std::vector<double> values;
      bool flagged = false;
    };
    const std::size_t n_jobs = cfg_.planners.size() * sw.L_values.size();
    std::vector<Row> rows(n_jobs);
    const std::filesystem::path cell_dir = cell_directory();
    std::filesystem::create_directories(cell_dir);

    bench_detail::parallel_for(n_jobs, workers_, [&](std::size_t job) {
      const std::size_t pi = job / sw.L_values.size();
      const std::size_t li = job % sw.L_values.size();
      const std::string& planner = cfg_.planners[pi];
      const std::uint64_t L = sw.L_values[li];
      const auto cell_path =
          cell_dir / (planner + "-L" + std::to_string(L) + ".json");
      Row& row = rows[job];
      if (load_cell(cell_path, sw.trials, row.values, row.flagged)) {
        report(planner + " L=" + std::to_string(L) + " (cached)");
        return;
      }
      for (int t = 0; t < sw.trials; ++t) {
        const std::uint64_t stream =
            fnv1a64(planner + "/sweep/" + std::to_string(L) + "/" + std::to_string(t));
        run_one(planner, sw.initial_state, derive_seed(cfg_.master_seed, stream), L,
                row.values, row.flagged);
      }
      save_cell(cell_path, row.values, row.flagged);
      report(planner + " L=" + std::to_string(L) + " done");
    });

    std::string csv = "planner,L,mean_value,std,trials\n";
    bool any_flagged = false;
    for (std::size_t pi = 0; pi < cfg_.planners.size(); ++pi) {
      for (std::size_t li = 0; li < sw.L_values.size(); ++li) {
        const Row& row = rows[pi * sw.L_values.size() + li];
        any_flagged = any_flagged || row.flagged;
        const auto [mu, sd] = bench_detail::mean_std(row.values);
        csv += cfg_.planners[pi] + "," + std::to_string(sw.L_values[li]) + "," +
               fmt_double(mu) + "," + fmt_double(sd) + "," +
               std::to_string(row.values.size()) + "\n";
      }
    }
    bench_detail::atomic_write(out_ / "sweep_results.csv", csv);
    bench_detail::atomic_write(
        out_ / "summary.json",
        "{\"experiment\":\"sweep\",\"config_hash\":\"" + hash_hex() +
            "\",\"flagged\":" + (any_flagged ? "true" : "false") + "}\n");
    return any_flagged ? 2 : 0;
  }

  int run_single() {
    const std::uint64_t seed =
        derive_seed(cfg_.master_seed, fnv1a64(cfg_.single.planner + "/single/0/0"));
    EpisodeRecord<5, 2> rec =
        execute_episode(cfg_.single.planner, cfg_.single.initial_state, seed,
                        cfg_.search.L);
    std::ostringstream ep, traj;
    write_episode_csv(ep, rec);
    write_trajectory_csv(traj, rec);
    bench_detail::atomic_write(out_ / "episode.csv", ep.str());
    bench_detail::atomic_write(out_ / "trajectory.csv", traj.str());
    bench_detail::atomic_write(out_ / "summary.json",
                               episode_summary_json(rec) + "\n");
    return rec.aborted ? 2 : 0;
  }

  int run_bounds() {
    const BoundsSpec& b = cfg_.bounds;
    std::string csv = "K,eta,eps,alpha,bound\n";
    for (int K : b.K_values) {
      for (double eta : b.eta_values) {
        for (double eps : b.eps_values) {
          const double bound =
              steady_state_error_bound(K, eta, eps, b.alpha, b.m_lower, b.m_upper);
          csv += std::to_string(K) + "," + fmt_double(eta) + "," + fmt_double(eps) +
                 "," + fmt_double(b.alpha) + "," + fmt_double(bound) + "\n";
        }
      }
    }
    bench_detail::atomic_write(out_ / "bounds.csv", csv);
    return 0;
  }

  // One fully wired episode; exposed for the test suites.
  EpisodeRecord<5, 2> execute_episode(const std::string& planner_type, const Vec<5>& x0,
                                      std::uint64_t seed, std::uint64_t L) const {
    std::unique_ptr<DisturbanceEstimator<5, 2>> est;
    if (cfg_.estimator == "residual") {
      est = std::make_unique<ResidualEstimator<5, 2>>(kCarTheta);
    }
    std::optional<EstimatedDynamics<5, 2>> est_dyn;
    const DynamicsModel<5, 2>* plan_dyn = &nominal_;
    if (est) {
      est_dyn.emplace(nominal_, *est);
      plan_dyn = &*est_dyn;
    }
    const MdpSpec<5, 2> mdp = make_push_mdp(*plan_dyn, cfg_.env, cfg_.gamma);

    std::unique_ptr<RecedingPlanner<5, 2>> planner;
    if (planner_type == "mpt" || planner_type == "uct") {
      SearchParams sp = cfg_.search;
      sp.L = L;
      sp.rng_seed = seed;
      planner = std::make_unique<MptPlanner<5, 2>>(sp, cfg_.tau, planner_type == "mpt");
    } else {
      CemParams<2> cp;
      cp.population = cfg_.cem_population(L);
      cp.iterations = cfg_.cem_iterations;
      cp.elite_frac = cfg_.cem_elite_frac;
      cp.init_std = cfg_.cem_init_std;
      cp.horizon = cfg_.effective_cem_horizon();
      planner = std::make_unique<CemPlanner<5, 2>>(cp, planner_type == "cem-reuse", seed);
    }

    std::optional<ContractionController<5, 2>> ctl;
    if (cfg_.controller.enabled) {
      ctl.emplace(*plan_dyn, controller_params(), push_action_bounds());
    }
    DisturbedEnv<5, 2> env(nominal_, disturbance_.get(), kCarTheta);
    RunnerOptions opt;
    opt.horizon_steps = cfg_.horizon_steps;
    opt.config_hash = cfg_.config_hash;
    opt.rng_seed = seed;
    return run_episode<5, 2>(x0, mdp, env, *planner, ctl ? &*ctl : nullptr, est.get(),
                             opt);
  }

  std::uint64_t expected_rollouts_per_step(const std::string& planner_type,
                                           std::uint64_t L) const {
    if (planner_type == "mpt" || planner_type == "uct") return L;
    return static_cast<std::uint64_t>(cfg_.cem_population(L)) *
           static_cast<std::uint64_t>(cfg_.cem_iterations);
  }

  const ExperimentConfig& config() const { return cfg_; }

 private:
  static double lerp(double lo, double hi, int i, int n) {
    if (n <= 1) return 0.5 * (lo + hi);
    return lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  }

  std::string hash_hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(cfg_.config_hash));
    return buf;
  }

  std::filesystem::path cell_directory() const { return out_ / ("cells-" + hash_hex()); }

  ControllerParams controller_params() const {
    ControllerParams p;
    p.feedback_dims = cfg_.controller.feedback_dims;
    if (p.feedback_dims.empty()) p.feedback_dims = {kCarX, kCarY, kCarTheta};
    const int nd = static_cast<int>(p.feedback_dims.size());
    VecX q = VecX::Ones(nd);
    VecX r = VecX::Ones(2);
    if (!cfg_.controller.q_diag.empty()) {
      if (static_cast<int>(cfg_.controller.q_diag.size()) != nd) {
        throw std::invalid_argument("config: controller.q_diag size mismatch");
      }
      for (int i = 0; i < nd; ++i) q[i] = cfg_.controller.q_diag[i];
    }
    if (!cfg_.controller.r_diag.empty()) {
      if (cfg_.controller.r_diag.size() != 2) {
        throw std::invalid_argument("config: controller.r_diag size mismatch");
      }
      for (int i = 0; i < 2; ++i) r[i] = cfg_.controller.r_diag[i];
    }
    p.Q = q.asDiagonal();
    p.R_cost = r.asDiagonal();
    p.jacobian_step = cfg_.controller.jacobian_step;
    p.linearize_at_measured = cfg_.controller.linearize_at_measured;
    p.enabled = true;
    return p;
  }

  void report(const std::string& msg) const {
    if (!progress_) return;
    std::lock_guard<std::mutex> lock(progress_mutex_);
    progress_(msg);
  }

  // Runs one episode, appends its realized value, and flags the row on any
  // error or budget-parity violation.
  void run_one(const std::string& planner, const Vec<5>& x0, std::uint64_t seed,
               std::uint64_t L, std::vector<double>& values, bool& flagged) const {
    try {
      const EpisodeRecord<5, 2> rec = execute_episode(planner, x0, seed, L);
      if (rec.aborted) {
        flagged = true;
        values.push_back(realized_value(rec));
        return;
      }
      const std::uint64_t expected =
          expected_rollouts_per_step(planner, L) * rec.steps.size();
      if (rec.planner_rollouts != expected) flagged = true;  // parity broken
      values.push_back(realized_value(rec));
    } catch (const std::exception&) {
      flagged = true;
      values.push_back(0.0);
    }
  }

  bool load_cell(const std::filesystem::path& path, int expected_count,
                 std::vector<double>& values, bool& flagged) const {
    std::ifstream is(path, std::ios::binary);
    if (!is) return false;
    try {
      const nlohmann::json j = nlohmann::json::parse(is);
      if (j.at("config_hash").get<std::string>() != hash_hex()) return false;
      std::vector<double> vals = j.at("values").get<std::vector<double>>();
      if (static_cast<int>(vals.size()) != expected_count) return false;
      values = std::move(vals);
      flagged = j.at("flagged").get<bool>();
      return true;
    } catch (const std::exception&) {
      return false;
    }
  }

  void save_cell(const std::filesystem::path& path, const std::vector<double>& values,
                 bool flagged) const {
    std::string j = "{\"config_hash\":\"" + hash_hex() + "\",\"values\":[";
    for (std::size_t i = 0; i < values.size(); ++i) {
      j += (i ? "," : "") + fmt_double(values[i]);
    }
    j += "],\"flagged\":" + std::string(flagged ? "true" : "false") + "}\n";
    bench_detail::atomic_write(path, j);
  }

  ExperimentConfig cfg_;
  std::filesystem::path out_;
  int workers_;
  PushCarDynamics nominal_;
  std::unique_ptr<DisturbanceModel<5, 2>> disturbance_;
  std::function<void(const std::string&)> progress_;
  mutable std::mutex progress_mutex_;
};

}  // namespace mpt
