#pragma once

// Receding-horizon episode loop: plan on the carried tree, track the
// desired pair with the contraction controller, step the disturbed world,
// update the disturbance estimate, trim the tree to the chosen child, and
// reset it when the root has drifted past tau.

#include <cstdint>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mpt/baselines.hpp"
#include "mpt/common.hpp"
#include "mpt/control.hpp"
#include "mpt/mdp.hpp"
#include "mpt/pushcar.hpp"
#include "mpt/tree.hpp"

namespace mpt {

template <int NX, int NU>
struct StepRecord {
  std::int64_t k = 0;
  Vec<NX> x = Vec<NX>::Zero();          // measured state at step start
  Vec<NX> x_desired = Vec<NX>::Zero();  // planner's root state
  Vec<NU> u_desired = Vec<NU>::Zero();
  Vec<NU> u = Vec<NU>::Zero();          // executed action
  double reward = 0.0;
  std::uint64_t root_N = 0;
  std::uint64_t reused_N = 0;
  bool reset_flag = false;
  bool contact = false;
  double tracking_error = 0.0;  // ||x - x_desired||
};

template <int NX, int NU>
struct EpisodeRecord {
  std::vector<StepRecord<NX, NU>> steps;
  double cumulative_value = 0.0;
  std::uint64_t config_hash = 0;
  std::uint64_t rng_seed = 0;
  std::uint64_t resets = 0;
  std::uint64_t planner_rollouts = 0;
  bool aborted = false;      // planner starvation
  bool terminated = false;   // real state left the valid set
  std::string abort_reason;
};

template <int NX, int NU>
double realized_value(const EpisodeRecord<NX, NU>& rec) {
  double sum = 0.0;
  for (const auto& s : rec.steps) sum += s.reward;
  return sum;
}

// True world: nominal dynamics plus an additive disturbance model. The
// wrapped angle index (if any) keeps the measured state on its chart after
// the disturbance is added.
template <int NX, int NU>
class DisturbedEnv {
 public:
  DisturbedEnv(const DynamicsModel<NX, NU>& nominal,
               const DisturbanceModel<NX, NU>* disturbance = nullptr,
               int angle_wrap_index = -1)
      : nominal_(&nominal), disturbance_(disturbance), wrap_ix_(angle_wrap_index) {}

  Vec<NX> step(const Vec<NX>& x, const Vec<NU>& u, std::int64_t k,
               Vec<NX>* nominal_out = nullptr) const {
    const Vec<NX> nom = nominal_->step(x, u);
    if (nominal_out) *nominal_out = nom;
    Vec<NX> next = disturbance_ ? add_disturbance(nom, *disturbance_, x, u, k) : nom;
    if (wrap_ix_ >= 0) next[wrap_ix_] = wrap_angle(next[wrap_ix_]);
    return next;
  }

  const DynamicsModel<NX, NU>& nominal() const { return *nominal_; }

 private:
  const DynamicsModel<NX, NU>* nominal_;
  const DisturbanceModel<NX, NU>* disturbance_;
  int wrap_ix_;
};

// Remembers the latest one-step model residual and predicts it forward:
// d_hat_{k+1} = x_{k+1} - F_nom(x_k, u_{k+1}). For a disturbance with drift
// bound eta this estimator is eta-accurate.
template <int NX, int NU>
class ResidualEstimator final : public DisturbanceEstimator<NX, NU> {
 public:
  explicit ResidualEstimator(int angle_wrap_index = -1) : wrap_ix_(angle_wrap_index) {}

  void update(const Vec<NX>& observed, const Vec<NX>& predicted, const Vec<NU>&,
              int) override {
    d_hat_ = observed - predicted;
    if (wrap_ix_ >= 0) {
      d_hat_[wrap_ix_] = wrap_angle(observed[wrap_ix_] - predicted[wrap_ix_]);
    }
  }

  Vec<NX> estimate(const Vec<NX>&, const Vec<NU>&) const override { return d_hat_; }

 private:
  Vec<NX> d_hat_ = Vec<NX>::Zero();
  int wrap_ix_;
};

template <int NX, int NU>
struct PlanOutput {
  Vec<NX> x_desired = Vec<NX>::Zero();
  Vec<NU> u_desired = Vec<NU>::Zero();
  double value = 0.0;
  std::uint64_t root_N = 0;
  std::uint64_t reused_N = 0;
  std::uint64_t rollouts = 0;
};

template <int NX, int NU>
struct RecedingPlanner {
  virtual ~RecedingPlanner() = default;
  // Must be called once per episode before the first plan().
  virtual void start(const Vec<NX>& x0) = 0;
  virtual PlanOutput<NX, NU> plan(const MdpSpec<NX, NU>& mdp, const Vec<NX>& x) = 0;
  // Post-step bookkeeping with the measured next state; returns true when
  // a tree reset fired.
  virtual bool observe(const Vec<NX>& x_next, const MdpSpec<NX, NU>& mdp) = 0;
  virtual const char* name() const = 0;
};

// Tree planner. With reuse on this is the full receding-horizon method:
// trim to the chosen child, keep its statistics, reset past tau. With
// reuse off every step rebuilds a fresh root at the measured state.
template <int NX, int NU>
class MptPlanner final : public RecedingPlanner<NX, NU> {
 public:
  MptPlanner(const SearchParams& sp, double tau, bool reuse)
      : sp_(sp), tau_(tau), reuse_(reuse), rng_(sp.rng_seed) {
    sp_.validate();
    if (!(tau > 0.0)) throw std::invalid_argument("MptPlanner: tau > 0 required");
  }

  void start(const Vec<NX>& x0) override {
    tree_.emplace(x0, sp_);
    last_best_ = SearchTree<NX, NU>::kNull;
  }

  PlanOutput<NX, NU> plan(const MdpSpec<NX, NU>& mdp, const Vec<NX>&) override {
    if (!tree_) throw std::logic_error("MptPlanner: plan() before start()");
    PlanOutput<NX, NU> out;
    out.reused_N = tree_->node(tree_->root()).N;
    tree_->uct_search(mdp, sp_.L, rng_);
    const auto [u, id] = tree_->best_child();
    last_best_ = id;
    out.x_desired = tree_->node(tree_->root()).x;
    out.u_desired = u;
    out.value = tree_->node(id).V / static_cast<double>(tree_->node(id).N);
    out.root_N = tree_->node(tree_->root()).N;
    out.rollouts = sp_.L;
    return out;
  }

  bool observe(const Vec<NX>& x_next, const MdpSpec<NX, NU>&) override {
    if (!tree_) throw std::logic_error("MptPlanner: observe() before start()");
    if (!reuse_) {
      tree_->reset(x_next);
      return false;
    }
    tree_->re_root(last_best_);
    if (reset_check(tree_->node(tree_->root()).x, x_next, tau_)) {
      tree_->reset(x_next);
      return true;
    }
    return false;
  }

  const char* name() const override { return reuse_ ? "mpt" : "uct"; }

  const SearchTree<NX, NU>& tree() const { return *tree_; }

 private:
  SearchParams sp_;
  double tau_;
  bool reuse_;
  Rng rng_;
  std::optional<SearchTree<NX, NU>> tree_;
  std::uint32_t last_best_ = SearchTree<NX, NU>::kNull;
};

// Cross-entropy planner, optionally hotstarting from the previous solution.
// It always plans from the measured state, so the desired pair is exactly
// (x, first action) and the feedback term vanishes.
template <int NX, int NU>
class CemPlanner final : public RecedingPlanner<NX, NU> {
 public:
  CemPlanner(const CemParams<NU>& cp, bool reuse, std::uint64_t seed)
      : cp_(cp), reuse_(reuse), rng_(seed) {
    cp_.validate();
  }

  void start(const Vec<NX>&) override { prev_.clear(); }

  PlanOutput<NX, NU> plan(const MdpSpec<NX, NU>& mdp, const Vec<NX>& x) override {
    CemResult<NU> r = (reuse_ && !prev_.empty())
                          ? cem_reuse_plan(x, mdp, cp_, prev_, rng_)
                          : cem_plan(x, mdp, cp_, rng_);
    prev_ = r.sequence;
    floor_warnings_ += r.floor_warnings;
    PlanOutput<NX, NU> out;
    out.x_desired = x;
    out.u_desired = r.sequence.front();
    out.value = r.value;
    out.rollouts = r.rollouts;
    return out;
  }

  bool observe(const Vec<NX>&, const MdpSpec<NX, NU>&) override { return false; }

  const char* name() const override { return reuse_ ? "cem-reuse" : "cem"; }

  std::uint64_t floor_warnings() const { return floor_warnings_; }

 private:
  CemParams<NU> cp_;
  bool reuse_;
  Rng rng_;
  std::vector<Vec<NU>> prev_;
  std::uint64_t floor_warnings_ = 0;
};

struct RunnerOptions {
  std::int64_t horizon_steps = 1;
  std::uint64_t config_hash = 0;
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (horizon_steps < 1) {
      throw std::invalid_argument("RunnerOptions: horizon_steps >= 1 required");
    }
  }
};

// One full episode. Per loop iteration, in order: plan (L rollouts),
// control, real-world step, estimator update, trim/reset. A starved
// planner aborts with a partial record; a real state outside the valid set
// ends the episode (that step scores 0).
template <int NX, int NU>
EpisodeRecord<NX, NU> run_episode(const Vec<NX>& x0, const MdpSpec<NX, NU>& mdp,
                                  const DisturbedEnv<NX, NU>& env,
                                  RecedingPlanner<NX, NU>& planner,
                                  ContractionController<NX, NU>* controller,
                                  DisturbanceEstimator<NX, NU>* estimator,
                                  const RunnerOptions& opt) {
  opt.validate();
  EpisodeRecord<NX, NU> rec;
  rec.config_hash = opt.config_hash;
  rec.rng_seed = opt.rng_seed;
  planner.start(x0);
  Vec<NX> x = x0;

  for (std::int64_t k = 0; k < opt.horizon_steps; ++k) {
    StepRecord<NX, NU> sr;
    sr.k = k;
    sr.x = x;

    PlanOutput<NX, NU> plan;
    try {
      plan = planner.plan(mdp, x);
    } catch (const StarvationError& e) {
      rec.aborted = true;
      rec.abort_reason = e.what();
      break;
    }
    rec.planner_rollouts += plan.rollouts;
    sr.x_desired = plan.x_desired;
    sr.u_desired = plan.u_desired;
    sr.root_N = plan.root_N;
    sr.reused_N = plan.reused_N;
    sr.tracking_error = (x - plan.x_desired).norm();

    const Vec<NU> u = controller
                          ? controller->compute(x, plan.x_desired, plan.u_desired)
                          : mdp.action_bounds.clamp(plan.u_desired);
    sr.u = u;
    sr.contact = env.nominal().contact_flag(x, u);

    Vec<NX> predicted;
    const Vec<NX> x_next = env.step(x, u, k, &predicted);
    const bool valid = finite(x_next) && mdp.state_valid(x_next);
    sr.reward = valid ? mdp.reward(x_next, u) : 0.0;
    rec.cumulative_value += sr.reward;

    if (estimator) estimator->update(x_next, predicted, u, static_cast<int>(k));

    if (!valid) {
      rec.steps.push_back(sr);
      rec.terminated = true;
      break;
    }
    sr.reset_flag = planner.observe(x_next, mdp);
    if (sr.reset_flag) ++rec.resets;
    rec.steps.push_back(sr);
    x = x_next;
  }
  return rec;
}

template <int NX, int NU>
void write_episode_csv(std::ostream& os, const EpisodeRecord<NX, NU>& rec) {
  os << "k";
  for (int i = 0; i < NX; ++i) os << ",x" << i;
  for (int i = 0; i < NX; ++i) os << ",xd" << i;
  for (int i = 0; i < NU; ++i) os << ",ud" << i;
  for (int i = 0; i < NU; ++i) os << ",u" << i;
  os << ",reward,root_N,reused_N,reset,contact,tracking_error\n";
  for (const auto& s : rec.steps) {
    os << s.k;
    for (int i = 0; i < NX; ++i) os << ',' << fmt_double(s.x[i]);
    for (int i = 0; i < NX; ++i) os << ',' << fmt_double(s.x_desired[i]);
    for (int i = 0; i < NU; ++i) os << ',' << fmt_double(s.u_desired[i]);
    for (int i = 0; i < NU; ++i) os << ',' << fmt_double(s.u[i]);
    os << ',' << fmt_double(s.reward) << ',' << s.root_N << ',' << s.reused_N << ','
       << (s.reset_flag ? 1 : 0) << ',' << (s.contact ? 1 : 0) << ','
       << fmt_double(s.tracking_error) << '\n';
  }
}

// Push-task trajectory log with the named state/action columns.
inline void write_trajectory_csv(std::ostream& os, const EpisodeRecord<5, 2>& rec) {
  os << "k,x,y,theta,x_o,y_o,V,delta,reward,contact_flag\n";
  for (const auto& s : rec.steps) {
    os << s.k;
    for (int i = 0; i < 5; ++i) os << ',' << fmt_double(s.x[i]);
    os << ',' << fmt_double(s.u[0]) << ',' << fmt_double(s.u[1]) << ','
       << fmt_double(s.reward) << ',' << (s.contact ? 1 : 0) << '\n';
  }
}

template <int NX, int NU>
std::string episode_summary_json(const EpisodeRecord<NX, NU>& rec) {
  double reused = 0.0;
  for (const auto& s : rec.steps) reused += static_cast<double>(s.reused_N);
  if (!rec.steps.empty()) reused /= static_cast<double>(rec.steps.size());
  std::string j = "{";
  j += "\"cumulative_value\":" + fmt_double(rec.cumulative_value);
  j += ",\"steps\":" + std::to_string(rec.steps.size());
  j += ",\"resets\":" + std::to_string(rec.resets);
  j += ",\"mean_reused_N\":" + fmt_double(reused);
  j += ",\"planner_rollouts\":" + std::to_string(rec.planner_rollouts);
  j += ",\"aborted\":" + std::string(rec.aborted ? "true" : "false");
  j += ",\"terminated\":" + std::string(rec.terminated ? "true" : "false");
  j += "}";
  return j;
}

}  // namespace mpt
