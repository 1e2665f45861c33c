#pragma once

// Decision-problem abstraction: state/action spaces, dynamics and
// disturbance-estimator interfaces, reward and discounting helpers.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "mpt/common.hpp"

namespace mpt {

template <int NX, int NU>
struct DynamicsModel {
  virtual ~DynamicsModel() = default;

  // Deterministic one-step transition.
  virtual Vec<NX> step(const Vec<NX>& x, const Vec<NU>& u) const = 0;

  // Analytic Jacobians (A = dF/dx, B = dF/du) when the model has them;
  // nullopt means the caller falls back to finite differences.
  virtual std::optional<std::pair<Mat<NX, NX>, Mat<NX, NU>>> jacobians(
      const Vec<NX>& /*x*/, const Vec<NU>& /*u*/) const {
    return std::nullopt;
  }

  // True when stepping from (x, u) activates a contact constraint. Used by
  // the finite-difference Jacobian to avoid stencils that straddle a
  // contact event.
  virtual bool contact_flag(const Vec<NX>& /*x*/, const Vec<NU>& /*u*/) const {
    return false;
  }
};

// Online estimate d_hat of the unknown disturbance. `update` is called once
// per physical step by the runner (single writer); `estimate` may be called
// concurrently from rollouts.
template <int NX, int NU>
struct DisturbanceEstimator {
  virtual ~DisturbanceEstimator() = default;

  virtual void update(const Vec<NX>& /*observed*/, const Vec<NX>& /*predicted*/,
                      const Vec<NU>& /*action*/, int /*time*/) {}

  virtual Vec<NX> estimate(const Vec<NX>& x, const Vec<NU>& u) const = 0;
};

template <int NX, int NU>
struct ZeroEstimator final : DisturbanceEstimator<NX, NU> {
  Vec<NX> estimate(const Vec<NX>&, const Vec<NU>&) const override {
    return Vec<NX>::Zero();
  }
};

// F_hat = F_nom + d_hat. The estimator is referenced, not copied, so the
// planner sees estimate updates without re-wiring.
template <int NX, int NU>
class EstimatedDynamics final : public DynamicsModel<NX, NU> {
 public:
  EstimatedDynamics(const DynamicsModel<NX, NU>& nominal,
                    const DisturbanceEstimator<NX, NU>& estimator)
      : nominal_(&nominal), estimator_(&estimator) {}

  Vec<NX> step(const Vec<NX>& x, const Vec<NU>& u) const override {
    return nominal_->step(x, u) + estimator_->estimate(x, u);
  }

  bool contact_flag(const Vec<NX>& x, const Vec<NU>& u) const override {
    return nominal_->contact_flag(x, u);
  }

  const DynamicsModel<NX, NU>& nominal() const { return *nominal_; }

 private:
  const DynamicsModel<NX, NU>* nominal_;
  const DisturbanceEstimator<NX, NU>* estimator_;
};

template <int NU>
struct ActionSet {
  enum class Mode { kDiscrete, kContinuousBox };

  Mode mode = Mode::kContinuousBox;
  std::vector<Vec<NU>> actions;  // discrete mode only
  Box<NU> bounds;

  static ActionSet discrete(std::vector<Vec<NU>> actions, const Box<NU>& bounds) {
    for (std::size_t i = 0; i < actions.size(); ++i) {
      if (!bounds.contains(actions[i])) {
        throw std::invalid_argument("ActionSet: action outside action_bounds");
      }
      for (std::size_t j = 0; j < i; ++j) {
        if ((actions[i] - actions[j]).norm() == 0.0) {
          throw std::invalid_argument("ActionSet: duplicate action");
        }
      }
    }
    ActionSet s;
    s.mode = Mode::kDiscrete;
    s.actions = std::move(actions);
    s.bounds = bounds;
    return s;
  }

  static ActionSet continuous(const Box<NU>& bounds) {
    ActionSet s;
    s.mode = Mode::kContinuousBox;
    s.bounds = bounds;
    return s;
  }

  int size() const { return static_cast<int>(actions.size()); }
};

// The decision problem tuple: bounds, discount, dynamics, reward, terminal
// value estimate, and the action set used by tree growth. Immutable after
// construction; safe to share across rollout workers.
template <int NX, int NU>
struct MdpSpec {
  Box<NX> state_bounds;
  Box<NU> action_bounds;
  double gamma = 0.0;
  const DynamicsModel<NX, NU>* dynamics = nullptr;
  std::function<double(const Vec<NX>&, const Vec<NU>&)> reward;
  std::function<double(const Vec<NX>&)> value_estimate;  // default: 0
  // Realizes the X constraint; states failing it are terminal with reward 0.
  std::function<bool(const Vec<NX>&)> valid_state;
  ActionSet<NU> action_set;

  void validate() const {
    if (!(gamma >= 0.0 && gamma < 1.0)) {
      throw std::invalid_argument("MdpSpec: gamma must satisfy 0 <= gamma < 1");
    }
    if (dynamics == nullptr) throw std::invalid_argument("MdpSpec: null dynamics");
    if (!reward) throw std::invalid_argument("MdpSpec: null reward");
  }

  double terminal_value(const Vec<NX>& x) const {
    return value_estimate ? value_estimate(x) : 0.0;
  }

  bool state_valid(const Vec<NX>& x) const {
    if (!finite(x)) return false;
    if (valid_state) return valid_state(x);
    return state_bounds.contains(x);
  }
};

// Distance-to-goal reward of the push task: 0.1 + 0.9 (1 - dist/D),
// clamped to [0, 1] once the object exits distance D.
struct RewardParams {
  Eigen::Vector2d goal = Eigen::Vector2d::Zero();
  double dist_norm = 1.0;  // D > 0
  int object_ix = 3;       // indices of the object position in the state
  int object_iy = 4;
};

template <int NX, int NU>
double reward_eval(const Vec<NX>& state, const Vec<NU>& /*action*/,
                   const RewardParams& p) {
  if (!finite(state)) throw std::invalid_argument("reward_eval: non-finite state");
  if (!(p.dist_norm > 0.0)) throw std::invalid_argument("reward_eval: D must be > 0");
  const double dx = state[p.object_ix] - p.goal.x();
  const double dy = state[p.object_iy] - p.goal.y();
  const double dist = std::sqrt(dx * dx + dy * dy);
  const double r = 0.1 + 0.9 * (1.0 - dist / p.dist_norm);
  return std::clamp(r, 0.0, 1.0);
}

// sum_k gamma^{k-1} r_k
inline double discounted_return(std::span<const double> rewards, double gamma) {
  if (!(gamma >= 0.0 && gamma < 1.0)) {
    throw std::invalid_argument("discounted_return: gamma must satisfy 0 <= gamma < 1");
  }
  double acc = 0.0;
  for (std::size_t i = rewards.size(); i-- > 0;) {
    acc = gamma * acc + rewards[i];
  }
  return acc;
}

// Uniform draw over the not-yet-tried discrete actions ("sampling uniformly
// without replacement during tree growth").
template <int NU>
int sample_action_index_unvisited(const ActionSet<NU>& set,
                                  const std::vector<bool>& visited, Rng& rng) {
  if (set.mode != ActionSet<NU>::Mode::kDiscrete) {
    throw std::invalid_argument("sample_action_unvisited: discrete mode required");
  }
  if (visited.size() != set.actions.size()) {
    throw std::invalid_argument("sample_action_unvisited: visited mask size mismatch");
  }
  int unvisited = 0;
  for (bool v : visited) unvisited += v ? 0 : 1;
  if (unvisited == 0) {
    throw MptError("sample_action_unvisited: all actions visited");
  }
  std::uniform_int_distribution<int> pick(0, unvisited - 1);
  int target = pick(rng);
  for (std::size_t i = 0; i < visited.size(); ++i) {
    if (!visited[i] && target-- == 0) return static_cast<int>(i);
  }
  throw MptError("sample_action_unvisited: unreachable");
}

template <int NU>
Vec<NU> sample_action_unvisited(const ActionSet<NU>& set,
                                const std::vector<bool>& visited, Rng& rng) {
  return set.actions[sample_action_index_unvisited(set, visited, rng)];
}

}  // namespace mpt
