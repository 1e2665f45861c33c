#pragma once

// Planar push-manipulation environment: kinematic bicycle car, quasi-static
// disk barrel with non-penetration contact, disk obstacles, workspace box.
// The contact model is a minimum-displacement projection of the barrel out
// of the car's dilated polygon, which solves the complementarity problem
// exactly for this single disk-polygon pair.

#include <cmath>
#include <numbers>
#include <vector>

#include "mpt/common.hpp"
#include "mpt/mdp.hpp"

namespace mpt {

struct DiskObstacle {
  Eigen::Vector2d center = Eigen::Vector2d::Zero();
  double radius = 0.0;
};

struct EnvParams {
  double dt = 0.2;
  double wheelbase = 0.3;
  // Convex, counterclockwise, body frame centered on the kinematic
  // reference point. Default: 0.4 x 0.3 box with a wedge nose.
  std::vector<Eigen::Vector2d> car_geometry = {
      {-0.2, -0.15}, {0.12, -0.15}, {0.2, -0.06},
      {0.2, 0.06},   {0.12, 0.15},  {-0.2, 0.15}};
  double barrel_radius = 0.15;
  std::vector<DiskObstacle> obstacles;
  Box<2> workspace{Eigen::Vector2d(-3.0, -4.0), Eigen::Vector2d(6.0, 4.0)};
  Eigen::Vector2d goal = Eigen::Vector2d(4.0, 0.0);
  // Reward normalizer. The default spans the workspace diagonal so the
  // reward stays positive wherever the barrel can sit; benchmark configs
  // tighten it to the initial barrel-goal distance so episode value
  // measures pushing progress instead of a standing baseline.
  double D = (workspace.hi - workspace.lo).norm();
  double contact_tol = 1e-6;

  void validate() const {
    if (!(dt > 0.0)) throw std::invalid_argument("EnvParams: dt > 0 required");
    if (!(wheelbase > 0.0)) throw std::invalid_argument("EnvParams: wheelbase > 0 required");
    if (!(barrel_radius > 0.0)) {
      throw std::invalid_argument("EnvParams: barrel_radius > 0 required");
    }
    if (!(D > 0.0)) throw std::invalid_argument("EnvParams: D > 0 required");
    if (car_geometry.size() < 3) {
      throw std::invalid_argument("EnvParams: car polygon needs >= 3 vertices");
    }
    const std::size_t n = car_geometry.size();
    for (std::size_t i = 0; i < n; ++i) {
      const Eigen::Vector2d e = car_geometry[(i + 1) % n] - car_geometry[i];
      const Eigen::Vector2d f = car_geometry[(i + 2) % n] - car_geometry[(i + 1) % n];
      if (e.x() * f.y() - e.y() * f.x() < 0.0) {
        throw std::invalid_argument("EnvParams: car polygon must be convex CCW");
      }
    }
  }
};

// state layout: [x, y, theta, x_o, y_o]; action layout: [V, delta]
inline constexpr int kCarX = 0, kCarY = 1, kCarTheta = 2, kBarrelX = 3, kBarrelY = 4;

inline Box<2> push_action_bounds() {
  return Box<2>(Eigen::Vector2d(-1.0, -0.42), Eigen::Vector2d(1.0, 0.42));
}

// The seven-way discretization {(0,0), (+-1,0), (+-1,+-0.42)}.
inline ActionSet<2> push_action_set() {
  std::vector<Vec<2>> a;
  a.push_back(Vec<2>(0.0, 0.0));
  a.push_back(Vec<2>(1.0, 0.0));
  a.push_back(Vec<2>(-1.0, 0.0));
  a.push_back(Vec<2>(1.0, 0.42));
  a.push_back(Vec<2>(1.0, -0.42));
  a.push_back(Vec<2>(-1.0, 0.42));
  a.push_back(Vec<2>(-1.0, -0.42));
  return ActionSet<2>::discrete(std::move(a), push_action_bounds());
}

inline Eigen::Vector3d car_step(const Vec<5>& state, const Vec<2>& action,
                                const EnvParams& p) {
  const double V = action[0];
  const double delta = action[1];
  const double th = state[kCarTheta];
  Eigen::Vector3d out;
  out[0] = state[kCarX] + p.dt * V * std::cos(th);
  out[1] = state[kCarY] + p.dt * V * std::sin(th);
  out[2] = wrap_angle(th + p.dt * (V / p.wheelbase) * std::tan(delta));
  return out;
}

// Distance from a point to a convex CCW polygon (negative inside) together
// with the outward unit normal at the closest boundary point. Ties resolve
// to the earliest edge, so results are deterministic.
inline std::pair<double, Eigen::Vector2d> polygon_signed_distance(
    const Eigen::Vector2d& p, const std::vector<Eigen::Vector2d>& poly) {
  const std::size_t n = poly.size();
  bool inside = true;
  double best_d2 = std::numeric_limits<double>::infinity();
  Eigen::Vector2d best_q = poly[0];
  Eigen::Vector2d best_edge_normal(1.0, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::Vector2d& a = poly[i];
    const Eigen::Vector2d& b = poly[(i + 1) % n];
    const Eigen::Vector2d e = b - a;
    const Eigen::Vector2d pa = p - a;
    if (e.x() * pa.y() - e.y() * pa.x() < 0.0) inside = false;
    const double t = std::clamp(pa.dot(e) / e.squaredNorm(), 0.0, 1.0);
    const Eigen::Vector2d q = a + t * e;
    const double d2 = (p - q).squaredNorm();
    if (d2 < best_d2) {
      best_d2 = d2;
      best_q = q;
      best_edge_normal = Eigen::Vector2d(e.y(), -e.x()).normalized();
    }
  }
  const double dist = std::sqrt(best_d2);
  Eigen::Vector2d normal;
  if (dist > 0.0) {
    normal = inside ? (best_q - p) / dist : (p - best_q) / dist;
  } else {
    normal = best_edge_normal;  // point exactly on the boundary
  }
  return {inside ? -dist : dist, normal};
}

// Gap between the barrel disk and the car polygon at a given car pose
// (negative means penetration), in meters.
inline double signed_distance(const Eigen::Vector2d& barrel, double car_x,
                              double car_y, double car_theta, const EnvParams& p) {
  const double c = std::cos(car_theta), s = std::sin(car_theta);
  const Eigen::Vector2d rel = barrel - Eigen::Vector2d(car_x, car_y);
  const Eigen::Vector2d body(c * rel.x() + s * rel.y(), -s * rel.x() + c * rel.y());
  return polygon_signed_distance(body, p.car_geometry).first - p.barrel_radius;
}

// Minimum-displacement projection of the barrel onto the non-penetrating
// set of the new car pose. Complementarity holds by construction: a moved
// barrel ends exactly on the dilated boundary (zero gap), an untouched one
// keeps its position bit-for-bit.
inline Eigen::Vector2d contact_resolve(const Eigen::Vector2d& barrel_prev,
                                       const Eigen::Vector3d& car_next,
                                       const EnvParams& p) {
  if (!barrel_prev.allFinite() || !car_next.allFinite()) {
    throw MptError("contact_resolve: non-finite input");
  }
  const double c = std::cos(car_next[2]), s = std::sin(car_next[2]);
  const Eigen::Vector2d rel = barrel_prev - car_next.head<2>();
  const Eigen::Vector2d body(c * rel.x() + s * rel.y(), -s * rel.x() + c * rel.y());
  const auto [sd, normal] = polygon_signed_distance(body, p.car_geometry);
  if (sd >= p.barrel_radius) return barrel_prev;
  const Eigen::Vector2d body_out = body + (p.barrel_radius - sd) * normal;
  return car_next.head<2>() +
         Eigen::Vector2d(c * body_out.x() - s * body_out.y(),
                         s * body_out.x() + c * body_out.y());
}

inline Vec<5> env_step(const Vec<5>& state, const Vec<2>& action, const EnvParams& p) {
  const Vec<2> u = push_action_bounds().clamp(action);  // actuator saturation
  const Eigen::Vector3d car = car_step(state, u, p);
  const Eigen::Vector2d barrel =
      contact_resolve(state.segment<2>(kBarrelX), car, p);
  Vec<5> out;
  out.head<3>() = car;
  out.segment<2>(kBarrelX) = barrel;
  return out;
}

struct StepDetail {
  Vec<5> next;
  bool contact = false;
  double barrel_displacement = 0.0;
  double gap = 0.0;  // signed distance after resolution
};

inline StepDetail env_step_detail(const Vec<5>& state, const Vec<2>& action,
                                  const EnvParams& p) {
  StepDetail d;
  d.next = env_step(state, action, p);
  d.barrel_displacement =
      (d.next.segment<2>(kBarrelX) - state.segment<2>(kBarrelX)).norm();
  d.gap = signed_distance(d.next.segment<2>(kBarrelX), d.next[kCarX], d.next[kCarY],
                          d.next[kCarTheta], p);
  d.contact = d.barrel_displacement > 0.0;
  return d;
}

// True when the car or barrel leaves the workspace or hits an obstacle
// (open intersection: touching an obstacle boundary does not count).
inline bool collision_check(const Vec<5>& state, const EnvParams& p) {
  const double c = std::cos(state[kCarTheta]), s = std::sin(state[kCarTheta]);
  const Eigen::Vector2d pos = state.head<2>();
  for (const Eigen::Vector2d& v : p.car_geometry) {
    const Eigen::Vector2d w = pos + Eigen::Vector2d(c * v.x() - s * v.y(),
                                                    s * v.x() + c * v.y());
    if (w.x() < p.workspace.lo[0] || w.x() > p.workspace.hi[0] ||
        w.y() < p.workspace.lo[1] || w.y() > p.workspace.hi[1]) {
      return true;
    }
  }
  const Eigen::Vector2d barrel = state.segment<2>(kBarrelX);
  if (barrel.x() < p.workspace.lo[0] + p.barrel_radius ||
      barrel.x() > p.workspace.hi[0] - p.barrel_radius ||
      barrel.y() < p.workspace.lo[1] + p.barrel_radius ||
      barrel.y() > p.workspace.hi[1] - p.barrel_radius) {
    return true;
  }
  for (const DiskObstacle& ob : p.obstacles) {
    if ((barrel - ob.center).norm() < p.barrel_radius + ob.radius) return true;
    const Eigen::Vector2d rel = ob.center - pos;
    const Eigen::Vector2d body(c * rel.x() + s * rel.y(), -s * rel.x() + c * rel.y());
    if (polygon_signed_distance(body, p.car_geometry).first < ob.radius) return true;
  }
  return false;
}

class PushCarDynamics final : public DynamicsModel<5, 2> {
 public:
  explicit PushCarDynamics(EnvParams params) : params_(std::move(params)) {
    params_.validate();
  }

  Vec<5> step(const Vec<5>& x, const Vec<2>& u) const override {
    return env_step(x, u, params_);
  }

  bool contact_flag(const Vec<5>& x, const Vec<2>& u) const override {
    const Vec<2> uc = push_action_bounds().clamp(u);
    const Eigen::Vector3d car = car_step(x, uc, params_);
    return signed_distance(x.segment<2>(kBarrelX), car[0], car[1], car[2], params_) <
           0.0;
  }

  const EnvParams& params() const { return params_; }

 private:
  EnvParams params_;
};

// Additive, bounded, slowly drifting disturbance on the true environment.
// eta bounds the per-step change, sigma_bar the magnitude.
template <int NX, int NU>
struct DisturbanceModel {
  virtual ~DisturbanceModel() = default;
  virtual Vec<NX> eval(const Vec<NX>& x, const Vec<NU>& u, std::int64_t k) const = 0;
  virtual double eta() const = 0;
  virtual double sigma_bar() const = 0;
};

template <int NX, int NU>
struct ZeroDisturbance final : DisturbanceModel<NX, NU> {
  Vec<NX> eval(const Vec<NX>&, const Vec<NU>&, std::int64_t) const override {
    return Vec<NX>::Zero();
  }
  double eta() const override { return 0.0; }
  double sigma_bar() const override { return 0.0; }
};

template <int NX, int NU>
struct ConstantBias final : DisturbanceModel<NX, NU> {
  Vec<NX> bias = Vec<NX>::Zero();
  explicit ConstantBias(const Vec<NX>& b) : bias(b) {}
  Vec<NX> eval(const Vec<NX>&, const Vec<NU>&, std::int64_t) const override {
    return bias;
  }
  double eta() const override { return 0.0; }
  double sigma_bar() const override { return bias.norm(); }
};

// d_i(k) = amplitude_i * sin(omega k + phase_i): time-varying but slow when
// omega is small, with exact eta and sigma_bar.
template <int NX, int NU>
struct SinusoidalDrift final : DisturbanceModel<NX, NU> {
  Vec<NX> amplitude = Vec<NX>::Zero();
  double omega = 0.0;
  Vec<NX> phase = Vec<NX>::Zero();
  SinusoidalDrift(const Vec<NX>& amp, double om, const Vec<NX>& ph = Vec<NX>::Zero())
      : amplitude(amp), omega(om), phase(ph) {}
  Vec<NX> eval(const Vec<NX>&, const Vec<NU>&, std::int64_t k) const override {
    Vec<NX> d;
    for (int i = 0; i < NX; ++i) {
      d[i] = amplitude[i] * std::sin(omega * static_cast<double>(k) + phase[i]);
    }
    return d;
  }
  // |d(k+1) - d(k)| <= 2 |sin(omega/2)| per dim (sum-to-product identity)
  double eta() const override {
    return 2.0 * std::abs(std::sin(omega / 2.0)) * amplitude.norm();
  }
  double sigma_bar() const override { return amplitude.norm(); }
};

template <int NX, int NU>
Vec<NX> add_disturbance(const Vec<NX>& nominal_next, const DisturbanceModel<NX, NU>& d,
                        const Vec<NX>& x, const Vec<NU>& u, std::int64_t k) {
  return nominal_next + d.eval(x, u, k);
}

// Wires the push task into the generic decision problem. `dyn` is the
// dynamics the planner simulates with (nominal or estimated); the returned
// spec references it and `env` by value.
inline MdpSpec<5, 2> make_push_mdp(const DynamicsModel<5, 2>& dyn, EnvParams env,
                                   double gamma) {
  env.validate();
  MdpSpec<5, 2> spec;
  Vec<5> lo, hi;
  lo << env.workspace.lo[0], env.workspace.lo[1], -std::numbers::pi,
      env.workspace.lo[0], env.workspace.lo[1];
  hi << env.workspace.hi[0], env.workspace.hi[1], std::numbers::pi,
      env.workspace.hi[0], env.workspace.hi[1];
  spec.state_bounds = Box<5>(lo, hi);
  spec.action_bounds = push_action_bounds();
  spec.gamma = gamma;
  spec.dynamics = &dyn;
  const RewardParams rp{env.goal, env.D, kBarrelX, kBarrelY};
  spec.reward = [rp](const Vec<5>& x, const Vec<2>& u) {
    return reward_eval<5, 2>(x, u, rp);
  };
  // Leaf bootstrap: the barrel stays put once the car stops, so the value of
  // freezing at x is exactly its reward forever. Seeding leaves with that
  // geometric tail keeps returns comparable across search generations no
  // matter how deep below the original root a sample was taken.
  spec.value_estimate = [rp, gamma](const Vec<5>& x) {
    const Vec<2> u0 = Vec<2>::Zero();
    return reward_eval<5, 2>(x, u0, rp) / (1.0 - gamma);
  };
  spec.valid_state = [env](const Vec<5>& x) { return !collision_check(x, env); };
  spec.action_set = push_action_set();
  spec.validate();
  return spec;
}

}  // namespace mpt
