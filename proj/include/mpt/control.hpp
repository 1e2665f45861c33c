#pragma once

// Tracking-control machinery: finite-difference linearization, a
// fixed-point DARE solver, the Riccati feedback law, contraction
// verification, and the tracking / steady-state error bound calculators.

#include <cmath>
#include <cstdint>
#include <vector>

#include "mpt/common.hpp"
#include "mpt/mdp.hpp"

namespace mpt {

struct ControllerParams {
  MatX Q;       // state cost over the feedback dims, positive definite
  MatX R_cost;  // input cost, positive definite
  double jacobian_step = 1e-5;
  // Linearize at the measured state instead of the desired state. Off by
  // default: the desired pair (x_d, u_d) is the point the tree actually
  // certified.
  bool linearize_at_measured = false;
  // State dims the feedback acts on; empty means all of them. Restricting
  // to the directly actuated dims keeps the linearization stabilizable when
  // part of the state (e.g. a free-standing object) is not.
  std::vector<int> feedback_dims;
  bool enabled = true;

  void validate(int nx) const {
    if (Q.rows() != Q.cols() || R_cost.rows() != R_cost.cols()) {
      throw std::invalid_argument("ControllerParams: Q, R_cost must be square");
    }
    const int nq = static_cast<int>(Q.rows());
    const int expect = feedback_dims.empty() ? nx : static_cast<int>(feedback_dims.size());
    if (nq != expect) throw std::invalid_argument("ControllerParams: Q size mismatch");
    for (int d : feedback_dims) {
      if (d < 0 || d >= nx) throw std::invalid_argument("ControllerParams: bad feedback dim");
    }
    Eigen::SelfAdjointEigenSolver<MatX> eq(0.5 * (Q + Q.transpose()));
    Eigen::SelfAdjointEigenSolver<MatX> er(0.5 * (R_cost + R_cost.transpose()));
    if (eq.eigenvalues().minCoeff() <= 0.0 || er.eigenvalues().minCoeff() <= 0.0) {
      throw std::invalid_argument("ControllerParams: Q and R_cost must be positive definite");
    }
    if (!(jacobian_step > 0.0)) {
      throw std::invalid_argument("ControllerParams: jacobian_step > 0 required");
    }
  }
};

struct DisturbanceBoundParams {
  double eta = 0.0;       // per-step drift bound on the disturbance
  double eps_est = 0.0;   // estimator accuracy bound
  double sigma_bar = 0.0; // disturbance magnitude bound

  void validate() const {
    if (eta < 0.0 || eps_est < 0.0 || sigma_bar < 0.0) {
      throw std::invalid_argument("DisturbanceBoundParams: bounds must be nonnegative");
    }
  }
};

struct RiccatiSolution {
  MatX M;       // contraction metric
  MatX K_gain;  // feedback gain
  MatX A_cl;    // closed-loop Jacobian A - B K
  double alpha = 0.0;
  double m_lower = 0.0;
  double m_upper = 0.0;
};

// Central-difference Jacobians of the one-step dynamics. An analytic
// jacobians() on the model wins when present. When the two stencil points
// disagree on the contact flag the stencil straddles a contact kink, so the
// column falls back to the one-sided difference on the same contact branch
// as the base point.
template <int NX, int NU>
std::pair<Mat<NX, NX>, Mat<NX, NU>> jacobians_fd(const DynamicsModel<NX, NU>& dynamics,
                                                 const Vec<NX>& x, const Vec<NU>& u,
                                                 double h) {
  if (!(h > 0.0)) throw std::invalid_argument("jacobians_fd: h > 0 required");
  if (auto analytic = dynamics.jacobians(x, u)) return *analytic;

  const Vec<NX> f0 = dynamics.step(x, u);
  const bool flag0 = dynamics.contact_flag(x, u);
  if (!finite(f0)) throw MptError("jacobians_fd: non-finite base evaluation");

  Mat<NX, NX> A;
  for (int i = 0; i < NX; ++i) {
    Vec<NX> xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    const Vec<NX> fp = dynamics.step(xp, u);
    const Vec<NX> fm = dynamics.step(xm, u);
    if (!finite(fp) || !finite(fm)) {
      throw MptError("jacobians_fd: non-finite perturbation result");
    }
    const bool sp = dynamics.contact_flag(xp, u);
    const bool sm = dynamics.contact_flag(xm, u);
    if (sp == sm) {
      A.col(i) = (fp - fm) / (2.0 * h);
    } else if (sp == flag0) {
      A.col(i) = (fp - f0) / h;
    } else {
      A.col(i) = (f0 - fm) / h;
    }
  }

  Mat<NX, NU> B;
  for (int i = 0; i < NU; ++i) {
    Vec<NU> up = u, um = u;
    up[i] += h;
    um[i] -= h;
    const Vec<NX> fp = dynamics.step(x, up);
    const Vec<NX> fm = dynamics.step(x, um);
    if (!finite(fp) || !finite(fm)) {
      throw MptError("jacobians_fd: non-finite perturbation result");
    }
    const bool sp = dynamics.contact_flag(x, up);
    const bool sm = dynamics.contact_flag(x, um);
    if (sp == sm) {
      B.col(i) = (fp - fm) / (2.0 * h);
    } else if (sp == flag0) {
      B.col(i) = (fp - f0) / h;
    } else {
      B.col(i) = (f0 - fm) / h;
    }
  }
  return {A, B};
}

inline MatX dare_residual(const MatX& A, const MatX& B, const MatX& Q, const MatX& R,
                          const MatX& M) {
  const MatX BtM = B.transpose() * M;
  const MatX S = R + BtM * B;
  const MatX BtMA = BtM * A;
  return A.transpose() * M * A - BtMA.transpose() * S.ldlt().solve(BtMA) + Q - M;
}

// Fixed-point Riccati recursion from M = Q. Converges for stabilizable
// (A, B) with observable (A, Q^1/2); anything else exhausts max_iters and
// is reported as an assumption violation.
inline MatX solve_dare(const MatX& A, const MatX& B, const MatX& Q, const MatX& R,
                       double tol = 1e-12, int max_iters = 100000) {
  const auto n = A.rows();
  if (A.cols() != n || B.rows() != n || Q.rows() != n || Q.cols() != n ||
      R.rows() != B.cols() || R.cols() != B.cols()) {
    throw std::invalid_argument("solve_dare: inconsistent dimensions");
  }
  MatX M = Q;
  for (int it = 0; it < max_iters; ++it) {
    const MatX BtM = B.transpose() * M;
    const MatX S = R + BtM * B;
    const MatX BtMA = BtM * A;
    MatX next = A.transpose() * M * A - BtMA.transpose() * S.ldlt().solve(BtMA) + Q;
    next = 0.5 * (next + next.transpose());
    if (!next.allFinite()) throw RiccatiError("solve_dare: iteration diverged");
    const double delta = (next - M).norm();
    M = next;
    if (delta <= tol * std::max(1.0, M.norm())) {
      const double res = dare_residual(A, B, Q, R, M).norm();
      if (res > 1e-9 * std::max(1.0, M.norm())) {
        throw RiccatiError("solve_dare: converged point fails the residual contract");
      }
      return M;
    }
  }
  throw RiccatiError("solve_dare: no convergence (stabilizability/observability assumption violated)");
}

inline MatX feedback_gain(const MatX& A, const MatX& B, const MatX& M, const MatX& R) {
  const MatX BtM = B.transpose() * M;
  return (R + BtM * B).ldlt().solve(BtM * A);
}

inline double contraction_rate(const MatX& Q, double m_upper) {
  Eigen::SelfAdjointEigenSolver<MatX> es(0.5 * (Q + Q.transpose()));
  const double qmin = es.eigenvalues().minCoeff();
  if (qmin > m_upper) {
    throw MptError("contraction_rate: lambda_min(Q) > m_upper (inconsistent bounds)");
  }
  return std::sqrt(1.0 - qmin / m_upper);
}

inline bool verify_contraction(const MatX& A_cl, const MatX& M, double alpha,
                               double slack = 1e-8) {
  const MatX G = A_cl.transpose() * M * A_cl - alpha * alpha * M;
  Eigen::SelfAdjointEigenSolver<MatX> es(0.5 * (G + G.transpose()));
  return es.eigenvalues().maxCoeff() <= slack;
}

// Full Riccati synthesis at one linearization point. The metric bounds are
// this point's eigenvalue extremes; callers tracking a trajectory keep
// running min/max over every point they pass through.
inline RiccatiSolution solve_riccati(const MatX& A, const MatX& B, const MatX& Q,
                                     const MatX& R, double tol = 1e-12,
                                     int max_iters = 100000) {
  RiccatiSolution out;
  out.M = solve_dare(A, B, Q, R, tol, max_iters);
  out.K_gain = feedback_gain(A, B, out.M, R);
  out.A_cl = A - B * out.K_gain;
  Eigen::SelfAdjointEigenSolver<MatX> es(out.M);
  out.m_lower = es.eigenvalues().minCoeff();
  out.m_upper = es.eigenvalues().maxCoeff();
  out.alpha = contraction_rate(Q, out.m_upper);
  return out;
}

template <int NX, int NU>
Vec<NU> control_law(const Vec<NX>& x, const Vec<NX>& x_d, const Vec<NU>& u_d,
                    const MatX& K_gain, const Box<NU>& action_bounds) {
  if (K_gain.rows() != NU || K_gain.cols() != NX) {
    throw std::invalid_argument("control_law: gain dimension mismatch");
  }
  const Vec<NU> u = u_d - (K_gain * (x - x_d)).eval();
  return action_bounds.clamp(u);
}

// Lemma-style exponential tracking bound:
// alpha^k sqrt(m_upper/m_lower) e0 + (sigma_bar/(1-alpha)) sqrt(m_upper/m_lower) (1-alpha^k)
inline double tracking_error_bound(std::int64_t k, double e0, double sigma_bar,
                                   double alpha, double m_lower, double m_upper) {
  if (!(alpha >= 0.0 && alpha < 1.0)) {
    throw std::invalid_argument("tracking_error_bound: alpha in [0,1) required");
  }
  if (!(m_lower > 0.0 && m_upper >= m_lower)) {
    throw std::invalid_argument("tracking_error_bound: 0 < m_lower <= m_upper required");
  }
  const double ratio = std::sqrt(m_upper / m_lower);
  const double ak = std::pow(alpha, static_cast<double>(k));
  return ak * ratio * e0 + (sigma_bar / (1.0 - alpha)) * ratio * (1.0 - ak);
}

// Steady-state bound under a drifting, imperfectly estimated disturbance:
// sqrt(m_upper/m_lower) ((K_depth+1) eta + eps_est) / (1-alpha)
inline double steady_state_error_bound(int K_depth, double eta, double eps_est,
                                       double alpha, double m_lower, double m_upper) {
  if (!(alpha >= 0.0 && alpha < 1.0)) {
    throw std::invalid_argument("steady_state_error_bound: alpha in [0,1) required");
  }
  if (!(m_lower > 0.0 && m_upper >= m_lower)) {
    throw std::invalid_argument("steady_state_error_bound: 0 < m_lower <= m_upper required");
  }
  return std::sqrt(m_upper / m_lower) * ((K_depth + 1) * eta + eps_est) / (1.0 - alpha);
}

// Per-step tracking controller: linearize the estimated dynamics around the
// desired pair, synthesize the Riccati gain over the feedback dims, and
// apply u_d - K (x - x_d). A failed synthesis (e.g. the stop action, where
// the steering column of B vanishes) degrades to pure feedforward and is
// counted, never thrown.
template <int NX, int NU>
class ContractionController {
 public:
  ContractionController(const DynamicsModel<NX, NU>& model, ControllerParams params,
                        const Box<NU>& action_bounds)
      : model_(&model), params_(std::move(params)), bounds_(action_bounds) {
    params_.validate(NX);
    dims_ = params_.feedback_dims;
    if (dims_.empty()) {
      for (int i = 0; i < NX; ++i) dims_.push_back(i);
    }
  }

  Vec<NU> compute(const Vec<NX>& x, const Vec<NX>& x_d, const Vec<NU>& u_d) {
    ++steps_;
    if (!params_.enabled) return bounds_.clamp(u_d);

    const Vec<NX>& lin_x = params_.linearize_at_measured ? x : x_d;
    MatX A_r(dims_.size(), dims_.size());
    MatX B_r(dims_.size(), NU);
    try {
      const auto [A, B] = jacobians_fd(*model_, lin_x, u_d, params_.jacobian_step);
      for (std::size_t i = 0; i < dims_.size(); ++i) {
        for (std::size_t j = 0; j < dims_.size(); ++j) A_r(i, j) = A(dims_[i], dims_[j]);
        B_r.row(i) = B.row(dims_[i]);
      }
      const RiccatiSolution sol =
          solve_riccati(A_r, B_r, params_.Q, params_.R_cost, 1e-12, 20000);
      m_lower_ = std::min(m_lower_, sol.m_lower);
      m_upper_ = std::max(m_upper_, sol.m_upper);
      alpha_max_ = std::max(alpha_max_, sol.alpha);
      if (!verify_contraction(sol.A_cl, sol.M, sol.alpha)) ++verify_failures_;

      MatX K_full = MatX::Zero(NU, NX);
      for (std::size_t j = 0; j < dims_.size(); ++j) {
        K_full.col(dims_[j]) = sol.K_gain.col(j);
      }
      return control_law<NX, NU>(x, x_d, u_d, K_full, bounds_);
    } catch (const MptError&) {
      ++dare_failures_;
      return bounds_.clamp(u_d);
    }
  }

  std::uint64_t steps() const { return steps_; }
  std::uint64_t dare_failures() const { return dare_failures_; }
  std::uint64_t verify_failures() const { return verify_failures_; }
  double m_lower() const { return m_lower_; }
  double m_upper() const { return m_upper_; }
  double alpha_max() const { return alpha_max_; }
  const ControllerParams& params() const { return params_; }

 private:
  const DynamicsModel<NX, NU>* model_;
  ControllerParams params_;
  Box<NU> bounds_;
  std::vector<int> dims_;
  std::uint64_t steps_ = 0;
  std::uint64_t dare_failures_ = 0;
  std::uint64_t verify_failures_ = 0;
  double m_lower_ = std::numeric_limits<double>::infinity();
  double m_upper_ = 0.0;
  double alpha_max_ = 0.0;
};

}  // namespace mpt
