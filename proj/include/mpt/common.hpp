#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace mpt {

template <int N>
using Vec = Eigen::Matrix<double, N, 1>;
template <int R, int C>
using Mat = Eigen::Matrix<double, R, C>;
using MatX = Eigen::MatrixXd;
using VecX = Eigen::VectorXd;

using Rng = std::mt19937_64;

struct MptError : std::runtime_error {
  explicit MptError(const std::string& what) : std::runtime_error(what) {}
};

/// Thrown when a planner cannot produce an action (e.g. a root with no
/// visited children). Callers must treat the episode as failed.
struct StarvationError : MptError {
  explicit StarvationError(const std::string& what) : MptError(what) {}
};

/// Thrown when the DARE iteration does not converge, signalling that the
/// stabilizability/observability assumption does not hold at the
/// linearization point.
struct RiccatiError : MptError {
  explicit RiccatiError(const std::string& what) : MptError(what) {}
};

template <int N>
struct Box {
  Vec<N> lo = Vec<N>::Constant(-std::numeric_limits<double>::infinity());
  Vec<N> hi = Vec<N>::Constant(std::numeric_limits<double>::infinity());

  Box() = default;
  Box(const Vec<N>& lo_, const Vec<N>& hi_) : lo(lo_), hi(hi_) {
    if ((hi.array() < lo.array()).any()) {
      throw std::invalid_argument("Box: hi < lo");
    }
  }

  bool contains(const Vec<N>& v) const {
    return (v.array() >= lo.array()).all() && (v.array() <= hi.array()).all();
  }

  Vec<N> clamp(const Vec<N>& v) const {
    return v.array().max(lo.array()).min(hi.array()).matrix();
  }

  double diagonal() const { return (hi - lo).norm(); }

  bool bounded() const { return lo.allFinite() && hi.allFinite(); }
};

inline bool finite(double v) { return std::isfinite(v); }

// Principal angle in (-pi, pi].
inline double wrap_angle(double a) {
  double r = std::remainder(a, 2.0 * std::numbers::pi);
  if (r <= -std::numbers::pi) r += 2.0 * std::numbers::pi;
  return r;
}

template <typename Derived>
bool finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

// Counter-based seed mixing; cell/trial seeds derived this way are
// independent of execution order.
inline std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) {
  return splitmix64(master ^ splitmix64(stream));
}

// Round-trip-exact decimal rendering; every CSV/JSON number goes through
// this one formatter so reruns stay byte-identical.
inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace mpt
