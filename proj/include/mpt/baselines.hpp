#pragma once

// Comparison planners: cross-entropy method over open-loop action
// sequences (with optional hotstart reuse) and single-shot UCT planning
// without tree carry-over.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <vector>

#include "mpt/common.hpp"
#include "mpt/mdp.hpp"
#include "mpt/tree.hpp"

namespace mpt {

template <int NU>
struct CemParams {
  int population = 20;  // samples per iteration
  int iterations = 10;
  double elite_frac = 0.10;
  std::vector<Vec<NU>> init_mean;  // empty = zero sequence
  Vec<NU> init_std = Vec<NU>::Ones();
  int horizon = 1;

  void validate() const {
    if (population < 1) throw std::invalid_argument("CemParams: population >= 1");
    if (iterations < 1) throw std::invalid_argument("CemParams: iterations >= 1");
    if (!(elite_frac > 0.0 && elite_frac <= 1.0)) {
      throw std::invalid_argument("CemParams: elite_frac in (0, 1] required");
    }
    if (static_cast<int>(population * elite_frac) < 1) {
      throw std::invalid_argument("CemParams: population * elite_frac >= 1 required");
    }
    if (horizon < 1) throw std::invalid_argument("CemParams: horizon >= 1");
    if (!init_mean.empty() && static_cast<int>(init_mean.size()) != horizon) {
      throw std::invalid_argument("CemParams: init_mean length != horizon");
    }
    if ((init_std.array() <= 0.0).any()) {
      throw std::invalid_argument("CemParams: init_std must be positive");
    }
  }
};

template <int NU>
struct CemResult {
  std::vector<Vec<NU>> sequence;
  double value = 0.0;
  std::uint64_t rollouts = 0;       // population x iterations, the parity budget
  std::uint64_t floor_warnings = 0; // std collapses caught by the 1e-9 floor
};

// Indices of the top elite-fraction scores, best first; equal scores keep
// their sample order so the selection is deterministic and invariant to
// positive reward scaling.
inline std::vector<std::size_t> select_elites(const std::vector<double>& scores,
                                              double elite_frac) {
  const std::size_t n_elite = std::max<std::size_t>(
      1, static_cast<std::size_t>(static_cast<double>(scores.size()) * elite_frac));
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&scores](std::size_t a, std::size_t b) {
    return scores[a] > scores[b];
  });
  idx.resize(std::min(n_elite, idx.size()));
  return idx;
}

namespace detail {

// Discounted return of an open-loop sequence under the planner's dynamics,
// with the same terminal semantics as the tree: an invalid state ends the
// trajectory with reward 0, and a fully valid one is capped with the same
// leaf value estimate the tree uses.
template <int NX, int NU>
double cem_score(const Vec<NX>& x0, const MdpSpec<NX, NU>& mdp,
                 const std::vector<Vec<NU>>& seq) {
  double ret = 0.0;
  double disc = 1.0;
  Vec<NX> x = x0;
  for (const Vec<NU>& u : seq) {
    const Vec<NX> xn = mdp.dynamics->step(x, u);
    if (!finite(xn) || !mdp.state_valid(xn)) return ret;
    ret += disc * mdp.reward(xn, u);
    disc *= mdp.gamma;
    x = xn;
  }
  return ret + disc * mdp.terminal_value(x);
}

}  // namespace detail

template <int NX, int NU>
CemResult<NU> cem_plan(const Vec<NX>& state, const MdpSpec<NX, NU>& mdp,
                       const CemParams<NU>& params, Rng& rng) {
  params.validate();
  const int H = params.horizon;
  std::vector<Vec<NU>> mean =
      params.init_mean.empty() ? std::vector<Vec<NU>>(H, Vec<NU>::Zero())
                               : params.init_mean;
  std::vector<Vec<NU>> std_dev(H, params.init_std);

  CemResult<NU> out;
  std::vector<std::vector<Vec<NU>>> samples(
      params.population, std::vector<Vec<NU>>(H, Vec<NU>::Zero()));
  std::vector<double> scores(params.population, 0.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  for (int it = 0; it < params.iterations; ++it) {
    for (int s = 0; s < params.population; ++s) {
      for (int t = 0; t < H; ++t) {
        for (int d = 0; d < NU; ++d) {
          const double v = mean[t][d] + std_dev[t][d] * gauss(rng);
          samples[s][t][d] =
              std::clamp(v, mdp.action_bounds.lo[d], mdp.action_bounds.hi[d]);
        }
      }
      scores[s] = detail::cem_score(state, mdp, samples[s]);
      ++out.rollouts;
    }
    const std::vector<std::size_t> elites = select_elites(scores, params.elite_frac);
    const double inv = 1.0 / static_cast<double>(elites.size());
    for (int t = 0; t < H; ++t) {
      Vec<NU> mu = Vec<NU>::Zero();
      for (std::size_t e : elites) mu += samples[e][t];
      mu *= inv;
      Vec<NU> var = Vec<NU>::Zero();
      for (std::size_t e : elites) {
        const Vec<NU> diff = samples[e][t] - mu;
        var += diff.cwiseProduct(diff);
      }
      var *= inv;
      mean[t] = mu;
      for (int d = 0; d < NU; ++d) {
        double sd = std::sqrt(var[d]);
        if (sd < 1e-9) {
          sd = 1e-9;
          ++out.floor_warnings;
        }
        std_dev[t][d] = sd;
      }
    }
  }

  for (Vec<NU>& u : mean) u = mdp.action_bounds.clamp(u);
  out.sequence = std::move(mean);
  // The returned value re-scores the final mean; it is an evaluation, not
  // part of the population x iterations sampling budget above.
  out.value = detail::cem_score(state, mdp, out.sequence);
  return out;
}

// Hotstarted variant: the previous solution, shifted forward one step with
// the last action repeated, becomes the initial mean; std restarts wide.
template <int NX, int NU>
CemResult<NU> cem_reuse_plan(const Vec<NX>& state, const MdpSpec<NX, NU>& mdp,
                             const CemParams<NU>& params,
                             const std::vector<Vec<NU>>& prev_solution, Rng& rng) {
  if (static_cast<int>(prev_solution.size()) != params.horizon) {
    throw std::invalid_argument("cem_reuse_plan: prev_solution length != horizon");
  }
  CemParams<NU> p = params;
  p.init_mean.assign(prev_solution.begin() + 1, prev_solution.end());
  p.init_mean.push_back(prev_solution.back());
  return cem_plan(state, mdp, p, rng);
}

// Fresh single-root UCT planning: nothing carried over between calls.
template <int NX, int NU>
std::pair<Vec<NU>, double> uct_noreuse_plan(const Vec<NX>& state,
                                            const MdpSpec<NX, NU>& mdp,
                                            const SearchParams& search_params,
                                            Rng& rng) {
  SearchTree<NX, NU> tree(state, search_params);
  tree.uct_search(mdp, search_params.L, rng);
  const auto [u, id] = tree.best_child();
  const auto& c = tree.node(id);
  return {u, c.V / static_cast<double>(c.N)};
}

}  // namespace mpt
