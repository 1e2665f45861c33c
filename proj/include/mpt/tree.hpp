#pragma once

// UCT search tree with subtree reuse. Nodes live in an index arena with
// intrusive first-child / next-sibling links; re-rooting frees the discarded
// region and never touches the retained subtree, so a trim costs
// O(discarded nodes).

#include <cmath>
#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mpt/common.hpp"
#include "mpt/mdp.hpp"

namespace mpt {

struct SearchParams {
  std::uint64_t L = 1;        // rollouts per planning step
  int b = 1;                  // branching factor
  int K = 1;                  // search depth
  double epsilon_explore = 1.0;
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (L < 1) throw std::invalid_argument("SearchParams: L >= 1 required");
    if (b < 1) throw std::invalid_argument("SearchParams: b >= 1 required");
    if (K < 1) throw std::invalid_argument("SearchParams: K >= 1 required");
    if (!(epsilon_explore >= 0.0)) {
      throw std::invalid_argument("SearchParams: epsilon_explore >= 0 required");
    }
  }
};

inline double uct_score(double child_V, std::uint64_t child_N,
                        std::uint64_t parent_N, double epsilon_explore) {
  if (child_N == 0) throw MptError("uct_score: unvisited child");
  if (parent_N == 0) throw MptError("uct_score: unvisited parent");
  const double n = static_cast<double>(child_N);
  return child_V / n +
         epsilon_explore * std::sqrt(std::log(static_cast<double>(parent_N)) / n);
}

// True when the measured state has drifted more than tau away from the
// reused root; the caller must then discard the tree and restart from a
// fresh zero-statistics root. Strict inequality, so a drift of exactly tau
// keeps the tree.
template <int NX>
bool reset_check(const Vec<NX>& tree_root_state, const Vec<NX>& measured_state,
                 double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("reset_check: tau > 0 required");
  return (tree_root_state - measured_state).norm() > tau;
}

template <int NX, int NU>
class SearchTree {
 public:
  static constexpr std::uint32_t kNull = 0xffffffffu;

  struct Node {
    Vec<NX> x;
    Vec<NU> u;  // action that produced this state; zero at a fresh root
    double V = 0.0;
    double reward = 0.0;  // R(x, u), cached at creation; 0 when terminal
    std::uint32_t N = 0;
    std::uint32_t first_child = kNull;
    std::uint32_t next_sibling = kNull;
    std::uint32_t depth = 0;  // creation-lineage depth, never rewritten
    std::uint16_t num_children = 0;
    std::int16_t action_idx = -1;  // discrete action index; -1 otherwise
    bool terminal = false;
  };

  SearchTree(const Vec<NX>& root_state, const SearchParams& params)
      : params_(params), rng_(params.rng_seed) {
    params_.validate();
    root_ = alloc(root_state, Vec<NU>::Zero(), 0.0, 0, -1, false);
  }

  const SearchParams& params() const { return params_; }
  Rng& rng() { return rng_; }

  std::uint32_t root() const { return root_; }
  const Node& node(std::uint32_t id) const { return arena_[id]; }
  Node& node_mut(std::uint32_t id) { return arena_[id]; }

  // Depth below the current root. Stored depths are creation-lineage
  // absolute; re-rooting only moves the reference point, so retained nodes
  // are never rewritten.
  int rel_depth(std::uint32_t id) const {
    return static_cast<int>(arena_[id].depth) - static_cast<int>(root_depth_);
  }

  std::size_t num_nodes() const { return arena_.size() - free_.size(); }
  std::uint64_t rollouts_done() const { return rollouts_done_; }
  std::uint64_t rollout_warnings() const { return rollout_warnings_; }
  const std::string& last_warning() const { return last_warning_; }

  std::vector<std::uint32_t> children(std::uint32_t id) const {
    std::vector<std::uint32_t> out;
    for (std::uint32_t c = arena_[id].first_child; c != kNull;
         c = arena_[c].next_sibling) {
      out.push_back(c);
    }
    return out;
  }

  // Appends a child node; exposed so tests can assemble trees by hand.
  std::uint32_t add_child(std::uint32_t parent, const Vec<NX>& x, const Vec<NU>& u,
                          double reward, int action_idx = -1, bool terminal = false) {
    const std::uint32_t depth = arena_[parent].depth + 1;
    const std::uint32_t id = alloc(x, u, reward, depth, action_idx, terminal);
    Node& p = arena_[parent];
    if (p.first_child == kNull) {
      p.first_child = id;
    } else {
      std::uint32_t tail = p.first_child;
      while (arena_[tail].next_sibling != kNull) tail = arena_[tail].next_sibling;
      arena_[tail].next_sibling = id;
    }
    ++p.num_children;
    return id;
  }

  std::uint32_t select_child(std::uint32_t id, double epsilon_explore) const {
    const Node& n = arena_[id];
    if (n.first_child == kNull) throw MptError("select_child: node has no children");
    std::uint32_t best = n.first_child;
    double best_score = uct_score(arena_[best].V, arena_[best].N, n.N, epsilon_explore);
    for (std::uint32_t c = arena_[best].next_sibling; c != kNull;
         c = arena_[c].next_sibling) {
      const double s = uct_score(arena_[c].V, arena_[c].N, n.N, epsilon_explore);
      if (s > best_score) {  // ties keep the earlier (lower-index) child
        best = c;
        best_score = s;
      }
    }
    return best;
  }

  // One tree rollout: walk from the root for at most K+1 transitions,
  // expanding (sampling an untried action) whenever the current node has
  // fewer than b children, selecting by UCT score otherwise. Returns the
  // visited path, root first. Non-finite dynamics or a throwing model
  // truncate the path at the last good node and are counted as warnings.
  std::span<const std::uint32_t> rollout_once(const MdpSpec<NX, NU>& mdp, Rng& rng) {
    path_.clear();
    path_.push_back(root_);
    const int eff_b = effective_branching(mdp);
    for (int j = 0; j <= params_.K; ++j) {
      const std::uint32_t cur = path_.back();
      if (arena_[cur].terminal) break;
      std::uint32_t next;
      if (static_cast<int>(arena_[cur].num_children) < eff_b) {
        next = expand(cur, mdp, rng);
        if (next == kNull) break;  // truncated; warning already recorded
      } else {
        next = select_child(cur, params_.epsilon_explore);
      }
      path_.push_back(next);
    }
    return path_;
  }

  // Leaf-to-root update: every path node gets one visit, and V accumulates
  // the discounted return of the sub-path starting at that node, seeded
  // with terminal_value below the leaf.
  void backpropagate(std::span<const std::uint32_t> path,
                     std::span<const double> rewards, double gamma,
                     double terminal_value) {
    if (path.empty()) throw std::invalid_argument("backpropagate: empty path");
    if (rewards.size() != path.size()) {
      throw std::invalid_argument("backpropagate: rewards misaligned with path");
    }
    double cum = terminal_value;
    for (std::size_t i = path.size(); i-- > 0;) {
      Node& n = arena_[path[i]];
      n.N += 1;
      cum = gamma * cum + rewards[i];
      n.V += cum;
    }
  }

  void uct_search(const MdpSpec<NX, NU>& mdp, std::uint64_t L, Rng& rng) {
    // The root's cached reward depends on the decision problem, which the
    // constructor never sees; refresh it here (idempotent).
    Node& r = arena_[root_];
    r.reward = r.terminal ? 0.0 : mdp.reward(r.x, r.u);

    for (std::uint64_t l = 0; l < L; ++l) {
      const auto path = rollout_once(mdp, rng);
      rewards_.clear();
      for (std::uint32_t id : path) rewards_.push_back(arena_[id].reward);
      const Node& leaf = arena_[path.back()];
      const double tv = leaf.terminal ? 0.0 : mdp.terminal_value(leaf.x);
      backpropagate(path, rewards_, mdp.gamma, tv);
      ++rollouts_done_;
    }
  }

  void uct_search(const MdpSpec<NX, NU>& mdp, std::uint64_t L) {
    uct_search(mdp, L, rng_);
  }

  void uct_search(const MdpSpec<NX, NU>& mdp) { uct_search(mdp, params_.L, rng_); }

  // Highest mean value V/N among the root's visited children; ties go to
  // the earliest child. This is the executed action, so exploration plays
  // no part here.
  std::pair<Vec<NU>, std::uint32_t> best_child() const {
    std::uint32_t best = kNull;
    double best_mean = 0.0;
    for (std::uint32_t c = arena_[root_].first_child; c != kNull;
         c = arena_[c].next_sibling) {
      if (arena_[c].N == 0) continue;
      const double mean = arena_[c].V / static_cast<double>(arena_[c].N);
      if (best == kNull || mean > best_mean) {
        best = c;
        best_mean = mean;
      }
    }
    if (best == kNull) {
      throw StarvationError("best_child: root has no visited children");
    }
    return {arena_[best].u, best};
  }

  // Makes `chosen` (a first-level child) the new root and frees everything
  // outside its subtree. Retained nodes keep their ids, statistics, and
  // links untouched; cost is proportional to the discarded node count.
  void re_root(std::uint32_t chosen) {
    bool is_child = false;
    for (std::uint32_t c = arena_[root_].first_child; c != kNull;
         c = arena_[c].next_sibling) {
      if (c == chosen) {
        is_child = true;
        break;
      }
    }
    if (!is_child) throw MptError("re_root: chosen is not a child of the root");

    for (std::uint32_t c = arena_[root_].first_child; c != kNull;) {
      const std::uint32_t next = arena_[c].next_sibling;
      if (c != chosen) free_subtree(c);
      c = next;
    }
    free_.push_back(root_);
    root_ = chosen;
    root_depth_ = arena_[chosen].depth;
    arena_[chosen].next_sibling = kNull;
  }

  // Drops the whole tree and restarts from a zero-statistics root at
  // `state` (the reset branch of the planning loop).
  void reset(const Vec<NX>& state) {
    arena_.clear();
    free_.clear();
    root_depth_ = 0;
    root_ = alloc(state, Vec<NU>::Zero(), 0.0, 0, -1, false);
  }

  // Preorder ids of the subtree under `from` (inclusive).
  std::vector<std::uint32_t> collect_subtree(std::uint32_t from) const {
    std::vector<std::uint32_t> out;
    std::vector<std::uint32_t> stack{from};
    while (!stack.empty()) {
      const std::uint32_t id = stack.back();
      stack.pop_back();
      out.push_back(id);
      // push in reverse so children pop in insertion order
      std::vector<std::uint32_t> kids = children(id);
      for (std::size_t i = kids.size(); i-- > 0;) stack.push_back(kids[i]);
    }
    return out;
  }

  // One JSON object per line: id, parent_id (null at root), state, action,
  // V, N. Consumed by offline visualization and the tests.
  void write_snapshot(std::ostream& os) const {
    std::vector<std::pair<std::uint32_t, std::int64_t>> stack{{root_, -1}};
    char buf[64];
    while (!stack.empty()) {
      const auto [id, parent] = stack.back();
      stack.pop_back();
      const Node& n = arena_[id];
      os << "{\"id\":" << id << ",\"parent_id\":";
      if (parent < 0) {
        os << "null";
      } else {
        os << parent;
      }
      os << ",\"state\":[";
      for (int i = 0; i < NX; ++i) {
        std::snprintf(buf, sizeof buf, "%.17g", n.x[i]);
        os << (i ? "," : "") << buf;
      }
      os << "],\"action\":[";
      for (int i = 0; i < NU; ++i) {
        std::snprintf(buf, sizeof buf, "%.17g", n.u[i]);
        os << (i ? "," : "") << buf;
      }
      std::snprintf(buf, sizeof buf, "%.17g", n.V);
      os << "],\"V\":" << buf << ",\"N\":" << n.N << "}\n";
      std::vector<std::uint32_t> kids = children(id);
      for (std::size_t i = kids.size(); i-- > 0;) {
        stack.push_back({kids[i], static_cast<std::int64_t>(id)});
      }
    }
  }

  // Structural self-check used by the tests: single-parent reachability,
  // child counts, visit-count conservation, arena bookkeeping.
  void validate() const {
    std::vector<char> seen(arena_.size(), 0);
    for (std::uint32_t f : free_) seen[f] = 2;
    std::vector<std::uint32_t> stack{root_};
    std::size_t live = 0;
    while (!stack.empty()) {
      const std::uint32_t id = stack.back();
      stack.pop_back();
      if (seen[id] == 1) throw MptError("validate: node reachable twice");
      if (seen[id] == 2) throw MptError("validate: freed node still linked");
      seen[id] = 1;
      ++live;
      const Node& n = arena_[id];
      std::uint32_t count = 0;
      std::uint64_t child_visits = 0;
      for (std::uint32_t c = n.first_child; c != kNull; c = arena_[c].next_sibling) {
        ++count;
        child_visits += arena_[c].N;
        if (arena_[c].depth != n.depth + 1) throw MptError("validate: bad depth link");
        stack.push_back(c);
      }
      if (count != n.num_children) throw MptError("validate: child count mismatch");
      if (count > static_cast<std::uint32_t>(params_.b)) {
        throw MptError("validate: branching factor exceeded");
      }
      if (n.N < child_visits) throw MptError("validate: visit conservation violated");
      if (id != root_ && n.N < 1) throw MptError("validate: unvisited non-root node");
    }
    if (live != num_nodes()) throw MptError("validate: orphaned live nodes in arena");
  }

 private:
  std::uint32_t alloc(const Vec<NX>& x, const Vec<NU>& u, double reward,
                      std::uint32_t depth, int action_idx, bool terminal) {
    std::uint32_t id;
    if (!free_.empty()) {
      id = free_.back();
      free_.pop_back();
    } else {
      id = static_cast<std::uint32_t>(arena_.size());
      arena_.emplace_back();
    }
    Node& n = arena_[id];
    n.x = x;
    n.u = u;
    n.V = 0.0;
    n.reward = reward;
    n.N = 0;
    n.first_child = kNull;
    n.next_sibling = kNull;
    n.depth = depth;
    n.num_children = 0;
    n.action_idx = static_cast<std::int16_t>(action_idx);
    n.terminal = terminal;
    return id;
  }

  int effective_branching(const MdpSpec<NX, NU>& mdp) const {
    if (mdp.action_set.mode == ActionSet<NU>::Mode::kDiscrete) {
      return std::min(params_.b, mdp.action_set.size());
    }
    return params_.b;
  }

  std::uint32_t expand(std::uint32_t parent, const MdpSpec<NX, NU>& mdp, Rng& rng) {
    Vec<NU> u;
    int aidx = -1;
    if (mdp.action_set.mode == ActionSet<NU>::Mode::kDiscrete) {
      visited_.assign(mdp.action_set.actions.size(), false);
      for (std::uint32_t c = arena_[parent].first_child; c != kNull;
           c = arena_[c].next_sibling) {
        if (arena_[c].action_idx >= 0) visited_[arena_[c].action_idx] = true;
      }
      aidx = sample_action_index_unvisited(mdp.action_set, visited_, rng);
      u = mdp.action_set.actions[aidx];
    } else {
      for (int i = 0; i < NU; ++i) {
        std::uniform_real_distribution<double> dist(mdp.action_set.bounds.lo[i],
                                                    mdp.action_set.bounds.hi[i]);
        u[i] = dist(rng);
      }
    }

    Vec<NX> xn;
    try {
      xn = mdp.dynamics->step(arena_[parent].x, u);
    } catch (const std::exception& e) {
      ++rollout_warnings_;
      last_warning_ = std::string("rollout: dynamics threw: ") + e.what();
      return kNull;
    }
    if (!finite(xn)) {
      ++rollout_warnings_;
      last_warning_ = "rollout: non-finite state from dynamics";
      return kNull;
    }
    const bool term = !mdp.state_valid(xn);
    const double rew = term ? 0.0 : mdp.reward(xn, u);
    return add_child(parent, xn, u, rew, aidx, term);
  }

  void free_subtree(std::uint32_t from) {
    scratch_.clear();
    scratch_.push_back(from);
    while (!scratch_.empty()) {
      const std::uint32_t id = scratch_.back();
      scratch_.pop_back();
      for (std::uint32_t c = arena_[id].first_child; c != kNull;
           c = arena_[c].next_sibling) {
        scratch_.push_back(c);
      }
      free_.push_back(id);
    }
  }

  std::vector<Node> arena_;
  std::vector<std::uint32_t> free_;
  std::uint32_t root_ = kNull;
  std::uint32_t root_depth_ = 0;
  SearchParams params_;
  Rng rng_;
  std::uint64_t rollouts_done_ = 0;
  std::uint64_t rollout_warnings_ = 0;
  std::string last_warning_;
  std::vector<std::uint32_t> path_;
  std::vector<double> rewards_;
  std::vector<bool> visited_;
  std::vector<std::uint32_t> scratch_;
};

}  // namespace mpt
