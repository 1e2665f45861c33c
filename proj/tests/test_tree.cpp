#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"

#include "mpt/tree.hpp"

using namespace mpt;

namespace {

// 1D chain: x' = x + u, reward = -|x'| proxy via callable below. Always valid
// unless a limit is set.
struct Chain1D final : DynamicsModel<1, 1> {
  Vec<1> step(const Vec<1>& x, const Vec<1>& u) const override { return x + u; }
};

// Dynamics that explodes for u >= 0.5 (for the truncation path).
struct Fragile1D final : DynamicsModel<1, 1> {
  Vec<1> step(const Vec<1>& x, const Vec<1>& u) const override {
    if (u[0] >= 0.5) return Vec<1>::Constant(std::numeric_limits<double>::quiet_NaN());
    return x + u;
  }
};

MdpSpec<1, 1> make_chain_mdp(const Chain1D& dyn, double gamma,
                             std::vector<double> moves, double limit = 1e9) {
  std::vector<Vec<1>> acts;
  for (double m : moves) acts.push_back(Vec<1>::Constant(m));
  MdpSpec<1, 1> mdp;
  mdp.state_bounds = Box<1>(Vec<1>::Constant(-limit), Vec<1>::Constant(limit));
  mdp.action_bounds = Box<1>(Vec<1>::Constant(-10.0), Vec<1>::Constant(10.0));
  mdp.gamma = gamma;
  mdp.dynamics = &dyn;
  // richer near x = 3
  mdp.reward = [](const Vec<1>& x, const Vec<1>&) {
    return std::max(0.0, 1.0 - std::abs(x[0] - 3.0) / 3.0);
  };
  mdp.action_set = ActionSet<1>::discrete(acts, mdp.action_bounds);
  mdp.validate();
  return mdp;
}

}  // namespace

TEST_CASE("search params validation") {
  SearchParams p{100, 7, 10, 2.0, 0};
  CHECK_NOTHROW(p.validate());
  p.L = 0;
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  p = {100, 0, 10, 2.0, 0};
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  p = {100, 7, 0, 2.0, 0};
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
  p = {100, 7, 10, -1.0, 0};
  CHECK_THROWS_AS(p.validate(), std::invalid_argument);
}

TEST_CASE("uct score formula") {
  // 2/4 + 1 * sqrt(ln(16) / 4)
  CHECK(uct_score(2.0, 4, 16, 1.0) ==
        Catch::Approx(1.3325546111576978).margin(1e-12));
  // zero exploration weight reduces to the mean
  CHECK(uct_score(2.0, 4, 16, 0.0) == 0.5);
  // ln(1) = 0: a single-visit parent contributes no exploration bonus
  CHECK(uct_score(0.7, 1, 1, 5.0) == Catch::Approx(0.7));
  CHECK_THROWS_AS(uct_score(1.0, 0, 16, 1.0), MptError);
  CHECK_THROWS_AS(uct_score(1.0, 1, 0, 1.0), MptError);
}

TEST_CASE("reset check fires strictly beyond tau") {
  const Vec<2> root(0.0, 0.0);
  CHECK_FALSE(reset_check(root, Vec<2>(0.3, 0.4), 0.5));  // drift == tau stays
  CHECK(reset_check(root, Vec<2>(0.3, 0.4000001), 0.5));
  CHECK_FALSE(reset_check(root, root, 0.5));
  CHECK_THROWS_AS(reset_check(root, root, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(reset_check(root, root, -1.0), std::invalid_argument);
}

TEST_CASE("select child maximizes uct score, ties keep the earliest") {
  SearchParams p{10, 3, 2, 1.0, 0};
  SearchTree<1, 1> tree(Vec<1>::Zero(), p);
  const auto r = tree.root();
  const auto a = tree.add_child(r, Vec<1>::Constant(1.0), Vec<1>::Constant(1.0), 0.0);
  const auto b = tree.add_child(r, Vec<1>::Constant(2.0), Vec<1>::Constant(2.0), 0.0);
  const auto c = tree.add_child(r, Vec<1>::Constant(3.0), Vec<1>::Constant(3.0), 0.0);

  tree.node_mut(r).N = 16;
  // identical stats: the first child wins
  for (auto id : {a, b, c}) {
    tree.node_mut(id).N = 4;
    tree.node_mut(id).V = 2.0;
  }
  CHECK(tree.select_child(r, 1.0) == a);

  // a clearly better mean wins regardless of position
  tree.node_mut(c).V = 4.0;
  CHECK(tree.select_child(r, 1.0) == c);

  // low visit count gains from the exploration bonus
  tree.node_mut(b).N = 1;
  tree.node_mut(b).V = 0.5;
  CHECK(tree.select_child(r, 10.0) == b);
  CHECK(tree.select_child(r, 0.0) == c);
}

TEST_CASE("backpropagation accumulates discounted sub-path returns") {
  SearchParams p{10, 2, 4, 1.0, 0};
  SearchTree<1, 1> tree(Vec<1>::Zero(), p);
  const auto r = tree.root();
  const auto m = tree.add_child(r, Vec<1>::Constant(1.0), Vec<1>::Constant(1.0), 0.0);
  const auto l = tree.add_child(m, Vec<1>::Constant(2.0), Vec<1>::Constant(1.0), 0.0);

  const std::array<std::uint32_t, 3> path{r, m, l};
  const std::array<double, 3> rewards{1.0, 2.0, 4.0};

  // gamma 0.5, terminal value 8: leaf 0.5*8+4 = 8, mid 0.5*8+2 = 6,
  // root 0.5*6+1 = 4; every node on the path gets one visit
  tree.backpropagate(path, rewards, 0.5, 8.0);
  CHECK(tree.node(l).V == Catch::Approx(8.0));
  CHECK(tree.node(m).V == Catch::Approx(6.0));
  CHECK(tree.node(r).V == Catch::Approx(4.0));
  CHECK(tree.node(r).N == 1);
  CHECK(tree.node(m).N == 1);
  CHECK(tree.node(l).N == 1);

  // second pass adds on top
  tree.backpropagate(path, rewards, 0.5, 0.0);
  CHECK(tree.node(l).V == Catch::Approx(8.0 + 4.0));
  CHECK(tree.node(m).V == Catch::Approx(6.0 + 4.0));
  CHECK(tree.node(r).V == Catch::Approx(4.0 + 3.0));
  CHECK(tree.node(r).N == 2);

  // shorter path: only its nodes are touched
  const std::array<std::uint32_t, 2> short_path{r, m};
  const std::array<double, 2> short_rewards{0.0, 1.0};
  tree.backpropagate(short_path, short_rewards, 0.5, 0.0);
  CHECK(tree.node(l).N == 2);
  CHECK(tree.node(m).N == 3);
  CHECK(tree.node(r).N == 3);

  const std::array<double, 1> misaligned{0.0};
  CHECK_THROWS_AS(tree.backpropagate(path, misaligned, 0.5, 0.0),
                  std::invalid_argument);
}

TEST_CASE("first rollout walks a fresh chain of K+1 transitions") {
  Chain1D dyn;
  const auto mdp = make_chain_mdp(dyn, 0.9, {1.0, -1.0});
  SearchParams p{100, 2, 5, 1.0, 3};
  SearchTree<1, 1> tree(Vec<1>::Zero(), p);
  Rng rng(3);

  const auto path = tree.rollout_once(mdp, rng);
  CHECK(path.size() == static_cast<std::size_t>(p.K + 2));  // root + K+1 nodes
  CHECK(tree.num_nodes() == static_cast<std::size_t>(p.K + 2));
  CHECK(path[0] == tree.root());
  for (std::size_t i = 0; i < path.size(); ++i) {
    CHECK(tree.rel_depth(path[i]) == static_cast<int>(i));
  }
}

TEST_CASE("each early rollout expands one new root child") {
  Chain1D dyn;
  const auto mdp =
      make_chain_mdp(dyn, 0.9, {-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0});
  SearchParams p{100, 7, 4, 1.0, 5};
  SearchTree<1, 1> tree(Vec<1>::Zero(), p);

  for (int i = 1; i <= 7; ++i) {
    tree.uct_search(mdp, 1);
    CHECK(tree.node(tree.root()).num_children == i);
  }
  // all 7 actions present exactly once at the root
  std::set<int> seen;
  for (auto c : tree.children(tree.root())) seen.insert(tree.node(c).action_idx);
  CHECK(seen.size() == 7);
  tree.validate();
}

TEST_CASE("uct search visit accounting") {
  Chain1D dyn;
  const auto mdp = make_chain_mdp(dyn, 0.95, {1.0, -1.0, 0.5});
  SearchParams p{200, 3, 6, 2.0, 9};
  SearchTree<1, 1> tree(Vec<1>::Zero(), p);

  tree.uct_search(mdp, 0);  // no-op
  CHECK(tree.num_nodes() == 1);
  CHECK(tree.rollouts_done() == 0);

  tree.uct_search(mdp, 200);
  CHECK(tree.rollouts_done() == 200);
  CHECK(tree.node(tree.root()).N == 200);
  // children visits sum to the parent's (every rollout passes through one)
  std::uint64_t child_n = 0;
  for (auto c : tree.children(tree.root())) child_n += tree.node(c).N;
  CHECK(child_n == 200);
  tree.validate();

  // branching factor respected everywhere; relative depth capped at K+1
  std::size_t max_depth = 0;
  for (auto id : tree.collect_subtree(tree.root())) {
    CHECK(tree.children(id).size() <= 3);
    max_depth = std::max<std::size_t>(max_depth, tree.rel_depth(id));
  }
  CHECK(max_depth <= static_cast<std::size_t>(p.K + 1));
}

TEST_CASE("search is deterministic for a fixed seed") {
  Chain1D dyn;
  const auto mdp = make_chain_mdp(dyn, 0.9, {1.0, -1.0, 2.0});
  SearchParams p{150, 3, 5, 1.5, 31};
  SearchTree<1, 1> t1(Vec<1>::Zero(), p);
  SearchTree<1, 1> t2(Vec<1>::Zero(), p);
  t1.uct_search(mdp);
  t2.uct_search(mdp);
  REQUIRE(t1.num_nodes() == t2.num_nodes());
  const auto ids1 = t1.collect_subtree(t1.root());
  const auto ids2 = t2.collect_subtree(t2.root());
  REQUIRE(ids1.size() == ids2.size());
  for (std::size_t i = 0; i < ids1.size(); ++i) {
    CHECK(ids1[i] == ids2[i]);
    CHECK(t1.node(ids1[i]).V == t2.node(ids2[i]).V);
    CHECK(t1.node(ids1[i]).N == t2.node(ids2[i]).N);
    CHECK(t1.node(ids1[i]).x == t2.node(ids2[i]).x);
  }
}

TEST_CASE("best child picks the highest mean and ignores exploration") {
  SearchParams p{10, 3, 2, 100.0, 0};
  SearchTree<1, 1> tree(Vec<1>::Zero(), p);
  const auto r = tree.root();
  const auto a = tree.add_child(r, Vec<1>::Constant(1.0), Vec<1>::Constant(1.0), 0.0);
  const auto b = tree.add_child(r, Vec<1>::Constant(2.0), Vec<1>::Constant(2.0), 0.0);
  tree.node_mut(r).N = 30;
  tree.node_mut(a).N = 20;  // mean 0.5
  tree.node_mut(a).V = 10.0;
  tree.node_mut(b).N = 10;  // mean 0.4, but a huge bonus under uct
  tree.node_mut(b).V = 4.0;

  const auto [u, id] = tree.best_child();
  CHECK(id == a);
  CHECK(u[0] == 1.0);
  // under the uct score the low-visit child would have won
  CHECK(tree.select_child(r, 100.0) == b);

  // ties resolve to the earliest child
  tree.node_mut(b).V = 5.0;  // mean 0.5 == a's
  CHECK(tree.best_child().second == a);

  // unvisited children are skipped even with a positive value
  const auto c = tree.add_child(r, Vec<1>::Constant(3.0), Vec<1>::Constant(3.0), 0.0);
  tree.node_mut(c).V = 99.0;
  CHECK(tree.best_child().second == a);
}

TEST_CASE("best child starves without visited children") {
  SearchParams p{10, 3, 2, 1.0, 0};
  SearchTree<1, 1> tree(Vec<1>::Zero(), p);
  CHECK_THROWS_AS(tree.best_child(), StarvationError);
  tree.add_child(tree.root(), Vec<1>::Constant(1.0), Vec<1>::Constant(1.0), 0.0);
  CHECK_THROWS_AS(tree.best_child(), StarvationError);  // child never visited
}

TEST_CASE("uct converges on a depth-2 brute-forced problem") {
  // two moves, depth K=2; enumerate all action sequences for ground truth
  Chain1D dyn;
  const auto mdp = make_chain_mdp(dyn, 0.9, {1.0, -1.0});
  const double g = mdp.gamma;

  double best_ret = -1e18;
  int best_first = -1;
  for (int a0 = 0; a0 < 2; ++a0) {
    for (int a1 = 0; a1 < 2; ++a1) {
      for (int a2 = 0; a2 < 2; ++a2) {
        Vec<1> x = Vec<1>::Zero();
        double ret = 0.0, w = 1.0;
        for (int idx : {a0, a1, a2}) {
          x = dyn.step(x, mdp.action_set.actions[idx]);
          ret += w * mdp.reward(x, mdp.action_set.actions[idx]);
          w *= g;
        }
        if (ret > best_ret + 1e-12) {
          best_ret = ret;
          best_first = a0;
        }
      }
    }
  }
  REQUIRE(best_first == 0);  // moving toward x = 3 must win

  SearchParams p{4000, 2, 2, 2.0, 17};
  SearchTree<1, 1> tree(Vec<1>::Zero(), p);
  tree.uct_search(mdp);
  const auto [u, id] = tree.best_child();
  CHECK(u[0] == mdp.action_set.actions[best_first][0]);
}

TEST_CASE("re-rooting keeps the chosen subtree bit-identical") {
  Chain1D dyn;
  const auto mdp = make_chain_mdp(dyn, 0.9, {1.0, -1.0, 0.5});
  SearchParams p{300, 3, 5, 2.0, 21};
  SearchTree<1, 1> tree(Vec<1>::Zero(), p);
  tree.uct_search(mdp);

  const auto [u, chosen] = tree.best_child();
  const auto keep = tree.collect_subtree(chosen);
  struct Snap {
    Vec<1> x;
    Vec<1> u;
    double V;
    std::uint32_t N, first_child, next_sibling;
    std::uint16_t num_children;
  };
  std::map<std::uint32_t, Snap> before;
  for (auto id : keep) {
    const auto& n = tree.node(id);
    before[id] = {n.x, n.u, n.V, n.N, n.first_child, n.next_sibling, n.num_children};
  }
  const std::size_t keep_count = keep.size();

  tree.re_root(chosen);
  CHECK(tree.root() == chosen);
  CHECK(tree.rel_depth(chosen) == 0);
  CHECK(tree.num_nodes() == keep_count);
  for (auto id : tree.collect_subtree(tree.root())) {
    const auto& n = tree.node(id);
    const auto& s = before.at(id);
    CHECK(n.x == s.x);
    CHECK(n.u == s.u);
    CHECK(n.V == s.V);
    CHECK(n.N == s.N);
    CHECK(n.first_child == s.first_child);
    CHECK(n.num_children == s.num_children);
    // links unchanged except the new root dropping its sibling
    if (id != chosen) CHECK(n.next_sibling == s.next_sibling);
  }
  CHECK(tree.node(chosen).next_sibling == SearchTree<1, 1>::kNull);
  tree.validate();

  // further search on the reused tree keeps the structure sound
  tree.uct_search(mdp, 100);
  tree.validate();
}

TEST_CASE("re-rooting twice equals walking a chain") {
  Chain1D dyn;
  const auto mdp = make_chain_mdp(dyn, 0.9, {1.0, -1.0});
  SearchParams p{200, 2, 4, 2.0, 8};
  SearchTree<1, 1> tree(Vec<1>::Zero(), p);
  tree.uct_search(mdp);
  const auto c1 = tree.best_child().second;
  const auto grandchildren = tree.children(c1);
  tree.re_root(c1);
  REQUIRE_FALSE(grandchildren.empty());
  // the previous grandchild layer is now the child layer
  CHECK(tree.children(tree.root()) == grandchildren);
  for (auto g : grandchildren) CHECK(tree.rel_depth(g) == 1);
}

TEST_CASE("re-rooting rejects non-children") {
  Chain1D dyn;
  const auto mdp = make_chain_mdp(dyn, 0.9, {1.0, -1.0});
  SearchParams p{50, 2, 3, 1.0, 4};
  SearchTree<1, 1> tree(Vec<1>::Zero(), p);
  tree.uct_search(mdp);
  const auto c = tree.children(tree.root())[0];
  const auto kids = tree.children(c);
  REQUIRE_FALSE(kids.empty());
  CHECK_THROWS_AS(tree.re_root(kids[0]), MptError);   // grandchild
  CHECK_THROWS_AS(tree.re_root(tree.root()), MptError);  // the root itself
}

TEST_CASE("reset drops everything and restarts cold") {
  Chain1D dyn;
  const auto mdp = make_chain_mdp(dyn, 0.9, {1.0, -1.0});
  SearchParams p{100, 2, 4, 1.0, 6};
  SearchTree<1, 1> tree(Vec<1>::Zero(), p);
  tree.uct_search(mdp);
  REQUIRE(tree.num_nodes() > 1);

  tree.reset(Vec<1>::Constant(7.0));
  CHECK(tree.num_nodes() == 1);
  const auto& r = tree.node(tree.root());
  CHECK(r.x[0] == 7.0);
  CHECK(r.N == 0);
  CHECK(r.V == 0.0);
  CHECK(r.first_child == SearchTree<1, 1>::kNull);
  CHECK(tree.rel_depth(tree.root()) == 0);

  // freed arena slots get recycled instead of growing the arena
  tree.uct_search(mdp, 50);
  tree.validate();
}

TEST_CASE("terminal states stop rollouts and earn nothing") {
  Chain1D dyn;
  // leaving |x| <= 1.5 is invalid, so both actions lead to terminal states
  // within two steps
  const auto mdp = make_chain_mdp(dyn, 0.9, {1.0, -1.0}, 1.5);
  SearchParams p{200, 2, 6, 1.0, 13};
  SearchTree<1, 1> tree(Vec<1>::Zero(), p);
  tree.uct_search(mdp);

  int terminals = 0;
  for (auto id : tree.collect_subtree(tree.root())) {
    const auto& n = tree.node(id);
    if (n.terminal) {
      ++terminals;
      CHECK(n.reward == 0.0);
      CHECK(n.num_children == 0);  // never expanded
      CHECK(n.N >= 1);             // but re-selectable
    }
  }
  CHECK(terminals > 0);
  tree.validate();
}

TEST_CASE("non-finite dynamics truncate the rollout with a warning") {
  Fragile1D dyn;
  MdpSpec<1, 1> mdp;
  mdp.state_bounds = Box<1>(Vec<1>::Constant(-100.0), Vec<1>::Constant(100.0));
  mdp.action_bounds = Box<1>(Vec<1>::Constant(-1.0), Vec<1>::Constant(1.0));
  mdp.gamma = 0.9;
  mdp.dynamics = &dyn;
  mdp.reward = [](const Vec<1>&, const Vec<1>&) { return 0.5; };
  std::vector<Vec<1>> acts{Vec<1>::Constant(-0.5), Vec<1>::Constant(0.9)};
  mdp.action_set = ActionSet<1>::discrete(acts, mdp.action_bounds);

  SearchParams p{100, 2, 4, 1.0, 2};
  SearchTree<1, 1> tree(Vec<1>::Zero(), p);
  tree.uct_search(mdp);
  CHECK(tree.rollout_warnings() > 0);
  CHECK_FALSE(tree.last_warning().empty());
  CHECK(tree.rollouts_done() == 100);  // search kept going
  tree.validate();
  // no NaN ever entered the arena
  for (auto id : tree.collect_subtree(tree.root())) {
    CHECK(std::isfinite(tree.node(id).x[0]));
  }
}

TEST_CASE("continuous action mode samples inside the bounds") {
  Chain1D dyn;
  MdpSpec<1, 1> mdp;
  mdp.state_bounds = Box<1>(Vec<1>::Constant(-1e6), Vec<1>::Constant(1e6));
  mdp.action_bounds = Box<1>(Vec<1>::Constant(-0.25), Vec<1>::Constant(0.75));
  mdp.gamma = 0.9;
  mdp.dynamics = &dyn;
  mdp.reward = [](const Vec<1>& x, const Vec<1>&) { return x[0]; };
  mdp.action_set = ActionSet<1>::continuous(mdp.action_bounds);

  SearchParams p{300, 4, 3, 1.0, 12};
  SearchTree<1, 1> tree(Vec<1>::Zero(), p);
  tree.uct_search(mdp);
  for (auto id : tree.collect_subtree(tree.root())) {
    if (id == tree.root()) continue;
    CHECK(tree.node(id).u[0] >= -0.25);
    CHECK(tree.node(id).u[0] <= 0.75);
    CHECK(tree.node(id).action_idx == -1);
  }
  for (auto id : tree.collect_subtree(tree.root())) {
    CHECK(tree.children(id).size() <= 4);
  }
  tree.validate();
}

TEST_CASE("snapshot emits one valid json object per node") {
  Chain1D dyn;
  const auto mdp = make_chain_mdp(dyn, 0.9, {1.0, -1.0});
  SearchParams p{60, 2, 3, 1.0, 19};
  SearchTree<1, 1> tree(Vec<1>::Zero(), p);
  tree.uct_search(mdp);

  std::ostringstream os;
  tree.write_snapshot(os);
  std::istringstream is(os.str());
  std::string line;
  std::set<std::uint64_t> ids;
  std::size_t lines = 0;
  std::uint64_t root_id = 0;
  bool first = true;
  while (std::getline(is, line)) {
    const auto j = nlohmann::json::parse(line);
    const std::uint64_t id = j.at("id").get<std::uint64_t>();
    CHECK(ids.insert(id).second);  // unique
    if (first) {
      CHECK(j.at("parent_id").is_null());
      root_id = id;
      first = false;
    } else {
      CHECK_FALSE(j.at("parent_id").is_null());
    }
    const auto& n = tree.node(static_cast<std::uint32_t>(id));
    CHECK(j.at("V").get<double>() == n.V);
    CHECK(j.at("N").get<std::uint64_t>() == n.N);
    CHECK(j.at("state").at(0).get<double>() == n.x[0]);
    CHECK(j.at("action").at(0).get<double>() == n.u[0]);
    ++lines;
  }
  CHECK(lines == tree.num_nodes());
  CHECK(root_id == tree.root());
}
