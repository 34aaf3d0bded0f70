#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "test_util.hpp"
#include "tokval/errors.hpp"
#include "tokval/hista.hpp"

using namespace tokval;
using testutil::make_group;
using testutil::make_rollout;

namespace {

Embeddings rows(std::initializer_list<std::initializer_list<double>> data) {
  const std::size_t cols = data.begin()->size();
  Embeddings m(data.size(), cols);
  std::size_t r = 0;
  for (const auto& row : data) {
    std::size_t c = 0;
    for (double v : row) m(r, c++) = v;
    ++r;
  }
  return m;
}

CompressedTrace random_trace(Rng& rng, std::size_t n, std::size_t d, std::size_t delta) {
  CompressedTrace t;
  t.embeddings = Embeddings(n * delta, d);
  for (auto& v : t.embeddings.flat()) v = standard_normal(rng);
  for (std::size_t p = delta; p <= n * delta; p += delta) t.state_positions.push_back(p);
  return t;
}

// Direct transcription of the definition, independent of min_distance.
double naive_md(const Embeddings& a, std::size_t na, const Embeddings& b, std::size_t nb) {
  auto directional = [](const Embeddings& x, std::size_t nx, const Embeddings& y, std::size_t ny) {
    double sum = 0.0;
    for (std::size_t i = 0; i < nx; ++i) {
      double best = INFINITY;
      for (std::size_t j = 0; j < ny; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < x.cols(); ++c) s += (x(i, c) - y(j, c)) * (x(i, c) - y(j, c));
        best = std::min(best, std::sqrt(s));
      }
      sum += best;
    }
    return sum;
  };
  if (na > nb) return directional(a, na, b, nb);
  if (nb > na) return directional(b, nb, a, na);
  return 0.5 * (directional(a, na, b, nb) + directional(b, nb, a, na));
}

Rollout rollout_with_hidden(std::int64_t id, double reward, const std::vector<std::vector<float>>& hidden) {
  std::vector<std::string> toks(hidden.size(), " x");
  auto r = make_rollout(id, 0, toks, reward, hidden[0].size());
  for (std::size_t t = 0; t < hidden.size(); ++t)
    for (std::size_t c = 0; c < hidden[t].size(); ++c) r.hidden(t, c) = hidden[t][c];
  return r;
}

HistaParams raw_params(std::size_t k = 66) {
  HistaParams p;
  p.alpha = 0.0;
  p.phi = 1;
  p.delta = 1;
  p.k = k;
  return p;
}

}  // namespace

TEST_CASE("defaults follow the published settings") {
  const HistaParams p;
  CHECK(p.alpha == 0.7);
  CHECK(p.phi == 5);
  CHECK(p.delta == 50);
  CHECK(p.k == 66);
  CHECK_NOTHROW(validate_hista_params(p));
  auto bad = p;
  bad.alpha = 1.0;
  CHECK_THROWS_AS(validate_hista_params(bad), ConfigError);
  bad = p;
  bad.k = 0;
  CHECK_THROWS_AS(validate_hista_params(bad), ConfigError);
}

TEST_CASE("EMA compression") {
  HiddenMatrix h(3, 1);
  h(0, 0) = 1;
  h(1, 0) = 3;
  h(2, 0) = 5;
  const auto e = compress(h, 0.5, 2);
  REQUIRE(e.rows() == 1);
  CHECK(e(0, 0) == 2.0);

  const auto raw = compress(h, 0.0, 1);
  for (std::size_t t = 0; t < 3; ++t) CHECK(raw(t, 0) == h(t, 0));

  HiddenMatrix c(7, 2);
  for (std::size_t t = 0; t < 7; ++t) {
    c(t, 0) = 0.25f;
    c(t, 1) = -2.0f;
  }
  const auto fixed = compress(c, 0.7, 3);
  CHECK(fixed.rows() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(fixed(i, 0) == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(fixed(i, 1) == doctest::Approx(-2.0).epsilon(1e-15));
  }
  CHECK_THROWS_AS(compress(h, 0.5, 4), ValidationError);
}

TEST_CASE("compressed trace layout") {
  auto r = make_rollout(0, 0, std::vector<std::string>(23, " x"), 1.0, 3);
  HistaParams p;
  p.phi = 2;
  p.delta = 3;
  const auto tr = compress_trace(r, p);
  CHECK(tr.embeddings.rows() == 11);
  CHECK(tr.state_positions == std::vector<std::size_t>{3, 6, 9});
  auto short_r = make_rollout(1, 0, {" x"}, 1.0, 3);
  CHECK(compress_trace(short_r, p).state_positions.empty());
}

TEST_CASE("min distance examples") {
  CHECK(min_distance(rows({{0, 0}, {1, 0}}), rows({{0, 0}})) == 1.0);
  CHECK(min_distance(rows({{0, 0}}), rows({{3, 4}})) == 5.0);
  const auto x = rows({{1, 2}, {3, 4}, {5, 6}});
  CHECK(min_distance(x, x) == 0.0);
  CHECK_THROWS_AS(min_distance(rows({{0, 0}}), rows({{0, 0, 0}})), ValidationError);
}

TEST_CASE("min distance is symmetric and scale equivariant") {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const auto a = random_trace(rng, 1 + trial % 5, 3, 1);
    const auto b = random_trace(rng, 1 + trial % 3, 3, 1);
    CHECK(min_distance(a.embeddings, b.embeddings) == min_distance(b.embeddings, a.embeddings));
    auto a2 = a.embeddings, b2 = b.embeddings;
    for (auto& v : a2.flat()) v *= -2.5;
    for (auto& v : b2.flat()) v *= -2.5;
    CHECK(min_distance(a2, b2) == doctest::Approx(2.5 * min_distance(a.embeddings, b.embeddings)).epsilon(1e-12));
  }
}

TEST_CASE("prefix grid equals naive recomputation on all small shapes") {
  Rng rng(99);
  for (std::size_t na = 1; na <= 8; ++na)
    for (std::size_t nb = 1; nb <= 8; ++nb)
      for (std::size_t delta : {1, 2}) {
        const auto a = random_trace(rng, na, 3, delta);
        const auto b = random_trace(rng, nb, 3, delta);
        const auto grid = prefix_distance_grid(a, b);
        REQUIRE(grid.rows() == na);
        REQUIRE(grid.cols() == nb);
        for (std::size_t i = 0; i < na; ++i)
          for (std::size_t j = 0; j < nb; ++j) {
            const double want = naive_md(a.embeddings, a.state_positions[i], b.embeddings, b.state_positions[j]);
            CHECK(std::abs(grid(i, j) - want) <= 1e-12 * std::max(1.0, want));
            CHECK(grid(i, j) == min_distance(RowsView(a.embeddings).prefix(a.state_positions[i]),
                                             RowsView(b.embeddings).prefix(b.state_positions[j])));
          }
      }
  const auto a = random_trace(rng, 6, 3, 1);
  const auto self = prefix_distance_grid(a, a);
  for (std::size_t i = 0; i < 6; ++i) CHECK(self(i, i) == 0.0);
}

TEST_CASE("inverse distance values") {
  const std::vector<Neighbor> two = {{1, 0, 1.0, 1.0}, {2, 0, 3.0, 0.0}};
  CHECK(inverse_distance_value(two) == doctest::Approx(0.75).epsilon(1e-15));
  const std::vector<Neighbor> tie = {{1, 0, 2.0, 1.0}, {2, 0, 2.0, 0.0}};
  CHECK(inverse_distance_value(tie) == 0.5);
}

TEST_CASE("neighbour selection floors, sorts and breaks ties") {
  std::vector<Neighbor> c = {{5, 1, 2.0, 1.0}, {3, 2, 2.0, 0.0}, {3, 0, 0.0, 1.0}, {1, 0, 7.0, 0.0}};
  const auto nb = select_neighbors(c, 3, 1e-6);
  REQUIRE(nb.size() == 3);
  CHECK(nb[0].rollout_id == 3);
  CHECK(nb[0].distance == 1e-6);
  CHECK(nb[1].rollout_id == 3);
  CHECK(nb[1].state_index == 2);
  CHECK(nb[2].rollout_id == 5);
  CHECK(select_neighbors(c, 10, 1e-6).size() == 4);
}

TEST_CASE("hista values: hand example with two neighbours") {
  // Query rollout 0 has one state at (0). Rollout 1 sits at distance 1, rollout 2 at distance 3.
  const auto g = make_group(0, {rollout_with_hidden(0, 0.0, {{0, 0}}), rollout_with_hidden(1, 1.0, {{1, 0}}),
                                rollout_with_hidden(2, 0.0, {{0, 3}})});
  const auto va = hista_values(g, raw_params());
  CHECK(va[0].values[0] == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(va[0].advantages[0] == doctest::Approx(-0.75).epsilon(1e-12));
  const auto nb = hista_neighbors(g, raw_params(), 0, 0);
  REQUIRE(nb.size() == 2);
  CHECK(nb[0].rollout_id == 1);
  CHECK(nb[0].distance == 1.0);
  CHECK(nb[1].distance == 3.0);
}

TEST_CASE("hista values: equal rewards give that reward") {
  std::vector<Rollout> rs;
  for (int i = 0; i < 5; ++i) rs.push_back(make_rollout(i, 0, std::vector<std::string>(4 + i, " x"), 0.5, 4));
  for (const auto& va : hista_values(make_group(0, rs), raw_params(3))) {
    for (double v : va.values) CHECK(v == doctest::Approx(0.5).epsilon(1e-15));
  }
}

TEST_CASE("hista needs two rollouts") {
  const auto g = make_group(0, {make_rollout(0, 0, {" x", " y"}, 1.0)});
  CHECK_THROWS_AS(hista_values(g, raw_params()), ValidationError);
}

TEST_CASE("hista token spreading and short rollouts") {
  HistaParams p = raw_params();
  p.delta = 2;
  std::vector<Rollout> rs;
  for (int i = 0; i < 4; ++i)
    rs.push_back(make_rollout(i, 0, std::vector<std::string>(i == 3 ? 1 : 5, " x"), i % 2 ? 1.0 : 0.0, 3));
  const auto g = make_group(0, rs);
  const auto va = hista_values(g, p);
  const double mean = g.mean_reward();
  // Token 0 precedes the first sampled state; tokens 1-2 inherit state 1, tokens 3-4 inherit state 2.
  CHECK(va[0].values[0] == mean);
  CHECK(va[0].values[1] == va[0].values[2]);
  CHECK(va[0].values[3] == va[0].values[4]);
  CHECK(va[3].values == std::vector<double>{mean});
  const auto probe = hista_state_values(g, p, std::vector<StateRef>{{0, 0, 2}, {0, 0, 4}, {0, 3, 0}});
  CHECK(probe == std::vector<double>{va[0].values[2], va[0].values[4], mean});
  CHECK_THROWS_AS(hista_state_values(g, p, std::vector<StateRef>{{0, 0, 5}}), ValidationError);
}

TEST_CASE("hista properties on random groups") {
  Rng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Rollout> rs;
    const std::size_t n = 2 + static_cast<std::size_t>(uniform01(rng) * 5);
    for (std::size_t i = 0; i < n; ++i)
      rs.push_back(make_rollout(static_cast<std::int64_t>(i), 0,
                                std::vector<std::string>(1 + static_cast<std::size_t>(uniform01(rng) * 8), " x"),
                                uniform01(rng), 3, 100 + trial));
    const auto g = make_group(0, rs);
    const auto p = raw_params(1000);
    const auto base = hista_values(g, p);

    auto bigger = p;
    bigger.k = 5000;
    const auto same_k = hista_values(g, bigger);

    auto scaled = g;
    for (auto& r : scaled.rollouts)
      for (auto& v : r.hidden.flat()) v *= 4.0f;
    const auto scaled_va = hista_values(scaled, p);

    const auto threaded = hista_values(g, p, {}, 4);
    for (std::size_t i = 0; i < n; ++i) {
      double lo = 1.0, hi = 0.0;
      for (std::size_t j = 0; j < n; ++j)
        if (j != i) {
          lo = std::min(lo, rs[j].reward);
          hi = std::max(hi, rs[j].reward);
        }
      for (std::size_t t = 0; t < base[i].values.size(); ++t) {
        CHECK(base[i].values[t] >= lo - 1e-12);
        CHECK(base[i].values[t] <= hi + 1e-12);
        CHECK(scaled_va[i].values[t] == doctest::Approx(base[i].values[t]).epsilon(1e-6));
      }
      CHECK(same_k[i].values == base[i].values);
      CHECK(threaded[i].values == base[i].values);
    }
  }
}

TEST_CASE("zero-distance neighbour dominates") {
  const auto g = make_group(0, {rollout_with_hidden(0, 0.0, {{0, 0}}), rollout_with_hidden(1, 1.0, {{0, 0}}),
                                rollout_with_hidden(2, 0.0, {{5, 0}}), rollout_with_hidden(3, 0.0, {{0, 7}})});
  const auto p = raw_params();
  const double v = hista_values(g, p)[0].values[0];
  CHECK(std::abs(v - 1.0) <= p.eps_dist * p.k);
}
