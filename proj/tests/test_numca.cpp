#include <doctest.h>

#include <algorithm>
#include <set>

#include "test_util.hpp"
#include "tokval/errors.hpp"
#include "tokval/numca.hpp"

using namespace tokval;
using testutil::make_group;
using testutil::make_rollout;

namespace {

const auto kAll = MilestonePatterns::all();

AbstractState state_of(std::initializer_list<const char*> items) {
  AbstractState s;
  for (const char* i : items) s.insert(i);
  return s;
}

}  // namespace

TEST_CASE("milestone extraction examples") {
  using V = std::vector<std::string>;
  CHECK(extract_milestones("the answer is 42.", kAll) == V{"42"});
  CHECK(extract_milestones("so 3/4 plus 0.25 gives 1", kAll) == V{"3/4", "0.25", "1"});
  CHECK(extract_milestones("no numbers here", kAll).empty());
  CHECK(extract_milestones("take \\frac{1}{2} of -6", kAll) == V{"1/2", "-6"});
  CHECK(extract_milestones("x=+042 and 007.50", kAll) == V{"42", "7.50"});
}

TEST_CASE("pattern subsets change what matches") {
  const auto ints = MilestonePatterns::from_names({"signed_integer"});
  CHECK(extract_milestones("0.25 and 3/4", ints) == std::vector<std::string>{"0", "25", "3", "4"});
  CHECK(MilestonePatterns::from_names(kAll.names()).names() == kAll.names());
  CHECK_THROWS_AS(MilestonePatterns::from_names({"roman"}), ConfigError);
}

TEST_CASE("normalisation strips plus and leading zeros") {
  CHECK(normalize_number("042") == "42");
  CHECK(normalize_number("+7") == "7");
  CHECK(normalize_number("-003/010") == "-3/10");
  CHECK(normalize_number("000") == "0");
  CHECK(normalize_number("0.05") == "0.05");
}

TEST_CASE("abstract states use set semantics") {
  CHECK(state_of({"3", "3"}) == state_of({"3"}));
  CHECK(state_of({"7", "42"}) == state_of({"42", "7"}));
  CHECK(AbstractStateHash{}(state_of({"7", "42"})) == AbstractStateHash{}(state_of({"42", "7"})));
  const auto g = make_group(0, {make_rollout(0, 0, {" 3", " then", " 3"}, 1.0)});
  const auto table = build_table(g, kAll);
  CHECK(table.size() == 2);
  CHECK(table.at(state_of({"3"})).count == 1);
}

TEST_CASE("no numbers: only the empty state") {
  const auto g = make_group(0, {make_rollout(0, 0, {" so", " then"}, 1.0), make_rollout(1, 0, {" ok"}, 0.0)});
  const auto table = build_table(g, kAll);
  REQUIRE(table.size() == 1);
  CHECK(table.at(AbstractState{}).count == 2);
  CHECK(table.at(AbstractState{}).reward_sum == 1.0);
}

TEST_CASE("three-rollout table and values") {
  const auto g = make_group(0, {make_rollout(0, 0, {" so", " 42", " done"}, 1.0),
                                make_rollout(1, 0, {" we", " get", " 42"}, 0.0),
                                make_rollout(2, 0, {" hmm", " 7", " ok"}, 1.0)});
  const auto table = build_table(g, kAll);
  CHECK(table.size() == 3);
  CHECK(table.at(state_of({"42"})).count == 2);
  CHECK(table.at(state_of({"42"})).reward_sum == 1.0);
  CHECK(table.at(state_of({"7"})).count == 1);
  CHECK(table.at(state_of({"7"})).reward_sum == 1.0);
  CHECK(table.at(AbstractState{}).count == 3);
  CHECK(table.at(AbstractState{}).reward_sum == 2.0);

  const auto va = numca_values(g, kAll);
  CHECK(va[0].values == std::vector<double>{2.0 / 3.0, 0.5, 0.5});
  CHECK(va[1].values == std::vector<double>{2.0 / 3.0, 2.0 / 3.0, 0.5});
  CHECK(va[2].values == std::vector<double>{2.0 / 3.0, 1.0, 1.0});
  CHECK(va[0].advantages[1] == 0.5);
  CHECK(va[1].advantages[2] == -0.5);
}

TEST_CASE("milestones spanning tokens take effect at their last character") {
  const auto r = make_rollout(0, 0, {" 4", "2", " then", " 1", ".5"}, 1.0);
  const auto trace = abstract_state_trace(r, kAll);
  REQUIRE(trace.size() == 5);
  CHECK(trace[0].empty());
  CHECK(trace[1] == state_of({"42"}));
  CHECK(trace[2] == state_of({"42"}));
  CHECK(trace[3].empty() == false);
  CHECK(trace[4] == state_of({"42", "1.5"}));
}

TEST_CASE("prompt numbers are ignored") {
  auto r = make_rollout(0, 0, {" so"}, 1.0);
  r.tokens = {"What is 6*7?", " so"};
  CHECK(abstract_state_trace(r, kAll)[0].empty());
}

TEST_CASE("single rollout values are its own reward") {
  const auto g = make_group(0, {make_rollout(0, 0, {" 1", " x", " 2.5"}, 0.75)});
  const auto va = numca_values(g, kAll);
  for (double v : va[0].values) CHECK(v == 0.75);
}

TEST_CASE("no digits: numca equals grpo exactly") {
  Rng rng(8);
  std::vector<Rollout> rs;
  for (int i = 0; i < 9; ++i)
    rs.push_back(make_rollout(i, 0, {" one", " two", " three"}, uniform01(rng) < 0.4 ? 1.0 : 0.0));
  const auto g = make_group(0, rs);
  const auto a = numca_values(g, kAll);
  const auto b = grpo_values(g);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].values == b[i].values);
    CHECK(a[i].advantages == b[i].advantages);
  }
}

TEST_CASE("table consistency and monotone traces on random rollouts") {
  Rng rng(12);
  const std::vector<std::string> pieces = {" 1", " 2", " 3/4", " so", " 0.5", " x", "7", " -2"};
  std::vector<Rollout> rs;
  for (int i = 0; i < 20; ++i) {
    std::vector<std::string> toks;
    const std::size_t n = 1 + static_cast<std::size_t>(uniform01(rng) * 10);
    for (std::size_t t = 0; t < n; ++t)
      toks.push_back(pieces[static_cast<std::size_t>(uniform01(rng) * pieces.size())]);
    rs.push_back(make_rollout(i, 0, toks, uniform01(rng) < 0.5 ? 1.0 : 0.0));
  }
  const auto g = make_group(0, rs);
  const auto table = build_table(g, kAll);
  std::size_t distinct_total = 0;
  for (const auto& r : rs) {
    const auto trace = abstract_state_trace(r, kAll);
    std::set<AbstractState> visited = {AbstractState{}};
    for (std::size_t t = 0; t < trace.size(); ++t) {
      visited.insert(trace[t]);
      const auto& prev = t ? trace[t - 1].milestones() : std::vector<std::string>{};
      CHECK(std::includes(trace[t].milestones().begin(), trace[t].milestones().end(), prev.begin(), prev.end()));
    }
    distinct_total += visited.size();
  }
  std::size_t counted = 0;
  for (const auto& [s, e] : table) {
    counted += e.count;
    CHECK(e.value() >= 0.0);
    CHECK(e.value() <= 1.0);
  }
  CHECK(counted == distinct_total);

  auto reversed = rs;
  std::reverse(reversed.begin(), reversed.end());
  const auto a = numca_values(g, kAll);
  const auto b = numca_values(make_group(0, reversed), kAll);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].values == b[a.size() - 1 - i].values);
}
