// Acceptance gate: one PASS/FAIL line per criterion, exit 1 if any fails.
#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "tokval/baseline.hpp"
#include "tokval/hista.hpp"
#include "tokval/numca.hpp"
#include "tokval/rng.hpp"
#include "tokval/sveb.hpp"
#include "tokval/synth_env.hpp"
#include "tokval/theory.hpp"

using namespace tokval;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int prec = 4) {
  std::ostringstream ss;
  ss.precision(prec);
  ss << v;
  return ss.str();
}

std::size_t worker_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

// 1
Outcome theorem_oracle() {
  const auto r = theory::theorem_b2_oracle(100000, 20240611);
  return {r.violations == 0 && r.witnesses >= 1,
          std::to_string(r.satisfying) + " instances satisfy the assumption, " + std::to_string(r.violations) +
              " violations, " + std::to_string(r.witnesses) + " witnesses"};
}

// 2
Outcome bias_identity() {
  Rng rng(7);
  std::size_t bad = 0;
  double worst = 0.0;
  for (int i = 0; i < 10000; ++i) {
    theory::PwInstance inst;
    const std::size_t n = 1 + static_cast<std::size_t>(uniform01(rng) * 16);
    for (std::size_t j = 0; j < n; ++j) {
      inst.values.push_back(uniform01(rng));
      inst.weights.push_back(uniform01(rng) + (j == 0 ? 1e-3 : 0.0));
    }
    inst.target = uniform01(rng);
    const auto b = theory::pw_bias_decomposition(inst);
    // Independent evaluation of both sides over the uniform index.
    double mean_v = 0.0, num = 0.0, den = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      mean_v += inst.values[j] / n;
      num += inst.weights[j] * inst.values[j];
      den += inst.weights[j];
    }
    double ex = 0.0, ew = 0.0, exw = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double x = inst.values[j] - inst.target;
      ex += x / n;
      ew += inst.weights[j] / n;
      exw += x * inst.weights[j] / n;
    }
    const double cov = exw - ex * ew;
    const double r1 = std::abs((num / den - inst.target) - (ex + cov / ew));
    const double r2 = std::abs((mean_v - inst.target) - ex);
    const double r3 = std::max(std::abs(b.pw_residual()), std::abs(b.avg_residual()));
    worst = std::max({worst, r1, r2, r3});
    if (r1 > 1e-12 || r2 > 1e-12 || r3 > 1e-12) ++bad;
  }
  return {bad == 0, "max residual " + fmt(worst, 3) + ", " + std::to_string(bad) + " failures"};
}

HistaParams acceptance_hista() {
  HistaParams p;
  p.alpha = 0.0;
  p.phi = 1;
  p.delta = 1;
  p.k = 8;
  return p;
}

// 3
Outcome sveb_direction() {
  int hista_wins = 0, numca_wins = 0;
  std::string detail;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const NumberChain chain(number_chain_preset(6, 16, 0.1, seed));
    std::size_t prompts = 320;
    Simulation sim;
    std::vector<Group> kept;
    while (true) {
      sim = chain.generate(prompts, 8, worker_threads());
      kept = difficulty_filter(sim.groups);
      if (kept.size() >= 200) break;
      prompts += prompts / 2;
    }
    kept.resize(200);
    const auto states = collect_states(kept, 5, seed);
    const auto refs = reference_values(kept, states, ReferenceSpec{}, &chain, &sim.latents, nullptr);
    SvebOptions opt;
    opt.methods = {"grpo", "numca", "hista"};
    opt.hista = acceptance_hista();
    opt.seed = seed;
    opt.threads = worker_threads();
    const auto records = evaluate_states(kept, states, refs, opt, nullptr);
    const double g = mae(records, "grpo"), n = mae(records, "numca"), h = mae(records, "hista");
    hista_wins += h < g;
    numca_wins += n < g;
    if (seed <= 3) detail += " s" + std::to_string(seed) + "[g " + fmt(g, 3) + " n " + fmt(n, 3) + " h " + fmt(h, 3) + "]";
  }
  return {hista_wins >= 9 && numca_wins >= 9,
          "hista<grpo " + std::to_string(hista_wins) + "/10, numca<grpo " + std::to_string(numca_wins) + "/10;" + detail};
}

// 4
Outcome numca_degeneracy() {
  const auto sim = generate(number_chain_preset(6, 16, 0.1, 4, false), 200, 8, worker_threads());
  const auto patterns = MilestonePatterns::all();
  std::size_t tokens = 0, mismatches = 0;
  for (const auto& g : sim.groups) {
    const auto a = numca_values(g, patterns);
    const auto b = grpo_values(g);
    for (std::size_t i = 0; i < a.size(); ++i) {
      tokens += a[i].values.size();
      for (std::size_t t = 0; t < a[i].values.size(); ++t)
        mismatches += a[i].values[t] != b[i].values[t] || a[i].advantages[t] != b[i].advantages[t];
    }
  }
  return {mismatches == 0 && tokens > 0, std::to_string(tokens) + " tokens, " + std::to_string(mismatches) + " mismatches"};
}

// 5
Outcome mcs_ordering() {
  int ordered = 0;
  const int runs = 40;
  for (int run = 0; run < runs; ++run) {
    const std::uint64_t seed = 1000 + static_cast<std::uint64_t>(run);
    const NumberChain chain(number_chain_preset(6, 16, 0.1, seed));
    const auto sim = chain.generate(100, 8, worker_threads());
    const auto groups = difficulty_filter(sim.groups);
    const auto states = collect_states(groups, 5, seed);
    const auto refs = reference_values(groups, states, ReferenceSpec{}, &chain, &sim.latents, nullptr);
    const SyntheticContinuations conts(chain, groups, sim.latents, seed);
    SvebOptions opt;
    opt.methods = {"mcs@1", "mcs@2", "mcs@3"};
    opt.threads = worker_threads();
    const auto records = evaluate_states(groups, states, refs, opt, &conts);
    const double m1 = mae(records, "mcs@1"), m2 = mae(records, "mcs@2"), m3 = mae(records, "mcs@3");
    ordered += m1 > m2 && m2 > m3;
  }
  return {ordered * 100 >= 95 * runs, std::to_string(ordered) + "/" + std::to_string(runs) + " runs ordered"};
}

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

CompressedTrace random_trace(Rng& rng, std::size_t states, std::size_t dim, std::size_t delta) {
  CompressedTrace t;
  t.embeddings = Embeddings(states * delta, dim);
  for (auto& v : t.embeddings.flat()) v = standard_normal(rng);
  for (std::size_t p = delta; p <= states * delta; p += delta) t.state_positions.push_back(p);
  return t;
}

double time_grid(const CompressedTrace& a, const CompressedTrace& b) {
  std::vector<double> times;
  volatile double sink = 0.0;
  for (int r = 0; r < 15; ++r) {
    const auto t0 = Clock::now();
    const auto g = prefix_distance_grid(a, b);
    times.push_back(seconds_since(t0));
    sink = sink + g(0, 0);
  }
  return *std::min_element(times.begin(), times.end());
}

// 6
Outcome grid_oracle_and_scaling() {
  Rng rng(66);
  std::size_t bad = 0;
  double worst = 0.0;
  for (int c = 0; c < 1000; ++c) {
    const std::size_t na = 1 + static_cast<std::size_t>(uniform01(rng) * 8);
    const std::size_t nb = 1 + static_cast<std::size_t>(uniform01(rng) * 8);
    const std::size_t d = 1 + static_cast<std::size_t>(uniform01(rng) * 8);
    const std::size_t delta = 1 + static_cast<std::size_t>(uniform01(rng) * 3);
    const auto a = random_trace(rng, na, d, delta);
    const auto b = random_trace(rng, nb, d, delta);
    const auto grid = prefix_distance_grid(a, b);
    for (std::size_t i = 0; i < na; ++i)
      for (std::size_t j = 0; j < nb; ++j) {
        const double want = naive_md(a.embeddings, a.state_positions[i], b.embeddings, b.state_positions[j]);
        const double rel = std::abs(grid(i, j) - want) / std::max(want, 1e-300);
        worst = std::max(worst, rel);
        if (rel > 1e-5) ++bad;
      }
  }

  const std::size_t dim = 16, fixed = 512;
  const auto base = random_trace(rng, fixed, dim, 1);
  const auto small = random_trace(rng, 512, dim, 1);
  const auto large = random_trace(rng, 1024, dim, 1);
  const double t_small = time_grid(small, base);
  const double t_large = time_grid(large, base);
  const double one_side = t_large / t_small;
  const double both = time_grid(large, large) / time_grid(small, small);
  return {bad == 0 && one_side <= 2.5,
          "1000 cases, max rel err " + fmt(worst, 3) + "; one-side doubling x" + fmt(one_side, 3) +
              " (both sides x" + fmt(both, 3) + ")"};
}

// 7
Outcome theory_suite() {
  const auto results = theory::run_suites({});
  bool ok = true;
  std::string failed;
  for (const auto& r : results) {
    const bool wanted = r.name == "rmsnorm_lipschitz" || r.name == "rmsnorm_magnitude" ||
                        r.name == "softmax_half_lipschitz" || r.name == "structured_softmax_identity";
    if (wanted && (!r.passed || r.violations != 0)) {
      ok = false;
      failed += " " + r.name;
    }
    if (r.name == "rmsnorm_lipschitz" || r.name == "softmax_half_lipschitz") ok = ok && r.trials >= 100000;
    if (r.name == "structured_softmax_identity") ok = ok && r.trials >= 10000;
  }
  theory::SuiteOptions faulty;
  faulty.fault = theory::Fault::kSoftmaxFactor;
  bool fault_caught = false;
  for (const auto& r : theory::run_suites(faulty))
    if (r.name == "softmax_half_lipschitz") fault_caught = !r.passed;
  return {ok && fault_caught, std::string("suites ") + (ok ? "clean" : "failed:" + failed) +
                                  ", injected fault " + (fault_caught ? "caught" : "missed")};
}

// 8
Outcome gae_oracle() {
  Rng rng(8);
  std::size_t bad = 0;
  double worst = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const std::size_t T = 1 + static_cast<std::size_t>(uniform01(rng) * 32);
    std::vector<double> v(T), r(T);
    for (auto& x : v) x = uniform01(rng);
    for (auto& x : r) x = uniform01(rng) < 0.3 ? uniform01(rng) : 0.0;
    const double lambda = uniform01(rng), gamma = uniform01(rng);
    const auto got = gae_advantages(v, r, {lambda, gamma});
    for (std::size_t t = 0; t < T; ++t) {
      double want = 0.0, w = 1.0;
      for (std::size_t k = t; k < T; ++k) {
        want += w * (r[k] + (k + 1 < T ? v[k + 1] : 0.0) - v[k]);
        w *= lambda * gamma;
      }
      worst = std::max(worst, std::abs(got[t] - want));
      if (std::abs(got[t] - want) > 1e-10) ++bad;
    }
  }
  std::size_t inexact = 0;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t T = 1 + static_cast<std::size_t>(uniform01(rng) * 32);
    std::vector<double> v(T), r(T, 0.0);
    for (auto& x : v) x = uniform01(rng);
    r.back() = uniform01(rng) < 0.5 ? 1.0 : 0.0;
    const auto a = gae_advantages(v, r, {1.0, 1.0});
    for (std::size_t t = 0; t < T; ++t) inexact += a[t] != r.back() - v[t];
  }
  return {bad == 0 && inexact == 0,
          "max abs err " + fmt(worst, 3) + ", " + std::to_string(inexact) + " inexact telescoped values"};
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(TOKVAL_BINARY) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("tokval_acceptance_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// 9
Outcome hista_defaults() {
  const auto dir = scratch("defaults");
  {
    std::ofstream out(dir / "c.json");
    out << R"({"seed": 1, "env": {"prompts": 2}})";
  }
  if (run_cli("simulate --config " + (dir / "c.json").string() + " --out " + (dir / "out").string()) != 0)
    return {false, "simulate failed"};
  std::ifstream in(dir / "out" / "config.resolved.json");
  const auto j = nlohmann::json::parse(in);
  const auto& h = j.at("hista");
  const bool ok = h.at("alpha") == 0.7 && h.at("phi") == 5 && h.at("delta") == 50 && h.at("k") == 66;
  return {ok, "resolved hista " + h.dump()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<fs::path> data_files(const fs::path& root) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    const auto ext = e.path().extension();
    if (e.is_regular_file() && (ext == ".csv" || ext == ".jsonl" || ext == ".f32"))
      out.push_back(fs::relative(e.path(), root));
  }
  std::sort(out.begin(), out.end());
  return out;
}

// 10
Outcome determinism() {
  const auto root = scratch("determinism");
  {
    std::ofstream out(root / "c.json");
    out << R"({"seed": 17, "env": {"prompts": 60}, "methods": ["grpo", "numca", "hista", "mcs@2"],
               "hista": {"alpha": 0, "phi": 1, "delta": 1, "k": 8}})";
  }
  auto pipeline = [&](const std::string& name, int threads) {
    const auto dir = root / name;
    const std::string common = " --config " + (root / "c.json").string() + " --threads " + std::to_string(threads);
    int rc = run_cli("simulate" + common + " --out " + (dir / "bundle").string());
    rc |= run_cli("estimate --bundle " + (dir / "bundle").string() + common + " --out " + (dir / "values").string());
    rc |= run_cli("sveb --bundle " + (dir / "bundle").string() + common + " --out " + (dir / "sveb").string());
    return rc == 0;
  };
  if (!pipeline("a", 1) || !pipeline("b", 1) || !pipeline("c", 8)) return {false, "a pipeline step failed"};
  const auto files = data_files(root / "a");
  std::size_t diffs = 0;
  for (const char* other : {"b", "c"}) {
    if (data_files(root / other) != files) return {false, std::string("file sets differ in run ") + other};
    for (const auto& f : files) diffs += slurp(root / "a" / f) != slurp(root / other / f);
  }
  return {diffs == 0 && files.size() >= 8,
          std::to_string(files.size()) + " files compared across 3 runs, " + std::to_string(diffs) + " differ"};
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    double budget_s;
    std::function<Outcome()> fn;
  };
  const std::vector<Criterion> criteria = {
      {1, "bias-improvement theorem oracle", 10, theorem_oracle},
      {2, "bias decomposition identity", 5, bias_identity},
      {3, "SVEB direction vs group average", 300, sveb_direction},
      {4, "Numca degenerates to GRPO without digits", 30, numca_degeneracy},
      {5, "MCS@1 > MCS@2 > MCS@3 ordering", 120, mcs_ordering},
      {6, "prefix grid oracle and scaling", 60, grid_oracle_and_scaling},
      {7, "theory suite", 30, theory_suite},
      {8, "GAE oracle", 10, gae_oracle},
      {9, "Hista default hyperparameters", 10, hista_defaults},
      {10, "end-to-end determinism", 120, determinism},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = c.fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double elapsed = seconds_since(t0);
    const bool in_time = elapsed < c.budget_s;
    const bool pass = o.pass && in_time;
    failures += !pass;
    std::cout << (pass ? "PASS" : "FAIL") << " [" << c.id << "] " << c.name << ": " << o.detail << " ("
              << fmt(elapsed, 3) << " s of " << c.budget_s << " s" << (in_time ? "" : ", over budget") << ")"
              << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
