#include "tokval/cli.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "tokval/baseline.hpp"
#include "tokval/config.hpp"
#include "tokval/errors.hpp"
#include "tokval/format.hpp"
#include "tokval/hista.hpp"
#include "tokval/numca.hpp"
#include "tokval/parallel.hpp"
#include "tokval/rng.hpp"
#include "tokval/sveb.hpp"
#include "tokval/synth_env.hpp"
#include "tokval/theory.hpp"

namespace tokval {

namespace fs = std::filesystem;

namespace {

constexpr int kExitInternal = 1;
constexpr int kExitUsage = 2;

struct CommonArgs {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::string methods;
  std::string reference;
  std::string bundle;
};

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

/// Explicit --config, else the config echoed into the bundle, else defaults;
/// command-line flags override the file.
RunConfig resolve_config(const CommonArgs& a) {
  RunConfig rc;
  if (!a.config.empty()) {
    rc = load_config(a.config);
  } else if (!a.bundle.empty() && fs::exists(fs::path(a.bundle) / kResolvedConfigName)) {
    rc = load_config(fs::path(a.bundle) / kResolvedConfigName);
  } else {
    rc = default_config();
  }
  if (a.seed && *a.seed != rc.seed) {
    rc.seed = *a.seed;
    rc.env.seed = *a.seed;
  }
  if (a.threads) rc.threads = *a.threads;
  if (!a.out.empty()) rc.out = a.out;
  if (!a.methods.empty()) {
    rc.methods = split_csv(a.methods);
    if (rc.methods.empty()) throw ConfigError("--methods is empty");
    for (const auto& m : rc.methods) parse_method(m);
  }
  if (!a.reference.empty()) {
    rc.sveb.reference = ReferenceSpec::parse(a.reference);
    if (rc.sveb.reference.kind == ReferenceSpec::Kind::kMcs) rc.sveb.n_reference = rc.sveb.reference.n;
  }
  return rc;
}

std::ofstream open_out(const fs::path& file) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + file.string());
  return out;
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string());
}

int cmd_simulate(const CommonArgs& a) {
  const RunConfig rc = resolve_config(a);
  const NumberChain chain(rc.env);
  const auto sim = chain.generate(rc.prompts, rc.rollouts_per_prompt, rc.threads);
  make_dir(rc.out);
  store_bundle(sim.groups, rc.out);
  store_latents(sim.latents, rc.out / "latents.jsonl");
  write_resolved_config(rc, rc.out);
  std::size_t n = 0;
  for (const auto& g : sim.groups) n += g.size();
  std::cout << "simulated " << n << " rollouts in " << sim.groups.size() << " groups -> " << rc.out.string()
            << "\n";
  return 0;
}

/// Continuations from the generator when the latent sidecar exists, else from
/// the bundle's continuations.jsonl.
struct Continuations {
  std::unique_ptr<NumberChain> chain;
  std::map<std::int64_t, LatentTrace> latents;
  std::unique_ptr<ContinuationSource> source;
  bool has_latents = false;
};

Continuations open_continuations(const fs::path& bundle, const RunConfig& rc, std::span<const Group> groups,
                                 bool need_source) {
  Continuations c;
  const auto latent_file = bundle / "latents.jsonl";
  if (fs::exists(latent_file)) {
    c.has_latents = true;
    c.latents = load_latents(latent_file);
    c.chain = std::make_unique<NumberChain>(rc.env);
    if (need_source) c.source = std::make_unique<SyntheticContinuations>(*c.chain, groups, c.latents, rc.seed);
  } else if (need_source) {
    c.source = std::make_unique<OfflineContinuations>(OfflineContinuations::load(bundle / "continuations.jsonl"));
  }
  return c;
}

void write_values(const std::vector<ValueAssignment>& all, const std::vector<std::int64_t>& prompts,
                  const fs::path& file) {
  auto out = open_out(file);
  for (std::size_t i = 0; i < all.size(); ++i) {
    const auto& va = all[i];
    std::string line = "{\"rollout_id\":" + std::to_string(va.rollout_id) +
                       ",\"prompt_id\":" + std::to_string(prompts[i]) + ",\"method\":\"" +
                       std::string(method_name(va.method)) + "\",\"values\":[";
    for (std::size_t t = 0; t < va.values.size(); ++t) line += (t ? "," : "") + format_double(va.values[t]);
    line += "],\"advantages\":[";
    for (std::size_t t = 0; t < va.advantages.size(); ++t)
      line += (t ? "," : "") + format_double(va.advantages[t]);
    out << line << "]}\n";
  }
}

int cmd_estimate(const CommonArgs& a, bool normalize_std) {
  if (a.bundle.empty()) throw ConfigError("--bundle is required");
  const RunConfig rc = resolve_config(a);
  const auto groups = load_bundle(a.bundle);
  const AdvantageOptions adv{normalize_std, 1e-6};
  bool needs_mcs = false;
  for (const auto& m : rc.methods) needs_mcs = needs_mcs || parse_method(m).has_value();
  const auto conts = open_continuations(a.bundle, rc, groups, needs_mcs);
  make_dir(rc.out);

  for (const auto& m : rc.methods) {
    std::vector<std::vector<ValueAssignment>> per_group(groups.size());
    const auto mcs_n = parse_method(m);
    parallel_for(groups.size(), rc.threads, [&](std::size_t gi) {
      const Group& g = groups[gi];
      if (m == "grpo") per_group[gi] = grpo_values(g, adv);
      else if (m == "numca") per_group[gi] = numca_values(g, rc.patterns, adv);
      else if (m == "hista") per_group[gi] = hista_values(g, rc.hista, adv);
      else {
        std::vector<StateContinuations> sc;
        for (const auto& r : g.rollouts)
          for (std::size_t t = 0; t < r.generated_len(); ++t) {
            const StateRef s{g.prompt_id, r.rollout_id, t};
            sc.push_back({s, conts.source->rewards(s, *mcs_n, kEstimatorStream)});
          }
        const auto flat = mcs_values(g, sc);
        std::size_t pos = 0;
        for (const auto& r : g.rollouts) {
          ValueAssignment va;
          va.rollout_id = r.rollout_id;
          va.method = Method::kMcs;
          va.values.assign(flat.begin() + static_cast<std::ptrdiff_t>(pos),
                           flat.begin() + static_cast<std::ptrdiff_t>(pos + r.generated_len()));
          pos += r.generated_len();
          per_group[gi].push_back(std::move(va));
        }
        assign_advantages(g, per_group[gi], adv);
      }
    });
    std::vector<ValueAssignment> all;
    std::vector<std::int64_t> prompts;
    for (std::size_t gi = 0; gi < groups.size(); ++gi)
      for (auto& va : per_group[gi]) {
        all.push_back(std::move(va));
        prompts.push_back(groups[gi].prompt_id);
      }
    write_values(all, prompts, rc.out / ("values_" + m + ".jsonl"));
  }
  write_resolved_config(rc, rc.out);
  std::cout << "wrote " << rc.methods.size() << " value files -> " << rc.out.string() << "\n";
  return 0;
}

int cmd_sveb(const CommonArgs& a) {
  if (a.bundle.empty()) throw ConfigError("--bundle is required");
  const RunConfig rc = resolve_config(a);
  const auto all_groups = load_bundle(a.bundle);
  const auto groups = difficulty_filter(all_groups, rc.sveb.filter_lo, rc.sveb.filter_hi);
  if (groups.empty()) throw ConfigError("no group survives the difficulty filter");

  const bool exact = rc.sveb.reference.kind == ReferenceSpec::Kind::kExact;
  bool needs_source = !exact;
  for (const auto& m : rc.methods) needs_source = needs_source || parse_method(m).has_value();
  if (exact && !fs::exists(fs::path(a.bundle) / "latents.jsonl"))
    throw ConfigError("exact reference needs latents.jsonl in " + a.bundle);
  const auto conts = open_continuations(a.bundle, rc, groups, needs_source);

  const auto states = collect_states(groups, rc.sveb.per_rollout, rc.seed);
  const auto refs = reference_values(groups, states, rc.sveb.reference, conts.chain.get(),
                                     conts.has_latents ? &conts.latents : nullptr, conts.source.get());
  SvebOptions opt;
  opt.methods = rc.methods;
  opt.per_rollout = rc.sveb.per_rollout;
  opt.reference = rc.sveb.reference;
  opt.hista = rc.hista;
  opt.patterns = rc.patterns;
  opt.seed = rc.seed;
  opt.threads = rc.threads;
  const auto records = evaluate_states(groups, states, refs, opt, conts.source.get());
  const auto report = summarize(records, rc.methods, rc.sveb.reference.to_string());
  write_report(report, rc.out);

  auto out = open_out(rc.out / "records.csv");
  out << "prompt_id,rollout_id,token_index,reference";
  for (const auto& m : rc.methods) out << ',' << m;
  out << '\n';
  for (const auto& r : records) {
    out << r.state.prompt_id << ',' << r.state.rollout_id << ',' << r.state.token_index << ','
        << format_double(r.reference);
    for (const auto& m : rc.methods) out << ',' << format_double(r.estimates.at(m));
    out << '\n';
  }
  write_resolved_config(rc, rc.out);

  std::cout << "reference " << report.reference << (exact ? " (n ignored)" : "") << ", " << groups.size() << " of "
            << all_groups.size() << " groups kept, " << report.n_records << " states\n";
  for (const auto& [m, v] : report.mae) std::cout << "  " << m << " mae " << format_double(v) << "\n";
  return 0;
}

CompressedTrace random_trace(std::size_t states, std::size_t dim, Rng& rng) {
  CompressedTrace t;
  t.embeddings = Embeddings(states, dim);
  for (auto& v : t.embeddings.flat()) v = standard_normal(rng);
  for (std::size_t i = 1; i <= states; ++i) t.state_positions.push_back(i);
  return t;
}

double time_grid(std::size_t na, std::size_t nb, std::size_t dim, std::size_t repeats, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {na, nb, dim}));
  const auto a = random_trace(na, dim, rng);
  const auto b = random_trace(nb, dim, rng);
  std::vector<double> times;
  volatile double sink = 0.0;
  for (std::size_t r = 0; r < repeats; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto g = prefix_distance_grid(a, b);
    const auto t1 = std::chrono::steady_clock::now();
    sink = sink + g(na - 1, nb - 1);
    times.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  return *std::min_element(times.begin(), times.end());
}

int cmd_bench(const CommonArgs& a, const std::string& sizes_csv, std::size_t fixed, std::size_t dim,
              std::size_t repeats) {
  RunConfig rc = resolve_config(a);
  std::vector<std::size_t> sizes;
  for (const auto& s : split_csv(sizes_csv)) {
    try {
      sizes.push_back(std::stoul(s));
    } catch (const std::exception&) {
      throw ConfigError("bad size '" + s + "'");
    }
    if (sizes.back() == 0) throw ConfigError("sizes must be positive");
  }
  if (sizes.empty() || fixed == 0 || dim == 0 || repeats == 0) throw ConfigError("bench needs positive sizes");
  make_dir(rc.out);
  auto out = open_out(rc.out / "bench.csv");
  out << "mode,states_a,states_b,dim,seconds\n";
  for (std::size_t s : sizes) {
    const double one = time_grid(s, fixed, dim, repeats, rc.seed);
    const double both = time_grid(s, s, dim, repeats, rc.seed);
    out << "one_side," << s << ',' << fixed << ',' << dim << ',' << format_double(one) << '\n';
    out << "both_sides," << s << ',' << s << ',' << dim << ',' << format_double(both) << '\n';
    std::cout << s << " states: one side " << one << " s, both sides " << both << " s\n";
  }
  return 0;
}

int cmd_check(bool list, const std::string& fault, std::optional<std::uint64_t> seed) {
  if (list) {
    for (const auto& n : theory::suite_names()) std::cout << n << "\n";
    return 0;
  }
  theory::SuiteOptions opt;
  if (seed) opt.seed = *seed;
  if (fault == "softmax") opt.fault = theory::Fault::kSoftmaxFactor;
  else if (!fault.empty() && fault != "none") throw ConfigError("unknown fault '" + fault + "'");
  bool ok = true;
  for (const auto& r : theory::run_suites(opt)) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << " trials=" << r.trials << " violations=" << r.violations;
    if (!r.detail.empty()) std::cout << " (" << r.detail << ")";
    std::cout << "\n";
    ok = ok && r.passed;
  }
  return ok ? 0 : kExitInternal;
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"Token-level value estimation toolkit"};
  app.require_subcommand(1);
  CommonArgs args;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", args.config, "JSON run configuration");
    sub->add_option("--out", args.out, "output directory");
    sub->add_option_function<std::uint64_t>("--seed", [&](const std::uint64_t& v) { args.seed = v; },
                                            "seed (overrides config)");
    sub->add_option_function<std::size_t>("--threads", [&](const std::size_t& v) { args.threads = v; },
                                           "worker threads, 0 = auto");
  };

  auto* sim = app.add_subcommand("simulate", "generate a NumberChain trace bundle");
  add_common(sim);

  bool normalize_std = false;
  auto* est = app.add_subcommand("estimate", "write per-token values and advantages");
  add_common(est);
  est->add_option("--bundle", args.bundle, "trace bundle directory")->required();
  est->add_option("--methods", args.methods, "comma-separated: grpo,numca,hista,mcs@N");
  est->add_flag("--normalize-std", normalize_std, "divide advantages by the group reward std");

  auto* sveb = app.add_subcommand("sveb", "score estimators against reference values");
  add_common(sveb);
  sveb->add_option("--bundle", args.bundle, "trace bundle directory")->required();
  sveb->add_option("--methods", args.methods, "comma-separated: grpo,numca,hista,mcs@N");
  sveb->add_option("--reference", args.reference, "exact or mcs@N");

  std::string sizes = "64,128,256,512";
  std::size_t fixed = 64, dim = 16, repeats = 5;
  auto* bench = app.add_subcommand("bench", "time the prefix distance grid");
  add_common(bench);
  bench->add_option("--sizes", sizes, "comma-separated state counts");
  bench->add_option("--fixed", fixed, "state count of the fixed side");
  bench->add_option("--dim", dim, "embedding dimension");
  bench->add_option("--repeats", repeats, "timed repetitions per point (fastest kept)");

  bool list = false;
  std::string fault;
  std::optional<std::uint64_t> check_seed;
  auto* check = app.add_subcommand("check", "run the randomized theory suites");
  check->add_flag("--list", list, "print suite names");
  check->add_option("--inject-fault", fault, "softmax: use a softmax with twice the Lipschitz constant");
  check->add_option_function<std::uint64_t>("--seed", [&](const std::uint64_t& v) { check_seed = v; }, "seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (sim->parsed()) return cmd_simulate(args);
    if (est->parsed()) return cmd_estimate(args, normalize_std);
    if (sveb->parsed()) return cmd_sveb(args);
    if (bench->parsed()) return cmd_bench(args, sizes, fixed, dim, repeats);
    if (check->parsed()) return cmd_check(list, fault, check_seed);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
  return kExitUsage;
}

}  // namespace tokval
