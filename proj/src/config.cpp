#include "tokval/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "tokval/errors.hpp"

namespace tokval {

namespace {

using nlohmann::json;
using nlohmann::ordered_json;

void reject_unknown(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, _] : obj.items())
    if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
}

template <typename T>
void read(const json& obj, const char* key, T& dst, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    dst = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + " has the wrong type");
  }
}

void read_count(const json& obj, const char* key, std::size_t& dst, const std::string& where) {
  if (!obj.contains(key)) return;
  const auto& v = obj.at(key);
  if (!v.is_number_unsigned()) throw ConfigError(where + "." + key + " must be a non-negative integer");
  dst = v.get<std::size_t>();
}

void parse_env(const json& e, RunConfig& rc) {
  reject_unknown(e,
                 {"n_latent", "dim", "noise_sigma", "max_len", "prompts", "rollouts_per_prompt", "target_number",
                  "vocab", "number_tokens", "eos", "transition", "emit_table", "initial", "embedding",
                  "embed_scale", "digit_numbers"},
                 "env");
  std::size_t n_latent = 6, dim = 16;
  double sigma = 0.1;
  read_count(e, "n_latent", n_latent, "env");
  read_count(e, "dim", dim, "env");
  read(e, "noise_sigma", sigma, "env");
  read(e, "digit_numbers", rc.digit_numbers, "env");

  const bool custom = e.contains("transition") || e.contains("emit_table") || e.contains("vocab");
  EnvConfig c;
  if (custom) {
    for (const char* k : {"transition", "emit_table", "vocab", "initial", "number_tokens", "target_number"})
      if (!e.contains(k)) throw ConfigError(std::string("env.") + k + " is required for a custom chain");
    c.n_latent = n_latent;
    c.dim = dim;
    c.noise_sigma = sigma;
  } else {
    c = number_chain_preset(n_latent, dim, sigma, rc.seed, rc.digit_numbers);
  }
  read(e, "transition", c.transition, "env");
  read(e, "emit_table", c.emit_table, "env");
  read(e, "initial", c.initial, "env");
  read(e, "vocab", c.vocab, "env");
  read(e, "number_tokens", c.number_tokens, "env");
  read(e, "target_number", c.target_number, "env");
  read(e, "eos", c.eos, "env");
  read_count(e, "max_len", c.max_len, "env");
  read(e, "embed_scale", c.embed_scale, "env");
  if (e.contains("embedding")) {
    std::string s;
    read(e, "embedding", s, "env");
    if (s == "orthogonal") c.embedding = EmbeddingScheme::kOrthogonal;
    else if (s == "random") c.embedding = EmbeddingScheme::kRandom;
    else throw ConfigError("env.embedding must be 'orthogonal' or 'random', got '" + s + "'");
  }
  c.seed = rc.seed;
  read_count(e, "prompts", rc.prompts, "env");
  read_count(e, "rollouts_per_prompt", rc.rollouts_per_prompt, "env");
  if (rc.rollouts_per_prompt == 0) throw ConfigError("env.rollouts_per_prompt must be >= 1");
  validate_env_config(c);
  rc.env = std::move(c);
}

}  // namespace

RunConfig parse_config(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  reject_unknown(root, {"seed", "out", "threads", "methods", "env", "hista", "numca", "sveb"}, "config");

  RunConfig rc;
  if (root.contains("seed")) {
    if (!root["seed"].is_number_unsigned()) throw ConfigError("seed must be a non-negative integer");
    rc.seed = root["seed"].get<std::uint64_t>();
  }
  if (root.contains("out")) {
    std::string out;
    read(root, "out", out, "config");
    rc.out = out;
  }
  read_count(root, "threads", rc.threads, "config");
  read(root, "methods", rc.methods, "config");
  for (const auto& m : rc.methods) parse_method(m);

  parse_env(root.value("env", json::object()), rc);

  const json h = root.value("hista", json::object());
  reject_unknown(h, {"alpha", "phi", "delta", "k", "eps_dist"}, "hista");
  read(h, "alpha", rc.hista.alpha, "hista");
  read_count(h, "phi", rc.hista.phi, "hista");
  read_count(h, "delta", rc.hista.delta, "hista");
  read_count(h, "k", rc.hista.k, "hista");
  read(h, "eps_dist", rc.hista.eps_dist, "hista");
  validate_hista_params(rc.hista);

  const json n = root.value("numca", json::object());
  reject_unknown(n, {"patterns"}, "numca");
  if (n.contains("patterns")) {
    std::vector<std::string> names;
    read(n, "patterns", names, "numca");
    rc.patterns = MilestonePatterns::from_names(names);
  }

  const json s = root.value("sveb", json::object());
  reject_unknown(s, {"per_rollout", "n_reference", "filter_lo", "filter_hi", "reference"}, "sveb");
  read_count(s, "per_rollout", rc.sveb.per_rollout, "sveb");
  read_count(s, "n_reference", rc.sveb.n_reference, "sveb");
  read(s, "filter_lo", rc.sveb.filter_lo, "sveb");
  read(s, "filter_hi", rc.sveb.filter_hi, "sveb");
  if (rc.sveb.per_rollout == 0) throw ConfigError("sveb.per_rollout must be >= 1");
  if (rc.sveb.n_reference == 0) throw ConfigError("sveb.n_reference must be >= 1");
  if (!(rc.sveb.filter_lo <= rc.sveb.filter_hi)) throw ConfigError("sveb.filter_lo exceeds sveb.filter_hi");
  rc.sveb.reference.n = rc.sveb.n_reference;
  if (s.contains("reference")) {
    std::string ref;
    read(s, "reference", ref, "sveb");
    if (ref == "mcs") ref = "mcs@" + std::to_string(rc.sveb.n_reference);
    rc.sveb.reference = ReferenceSpec::parse(ref);
    if (rc.sveb.reference.kind == ReferenceSpec::Kind::kMcs) rc.sveb.n_reference = rc.sveb.reference.n;
  }
  return rc;
}

RunConfig load_config(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw ConfigError("cannot read config " + file.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

RunConfig default_config() { return parse_config("{}"); }

std::string dump_config(const RunConfig& c) {
  ordered_json root;
  root["seed"] = c.seed;
  root["out"] = c.out.generic_string();
  root["threads"] = c.threads;
  root["methods"] = c.methods;

  ordered_json e;
  e["n_latent"] = c.env.n_latent;
  e["dim"] = c.env.dim;
  e["noise_sigma"] = c.env.noise_sigma;
  e["max_len"] = c.env.max_len;
  e["prompts"] = c.prompts;
  e["rollouts_per_prompt"] = c.rollouts_per_prompt;
  e["digit_numbers"] = c.digit_numbers;
  e["embedding"] = c.env.embedding == EmbeddingScheme::kOrthogonal ? "orthogonal" : "random";
  e["embed_scale"] = c.env.embed_scale;
  e["eos"] = c.env.eos;
  e["target_number"] = c.env.target_number;
  e["number_tokens"] = c.env.number_tokens;
  e["vocab"] = c.env.vocab;
  e["initial"] = c.env.initial;
  e["transition"] = c.env.transition;
  e["emit_table"] = c.env.emit_table;
  root["env"] = e;

  ordered_json h;
  h["alpha"] = c.hista.alpha;
  h["phi"] = c.hista.phi;
  h["delta"] = c.hista.delta;
  h["k"] = c.hista.k;
  h["eps_dist"] = c.hista.eps_dist;
  root["hista"] = h;

  root["numca"] = ordered_json{{"patterns", c.patterns.names()}};

  ordered_json s;
  s["per_rollout"] = c.sveb.per_rollout;
  s["n_reference"] = c.sveb.n_reference;
  s["filter_lo"] = c.sveb.filter_lo;
  s["filter_hi"] = c.sveb.filter_hi;
  s["reference"] = c.sveb.reference.to_string();
  root["sveb"] = s;
  return root.dump(2) + "\n";
}

void write_resolved_config(const RunConfig& config, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string());
  std::ofstream out(dir / kResolvedConfigName, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write resolved config in " + dir.string());
  out << dump_config(config);
}

}  // namespace tokval
