#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tokval/hista.hpp"
#include "tokval/numca.hpp"
#include "tokval/sveb.hpp"
#include "tokval/synth_env.hpp"

namespace tokval {

struct SvebSettings {
  std::size_t per_rollout = 5;
  std::size_t n_reference = 20;  // continuations per state when the reference is MCS
  double filter_lo = 0.1;
  double filter_hi = 0.8;
  ReferenceSpec reference;       // exact unless configured otherwise
};

/// Everything one CLI invocation needs. Missing keys take the defaults below;
/// env matrices left out are filled from number_chain_preset.
struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path out = "out";
  std::size_t threads = 1;
  std::vector<std::string> methods = {"grpo", "numca", "hista"};

  EnvConfig env;
  bool digit_numbers = true;
  std::size_t prompts = 64;
  std::size_t rollouts_per_prompt = 8;

  HistaParams hista;
  MilestonePatterns patterns = MilestonePatterns::all();
  SvebSettings sveb;
};

/// Parses JSON text. Unknown keys and ill-typed values raise ConfigError.
RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::filesystem::path& file);
/// The defaults, as if parsing "{}".
RunConfig default_config();

/// Fully resolved configuration as pretty-printed JSON, every key present.
std::string dump_config(const RunConfig& config);
inline constexpr const char* kResolvedConfigName = "config.resolved.json";
void write_resolved_config(const RunConfig& config, const std::filesystem::path& dir);

}  // namespace tokval
