#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "tokval/matrix.hpp"

namespace tokval {

/// One generated trajectory. Tokens hold decoded text pieces; the first
/// `prompt_len` of them form the initial state, the rest are generated.
/// `hidden` has one row per generated token.
struct Rollout {
  std::int64_t rollout_id = 0;
  std::int64_t prompt_id = 0;
  std::vector<std::string> tokens;
  std::size_t prompt_len = 1;
  double reward = 0.0;
  HiddenMatrix hidden;
  bool terminal = false;

  std::size_t generated_len() const noexcept { return tokens.size() - prompt_len; }
  std::size_t dim() const noexcept { return hidden.cols(); }
  std::string_view generated_token(std::size_t t) const { return tokens[prompt_len + t]; }

  friend bool operator==(const Rollout&, const Rollout&) = default;
};

/// All rollouts sharing one prompt.
struct Group {
  std::int64_t prompt_id = 0;
  std::vector<Rollout> rollouts;

  std::size_t size() const noexcept { return rollouts.size(); }
  double mean_reward() const;

  friend bool operator==(const Group&, const Group&) = default;
};

/// A state identified by the generated token it ends on (0-based within the
/// generated portion): the prefix through that token.
struct StateRef {
  std::int64_t prompt_id = 0;
  std::int64_t rollout_id = 0;
  std::size_t token_index = 0;

  friend auto operator<=>(const StateRef&, const StateRef&) = default;
};

enum class Method { kGrpo, kNumca, kHista, kMcs, kExternal };

std::string_view method_name(Method m);

/// Per-token values and advantages from one estimator, aligned with the
/// generated portion of a rollout.
struct ValueAssignment {
  std::int64_t rollout_id = 0;
  std::vector<double> values;
  std::vector<double> advantages;
  Method method = Method::kExternal;
};

/// Throws ValidationError naming the rollout if any invariant fails.
void validate_rollout(const Rollout& r);
void validate_group(const Group& g);

/// Partitions rollouts into groups by prompt_id, ordered by
/// (prompt_id, rollout_id), validating everything on the way.
std::vector<Group> group_rollouts(std::vector<Rollout> rollouts);

/// Reads a trace bundle directory (`index.jsonl` + `hidden.f32`).
std::vector<Group> load_bundle(const std::filesystem::path& dir);

/// Writes a trace bundle directory, creating it if needed.
void store_bundle(const std::vector<Group>& groups, const std::filesystem::path& dir);

}  // namespace tokval
