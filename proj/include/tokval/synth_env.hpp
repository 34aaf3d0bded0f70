#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tokval/matrix.hpp"
#include "tokval/rng.hpp"
#include "tokval/trace_model.hpp"

namespace tokval {

enum class EmbeddingScheme { kOrthogonal, kRandom };

/// Parameters of the NumberChain generator: a latent Markov chain whose
/// states emit tokens. A rollout succeeds when it emits EOS and the most
/// recent number token emitted before it equals `target_number`.
struct EnvConfig {
  std::size_t n_latent = 6;
  std::vector<std::vector<double>> transition;  // K x K, row-stochastic
  std::vector<double> initial;                  // per-prompt start latent distribution
  std::vector<std::string> vocab;
  std::vector<std::vector<double>> emit_table;  // K x |vocab|
  std::string eos = "</s>";
  std::vector<std::string> number_tokens;
  std::string target_number;
  std::size_t max_len = 64;
  std::size_t dim = 16;
  double noise_sigma = 0.1;
  std::uint64_t seed = 0;
  EmbeddingScheme embedding = EmbeddingScheme::kOrthogonal;
  double embed_scale = 1.0;
};

/// Milestone-rich default chain for `n_latent` >= 2 latent states. With
/// `digit_numbers` false the number tokens are spelled out, so no digit
/// ever appears in generated text.
EnvConfig number_chain_preset(std::size_t n_latent, std::size_t dim, double noise_sigma,
                              std::uint64_t seed, bool digit_numbers = true);

/// Throws ConfigError naming the offending row or field.
void validate_env_config(const EnvConfig& config);

/// Latent state that emitted each generated token of one rollout.
struct LatentTrace {
  std::int64_t rollout_id = 0;
  std::vector<std::size_t> latent_states;

  friend bool operator==(const LatentTrace&, const LatentTrace&) = default;
};

struct Simulation {
  std::vector<Group> groups;
  std::map<std::int64_t, LatentTrace> latents;  // keyed by rollout_id
};

class NumberChain {
 public:
  explicit NumberChain(EnvConfig config);

  const EnvConfig& config() const noexcept { return config_; }
  const Embeddings& embeddings() const noexcept { return embeddings_; }

  /// Prompt ids are 0..prompts-1; rollout ids are prompt_id * rollouts_per_prompt + j.
  /// Every prompt draws from its own stream, so the result is independent of `threads`.
  Simulation generate(std::size_t prompts, std::size_t rollouts_per_prompt,
                      std::size_t threads = 1) const;

  /// Exact success probability when `latent` is about to emit and at most
  /// `steps_remaining` more tokens may be generated.
  double exact_value(std::size_t latent, std::size_t steps_remaining,
                     const std::optional<std::string>& last_number) const;

  /// Exact value of the state reached after each generated token.
  std::vector<double> exact_token_values(const Rollout& rollout, const LatentTrace& latent) const;

  /// Terminal reward of one fresh continuation from the state after generated token `t`.
  double sample_continuation(const Rollout& rollout, const LatentTrace& latent, std::size_t t,
                             Rng& rng) const;

 private:
  struct TokenInfo {
    bool eos = false;
    std::size_t number = 0;  // 0 = not a number, else 1 + index into number_tokens
  };

  std::size_t number_slot(const std::optional<std::string>& token) const;
  std::size_t dp_index(std::size_t steps, std::size_t latent, std::size_t slot) const {
    return (steps * config_.n_latent + latent) * slots_ + slot;
  }
  /// Value of the post-emission state: latent `from` has just emitted a
  /// non-EOS token, `steps` tokens remain, `slot` is the last number.
  double continue_value(std::size_t from, std::size_t steps, std::size_t slot) const {
    return continue_[dp_index(steps, from, slot)];
  }
  void check_alignment(const Rollout& rollout, const LatentTrace& latent) const;
  std::size_t slot_after(const Rollout& rollout, std::size_t t) const;
  std::size_t token_index(const std::string& token) const;

  EnvConfig config_;
  Embeddings embeddings_;
  std::vector<TokenInfo> token_info_;
  std::size_t slots_ = 1;
  std::size_t target_slot_ = 0;
  std::vector<double> value_;     // V[steps][latent][slot]
  std::vector<double> continue_;  // sum_j T[latent][j] * V[steps][j][slot]
};

/// Free-function forms of the NumberChain queries.
Simulation generate(const EnvConfig& config, std::size_t prompts, std::size_t rollouts_per_prompt,
                    std::size_t threads = 1);
double exact_value(const EnvConfig& config, std::size_t latent, std::size_t steps_remaining,
                   const std::optional<std::string>& last_number);
std::vector<double> exact_token_values(const Rollout& rollout, const LatentTrace& latent,
                                       const EnvConfig& config);

/// `latents.jsonl` sidecar: one {"rollout_id", "latents"} object per line.
void store_latents(const std::map<std::int64_t, LatentTrace>& latents,
                   const std::filesystem::path& file);
std::map<std::int64_t, LatentTrace> load_latents(const std::filesystem::path& file);

}  // namespace tokval
