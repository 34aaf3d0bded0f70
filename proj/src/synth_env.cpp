#include "tokval/synth_env.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>

#include "json.hpp"
#include "tokval/errors.hpp"
#include "tokval/parallel.hpp"

namespace tokval {

namespace {

constexpr double kRowTolerance = 1e-9;

const std::array<const char*, 6> kFillers = {" so", " then", " we", " get", " check", " next"};
const std::array<const char*, 21> kNumberWords = {
    " zero",   " one",     " two",     " three",    " four",     " five",    " six",
    " seven",  " eight",   " nine",    " ten",      " eleven",   " twelve",  " thirteen",
    " fourteen", " fifteen", " sixteen", " seventeen", " eighteen", " nineteen", " twenty"};

void check_distribution(const std::vector<double>& row, std::size_t expected, const std::string& what) {
  if (row.size() != expected)
    throw ConfigError(what + " has " + std::to_string(row.size()) + " entries, expected " +
                      std::to_string(expected));
  double sum = 0.0;
  for (double p : row) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw ConfigError(what + " has a negative or non-finite entry");
    sum += p;
  }
  if (std::abs(sum - 1.0) > kRowTolerance)
    throw ConfigError(what + " sums to " + std::to_string(sum) + ", expected 1");
}

}  // namespace

EnvConfig number_chain_preset(std::size_t n_latent, std::size_t dim, double noise_sigma,
                              std::uint64_t seed, bool digit_numbers) {
  if (n_latent < 2) throw ConfigError("n_latent must be >= 2");
  const std::size_t middles = n_latent >= 3 ? n_latent - 2 : 0;
  if (!digit_numbers && middles + 11 > kNumberWords.size())
    throw ConfigError("spelled-out preset supports at most " +
                      std::to_string(kNumberWords.size() - 11 + 2) + " latent states");

  EnvConfig c;
  c.n_latent = n_latent;
  c.dim = dim;
  c.noise_sigma = noise_sigma;
  c.seed = seed;
  c.embed_scale = 3.0;  // well above the noise radius sigma * sqrt(2d) for the usual sigma

  for (const char* f : kFillers) c.vocab.emplace_back(f);
  const std::size_t n_fillers = c.vocab.size();
  auto add_number = [&](const std::string& digits, const char* word) {
    c.vocab.push_back(digit_numbers ? digits : std::string(word));
    c.number_tokens.push_back(c.vocab.back());
    return c.vocab.size() - 1;
  };
  const std::size_t target = add_number(" 42", " forty-two");
  const std::size_t wrong_a = add_number(" 41", " forty-one");
  const std::size_t wrong_b = add_number(" 24", " twenty-four");
  const std::size_t half = add_number(" 0.5", " half");
  const std::size_t quarters = add_number(" 3/4", " three-quarters");
  std::vector<std::size_t> own(middles);
  for (std::size_t j = 0; j < middles; ++j)
    own[j] = add_number(" " + std::to_string(11 + j), kNumberWords[11 + j]);
  c.vocab.push_back(c.eos);
  const std::size_t eos = c.vocab.size() - 1;
  c.target_number = c.vocab[target];

  const std::size_t K = n_latent;
  const std::size_t answer = K - 1;
  c.transition.assign(K, std::vector<double>(K, 0.0));
  c.emit_table.assign(K, std::vector<double>(c.vocab.size(), 0.0));
  c.initial.assign(K, 0.0);
  auto fill = [&](std::vector<double>& row, double mass) {
    for (std::size_t f = 0; f < n_fillers; ++f) row[f] += mass / static_cast<double>(n_fillers);
  };

  if (middles == 0) {
    fill(c.emit_table[0], 0.6);
    c.emit_table[0][target] = 0.2;
    c.emit_table[0][wrong_a] = 0.2;
    c.transition[0][0] = 0.7;
    c.transition[0][answer] = 0.3;
    c.initial[0] = 1.0;
  } else {
    // Setup state: mostly filler, occasional shared numbers, then commits to a middle state.
    fill(c.emit_table[0], 0.9);
    c.emit_table[0][half] = 0.05;
    c.emit_table[0][quarters] = 0.05;
    c.transition[0][0] = 0.5;
    for (std::size_t j = 1; j <= middles; ++j) c.transition[0][j] = 0.5 / static_cast<double>(middles);

    // Middle states alternate between sound (odd) and flawed (even) approaches.
    // A rollout commits to one approach until it answers, so the set of visited
    // states largely determines the value.
    for (std::size_t j = 1; j <= middles; ++j) {
      auto& e = c.emit_table[j];
      fill(e, 0.15);
      e[own[j - 1]] = 0.05;
      if (j % 2 == 1) {
        e[target] = 0.8;
      } else {
        e[wrong_a] = 0.4;
        e[wrong_b] = 0.4;
      }
      c.transition[j][j] = 0.55;
      c.transition[j][answer] = 0.45;
    }
    c.initial[0] = 0.6;
    for (std::size_t j = 1; j <= middles; ++j) c.initial[j] = 0.4 / static_cast<double>(middles);
  }
  fill(c.emit_table[answer], 0.4);
  c.emit_table[answer][eos] = 0.6;
  c.transition[answer][answer] = 1.0;
  return c;
}

void validate_env_config(const EnvConfig& c) {
  const std::size_t K = c.n_latent;
  if (K < 2) throw ConfigError("n_latent must be >= 2");
  if (c.max_len < 2) throw ConfigError("max_len must be >= 2");
  if (c.dim < 1) throw ConfigError("dim must be >= 1");
  if (!(c.noise_sigma >= 0.0) || !std::isfinite(c.noise_sigma))
    throw ConfigError("noise_sigma must be finite and >= 0");
  if (!(c.embed_scale > 0.0) || !std::isfinite(c.embed_scale))
    throw ConfigError("embed_scale must be finite and > 0");
  if (c.transition.size() != K)
    throw ConfigError("transition has " + std::to_string(c.transition.size()) + " rows, expected " +
                      std::to_string(K));
  for (std::size_t i = 0; i < K; ++i) check_distribution(c.transition[i], K, "transition row " + std::to_string(i));
  check_distribution(c.initial, K, "initial");
  if (c.vocab.empty()) throw ConfigError("vocab is empty");
  if (c.emit_table.size() != K)
    throw ConfigError("emit_table has " + std::to_string(c.emit_table.size()) + " rows, expected " +
                      std::to_string(K));
  for (std::size_t i = 0; i < K; ++i)
    check_distribution(c.emit_table[i], c.vocab.size(), "emit_table row " + std::to_string(i));
  auto in_vocab = [&](const std::string& t) {
    return std::find(c.vocab.begin(), c.vocab.end(), t) != c.vocab.end();
  };
  for (std::size_t i = 0; i < c.vocab.size(); ++i)
    for (std::size_t j = i + 1; j < c.vocab.size(); ++j)
      if (c.vocab[i] == c.vocab[j]) throw ConfigError("vocab token '" + c.vocab[i] + "' is duplicated");
  if (!in_vocab(c.eos)) throw ConfigError("eos token '" + c.eos + "' not in vocab");
  for (const auto& n : c.number_tokens) {
    if (!in_vocab(n)) throw ConfigError("number token '" + n + "' not in vocab");
    if (n == c.eos) throw ConfigError("eos cannot be a number token");
  }
  if (std::find(c.number_tokens.begin(), c.number_tokens.end(), c.target_number) ==
      c.number_tokens.end())
    throw ConfigError("target_number '" + c.target_number + "' is not a number token");
}

NumberChain::NumberChain(EnvConfig config) : config_(std::move(config)) {
  validate_env_config(config_);
  const std::size_t K = config_.n_latent;
  const std::size_t d = config_.dim;

  embeddings_ = Embeddings(K, d, 0.0);
  if (config_.embedding == EmbeddingScheme::kOrthogonal) {
    for (std::size_t i = 0; i < K; ++i) embeddings_(i, i % d) = config_.embed_scale;
  } else {
    Rng rng(derive_seed(config_.seed, {0xE3BEDULL}));
    for (std::size_t i = 0; i < K; ++i) {
      double norm = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        embeddings_(i, c) = standard_normal(rng);
        norm += embeddings_(i, c) * embeddings_(i, c);
      }
      norm = std::sqrt(norm);
      for (std::size_t c = 0; c < d; ++c)
        embeddings_(i, c) = norm > 0.0 ? config_.embed_scale * embeddings_(i, c) / norm : 0.0;
    }
  }
  if (config_.noise_sigma == 0.0) {
    for (std::size_t i = 0; i < K; ++i)
      for (std::size_t j = i + 1; j < K; ++j) {
        const auto a = embeddings_.row(i);
        const auto b = embeddings_.row(j);
        if (std::equal(a.begin(), a.end(), b.begin()))
          throw ConfigError("latent embeddings " + std::to_string(i) + " and " + std::to_string(j) +
                            " coincide (n_latent > dim with zero noise)");
      }
  }

  slots_ = config_.number_tokens.size() + 1;
  token_info_.resize(config_.vocab.size());
  for (std::size_t v = 0; v < config_.vocab.size(); ++v) {
    token_info_[v].eos = config_.vocab[v] == config_.eos;
    token_info_[v].number = number_slot(config_.vocab[v]);
  }
  target_slot_ = number_slot(config_.target_number);

  const std::size_t L = config_.max_len;
  value_.assign((L + 1) * K * slots_, 0.0);
  continue_.assign((L + 1) * K * slots_, 0.0);
  for (std::size_t n = 1; n <= L; ++n) {
    for (std::size_t z = 0; z < K; ++z) {
      for (std::size_t m = 0; m < slots_; ++m) {
        double v = 0.0;
        for (std::size_t x = 0; x < config_.vocab.size(); ++x) {
          const double p = config_.emit_table[z][x];
          if (p == 0.0) continue;
          if (token_info_[x].eos) {
            v += p * (m == target_slot_ ? 1.0 : 0.0);
          } else {
            const std::size_t next = token_info_[x].number != 0 ? token_info_[x].number : m;
            v += p * continue_[dp_index(n - 1, z, next)];
          }
        }
        value_[dp_index(n, z, m)] = v;
      }
    }
    for (std::size_t z = 0; z < K; ++z)
      for (std::size_t m = 0; m < slots_; ++m) {
        double c = 0.0;
        for (std::size_t j = 0; j < K; ++j) c += config_.transition[z][j] * value_[dp_index(n, j, m)];
        continue_[dp_index(n, z, m)] = c;
      }
  }
}

std::size_t NumberChain::number_slot(const std::optional<std::string>& token) const {
  if (!token) return 0;
  const auto& nums = config_.number_tokens;
  const auto it = std::find(nums.begin(), nums.end(), *token);
  return it == nums.end() ? 0 : static_cast<std::size_t>(it - nums.begin()) + 1;
}

std::size_t NumberChain::token_index(const std::string& token) const {
  const auto it = std::find(config_.vocab.begin(), config_.vocab.end(), token);
  if (it == config_.vocab.end()) throw ValidationError("token '" + token + "' is not in the vocab");
  return static_cast<std::size_t>(it - config_.vocab.begin());
}

Simulation NumberChain::generate(std::size_t prompts, std::size_t rollouts_per_prompt,
                                 std::size_t threads) const {
  if (rollouts_per_prompt == 0) throw ConfigError("rollouts_per_prompt must be >= 1");
  const std::size_t d = config_.dim;
  struct PromptOutput {
    Group group;
    std::vector<LatentTrace> latents;
  };
  std::vector<PromptOutput> out(prompts);

  parallel_for(prompts, threads, [&](std::size_t p) {
    const auto prompt_id = static_cast<std::int64_t>(p);
    Rng prompt_rng(derive_seed(config_.seed, {p}));
    const std::size_t start = sample_categorical(config_.initial, prompt_rng);
    const std::vector<std::string> prompt_tokens = {"Problem", " " + std::to_string(p), ":"};

    PromptOutput& po = out[p];
    po.group.prompt_id = prompt_id;
    for (std::size_t j = 0; j < rollouts_per_prompt; ++j) {
      Rng token_rng(derive_seed(config_.seed, {p, j, 0}));
      Rng noise_rng(derive_seed(config_.seed, {p, j, 1}));
      Rollout r;
      r.rollout_id = static_cast<std::int64_t>(p * rollouts_per_prompt + j);
      r.prompt_id = prompt_id;
      r.tokens = prompt_tokens;
      r.prompt_len = prompt_tokens.size();
      LatentTrace lt;
      lt.rollout_id = r.rollout_id;

      std::size_t z = start;
      std::size_t last = 0;
      for (std::size_t t = 1; t <= config_.max_len; ++t) {
        const std::size_t x = sample_categorical(config_.emit_table[z], token_rng);
        r.tokens.push_back(config_.vocab[x]);
        lt.latent_states.push_back(z);
        if (token_info_[x].eos) {
          r.terminal = true;
          break;
        }
        if (token_info_[x].number != 0) last = token_info_[x].number;
        if (t < config_.max_len) z = sample_categorical(config_.transition[z], token_rng);
      }
      r.reward = (r.terminal && last == target_slot_) ? 1.0 : 0.0;

      const std::size_t eta = lt.latent_states.size();
      std::vector<float> hidden(eta * d);
      for (std::size_t t = 0; t < eta; ++t) {
        const auto e = embeddings_.row(lt.latent_states[t]);
        for (std::size_t c = 0; c < d; ++c)
          hidden[t * d + c] =
              static_cast<float>(e[c] + config_.noise_sigma * standard_normal(noise_rng));
      }
      r.hidden = HiddenMatrix(eta, d, std::move(hidden));
      po.group.rollouts.push_back(std::move(r));
      po.latents.push_back(std::move(lt));
    }
  });

  Simulation sim;
  sim.groups.reserve(prompts);
  for (auto& po : out) {
    for (auto& lt : po.latents) sim.latents.emplace(lt.rollout_id, std::move(lt));
    sim.groups.push_back(std::move(po.group));
  }
  return sim;
}

double NumberChain::exact_value(std::size_t latent, std::size_t steps_remaining,
                                const std::optional<std::string>& last_number) const {
  if (latent >= config_.n_latent)
    throw ValidationError("latent index " + std::to_string(latent) + " out of range");
  if (steps_remaining > config_.max_len)
    throw ValidationError("steps_remaining exceeds max_len");
  if (last_number && number_slot(last_number) == 0)
    throw ValidationError("'" + *last_number + "' is not a number token");
  return value_[dp_index(steps_remaining, latent, number_slot(last_number))];
}

void NumberChain::check_alignment(const Rollout& rollout, const LatentTrace& latent) const {
  if (latent.latent_states.size() != rollout.generated_len())
    throw ValidationError("rollout " + std::to_string(rollout.rollout_id) + ": latent trace has " +
                          std::to_string(latent.latent_states.size()) + " entries, expected " +
                          std::to_string(rollout.generated_len()));
  if (rollout.generated_len() > config_.max_len)
    throw ValidationError("rollout " + std::to_string(rollout.rollout_id) + " is longer than max_len");
  for (std::size_t z : latent.latent_states)
    if (z >= config_.n_latent)
      throw ValidationError("rollout " + std::to_string(rollout.rollout_id) + ": latent out of range");
}

std::size_t NumberChain::slot_after(const Rollout& rollout, std::size_t t) const {
  std::size_t slot = 0;
  for (std::size_t i = 0; i <= t; ++i) {
    const std::size_t x = token_index(std::string(rollout.generated_token(i)));
    if (token_info_[x].number != 0) slot = token_info_[x].number;
  }
  return slot;
}

std::vector<double> NumberChain::exact_token_values(const Rollout& rollout,
                                                    const LatentTrace& latent) const {
  check_alignment(rollout, latent);
  const std::size_t eta = rollout.generated_len();
  std::vector<double> values(eta, 0.0);
  std::size_t slot = 0;
  for (std::size_t t = 0; t < eta; ++t) {
    const std::size_t x = token_index(std::string(rollout.generated_token(t)));
    if (token_info_[x].eos) {
      values[t] = slot == target_slot_ ? 1.0 : 0.0;
      continue;
    }
    if (token_info_[x].number != 0) slot = token_info_[x].number;
    values[t] = continue_value(latent.latent_states[t], config_.max_len - (t + 1), slot);
  }
  return values;
}

double NumberChain::sample_continuation(const Rollout& rollout, const LatentTrace& latent,
                                        std::size_t t, Rng& rng) const {
  check_alignment(rollout, latent);
  if (t >= rollout.generated_len())
    throw ValidationError("token index " + std::to_string(t) + " out of range for rollout " +
                          std::to_string(rollout.rollout_id));
  std::size_t slot = slot_after(rollout, t);
  const std::size_t x0 = token_index(std::string(rollout.generated_token(t)));
  if (token_info_[x0].eos) return slot == target_slot_ ? 1.0 : 0.0;

  std::size_t z = latent.latent_states[t];
  for (std::size_t step = t + 2; step <= config_.max_len; ++step) {
    z = sample_categorical(config_.transition[z], rng);
    const std::size_t x = sample_categorical(config_.emit_table[z], rng);
    if (token_info_[x].eos) return slot == target_slot_ ? 1.0 : 0.0;
    if (token_info_[x].number != 0) slot = token_info_[x].number;
  }
  return 0.0;
}

Simulation generate(const EnvConfig& config, std::size_t prompts, std::size_t rollouts_per_prompt,
                    std::size_t threads) {
  return NumberChain(config).generate(prompts, rollouts_per_prompt, threads);
}

double exact_value(const EnvConfig& config, std::size_t latent, std::size_t steps_remaining,
                   const std::optional<std::string>& last_number) {
  return NumberChain(config).exact_value(latent, steps_remaining, last_number);
}

std::vector<double> exact_token_values(const Rollout& rollout, const LatentTrace& latent,
                                       const EnvConfig& config) {
  return NumberChain(config).exact_token_values(rollout, latent);
}

void store_latents(const std::map<std::int64_t, LatentTrace>& latents,
                   const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + file.string());
  for (const auto& [id, lt] : latents) {
    nlohmann::ordered_json line;
    line["rollout_id"] = id;
    line["latents"] = lt.latent_states;
    out << line.dump() << '\n';
  }
  if (!out) throw IoError("write failed: " + file.string());
}

std::map<std::int64_t, LatentTrace> load_latents(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot open " + file.string());
  std::map<std::int64_t, LatentTrace> out;
  std::string text;
  std::size_t line_no = 0;
  while (std::getline(in, text)) {
    ++line_no;
    if (text.empty()) continue;
    try {
      const auto obj = nlohmann::json::parse(text);
      LatentTrace lt;
      lt.rollout_id = obj.at("rollout_id").get<std::int64_t>();
      lt.latent_states = obj.at("latents").get<std::vector<std::size_t>>();
      if (!out.emplace(lt.rollout_id, lt).second)
        throw FormatError("duplicate rollout_id " + std::to_string(lt.rollout_id), line_no);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(e.what(), line_no);
    }
  }
  return out;
}

}  // namespace tokval
