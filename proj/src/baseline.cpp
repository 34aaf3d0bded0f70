#include "tokval/baseline.hpp"

#include <cmath>
#include <string>

#include "tokval/errors.hpp"

namespace tokval {

void assign_advantages(const Group& group, std::vector<ValueAssignment>& assignments,
                       const AdvantageOptions& options) {
  if (assignments.size() != group.rollouts.size())
    throw ValidationError("assignment count does not match group size");
  double scale = 1.0;
  if (options.normalize_by_group_std) {
    const double mean = group.mean_reward();
    double var = 0.0;
    for (const auto& r : group.rollouts) var += (r.reward - mean) * (r.reward - mean);
    var /= static_cast<double>(group.rollouts.size());
    scale = 1.0 / (std::sqrt(var) + options.std_eps);
  }
  for (std::size_t i = 0; i < assignments.size(); ++i) {
    auto& a = assignments[i];
    const double reward = group.rollouts[i].reward;
    a.advantages.resize(a.values.size());
    for (std::size_t t = 0; t < a.values.size(); ++t) a.advantages[t] = (reward - a.values[t]) * scale;
  }
}

std::vector<ValueAssignment> grpo_values(const Group& group, const AdvantageOptions& options) {
  if (group.rollouts.empty())
    throw ValidationError("grpo_values: group " + std::to_string(group.prompt_id) + " is empty");
  const double mean = group.mean_reward();
  std::vector<ValueAssignment> out;
  out.reserve(group.rollouts.size());
  for (const auto& r : group.rollouts)
    out.push_back({r.rollout_id, std::vector<double>(r.generated_len(), mean), {}, Method::kGrpo});
  assign_advantages(group, out, options);
  return out;
}

std::vector<double> mcs_values(const Group& group, std::span<const StateContinuations> continuations) {
  std::vector<double> out;
  out.reserve(continuations.size());
  for (const auto& c : continuations) {
    if (c.state.prompt_id != group.prompt_id)
      throw ValidationError("mcs_values: state of prompt " + std::to_string(c.state.prompt_id) +
                            " passed with group " + std::to_string(group.prompt_id));
    if (c.rewards.empty())
      throw ValidationError("mcs_values: state (rollout " + std::to_string(c.state.rollout_id) +
                            ", token " + std::to_string(c.state.token_index) +
                            ") has no continuations");
    double sum = 0.0;
    for (double r : c.rewards) sum += r;
    out.push_back(sum / static_cast<double>(c.rewards.size()));
  }
  return out;
}

std::vector<double> gae_advantages(std::span<const double> values, std::span<const double> rewards,
                                   const GaeParams& params) {
  if (values.size() != rewards.size())
    throw ValidationError("gae_advantages: " + std::to_string(values.size()) + " values vs " +
                          std::to_string(rewards.size()) + " rewards");
  if (!(params.lambda >= 0.0 && params.lambda <= 1.0 && params.gamma >= 0.0 && params.gamma <= 1.0))
    throw ValidationError("gae_advantages: lambda and gamma must lie in [0, 1]");
  const std::size_t T = values.size();
  const double decay = params.lambda * params.gamma;
  std::vector<double> adv(T, 0.0);
  if (decay == 1.0) {
    // The TD residuals telescope: A_t = sum_{i>=t} r_i - V(s_t).
    double reward_suffix = 0.0;
    for (std::size_t i = T; i-- > 0;) {
      reward_suffix += rewards[i];
      adv[i] = reward_suffix - values[i];
    }
    return adv;
  }
  double running = 0.0;
  for (std::size_t i = T; i-- > 0;) {
    const double next = i + 1 < T ? values[i + 1] : 0.0;
    const double delta = rewards[i] + next - values[i];
    running = delta + decay * running;
    adv[i] = running;
  }
  return adv;
}

}  // namespace tokval
