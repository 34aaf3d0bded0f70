#pragma once

#include <span>
#include <vector>

#include "tokval/trace_model.hpp"

namespace tokval {

/// How advantages are derived from values. By default advantage = reward - value;
/// `normalize_by_group_std` additionally divides by the group reward standard
/// deviation (population) plus `std_eps`, as GRPO does.
struct AdvantageOptions {
  bool normalize_by_group_std = false;
  double std_eps = 1e-6;
};

/// Fills `advantages` of every assignment from its `values` and the rollout reward.
void assign_advantages(const Group& group, std::vector<ValueAssignment>& assignments,
                       const AdvantageOptions& options = {});

/// Group-average baseline: every token of every rollout gets the mean group reward.
std::vector<ValueAssignment> grpo_values(const Group& group, const AdvantageOptions& options = {});

struct StateContinuations {
  StateRef state;
  std::vector<double> rewards;  // terminal rewards of independent continuations
};

/// MCS@n: the mean of each state's continuation rewards.
std::vector<double> mcs_values(const Group& group, std::span<const StateContinuations> continuations);

struct GaeParams {
  double lambda = 1.0;
  double gamma = 1.0;
};

/// Generalised advantage estimation over caller-supplied values.
/// delta_t = r_t + V(s_{t+1}) - V(s_t) with V past the end taken as 0, and
/// A_t = sum_i (lambda * gamma)^i delta_{t+i}.
std::vector<double> gae_advantages(std::span<const double> values, std::span<const double> rewards,
                                   const GaeParams& params);

}  // namespace tokval
