#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "tokval/baseline.hpp"
#include "tokval/trace_model.hpp"

namespace tokval {

enum class MilestonePattern {
  kSignedInteger,  // [-+]?\d+
  kDecimal,        // [-+]?\d+\.\d+
  kSlashFraction,  // [-+]?\d+/\d+
  kLatexFraction,  // \frac{a}{b}, normalised to a/b
};

std::string_view pattern_name(MilestonePattern p);

/// The set of numeric patterns a milestone may match.
struct MilestonePatterns {
  std::vector<MilestonePattern> patterns;

  static MilestonePatterns all();
  /// Built-in names: signed_integer, decimal, slash_fraction, latex_fraction.
  static MilestonePatterns from_names(const std::vector<std::string>& names);
  std::vector<std::string> names() const;
};

struct MilestoneMatch {
  std::string text;       // normalised
  std::size_t begin = 0;  // byte range in the scanned string
  std::size_t end = 0;
};

/// Leftmost, longest, non-overlapping matches in scan order.
std::vector<MilestoneMatch> find_milestones(std::string_view text, const MilestonePatterns& patterns);
std::vector<std::string> extract_milestones(std::string_view text, const MilestonePatterns& patterns);

/// Strips a leading '+' and leading zeros of every digit run ("042" -> "42").
std::string normalize_number(std::string_view raw);

/// The milestones achieved so far, as a sorted duplicate-free set.
class AbstractState {
 public:
  AbstractState() = default;
  bool insert(std::string milestone);
  const std::vector<std::string>& milestones() const noexcept { return items_; }
  bool empty() const noexcept { return items_.empty(); }
  std::string to_string() const;

  friend auto operator<=>(const AbstractState&, const AbstractState&) = default;
  friend bool operator==(const AbstractState&, const AbstractState&) = default;

 private:
  std::vector<std::string> items_;
};

struct AbstractStateHash {
  std::size_t operator()(const AbstractState& s) const noexcept;
};

struct TableEntry {
  std::size_t count = 0;
  double reward_sum = 0.0;
  double value() const { return reward_sum / static_cast<double>(count); }
};

using MilestoneTable = std::map<AbstractState, TableEntry>;

/// Abstract state active after each generated token. Milestones are matched
/// on the concatenated generated text and take effect at the token holding
/// their last character; prompt text is not scanned.
std::vector<AbstractState> abstract_state_trace(const Rollout& rollout, const MilestonePatterns& patterns);

/// Counts, per abstract state, the rollouts that reach it and their reward sum.
MilestoneTable build_table(const Group& group, const MilestonePatterns& patterns);

std::vector<ValueAssignment> numca_values(const Group& group, const MilestonePatterns& patterns,
                                          const AdvantageOptions& options = {});

}  // namespace tokval
