#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tokval/hista.hpp"
#include "tokval/numca.hpp"
#include "tokval/synth_env.hpp"
#include "tokval/trace_model.hpp"

namespace tokval {

/// Uniformly samples `per_rollout` distinct generated positions per rollout
/// (all positions when the rollout is shorter). Sorted by
/// (prompt_id, rollout_id, token_index); deterministic given `seed`.
std::vector<StateRef> collect_states(std::span<const Group> groups, std::size_t per_rollout, std::uint64_t seed);

/// Source of terminal rewards of fresh continuations from a state.
class ContinuationSource {
 public:
  virtual ~ContinuationSource() = default;
  /// The first `n` rewards of the continuation stream `stream` for `state`.
  /// Streams are nested: asking for more returns a superset prefix.
  virtual std::vector<double> rewards(const StateRef& state, std::size_t n, std::uint64_t stream) const = 0;
};

/// Continuations resampled from the NumberChain generator.
class SyntheticContinuations final : public ContinuationSource {
 public:
  SyntheticContinuations(const NumberChain& chain, std::span<const Group> groups,
                         const std::map<std::int64_t, LatentTrace>& latents, std::uint64_t seed);
  std::vector<double> rewards(const StateRef& state, std::size_t n, std::uint64_t stream) const override;

 private:
  const NumberChain& chain_;
  std::map<std::int64_t, const Rollout*> rollouts_;
  const std::map<std::int64_t, LatentTrace>& latents_;
  std::uint64_t seed_;
};

/// Continuation rewards shipped with a bundle as `continuations.jsonl`
/// ({"rollout_id", "token_index", "rewards"} per line).
class OfflineContinuations final : public ContinuationSource {
 public:
  explicit OfflineContinuations(std::map<std::pair<std::int64_t, std::size_t>, std::vector<double>> table);
  static OfflineContinuations load(const std::filesystem::path& file);
  std::vector<double> rewards(const StateRef& state, std::size_t n, std::uint64_t stream) const override;

 private:
  std::map<std::pair<std::int64_t, std::size_t>, std::vector<double>> table_;
};

struct ReferenceSpec {
  enum class Kind { kExact, kMcs };
  Kind kind = Kind::kExact;
  std::size_t n = 20;

  /// "exact" or "mcs@N".
  static ReferenceSpec parse(const std::string& text);
  std::string to_string() const;
};

inline constexpr std::uint64_t kReferenceStream = 1;
inline constexpr std::uint64_t kEstimatorStream = 2;

/// Exact mode needs `chain` and `latents`; MCS mode needs `continuations`.
std::vector<double> reference_values(std::span<const Group> groups, std::span<const StateRef> states,
                                     const ReferenceSpec& spec, const NumberChain* chain,
                                     const std::map<std::int64_t, LatentTrace>* latents,
                                     const ContinuationSource* continuations);

struct SvebRecord {
  StateRef state;
  double reference = 0.0;
  std::map<std::string, double> estimates;  // keyed by method label
};

double mae(std::span<const SvebRecord> records, const std::string& method);

/// Keeps groups whose accuracy (mean reward) lies in [lo, hi].
std::vector<Group> difficulty_filter(std::span<const Group> groups, double lo = 0.1, double hi = 0.8);

struct Histogram {
  std::vector<double> edges;  // bins + 1
  std::vector<std::size_t> counts;
};

inline constexpr std::size_t kHistogramBins = 81;
inline constexpr double kHistogramLo = -1.0125;
inline constexpr double kHistogramHi = 1.0125;

/// Histogram of estimate(method) - estimate(grpo); out-of-range values land in the end bins.
Histogram diff_histogram(std::span<const SvebRecord> records, const std::string& method,
                         std::size_t bins = kHistogramBins, double lo = kHistogramLo, double hi = kHistogramHi);

/// Estimator labels: grpo, numca, hista, mcs@N.
struct SvebOptions {
  std::vector<std::string> methods = {"grpo", "numca", "hista"};
  std::size_t per_rollout = 5;
  ReferenceSpec reference;
  HistaParams hista;
  MilestonePatterns patterns = MilestonePatterns::all();
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

/// Validates a method label; returns the n of "mcs@n" when applicable.
std::optional<std::size_t> parse_method(const std::string& label);

/// Estimates of every method at every state, one record per state.
std::vector<SvebRecord> evaluate_states(std::span<const Group> groups, std::span<const StateRef> states,
                                        std::span<const double> references, const SvebOptions& options,
                                        const ContinuationSource* continuations);

struct SvebReport {
  std::vector<std::pair<std::string, double>> mae;  // in method order
  std::map<std::string, Histogram> histograms;
  std::size_t n_records = 0;
  std::string reference;
};

SvebReport summarize(std::span<const SvebRecord> records, const std::vector<std::string>& methods,
                     const std::string& reference_label);

/// report.csv (method,mae,n_records) and hist_<method>.csv (bin_lo,bin_hi,count).
void write_report(const SvebReport& report, const std::filesystem::path& dir);

}  // namespace tokval
