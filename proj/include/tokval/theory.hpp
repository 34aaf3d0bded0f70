#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace tokval::theory {

/// g * x / sqrt(|x|^2 / d + eps), elementwise in g.
std::vector<double> rmsnorm(std::span<const double> x, std::span<const double> g, double eps);

/// Max-shifted softmax.
std::vector<double> softmax(std::span<const double> p);

struct StructuredSoftmax {
  std::vector<double> a1;           // softmax(p1)
  std::vector<double> aggregated;   // softmax(p2) with replicated mass folded back
  std::vector<double> closed_form;  // a1_i * kappa_i / kappa_bar
};

/// Builds p2 from p1: entry i < replications.size() is repeated replications[i]
/// times (these counts must sum to `eta1`), and every later entry i is shifted
/// by deltas[i - replications.size()]. Returns both routes to the aggregated
/// attention vector.
StructuredSoftmax structured_softmax_aggregate(std::span<const double> p1, std::span<const std::size_t> replications,
                                               std::size_t eta1, std::span<const double> deltas);

/// Values V(s_i), the target V(s_t) and weights P_{t,i} over a uniform index.
struct PwInstance {
  std::vector<double> values;
  double target = 0.0;
  std::vector<double> weights;
};

struct BiasDecomposition {
  double bias_avg = 0.0;  // mean(V) - V(s_t), computed directly
  double bias_pw = 0.0;   // sum(P V) / sum(P) - V(s_t), computed directly
  double ex = 0.0;        // E[X]
  double cov_wx = 0.0;    // Cov(W, X), population
  double ew = 0.0;        // E[W]

  double pw_residual() const;   // bias_pw - (E[X] + Cov/E[W])
  double avg_residual() const;  // bias_avg - E[X]
};

BiasDecomposition pw_bias_decomposition(const PwInstance& inst);

struct AssumptionCheck {
  bool sign_ok = false;       // E[X] * Cov(W, X) <= 0
  bool magnitude_ok = false;  // |Cov(W, X)| <= 2 E[W] |E[X]|
};

AssumptionCheck check_assumption_b3(const PwInstance& inst);

struct TheoremOracleResult {
  std::size_t instances = 0;
  std::size_t satisfying = 0;    // met both conditions
  std::size_t violations = 0;    // |bias_pw| > |bias_avg| among satisfying instances
  std::size_t magnitude_failures = 0;
  std::size_t witnesses = 0;     // inequality broken among magnitude failures
};

/// Random instances; counts inequality violations under the assumption and
/// witnesses outside it. Tolerance 1e-12.
TheoremOracleResult theorem_b2_oracle(std::size_t n_instances, std::uint64_t seed);

using SoftmaxFn = std::function<std::vector<double>(std::span<const double>)>;

struct SuiteResult {
  std::string name;
  std::size_t trials = 0;
  std::size_t violations = 0;
  bool passed = false;
  std::string detail;
};

enum class Fault { kNone, kSoftmaxFactor };

struct SuiteOptions {
  std::uint64_t seed = 20240611;
  std::size_t lipschitz_trials = 100000;
  std::size_t identity_trials = 10000;
  std::size_t theorem_trials = 100000;
  std::size_t block_trials = 10000;
  Fault fault = Fault::kNone;
};

/// Softmax on doubled logits: its Lipschitz constant is 1 instead of 1/2.
std::vector<double> faulty_softmax(std::span<const double> p);

SuiteResult check_rmsnorm_lipschitz(std::size_t trials, std::uint64_t seed);
SuiteResult check_rmsnorm_magnitude(std::size_t trials, std::uint64_t seed);
SuiteResult check_softmax_lipschitz(std::size_t trials, std::uint64_t seed, const SoftmaxFn& fn);
SuiteResult check_structured_softmax(std::size_t trials, std::uint64_t seed);
SuiteResult check_bias_decomposition(std::size_t trials, std::uint64_t seed);
SuiteResult check_theorem_b2(std::size_t trials, std::uint64_t seed);
/// Linear, inner-product, softmax, attention-aggregation and SwiGLU FFN bounds
/// checked stage by stage through one tiny pre-norm attention block.
SuiteResult check_block_composition(std::size_t trials, std::uint64_t seed, const SoftmaxFn& fn);

std::vector<std::string> suite_names();
std::vector<SuiteResult> run_suites(const SuiteOptions& options);

}  // namespace tokval::theory
