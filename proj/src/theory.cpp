#include "tokval/theory.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tokval/errors.hpp"
#include "tokval/rng.hpp"

namespace tokval::theory {

namespace {

constexpr double kRelTol = 1e-12;

double norm2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double diff_norm(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

double inf_norm(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

// lhs <= bound up to rounding.
bool within(double lhs, double bound) { return lhs <= bound * (1.0 + kRelTol) + 1e-300; }

double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

std::size_t uniform_int(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(uniform01(rng) * static_cast<double>(hi - lo + 1));
}

std::vector<double> gaussian_vector(Rng& rng, std::size_t n, double scale) {
  std::vector<double> v(n);
  for (auto& x : v) x = scale * standard_normal(rng);
  return v;
}

// Second vector either independent, a small perturbation, or a tiny one.
std::vector<double> partner(Rng& rng, const std::vector<double>& x, double scale) {
  const double mode = uniform01(rng);
  const double step = mode < 0.3 ? scale : mode < 0.7 ? 1e-2 * scale : 1e-5 * scale;
  auto y = x;
  for (auto& v : y) v += step * standard_normal(rng);
  return y;
}

using Mat = Eigen::MatrixXd;

Mat random_matrix(Rng& rng, std::size_t rows, std::size_t cols) {
  Mat m(rows, cols);
  const double s = 1.0 / std::sqrt(static_cast<double>(rows));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = s * standard_normal(rng);
  return m;
}

double spectral_norm(const Mat& m) {
  Eigen::JacobiSVD<Mat> svd(m);
  return svd.singularValues()(0);
}

std::vector<double> row_times(std::span<const double> x, const Mat& w) {
  std::vector<double> out(static_cast<std::size_t>(w.cols()), 0.0);
  for (Eigen::Index j = 0; j < w.cols(); ++j) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < w.rows(); ++i) s += x[static_cast<std::size_t>(i)] * w(i, j);
    out[static_cast<std::size_t>(j)] = s;
  }
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

double swish(double t) { return t / (1.0 + std::exp(-t)); }

// Upper bound of |d swish / dt| over the real line (max is about 1.0998).
constexpr double kSwishSlopeBound = 1.1;

SuiteResult make_result(std::string name, std::size_t trials, std::size_t violations, std::string detail = {}) {
  return {std::move(name), trials, violations, violations == 0, std::move(detail)};
}

}  // namespace

std::vector<double> rmsnorm(std::span<const double> x, std::span<const double> g, double eps) {
  if (x.size() != g.size()) throw ValidationError("rmsnorm: x and g differ in length");
  if (x.empty()) return {};
  const double d = static_cast<double>(x.size());
  double sq = 0.0;
  for (double v : x) sq += v * v;
  const double denom = std::sqrt(sq / d + eps);
  std::vector<double> out(x.size(), 0.0);
  if (denom == 0.0) return out;
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = g[i] * x[i] / denom;
  return out;
}

std::vector<double> softmax(std::span<const double> p) {
  if (p.empty()) return {};
  const double shift = *std::max_element(p.begin(), p.end());
  std::vector<double> out(p.size());
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) z += (out[i] = std::exp(p[i] - shift));
  for (auto& v : out) v /= z;
  return out;
}

std::vector<double> faulty_softmax(std::span<const double> p) {
  std::vector<double> doubled(p.begin(), p.end());
  for (auto& v : doubled) v *= 2.0;
  return softmax(doubled);
}

StructuredSoftmax structured_softmax_aggregate(std::span<const double> p1, std::span<const std::size_t> replications,
                                               std::size_t eta1, std::span<const double> deltas) {
  const std::size_t ell = p1.size();
  const std::size_t eta2 = replications.size();
  if (eta2 + deltas.size() != ell)
    throw ValidationError("structured_softmax_aggregate: replications + deltas must cover p1");
  const std::size_t total = std::accumulate(replications.begin(), replications.end(), std::size_t{0});
  if (total != eta1)
    throw ValidationError("structured_softmax_aggregate: replication counts sum to " + std::to_string(total) +
                          ", expected " + std::to_string(eta1));
  if (eta1 + deltas.size() == 0) throw ValidationError("structured_softmax_aggregate: empty construction");

  std::vector<double> p2;
  p2.reserve(eta1 + deltas.size());
  for (std::size_t i = 0; i < eta2; ++i) p2.insert(p2.end(), replications[i], p1[i]);
  for (std::size_t i = eta2; i < ell; ++i) p2.push_back(p1[i] + deltas[i - eta2]);

  StructuredSoftmax out;
  out.a1 = softmax(p1);
  const auto a2 = softmax(p2);
  out.aggregated.assign(ell, 0.0);
  std::size_t pos = 0;
  for (std::size_t i = 0; i < eta2; ++i)
    for (std::size_t c = 0; c < replications[i]; ++c) out.aggregated[i] += a2[pos++];
  for (std::size_t i = eta2; i < ell; ++i) out.aggregated[i] = a2[pos++];

  std::vector<double> kappa(ell);
  for (std::size_t i = 0; i < ell; ++i)
    kappa[i] = i < eta2 ? static_cast<double>(replications[i]) : std::exp(deltas[i - eta2]);
  double kappa_bar = 0.0;
  for (std::size_t i = 0; i < ell; ++i) kappa_bar += out.a1[i] * kappa[i];
  out.closed_form.resize(ell);
  for (std::size_t i = 0; i < ell; ++i) out.closed_form[i] = out.a1[i] * kappa[i] / kappa_bar;
  return out;
}

double BiasDecomposition::pw_residual() const { return bias_pw - (ex + cov_wx / ew); }
double BiasDecomposition::avg_residual() const { return bias_avg - ex; }

BiasDecomposition pw_bias_decomposition(const PwInstance& inst) {
  const std::size_t n = inst.values.size();
  if (n == 0 || inst.weights.size() != n)
    throw ValidationError("pw_bias_decomposition: values and weights must be non-empty and equal length");
  for (double w : inst.weights)
    if (!(w >= 0.0)) throw ValidationError("pw_bias_decomposition: negative weight");
  const double inv_n = 1.0 / static_cast<double>(n);

  BiasDecomposition b;
  double sum_v = 0.0, sum_pv = 0.0, sum_p = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sum_v += inst.values[i];
    sum_pv += inst.weights[i] * inst.values[i];
    sum_p += inst.weights[i];
  }
  if (!(sum_p > 0.0)) throw ValidationError("pw_bias_decomposition: E[W] must be positive");
  b.bias_avg = sum_v * inv_n - inst.target;
  b.bias_pw = sum_pv / sum_p - inst.target;

  double ex = 0.0, ew = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ex += inst.values[i] - inst.target;
    ew += inst.weights[i];
  }
  ex *= inv_n;
  ew *= inv_n;
  double cov = 0.0;
  for (std::size_t i = 0; i < n; ++i) cov += (inst.weights[i] - ew) * (inst.values[i] - inst.target - ex);
  b.ex = ex;
  b.ew = ew;
  b.cov_wx = cov * inv_n;
  return b;
}

AssumptionCheck check_assumption_b3(const PwInstance& inst) {
  const auto b = pw_bias_decomposition(inst);
  return {b.ex * b.cov_wx <= 0.0, std::abs(b.cov_wx) <= 2.0 * b.ew * std::abs(b.ex)};
}

namespace {

PwInstance random_instance(Rng& rng) {
  PwInstance inst;
  const std::size_t n = uniform_int(rng, 1, 12);
  inst.values.resize(n);
  inst.weights.resize(n);
  for (auto& v : inst.values) v = uniform01(rng);
  inst.target = uniform01(rng);
  const bool sharp = uniform01(rng) < 0.5;
  for (std::size_t i = 0; i < n; ++i) {
    // Sharp weights favour values near the target, mimicking similarity weighting.
    inst.weights[i] = sharp ? std::exp(-std::abs(inst.values[i] - inst.target) * uniform(rng, 0.0, 10.0))
                            : uniform01(rng);
  }
  inst.weights[0] = std::max(inst.weights[0], 1e-6);
  return inst;
}

}  // namespace

TheoremOracleResult theorem_b2_oracle(std::size_t n_instances, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {0xB2}));
  TheoremOracleResult res;
  res.instances = n_instances;
  for (std::size_t t = 0; t < n_instances; ++t) {
    const auto inst = random_instance(rng);
    const auto check = check_assumption_b3(inst);
    const auto b = pw_bias_decomposition(inst);
    const bool holds = std::abs(b.bias_pw) <= std::abs(b.bias_avg) + 1e-12;
    if (check.sign_ok && check.magnitude_ok) {
      ++res.satisfying;
      if (!holds) ++res.violations;
    } else if (!check.magnitude_ok) {
      ++res.magnitude_failures;
      if (!holds) ++res.witnesses;
    }
  }
  return res;
}

SuiteResult check_rmsnorm_lipschitz(std::size_t trials, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {1}));
  std::size_t bad = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t d = uniform_int(rng, 1, 16);
    const double scale = std::pow(10.0, uniform(rng, -3.0, 1.0));
    const auto x1 = gaussian_vector(rng, d, scale);
    const auto x2 = partner(rng, x1, scale);
    const auto g = gaussian_vector(rng, d, 1.0);
    const double eps = std::pow(10.0, uniform(rng, -6.0, 0.0));
    const double lhs = diff_norm(rmsnorm(x1, g, eps), rmsnorm(x2, g, eps));
    if (!within(lhs, inf_norm(g) / std::sqrt(eps) * diff_norm(x1, x2))) ++bad;
  }
  return make_result("rmsnorm_lipschitz", trials, bad);
}

SuiteResult check_rmsnorm_magnitude(std::size_t trials, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {2}));
  std::size_t bad = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t d = uniform_int(rng, 1, 16);
    auto x = gaussian_vector(rng, d, std::pow(10.0, uniform(rng, -3.0, 2.0)));
    if (norm2(x) == 0.0) x[0] = 1.0;
    const auto g = gaussian_vector(rng, d, 1.0);
    const double eps = std::pow(10.0, uniform(rng, -6.0, 0.0));
    const double root_d = std::sqrt(static_cast<double>(d));
    if (!within(norm2(rmsnorm(x, g, eps)), root_d * inf_norm(g))) ++bad;
    // Unit gains and no epsilon: the norm is exactly sqrt(d).
    const std::vector<double> ones(d, 1.0);
    if (std::abs(norm2(rmsnorm(x, ones, 0.0)) - root_d) > kRelTol * root_d) ++bad;
  }
  return make_result("rmsnorm_magnitude", trials, bad);
}

SuiteResult check_softmax_lipschitz(std::size_t trials, std::uint64_t seed, const SoftmaxFn& fn) {
  Rng rng(derive_seed(seed, {3}));
  std::size_t bad = 0;
  double worst = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t n = uniform_int(rng, 2, 10);
    const double scale = std::pow(10.0, uniform(rng, -2.0, 1.0));
    const auto p1 = gaussian_vector(rng, n, scale);
    const auto p2 = partner(rng, p1, scale);
    const double gap = diff_norm(p1, p2);
    if (gap == 0.0) continue;
    const double lhs = diff_norm(fn(p1), fn(p2));
    worst = std::max(worst, lhs / gap);
    if (!within(lhs, 0.5 * gap)) ++bad;
  }
  return make_result("softmax_half_lipschitz", trials, bad, "max ratio " + std::to_string(worst));
}

SuiteResult check_structured_softmax(std::size_t trials, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {4}));
  std::size_t bad = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t ell = uniform_int(rng, 1, 8);
    const std::size_t eta2 = uniform_int(rng, 0, ell);
    const auto p1 = gaussian_vector(rng, ell, 2.0);
    std::vector<std::size_t> reps(eta2);
    for (auto& r : reps) r = uniform_int(rng, 0, 3);
    const std::size_t eta1 = std::accumulate(reps.begin(), reps.end(), std::size_t{0});
    if (eta1 + (ell - eta2) == 0) reps.back() = 1;
    const auto deltas = gaussian_vector(rng, ell - eta2, 1.0);
    const auto res = structured_softmax_aggregate(p1, reps, std::accumulate(reps.begin(), reps.end(), std::size_t{0}),
                                                  deltas);
    for (std::size_t i = 0; i < ell; ++i) {
      const double a = res.aggregated[i];
      const double b = res.closed_form[i];
      if (std::abs(a - b) > kRelTol * std::max(std::abs(a), std::abs(b))) {
        ++bad;
        break;
      }
    }
  }
  return make_result("structured_softmax_identity", trials, bad);
}

SuiteResult check_bias_decomposition(std::size_t trials, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {5}));
  std::size_t bad = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    const auto b = pw_bias_decomposition(random_instance(rng));
    if (std::abs(b.pw_residual()) > 1e-12 || std::abs(b.avg_residual()) > 1e-12) ++bad;
  }
  return make_result("bias_decomposition", trials, bad);
}

SuiteResult check_theorem_b2(std::size_t trials, std::uint64_t seed) {
  const auto r = theorem_b2_oracle(trials, seed);
  SuiteResult out = make_result("theorem_b2", trials, r.violations,
                                std::to_string(r.satisfying) + " satisfy the assumption, " +
                                    std::to_string(r.witnesses) + " witnesses among " +
                                    std::to_string(r.magnitude_failures) + " magnitude failures");
  out.passed = r.violations == 0 && r.witnesses > 0;
  return out;
}

SuiteResult check_block_composition(std::size_t trials, std::uint64_t seed, const SoftmaxFn& fn) {
  Rng rng(derive_seed(seed, {6}));
  std::size_t bad = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t d = uniform_int(rng, 2, 8);
    const std::size_t eta = uniform_int(rng, 2, 6);
    const std::size_t hidden = uniform_int(rng, 1, 4);
    const double eps = std::pow(10.0, uniform(rng, -4.0, 0.0));
    const auto g = gaussian_vector(rng, d, 1.0);
    const Mat wq = random_matrix(rng, d, d), wk = random_matrix(rng, d, d), wv = random_matrix(rng, d, d);
    const Mat w1 = random_matrix(rng, d, 2 * hidden), w2 = random_matrix(rng, hidden, d);
    const auto b1 = gaussian_vector(rng, 2 * hidden, 0.5);

    std::vector<std::vector<double>> x1(eta), x2(eta);
    for (std::size_t i = 0; i < eta; ++i) {
      x1[i] = gaussian_vector(rng, d, 1.0);
      x2[i] = partner(rng, x1[i], 1.0);
    }
    bool ok = true;
    auto check = [&](double lhs, double bound) { ok = ok && within(lhs, bound); };

    // Normalised rows and their projections.
    std::vector<std::vector<double>> n1(eta), n2(eta), k1(eta), k2(eta), v1(eta), v2(eta);
    for (std::size_t i = 0; i < eta; ++i) {
      n1[i] = rmsnorm(x1[i], g, eps);
      n2[i] = rmsnorm(x2[i], g, eps);
      check(diff_norm(n1[i], n2[i]), inf_norm(g) / std::sqrt(eps) * diff_norm(x1[i], x2[i]));
      k1[i] = row_times(n1[i], wk);
      k2[i] = row_times(n2[i], wk);
      v1[i] = row_times(n1[i], wv);
      v2[i] = row_times(n2[i], wv);
      check(diff_norm(k1[i], k2[i]), spectral_norm(wk) * diff_norm(n1[i], n2[i]));
      check(diff_norm(v1[i], v2[i]), spectral_norm(wv) * diff_norm(n1[i], n2[i]));
    }
    const auto q1 = row_times(n1[eta - 1], wq);
    const auto q2 = row_times(n2[eta - 1], wq);
    check(diff_norm(q1, q2), spectral_norm(wq) * diff_norm(n1[eta - 1], n2[eta - 1]));

    // Attention scores of the last query against every key.
    std::vector<double> s1(eta), s2(eta);
    for (std::size_t j = 0; j < eta; ++j) {
      s1[j] = dot(q1, k1[j]);
      s2[j] = dot(q2, k2[j]);
      const double eps_qk = std::max({norm2(q1), norm2(q2), norm2(k1[j]), norm2(k2[j])});
      check(std::abs(s1[j] - s2[j]), eps_qk * (diff_norm(q1, q2) + diff_norm(k1[j], k2[j])));
    }
    const auto a1 = fn(s1);
    const auto a2 = fn(s2);
    check(diff_norm(a1, a2), 0.5 * diff_norm(s1, s2));

    // Value aggregation.
    std::vector<double> o1(d, 0.0), o2(d, 0.0);
    double eps_v = 0.0, value_gap = 0.0;
    for (std::size_t j = 0; j < eta; ++j) {
      for (std::size_t c = 0; c < d; ++c) {
        o1[c] += a1[j] * v1[j][c];
        o2[c] += a2[j] * v2[j][c];
      }
      eps_v = std::max({eps_v, norm2(v1[j]), norm2(v2[j])});
      value_gap += diff_norm(v1[j], v2[j]) * diff_norm(v1[j], v2[j]);
    }
    check(diff_norm(o1, o2),
          eps_v * std::sqrt(static_cast<double>(eta)) * diff_norm(a1, a2) + std::sqrt(value_gap));

    // SwiGLU feed-forward on the normalised residual stream.
    std::vector<double> r1(d), r2(d);
    for (std::size_t c = 0; c < d; ++c) {
      r1[c] = x1[eta - 1][c] + o1[c];
      r2[c] = x2[eta - 1][c] + o2[c];
    }
    const auto u1 = rmsnorm(r1, g, eps);
    const auto u2 = rmsnorm(r2, g, eps);
    auto h1 = row_times(u1, w1), h2 = row_times(u2, w1);
    for (std::size_t c = 0; c < h1.size(); ++c) {
      h1[c] += b1[c];
      h2[c] += b1[c];
    }
    auto swiglu = [&](const std::vector<double>& h) {
      std::vector<double> out(hidden);
      for (std::size_t c = 0; c < hidden; ++c) out[c] = swish(h[c]) * h[hidden + c];
      return out;
    };
    const auto f1 = row_times(swiglu(h1), w2);
    const auto f2 = row_times(swiglu(h2), w2);
    // The segment between h1 and h2 stays inside the sup-norm ball of radius m.
    const double m = std::max(inf_norm(h1), inf_norm(h2));
    const double l_swiglu = std::sqrt(kSwishSlopeBound * kSwishSlopeBound * m * m + m * m);
    check(diff_norm(f1, f2), spectral_norm(w2) * l_swiglu * spectral_norm(w1) * diff_norm(u1, u2));

    if (!ok) ++bad;
  }
  return make_result("block_composition", trials, bad);
}

std::vector<std::string> suite_names() {
  return {"rmsnorm_lipschitz",  "rmsnorm_magnitude", "softmax_half_lipschitz", "structured_softmax_identity",
          "bias_decomposition", "theorem_b2",        "block_composition"};
}

std::vector<SuiteResult> run_suites(const SuiteOptions& o) {
  const SoftmaxFn fn = o.fault == Fault::kSoftmaxFactor ? SoftmaxFn(faulty_softmax)
                                                        : SoftmaxFn([](std::span<const double> p) { return softmax(p); });
  return {check_rmsnorm_lipschitz(o.lipschitz_trials, o.seed),
          check_rmsnorm_magnitude(o.lipschitz_trials, o.seed),
          check_softmax_lipschitz(o.lipschitz_trials, o.seed, fn),
          check_structured_softmax(o.identity_trials, o.seed),
          check_bias_decomposition(o.identity_trials, o.seed),
          check_theorem_b2(o.theorem_trials, o.seed),
          check_block_composition(o.block_trials, o.seed, fn)};
}

}  // namespace tokval::theory
