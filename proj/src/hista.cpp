#include "tokval/hista.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "tokval/errors.hpp"
#include "tokval/parallel.hpp"

namespace tokval {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::vector<CompressedTrace> compress_group(const Group& group, const HistaParams& params,
                                            std::size_t threads) {
  std::vector<CompressedTrace> traces(group.rollouts.size());
  parallel_for(traces.size(), threads,
               [&](std::size_t i) { traces[i] = compress_trace(group.rollouts[i], params); });
  return traces;
}

// Grids for every unordered rollout pair; grids[a][b] with a < b holds
// rows = states of a, cols = states of b.
class PairGrids {
 public:
  PairGrids(const std::vector<CompressedTrace>& traces, std::size_t threads) : n_(traces.size()) {
    grids_.resize(n_ * n_);
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t a = 0; a < n_; ++a)
      for (std::size_t b = a + 1; b < n_; ++b)
        if (!traces[a].state_positions.empty() && !traces[b].state_positions.empty())
          pairs.emplace_back(a, b);
    parallel_for(pairs.size(), threads, [&](std::size_t p) {
      const auto [a, b] = pairs[p];
      grids_[a * n_ + b] = prefix_distance_grid(traces[a], traces[b]);
    });
  }

  double at(std::size_t a, std::size_t i, std::size_t b, std::size_t j) const {
    return a < b ? grids_[a * n_ + b](i, j) : grids_[b * n_ + a](j, i);
  }

 private:
  std::size_t n_;
  std::vector<DenseMatrix<double>> grids_;
};

std::vector<Neighbor> neighbors_of(const std::vector<CompressedTrace>& traces, const PairGrids& grids,
                                   const HistaParams& params, std::size_t a, std::size_t i) {
  std::vector<Neighbor> candidates;
  for (std::size_t b = 0; b < traces.size(); ++b) {
    if (b == a) continue;
    for (std::size_t j = 0; j < traces[b].state_positions.size(); ++j)
      candidates.push_back({traces[b].rollout_id, j, grids.at(a, i, b, j), traces[b].reward});
  }
  return select_neighbors(std::move(candidates), params.k, params.eps_dist);
}

void require_pair(const Group& group) {
  if (group.rollouts.size() < 2)
    throw ValidationError("hista: group " + std::to_string(group.prompt_id) +
                          " needs at least 2 rollouts so neighbours exist outside the query rollout");
}

}  // namespace

void validate_hista_params(const HistaParams& p) {
  if (!(p.alpha >= 0.0 && p.alpha < 1.0)) throw ConfigError("hista.alpha must lie in [0, 1)");
  if (p.phi < 1) throw ConfigError("hista.phi must be >= 1");
  if (p.delta < 1) throw ConfigError("hista.delta must be >= 1");
  if (p.k < 1) throw ConfigError("hista.k must be >= 1");
  if (!(p.eps_dist > 0.0) || !std::isfinite(p.eps_dist)) throw ConfigError("hista.eps_dist must be > 0");
}

Embeddings compress(const HiddenMatrix& hidden, double alpha, std::size_t phi) {
  if (phi < 1) throw ValidationError("compress: phi must be >= 1");
  const std::size_t eta = hidden.rows();
  const std::size_t d = hidden.cols();
  if (eta < phi)
    throw ValidationError("compress: " + std::to_string(eta) + " hidden rows cannot fill one interval of " +
                          std::to_string(phi));
  Embeddings out(eta / phi, d);
  std::vector<double> m(d);
  for (std::size_t t = 0; t < eta; ++t) {
    const auto x = hidden.row(t);
    if (t == 0) {
      for (std::size_t c = 0; c < d; ++c) m[c] = x[c];
    } else {
      for (std::size_t c = 0; c < d; ++c) m[c] = alpha * m[c] + (1.0 - alpha) * x[c];
    }
    if ((t + 1) % phi == 0) std::copy(m.begin(), m.end(), out.row((t + 1) / phi - 1).begin());
  }
  return out;
}

CompressedTrace compress_trace(const Rollout& rollout, const HistaParams& params) {
  CompressedTrace tr;
  tr.rollout_id = rollout.rollout_id;
  tr.reward = rollout.reward;
  if (rollout.hidden.rows() < params.phi) {
    tr.embeddings = Embeddings(0, rollout.hidden.cols());
    return tr;
  }
  tr.embeddings = compress(rollout.hidden, params.alpha, params.phi);
  for (std::size_t pos = params.delta; pos <= tr.embeddings.rows(); pos += params.delta)
    tr.state_positions.push_back(pos);
  return tr;
}

double euclidean(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t c = 0; c < a.size(); ++c) {
    const double diff = a[c] - b[c];
    s += diff * diff;
  }
  return std::sqrt(s);
}

double min_distance(RowsView x1, RowsView x2) {
  if (x1.rows == 0 || x2.rows == 0) throw ValidationError("min_distance: empty point set");
  if (x1.cols != x2.cols)
    throw ValidationError("min_distance: dimension mismatch (" + std::to_string(x1.cols) + " vs " +
                          std::to_string(x2.cols) + ")");
  auto directed = [](RowsView outer, RowsView inner) {
    double total = 0.0;
    for (std::size_t i = 0; i < outer.rows; ++i) {
      double best = kInf;
      for (std::size_t j = 0; j < inner.rows; ++j) best = std::min(best, euclidean(outer.row(i), inner.row(j)));
      total += best;
    }
    return total;
  };
  // Summing over x2 uses the distance with x1's row first, matching the grid.
  auto directed_rev = [](RowsView outer, RowsView inner) {
    double total = 0.0;
    for (std::size_t q = 0; q < outer.rows; ++q) {
      double best = kInf;
      for (std::size_t p = 0; p < inner.rows; ++p) best = std::min(best, euclidean(inner.row(p), outer.row(q)));
      total += best;
    }
    return total;
  };
  if (x1.rows > x2.rows) return directed(x1, x2);
  if (x1.rows < x2.rows) return directed_rev(x2, x1);
  return 0.5 * (directed(x1, x2) + directed_rev(x2, x1));
}

DenseMatrix<double> prefix_distance_grid(const CompressedTrace& a, const CompressedTrace& b) {
  if (a.embeddings.cols() != b.embeddings.cols())
    throw ValidationError("prefix_distance_grid: dimension mismatch");
  const auto& pa = a.state_positions;
  const auto& pb = b.state_positions;
  DenseMatrix<double> grid(pa.size(), pb.size());
  if (pa.empty() || pb.empty()) return grid;

  const std::size_t na = pa.back();
  const std::size_t nb = pb.back();
  // row_acc[j]: sum over a's rows so far of the nearest distance into b's first pb[j] rows.
  // col_min[q]: nearest distance from b's row q into a's rows so far.
  std::vector<double> dist(nb);
  std::vector<double> col_min(nb, kInf);
  std::vector<double> row_acc(pb.size(), 0.0);

  std::size_t i = 0;
  for (std::size_t p = 0; p < na; ++p) {
    const auto ap = a.embeddings.row(p);
    for (std::size_t q = 0; q < nb; ++q) dist[q] = euclidean(ap, b.embeddings.row(q));

    double running = kInf;
    std::size_t j = 0;
    for (std::size_t q = 0; q < nb; ++q) {
      running = std::min(running, dist[q]);
      col_min[q] = std::min(col_min[q], dist[q]);
      if (q + 1 == pb[j]) row_acc[j++] += running;
    }
    if (p + 1 != pa[i]) continue;

    double col_acc = 0.0;
    j = 0;
    for (std::size_t q = 0; q < nb; ++q) {
      col_acc += col_min[q];
      if (q + 1 != pb[j]) continue;
      if (pa[i] > pb[j]) grid(i, j) = row_acc[j];
      else if (pa[i] < pb[j]) grid(i, j) = col_acc;
      else grid(i, j) = 0.5 * (row_acc[j] + col_acc);
      ++j;
    }
    ++i;
  }
  return grid;
}

std::vector<Neighbor> select_neighbors(std::vector<Neighbor> candidates, std::size_t k, double eps_dist) {
  for (auto& c : candidates) c.distance = std::max(c.distance, eps_dist);
  auto closer = [](const Neighbor& x, const Neighbor& y) {
    if (x.distance != y.distance) return x.distance < y.distance;
    if (x.rollout_id != y.rollout_id) return x.rollout_id < y.rollout_id;
    return x.state_index < y.state_index;
  };
  const std::size_t keep = std::min(k, candidates.size());
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep),
                    candidates.end(), closer);
  candidates.resize(keep);
  return candidates;
}

double inverse_distance_value(std::span<const Neighbor> neighbors) {
  if (neighbors.empty()) throw ValidationError("inverse_distance_value: no neighbours");
  double num = 0.0;
  double den = 0.0;
  for (const auto& n : neighbors) {
    const double w = 1.0 / n.distance;
    num += w * n.reward;
    den += w;
  }
  return num / den;
}

std::vector<std::vector<double>> hista_sampled_state_values(const Group& group, const HistaParams& params,
                                                            std::size_t threads) {
  validate_hista_params(params);
  require_pair(group);
  const auto traces = compress_group(group, params, threads);
  const PairGrids grids(traces, threads);
  const double fallback = group.mean_reward();

  std::vector<std::vector<double>> values(traces.size());
  parallel_for(traces.size(), threads, [&](std::size_t a) {
    values[a].resize(traces[a].state_positions.size());
    for (std::size_t i = 0; i < values[a].size(); ++i) {
      const auto nbrs = neighbors_of(traces, grids, params, a, i);
      values[a][i] = nbrs.empty() ? fallback : inverse_distance_value(nbrs);
    }
  });
  return values;
}

std::vector<Neighbor> hista_neighbors(const Group& group, const HistaParams& params, std::size_t rollout_pos,
                                      std::size_t state_index) {
  validate_hista_params(params);
  require_pair(group);
  if (rollout_pos >= group.rollouts.size()) throw ValidationError("hista_neighbors: rollout out of range");
  const auto traces = compress_group(group, params, 1);
  if (state_index >= traces[rollout_pos].state_positions.size())
    throw ValidationError("hista_neighbors: state index out of range");
  const PairGrids grids(traces, 1);
  return neighbors_of(traces, grids, params, rollout_pos, state_index);
}

std::vector<ValueAssignment> hista_values(const Group& group, const HistaParams& params,
                                          const AdvantageOptions& options, std::size_t threads) {
  const auto state_values = hista_sampled_state_values(group, params, threads);
  const double fallback = group.mean_reward();
  const std::size_t tokens_per_state = params.phi * params.delta;

  std::vector<ValueAssignment> out;
  out.reserve(group.rollouts.size());
  for (std::size_t a = 0; a < group.rollouts.size(); ++a) {
    const auto& r = group.rollouts[a];
    ValueAssignment va{r.rollout_id, std::vector<double>(r.generated_len(), fallback), {}, Method::kHista};
    for (std::size_t t = 0; t < va.values.size(); ++t) {
      const std::size_t reached = (t + 1) / tokens_per_state;
      if (reached > 0) va.values[t] = state_values[a][reached - 1];
    }
    out.push_back(std::move(va));
  }
  assign_advantages(group, out, options);
  return out;
}

std::vector<double> hista_state_values(const Group& group, const HistaParams& params,
                                       std::span<const StateRef> states, std::size_t threads) {
  for (const auto& s : states) {
    const auto it = std::find_if(group.rollouts.begin(), group.rollouts.end(),
                                 [&](const Rollout& r) { return r.rollout_id == s.rollout_id; });
    if (it == group.rollouts.end())
      throw ValidationError("hista_state_values: rollout " + std::to_string(s.rollout_id) + " not in group");
    if (s.token_index >= it->generated_len())
      throw ValidationError("hista_state_values: token index " + std::to_string(s.token_index) +
                            " out of range for rollout " + std::to_string(s.rollout_id));
  }
  const auto assignments = hista_values(group, params, {}, threads);
  std::vector<double> out;
  out.reserve(states.size());
  for (const auto& s : states) {
    for (const auto& va : assignments)
      if (va.rollout_id == s.rollout_id) out.push_back(va.values[s.token_index]);
  }
  return out;
}

}  // namespace tokval
