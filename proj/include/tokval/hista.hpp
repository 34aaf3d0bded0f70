#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "tokval/baseline.hpp"
#include "tokval/matrix.hpp"
#include "tokval/trace_model.hpp"

namespace tokval {

struct HistaParams {
  double alpha = 0.7;    // EMA smoothing factor, in [0, 1)
  std::size_t phi = 5;   // tokens per compressed embedding
  std::size_t delta = 50;  // embeddings per sampled state
  std::size_t k = 66;    // neighbours per query state
  double eps_dist = 1e-6;  // floor applied to MinDistance before inversion
};

void validate_hista_params(const HistaParams& p);

/// Read-only view of the first `rows` rows of a row-major matrix.
struct RowsView {
  const double* data = nullptr;
  std::size_t rows = 0;
  std::size_t cols = 0;

  RowsView() = default;
  RowsView(const Embeddings& m) : data(m.flat().data()), rows(m.rows()), cols(m.cols()) {}
  RowsView prefix(std::size_t n) const { return {data, n, cols}; }
  std::span<const double> row(std::size_t r) const { return {data + r * cols, cols}; }

 private:
  RowsView(const double* d, std::size_t r, std::size_t c) : data(d), rows(r), cols(c) {}
};

struct CompressedTrace {
  std::int64_t rollout_id = 0;
  Embeddings embeddings;                     // floor(eta / phi) x d
  std::vector<std::size_t> state_positions;  // delta, 2*delta, ... (embedding counts)
  double reward = 0.0;
};

/// EMA over the hidden rows (m_1 = x_1, m_t = alpha*m_{t-1} + (1-alpha)*x_t),
/// keeping m_{i*phi} for i = 1..floor(eta/phi). Throws when eta < phi.
Embeddings compress(const HiddenMatrix& hidden, double alpha, std::size_t phi);

/// Compresses a rollout and lays out its sampled states. A rollout too short
/// for a single embedding yields an empty trace rather than an error.
CompressedTrace compress_trace(const Rollout& rollout, const HistaParams& params);

double euclidean(std::span<const double> a, std::span<const double> b);

/// MinDistance between two embedding sequences: the longer sequence's rows
/// each contribute their nearest distance into the other sequence. For equal
/// lengths the two directional sums are averaged so the result is symmetric.
double min_distance(RowsView x1, RowsView x2);

/// MinDistance between every sampled prefix of `a` (rows) and of `b` (cols),
/// using running minima and running sums over one pass of pairwise distances.
DenseMatrix<double> prefix_distance_grid(const CompressedTrace& a, const CompressedTrace& b);

struct Neighbor {
  std::int64_t rollout_id = 0;
  std::size_t state_index = 0;  // 0-based index into the neighbour's sampled states
  double distance = 0.0;        // already floored at eps_dist
  double reward = 0.0;
};

/// Keeps the k closest candidates, ties broken by (rollout_id, state_index),
/// in non-decreasing distance order. Distances are floored at `eps_dist`.
std::vector<Neighbor> select_neighbors(std::vector<Neighbor> candidates, std::size_t k, double eps_dist);

/// sum(w_i r_i) / sum(w_i) with w_i = 1 / distance_i.
double inverse_distance_value(std::span<const Neighbor> neighbors);

/// Value of every sampled state of every rollout in the group, indexed
/// [rollout position][state index]. Requires at least two rollouts.
std::vector<std::vector<double>> hista_sampled_state_values(const Group& group, const HistaParams& params,
                                                            std::size_t threads = 1);

/// Neighbour set of one sampled state, as used by the value computation.
std::vector<Neighbor> hista_neighbors(const Group& group, const HistaParams& params,
                                      std::size_t rollout_pos, std::size_t state_index);

/// Token-level values: each generated token inherits the most recent sampled
/// state at or before it; earlier tokens get the group-average reward.
std::vector<ValueAssignment> hista_values(const Group& group, const HistaParams& params,
                                          const AdvantageOptions& options = {}, std::size_t threads = 1);

/// Hista value at arbitrary states of this group.
std::vector<double> hista_state_values(const Group& group, const HistaParams& params,
                                       std::span<const StateRef> states, std::size_t threads = 1);

}  // namespace tokval
