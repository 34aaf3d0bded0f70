#include "tokval/sveb.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"
#include "tokval/baseline.hpp"
#include "tokval/errors.hpp"
#include "tokval/format.hpp"
#include "tokval/parallel.hpp"
#include "tokval/rng.hpp"

namespace tokval {

namespace {

std::map<std::int64_t, const Rollout*> index_rollouts(std::span<const Group> groups) {
  std::map<std::int64_t, const Rollout*> out;
  for (const auto& g : groups)
    for (const auto& r : g.rollouts) out.emplace(r.rollout_id, &r);
  return out;
}

const Rollout& find_rollout(const std::map<std::int64_t, const Rollout*>& index, const StateRef& s) {
  const auto it = index.find(s.rollout_id);
  if (it == index.end()) throw ValidationError("state refers to unknown rollout " + std::to_string(s.rollout_id));
  if (s.token_index >= it->second->generated_len())
    throw ValidationError("token index " + std::to_string(s.token_index) + " out of range for rollout " +
                          std::to_string(s.rollout_id));
  return *it->second;
}

}  // namespace

std::vector<StateRef> collect_states(std::span<const Group> groups, std::size_t per_rollout, std::uint64_t seed) {
  if (per_rollout < 1) throw ValidationError("collect_states: per_rollout must be >= 1");
  std::vector<StateRef> out;
  for (const auto& g : groups) {
    for (const auto& r : g.rollouts) {
      const std::size_t eta = r.generated_len();
      const std::size_t take = std::min(per_rollout, eta);
      std::vector<std::size_t> pos(eta);
      std::iota(pos.begin(), pos.end(), std::size_t{0});
      Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(r.prompt_id), static_cast<std::uint64_t>(r.rollout_id)}));
      // Partial Fisher-Yates.
      for (std::size_t i = 0; i < take; ++i) {
        const auto j = i + static_cast<std::size_t>(uniform01(rng) * static_cast<double>(eta - i));
        std::swap(pos[i], pos[std::min(j, eta - 1)]);
      }
      pos.resize(take);
      std::sort(pos.begin(), pos.end());
      for (std::size_t t : pos) out.push_back({r.prompt_id, r.rollout_id, t});
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

SyntheticContinuations::SyntheticContinuations(const NumberChain& chain, std::span<const Group> groups,
                                               const std::map<std::int64_t, LatentTrace>& latents,
                                               std::uint64_t seed)
    : chain_(chain), rollouts_(index_rollouts(groups)), latents_(latents), seed_(seed) {}

std::vector<double> SyntheticContinuations::rewards(const StateRef& state, std::size_t n,
                                                    std::uint64_t stream) const {
  const Rollout& r = find_rollout(rollouts_, state);
  const auto lt = latents_.find(state.rollout_id);
  if (lt == latents_.end())
    throw ConfigError("no latent trace for rollout " + std::to_string(state.rollout_id));
  Rng rng(derive_seed(seed_, {static_cast<std::uint64_t>(state.rollout_id), state.token_index, stream}));
  std::vector<double> out(n);
  for (auto& v : out) v = chain_.sample_continuation(r, lt->second, state.token_index, rng);
  return out;
}

OfflineContinuations::OfflineContinuations(std::map<std::pair<std::int64_t, std::size_t>, std::vector<double>> table)
    : table_(std::move(table)) {}

OfflineContinuations OfflineContinuations::load(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw ConfigError("bundle has no continuation file " + file.string());
  std::map<std::pair<std::int64_t, std::size_t>, std::vector<double>> table;
  std::string text;
  std::size_t line_no = 0;
  while (std::getline(in, text)) {
    ++line_no;
    if (text.empty()) continue;
    try {
      const auto obj = nlohmann::json::parse(text);
      const auto key = std::pair(obj.at("rollout_id").get<std::int64_t>(), obj.at("token_index").get<std::size_t>());
      auto rewards = obj.at("rewards").get<std::vector<double>>();
      for (double v : rewards)
        if (!(v >= 0.0 && v <= 1.0)) throw FormatError("continuation reward outside [0, 1]", line_no);
      table[key] = std::move(rewards);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(e.what(), line_no);
    }
  }
  return OfflineContinuations(std::move(table));
}

std::vector<double> OfflineContinuations::rewards(const StateRef& state, std::size_t n, std::uint64_t) const {
  const auto it = table_.find({state.rollout_id, state.token_index});
  if (it == table_.end() || it->second.size() < n)
    throw ConfigError("offline continuations lack " + std::to_string(n) + " rewards for rollout " +
                      std::to_string(state.rollout_id) + " token " + std::to_string(state.token_index));
  return {it->second.begin(), it->second.begin() + static_cast<std::ptrdiff_t>(n)};
}

ReferenceSpec ReferenceSpec::parse(const std::string& text) {
  if (text == "exact") return {Kind::kExact, 0};
  if (text.rfind("mcs@", 0) == 0) {
    const std::string digits = text.substr(4);
    if (!digits.empty() && std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; })) {
      const auto n = std::stoull(digits);
      if (n >= 1) return {Kind::kMcs, static_cast<std::size_t>(n)};
    }
  }
  throw ConfigError("reference must be 'exact' or 'mcs@N' with N >= 1, got '" + text + "'");
}

std::string ReferenceSpec::to_string() const {
  return kind == Kind::kExact ? "exact" : "mcs@" + std::to_string(n);
}

std::vector<double> reference_values(std::span<const Group> groups, std::span<const StateRef> states,
                                     const ReferenceSpec& spec, const NumberChain* chain,
                                     const std::map<std::int64_t, LatentTrace>* latents,
                                     const ContinuationSource* continuations) {
  std::vector<double> out;
  out.reserve(states.size());
  if (spec.kind == ReferenceSpec::Kind::kExact) {
    if (!chain || !latents) throw ConfigError("exact reference needs the generator config and latent sidecar");
    const auto index = index_rollouts(groups);
    std::map<std::int64_t, std::vector<double>> cache;
    for (const auto& s : states) {
      const Rollout& r = find_rollout(index, s);
      auto it = cache.find(s.rollout_id);
      if (it == cache.end()) {
        const auto lt = latents->find(s.rollout_id);
        if (lt == latents->end())
          throw ConfigError("latent sidecar has no trace for rollout " + std::to_string(s.rollout_id));
        it = cache.emplace(s.rollout_id, chain->exact_token_values(r, lt->second)).first;
      }
      out.push_back(it->second[s.token_index]);
    }
    return out;
  }
  if (!continuations) throw ConfigError("MCS reference needs a continuation source");
  for (const auto& s : states) {
    const auto rewards = continuations->rewards(s, spec.n, kReferenceStream);
    out.push_back(std::accumulate(rewards.begin(), rewards.end(), 0.0) / static_cast<double>(rewards.size()));
  }
  return out;
}

double mae(std::span<const SvebRecord> records, const std::string& method) {
  if (records.empty()) throw ValidationError("mae: no records");
  double sum = 0.0;
  for (const auto& r : records) {
    const auto it = r.estimates.find(method);
    if (it == r.estimates.end())
      throw ValidationError("mae: record (rollout " + std::to_string(r.state.rollout_id) + ", token " +
                            std::to_string(r.state.token_index) + ") has no '" + method + "' estimate");
    sum += std::abs(it->second - r.reference);
  }
  return sum / static_cast<double>(records.size());
}

std::vector<Group> difficulty_filter(std::span<const Group> groups, double lo, double hi) {
  std::vector<Group> out;
  for (const auto& g : groups) {
    const double acc = g.mean_reward();
    if (acc >= lo && acc <= hi) out.push_back(g);
  }
  return out;
}

Histogram diff_histogram(std::span<const SvebRecord> records, const std::string& method, std::size_t bins,
                         double lo, double hi) {
  if (bins < 1 || !(hi > lo)) throw ValidationError("diff_histogram: bad binning");
  Histogram h;
  const double width = (hi - lo) / static_cast<double>(bins);
  h.edges.resize(bins + 1);
  for (std::size_t i = 0; i <= bins; ++i) h.edges[i] = lo + width * static_cast<double>(i);
  h.counts.assign(bins, 0);
  for (const auto& r : records) {
    const auto m = r.estimates.find(method);
    const auto g = r.estimates.find("grpo");
    if (m == r.estimates.end() || g == r.estimates.end())
      throw ValidationError("diff_histogram: record lacks '" + method + "' or 'grpo' estimate");
    const double diff = m->second - g->second;
    const double pos = std::floor((diff - lo) / width);
    const auto bin = pos < 0.0 ? std::size_t{0}
                               : std::min(bins - 1, static_cast<std::size_t>(pos));
    ++h.counts[bin];
  }
  return h;
}

std::optional<std::size_t> parse_method(const std::string& label) {
  if (label == "grpo" || label == "numca" || label == "hista") return std::nullopt;
  if (label.rfind("mcs@", 0) == 0) return ReferenceSpec::parse(label).n;
  throw ConfigError("unknown method '" + label + "'");
}

std::vector<SvebRecord> evaluate_states(std::span<const Group> groups, std::span<const StateRef> states,
                                        std::span<const double> references, const SvebOptions& options,
                                        const ContinuationSource* continuations) {
  if (references.size() != states.size()) throw ValidationError("evaluate_states: reference count mismatch");
  for (const auto& m : options.methods) {
    if (parse_method(m) && !continuations)
      throw ConfigError("method '" + m + "' needs a continuation source");
  }

  std::vector<SvebRecord> records(states.size());
  for (std::size_t i = 0; i < states.size(); ++i) {
    records[i].state = states[i];
    records[i].reference = references[i];
  }

  // States are sorted by prompt, so each group owns one contiguous slice.
  std::map<std::int64_t, std::pair<std::size_t, std::size_t>> slices;
  for (std::size_t i = 0; i < states.size(); ++i) {
    auto [it, inserted] = slices.emplace(states[i].prompt_id, std::pair(i, i + 1));
    if (!inserted) {
      if (it->second.second != i) throw ValidationError("evaluate_states: states must be grouped by prompt");
      it->second.second = i + 1;
    }
  }
  std::vector<const Group*> work;
  for (const auto& g : groups)
    if (slices.count(g.prompt_id)) work.push_back(&g);
  if (work.size() != slices.size()) throw ValidationError("evaluate_states: state refers to an unknown prompt");

  parallel_for(work.size(), options.threads, [&](std::size_t w) {
    const Group& g = *work[w];
    const auto [begin, end] = slices.at(g.prompt_id);
    auto value_at = [&](const std::vector<ValueAssignment>& va, const StateRef& s) {
      for (const auto& a : va)
        if (a.rollout_id == s.rollout_id) {
          if (s.token_index >= a.values.size()) throw ValidationError("token index out of range");
          return a.values[s.token_index];
        }
      throw ValidationError("state refers to rollout " + std::to_string(s.rollout_id) + " outside its group");
    };
    for (const auto& m : options.methods) {
      std::vector<ValueAssignment> va;
      if (m == "grpo") va = grpo_values(g);
      else if (m == "numca") va = numca_values(g, options.patterns);
      else if (m == "hista") va = hista_values(g, options.hista);
      if (!va.empty()) {
        for (std::size_t i = begin; i < end; ++i) records[i].estimates[m] = value_at(va, records[i].state);
        continue;
      }
      const std::size_t n = *parse_method(m);
      std::vector<StateContinuations> conts;
      for (std::size_t i = begin; i < end; ++i)
        conts.push_back({records[i].state, continuations->rewards(records[i].state, n, kEstimatorStream)});
      const auto values = mcs_values(g, conts);
      for (std::size_t i = begin; i < end; ++i) records[i].estimates[m] = values[i - begin];
    }
  });
  return records;
}

SvebReport summarize(std::span<const SvebRecord> records, const std::vector<std::string>& methods,
                     const std::string& reference_label) {
  SvebReport rep;
  rep.n_records = records.size();
  rep.reference = reference_label;
  const bool have_grpo = std::find(methods.begin(), methods.end(), "grpo") != methods.end();
  for (const auto& m : methods) {
    rep.mae.emplace_back(m, mae(records, m));
    if (have_grpo) rep.histograms[m] = diff_histogram(records, m);
  }
  return rep;
}

void write_report(const SvebReport& report, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string());
  {
    std::ofstream out(dir / "report.csv", std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write report.csv");
    out << "method,mae,n_records\n";
    for (const auto& [m, v] : report.mae) out << m << ',' << format_double(v) << ',' << report.n_records << '\n';
  }
  for (const auto& [m, h] : report.histograms) {
    std::ofstream out(dir / ("hist_" + m + ".csv"), std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write histogram for " + m);
    out << "bin_lo,bin_hi,count\n";
    for (std::size_t i = 0; i < h.counts.size(); ++i)
      out << format_double(h.edges[i]) << ',' << format_double(h.edges[i + 1]) << ',' << h.counts[i] << '\n';
  }
}

}  // namespace tokval
