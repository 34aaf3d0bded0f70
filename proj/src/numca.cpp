#include "tokval/numca.hpp"

#include <algorithm>
#include <cctype>
#include <functional>
#include <optional>

#include "tokval/errors.hpp"

namespace tokval {

namespace {

bool is_digit(char c) { return std::isdigit(static_cast<unsigned char>(c)) != 0; }

std::size_t digit_run(std::string_view s, std::size_t i) {
  std::size_t j = i;
  while (j < s.size() && is_digit(s[j])) ++j;
  return j - i;
}

// Length of [-+]?\d+ at i, 0 if none.
std::size_t match_signed_int(std::string_view s, std::size_t i) {
  std::size_t j = i;
  if (j < s.size() && (s[j] == '-' || s[j] == '+')) ++j;
  const std::size_t n = digit_run(s, j);
  return n == 0 ? 0 : j + n - i;
}

// Length of [-+]?\d+<sep>\d+ at i.
std::size_t match_separated(std::string_view s, std::size_t i, char sep) {
  const std::size_t head = match_signed_int(s, i);
  if (head == 0 || i + head >= s.size() || s[i + head] != sep) return 0;
  const std::size_t tail = digit_run(s, i + head + 1);
  return tail == 0 ? 0 : head + 1 + tail;
}

struct LatexMatch {
  std::size_t length = 0;
  std::string numerator, denominator;
};

std::optional<LatexMatch> match_latex(std::string_view s, std::size_t i) {
  constexpr std::string_view kOpen = "\\frac{";
  if (s.substr(i, kOpen.size()) != kOpen) return std::nullopt;
  std::size_t j = i + kOpen.size();
  const std::size_t a = match_signed_int(s, j);
  if (a == 0 || j + a + 1 >= s.size() || s[j + a] != '}' || s[j + a + 1] != '{') return std::nullopt;
  LatexMatch m;
  m.numerator = std::string(s.substr(j, a));
  j += a + 2;
  const std::size_t b = match_signed_int(s, j);
  if (b == 0 || j + b >= s.size() || s[j + b] != '}') return std::nullopt;
  m.denominator = std::string(s.substr(j, b));
  m.length = j + b + 1 - i;
  return m;
}

}  // namespace

std::string_view pattern_name(MilestonePattern p) {
  switch (p) {
    case MilestonePattern::kSignedInteger: return "signed_integer";
    case MilestonePattern::kDecimal: return "decimal";
    case MilestonePattern::kSlashFraction: return "slash_fraction";
    case MilestonePattern::kLatexFraction: return "latex_fraction";
  }
  return "signed_integer";
}

MilestonePatterns MilestonePatterns::all() {
  return {{MilestonePattern::kSignedInteger, MilestonePattern::kDecimal,
           MilestonePattern::kSlashFraction, MilestonePattern::kLatexFraction}};
}

MilestonePatterns MilestonePatterns::from_names(const std::vector<std::string>& names) {
  MilestonePatterns out;
  for (const auto& name : names) {
    bool found = false;
    for (auto p : all().patterns) {
      if (pattern_name(p) == name) {
        if (std::find(out.patterns.begin(), out.patterns.end(), p) == out.patterns.end())
          out.patterns.push_back(p);
        found = true;
      }
    }
    if (!found) throw ConfigError("unknown milestone pattern '" + name + "'");
  }
  return out;
}

std::vector<std::string> MilestonePatterns::names() const {
  std::vector<std::string> out;
  for (auto p : patterns) out.emplace_back(pattern_name(p));
  return out;
}

std::string normalize_number(std::string_view raw) {
  std::string out;
  out.reserve(raw.size());
  std::size_t i = 0;
  if (i < raw.size() && raw[i] == '+') ++i;
  while (i < raw.size()) {
    if (is_digit(raw[i])) {
      const std::size_t n = digit_run(raw, i);
      std::size_t k = i;
      // An integer part keeps one digit; a fractional part after '.' keeps everything.
      const bool fractional = !out.empty() && out.back() == '.';
      if (!fractional)
        while (k + 1 < i + n && raw[k] == '0') ++k;
      out.append(raw.substr(k, i + n - k));
      i += n;
    } else {
      out.push_back(raw[i]);
      ++i;
    }
  }
  return out;
}

std::vector<MilestoneMatch> find_milestones(std::string_view text, const MilestonePatterns& patterns) {
  auto enabled = [&](MilestonePattern p) {
    return std::find(patterns.patterns.begin(), patterns.patterns.end(), p) != patterns.patterns.end();
  };
  const bool ints = enabled(MilestonePattern::kSignedInteger);
  const bool decimals = enabled(MilestonePattern::kDecimal);
  const bool slashes = enabled(MilestonePattern::kSlashFraction);
  const bool latex = enabled(MilestonePattern::kLatexFraction);

  std::vector<MilestoneMatch> out;
  std::size_t i = 0;
  while (i < text.size()) {
    std::size_t best = 0;
    std::string normalized;
    if (latex) {
      if (auto m = match_latex(text, i)) {
        best = m->length;
        normalized = normalize_number(m->numerator) + "/" + normalize_number(m->denominator);
      }
    }
    auto consider = [&](std::size_t len) {
      if (len > best) {
        best = len;
        normalized = normalize_number(text.substr(i, len));
      }
    };
    if (decimals) consider(match_separated(text, i, '.'));
    if (slashes) consider(match_separated(text, i, '/'));
    if (ints) consider(match_signed_int(text, i));
    if (best == 0) {
      ++i;
      continue;
    }
    out.push_back({std::move(normalized), i, i + best});
    i += best;
  }
  return out;
}

std::vector<std::string> extract_milestones(std::string_view text, const MilestonePatterns& patterns) {
  std::vector<std::string> out;
  for (auto& m : find_milestones(text, patterns)) out.push_back(std::move(m.text));
  return out;
}

bool AbstractState::insert(std::string milestone) {
  const auto it = std::lower_bound(items_.begin(), items_.end(), milestone);
  if (it != items_.end() && *it == milestone) return false;
  items_.insert(it, std::move(milestone));
  return true;
}

std::string AbstractState::to_string() const {
  std::string out = "{";
  for (std::size_t i = 0; i < items_.size(); ++i) {
    if (i) out += ",";
    out += items_[i];
  }
  return out + "}";
}

std::size_t AbstractStateHash::operator()(const AbstractState& s) const noexcept {
  std::size_t h = 0xcbf29ce484222325ULL;
  for (const auto& m : s.milestones()) {
    h ^= std::hash<std::string>{}(m) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  }
  return h;
}

std::vector<AbstractState> abstract_state_trace(const Rollout& rollout, const MilestonePatterns& patterns) {
  const std::size_t eta = rollout.generated_len();
  std::string text;
  std::vector<std::size_t> token_end(eta);
  for (std::size_t t = 0; t < eta; ++t) {
    text += rollout.generated_token(t);
    token_end[t] = text.size();
  }
  const auto matches = find_milestones(text, patterns);

  std::vector<AbstractState> trace(eta);
  AbstractState current;
  std::size_t next = 0;
  for (std::size_t t = 0; t < eta; ++t) {
    // A match belongs to the token that holds its last character.
    while (next < matches.size() && matches[next].end <= token_end[t]) {
      current.insert(matches[next].text);
      ++next;
    }
    trace[t] = current;
  }
  return trace;
}

MilestoneTable build_table(const Group& group, const MilestonePatterns& patterns) {
  if (group.rollouts.empty())
    throw ValidationError("build_table: group " + std::to_string(group.prompt_id) + " is empty");
  MilestoneTable table;
  for (const auto& r : group.rollouts) {
    AbstractState active;
    auto record = [&](const AbstractState& s) {
      auto& e = table[s];
      e.count += 1;
      e.reward_sum += r.reward;
    };
    record(active);
    for (auto& s : abstract_state_trace(r, patterns)) {
      if (s != active) {
        active = std::move(s);
        record(active);
      }
    }
  }
  return table;
}

std::vector<ValueAssignment> numca_values(const Group& group, const MilestonePatterns& patterns,
                                          const AdvantageOptions& options) {
  const MilestoneTable table = build_table(group, patterns);
  std::vector<ValueAssignment> out;
  out.reserve(group.rollouts.size());
  for (const auto& r : group.rollouts) {
    ValueAssignment va{r.rollout_id, {}, {}, Method::kNumca};
    va.values.reserve(r.generated_len());
    for (const auto& s : abstract_state_trace(r, patterns)) va.values.push_back(table.at(s).value());
    out.push_back(std::move(va));
  }
  assign_advantages(group, out, options);
  return out;
}

}  // namespace tokval
