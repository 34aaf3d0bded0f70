#include "tokval/trace_model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"
#include "tokval/errors.hpp"

namespace tokval {

namespace {

constexpr const char* kIndexFile = "index.jsonl";
constexpr const char* kHiddenFile = "hidden.f32";

std::string rollout_tag(std::int64_t id) { return "rollout " + std::to_string(id); }

void write_f32_le(std::ostream& out, std::span<const float> values) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size_bytes()));
  } else {
    for (float v : values) {
      auto bits = std::bit_cast<std::uint32_t>(v);
      char bytes[4];
      for (int i = 0; i < 4; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xffu);
      out.write(bytes, 4);
    }
  }
}

float read_f32_le(const unsigned char* p) {
  const std::uint32_t bits = std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) |
                             (std::uint32_t{p[2]} << 16) | (std::uint32_t{p[3]} << 24);
  return std::bit_cast<float>(bits);
}

template <typename T>
T required(const nlohmann::json& obj, const char* key, std::size_t line) {
  auto it = obj.find(key);
  if (it == obj.end()) throw FormatError(std::string("missing key '") + key + "'", line);
  try {
    return it->get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad value for '") + key + "': " + e.what(), line);
  }
}

}  // namespace

double Group::mean_reward() const {
  if (rollouts.empty()) throw ValidationError("group " + std::to_string(prompt_id) + " is empty");
  double sum = 0.0;
  for (const auto& r : rollouts) sum += r.reward;
  return sum / static_cast<double>(rollouts.size());
}

std::string_view method_name(Method m) {
  switch (m) {
    case Method::kGrpo: return "grpo";
    case Method::kNumca: return "numca";
    case Method::kHista: return "hista";
    case Method::kMcs: return "mcs";
    case Method::kExternal: return "external";
  }
  return "external";
}

void validate_rollout(const Rollout& r) {
  const auto tag = rollout_tag(r.rollout_id);
  if (r.prompt_len < 1) throw ValidationError(tag + ": prompt_len must be >= 1");
  if (r.prompt_len >= r.tokens.size())
    throw ValidationError(tag + ": prompt_len must be < token count");
  if (!(r.reward >= 0.0 && r.reward <= 1.0))
    throw ValidationError(tag + ": reward outside [0, 1]");
  if (r.hidden.cols() < 1) throw ValidationError(tag + ": hidden dimension must be >= 1");
  if (r.hidden.rows() != r.generated_len())
    throw ValidationError(tag + ": hidden has " + std::to_string(r.hidden.rows()) +
                          " rows, expected " + std::to_string(r.generated_len()));
  for (float v : r.hidden.flat())
    if (!std::isfinite(v)) throw ValidationError(tag + ": non-finite hidden entry");
}

void validate_group(const Group& g) {
  if (g.rollouts.empty())
    throw ValidationError("group " + std::to_string(g.prompt_id) + " is empty");
  const std::size_t dim = g.rollouts.front().dim();
  for (const auto& r : g.rollouts) {
    validate_rollout(r);
    if (r.prompt_id != g.prompt_id)
      throw ValidationError(rollout_tag(r.rollout_id) + ": prompt_id does not match its group");
    if (r.dim() != dim)
      throw ValidationError(rollout_tag(r.rollout_id) + ": hidden dimension differs within group");
  }
}

std::vector<Group> group_rollouts(std::vector<Rollout> rollouts) {
  std::set<std::int64_t> seen;
  for (const auto& r : rollouts) {
    validate_rollout(r);
    if (!seen.insert(r.rollout_id).second)
      throw ValidationError(rollout_tag(r.rollout_id) + ": duplicate rollout_id");
  }
  std::sort(rollouts.begin(), rollouts.end(), [](const Rollout& a, const Rollout& b) {
    return std::pair(a.prompt_id, a.rollout_id) < std::pair(b.prompt_id, b.rollout_id);
  });
  std::vector<Group> groups;
  for (auto& r : rollouts) {
    if (groups.empty() || groups.back().prompt_id != r.prompt_id) {
      groups.push_back(Group{r.prompt_id, {}});
    }
    groups.back().rollouts.push_back(std::move(r));
  }
  for (const auto& g : groups) validate_group(g);
  return groups;
}

void store_bundle(const std::vector<Group>& groups, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  std::vector<const Rollout*> ordered;
  for (const auto& g : groups) {
    validate_group(g);
    for (const auto& r : g.rollouts) ordered.push_back(&r);
  }
  std::stable_sort(ordered.begin(), ordered.end(), [](const Rollout* a, const Rollout* b) {
    return std::pair(a->prompt_id, a->rollout_id) < std::pair(b->prompt_id, b->rollout_id);
  });

  std::ofstream index(dir / kIndexFile, std::ios::binary | std::ios::trunc);
  std::ofstream hidden(dir / kHiddenFile, std::ios::binary | std::ios::trunc);
  if (!index || !hidden) throw IoError("cannot open bundle files in " + dir.string());

  std::uint64_t offset = 0;
  for (const Rollout* r : ordered) {
    nlohmann::ordered_json line;
    line["rollout_id"] = r->rollout_id;
    line["prompt_id"] = r->prompt_id;
    line["tokens"] = r->tokens;
    line["prompt_len"] = r->prompt_len;
    line["reward"] = r->reward;
    line["terminal"] = r->terminal;
    line["eta"] = r->hidden.rows();
    line["dim"] = r->hidden.cols();
    line["offset"] = offset;
    index << line.dump() << '\n';
    write_f32_le(hidden, r->hidden.flat());
    offset += r->hidden.flat().size_bytes();
  }
  index.flush();
  hidden.flush();
  if (!index || !hidden) throw IoError("write failed in " + dir.string());
}

std::vector<Group> load_bundle(const std::filesystem::path& dir) {
  std::ifstream index(dir / kIndexFile, std::ios::binary);
  if (!index) throw IoError("cannot open " + (dir / kIndexFile).string());
  std::ifstream hidden_in(dir / kHiddenFile, std::ios::binary);
  if (!hidden_in) throw IoError("cannot open " + (dir / kHiddenFile).string());
  const std::vector<unsigned char> blob((std::istreambuf_iterator<char>(hidden_in)),
                                        std::istreambuf_iterator<char>());

  std::vector<Rollout> rollouts;
  std::uint64_t covered = 0;
  std::string text;
  std::size_t line_no = 0;
  while (std::getline(index, text)) {
    ++line_no;
    if (text.empty()) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(std::string("invalid JSON: ") + e.what(), line_no);
    }
    if (!obj.is_object()) throw FormatError("expected a JSON object", line_no);

    Rollout r;
    r.rollout_id = required<std::int64_t>(obj, "rollout_id", line_no);
    r.prompt_id = required<std::int64_t>(obj, "prompt_id", line_no);
    r.tokens = required<std::vector<std::string>>(obj, "tokens", line_no);
    r.prompt_len = required<std::size_t>(obj, "prompt_len", line_no);
    r.reward = required<double>(obj, "reward", line_no);
    r.terminal = required<bool>(obj, "terminal", line_no);
    const auto eta = required<std::uint64_t>(obj, "eta", line_no);
    const auto dim = required<std::uint64_t>(obj, "dim", line_no);
    const auto offset = required<std::uint64_t>(obj, "offset", line_no);

    const std::uint64_t bytes = eta * dim * 4;
    if (offset > blob.size() || bytes > blob.size() - offset)
      throw IntegrityError(rollout_tag(r.rollout_id) + ": matrix bytes [" +
                           std::to_string(offset) + ", " + std::to_string(offset + bytes) +
                           ") exceed hidden.f32 size " + std::to_string(blob.size()));
    std::vector<float> values(eta * dim);
    const unsigned char* base = blob.data() + offset;
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = read_f32_le(base + 4 * i);
    r.hidden = HiddenMatrix(eta, dim, std::move(values));
    covered += bytes;
    rollouts.push_back(std::move(r));
  }
  if (covered != blob.size())
    throw IntegrityError("hidden.f32 holds " + std::to_string(blob.size()) +
                         " bytes but the index accounts for " + std::to_string(covered));
  return group_rollouts(std::move(rollouts));
}

}  // namespace tokval
