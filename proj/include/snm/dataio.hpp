#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <istream>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "snm/random.hpp"

namespace snm {

using UserId = std::size_t;
using ItemId = std::size_t;

class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SamplingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RawPair {
  std::string user;
  std::string item;

  friend bool operator==(const RawPair&, const RawPair&) = default;
};

struct IngestOptions {
  bool binarize = true;
  double threshold = 3.0;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

inline std::vector<std::string_view> split_fields(std::string_view line) {
  const char delim = line.find('\t') != std::string_view::npos ? '\t' : ',';
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(delim, start);
    fields.push_back(trim(line.substr(start, pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return fields;
}

inline bool parse_double(std::string_view s, double& out) {
  if (s.empty()) return false;
  if (s.front() == '+') s.remove_prefix(1);
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size() && std::isfinite(out);
}

inline bool is_number(std::string_view s) {
  double ignored = 0.0;
  return parse_double(s, ignored);
}

// Two-column files carry no numeric field to tell a header from a record,
// so a header is recognised by its first column name.
inline bool names_user(std::string_view s) {
  std::string lower(s);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return lower.find("user") != std::string::npos;
}

struct PairHash {
  std::size_t operator()(const std::pair<std::string, std::string>& p) const {
    const std::size_t h = std::hash<std::string>{}(p.first);
    return h ^ (std::hash<std::string>{}(p.second) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2));
  }
};

}  // namespace detail

/// Parses `user,item,rating[,timestamp]` records (comma or tab separated)
/// and returns the deduplicated positive pairs. Duplicates keep the last
/// rating seen; output order is first appearance of each pair. A first line
/// whose rating column is not numeric (or, for two-column input, whose first
/// column names the user) is a header. With
/// `binarize` off every event is a positive and the rating column is
/// optional.
inline std::vector<RawPair> parse_ratings(std::istream& in, const IngestOptions& options = {}) {
  std::vector<std::pair<RawPair, bool>> events;
  std::unordered_map<std::pair<std::string, std::string>, std::size_t, detail::PairHash> slot;
  std::string line;
  std::size_t line_no = 0;
  bool seen_record = false;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string_view body = detail::trim(line);
    if (body.empty()) continue;
    const auto fields = detail::split_fields(body);
    if (!seen_record) {
      seen_record = true;
      const bool header = fields.size() >= 3 ? !detail::is_number(fields[2])
                                             : fields.size() == 2 && detail::names_user(fields[0]);
      if (header) continue;
    }
    const std::size_t min_fields = options.binarize ? 3 : 2;
    if (fields.size() < min_fields || fields.size() > 4) {
      throw ParseError(line_no, "expected user,item,rating[,timestamp], got " +
                                    std::to_string(fields.size()) + " fields");
    }
    if (fields[0].empty() || fields[1].empty()) throw ParseError(line_no, "empty user or item id");
    bool positive = true;
    if (fields.size() >= 3) {
      double rating = 0.0;
      if (!detail::parse_double(fields[2], rating)) {
        throw ParseError(line_no, "rating is not a number: '" + std::string(fields[2]) + "'");
      }
      if (options.binarize) positive = rating > options.threshold;
    }
    if (fields.size() == 4 && !fields[3].empty() && !detail::is_number(fields[3])) {
      throw ParseError(line_no, "timestamp is not a number");
    }
    std::pair<std::string, std::string> key{std::string(fields[0]), std::string(fields[1])};
    auto [it, inserted] = slot.try_emplace(key, events.size());
    if (inserted) {
      events.push_back({RawPair{std::move(key.first), std::move(key.second)}, positive});
    } else {
      events[it->second].second = positive;
    }
  }
  std::vector<RawPair> pairs;
  for (auto& [pair, positive] : events) {
    if (positive) pairs.push_back(std::move(pair));
  }
  if (pairs.empty()) throw DatasetError("no positive interactions in input");
  return pairs;
}

inline std::vector<RawPair> ingest_and_binarize(const std::filesystem::path& path,
                                                const IngestOptions& options = {}) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open " + path.string());
  return parse_ratings(in, options);
}

/// Reads the citeulike `users.dat` layout: line i lists user i's saved
/// items as "count item item ...".
inline std::vector<RawPair> parse_citeulike_users(std::istream& in) {
  std::vector<RawPair> pairs;
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream fields(line);
    std::size_t count = 0;
    if (!(fields >> count)) {
      if (detail::trim(line).empty()) continue;
      throw ParseError(line_no, "expected item count");
    }
    const std::string user = std::to_string(line_no - 1);
    std::string item;
    std::size_t read = 0;
    while (fields >> item) {
      ++read;
      if (seen.insert(user + '\x1f' + item).second) pairs.push_back({user, item});
    }
    if (read != count) {
      throw ParseError(line_no, "declared " + std::to_string(count) + " items, found " +
                                    std::to_string(read));
    }
  }
  if (pairs.empty()) throw DatasetError("no interactions in input");
  return pairs;
}

/// Positive pairs remapped to contiguous indices, before split labelling.
struct FilteredPairs {
  std::vector<std::string> user_ids;
  std::vector<std::string> item_ids;
  std::vector<std::pair<UserId, ItemId>> pairs;
};

/// Alternately drops users with fewer than `min_user_pos` positives and
/// items with fewer than `min_item_users` users until neither rule removes
/// anything. Repeated pairs count once. Indices follow first appearance in
/// the surviving pairs.
inline FilteredPairs filter_sparse(const std::vector<RawPair>& raw, std::size_t min_user_pos = 5,
                                   std::size_t min_item_users = 2) {
  if (raw.empty()) throw DatasetError("filter_sparse: empty input");
  std::vector<std::uint8_t> alive(raw.size(), 1);
  {
    std::unordered_set<std::pair<std::string, std::string>, detail::PairHash> seen;
    for (std::size_t i = 0; i < raw.size(); ++i) {
      alive[i] = seen.insert({raw[i].user, raw[i].item}).second;
    }
  }
  bool changed = true;
  while (changed) {
    changed = false;
    std::unordered_map<std::string_view, std::size_t> per_user;
    for (std::size_t i = 0; i < raw.size(); ++i) {
      if (alive[i]) ++per_user[raw[i].user];
    }
    for (std::size_t i = 0; i < raw.size(); ++i) {
      if (alive[i] && per_user[raw[i].user] < min_user_pos) {
        alive[i] = 0;
        changed = true;
      }
    }
    std::unordered_map<std::string_view, std::size_t> per_item;
    for (std::size_t i = 0; i < raw.size(); ++i) {
      if (alive[i]) ++per_item[raw[i].item];
    }
    for (std::size_t i = 0; i < raw.size(); ++i) {
      if (alive[i] && per_item[raw[i].item] < min_item_users) {
        alive[i] = 0;
        changed = true;
      }
    }
  }

  FilteredPairs out;
  std::unordered_map<std::string_view, UserId> users;
  std::unordered_map<std::string_view, ItemId> items;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (!alive[i]) continue;
    auto [u, new_user] = users.try_emplace(raw[i].user, out.user_ids.size());
    if (new_user) out.user_ids.push_back(raw[i].user);
    auto [v, new_item] = items.try_emplace(raw[i].item, out.item_ids.size());
    if (new_item) out.item_ids.push_back(raw[i].item);
    out.pairs.emplace_back(u->second, v->second);
  }
  if (out.pairs.empty()) throw DatasetError("every interaction was removed by sparsity filtering");
  return out;
}

enum class Split : std::uint8_t { kTrain = 0, kValid = 1, kTest = 2 };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kValid: return "valid";
    case Split::kTest: return "test";
  }
  return "?";
}

struct Interaction {
  UserId user = 0;
  ItemId item = 0;
  Split split = Split::kTrain;

  friend bool operator==(const Interaction&, const Interaction&) = default;
};

/// Immutable labelled implicit-feedback store. Interactions are kept sorted
/// by (user, item).
class InteractionStore {
 public:
  InteractionStore() = default;

  InteractionStore(std::vector<std::string> user_ids, std::vector<std::string> item_ids,
                   std::vector<Interaction> interactions)
      : user_ids_(std::move(user_ids)),
        item_ids_(std::move(item_ids)),
        interactions_(std::move(interactions)) {
    std::sort(interactions_.begin(), interactions_.end(), [](const auto& a, const auto& b) {
      return std::tie(a.user, a.item) < std::tie(b.user, b.item);
    });
    train_items_.resize(user_ids_.size());
    all_items_.resize(user_ids_.size());
    for (std::size_t i = 0; i < interactions_.size(); ++i) {
      const auto& x = interactions_[i];
      if (x.user >= user_ids_.size() || x.item >= item_ids_.size()) {
        throw DatasetError("interaction index out of range");
      }
      if (i > 0 && interactions_[i - 1].user == x.user && interactions_[i - 1].item == x.item) {
        throw DatasetError("duplicate interaction (" + std::to_string(x.user) + ", " +
                           std::to_string(x.item) + ")");
      }
      all_items_[x.user].push_back(x.item);
      if (x.split == Split::kTrain) train_items_[x.user].push_back(x.item);
      ++counts_[static_cast<std::size_t>(x.split)];
    }
  }

  std::size_t num_users() const noexcept { return user_ids_.size(); }
  std::size_t num_items() const noexcept { return item_ids_.size(); }
  std::span<const Interaction> interactions() const noexcept { return interactions_; }
  const std::string& user_id(UserId u) const { return user_ids_.at(u); }
  const std::string& item_id(ItemId v) const { return item_ids_.at(v); }
  const std::vector<std::string>& user_ids() const noexcept { return user_ids_; }
  const std::vector<std::string>& item_ids() const noexcept { return item_ids_; }

  /// Sorted train positives of `u`.
  std::span<const ItemId> train_items(UserId u) const { return train_items_.at(u); }
  /// Sorted positives of `u` across all splits.
  std::span<const ItemId> positive_items(UserId u) const { return all_items_.at(u); }

  bool is_train_positive(UserId u, ItemId v) const {
    const auto& s = train_items_.at(u);
    return std::binary_search(s.begin(), s.end(), v);
  }
  bool is_positive(UserId u, ItemId v) const {
    const auto& s = all_items_.at(u);
    return std::binary_search(s.begin(), s.end(), v);
  }

  std::size_t count(Split s) const noexcept { return counts_[static_cast<std::size_t>(s)]; }

  std::vector<Interaction> in_split(Split s) const {
    std::vector<Interaction> out;
    out.reserve(count(s));
    for (const auto& x : interactions_) {
      if (x.split == s) out.push_back(x);
    }
    return out;
  }

 private:
  std::vector<std::string> user_ids_;
  std::vector<std::string> item_ids_;
  std::vector<Interaction> interactions_;
  std::vector<std::vector<ItemId>> train_items_;
  std::vector<std::vector<ItemId>> all_items_;
  std::array<std::size_t, 3> counts_{};
};

struct SplitFractions {
  double train = 0.7;
  double valid = 0.1;
  double test = 0.2;
};

/// Seeded per-interaction random split. Users left without a train positive
/// get their lowest-index held-out item relabelled train, swapping labels
/// with a train interaction of a user who can spare one so split sizes stay
/// fixed.
inline InteractionStore split_interactions(const FilteredPairs& data,
                                           const SplitFractions& fractions = {},
                                           std::uint64_t seed = 0) {
  const double total = fractions.train + fractions.valid + fractions.test;
  if (fractions.train <= 0.0 || fractions.valid < 0.0 || fractions.test < 0.0 ||
      std::abs(total - 1.0) > 1e-9) {
    throw DatasetError("split fractions must be nonnegative and sum to 1");
  }
  const std::size_t n = data.pairs.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  SplitMix64 rng(derive_seed(seed, {seed_offset::kSplit}));
  std::shuffle(order.begin(), order.end(), rng);

  const auto n_train = static_cast<std::size_t>(std::llround(fractions.train * n));
  const auto n_valid =
      std::min(n - n_train, static_cast<std::size_t>(std::llround(fractions.valid * n)));
  std::vector<Split> label(n, Split::kTest);
  for (std::size_t pos = 0; pos < n; ++pos) {
    const std::size_t i = order[pos];
    label[i] = pos < n_train ? Split::kTrain : pos < n_train + n_valid ? Split::kValid
                                                                       : Split::kTest;
  }

  std::vector<std::size_t> train_count(data.user_ids.size(), 0);
  std::vector<std::vector<std::size_t>> by_user(data.user_ids.size());
  for (std::size_t i = 0; i < n; ++i) {
    by_user[data.pairs[i].first].push_back(i);
    if (label[i] == Split::kTrain) ++train_count[data.pairs[i].first];
  }

  // Donors are scanned from the end of the shuffled train block.
  std::size_t donor_cursor = n_train;
  for (UserId u = 0; u < by_user.size(); ++u) {
    if (train_count[u] > 0 || by_user[u].empty()) continue;
    std::size_t pick = by_user[u].front();
    for (std::size_t i : by_user[u]) {
      if (data.pairs[i].second < data.pairs[pick].second) pick = i;
    }
    const Split freed = label[pick];
    label[pick] = Split::kTrain;
    ++train_count[u];
    while (donor_cursor > 0) {
      const std::size_t i = order[--donor_cursor];
      const UserId owner = data.pairs[i].first;
      if (label[i] == Split::kTrain && owner != u && train_count[owner] >= 2) {
        label[i] = freed;
        --train_count[owner];
        break;
      }
    }
  }

  std::vector<Interaction> interactions(n);
  for (std::size_t i = 0; i < n; ++i) {
    interactions[i] = {data.pairs[i].first, data.pairs[i].second, label[i]};
  }
  return InteractionStore(data.user_ids, data.item_ids, std::move(interactions));
}

/// For each item, the users holding a train positive on it, ascending.
class NeighborhoodIndex {
 public:
  NeighborhoodIndex() = default;

  explicit NeighborhoodIndex(const InteractionStore& store) : raters_(store.num_items()) {
    for (const auto& x : store.interactions()) {
      if (x.split == Split::kTrain) raters_[x.item].push_back(x.user);
    }
    for (auto& r : raters_) std::sort(r.begin(), r.end());
  }

  std::size_t num_items() const noexcept { return raters_.size(); }
  std::span<const UserId> raters(ItemId v) const { return raters_.at(v); }

 private:
  std::vector<std::vector<UserId>> raters_;
};

/// Train raters of `v` other than `exclude`; a seeded uniform subset of
/// size `cap` (ascending) when there are more than `cap`. `cap == 0` means
/// no limit.
inline std::vector<UserId> neighborhood_of(const NeighborhoodIndex& index, ItemId v,
                                           UserId exclude, std::size_t cap, std::uint64_t seed) {
  const auto raters = index.raters(v);
  std::vector<UserId> out;
  out.reserve(raters.size());
  for (UserId u : raters) {
    if (u != exclude) out.push_back(u);
  }
  if (cap == 0 || out.size() <= cap) return out;
  SplitMix64 rng(seed);
  for (std::size_t i = 0; i < cap; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, out.size() - 1);
    std::swap(out[i], out[pick(rng)]);
  }
  out.resize(cap);
  std::sort(out.begin(), out.end());
  return out;
}

/// Uniform draws with replacement, rejecting `u`'s train positives.
inline std::vector<ItemId> sample_negative_items(const InteractionStore& store, UserId u,
                                                 std::size_t count, std::uint64_t seed) {
  const auto liked = store.train_items(u);
  if (liked.size() >= store.num_items()) {
    throw SamplingError("user " + std::to_string(u) + " has a train positive on every item");
  }
  SplitMix64 rng(seed);
  std::uniform_int_distribution<ItemId> pick(0, store.num_items() - 1);
  std::vector<ItemId> out;
  out.reserve(count);
  while (out.size() < count) {
    const ItemId v = pick(rng);
    if (!std::binary_search(liked.begin(), liked.end(), v)) out.push_back(v);
  }
  return out;
}

/// `count` distinct items that are not positives of `u` in any split.
inline std::vector<ItemId> sample_eval_negatives(const InteractionStore& store, UserId u,
                                                 std::size_t count, std::uint64_t seed) {
  const auto liked = store.positive_items(u);
  if (store.num_items() - liked.size() < count) {
    throw SamplingError("user " + std::to_string(u) + " has fewer than " +
                        std::to_string(count) + " unobserved items");
  }
  SplitMix64 rng(seed);
  std::uniform_int_distribution<ItemId> pick(0, store.num_items() - 1);
  std::vector<ItemId> out;
  out.reserve(count);
  std::unordered_set<ItemId> taken;
  while (out.size() < count) {
    const ItemId v = pick(rng);
    if (std::binary_search(liked.begin(), liked.end(), v)) continue;
    if (taken.insert(v).second) out.push_back(v);
  }
  return out;
}

/// `k` users uniform over all users except `exclude`.
inline std::vector<UserId> sample_negative_users(std::size_t num_users, UserId exclude,
                                                 std::size_t k, std::uint64_t seed) {
  if (num_users < 2) throw SamplingError("need at least two users to sample negatives");
  SplitMix64 rng(seed);
  std::uniform_int_distribution<UserId> pick(0, num_users - 2);
  std::vector<UserId> out(k);
  for (auto& u : out) {
    u = pick(rng);
    if (u >= exclude) ++u;
  }
  return out;
}

// --- prepared dataset directory --------------------------------------------

struct PrepareOptions {
  IngestOptions ingest{};
  bool citeulike_format = false;
  std::size_t min_user_pos = 5;
  std::size_t min_item_users = 2;
  SplitFractions fractions{};
  std::uint64_t seed = 0;
};

inline InteractionStore prepare_dataset(const std::filesystem::path& input,
                                        const PrepareOptions& options) {
  std::vector<RawPair> raw;
  if (options.citeulike_format) {
    std::ifstream in(input);
    if (!in) throw DatasetError("cannot open " + input.string());
    raw = parse_citeulike_users(in);
  } else {
    raw = ingest_and_binarize(input, options.ingest);
  }
  const auto filtered = filter_sparse(raw, options.min_user_pos, options.min_item_users);
  return split_interactions(filtered, options.fractions, options.seed);
}

inline double sparsity(const InteractionStore& store) {
  const double cells = static_cast<double>(store.num_users()) * static_cast<double>(store.num_items());
  return 1.0 - static_cast<double>(store.interactions().size()) / cells;
}

/// Writes train.tsv, valid.tsv, test.tsv (internal user/item indices),
/// mapping.tsv (kind, external id, internal index) and meta.txt.
inline void write_prepared(const InteractionStore& store, const std::filesystem::path& dir,
                           std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  for (Split s : {Split::kTrain, Split::kValid, Split::kTest}) {
    std::ofstream out(dir / (std::string(split_name(s)) + ".tsv"));
    out << "user\titem\n";
    for (const auto& x : store.interactions()) {
      if (x.split == s) out << x.user << '\t' << x.item << '\n';
    }
    if (!out) throw DatasetError("failed writing split files in " + dir.string());
  }
  {
    std::ofstream out(dir / "mapping.tsv");
    out << "kind\texternal\tinternal\n";
    for (UserId u = 0; u < store.num_users(); ++u) out << "user\t" << store.user_id(u) << '\t' << u << '\n';
    for (ItemId v = 0; v < store.num_items(); ++v) out << "item\t" << store.item_id(v) << '\t' << v << '\n';
  }
  std::ofstream meta(dir / "meta.txt");
  meta << "users=" << store.num_users() << '\n'
       << "items=" << store.num_items() << '\n'
       << "ratings=" << store.interactions().size() << '\n'
       << "train=" << store.count(Split::kTrain) << '\n'
       << "valid=" << store.count(Split::kValid) << '\n'
       << "test=" << store.count(Split::kTest) << '\n'
       << "sparsity=" << std::fixed << std::setprecision(6) << sparsity(store) << '\n'
       << "seed=" << seed << '\n';
  if (!meta) throw DatasetError("failed writing meta.txt in " + dir.string());
}

inline std::map<std::string, std::string> read_meta(const std::filesystem::path& dir) {
  std::ifstream in(dir / "meta.txt");
  if (!in) throw DatasetError("missing meta.txt in " + dir.string());
  std::map<std::string, std::string> meta;
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) meta[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return meta;
}

inline InteractionStore load_prepared(const std::filesystem::path& dir) {
  const auto meta = read_meta(dir);
  auto number = [&](const std::string& key) -> std::size_t {
    auto it = meta.find(key);
    if (it == meta.end()) throw DatasetError("meta.txt lacks " + key);
    return std::stoull(it->second);
  };
  const std::size_t m = number("users");
  const std::size_t n = number("items");

  std::vector<std::string> user_ids(m), item_ids(n);
  {
    std::ifstream in(dir / "mapping.tsv");
    if (!in) throw DatasetError("missing mapping.tsv in " + dir.string());
    std::string line;
    std::getline(in, line);
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
      ++line_no;
      if (detail::trim(line).empty()) continue;
      std::istringstream fields(line);
      std::string kind, external;
      std::size_t internal = 0;
      if (!std::getline(fields, kind, '\t') || !std::getline(fields, external, '\t') ||
          !(fields >> internal)) {
        throw ParseError(line_no, "malformed mapping.tsv record");
      }
      auto& ids = kind == "user" ? user_ids : item_ids;
      if (internal >= ids.size()) throw ParseError(line_no, "mapping index out of range");
      ids[internal] = external;
    }
  }

  std::vector<Interaction> interactions;
  for (Split s : {Split::kTrain, Split::kValid, Split::kTest}) {
    std::ifstream in(dir / (std::string(split_name(s)) + ".tsv"));
    if (!in) throw DatasetError("missing " + std::string(split_name(s)) + ".tsv");
    std::string line;
    std::getline(in, line);
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
      ++line_no;
      if (detail::trim(line).empty()) continue;
      std::istringstream fields(line);
      Interaction x;
      x.split = s;
      if (!(fields >> x.user >> x.item)) throw ParseError(line_no, "malformed split record");
      interactions.push_back(x);
    }
  }
  return InteractionStore(std::move(user_ids), std::move(item_ids), std::move(interactions));
}

}  // namespace snm
