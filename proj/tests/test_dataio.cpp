#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "snm/dataio.hpp"
#include "support.hpp"

using namespace snm;
using snm::testing::numbered;
using snm::testing::train_only_store;

namespace {

std::vector<RawPair> parse(const std::string& text, IngestOptions options = {}) {
  std::istringstream in(text);
  return parse_ratings(in, options);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("snm_dataio_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST(Ingest, RatingAboveThresholdIsKept) {
  const auto pairs = parse("7,12,4\n");
  ASSERT_EQ(pairs.size(), 1u);
  EXPECT_EQ(pairs[0], (RawPair{"7", "12"}));
}

TEST(Ingest, RatingAtThresholdIsDropped) {
  EXPECT_EQ(parse("7,12,3\n7,13,5\n").size(), 1u);
}

TEST(Ingest, DuplicatesCollapseKeepingLastRating) {
  EXPECT_EQ(parse("7,12,4\n7,12,5\n").size(), 1u);
  EXPECT_EQ(parse("7,12,4\n8,1,5\n7,12,2\n").size(), 1u);
  const auto revived = parse("7,12,1\n8,1,5\n7,12,5\n");
  ASSERT_EQ(revived.size(), 2u);
  EXPECT_EQ(revived[0], (RawPair{"7", "12"}));
}

TEST(Ingest, HeaderTabsAndTimestamps) {
  const auto pairs = parse("userId\tmovieId\trating\ttimestamp\n1\t10\t4.5\t964982703\n2\t10\t0.5\t1\n");
  ASSERT_EQ(pairs.size(), 1u);
  EXPECT_EQ(pairs[0], (RawPair{"1", "10"}));
}

TEST(Ingest, TwoColumnHeaderOnlyWhenNamed) {
  IngestOptions implicit;
  implicit.binarize = false;
  std::istringstream plain("alice,book\nbob,book\n");
  EXPECT_EQ(parse_ratings(plain, implicit).size(), 2u);
  std::istringstream named("UserId,ItemId\nalice,book\n");
  const auto pairs = parse_ratings(named, implicit);
  ASSERT_EQ(pairs.size(), 1u);
  EXPECT_EQ(pairs[0], (RawPair{"alice", "book"}));
}

TEST(Ingest, MalformedLineReportsLineNumber) {
  try {
    parse("1,2,5\n1,3,5\n1,4\n");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  EXPECT_THROW(parse("1,2,five\n1,2,abc\n"), ParseError);
}

TEST(Ingest, NoPositivesIsDatasetError) {
  EXPECT_THROW(parse("1,2,1\n1,3,2\n"), DatasetError);
  EXPECT_THROW(parse(""), DatasetError);
}

TEST(Ingest, ImplicitInputPassesThroughWithoutBinarizing) {
  IngestOptions raw;
  raw.binarize = false;
  EXPECT_EQ(parse("1,2,1\n1,3,0\n2,2\n", raw).size(), 3u);
}

TEST(Ingest, CiteulikeUserLists) {
  std::istringstream in("3 10 11 12\n2 10 13\n");
  const auto pairs = parse_citeulike_users(in);
  ASSERT_EQ(pairs.size(), 5u);
  EXPECT_EQ(pairs[3], (RawPair{"1", "10"}));
  std::istringstream bad("3 10 11\n");
  EXPECT_THROW(parse_citeulike_users(bad), ParseError);
}

TEST(Filter, UserWithFourPositivesIsRemoved) {
  std::vector<RawPair> raw;
  for (const char* u : {"a", "b"}) {
    for (int v = 0; v < 5; ++v) raw.push_back({u, std::to_string(v)});
  }
  for (int v = 0; v < 4; ++v) raw.push_back({"c", std::to_string(v)});
  const auto out = filter_sparse(raw);
  EXPECT_EQ(out.user_ids, (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(out.pairs.size(), 10u);
}

TEST(Filter, UserWithExactlyFivePositivesIsKept) {
  std::vector<RawPair> raw;
  for (const char* u : {"a", "b"}) {
    for (int v = 0; v < 5; ++v) raw.push_back({u, std::to_string(v)});
  }
  EXPECT_EQ(filter_sparse(raw).user_ids.size(), 2u);
}

// Six users. A and B (4 positives) go in the first user pass, which leaves X
// with no users and Y with only C; both items go, C drops to 4 positives and
// leaves in the second user pass. D, E, F and P1..P5 survive.
TEST(Filter, CascadeReachesFixpoint) {
  std::vector<RawPair> raw;
  auto like = [&](const char* u, std::initializer_list<const char*> items) {
    for (const char* v : items) raw.push_back({u, v});
  };
  like("A", {"X", "Y", "P1", "P2"});
  like("B", {"X", "P1", "P2", "P3"});
  like("C", {"Y", "P1", "P2", "P3", "P4"});
  for (const char* u : {"D", "E", "F"}) like(u, {"P1", "P2", "P3", "P4", "P5"});
  const auto out = filter_sparse(raw);
  EXPECT_EQ(out.user_ids, (std::vector<std::string>{"D", "E", "F"}));
  EXPECT_EQ(out.item_ids, (std::vector<std::string>{"P1", "P2", "P3", "P4", "P5"}));
  EXPECT_EQ(out.pairs.size(), 15u);
}

TEST(Filter, EverythingRemovedIsDatasetError) {
  EXPECT_THROW(filter_sparse({{"a", "1"}, {"b", "1"}}), DatasetError);
  EXPECT_THROW(filter_sparse({}), DatasetError);
}

TEST(Filter, RandomInputsSatisfyBothThresholds) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    SplitMix64 rng(seed);
    std::vector<RawPair> raw;
    for (int k = 0; k < 400; ++k) {
      raw.push_back({std::to_string(rng() % 60), std::to_string(rng() % 80)});
    }
    FilteredPairs out;
    try {
      out = filter_sparse(raw);
    } catch (const DatasetError&) {
      continue;
    }
    std::map<UserId, std::set<ItemId>> per_user;
    std::map<ItemId, std::set<UserId>> per_item;
    for (auto [u, v] : out.pairs) {
      per_user[u].insert(v);
      per_item[v].insert(u);
    }
    EXPECT_EQ(per_user.size(), out.user_ids.size());
    EXPECT_EQ(per_item.size(), out.item_ids.size());
    for (auto& [u, items] : per_user) EXPECT_GE(items.size(), 5u) << "seed " << seed;
    for (auto& [v, users] : per_item) EXPECT_GE(users.size(), 2u) << "seed " << seed;
  }
}

TEST(Split, TenPositivesGiveSevenOneTwo) {
  FilteredPairs data{numbered("u", 2), numbered("i", 5), {}};
  for (UserId u = 0; u < 2; ++u) {
    for (ItemId v = 0; v < 5; ++v) data.pairs.emplace_back(u, v);
  }
  const auto store = split_interactions(data, {}, 42);
  EXPECT_EQ(store.count(Split::kTrain), 7u);
  EXPECT_EQ(store.count(Split::kValid), 1u);
  EXPECT_EQ(store.count(Split::kTest), 2u);
}

TEST(Split, UserWithoutTrainPositiveGetsOneRelabelled) {
  // 30 users with a single positive each and one heavy user to donate
  // train labels; P(all 30 singles land in train) is 0.7^30.
  FilteredPairs data{numbered("u", 31), numbered("i", 100), {}};
  for (UserId u = 0; u < 30; ++u) data.pairs.emplace_back(u, u);
  for (ItemId v = 0; v < 100; ++v) data.pairs.emplace_back(30, v);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto store = split_interactions(data, {}, seed);
    for (UserId u = 0; u < 31; ++u) EXPECT_FALSE(store.train_items(u).empty());
    EXPECT_EQ(store.count(Split::kTrain), 91u);
    EXPECT_EQ(store.count(Split::kValid), 13u);
    EXPECT_EQ(store.count(Split::kTest), 26u);
  }
}

TEST(Split, RelabelPicksLowestIndexHeldOutItem) {
  // Replays the seeded shuffle to find seeds where user 0 (items 7, 2, 5)
  // gets no train label before the relabel pass.
  FilteredPairs data{numbered("u", 2), numbered("i", 40), {}};
  for (ItemId v : {7, 2, 5}) data.pairs.emplace_back(0, v);
  for (ItemId v = 0; v < 40; ++v) data.pairs.emplace_back(1, v);
  const std::size_t n = data.pairs.size();
  int relabelled = 0;
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    SplitMix64 rng(derive_seed(seed, {seed_offset::kSplit}));
    std::shuffle(order.begin(), order.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::llround(0.7 * static_cast<double>(n)));
    bool any_train = false;
    for (std::size_t pos = 0; pos < n_train; ++pos) any_train |= order[pos] < 3;
    if (any_train) continue;
    ++relabelled;
    const auto store = split_interactions(data, {}, seed);
    EXPECT_EQ(std::vector<ItemId>(store.train_items(0).begin(), store.train_items(0).end()),
              std::vector<ItemId>{2});
    EXPECT_EQ(store.count(Split::kTrain), n_train);
  }
  EXPECT_GT(relabelled, 0);
}

TEST(Split, DeterministicPerSeed) {
  const auto a = snm::testing::synthetic_store(80, 60, 12, 7);
  const auto b = snm::testing::synthetic_store(80, 60, 12, 7);
  EXPECT_TRUE(std::equal(a.interactions().begin(), a.interactions().end(),
                         b.interactions().begin(), b.interactions().end()));
  const auto c = split_interactions(filter_sparse(snm::testing::raw_pattern(80, 60, 12, 7)), {}, 8);
  EXPECT_FALSE(std::equal(a.interactions().begin(), a.interactions().end(),
                          c.interactions().begin(), c.interactions().end()));
}

TEST(Split, PartitionAndFractionInvariants) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto raw = snm::testing::raw_pattern(50 + seed, 40, 6 + seed % 5, seed);
    const auto filtered = filter_sparse(raw);
    const auto store = split_interactions(filtered, {}, seed);
    const double n = static_cast<double>(filtered.pairs.size());
    EXPECT_EQ(store.interactions().size(), filtered.pairs.size());
    EXPECT_LE(std::abs(static_cast<double>(store.count(Split::kTrain)) - 0.7 * n), 1.0);
    EXPECT_LE(std::abs(static_cast<double>(store.count(Split::kValid)) - 0.1 * n), 1.0);
    EXPECT_LE(std::abs(static_cast<double>(store.count(Split::kTest)) - 0.2 * n), 1.0);
    std::set<std::pair<UserId, ItemId>> seen;
    for (const auto& x : store.interactions()) {
      EXPECT_TRUE(seen.insert({x.user, x.item}).second);
    }
    std::set<std::pair<UserId, ItemId>> original(filtered.pairs.begin(), filtered.pairs.end());
    EXPECT_EQ(seen, original);
    for (UserId u = 0; u < store.num_users(); ++u) EXPECT_FALSE(store.train_items(u).empty());
  }
}

TEST(Neighborhood, ExcludesTargetUser) {
  const auto store = train_only_store(10, 3, {{1, 0}, {4, 0}, {9, 0}, {4, 1}});
  const NeighborhoodIndex index(store);
  EXPECT_EQ(neighborhood_of(index, 0, 4, 50, 0), (std::vector<UserId>{1, 9}));
  EXPECT_TRUE(neighborhood_of(index, 1, 4, 50, 0).empty());
  EXPECT_TRUE(neighborhood_of(index, 2, 4, 50, 0).empty());
}

TEST(Neighborhood, CapSamplesDistinctReproducibly) {
  std::vector<std::pair<UserId, ItemId>> pairs;
  for (UserId u = 0; u < 120; ++u) pairs.emplace_back(u, 0);
  const auto store = train_only_store(121, 1, pairs);
  const NeighborhoodIndex index(store);
  const auto a = neighborhood_of(index, 0, 120, 50, 3);
  EXPECT_EQ(a.size(), 50u);
  EXPECT_EQ(std::set<UserId>(a.begin(), a.end()).size(), 50u);
  EXPECT_TRUE(std::is_sorted(a.begin(), a.end()));
  EXPECT_EQ(a, neighborhood_of(index, 0, 120, 50, 3));
  EXPECT_NE(a, neighborhood_of(index, 0, 120, 50, 4));
  EXPECT_EQ(neighborhood_of(index, 0, 120, 0, 3).size(), 120u);
}

TEST(Neighborhood, IndexIsBuiltFromTrainOnly) {
  const auto store = snm::testing::synthetic_store(100, 50, 10, 21);
  const NeighborhoodIndex index(store);
  std::vector<std::pair<UserId, ItemId>> train;
  for (const auto& x : store.in_split(Split::kTrain)) train.emplace_back(x.user, x.item);
  const NeighborhoodIndex rebuilt(train_only_store(store.num_users(), store.num_items(), train));
  for (ItemId v = 0; v < store.num_items(); ++v) {
    const auto a = index.raters(v);
    const auto b = rebuilt.raters(v);
    ASSERT_TRUE(std::equal(a.begin(), a.end(), b.begin(), b.end())) << "item " << v;
    for (UserId u : a) ASSERT_TRUE(store.is_train_positive(u, v));
  }
}

TEST(NegativeItems, RatioFivePerPositive) {
  const auto store = train_only_store(1, 20, {{0, 3}});
  const auto negs = sample_negative_items(store, 0, 5, 1);
  EXPECT_EQ(negs.size(), 5u);
  for (ItemId v : negs) EXPECT_NE(v, 3u);
}

TEST(NegativeItems, ForcedWhenOneItemRemains) {
  const auto store = train_only_store(1, 2, {{0, 0}});
  for (ItemId v : sample_negative_items(store, 0, 50, 9)) EXPECT_EQ(v, 1u);
}

TEST(NegativeItems, FullCatalogIsSamplingError) {
  const auto store = train_only_store(1, 2, {{0, 0}, {0, 1}});
  EXPECT_THROW(sample_negative_items(store, 0, 1, 0), SamplingError);
}

TEST(NegativeItems, HeldOutPositivesMayBeTrainingNegatives) {
  const InteractionStore store(numbered("u", 1), numbered("i", 2),
                               {{0, 0, Split::kTrain}, {0, 1, Split::kTest}});
  EXPECT_EQ(sample_negative_items(store, 0, 3, 0), (std::vector<ItemId>{1, 1, 1}));
  EXPECT_THROW(sample_eval_negatives(store, 0, 1, 0), SamplingError);
}

TEST(NegativeItems, ChiSquareUniformity) {
  const auto store = train_only_store(1, 100, {{0, 10}, {0, 20}});
  const auto draws = sample_negative_items(store, 0, 100000, 2024);
  std::vector<double> counts(100, 0.0);
  for (ItemId v : draws) counts[v] += 1.0;
  EXPECT_EQ(counts[10], 0.0);
  EXPECT_EQ(counts[20], 0.0);
  const double expected = 100000.0 / 98.0;
  double chi2 = 0.0;
  for (ItemId v = 0; v < 100; ++v) {
    if (v == 10 || v == 20) continue;
    chi2 += (counts[v] - expected) * (counts[v] - expected) / expected;
  }
  // 99th percentile of chi-square with 97 degrees of freedom.
  EXPECT_LT(chi2, 132.309);
}

TEST(NegativeItems, EvaluationNegativesAreDistinctUnobserved) {
  const auto store = snm::testing::synthetic_store(60, 150, 20, 4);
  for (UserId u = 0; u < store.num_users(); ++u) {
    const auto negs = sample_eval_negatives(store, u, 99, u);
    ASSERT_EQ(negs.size(), 99u);
    EXPECT_EQ(std::set<ItemId>(negs.begin(), negs.end()).size(), 99u);
    for (ItemId v : negs) EXPECT_FALSE(store.is_positive(u, v));
  }
}

TEST(NegativeUsers, ForcedWithTwoUsers) {
  EXPECT_EQ(sample_negative_users(2, 0, 3, 5), (std::vector<UserId>{1, 1, 1}));
}

TEST(NegativeUsers, LengthAndExclusion) {
  EXPECT_EQ(sample_negative_users(10, 3, 5, 0).size(), 5u);
  const auto draws = sample_negative_users(10, 3, 10000, 77);
  std::set<UserId> seen(draws.begin(), draws.end());
  EXPECT_EQ(seen.count(3), 0u);
  EXPECT_EQ(seen.size(), 9u);
  EXPECT_THROW(sample_negative_users(1, 0, 1, 0), SamplingError);
}

TEST(Sampling, PureFunctionsOfSeed) {
  const auto store = snm::testing::synthetic_store(40, 120, 10, 2);
  EXPECT_EQ(sample_negative_items(store, 1, 20, 5), sample_negative_items(store, 1, 20, 5));
  EXPECT_EQ(sample_eval_negatives(store, 1, 20, 5), sample_eval_negatives(store, 1, 20, 5));
  EXPECT_EQ(sample_negative_users(40, 1, 20, 5), sample_negative_users(40, 1, 20, 5));
  EXPECT_NE(sample_negative_items(store, 1, 20, 5), sample_negative_items(store, 1, 20, 6));
}

TEST(Prepared, RoundTripAndByteIdenticalRerun) {
  const auto input = scratch_dir("input");
  std::filesystem::create_directories(input);
  {
    std::ofstream out(input / "ratings.csv");
    out << "userId,movieId,rating,timestamp\n";
    SplitMix64 rng(1);
    for (int u = 0; u < 40; ++u) {
      for (int v = 0; v < 30; ++v) {
        if (rng() % 3 == 0) out << u << ',' << 1000 + v << ',' << 1 + rng() % 5 << ",0\n";
      }
    }
  }
  PrepareOptions options;
  options.seed = 5;
  const auto store = prepare_dataset(input / "ratings.csv", options);
  const auto a = scratch_dir("a");
  const auto b = scratch_dir("b");
  write_prepared(store, a, 5);
  write_prepared(prepare_dataset(input / "ratings.csv", options), b, 5);
  for (const char* f : {"train.tsv", "valid.tsv", "test.tsv", "mapping.tsv", "meta.txt"}) {
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  const auto loaded = load_prepared(a);
  EXPECT_EQ(loaded.user_ids(), store.user_ids());
  EXPECT_EQ(loaded.item_ids(), store.item_ids());
  EXPECT_TRUE(std::equal(loaded.interactions().begin(), loaded.interactions().end(),
                         store.interactions().begin(), store.interactions().end()));
  EXPECT_EQ(read_meta(a).at("users"), std::to_string(store.num_users()));
}

TEST(Prepared, MissingDirectoryIsDatasetError) {
  EXPECT_THROW(load_prepared(scratch_dir("missing")), DatasetError);
}
