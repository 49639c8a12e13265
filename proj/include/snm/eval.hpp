#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "snm/dataio.hpp"
#include "snm/model.hpp"
#include "snm/random.hpp"

namespace snm {

inline constexpr std::size_t kEvalNegatives = 99;

/// One held-out positive ranked against sampled unobserved items.
struct TestCase {
  UserId user = 0;
  ItemId positive = 0;
  std::vector<ItemId> negatives;

  /// Positive first, then the negatives in sampling order.
  std::vector<ItemId> candidates() const {
    std::vector<ItemId> out{positive};
    out.insert(out.end(), negatives.begin(), negatives.end());
    return out;
  }
};

struct CaseSet {
  std::vector<TestCase> cases;
  std::size_t skipped = 0;
  std::uint64_t seed = 0;
};

/// One case per interaction of `split`. Negatives are distinct and avoid
/// every known positive of the user; each case's draw depends only on
/// (seed, user, item). Users who cannot supply `negatives` unobserved items
/// are skipped and counted.
inline CaseSet build_test_cases(const InteractionStore& store, Split split, std::uint64_t seed,
                                std::size_t negatives = kEvalNegatives) {
  CaseSet out;
  out.seed = seed;
  for (const auto& x : store.interactions()) {
    if (x.split != split) continue;
    try {
      out.cases.push_back(
          {x.user, x.item,
           sample_eval_negatives(store, x.user, negatives, derive_seed(seed, {x.user, x.item}))});
    } catch (const SamplingError&) {
      ++out.skipped;
    }
  }
  return out;
}

/// 1 + number of candidates scoring strictly higher than the positive, plus
/// equal-scoring candidates with a smaller item index.
inline std::size_t rank_of(std::span<const double> scores, std::span<const ItemId> items,
                           std::size_t positive) {
  if (scores.size() != items.size() || positive >= scores.size()) {
    throw std::invalid_argument("rank_of: score/item size mismatch");
  }
  std::size_t rank = 1;
  const double target = scores[positive];
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (i == positive) continue;
    if (scores[i] > target || (scores[i] == target && items[i] < items[positive])) ++rank;
  }
  return rank;
}

/// `scorer(user, item) -> double` is called once per candidate.
template <class Scorer>
std::size_t rank_test_case(Scorer&& scorer, const TestCase& tc) {
  const auto items = tc.candidates();
  std::vector<double> scores(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) scores[i] = scorer(tc.user, items[i]);
  return rank_of(scores, items, 0);
}

struct MetricsAtK {
  double hr = 0.0;
  double ndcg = 0.0;
};

inline MetricsAtK metrics_at_k(std::span<const std::size_t> ranks, std::size_t k) {
  if (ranks.empty()) throw std::invalid_argument("metrics_at_k: no ranks");
  MetricsAtK m;
  for (std::size_t r : ranks) {
    if (r == 0) throw std::invalid_argument("metrics_at_k: ranks start at 1");
    if (r <= k) {
      m.hr += 1.0;
      m.ndcg += 1.0 / std::log2(static_cast<double>(r) + 1.0);
    }
  }
  m.hr /= static_cast<double>(ranks.size());
  m.ndcg /= static_cast<double>(ranks.size());
  return m;
}

struct RankedCase {
  UserId user = 0;
  ItemId item = 0;
  std::size_t rank = 0;
};

struct EvalReport {
  std::vector<double> hr;    // hr[k - 1] = HR@k
  std::vector<double> ndcg;  // ndcg[k - 1] = NDCG@k
  std::size_t cases = 0;
  std::size_t skipped = 0;
  std::vector<RankedCase> ranks;
  std::uint64_t seed = 0;

  double hr_at(std::size_t k) const { return hr.at(k - 1); }
  double ndcg_at(std::size_t k) const { return ndcg.at(k - 1); }
};

template <class Scorer>
EvalReport evaluate_cases(const CaseSet& set, Scorer&& scorer, std::size_t k_max = 10) {
  if (set.cases.empty()) throw DatasetError("evaluation has no usable cases");
  EvalReport report;
  report.cases = set.cases.size();
  report.skipped = set.skipped;
  report.seed = set.seed;
  std::vector<std::size_t> ranks;
  ranks.reserve(set.cases.size());
  for (const auto& tc : set.cases) {
    ranks.push_back(rank_test_case(scorer, tc));
    report.ranks.push_back({tc.user, tc.positive, ranks.back()});
  }
  for (std::size_t k = 1; k <= k_max; ++k) {
    const auto m = metrics_at_k(ranks, k);
    report.hr.push_back(m.hr);
    report.ndcg.push_back(m.ndcg);
  }
  return report;
}

struct EvalOptions {
  Mode mode = Mode::kFull;
  std::size_t neighbor_cap = 50;
  std::uint64_t seed = 0;
  std::size_t k_max = 10;
  Split split = Split::kTest;
  // Verify every neighbor is a train rater of the item and not the target.
  bool audit_neighborhoods = false;
};

/// Scores with the model's forward pass; neighborhoods come from the
/// train-only index with the target user excluded.
inline auto model_scorer(const ModelParams& params, const InteractionStore& store,
                         const NeighborhoodIndex& index, const EvalOptions& options) {
  return [&params, &store, &index, options](UserId u, ItemId v) {
    std::vector<UserId> neighbors;
    if (options.mode != Mode::kPlain) {
      neighbors =
          neighborhood_of(index, v, u, options.neighbor_cap, derive_seed(options.seed, {u, v}));
      if (options.audit_neighborhoods) {
        for (UserId t : neighbors) {
          if (t == u || !store.is_train_positive(t, v)) {
            throw std::logic_error("neighborhood of item " + std::to_string(v) +
                                   " contains non-train user " + std::to_string(t));
          }
        }
      }
    }
    return predict(params, u, v, neighbors, options.mode);
  };
}

inline EvalReport evaluate_model(const ModelParams& params, const InteractionStore& store,
                                 const NeighborhoodIndex& index, const EvalOptions& options) {
  if (store.count(options.split) == 0) {
    throw DatasetError(std::string(split_name(options.split)) + " split is empty");
  }
  const CaseSet set = build_test_cases(store, options.split, options.seed);
  return evaluate_cases(set, model_scorer(params, store, index, options), options.k_max);
}

/// Relevance scores for one user against the neighborhoods of several
/// items. Row i holds the first `max_neighbors` (by index) neighbors of
/// items[i]; an empty neighborhood gives an empty row.
struct Heatmap {
  UserId user = 0;
  std::vector<ItemId> items;
  std::vector<std::vector<UserId>> neighbors;
  std::vector<std::vector<double>> beta;
};

inline Heatmap export_relevance_heatmap(const ModelParams& params, const NeighborhoodIndex& index,
                                        UserId user, std::span<const ItemId> items,
                                        std::size_t neighbor_cap, std::uint64_t seed,
                                        std::size_t max_neighbors = 20) {
  Heatmap out;
  out.user = user;
  out.items.assign(items.begin(), items.end());
  for (ItemId v : items) {
    auto nb = neighborhood_of(index, v, user, neighbor_cap, derive_seed(seed, {user, v}));
    if (nb.size() > max_neighbors) nb.resize(max_neighbors);
    out.beta.push_back(nb.empty() ? std::vector<double>{} : relevance_scores(params, user, v, nb));
    out.neighbors.push_back(std::move(nb));
  }
  return out;
}

}  // namespace snm
