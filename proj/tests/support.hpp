#pragma once

// Shared fixtures for the test binaries: synthetic stores and a plain-loop
// reimplementation of the forward pass used as an independent oracle.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "snm/snm.hpp"

namespace snm::testing {

inline std::vector<std::string> numbered(const char* prefix, std::size_t n) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(prefix + std::to_string(i));
  return out;
}

/// Store with every listed pair in the train split.
inline InteractionStore train_only_store(std::size_t users, std::size_t items,
                                         const std::vector<std::pair<UserId, ItemId>>& pairs) {
  std::vector<Interaction> xs;
  for (auto [u, v] : pairs) xs.push_back({u, v, Split::kTrain});
  return InteractionStore(numbered("u", users), numbered("i", items), std::move(xs));
}

/// Each user likes `per_user` distinct random items.
inline std::vector<std::pair<UserId, ItemId>> random_pattern(std::size_t users, std::size_t items,
                                                             std::size_t per_user,
                                                             std::uint64_t seed) {
  SplitMix64 rng(seed);
  std::vector<std::pair<UserId, ItemId>> out;
  std::vector<ItemId> order(items);
  for (UserId u = 0; u < users; ++u) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t k = 0; k < per_user; ++k) out.emplace_back(u, order[k]);
  }
  return out;
}

/// Raw pairs with external string ids, for the ingestion pipeline.
inline std::vector<RawPair> raw_pattern(std::size_t users, std::size_t items,
                                        std::size_t per_user, std::uint64_t seed) {
  std::vector<RawPair> raw;
  for (auto [u, v] : random_pattern(users, items, per_user, seed)) {
    raw.push_back({"user" + std::to_string(u), "item" + std::to_string(v)});
  }
  return raw;
}

/// Writes a `user,item,rating,timestamp` file in which each user rates
/// `per_user` random items; ratings are uniform in 1..5.
inline void write_ratings_file(const std::filesystem::path& path, std::size_t users,
                               std::size_t items, std::size_t per_user, std::uint64_t seed) {
  SplitMix64 rng(seed ^ 0x5eedULL);
  std::ofstream out(path);
  out << "userId,movieId,rating,timestamp\n";
  std::uint64_t ts = 964982703;
  for (auto [u, v] : random_pattern(users, items, per_user, seed)) {
    out << "user" << u << ",item" << v << ',' << 1 + rng() % 5 << ',' << ts++ << '\n';
  }
}

/// Filtered and split synthetic dataset.
inline InteractionStore synthetic_store(std::size_t users, std::size_t items, std::size_t per_user,
                                        std::uint64_t seed, SplitFractions fractions = {}) {
  return split_interactions(filter_sparse(raw_pattern(users, items, per_user, seed)), fractions,
                            seed);
}

/// Overwrites every parameter with uniform values in [-scale, scale].
inline void randomize(ModelParams& params, double scale, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-scale, scale);
  for (Parameter* p : params.all()) {
    for (double& x : p->value.values()) x = dist(rng);
  }
}

/// Moves each listed user's threshold to the middle of the widest gap
/// between its sorted relevance scores, so finite-difference steps cannot
/// flip the selection. Returns the smallest distance from any threshold to
/// a score.
inline double center_thresholds(ModelParams& params, std::span<const BatchItem> batch) {
  double margin = INFINITY;
  for (const auto& x : batch) {
    if (x.neighbors.empty()) continue;
    auto beta = relevance_scores(params, x.user, x.item, x.neighbors);
    std::sort(beta.begin(), beta.end());
    double best_gap = -1.0, theta = beta.front() - 1.0;
    for (std::size_t i = 0; i + 1 < beta.size(); ++i) {
      if (beta[i + 1] - beta[i] > best_gap) {
        best_gap = beta[i + 1] - beta[i];
        theta = 0.5 * (beta[i] + beta[i + 1]);
      }
    }
    params.threshold.value[x.user] = theta;
    margin = std::min(margin, 0.5 * best_gap);
  }
  return margin;
}

/// Sum of per-pair losses on one tape, for gradient checks.
inline Var batch_loss(Tape& tape, ModelParams& params, std::span<const BatchItem> batch, Mode mode,
                      double alpha, bool on_negatives = true) {
  Var total;
  for (const auto& x : batch) {
    Var l = pair_loss(tape, params, x, mode, alpha, on_negatives).total;
    total = total.valid() ? total + l : l;
  }
  return total;
}

// --- loop oracle ---------------------------------------------------------------

using Vec = std::vector<double>;

inline Vec row_of(const Parameter& p, std::size_t r) {
  auto s = p.value.row_span(r);
  return {s.begin(), s.end()};
}

/// x (length fan_in) times W (fan_in x fan_out).
inline Vec vec_mat(const Vec& x, const Tensor& w) {
  Vec out(w.cols(), 0.0);
  for (std::size_t i = 0; i < w.rows(); ++i) {
    for (std::size_t j = 0; j < w.cols(); ++j) out[j] += x[i] * w(i, j);
  }
  return out;
}

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double oracle_beta(const ModelParams& p, const Vec& u, const Vec& t, const Vec& v) {
  const std::size_t d = u.size();
  Vec ut(d), tv(d);
  for (std::size_t k = 0; k < d; ++k) {
    ut[k] = u[k] * t[k];
    tv[k] = t[k] * v[k];
  }
  const Vec a = vec_mat(ut, p.attn_user.value);
  const Vec b = vec_mat(tv, p.attn_item.value);
  double beta = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    beta += p.attn_vector.value[k] * std::tanh(a[k] + b[k] + p.attn_bias.value[k]);
  }
  return beta;
}

inline double oracle_tower(const ModelParams& p, const Vec& h, const Vec& v) {
  Vec z = h;
  z.insert(z.end(), v.begin(), v.end());
  for (std::size_t k = 0; k < h.size(); ++k) z.push_back(h[k] * v[k]);
  for (std::size_t l = 0; l < p.layers(); ++l) {
    Vec next = vec_mat(z, p.tower_weights[l].value);
    for (std::size_t j = 0; j < next.size(); ++j) {
      next[j] = std::max(0.0, next[j] + p.tower_biases[l].value[j]);
    }
    z = std::move(next);
  }
  return logistic(vec_mat(z, p.out_weight.value)[0] + p.out_bias.value[0]);
}

struct OracleState {
  Vec beta;
  std::vector<int> mask;
  Vec alpha;
  Vec p;
  double f = 0.0;
  Vec h;
  double score = 0.0;
};

/// The full forward pass written directly from the model equations.
inline OracleState oracle_forward(const ModelParams& params, UserId ui, ItemId vj,
                                  const std::vector<UserId>& neighbors, Mode mode) {
  OracleState s;
  const Vec u = row_of(params.user_embedding, ui);
  const Vec v = row_of(params.item_embedding, vj);
  const std::size_t d = u.size();
  if (mode == Mode::kPlain) {
    s.h = u;
    s.score = oracle_tower(params, u, v);
    return s;
  }
  const double theta = params.threshold.value[ui];
  const bool thresholded = mode != Mode::kNoThreshold;
  s.p.assign(d, 0.0);
  for (UserId t : neighbors) {
    s.beta.push_back(oracle_beta(params, u, row_of(params.user_embedding, t), v));
    s.mask.push_back(!thresholded || s.beta.back() > theta);
  }
  s.alpha.assign(neighbors.size(), 0.0);
  double top = -INFINITY;
  for (std::size_t i = 0; i < neighbors.size(); ++i) {
    if (s.mask[i]) top = std::max(top, s.beta[i]);
  }
  double z = 0.0;
  for (std::size_t i = 0; i < neighbors.size(); ++i) {
    if (s.mask[i]) z += std::exp(s.beta[i] - top);
  }
  double ts = 0.0, td = 0.0;
  int ns = 0, nd = 0;
  for (std::size_t i = 0; i < neighbors.size(); ++i) {
    if (s.mask[i]) {
      s.alpha[i] = std::exp(s.beta[i] - top) / z;
      const Vec t = row_of(params.user_embedding, neighbors[i]);
      for (std::size_t k = 0; k < d; ++k) s.p[k] += s.alpha[i] * t[k];
      ts += s.beta[i];
      ++ns;
    } else {
      td += s.beta[i];
      ++nd;
    }
  }
  if (!thresholded) {
    s.h.resize(d);
    for (std::size_t k = 0; k < d; ++k) s.h[k] = 0.5 * (u[k] + s.p[k]);
  } else {
    if (ns > 0) {
      const double above = ts / ns - theta;
      const double below = nd > 0 ? theta - td / nd : 1.0;
      s.f = logistic(above * below) - 0.5;
    }
    const Vec a = vec_mat(u, params.gate_user.value);
    const Vec b = vec_mat(s.p, params.gate_neighbor.value);
    s.h.resize(d);
    for (std::size_t k = 0; k < d; ++k) {
      const double g = logistic(a[k] + b[k] + params.gate_bias.value[k]);
      s.h[k] = (1.0 - s.f) * g * u[k] + s.f * (1.0 - g) * s.p[k];
    }
  }
  s.score = oracle_tower(params, s.h, v);
  return s;
}

}  // namespace snm::testing
