#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "snm/autograd.hpp"
#include "snm/dataio.hpp"

namespace snm {

/// Which parts of the architecture are active.
///   kFull            thresholded attention, confidence gate, user-neighbor loss
///   kNoThreshold     every neighbor admitted, h = (u + p) / 2, no gates
///   kNoUserNeighbor  full architecture, user-neighbor loss weight forced to 0
///   kPlain           no neighborhood path: tower over [u; v; u*v]
enum class Mode : std::uint8_t { kFull, kNoThreshold, kNoUserNeighbor, kPlain };

inline std::string_view mode_name(Mode m) {
  switch (m) {
    case Mode::kFull: return "full";
    case Mode::kNoThreshold: return "no-threshold";
    case Mode::kNoUserNeighbor: return "no-user-neighbor";
    case Mode::kPlain: return "plain";
  }
  return "?";
}

inline Mode parse_mode(std::string_view s) {
  for (Mode m : {Mode::kFull, Mode::kNoThreshold, Mode::kNoUserNeighbor, Mode::kPlain}) {
    if (mode_name(m) == s) return m;
  }
  throw std::invalid_argument("unknown mode '" + std::string(s) +
                              "' (expected full, no-threshold, no-user-neighbor or plain)");
}

/// Every learnable tensor. Row-vector convention: a projection W applied to
/// x is x * W with W stored fan_in x fan_out.
struct ModelParams {
  Parameter user_embedding;   // M x d
  Parameter item_embedding;   // N x d
  Parameter attn_user;        // d x d, acts on u_i * u_t
  Parameter attn_item;        // d x d, acts on u_t * v_j
  Parameter attn_vector;      // d x 1
  Parameter attn_bias;        // 1 x d
  Parameter threshold;        // M x 1, per-user cutoff
  Parameter gate_user;        // d x d
  Parameter gate_neighbor;    // d x d
  Parameter gate_bias;        // 1 x d
  std::vector<Parameter> tower_weights;  // layer l: d_{l-1} x d_l, d_0 = 3d
  std::vector<Parameter> tower_biases;   // layer l: 1 x d_l
  Parameter out_weight;       // d_L x 1
  Parameter out_bias;         // 1 x 1

  std::size_t num_users() const { return user_embedding.value.rows(); }
  std::size_t num_items() const { return item_embedding.value.rows(); }
  std::size_t dim() const { return user_embedding.value.cols(); }
  std::size_t layers() const { return tower_weights.size(); }

  std::vector<Parameter*> all() {
    std::vector<Parameter*> out{&user_embedding, &item_embedding, &attn_user, &attn_item,
                                &attn_vector,    &attn_bias,      &threshold, &gate_user,
                                &gate_neighbor,  &gate_bias};
    for (std::size_t l = 0; l < tower_weights.size(); ++l) {
      out.push_back(&tower_weights[l]);
      out.push_back(&tower_biases[l]);
    }
    out.push_back(&out_weight);
    out.push_back(&out_bias);
    return out;
  }
  std::vector<const Parameter*> all() const {
    auto mutable_all = const_cast<ModelParams*>(this)->all();
    return {mutable_all.begin(), mutable_all.end()};
  }

  void zero_grad() {
    for (Parameter* p : all()) p->zero_grad();
  }
};

inline std::vector<std::size_t> tower_widths(std::size_t dim, std::size_t layers) {
  std::vector<std::size_t> widths{3 * dim};
  for (std::size_t l = 0; l < layers; ++l) {
    if (widths.back() % 2 != 0 || widths.back() < 2) {
      throw std::invalid_argument("tower width " + std::to_string(widths.back()) +
                                  " cannot be halved for " + std::to_string(layers) + " layers");
    }
    widths.push_back(widths.back() / 2);
  }
  return widths;
}

inline std::string tower_weight_name(std::size_t l) { return "tower_w" + std::to_string(l + 1); }
inline std::string tower_bias_name(std::size_t l) { return "tower_b" + std::to_string(l + 1); }

/// Embeddings ~ N(0, 0.01^2) truncated at two standard deviations,
/// projections Glorot-uniform, biases and thresholds zero.
inline ModelParams init_params(std::size_t num_users, std::size_t num_items, std::size_t dim,
                               std::size_t layers, std::uint64_t seed) {
  if (num_users == 0 || num_items == 0 || dim == 0 || layers == 0) {
    throw std::invalid_argument("init_params: dimensions must be positive");
  }
  std::mt19937_64 rng(seed);
  auto embedding = [&](std::string name, std::size_t rows) {
    std::normal_distribution<double> normal(0.0, 0.01);
    Tensor t(rows, dim);
    for (double& x : t.values()) {
      do {
        x = normal(rng);
      } while (std::abs(x) > 0.02);
    }
    return Parameter(std::move(name), std::move(t));
  };
  auto glorot = [&](std::string name, std::size_t fan_in, std::size_t fan_out) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> uniform(-limit, limit);
    Tensor t(fan_in, fan_out);
    for (double& x : t.values()) x = uniform(rng);
    return Parameter(std::move(name), std::move(t));
  };
  auto zeros = [](std::string name, std::size_t rows, std::size_t cols) {
    return Parameter(std::move(name), Tensor(rows, cols));
  };

  const auto widths = tower_widths(dim, layers);
  ModelParams p;
  p.user_embedding = embedding("user_embedding", num_users);
  p.item_embedding = embedding("item_embedding", num_items);
  p.attn_user = glorot("attn_user", dim, dim);
  p.attn_item = glorot("attn_item", dim, dim);
  p.attn_vector = glorot("attn_vector", dim, 1);
  p.attn_bias = zeros("attn_bias", 1, dim);
  p.threshold = zeros("threshold", num_users, 1);
  p.gate_user = glorot("gate_user", dim, dim);
  p.gate_neighbor = glorot("gate_neighbor", dim, dim);
  p.gate_bias = zeros("gate_bias", 1, dim);
  for (std::size_t l = 0; l < layers; ++l) {
    p.tower_weights.push_back(glorot(tower_weight_name(l), widths[l], widths[l + 1]));
    p.tower_biases.push_back(zeros(tower_bias_name(l), 1, widths[l + 1]));
  }
  p.out_weight = glorot("out_weight", widths.back(), 1);
  p.out_bias = zeros("out_bias", 1, 1);
  return p;
}

template <class P>
concept ModelParamsRef = std::is_same_v<std::remove_const_t<P>, ModelParams>;

// --- graph builders ---------------------------------------------------------
//
// Each builder appends to a tape. With mutable params the leaves feed
// gradients back into them; with const params the graph is inference-only.

/// beta_t = v^T tanh(W_ut^T (u_i * u_t) + W_tj^T (u_t * v_j) + b_u), as 1 x n.
template <ModelParamsRef P>
Var relevance_graph(Tape& tape, P& params, Var user, Var item, Var neighbors) {
  const std::size_t n = neighbors.rows();
  Var joint = matmul(neighbors * user, tape.param(params.attn_user)) +
              matmul(neighbors * item, tape.param(params.attn_item)) +
              tape.param(params.attn_bias);
  Var beta = matmul(tanh(joint), tape.param(params.attn_vector));
  return tape.reshape(beta, 1, n);
}

struct SelectionGraph {
  Mask mask;
  Var alpha;  // unset when nothing is selected
  Var p;      // 1 x d; constant zero when nothing is selected
  bool empty = true;
};

/// Admits neighbors with beta > theta (all of them when `thresholded` is
/// false), softmaxes over the admitted set and pools their embeddings.
inline SelectionGraph selection_graph(Tape& tape, Var beta, double theta, Var neighbors,
                                      bool thresholded) {
  SelectionGraph out;
  const Tensor& b = beta.value();
  out.mask.resize(b.size());
  for (std::size_t i = 0; i < b.size(); ++i) out.mask[i] = !thresholded || b[i] > theta;
  out.empty = std::none_of(out.mask.begin(), out.mask.end(), [](auto m) { return m != 0; });
  if (out.empty) {
    out.p = tape.constant(Tensor(1, neighbors.cols()));
    return out;
  }
  out.alpha = tape.masked_softmax(beta, out.mask);
  out.p = matmul(out.alpha, neighbors);
  return out;
}

/// f = sigmoid((t_s - theta)(theta - t_d)) - 0.5. No similar neighbors
/// gives f = 0; no dissimilar neighbors replaces (theta - t_d) by 1. The
/// membership mask is a constant for backward.
inline Var confidence_graph(Tape& tape, Var beta, const Mask& mask, Var theta) {
  const auto similar = static_cast<std::size_t>(
      std::count_if(mask.begin(), mask.end(), [](auto m) { return m != 0; }));
  if (similar == 0) return tape.scalar(0.0);
  Var above = tape.masked_mean(beta, mask) - theta;
  Var below = tape.scalar(1.0);
  if (similar < mask.size()) {
    Mask rest(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) rest[i] = !mask[i];
    below = theta - tape.masked_mean(beta, std::move(rest));
  }
  return affine(sigmoid(above * below), 1.0, -0.5);
}

/// g = sigmoid(W_g1^T u + W_g2^T p + b_g); h = (1 - f) g*u + f (1 - g)*p.
template <ModelParamsRef P>
Var fuse_graph(Tape& tape, P& params, Var user, Var p, Var f) {
  Var g = sigmoid(matmul(user, tape.param(params.gate_user)) +
                  matmul(p, tape.param(params.gate_neighbor)) + tape.param(params.gate_bias));
  return affine(f, -1.0, 1.0) * (g * user) + f * (affine(g, -1.0, 1.0) * p);
}

/// sigmoid(out(relu(... relu([h; v; h*v] W_1 + b_1) ...))).
template <ModelParamsRef P>
Var tower_graph(Tape& tape, P& params, Var h, Var item) {
  Var z = tape.concat({h, item, h * item});
  for (std::size_t l = 0; l < params.tower_weights.size(); ++l) {
    z = relu(matmul(z, tape.param(params.tower_weights[l])) + tape.param(params.tower_biases[l]));
  }
  return sigmoid(matmul(z, tape.param(params.out_weight)) + tape.param(params.out_bias));
}

struct NeighborhoodState {
  std::vector<double> beta;
  Mask mask;
  std::vector<double> alpha;
  std::vector<double> p;
  double t_s = std::numeric_limits<double>::quiet_NaN();
  double t_d = std::numeric_limits<double>::quiet_NaN();
  double f = 0.0;
};

struct PairGraph {
  Var score;
  Var user;
  Var neighborhood;  // p; unset when no neighbor was selected
  NeighborhoodState state;
};

/// Builds r_hat for (u, v) given the neighbors of v (target user already
/// excluded). An empty neighbor list skips the neighborhood path: p = 0 and
/// f = 0, so h = g*u.
template <ModelParamsRef P>
PairGraph forward_pair(Tape& tape, P& params, UserId u, ItemId v,
                       std::span<const UserId> neighbors, Mode mode) {
  PairGraph out;
  const std::size_t uu[] = {u};
  const std::size_t vv[] = {v};
  out.user = tape.gather_rows(params.user_embedding, uu);
  Var item = tape.gather_rows(params.item_embedding, vv);
  if (mode == Mode::kPlain) {
    out.score = tower_graph(tape, params, out.user, item);
    return out;
  }

  const bool thresholded = mode != Mode::kNoThreshold;
  Var p;
  Var f = tape.scalar(0.0);
  if (neighbors.empty()) {
    p = tape.constant(Tensor(1, params.dim()));
  } else {
    Var rows = tape.gather_rows(params.user_embedding, neighbors);
    Var beta = relevance_graph(tape, params, out.user, item, rows);
    Var theta = tape.gather_rows(params.threshold, uu);
    SelectionGraph sel = selection_graph(tape, beta, theta.item(), rows, thresholded);
    if (thresholded) f = confidence_graph(tape, beta, sel.mask, theta);
    p = sel.p;
    if (!sel.empty) out.neighborhood = sel.p;

    auto& st = out.state;
    st.beta.assign(beta.value().values().begin(), beta.value().values().end());
    st.mask = sel.mask;
    st.alpha.assign(st.beta.size(), 0.0);
    if (!sel.empty) {
      std::copy(sel.alpha.value().values().begin(), sel.alpha.value().values().end(),
                st.alpha.begin());
    }
    double sum_s = 0.0, sum_d = 0.0;
    std::size_t n_s = 0, n_d = 0;
    for (std::size_t i = 0; i < st.beta.size(); ++i) {
      (st.mask[i] ? sum_s : sum_d) += st.beta[i];
      ++(st.mask[i] ? n_s : n_d);
    }
    if (n_s > 0) st.t_s = sum_s / static_cast<double>(n_s);
    if (n_d > 0) st.t_d = sum_d / static_cast<double>(n_d);
  }
  out.state.p.assign(p.value().values().begin(), p.value().values().end());
  out.state.f = f.item();

  Var h = thresholded ? fuse_graph(tape, params, out.user, p, f)
                      : affine(out.user + p, 0.5, 0.0);
  out.score = tower_graph(tape, params, h, item);
  return out;
}

// --- value-level entry points ------------------------------------------------

inline Tensor embedding_rows(const Parameter& table, std::span<const std::size_t> rows) {
  Tensor out(rows.size(), table.value.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    std::copy_n(table.value.row_span(rows[k]).begin(), out.cols(), out.row_span(k).begin());
  }
  return out;
}

/// Relevance score of each neighbor for target user `u` and item `v`.
inline std::vector<double> relevance_scores(const ModelParams& params, UserId u, ItemId v,
                                            std::span<const UserId> neighbors) {
  if (neighbors.empty()) throw std::invalid_argument("relevance_scores: empty neighbor list");
  if (std::find(neighbors.begin(), neighbors.end(), u) != neighbors.end()) {
    throw std::invalid_argument("relevance_scores: target user listed as its own neighbor");
  }
  Tape tape;
  const std::size_t uu[] = {u};
  const std::size_t vv[] = {v};
  Var beta = relevance_graph(tape, params, tape.gather_rows(params.user_embedding, uu),
                             tape.gather_rows(params.item_embedding, vv),
                             tape.gather_rows(params.user_embedding, neighbors));
  return {beta.value().values().begin(), beta.value().values().end()};
}

struct Selection {
  Mask mask;
  std::vector<double> alpha;
  std::vector<double> p;
};

/// Thresholded attention over `neighbor_rows` (n x d). Nothing above the
/// threshold yields alpha = 0 and p = 0.
inline Selection select_and_aggregate(std::span<const double> beta, double theta,
                                      const Tensor& neighbor_rows, bool thresholded = true) {
  if (beta.empty()) throw std::invalid_argument("select_and_aggregate: empty beta");
  if (neighbor_rows.rows() != beta.size()) {
    throw ShapeError("select_and_aggregate: beta/neighbor count mismatch");
  }
  Tape tape;
  Var b = tape.constant(Tensor::row({beta.begin(), beta.end()}));
  Var rows = tape.constant(neighbor_rows);
  SelectionGraph sel = selection_graph(tape, b, theta, rows, thresholded);
  Selection out;
  out.mask = sel.mask;
  out.alpha.assign(beta.size(), 0.0);
  if (!sel.empty) {
    std::copy(sel.alpha.value().values().begin(), sel.alpha.value().values().end(),
              out.alpha.begin());
  }
  out.p.assign(sel.p.value().values().begin(), sel.p.value().values().end());
  return out;
}

/// Separation confidence f in [0, 0.5).
inline double gate_confidence(std::span<const double> beta, const Mask& mask, double theta) {
  if (beta.empty()) throw std::invalid_argument("gate_confidence: empty beta");
  if (mask.size() != beta.size()) throw ShapeError("gate_confidence: mask size mismatch");
  Tape tape;
  Var b = tape.constant(Tensor::row({beta.begin(), beta.end()}));
  return confidence_graph(tape, b, mask, tape.scalar(theta)).item();
}

inline std::vector<double> fuse(const ModelParams& params, std::span<const double> user,
                                std::span<const double> p, double f) {
  Tape tape;
  Var h = fuse_graph(tape, params, tape.constant(Tensor::row({user.begin(), user.end()})),
                     tape.constant(Tensor::row({p.begin(), p.end()})), tape.scalar(f));
  return {h.value().values().begin(), h.value().values().end()};
}

/// Tower output for a fused representation h and item embedding.
inline double score(const ModelParams& params, std::span<const double> h,
                    std::span<const double> item) {
  Tape tape;
  return tower_graph(tape, params, tape.constant(Tensor::row({h.begin(), h.end()})),
                     tape.constant(Tensor::row({item.begin(), item.end()})))
      .item();
}

/// Neighborhood-free score: the same tower over [u; v; u*v].
inline double score_plain(const ModelParams& params, std::span<const double> user,
                          std::span<const double> item) {
  return score(params, user, item);
}

/// Forward-only r_hat for one pair.
inline double predict(const ModelParams& params, UserId u, ItemId v,
                      std::span<const UserId> neighbors, Mode mode) {
  Tape tape;
  return forward_pair(tape, params, u, v, neighbors, mode).score.item();
}

inline NeighborhoodState neighborhood_state(const ModelParams& params, UserId u, ItemId v,
                                            std::span<const UserId> neighbors, Mode mode) {
  Tape tape;
  return forward_pair(tape, params, u, v, neighbors, mode).state;
}

}  // namespace snm
