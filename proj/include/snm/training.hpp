#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "snm/autograd.hpp"
#include "snm/checkpoint.hpp"
#include "snm/dataio.hpp"
#include "snm/eval.hpp"
#include "snm/model.hpp"
#include "snm/random.hpp"

namespace snm {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::size_t dim = 64;
  std::size_t layers = 2;
  Mode mode = Mode::kFull;
  double alpha = 0.01;             // weight of the user-neighbor term
  std::size_t item_neg_ratio = 5;  // sampled negative items per positive
  std::size_t user_neg = 5;        // K, sampled negative users per pair
  std::size_t batch_size = 256;
  double lr = 0.001;
  double lr_decay = 0.9;
  std::size_t lr_decay_steps = 100;
  std::size_t epochs = 100;
  std::size_t patience = 10;
  std::uint64_t seed = 0;
  std::size_t neighbor_cap = 50;
  double clip_norm = 5.0;  // 0 disables clipping
  bool user_neighbor_on_negatives = true;

  /// The user-neighbor weight actually applied in this mode.
  double effective_alpha() const {
    return mode == Mode::kNoUserNeighbor || mode == Mode::kPlain ? 0.0 : alpha;
  }

  void validate() const {
    if (dim == 0 || layers == 0) throw std::invalid_argument("dim and layers must be positive");
    if (batch_size == 0) throw std::invalid_argument("batch_size must be at least 1");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw std::invalid_argument("lr must be positive");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw std::invalid_argument("lr_decay must be in (0, 1]");
    if (lr_decay_steps == 0) throw std::invalid_argument("lr_decay_steps must be positive");
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw std::invalid_argument("alpha must be >= 0");
    if (!(clip_norm >= 0.0)) throw std::invalid_argument("clip_norm must be >= 0");
    if (epochs == 0) throw std::invalid_argument("epochs must be positive");
    tower_widths(dim, layers);
  }
};

// --- losses -------------------------------------------------------------------

inline constexpr double kProbabilityClamp = 1e-10;

/// -(r log r_hat + (1 - r) log(1 - r_hat)) with r_hat clamped away from 0/1.
inline double loss_bce(double r_hat, double r) {
  const double p = std::clamp(r_hat, kProbabilityClamp, 1.0 - kProbabilityClamp);
  return -(r * std::log(p) + (1.0 - r) * std::log(1.0 - p));
}

inline Var bce_graph(Tape& tape, Var r_hat, double label) {
  Var p = tape.clamp(r_hat, kProbabilityClamp, 1.0 - kProbabilityClamp);
  if (label == 1.0) return affine(log(p), -1.0, 0.0);
  if (label == 0.0) return affine(log(affine(p, -1.0, 1.0)), -1.0, 0.0);
  return affine(affine(log(p), label, 0.0) + affine(log(affine(p, -1.0, 1.0)), 1.0 - label, 0.0),
                -1.0, 0.0);
}

/// -[log sigmoid(u.p) + sum_k log sigmoid(-u_k.p)]; `negatives` is K x d and
/// may be unset when K = 0.
inline Var user_neighbor_graph(Tape& tape, Var user, Var p, Var negatives) {
  Var loss = affine(log_sigmoid(tape.dot(user, p)), -1.0, 0.0);
  if (negatives.valid()) {
    Var logits = matmul(negatives, tape.reshape(p, p.cols(), 1));
    loss = loss - sum(log_sigmoid(affine(logits, -1.0, 0.0)));
  }
  return loss;
}

inline double loss_user_neighbor(std::span<const double> user, std::span<const double> p,
                                 const std::vector<std::vector<double>>& negatives) {
  Tape tape;
  Var u = tape.constant(Tensor::row({user.begin(), user.end()}));
  Var pp = tape.constant(Tensor::row({p.begin(), p.end()}));
  Var neg;
  if (!negatives.empty()) {
    Tensor rows(negatives.size(), user.size());
    for (std::size_t k = 0; k < negatives.size(); ++k) {
      if (negatives[k].size() != user.size()) throw ShapeError("negative user width mismatch");
      std::copy(negatives[k].begin(), negatives[k].end(), rows.row_span(k).begin());
    }
    neg = tape.constant(std::move(rows));
  }
  return user_neighbor_graph(tape, u, pp, neg).item();
}

/// One training example with everything its loss needs attached.
struct BatchItem {
  UserId user = 0;
  ItemId item = 0;
  double label = 0.0;
  std::vector<UserId> neighbors;
  std::vector<UserId> negative_users;
};

struct PairLoss {
  Var total;
  double bce = 0.0;
  double user_neighbor = 0.0;  // unweighted; 0 when the term is skipped
};

/// bce + alpha * user-neighbor for one pair. The user-neighbor term is
/// skipped when nothing was selected, when alpha is 0, and for negative
/// pairs if `on_negatives` is off.
template <ModelParamsRef P>
PairLoss pair_loss(Tape& tape, P& params, const BatchItem& x, Mode mode, double alpha,
                   bool on_negatives = true) {
  PairGraph g = forward_pair(tape, params, x.user, x.item, x.neighbors, mode);
  PairLoss out;
  out.total = bce_graph(tape, g.score, x.label);
  out.bce = out.total.item();
  const bool wanted = alpha != 0.0 && mode != Mode::kPlain && (on_negatives || x.label == 1.0);
  if (wanted && g.neighborhood.valid()) {
    Var neg;
    if (!x.negative_users.empty()) neg = tape.gather_rows(params.user_embedding, x.negative_users);
    Var un = user_neighbor_graph(tape, g.user, g.neighborhood, neg);
    out.user_neighbor = un.item();
    out.total = out.total + affine(un, alpha, 0.0);
  }
  return out;
}

struct BatchTotals {
  double loss = 0.0;
  double bce = 0.0;
};

/// Sum of per-pair losses (no gradient).
inline BatchTotals loss_total(const ModelParams& params, std::span<const BatchItem> batch,
                              Mode mode, double alpha, bool on_negatives = true) {
  BatchTotals t;
  Tape tape;
  for (const auto& x : batch) {
    tape.clear();
    const PairLoss l = pair_loss(tape, params, x, mode, alpha, on_negatives);
    t.loss += l.total.item();
    t.bce += l.bce;
  }
  return t;
}

/// Same sum, accumulating its gradient into `params`.
inline BatchTotals accumulate_gradients(ModelParams& params, std::span<const BatchItem> batch,
                                        Mode mode, double alpha, bool on_negatives = true) {
  BatchTotals t;
  Tape tape;
  for (const auto& x : batch) {
    tape.clear();
    const PairLoss l = pair_loss(tape, params, x, mode, alpha, on_negatives);
    tape.backward(l.total);
    t.loss += l.total.item();
    t.bce += l.bce;
  }
  return t;
}

// --- optimisation ---------------------------------------------------------------

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

inline AdamState make_adam(std::span<Parameter* const> params) {
  AdamState s;
  for (const Parameter* p : params) {
    s.m.emplace_back(p->value.rows(), p->value.cols());
    s.v.emplace_back(p->value.rows(), p->value.cols());
  }
  return s;
}

/// Bias-corrected Adam update of every entry of every parameter.
inline void adam_step(std::span<Parameter* const> params, AdamState& state, double lr) {
  if (state.m.size() != params.size()) throw ShapeError("adam_step: state/parameter mismatch");
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    Tensor& m = state.m[k];
    Tensor& v = state.v[k];
    if (!m.same_shape(p.value)) throw ShapeError("adam_step: moment shape mismatch for " + p.name);
    const std::size_t n = p.value.size();
    for (std::size_t i = 0; i < n; ++i) {
      const double g = p.grad[i];
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
      const double delta = lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + state.epsilon);
      if (!std::isfinite(delta)) throw NumericError("adam_step: non-finite update for " + p.name);
      p.value[i] -= delta;
    }
  }
}

/// Staircase decay: lr0 * rate^floor(step / every).
inline double lr_at(std::uint64_t step, double lr0 = 0.001, double rate = 0.9,
                    std::uint64_t every = 100) {
  return lr0 * std::pow(rate, static_cast<double>(step / every));
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
inline double clip_gradients(std::span<Parameter* const> params, double max_norm) {
  double sq = 0.0;
  for (const Parameter* p : params) {
    for (double g : p->grad.values()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (Parameter* p : params) {
      for (double& g : p->grad.values()) g *= scale;
    }
  }
  return norm;
}

// --- training loop --------------------------------------------------------------

/// Shuffled training examples for one epoch: every train positive plus
/// `item_neg_ratio` freshly sampled negatives, each with its neighborhood
/// and negative users attached.
inline std::vector<BatchItem> epoch_instances(const InteractionStore& store,
                                              const NeighborhoodIndex& index,
                                              const TrainConfig& cfg, std::size_t epoch) {
  const std::uint64_t base = derive_seed(cfg.seed, {seed_offset::kTrain, epoch});
  std::vector<BatchItem> out;
  out.reserve(store.count(Split::kTrain) * (1 + cfg.item_neg_ratio));
  for (const auto& x : store.interactions()) {
    if (x.split != Split::kTrain) continue;
    out.push_back({x.user, x.item, 1.0, {}, {}});
    for (ItemId v : sample_negative_items(store, x.user, cfg.item_neg_ratio,
                                          derive_seed(base, {x.user, x.item}))) {
      out.push_back({x.user, v, 0.0, {}, {}});
    }
  }
  SplitMix64 rng(derive_seed(base, {0xfeedULL}));
  std::shuffle(out.begin(), out.end(), rng);
  if (cfg.mode != Mode::kPlain) {
    const bool needs_users = cfg.effective_alpha() != 0.0 && cfg.user_neg > 0;
    for (std::size_t i = 0; i < out.size(); ++i) {
      auto& b = out[i];
      b.neighbors =
          neighborhood_of(index, b.item, b.user, cfg.neighbor_cap, derive_seed(base, {1, i}));
      if (needs_users) {
        b.negative_users =
            sample_negative_users(store.num_users(), b.user, cfg.user_neg, derive_seed(base, {2, i}));
      }
    }
  }
  return out;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;  // mean per training pair
  double train_bce = 0.0;   // mean per training pair
  double val_hr10 = std::numeric_limits<double>::quiet_NaN();
  double val_ndcg10 = std::numeric_limits<double>::quiet_NaN();
  double lr = 0.0;
};

struct FitResult {
  ModelParams best;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  bool early_stopped = false;
};

/// Called after every epoch with the record, the current best parameters
/// and whether this epoch improved on them.
using EpochCallback = std::function<void(const EpochRecord&, const ModelParams&, bool)>;

/// Mini-batch Adam over shuffled positives and sampled negatives. After
/// each epoch HR@10 on the validation split decides the best parameters;
/// training stops after `patience` epochs without improvement. Without
/// usable validation cases the final parameters are returned.
inline FitResult fit(const InteractionStore& store, const NeighborhoodIndex& index,
                     const TrainConfig& cfg, const ModelParams* init = nullptr,
                     const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (store.count(Split::kTrain) == 0) throw DatasetError("train split is empty");

  ModelParams params = init_params(store.num_users(), store.num_items(), cfg.dim, cfg.layers,
                                   derive_seed(cfg.seed, {seed_offset::kInit}));
  if (init != nullptr) warm_start(params, *init);

  const CaseSet validation =
      build_test_cases(store, Split::kValid, derive_seed(cfg.seed, {seed_offset::kValidation}));
  EvalOptions val_options;
  val_options.mode = cfg.mode;
  val_options.neighbor_cap = cfg.neighbor_cap;
  val_options.seed = validation.seed;

  const auto handles = params.all();
  AdamState adam = make_adam(handles);
  const double alpha = cfg.effective_alpha();

  FitResult result;
  result.best = params;
  double best_hr = -1.0;
  std::size_t stale = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto instances = epoch_instances(store, index, cfg, epoch);
    double loss_sum = 0.0;
    double bce_sum = 0.0;
    for (std::size_t start = 0; start < instances.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(instances.size(), start + cfg.batch_size);
      params.zero_grad();
      BatchTotals totals;
      try {
        totals = accumulate_gradients(
            params, std::span(instances).subspan(start, stop - start), cfg.mode, alpha,
            cfg.user_neighbor_on_negatives);
      } catch (const NumericError& e) {
        throw TrainingError("diverged at epoch " + std::to_string(epoch) + ", step " +
                            std::to_string(adam.step) + ": " + e.what());
      }
      if (!std::isfinite(totals.loss)) {
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                            std::to_string(adam.step));
      }
      loss_sum += totals.loss;
      bce_sum += totals.bce;
      if (cfg.clip_norm > 0.0) clip_gradients(handles, cfg.clip_norm);
      adam_step(handles, adam, lr_at(adam.step, cfg.lr, cfg.lr_decay, cfg.lr_decay_steps));
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(instances.size());
    rec.train_bce = bce_sum / static_cast<double>(instances.size());
    rec.lr = lr_at(adam.step, cfg.lr, cfg.lr_decay, cfg.lr_decay_steps);

    bool improved = false;
    if (validation.cases.empty()) {
      improved = true;
    } else {
      const EvalReport report =
          evaluate_cases(validation, model_scorer(params, store, index, val_options), 10);
      rec.val_hr10 = report.hr_at(10);
      rec.val_ndcg10 = report.ndcg_at(10);
      improved = rec.val_hr10 > best_hr;
    }
    if (improved) {
      if (!validation.cases.empty()) best_hr = rec.val_hr10;
      result.best = params;
      result.best_epoch = epoch;
      stale = 0;
    } else {
      ++stale;
    }
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec, result.best, improved);
    if (!validation.cases.empty() && stale >= cfg.patience) {
      result.early_stopped = true;
      break;
    }
  }
  return result;
}

}  // namespace snm
