#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "snm/dataio.hpp"
#include "snm/random.hpp"
#include "snm/training.hpp"

namespace snm {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Everything a command needs. Read from flat `key = value` text; each key
/// is also a command-line flag of the same name.
struct RunConfig {
  TrainConfig train{};
  std::string data;
  std::string out = "out";
  std::string init_from;
  std::string checkpoint;
  std::optional<std::uint64_t> eval_seed;
  std::size_t k_max = 10;
  bool no_binarize = false;
  double threshold = 3.0;
  std::size_t min_user_pos = 5;
  std::size_t min_item_users = 2;
  std::string format = "ratings";

  std::uint64_t evaluation_seed() const {
    return eval_seed ? *eval_seed : derive_seed(train.seed, {seed_offset::kEvaluation});
  }

  static const std::vector<std::string_view>& keys() {
    static const std::vector<std::string_view> k{
        "dim",         "layers",        "mode",         "alpha",          "neg-ratio",
        "user-neg",    "batch-size",    "lr",           "lr-decay",       "lr-decay-steps",
        "epochs",      "patience",      "seed",         "cap-neighbors",  "clip-norm",
        "un-on-negatives", "k-max",     "data",         "out",            "init-from",
        "checkpoint",  "eval-seed",     "no-binarize",  "threshold",      "min-user-pos",
        "min-item-users", "format"};
    return k;
  }

  static bool is_flag(std::string_view key) {
    return key == "no-binarize" || key == "un-on-negatives";
  }

  void set(std::string_view key, std::string_view value) {
    const std::string k(key);
    auto bad = [&](const char* what) {
      return ConfigError("config key '" + k + "': " + what + " (got '" + std::string(value) + "')");
    };
    auto as_size = [&]() -> std::size_t {
      std::size_t x = 0;
      auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), x);
      if (ec != std::errc() || p != value.data() + value.size()) throw bad("expected a non-negative integer");
      return x;
    };
    auto as_u64 = [&]() -> std::uint64_t {
      std::uint64_t x = 0;
      auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), x);
      if (ec != std::errc() || p != value.data() + value.size()) throw bad("expected a non-negative integer");
      return x;
    };
    auto as_double = [&]() -> double {
      double x = 0.0;
      if (!detail::parse_double(value, x)) throw bad("expected a number");
      return x;
    };
    auto as_bool = [&]() -> bool {
      if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
      if (value == "false" || value == "0" || value == "no" || value == "off") return false;
      throw bad("expected true or false");
    };

    if (k == "dim") train.dim = as_size();
    else if (k == "layers") train.layers = as_size();
    else if (k == "mode") {
      try {
        train.mode = parse_mode(value);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
      }
    }
    else if (k == "alpha") train.alpha = as_double();
    else if (k == "neg-ratio") train.item_neg_ratio = as_size();
    else if (k == "user-neg") train.user_neg = as_size();
    else if (k == "batch-size") train.batch_size = as_size();
    else if (k == "lr") train.lr = as_double();
    else if (k == "lr-decay") train.lr_decay = as_double();
    else if (k == "lr-decay-steps") train.lr_decay_steps = as_size();
    else if (k == "epochs") train.epochs = as_size();
    else if (k == "patience") train.patience = as_size();
    else if (k == "seed") train.seed = as_u64();
    else if (k == "cap-neighbors") train.neighbor_cap = as_size();
    else if (k == "clip-norm") train.clip_norm = as_double();
    else if (k == "un-on-negatives") train.user_neighbor_on_negatives = as_bool();
    else if (k == "k-max") k_max = as_size();
    else if (k == "data") data = value;
    else if (k == "out") out = value;
    else if (k == "init-from") init_from = value;
    else if (k == "checkpoint") checkpoint = value;
    else if (k == "eval-seed") eval_seed = as_u64();
    else if (k == "no-binarize") no_binarize = as_bool();
    else if (k == "threshold") threshold = as_double();
    else if (k == "min-user-pos") min_user_pos = as_size();
    else if (k == "min-item-users") min_item_users = as_size();
    else if (k == "format") {
      if (value != "ratings" && value != "citeulike") throw bad("expected ratings or citeulike");
      format = value;
    } else {
      throw ConfigError("unknown config key '" + k + "'");
    }
  }

  /// Grid membership and ranges. Runs before any command does work.
  void validate() const {
    static constexpr std::size_t dims[] = {16, 32, 64, 128};
    if (std::find(std::begin(dims), std::end(dims), train.dim) == std::end(dims)) {
      throw ConfigError("dim must be one of 16, 32, 64, 128 (got " + std::to_string(train.dim) + ")");
    }
    if (train.layers < 1 || train.layers > 3) {
      throw ConfigError("layers must be 1, 2 or 3 (got " + std::to_string(train.layers) + ")");
    }
    if (k_max < 1 || k_max > kEvalNegatives + 1) throw ConfigError("k-max must be in 1..100");
    if (min_user_pos == 0 || min_item_users == 0) {
      throw ConfigError("min-user-pos and min-item-users must be positive");
    }
    try {
      train.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
};

/// Applies `key = value` lines ('#' starts a comment) on top of `cfg`.
inline void apply_config_text(RunConfig& cfg, std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto body = detail::trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    cfg.set(detail::trim(body.substr(0, eq)), detail::trim(body.substr(eq + 1)));
  }
}

inline void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  apply_config_text(cfg, in);
}

inline std::string render_config(const RunConfig& cfg) {
  std::ostringstream o;
  o.precision(17);
  const auto& t = cfg.train;
  o << "dim = " << t.dim << "\nlayers = " << t.layers << "\nmode = " << mode_name(t.mode)
    << "\nalpha = " << t.alpha << "\nneg-ratio = " << t.item_neg_ratio
    << "\nuser-neg = " << t.user_neg << "\nbatch-size = " << t.batch_size << "\nlr = " << t.lr
    << "\nlr-decay = " << t.lr_decay << "\nlr-decay-steps = " << t.lr_decay_steps
    << "\nepochs = " << t.epochs << "\npatience = " << t.patience << "\nseed = " << t.seed
    << "\ncap-neighbors = " << t.neighbor_cap << "\nclip-norm = " << t.clip_norm
    << "\nun-on-negatives = " << (t.user_neighbor_on_negatives ? "true" : "false")
    << "\nk-max = " << cfg.k_max << "\neval-seed = " << cfg.evaluation_seed() << '\n';
  return o.str();
}

}  // namespace snm
