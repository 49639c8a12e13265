// Command-line front end: prepare, pretrain, train, evaluate, export-attn.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "snm/snm.hpp"

namespace fs = std::filesystem;

namespace {

std::vector<std::string> nearest_ids(const std::vector<std::string>& ids, const std::string& query) {
  std::vector<std::string> sorted = ids;
  double q = 0.0;
  if (snm::detail::parse_double(query, q)) {
    auto distance = [q](const std::string& s) {
      double x = 0.0;
      return snm::detail::parse_double(s, x) ? std::abs(x - q) : HUGE_VAL;
    };
    std::stable_sort(sorted.begin(), sorted.end(), [&](const auto& a, const auto& b) {
      return distance(a) < distance(b);
    });
  } else {
    auto shared = [&](const std::string& s) {
      std::size_t n = 0;
      while (n < s.size() && n < query.size() && s[n] == query[n]) ++n;
      return n;
    };
    std::stable_sort(sorted.begin(), sorted.end(), [&](const auto& a, const auto& b) {
      return shared(a) > shared(b);
    });
  }
  if (sorted.size() > 5) sorted.resize(5);
  return sorted;
}

std::size_t resolve_id(const std::vector<std::string>& ids, const std::string& query,
                       bool internal, const char* kind) {
  if (internal) {
    std::size_t x = 0;
    auto [p, ec] = std::from_chars(query.data(), query.data() + query.size(), x);
    if (ec == std::errc() && p == query.data() + query.size() && x < ids.size()) return x;
    throw std::invalid_argument(std::string("unknown internal ") + kind + " index '" + query +
                                "'; valid range is 0.." + std::to_string(ids.size() - 1));
  }
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == query) return i;
  }
  std::string hint;
  for (const auto& s : nearest_ids(ids, query)) hint += (hint.empty() ? "" : ", ") + s;
  throw std::invalid_argument(std::string("unknown ") + kind + " id '" + query +
                              "'; nearest valid ids: " + hint);
}

void print_store_summary(const snm::InteractionStore& store) {
  std::cout << "users=" << store.num_users() << " items=" << store.num_items()
            << " ratings=" << store.interactions().size() << " sparsity=" << std::fixed
            << std::setprecision(4) << 100.0 * snm::sparsity(store) << "%"
            << " train=" << store.count(snm::Split::kTrain)
            << " valid=" << store.count(snm::Split::kValid)
            << " test=" << store.count(snm::Split::kTest) << '\n';
  std::cout.unsetf(std::ios::fixed);
}

int cmd_prepare(const snm::RunConfig& cfg) {
  if (cfg.data.empty()) throw snm::ConfigError("prepare needs --data <ratings file>");
  snm::PrepareOptions options;
  options.ingest.binarize = !cfg.no_binarize;
  options.ingest.threshold = cfg.threshold;
  options.citeulike_format = cfg.format == "citeulike";
  options.min_user_pos = cfg.min_user_pos;
  options.min_item_users = cfg.min_item_users;
  options.seed = cfg.train.seed;
  const auto store = snm::prepare_dataset(cfg.data, options);
  snm::write_prepared(store, cfg.out, cfg.train.seed);
  print_store_summary(store);
  return 0;
}

void check_against_store(const snm::ModelParams& params, const snm::InteractionStore& store) {
  if (params.num_users() != store.num_users() || params.num_items() != store.num_items()) {
    throw snm::CheckpointError("checkpoint is for " + std::to_string(params.num_users()) +
                               " users x " + std::to_string(params.num_items()) +
                               " items but the dataset has " + std::to_string(store.num_users()) +
                               " x " + std::to_string(store.num_items()));
  }
}

int cmd_train(const snm::RunConfig& cfg) {
  if (cfg.data.empty()) throw snm::ConfigError("train needs --data <prepared directory>");
  const auto store = snm::load_prepared(cfg.data);
  const snm::NeighborhoodIndex index(store);

  std::optional<snm::ModelParams> init;
  if (!cfg.init_from.empty()) {
    init = snm::load_checkpoint(cfg.init_from);
    check_against_store(*init, store);
    if (init->dim() != cfg.train.dim || init->layers() != cfg.train.layers) {
      throw snm::CheckpointError("--init-from checkpoint has dim " + std::to_string(init->dim()) +
                                 " and " + std::to_string(init->layers()) +
                                 " layers; the run asks for dim " + std::to_string(cfg.train.dim) +
                                 " and " + std::to_string(cfg.train.layers));
    }
  }

  const fs::path out(cfg.out);
  fs::create_directories(out);
  std::ofstream(out / "config.txt") << snm::render_config(cfg);
  const fs::path ckpt = cfg.checkpoint.empty() ? out / "model.ckpt" : fs::path(cfg.checkpoint);
  std::ofstream history(out / "history.csv");
  snm::write_history_header(history);

  std::cout << "training mode=" << snm::mode_name(cfg.train.mode) << " dim=" << cfg.train.dim
            << " layers=" << cfg.train.layers << " alpha=" << cfg.train.effective_alpha() << '\n';
  const auto result = snm::fit(store, index, cfg.train, init ? &*init : nullptr,
                               [&](const snm::EpochRecord& r, const snm::ModelParams& best, bool improved) {
                                 snm::write_history_row(history, r);
                                 history.flush();
                                 if (improved) snm::save_checkpoint(best, ckpt);
                                 std::cout << "epoch " << r.epoch << " loss=" << r.train_loss
                                           << " val_HR@10=" << r.val_hr10
                                           << " val_NDCG@10=" << r.val_ndcg10 << " lr=" << r.lr
                                           << (improved ? " *" : "") << std::endl;
                               });
  std::cout << "best epoch " << result.best_epoch << (result.early_stopped ? " (early stop)" : "")
            << ", checkpoint " << ckpt.string() << '\n';
  return 0;
}

int cmd_evaluate(const snm::RunConfig& cfg) {
  if (cfg.data.empty()) throw snm::ConfigError("evaluate needs --data <prepared directory>");
  const fs::path ckpt = cfg.checkpoint.empty() ? fs::path(cfg.out) / "model.ckpt" : fs::path(cfg.checkpoint);
  const auto store = snm::load_prepared(cfg.data);
  const auto params = snm::load_checkpoint(ckpt);
  check_against_store(params, store);
  const snm::NeighborhoodIndex index(store);

  snm::EvalOptions options;
  options.mode = cfg.train.mode;
  options.neighbor_cap = cfg.train.neighbor_cap;
  options.seed = cfg.evaluation_seed();
  options.k_max = cfg.k_max;
  const auto report = snm::evaluate_model(params, store, index, options);
  snm::write_report(cfg.out, report);
  std::cout << "cases=" << report.cases << " skipped=" << report.skipped << '\n';
  for (std::size_t k : {1, 5, 10}) {
    if (k <= report.hr.size()) {
      std::cout << "HR@" << k << '=' << report.hr_at(k) << " NDCG@" << k << '='
                << report.ndcg_at(k) << '\n';
    }
  }
  return 0;
}

int cmd_export_attn(const snm::RunConfig& cfg, const std::string& user,
                    const std::vector<std::string>& items, bool internal, std::size_t max_neighbors) {
  if (cfg.data.empty()) throw snm::ConfigError("export-attn needs --data <prepared directory>");
  const fs::path ckpt = cfg.checkpoint.empty() ? fs::path(cfg.out) / "model.ckpt" : fs::path(cfg.checkpoint);
  const auto store = snm::load_prepared(cfg.data);
  const auto params = snm::load_checkpoint(ckpt);
  check_against_store(params, store);
  const snm::NeighborhoodIndex index(store);

  const auto u = resolve_id(store.user_ids(), user, internal, "user");
  std::vector<snm::ItemId> vs;
  for (const auto& item : items) vs.push_back(resolve_id(store.item_ids(), item, internal, "item"));
  const auto map = snm::export_relevance_heatmap(params, index, u, vs, cfg.train.neighbor_cap,
                                                 cfg.evaluation_seed(), max_neighbors);
  std::cout << snm::write_heatmap(cfg.out, map, store).string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Selective neighborhood recommender: data preparation, training and evaluation"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  app.add_option("--config", config_path, "flat key = value config file")->check(CLI::ExistingFile);

  // Every config key doubles as a flag; flags override the config file.
  std::map<std::string, std::string> overrides;
  std::map<std::string, bool> flag_values;
  for (auto key : snm::RunConfig::keys()) {
    const std::string name(key);
    if (snm::RunConfig::is_flag(key)) {
      app.add_flag("--" + name, flag_values[name], "config key " + name);
    } else {
      app.add_option("--" + name, overrides[name], "config key " + name);
    }
  }

  auto* prepare = app.add_subcommand("prepare", "ingest, binarize, filter and split a ratings file");
  auto* pretrain = app.add_subcommand("pretrain", "train in plain mode (warm start for full mode)");
  auto* train = app.add_subcommand("train", "train a model on a prepared dataset");
  auto* evaluate = app.add_subcommand("evaluate", "rank held-out items against 99 sampled negatives");
  auto* export_attn = app.add_subcommand("export-attn", "write relevance-score heatmaps");

  std::string user;
  std::vector<std::string> items;
  bool internal_ids = false;
  std::size_t max_neighbors = 20;
  export_attn->add_option("--user", user, "user id")->required();
  export_attn->add_option("--items", items, "item ids")->required()->delimiter(',');
  export_attn->add_flag("--internal-ids", internal_ids, "treat ids as internal indices");
  export_attn->add_option("--max-neighbors", max_neighbors, "columns per heatmap row");

  CLI11_PARSE(app, argc, argv);

  try {
    snm::RunConfig cfg;
    if (!config_path.empty()) snm::apply_config_file(cfg, config_path);
    for (auto key : snm::RunConfig::keys()) {
      const std::string name(key);
      if (app.count("--" + name) == 0) continue;
      cfg.set(name, snm::RunConfig::is_flag(key) ? (flag_values[name] ? "true" : "false")
                                                 : overrides[name]);
    }
    if (pretrain->parsed()) cfg.train.mode = snm::Mode::kPlain;
    cfg.validate();

    if (prepare->parsed()) return cmd_prepare(cfg);
    if (pretrain->parsed() || train->parsed()) return cmd_train(cfg);
    if (evaluate->parsed()) return cmd_evaluate(cfg);
    if (export_attn->parsed()) return cmd_export_attn(cfg, user, items, internal_ids, max_neighbors);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
