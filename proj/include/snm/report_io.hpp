#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <span>
#include <string>

#include <json.hpp>

#include "snm/dataio.hpp"
#include "snm/eval.hpp"
#include "snm/training.hpp"

namespace snm {

inline void write_history_header(std::ostream& out) {
  out << "epoch,train_loss,val_HR@10,val_NDCG@10,lr\n";
}

inline void write_history_row(std::ostream& out, const EpochRecord& r) {
  auto num = [&](double x) -> std::ostream& {
    if (std::isnan(x)) return out << "nan";
    return out << std::setprecision(17) << x;
  };
  out << r.epoch << ',';
  num(r.train_loss) << ',';
  num(r.val_hr10) << ',';
  num(r.val_ndcg10) << ',';
  num(r.lr) << '\n';
}

inline void write_history(const std::filesystem::path& path, std::span<const EpochRecord> rows) {
  std::ofstream out(path);
  write_history_header(out);
  for (const auto& r : rows) write_history_row(out, r);
}

/// Flat metric-name -> value object.
inline nlohmann::ordered_json report_json(const EvalReport& report) {
  nlohmann::ordered_json j;
  j["cases"] = report.cases;
  j["skipped"] = report.skipped;
  j["seed"] = report.seed;
  for (std::size_t k = 1; k <= report.hr.size(); ++k) j["HR@" + std::to_string(k)] = report.hr_at(k);
  for (std::size_t k = 1; k <= report.ndcg.size(); ++k) {
    j["NDCG@" + std::to_string(k)] = report.ndcg_at(k);
  }
  return j;
}

inline void write_report(const std::filesystem::path& dir, const EvalReport& report) {
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "report.json") << report_json(report).dump(2) << '\n';
  std::ofstream ranks(dir / "ranks.csv");
  ranks << "user,item,rank\n";
  for (const auto& r : report.ranks) ranks << r.user << ',' << r.item << ',' << r.rank << '\n';
}

/// Writes `heatmap_<user>.csv` (relevance scores, one row per item, columns
/// n1..nK for neighbor slots) and `heatmap_<user>_neighbors.csv` (the
/// external user id in each slot). Empty neighborhoods give empty cells.
inline std::filesystem::path write_heatmap(const std::filesystem::path& dir, const Heatmap& map,
                                           const InteractionStore& store) {
  std::filesystem::create_directories(dir);
  std::size_t width = 0;
  for (const auto& row : map.neighbors) width = std::max(width, row.size());
  width = std::max<std::size_t>(width, 1);

  const std::string stem = "heatmap_" + store.user_id(map.user);
  const auto values_path = dir / (stem + ".csv");
  std::ofstream values(values_path);
  std::ofstream ids(dir / (stem + "_neighbors.csv"));
  values << "item";
  ids << "item";
  for (std::size_t c = 1; c <= width; ++c) {
    values << ",n" << c;
    ids << ",n" << c;
  }
  values << '\n';
  ids << '\n';
  for (std::size_t i = 0; i < map.items.size(); ++i) {
    values << store.item_id(map.items[i]);
    ids << store.item_id(map.items[i]);
    for (std::size_t c = 0; c < width; ++c) {
      values << ',';
      ids << ',';
      if (c < map.beta[i].size()) {
        values << std::setprecision(17) << map.beta[i][c];
        ids << store.user_id(map.neighbors[i][c]);
      }
    }
    values << '\n';
    ids << '\n';
  }
  return values_path;
}

}  // namespace snm
