#pragma once

#include <bit>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "snm/model.hpp"

namespace snm {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Layout:
//   snm-ckpt v1
//   tensors <count>
//   tensor <name> 2 <rows> <cols>
//   <IEEE-754 bit patterns as 16 hex digits, 8 per line>
//   ...
//   end

inline constexpr std::string_view kCheckpointMagic = "snm-ckpt v1";

inline void write_checkpoint(const ModelParams& params, std::ostream& out) {
  const auto tensors = params.all();
  out << kCheckpointMagic << '\n' << "tensors " << tensors.size() << '\n';
  char buf[17];
  for (const Parameter* p : tensors) {
    out << "tensor " << p->name << " 2 " << p->value.rows() << ' ' << p->value.cols() << '\n';
    const auto values = p->value.values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const auto bits = std::bit_cast<std::uint64_t>(values[i]);
      auto [end, ec] = std::to_chars(buf, buf + 16, bits, 16);
      const std::string hex(buf, end);
      out << std::string(16 - hex.size(), '0') << hex;
      out << ((i + 1) % 8 == 0 || i + 1 == values.size() ? '\n' : ' ');
    }
  }
  out << "end\n";
}

inline void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write " + path.string());
  write_checkpoint(params, out);
  if (!out) throw CheckpointError("failed writing " + path.string());
}

inline std::map<std::string, Tensor> read_checkpoint_tensors(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kCheckpointMagic) {
    throw CheckpointError("not an snm checkpoint (missing '" + std::string(kCheckpointMagic) +
                          "' header)");
  }
  std::string word;
  std::size_t count = 0;
  if (!(in >> word >> count) || word != "tensors") throw CheckpointError("missing tensor count");
  std::map<std::string, Tensor> tensors;
  for (std::size_t t = 0; t < count; ++t) {
    std::string name;
    std::size_t rank = 0, rows = 0, cols = 0;
    if (!(in >> word >> name >> rank) || word != "tensor" || rank != 2 || !(in >> rows >> cols)) {
      throw CheckpointError("malformed tensor header #" + std::to_string(t));
    }
    if (rows == 0 || cols == 0) throw CheckpointError("tensor " + name + " has an empty shape");
    std::vector<double> values(rows * cols);
    for (double& v : values) {
      std::string hex;
      std::uint64_t bits = 0;
      if (!(in >> hex) || hex.size() != 16) throw CheckpointError("truncated payload for " + name);
      auto [ptr, ec] = std::from_chars(hex.data(), hex.data() + hex.size(), bits, 16);
      if (ec != std::errc() || ptr != hex.data() + hex.size()) {
        throw CheckpointError("bad hex value in " + name);
      }
      v = std::bit_cast<double>(bits);
    }
    if (!tensors.emplace(name, Tensor(rows, cols, std::move(values))).second) {
      throw CheckpointError("duplicate tensor " + name);
    }
  }
  if (!(in >> word) || word != "end") throw CheckpointError("missing end marker");
  return tensors;
}

/// Rebuilds a ModelParams, inferring the tower depth from the tensor names
/// and checking every shape against the embedding dimensions.
inline ModelParams read_checkpoint(std::istream& in) {
  auto tensors = read_checkpoint_tensors(in);
  auto take = [&](const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw CheckpointError("checkpoint lacks tensor " + name);
    Parameter p(name, std::move(it->second));
    tensors.erase(it);
    return p;
  };
  ModelParams params;
  params.user_embedding = take("user_embedding");
  params.item_embedding = take("item_embedding");
  params.attn_user = take("attn_user");
  params.attn_item = take("attn_item");
  params.attn_vector = take("attn_vector");
  params.attn_bias = take("attn_bias");
  params.threshold = take("threshold");
  params.gate_user = take("gate_user");
  params.gate_neighbor = take("gate_neighbor");
  params.gate_bias = take("gate_bias");
  for (std::size_t l = 0; tensors.count(tower_weight_name(l)) > 0; ++l) {
    params.tower_weights.push_back(take(tower_weight_name(l)));
    params.tower_biases.push_back(take(tower_bias_name(l)));
  }
  params.out_weight = take("out_weight");
  params.out_bias = take("out_bias");
  if (!tensors.empty()) throw CheckpointError("unexpected tensor " + tensors.begin()->first);
  if (params.layers() == 0) throw CheckpointError("checkpoint has no tower layers");

  // Shapes must agree with a freshly initialised model of the same size.
  const std::size_t m = params.num_users(), n = params.num_items(), d = params.dim();
  std::vector<std::size_t> widths;
  try {
    widths = tower_widths(d, params.layers());
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(e.what());
  }
  auto expect = [](const Parameter& p, std::size_t rows, std::size_t cols) {
    if (p.value.rows() != rows || p.value.cols() != cols) {
      throw CheckpointError("tensor " + p.name + " has shape " + p.value.shape_string() +
                            ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
    }
  };
  expect(params.item_embedding, n, d);
  expect(params.attn_user, d, d);
  expect(params.attn_item, d, d);
  expect(params.attn_vector, d, 1);
  expect(params.attn_bias, 1, d);
  expect(params.threshold, m, 1);
  expect(params.gate_user, d, d);
  expect(params.gate_neighbor, d, d);
  expect(params.gate_bias, 1, d);
  for (std::size_t l = 0; l < params.layers(); ++l) {
    expect(params.tower_weights[l], widths[l], widths[l + 1]);
    expect(params.tower_biases[l], 1, widths[l + 1]);
  }
  expect(params.out_weight, widths.back(), 1);
  expect(params.out_bias, 1, 1);
  return params;
}

inline ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  return read_checkpoint(in);
}

/// Copies the tensors plain-mode pretraining learns (embeddings and the
/// prediction tower) from `source` into `target` wherever name and shape
/// match; returns how many were copied.
inline std::size_t warm_start(ModelParams& target, const ModelParams& source) {
  auto pretrained = [](const std::string& name) {
    return name == "user_embedding" || name == "item_embedding" || name.starts_with("tower_") ||
           name.starts_with("out_");
  };
  std::size_t copied = 0;
  for (Parameter* dst : target.all()) {
    if (!pretrained(dst->name)) continue;
    for (const Parameter* src : source.all()) {
      if (src->name == dst->name && src->value.same_shape(dst->value)) {
        dst->value = src->value;
        ++copied;
      }
    }
  }
  return copied;
}

}  // namespace snm
