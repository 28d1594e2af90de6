#include "palab/pruning.hpp"

#include <algorithm>
#include <numeric>

#include "palab/digest.hpp"
#include "palab/errors.hpp"

namespace palab {

std::size_t PrunePlan::kept_in_block(std::size_t layer) const {
  return static_cast<std::size_t>(
      std::count(keep.begin() + static_cast<std::ptrdiff_t>(layer * heads),
                 keep.begin() + static_cast<std::ptrdiff_t>((layer + 1) * heads), std::uint8_t{1}));
}

std::vector<std::size_t> PrunePlan::kept_heads(std::size_t layer) const {
  std::vector<std::size_t> out;
  for (std::size_t h = 0; h < heads; ++h) {
    if (kept(layer, h)) out.push_back(h);
  }
  return out;
}

PrunePlan select_heads(const ImportanceMap& map, std::size_t keep_count) {
  const std::size_t layers = map.layers();
  const std::size_t heads = map.heads();
  const std::size_t n = layers * heads;
  if (keep_count > n) {
    throw ContractError("select_heads: keep_count " + std::to_string(keep_count) + " exceeds " +
                        std::to_string(n) + " heads");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  // Flat index order is (layer, head) lexicographic, so a stable sort on
  // the score alone gives the tie-break.
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return map.final[a] > map.final[b]; });
  std::vector<std::uint8_t> keep(n, 0);
  for (std::size_t i = 0; i < keep_count; ++i) keep[order[i]] = 1;
  return plan_from_keep(layers, heads, std::move(keep), map.digest());
}

PrunePlan plan_from_keep(std::size_t layers, std::size_t heads, std::vector<std::uint8_t> keep,
                         std::uint64_t source_map_digest) {
  if (keep.size() != layers * heads) throw ShapeError("prune plan: keep grid has wrong size");
  PrunePlan p;
  p.layers = layers;
  p.heads = heads;
  for (auto& k : keep) {
    if (k > 1) throw InputError("prune plan: keep entries must be 0 or 1");
    p.keep_count += k;
  }
  p.keep = std::move(keep);
  p.source_map_digest = source_map_digest;
  return p;
}

PrunePlan plan_of(const TransformerWeights& w) {
  const auto& c = w.config;
  std::vector<std::uint8_t> keep(c.total_heads(), 0);
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    for (std::size_t h : w.blocks[l].heads) keep[l * c.num_heads + h] = 1;
  }
  return plan_from_keep(c.num_layers, c.num_heads, std::move(keep));
}

namespace {

void check_plan(const TransformerWeights& w, const PrunePlan& plan) {
  if (plan.layers != w.config.num_layers || plan.heads != w.config.num_heads ||
      plan.keep.size() != plan.layers * plan.heads) {
    throw ShapeError("prune plan is " + std::to_string(plan.layers) + "x" + std::to_string(plan.heads) +
                     " but the model has " + std::to_string(w.config.num_layers) + "x" +
                     std::to_string(w.config.num_heads) + " heads");
  }
}

// Copies the column blocks `slots` (each `width` wide) of a row-major matrix.
Tensor take_column_blocks(const Tensor& m, const std::vector<std::size_t>& slots, std::size_t width) {
  const std::size_t rows = m.rank() == 1 ? 1 : m.rows();
  const std::size_t cols = m.rank() == 1 ? m.size() : m.cols();
  const std::size_t out_cols = slots.size() * width;
  std::vector<double> out(rows * out_cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t s = 0; s < slots.size(); ++s) {
      const double* src = m.data().data() + r * cols + slots[s] * width;
      std::copy(src, src + width, out.begin() + static_cast<std::ptrdiff_t>(r * out_cols + s * width));
    }
  }
  Shape shape = m.rank() == 1 ? Shape{out_cols} : Shape{rows, out_cols};
  return Tensor(std::move(shape), std::move(out));
}

Tensor take_row_blocks(const Tensor& m, const std::vector<std::size_t>& slots, std::size_t height) {
  const std::size_t cols = m.cols();
  std::vector<double> out;
  out.reserve(slots.size() * height * cols);
  for (std::size_t s : slots) {
    auto src = m.data().subspan(s * height * cols, height * cols);
    out.insert(out.end(), src.begin(), src.end());
  }
  return Tensor({slots.size() * height, cols}, std::move(out));
}

void zero_column_block(Tensor& m, std::size_t slot, std::size_t width) {
  const std::size_t rows = m.rank() == 1 ? 1 : m.rows();
  const std::size_t cols = m.rank() == 1 ? m.size() : m.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    std::fill_n(m.data().begin() + static_cast<std::ptrdiff_t>(r * cols + slot * width), width, 0.0);
  }
}

void zero_row_block(Tensor& m, std::size_t slot, std::size_t height) {
  const std::size_t cols = m.cols();
  std::fill_n(m.data().begin() + static_cast<std::ptrdiff_t>(slot * height * cols), height * cols, 0.0);
}

}  // namespace

std::pair<TransformerWeights, HeadMask> apply_mask_prune(const TransformerWeights& w,
                                                         const PrunePlan& plan) {
  check_plan(w, plan);
  TransformerWeights out = w;
  HeadMask mask = HeadMask::ones(w.config);
  const std::size_t dh = w.config.head_dim;
  for (std::size_t l = 0; l < out.blocks.size(); ++l) {
    auto& b = out.blocks[l];
    for (std::size_t h = 0; h < w.config.num_heads; ++h) {
      if (!plan.kept(l, h)) mask.set(l, h, 0.0);
    }
    for (std::size_t s = 0; s < b.heads.size(); ++s) {
      if (plan.kept(l, b.heads[s])) continue;
      for (Linear* lin : {&b.query, &b.key, &b.value}) {
        zero_column_block(lin->weight, s, dh);
        zero_column_block(lin->bias, s, dh);
      }
      zero_row_block(b.output.weight, s, dh);
    }
  }
  return {std::move(out), std::move(mask)};
}

TransformerWeights apply_slice_prune(const TransformerWeights& w, const PrunePlan& plan) {
  check_plan(w, plan);
  TransformerWeights out = w;
  const std::size_t dh = w.config.head_dim;
  for (std::size_t l = 0; l < out.blocks.size(); ++l) {
    auto& b = out.blocks[l];
    std::vector<std::size_t> slots;
    std::vector<std::size_t> heads;
    for (std::size_t h = 0; h < w.config.num_heads; ++h) {
      if (!plan.kept(l, h)) continue;
      const auto it = std::find(b.heads.begin(), b.heads.end(), h);
      if (it == b.heads.end()) {
        throw ContractError("slice prune: plan keeps head " + std::to_string(h) + " of block " +
                            std::to_string(l) + ", which the model no longer has");
      }
      slots.push_back(static_cast<std::size_t>(it - b.heads.begin()));
      heads.push_back(h);
    }
    for (Linear* lin : {&b.query, &b.key, &b.value}) {
      lin->weight = take_column_blocks(lin->weight, slots, dh);
      lin->bias = take_column_blocks(lin->bias, slots, dh);
    }
    b.output.weight = take_row_blocks(b.output.weight, slots, dh);
    b.heads = std::move(heads);
  }
  validate_structure(out);
  return out;
}

nlohmann::json to_json(const PrunePlan& plan) {
  nlohmann::json grid = nlohmann::json::array();
  for (std::size_t l = 0; l < plan.layers; ++l) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t h = 0; h < plan.heads; ++h) row.push_back(plan.kept(l, h) ? 1 : 0);
    grid.push_back(std::move(row));
  }
  return nlohmann::json{{"format", "palab-prune-plan"},
                        {"version", 1},
                        {"layers", plan.layers},
                        {"heads", plan.heads},
                        {"keep_count", plan.keep_count},
                        {"source_map_digest", digest_hex(plan.source_map_digest)},
                        {"keep", std::move(grid)}};
}

PrunePlan prune_plan_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format") != "palab-prune-plan") throw FormatError("not a prune plan");
    const auto layers = j.at("layers").get<std::size_t>();
    const auto heads = j.at("heads").get<std::size_t>();
    std::vector<std::uint8_t> keep;
    const auto& grid = j.at("keep");
    if (grid.size() != layers) throw FormatError("prune plan: wrong row count");
    for (const auto& row : grid) {
      if (row.size() != heads) throw FormatError("prune plan: wrong column count");
      for (const auto& v : row) keep.push_back(v.get<std::uint8_t>());
    }
    PrunePlan p = plan_from_keep(layers, heads, std::move(keep),
                                 parse_digest_hex(j.at("source_map_digest").get<std::string>()));
    if (p.keep_count != j.at("keep_count").get<std::size_t>()) {
      throw FormatError("prune plan: keep_count disagrees with the grid");
    }
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("prune plan: ") + e.what());
  }
}

}  // namespace palab
