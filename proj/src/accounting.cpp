#include "palab/accounting.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "palab/errors.hpp"

namespace palab {

std::size_t params_per_head(const ModelConfig& c) {
  return 3 * (c.hidden * c.head_dim + c.head_dim) + c.head_dim * c.hidden;
}

std::uint64_t FlopsReport::total() const {
  return embedding + mha_matmul + mha_other + ffn_matmul + ffn_other + layernorm + residual + pooler +
         classifier + adapters;
}

double FlopsReport::per_token() const {
  return static_cast<double>(total()) / static_cast<double>(seq_len * batch);
}

namespace {

std::vector<std::size_t> kept_per_block(const ModelConfig& c, const PrunePlan* plan) {
  std::vector<std::size_t> kept(c.num_layers, c.num_heads);
  if (plan != nullptr) {
    if (plan->layers != c.num_layers || plan->heads != c.num_heads) {
      throw ShapeError("prune plan does not match the model config");
    }
    for (std::size_t l = 0; l < c.num_layers; ++l) kept[l] = plan->kept_in_block(l);
  }
  return kept;
}

void check_rank_plan(const ModelConfig& c, const RankPlan* rank_plan) {
  if (rank_plan != nullptr && rank_plan->block_rank.size() != c.num_layers) {
    throw ShapeError("rank plan covers " + std::to_string(rank_plan->block_rank.size()) + " blocks, config has " +
                     std::to_string(c.num_layers));
  }
}

}  // namespace

FlopsReport estimate_flops(const ModelConfig& c, const PrunePlan* plan, std::size_t seq_len,
                           const RankPlan* rank_plan, std::size_t batch) {
  if (seq_len == 0 || batch == 0) throw ContractError("estimate_flops: seq_len and batch must be positive");
  check_rank_plan(c, rank_plan);
  const auto kept = kept_per_block(c, plan);
  const std::uint64_t s = seq_len;
  const std::uint64_t d = c.hidden;
  const std::uint64_t dh = c.head_dim;
  const std::uint64_t df = c.ffn_dim;
  FlopsReport f;
  f.seq_len = seq_len;
  f.batch = batch;
  f.embedding = 2 * s * d;
  f.layernorm = 8 * s * d;
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    const std::uint64_t k = kept[l];
    const std::uint64_t width = k * dh;
    f.mha_matmul += 3 * (2 * s * d * width) + k * (4 * s * s * dh) + 2 * s * width * d;
    f.mha_other += 3 * (s * width) + k * (7 * s * s) + s * d;
    f.ffn_matmul += 4 * s * d * df;
    f.ffn_other += 2 * s * df + s * d;
    f.residual += 2 * s * d;
    f.layernorm += 16 * s * d;
    if (rank_plan != nullptr) {
      const std::uint64_t r = rank_plan->block_rank[l];
      // x A, (x A) B and the sum for each of Q/K/V and O.
      f.adapters += 3 * (2 * s * d * r + 2 * s * r * width + s * width) + 2 * s * width * r + 2 * s * r * d + s * d;
    }
  }
  f.pooler = 2 * d * d + 2 * d;
  f.classifier = 2 * d * c.num_classes + c.num_classes;
  for (std::uint64_t* v : {&f.embedding, &f.mha_matmul, &f.mha_other, &f.ffn_matmul, &f.ffn_other, &f.layernorm,
                           &f.residual, &f.pooler, &f.classifier, &f.adapters}) {
    *v *= batch;
  }
  return f;
}

ParamReport count_params(const ModelConfig& c, const PrunePlan* plan, const RankPlan* rank_plan,
                         std::size_t seq_len) {
  c.validate();
  check_rank_plan(c, rank_plan);
  const auto kept = kept_per_block(c, plan);
  const std::size_t d = c.hidden;
  ParamReport r;
  r.regime = rank_plan != nullptr ? (plan != nullptr ? "prune_lora" : "lora")
                                  : (plan != nullptr ? "pruned" : "full_finetune");
  r.embeddings = (c.vocab_size + c.max_positions + c.type_vocab) * d;
  r.embedding_norm = 2 * d;
  r.head_params = params_per_head(c);
  std::size_t layernorm = r.embedding_norm;
  for (std::size_t l = 0; l < c.num_layers; ++l) {
    BlockCount b;
    b.kept_heads = kept[l];
    r.pruned_heads += c.num_heads - kept[l];
    const std::size_t width = kept[l] * c.head_dim;
    b.attention = 3 * (d * width + width) + width * d + d;
    b.ffn = d * c.ffn_dim + c.ffn_dim + c.ffn_dim * d + d;
    b.layernorm = 4 * d;
    if (rank_plan != nullptr) {
      b.adapter_rank = rank_plan->block_rank[l];
      b.adapters = 4 * b.adapter_rank * (d + width);
    }
    layernorm += b.layernorm;
    r.adapter_params += b.adapters;
    r.blocks.push_back(b);
  }
  r.pooler = d * d + d;
  r.classifier = d * c.num_classes + c.num_classes;
  r.base_params = r.embeddings + r.embedding_norm + r.pooler + r.classifier;
  for (const auto& b : r.blocks) r.base_params += b.attention + b.ffn + b.layernorm;
  r.total_params = r.base_params + r.adapter_params;
  r.trainable_params = rank_plan != nullptr ? layernorm + r.adapter_params + r.classifier : r.total_params;
  r.trainable_fraction =
      r.total_params == 0 ? 0.0 : static_cast<double>(r.trainable_params) / static_cast<double>(r.total_params);
  r.weight_bytes_f64 = r.total_params * 8;
  r.weight_bytes_f32 = r.total_params * 4;
  r.flops = estimate_flops(c, plan, std::min(seq_len, c.max_positions), rank_plan);
  return r;
}

ParamReport count_params(const TransformerWeights& w, const LoraAdapters* adapters, std::size_t seq_len) {
  validate_structure(w);
  if (adapters != nullptr) validate_attachment(w, *adapters);
  const PrunePlan plan = plan_of(w);
  return count_params(w.config, w.is_pruned() ? &plan : nullptr, adapters != nullptr ? &adapters->plan : nullptr,
                      seq_len);
}

PrunePlan spread_plan(const ModelConfig& c, std::size_t keep_count) {
  const std::size_t n = c.total_heads();
  if (keep_count > n) throw ContractError("spread_plan: keep_count exceeds the number of heads");
  std::vector<std::uint8_t> keep(n, 1);
  std::size_t pruned = n - keep_count;
  // Round r removes head H-1-r from blocks L-1, L-2, ... until done.
  for (std::size_t round = 0; pruned > 0; ++round) {
    for (std::size_t i = 0; i < c.num_layers && pruned > 0; ++i) {
      const std::size_t l = c.num_layers - 1 - i;
      keep[l * c.num_heads + (c.num_heads - 1 - round)] = 0;
      --pruned;
    }
  }
  return plan_from_keep(c.num_layers, c.num_heads, std::move(keep));
}

double mebibytes(std::size_t bytes) { return static_cast<double>(bytes) / (1024.0 * 1024.0); }

nlohmann::json to_json(const FlopsReport& f) {
  return nlohmann::json{{"seq_len", f.seq_len},       {"batch", f.batch},
                        {"embedding", f.embedding},   {"mha_matmul", f.mha_matmul},
                        {"mha_other", f.mha_other},   {"ffn_matmul", f.ffn_matmul},
                        {"ffn_other", f.ffn_other},   {"layernorm", f.layernorm},
                        {"residual", f.residual},     {"pooler", f.pooler},
                        {"classifier", f.classifier}, {"adapters", f.adapters},
                        {"total", f.total()},         {"per_token", f.per_token()}};
}

nlohmann::json to_json(const ParamReport& r) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : r.blocks) {
    blocks.push_back({{"kept_heads", b.kept_heads},
                      {"attention", b.attention},
                      {"ffn", b.ffn},
                      {"layernorm", b.layernorm},
                      {"adapter_rank", b.adapter_rank},
                      {"adapters", b.adapters}});
  }
  return nlohmann::json{{"regime", r.regime},
                        {"embeddings", r.embeddings},
                        {"embedding_norm", r.embedding_norm},
                        {"blocks", std::move(blocks)},
                        {"pooler", r.pooler},
                        {"classifier", r.classifier},
                        {"base_params", r.base_params},
                        {"adapter_params", r.adapter_params},
                        {"total_params", r.total_params},
                        {"trainable_params", r.trainable_params},
                        {"trainable_fraction", r.trainable_fraction},
                        {"weight_bytes_f64", r.weight_bytes_f64},
                        {"weight_bytes_f32", r.weight_bytes_f32},
                        {"weight_mib_f32", mebibytes(r.weight_bytes_f32)},
                        {"forward_flops", to_json(r.flops)}};
}

namespace {

std::string grouped(std::size_t v) {
  std::string s = std::to_string(v);
  for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) s.insert(static_cast<std::size_t>(i), ",");
  return s;
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

std::string format_report_table(const std::vector<ParamReport>& reports) {
  std::vector<std::vector<std::string>> rows{
      {"Method", "Memory (f32 weights)", "Model Param", "Trainable Param", "Proportion", "Forward FLOPs/token"}};
  for (const auto& r : reports) {
    rows.push_back({r.regime, fixed(mebibytes(r.weight_bytes_f32), 1) + " MB", grouped(r.total_params),
                    grouped(r.trainable_params), fixed(100.0 * r.trainable_fraction, 2) + "%",
                    fixed(r.flops.per_token(), 0)});
  }
  std::vector<std::size_t> width(rows[0].size(), 0);
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  }
  std::ostringstream out;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t i = 0; i < rows[r].size(); ++i) {
      out << rows[r][i];
      if (i + 1 < rows[r].size()) out << std::string(width[i] - rows[r][i].size() + 2, ' ');
    }
    out << '\n';
    if (r == 0) {
      for (std::size_t i = 0; i < width.size(); ++i) out << std::string(width[i], '-') << (i + 1 < width.size() ? "  " : "");
      out << '\n';
    }
  }
  return out.str();
}

std::string published_comparison(const std::vector<ParamReport>& reports) {
  std::ostringstream out;
  out << "Published bert-base figures:\n"
      << "  full_finetune  418.7 MB  109.48 M  109.48 M  100%\n"
      << "  lora           419.6 MB  109.7 M   259.6 K   0.24%\n"
      << "  prune_lora     392.4 MB  101.29 M  308.7 K   0.3%\n\n";
  auto line = [&](const std::string& what, double computed, double published, double unit, const char* suffix) {
    out << "  " << what << ": computed " << fixed(computed / unit, 2) << suffix << ", published "
        << fixed(published / unit, 2) << suffix << ", difference " << fixed((computed - published) / unit, 2)
        << suffix << '\n';
  };
  for (const auto& r : reports) {
    const auto total = static_cast<double>(r.total_params);
    const auto trainable = static_cast<double>(r.trainable_params);
    const double mb = mebibytes(r.weight_bytes_f32);
    out << r.regime << " (" << grouped(r.total_params) << " params, " << grouped(r.trainable_params)
        << " trainable)\n";
    if (r.regime == "full_finetune") {
      line("model params", total, kPublishedFullParams, 1e6, " M");
      line("f32 weight memory", mb, kPublishedFullMemoryMB, 1.0, " MB");
    } else if (r.regime == "pruned") {
      line("model params", total, kPublishedPrunedParams, 1e6, " M");
      out << "  note: " << r.pruned_heads << " heads x " << grouped(r.head_params) << " params removed; the published "
          << "figure is not reproduced by this count and the gap is reported, not reconciled\n";
    } else if (r.regime == "lora") {
      line("model params", total, kPublishedLoraParams, 1e6, " M");
      line("trainable params", trainable, kPublishedLoraTrainable, 1e3, " K");
      line("f32 weight memory", mb, kPublishedLoraMemoryMB, 1.0, " MB");
    } else if (r.regime == "prune_lora") {
      line("model params", total, kPublishedPrunedParams, 1e6, " M");
      line("trainable params", trainable, kPublishedPruneLoraTrainable, 1e3, " K");
      out << "  note: adapter widths follow the kept heads of each block; rank x (in + out) over Q/K/V/O plus\n"
          << "        LayerNorms and classifier does not give the published trainable count\n";
      line("f32 weight memory", mb, kPublishedPruneLoraMemoryMB, 1.0, " MB");
    }
  }
  return out.str();
}

}  // namespace palab
