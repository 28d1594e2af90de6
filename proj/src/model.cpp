#include "palab/model.hpp"

#include <cmath>
#include <numeric>

#include "palab/digest.hpp"
#include "palab/errors.hpp"
#include "palab/lora.hpp"
#include "palab/ops.hpp"
#include "palab/rng.hpp"

namespace palab {

// ---------------------------------------------------------------------------
// Config

ModelConfig ModelConfig::toy() { return ModelConfig{}; }

ModelConfig ModelConfig::reference() {
  ModelConfig c;
  c.num_layers = 12;
  c.num_heads = 12;
  c.hidden = 768;
  c.head_dim = 64;
  c.ffn_dim = 3072;
  c.vocab_size = 30522;
  c.max_positions = 512;
  c.type_vocab = 2;
  c.num_classes = 0;
  c.layernorm_eps = 1e-12;
  return c;
}

void ModelConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw InputError("model config: " + what);
  };
  require(num_layers >= 1, "num_layers must be positive");
  require(num_heads >= 1, "num_heads must be positive");
  require(head_dim >= 1, "head_dim must be positive");
  require(hidden == num_heads * head_dim,
          "hidden (" + std::to_string(hidden) + ") must equal num_heads * head_dim (" +
              std::to_string(num_heads * head_dim) + ")");
  require(ffn_dim >= 1, "ffn_dim must be positive");
  require(vocab_size >= 1, "vocab_size must be positive");
  require(max_positions >= 1, "max_positions must be positive");
  require(type_vocab >= 1, "type_vocab must be positive");
  require(layernorm_eps > 0.0 && std::isfinite(layernorm_eps), "layernorm_eps must be positive");
}

nlohmann::json to_json(const ModelConfig& c) {
  return nlohmann::json{{"num_layers", c.num_layers},     {"num_heads", c.num_heads},
                        {"hidden", c.hidden},             {"head_dim", c.head_dim},
                        {"ffn_dim", c.ffn_dim},           {"vocab_size", c.vocab_size},
                        {"max_positions", c.max_positions}, {"type_vocab", c.type_vocab},
                        {"num_classes", c.num_classes},   {"layernorm_eps", c.layernorm_eps}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    j.at("num_layers").get_to(c.num_layers);
    j.at("num_heads").get_to(c.num_heads);
    j.at("hidden").get_to(c.hidden);
    j.at("head_dim").get_to(c.head_dim);
    j.at("ffn_dim").get_to(c.ffn_dim);
    j.at("vocab_size").get_to(c.vocab_size);
    j.at("max_positions").get_to(c.max_positions);
    j.at("type_vocab").get_to(c.type_vocab);
    j.at("num_classes").get_to(c.num_classes);
    j.at("layernorm_eps").get_to(c.layernorm_eps);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Weights

const char* role_name(ParamRole role) {
  switch (role) {
    case ParamRole::kEmbedding: return "embedding";
    case ParamRole::kAttention: return "attention";
    case ParamRole::kFfn: return "ffn";
    case ParamRole::kLayerNorm: return "layernorm";
    case ParamRole::kPooler: return "pooler";
    case ParamRole::kClassifier: return "classifier";
  }
  return "unknown";
}

bool TransformerWeights::is_pruned() const { return kept_heads() != config.total_heads(); }

std::size_t TransformerWeights::kept_heads() const {
  std::size_t n = 0;
  for (const auto& b : blocks) n += b.heads.size();
  return n;
}

namespace {

Linear make_linear(Rng& rng, std::size_t in, std::size_t out) {
  std::vector<double> w(in * out);
  for (double& v : w) v = rng.normal(0.0, 0.02);
  return Linear{Tensor({in, out}, std::move(w)), Tensor::zeros({out})};
}

Tensor make_table(Rng& rng, std::size_t rows, std::size_t cols) {
  std::vector<double> w(rows * cols);
  for (double& v : w) v = rng.normal(0.0, 0.02);
  return Tensor({rows, cols}, std::move(w));
}

LayerNormParams make_norm(std::size_t d) {
  return LayerNormParams{Tensor::filled({d}, 1.0), Tensor::zeros({d})};
}

}  // namespace

TransformerWeights init_weights(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(derive_seed(seed, 1));
  const std::size_t d = config.hidden;
  TransformerWeights w;
  w.config = config;
  w.token_embedding = make_table(rng, config.vocab_size, d);
  w.position_embedding = make_table(rng, config.max_positions, d);
  w.type_embedding = make_table(rng, config.type_vocab, d);
  w.embedding_norm = make_norm(d);
  w.blocks.resize(config.num_layers);
  for (auto& b : w.blocks) {
    b.heads.resize(config.num_heads);
    std::iota(b.heads.begin(), b.heads.end(), std::size_t{0});
    b.query = make_linear(rng, d, d);
    b.key = make_linear(rng, d, d);
    b.value = make_linear(rng, d, d);
    b.output = make_linear(rng, d, d);
    b.attention_norm = make_norm(d);
    b.ffn_up = make_linear(rng, d, config.ffn_dim);
    b.ffn_down = make_linear(rng, config.ffn_dim, d);
    b.ffn_norm = make_norm(d);
  }
  w.pooler = make_linear(rng, d, d);
  w.classifier = make_linear(rng, d, config.num_classes);
  return w;
}

void validate_structure(const TransformerWeights& w) {
  const ModelConfig& c = w.config;
  c.validate();
  auto expect = [](const Tensor& t, const Shape& s, const std::string& name) {
    if (t.shape() != s) {
      throw ShapeError(name + ": expected " + shape_string(s) + ", found " + shape_string(t.shape()));
    }
  };
  const std::size_t d = c.hidden;
  expect(w.token_embedding, {c.vocab_size, d}, "embeddings.token");
  expect(w.position_embedding, {c.max_positions, d}, "embeddings.position");
  expect(w.type_embedding, {c.type_vocab, d}, "embeddings.type");
  expect(w.embedding_norm.gamma, {d}, "embeddings.norm.gamma");
  expect(w.embedding_norm.beta, {d}, "embeddings.norm.beta");
  if (w.blocks.size() != c.num_layers) {
    throw ShapeError("expected " + std::to_string(c.num_layers) + " blocks, found " +
                     std::to_string(w.blocks.size()));
  }
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    const auto& b = w.blocks[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    for (std::size_t s = 0; s < b.heads.size(); ++s) {
      if (b.heads[s] >= c.num_heads || (s > 0 && b.heads[s] <= b.heads[s - 1])) {
        throw ShapeError(p + "heads: indices must be ascending and below num_heads");
      }
    }
    const std::size_t width = b.heads.size() * c.head_dim;
    expect(b.query.weight, {d, width}, p + "attention.query.weight");
    expect(b.query.bias, {width}, p + "attention.query.bias");
    expect(b.key.weight, {d, width}, p + "attention.key.weight");
    expect(b.key.bias, {width}, p + "attention.key.bias");
    expect(b.value.weight, {d, width}, p + "attention.value.weight");
    expect(b.value.bias, {width}, p + "attention.value.bias");
    expect(b.output.weight, {width, d}, p + "attention.output.weight");
    expect(b.output.bias, {d}, p + "attention.output.bias");
    expect(b.attention_norm.gamma, {d}, p + "attention.norm.gamma");
    expect(b.attention_norm.beta, {d}, p + "attention.norm.beta");
    expect(b.ffn_up.weight, {d, c.ffn_dim}, p + "ffn.up.weight");
    expect(b.ffn_up.bias, {c.ffn_dim}, p + "ffn.up.bias");
    expect(b.ffn_down.weight, {c.ffn_dim, d}, p + "ffn.down.weight");
    expect(b.ffn_down.bias, {d}, p + "ffn.down.bias");
    expect(b.ffn_norm.gamma, {d}, p + "ffn.norm.gamma");
    expect(b.ffn_norm.beta, {d}, p + "ffn.norm.beta");
  }
  expect(w.pooler.weight, {d, d}, "pooler.weight");
  expect(w.pooler.bias, {d}, "pooler.bias");
  expect(w.classifier.weight, {d, c.num_classes}, "classifier.weight");
  expect(w.classifier.bias, {c.num_classes}, "classifier.bias");
}

std::size_t parameter_count(const TransformerWeights& w) {
  std::size_t n = 0;
  for_each_parameter(w, [&](const std::string&, ParamRole, const Tensor& t) { n += t.size(); });
  return n;
}

std::uint64_t weights_digest(const TransformerWeights& w) {
  Fnv1a h;
  h.update(to_json(w.config).dump());
  for (const auto& b : w.blocks) {
    h.update(static_cast<std::uint64_t>(b.heads.size()));
    for (std::size_t head : b.heads) h.update(static_cast<std::uint64_t>(head));
  }
  for_each_parameter(w, [&](const std::string& name, ParamRole, const Tensor& t) {
    h.update(name);
    h.update(t.data());
  });
  return h.value();
}

HeadMask HeadMask::ones(const ModelConfig& config) {
  return HeadMask{Tensor::filled({config.num_layers, config.num_heads}, 1.0)};
}

// ---------------------------------------------------------------------------
// Forward

SequenceLayout make_layout(const TokenBatch& batch) {
  batch.validate();
  const std::size_t b = batch.batch_size;
  const std::size_t s = batch.seq_len;
  std::vector<double> bias(b * s * s, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t q = 0; q < s; ++q) {
      for (std::size_t k = 0; k < s; ++k) {
        if (batch.attention_mask[i * s + k] == 0) bias[(i * s + q) * s + k] = kPaddedKeyBias;
      }
    }
  }
  return SequenceLayout{b, s, Tensor({b * s, s}, std::move(bias))};
}

namespace {

void check_inputs(const TransformerWeights& w, const TokenBatch& batch, const Tensor* mask) {
  const ModelConfig& c = w.config;
  batch.validate();
  if (batch.seq_len > c.max_positions) {
    throw InputError("sequence length " + std::to_string(batch.seq_len) + " exceeds max_positions " +
                     std::to_string(c.max_positions));
  }
  for (std::size_t id : batch.token_ids) {
    if (id >= c.vocab_size) {
      throw InputError("token id " + std::to_string(id) + " is not below vocab_size " +
                       std::to_string(c.vocab_size));
    }
  }
  if (mask != nullptr && mask->shape() != Shape{c.num_layers, c.num_heads}) {
    throw InputError("head mask shape " + shape_string(mask->shape()) + " does not match [" +
                     std::to_string(c.num_layers) + ", " + std::to_string(c.num_heads) + "]");
  }
  if (c.num_classes == 0) throw InputError("model has no classification head");
}

// softmax(Q_s K_sᵀ / sqrt(d_h) + key_bias) V_s for head slot s.
Var head_attention(Graph& g, Var q, Var k, Var v, std::size_t slot, std::size_t head_dim,
                   const SequenceLayout& layout) {
  const std::size_t lo = slot * head_dim;
  const std::size_t hi = lo + head_dim;
  Var qs = ops::slice_cols(g, q, lo, hi);
  Var ks = ops::slice_cols(g, k, lo, hi);
  Var vs = ops::slice_cols(g, v, lo, hi);
  Var scores = ops::batched_matmul_bt(g, qs, ks, layout.batches);
  scores = ops::scale(g, scores, 1.0 / std::sqrt(static_cast<double>(head_dim)));
  scores = ops::add_constant(g, scores, layout.key_bias);
  Var probs = ops::softmax_lastdim(g, scores);
  return ops::batched_matmul(g, probs, vs, layout.batches);
}

template <class L, class P>
Var project(Graph& g, Var x, L& linear, P* pair, double scaling) {
  Var w = g.bind(linear.weight);
  Var y = pair != nullptr ? adapter_forward(g, x, w, g.bind(pair->a), g.bind(pair->b), scaling)
                          : ops::matmul(g, x, w);
  return ops::add_bias(g, y, g.bind(linear.bias));
}

template <class Block, class Adapters>
Var encoder_block(Graph& g, Block& block, std::size_t layer, Var x, const SequenceLayout& layout,
                  const ModelConfig& c, const Var* mask, Adapters* adapters) {
  using PairT = std::conditional_t<std::is_const_v<Block>, const LoraPair, LoraPair>;
  auto pair = [&](LoraTarget t) -> PairT* {
    return adapters != nullptr ? &adapters->blocks[layer][t] : nullptr;
  };
  const double scaling = adapters != nullptr ? adapters->scaling : 1.0;
  const std::size_t rows = layout.batches * layout.seq_len;

  Var q = project(g, x, block.query, pair(LoraTarget::kQuery), scaling);
  Var k = project(g, x, block.key, pair(LoraTarget::kKey), scaling);
  Var v = project(g, x, block.value, pair(LoraTarget::kValue), scaling);

  std::vector<Var> heads;
  heads.reserve(block.heads.size());
  for (std::size_t slot = 0; slot < block.heads.size(); ++slot) {
    Var h = head_attention(g, q, k, v, slot, c.head_dim, layout);
    if (mask != nullptr) h = ops::scale_by_entry(g, h, *mask, layer * c.num_heads + block.heads[slot]);
    heads.push_back(h);
  }
  // With no heads left this is an [rows, 0] value and the projection reduces
  // to the output bias.
  Var concat = ops::concat_cols(g, heads, rows);
  Var attn = project(g, concat, block.output, pair(LoraTarget::kOutput), scaling);
  Var x1 = ops::layernorm(g, ops::add(g, x, attn), g.bind(block.attention_norm.gamma),
                          g.bind(block.attention_norm.beta), c.layernorm_eps);

  Var up = ops::relu(g, ops::add_bias(g, ops::matmul(g, x1, g.bind(block.ffn_up.weight)),
                                      g.bind(block.ffn_up.bias)));
  Var down = ops::add_bias(g, ops::matmul(g, up, g.bind(block.ffn_down.weight)),
                           g.bind(block.ffn_down.bias));
  return ops::layernorm(g, ops::add(g, x1, down), g.bind(block.ffn_norm.gamma),
                        g.bind(block.ffn_norm.beta), c.layernorm_eps);
}

template <class W, class M, class A>
Var forward_impl(Graph& g, W& w, const TokenBatch& batch, M* mask, A* adapters) {
  check_inputs(w, batch, mask != nullptr ? &mask->xi : nullptr);
  if (adapters != nullptr) validate_attachment(w, *adapters);
  const ModelConfig& c = w.config;
  const std::size_t b = batch.batch_size;
  const std::size_t s = batch.seq_len;

  std::vector<std::size_t> positions(b * s);
  for (std::size_t i = 0; i < b * s; ++i) positions[i] = i % s;
  const std::vector<std::size_t> types(b * s, 0);

  Var x = ops::add(g, ops::embedding(g, g.bind(w.token_embedding), batch.token_ids),
                   ops::embedding(g, g.bind(w.position_embedding), positions));
  x = ops::add(g, x, ops::embedding(g, g.bind(w.type_embedding), types));
  x = ops::layernorm(g, x, g.bind(w.embedding_norm.gamma), g.bind(w.embedding_norm.beta),
                     c.layernorm_eps);

  const SequenceLayout layout = make_layout(batch);
  Var mask_var;
  if (mask != nullptr) mask_var = g.bind(mask->xi);
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    x = encoder_block(g, w.blocks[l], l, x, layout, c, mask != nullptr ? &mask_var : nullptr, adapters);
  }

  std::vector<std::size_t> first(b);
  for (std::size_t i = 0; i < b; ++i) first[i] = i * s;
  Var pooled = ops::select_rows(g, x, first);
  pooled = ops::tanh(g, ops::add_bias(g, ops::matmul(g, pooled, g.bind(w.pooler.weight)),
                                      g.bind(w.pooler.bias)));
  return ops::add_bias(g, ops::matmul(g, pooled, g.bind(w.classifier.weight)),
                       g.bind(w.classifier.bias));
}

}  // namespace

Var forward(Graph& g, TransformerWeights& w, const TokenBatch& batch, HeadMask* mask,
            LoraAdapters* adapters) {
  return forward_impl(g, w, batch, mask, adapters);
}

Var forward(Graph& g, const TransformerWeights& w, const TokenBatch& batch, const HeadMask* mask,
            const LoraAdapters* adapters) {
  return forward_impl(g, w, batch, mask, adapters);
}

Var forward_masked(Graph& g, const TransformerWeights& w, const TokenBatch& batch, HeadMask& mask) {
  const LoraAdapters* none = nullptr;
  return forward_impl(g, w, batch, &mask, none);
}

Var attention_head(Graph& g, const TransformerWeights& w, std::size_t layer, std::size_t head,
                   Var hidden, const SequenceLayout& layout, const HeadMask* mask) {
  const ModelConfig& c = w.config;
  if (layer >= c.num_layers) {
    throw IndexError("attention_head: layer " + std::to_string(layer) + " out of range");
  }
  if (head >= c.num_heads) {
    throw IndexError("attention_head: head " + std::to_string(head) + " out of range");
  }
  const EncoderBlock& block = w.blocks[layer];
  std::size_t slot = block.heads.size();
  for (std::size_t s = 0; s < block.heads.size(); ++s) {
    if (block.heads[s] == head) slot = s;
  }
  if (slot == block.heads.size()) {
    throw IndexError("attention_head: head " + std::to_string(head) + " of layer " +
                     std::to_string(layer) + " has been pruned");
  }
  const LoraPair* none = nullptr;
  Var q = project(g, hidden, block.query, none, 1.0);
  Var k = project(g, hidden, block.key, none, 1.0);
  Var v = project(g, hidden, block.value, none, 1.0);
  Var h = head_attention(g, q, k, v, slot, c.head_dim, layout);
  if (mask != nullptr) h = ops::scale_by_entry(g, h, g.view(mask->xi), layer * c.num_heads + head);
  return h;
}

Tensor infer_logits(const TransformerWeights& w, const TokenBatch& batch, const HeadMask* mask,
                    const LoraAdapters* adapters) {
  Graph g(Graph::Mode::kNoGrad);
  return g.to_tensor(forward(g, w, batch, mask, adapters));
}

std::vector<std::size_t> argmax_rows(const Tensor& logits) {
  std::vector<std::size_t> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < logits.cols(); ++c) {
      if (logits.at(r, c) > logits.at(r, best)) best = c;
    }
    out[r] = best;
  }
  return out;
}

// ---------------------------------------------------------------------------
// TokenBatch

std::size_t TokenBatch::token_count() const {
  std::size_t n = 0;
  for (auto m : attention_mask) n += m;
  return n;
}

void TokenBatch::validate() const {
  const std::size_t n = batch_size * seq_len;
  if (batch_size == 0 || seq_len == 0) throw InputError("batch must contain at least one token");
  if (token_ids.size() != n || attention_mask.size() != n) {
    throw InputError("batch token/mask arrays do not match [" + std::to_string(batch_size) + ", " +
                     std::to_string(seq_len) + "]");
  }
  if (!labels.empty() && labels.size() != batch_size) {
    throw InputError("batch has " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(batch_size) + " rows");
  }
  for (std::size_t i = 0; i < batch_size; ++i) {
    bool in_prefix = true;
    for (std::size_t j = 0; j < seq_len; ++j) {
      const auto m = attention_mask[i * seq_len + j];
      if (m > 1) throw InputError("attention mask entries must be 0 or 1");
      if (m == 1 && !in_prefix) throw InputError("attention mask must be a prefix (right padding)");
      if (m == 0) in_prefix = false;
    }
    if (attention_mask[i * seq_len] == 0) throw InputError("every sequence needs at least one token");
  }
}

}  // namespace palab
