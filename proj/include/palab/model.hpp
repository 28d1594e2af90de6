#pragma once

#include <concepts>
#include <cstddef>
#include <cstdint>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"
#include "palab/batch.hpp"
#include "palab/graph.hpp"
#include "palab/tensor.hpp"

namespace palab {

struct LoraAdapters;

struct ModelConfig {
  std::size_t num_layers = 4;
  std::size_t num_heads = 4;
  std::size_t hidden = 64;
  std::size_t head_dim = 16;
  std::size_t ffn_dim = 256;
  std::size_t vocab_size = 16;
  std::size_t max_positions = 32;
  std::size_t type_vocab = 2;
  // Zero means an encoder without a classification head (pooler output only).
  std::size_t num_classes = 2;
  double layernorm_eps = 1e-12;

  static ModelConfig toy();
  // bert-base geometry; counts exclude any task head.
  static ModelConfig reference();

  void validate() const;
  std::size_t total_heads() const { return num_layers * num_heads; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Weight matrices are stored [in, out] and applied as x * W + b.
struct Linear {
  Tensor weight;
  Tensor bias;
};

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;
};

/// One post-norm encoder block. `heads` lists the original indices of the
/// heads still present, ascending; slot s of the Q/K/V column blocks and of
/// the W^O row blocks belongs to head heads[s].
struct EncoderBlock {
  std::vector<std::size_t> heads;
  Linear query;
  Linear key;
  Linear value;
  Linear output;
  LayerNormParams attention_norm;
  Linear ffn_up;
  Linear ffn_down;
  LayerNormParams ffn_norm;
};

struct TransformerWeights {
  ModelConfig config;
  Tensor token_embedding;
  Tensor position_embedding;
  Tensor type_embedding;
  LayerNormParams embedding_norm;
  std::vector<EncoderBlock> blocks;
  Linear pooler;
  Linear classifier;
  // Number of adapter merges folded into these weights.
  std::size_t merge_count = 0;

  bool is_pruned() const;
  std::size_t kept_heads() const;
};

enum class ParamRole { kEmbedding, kAttention, kFfn, kLayerNorm, kPooler, kClassifier };

const char* role_name(ParamRole role);

/// Visits every parameter tensor in a fixed order with its dotted name.
template <class Weights, class Fn>
  requires std::same_as<std::remove_const_t<Weights>, TransformerWeights>
void for_each_parameter(Weights& w, Fn&& fn) {
  fn(std::string("embeddings.token"), ParamRole::kEmbedding, w.token_embedding);
  fn(std::string("embeddings.position"), ParamRole::kEmbedding, w.position_embedding);
  fn(std::string("embeddings.type"), ParamRole::kEmbedding, w.type_embedding);
  fn(std::string("embeddings.norm.gamma"), ParamRole::kLayerNorm, w.embedding_norm.gamma);
  fn(std::string("embeddings.norm.beta"), ParamRole::kLayerNorm, w.embedding_norm.beta);
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    auto& b = w.blocks[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    fn(p + "attention.query.weight", ParamRole::kAttention, b.query.weight);
    fn(p + "attention.query.bias", ParamRole::kAttention, b.query.bias);
    fn(p + "attention.key.weight", ParamRole::kAttention, b.key.weight);
    fn(p + "attention.key.bias", ParamRole::kAttention, b.key.bias);
    fn(p + "attention.value.weight", ParamRole::kAttention, b.value.weight);
    fn(p + "attention.value.bias", ParamRole::kAttention, b.value.bias);
    fn(p + "attention.output.weight", ParamRole::kAttention, b.output.weight);
    fn(p + "attention.output.bias", ParamRole::kAttention, b.output.bias);
    fn(p + "attention.norm.gamma", ParamRole::kLayerNorm, b.attention_norm.gamma);
    fn(p + "attention.norm.beta", ParamRole::kLayerNorm, b.attention_norm.beta);
    fn(p + "ffn.up.weight", ParamRole::kFfn, b.ffn_up.weight);
    fn(p + "ffn.up.bias", ParamRole::kFfn, b.ffn_up.bias);
    fn(p + "ffn.down.weight", ParamRole::kFfn, b.ffn_down.weight);
    fn(p + "ffn.down.bias", ParamRole::kFfn, b.ffn_down.bias);
    fn(p + "ffn.norm.gamma", ParamRole::kLayerNorm, b.ffn_norm.gamma);
    fn(p + "ffn.norm.beta", ParamRole::kLayerNorm, b.ffn_norm.beta);
  }
  fn(std::string("pooler.weight"), ParamRole::kPooler, w.pooler.weight);
  fn(std::string("pooler.bias"), ParamRole::kPooler, w.pooler.bias);
  fn(std::string("classifier.weight"), ParamRole::kClassifier, w.classifier.weight);
  fn(std::string("classifier.bias"), ParamRole::kClassifier, w.classifier.bias);
}

// Normal(0, 0.02) matrices and embeddings, zero biases, unit LayerNorm gains.
TransformerWeights init_weights(const ModelConfig& config, std::uint64_t seed);

// Checks every tensor shape against the config and per-block head lists.
void validate_structure(const TransformerWeights& w);

std::size_t parameter_count(const TransformerWeights& w);
std::uint64_t weights_digest(const TransformerWeights& w);

/// Per-head multiplicative gates, shape [num_layers, num_heads].
struct HeadMask {
  Tensor xi;

  static HeadMask ones(const ModelConfig& config);
  double at(std::size_t layer, std::size_t head) const { return xi.at(layer, head); }
  void set(std::size_t layer, std::size_t head, double v) { xi.at(layer, head) = v; }
};

/// Batch geometry shared by every attention head of a forward pass.
struct SequenceLayout {
  std::size_t batches = 0;
  std::size_t seq_len = 0;
  Tensor key_bias;  // [batches * seq_len, seq_len]; -1e9 on padded keys, else 0
};

inline constexpr double kPaddedKeyBias = -1e9;

SequenceLayout make_layout(const TokenBatch& batch);

// Logits [batch_size, num_classes]. Mutable weights/mask/adapters bind as
// gradient-carrying parameters; const ones are read-only views.
Var forward(Graph& g, TransformerWeights& w, const TokenBatch& batch,
            HeadMask* mask = nullptr, LoraAdapters* adapters = nullptr);
Var forward(Graph& g, const TransformerWeights& w, const TokenBatch& batch,
            const HeadMask* mask = nullptr, const LoraAdapters* adapters = nullptr);

// Read-only weights with a gradient-carrying head mask (importance sweeps).
Var forward_masked(Graph& g, const TransformerWeights& w, const TokenBatch& batch, HeadMask& mask);

// Output of one head (original index `head`) of block `layer` for hidden
// states [batches*seq_len, d]: softmax(Q_i K_iᵀ / sqrt(d_h)) V_i scaled by
// the mask entry when a mask is given.
Var attention_head(Graph& g, const TransformerWeights& w, std::size_t layer, std::size_t head,
                   Var hidden, const SequenceLayout& layout, const HeadMask* mask = nullptr);

// Forward without gradient recording.
Tensor infer_logits(const TransformerWeights& w, const TokenBatch& batch,
                    const HeadMask* mask = nullptr, const LoraAdapters* adapters = nullptr);

// Row-wise argmax, lowest index on ties.
std::vector<std::size_t> argmax_rows(const Tensor& logits);

}  // namespace palab
