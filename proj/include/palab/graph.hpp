#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "palab/tensor.hpp"

namespace palab {

using NodeId = std::uint32_t;

/// Handle to a value recorded in a Graph.
struct Var {
  NodeId id = 0;
};

enum class OpKind {
  kParameter,
  kConstant,
  kMatmul,
  kBatchedMatmul,
  kBatchedMatmulBt,
  kAdd,
  kAddBias,
  kAddConstant,
  kMul,
  kScale,
  kScaleByEntry,
  kRelu,
  kTanh,
  kSoftmax,
  kLayerNorm,
  kCrossEntropy,
  kEmbedding,
  kSliceCols,
  kConcatCols,
  kSelectRows,
  kSum,
};

const char* op_name(OpKind kind);

/// Tape of one forward pass.
///
/// Nodes are stored in creation order, so every input precedes its consumer
/// and backward() simply walks the tape in reverse. Parameter nodes refer to
/// tensors owned elsewhere; those tensors must outlive the graph and receive
/// their gradients in backward().
class Graph {
 public:
  enum class Mode { kRecord, kNoGrad };

  using BackwardFn = std::function<void(Graph&, NodeId self)>;

  struct Node {
    OpKind kind;
    std::vector<NodeId> inputs;
    Shape shape;
    std::vector<double> value;        // empty for parameter/view nodes
    const Tensor* source = nullptr;   // parameter/view nodes
    Tensor* grad_sink = nullptr;      // parameter nodes that collect gradients
    bool needs_grad = false;
    std::vector<double> adjoint;      // allocated on first use in backward()
    BackwardFn backward;
  };

  explicit Graph(Mode mode = Mode::kRecord) : mode_(mode) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Mode mode() const { return mode_; }
  bool recording() const { return mode_ == Mode::kRecord; }

  // Leaf bound to an externally owned tensor. Gradients reach t.grad() when
  // the graph records and t.requires_grad() is set.
  Var parameter(Tensor& t);
  // Read-only leaf; never receives gradients.
  Var view(const Tensor& t);
  Var bind(Tensor& t) { return parameter(t); }
  Var bind(const Tensor& t) { return view(t); }
  // Leaf that owns its value.
  Var constant(Tensor t);

  const Shape& shape(Var v) const { return nodes_.at(v.id).shape; }
  std::span<const double> value(Var v) const;
  Tensor to_tensor(Var v) const;
  bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_.at(id); }

  // Arithmetic cost of every op recorded so far, in the accounting
  // module's convention (one multiply-accumulate = 2 FLOPs).
  std::uint64_t flops() const { return flops_; }

  // Reverse-mode sweep from a scalar node. Gradients are added to the
  // existing grad buffers of the bound tensors.
  void backward(Var loss);

  // Used by op implementations.
  Var record(OpKind kind, std::vector<NodeId> inputs, Shape shape,
             std::vector<double> value, std::uint64_t flops, BackwardFn backward);
  std::span<double> adjoint(NodeId id);
  std::span<const double> adjoint_of(NodeId self) const { return nodes_[self].adjoint; }

 private:
  Mode mode_;
  std::vector<Node> nodes_;
  std::uint64_t flops_ = 0;
  bool backward_done_ = false;
};

}  // namespace palab
