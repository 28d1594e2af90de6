#include "palab/graph.hpp"

#include <limits>

#include "palab/errors.hpp"

namespace palab {

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kParameter: return "parameter";
    case OpKind::kConstant: return "constant";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kBatchedMatmul: return "batched_matmul";
    case OpKind::kBatchedMatmulBt: return "batched_matmul_bt";
    case OpKind::kAdd: return "add";
    case OpKind::kAddBias: return "add_bias";
    case OpKind::kAddConstant: return "add_constant";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kScaleByEntry: return "scale_by_entry";
    case OpKind::kRelu: return "relu";
    case OpKind::kTanh: return "tanh";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kLayerNorm: return "layernorm";
    case OpKind::kCrossEntropy: return "cross_entropy";
    case OpKind::kEmbedding: return "embedding";
    case OpKind::kSliceCols: return "slice_cols";
    case OpKind::kConcatCols: return "concat_cols";
    case OpKind::kSelectRows: return "select_rows";
    case OpKind::kSum: return "sum";
  }
  return "unknown";
}

Var Graph::parameter(Tensor& t) {
  if (nodes_.size() >= std::numeric_limits<NodeId>::max()) throw ContractError("graph too large");
  Node n;
  n.kind = OpKind::kParameter;
  n.shape = t.shape();
  n.source = &t;
  n.needs_grad = recording() && t.requires_grad();
  n.grad_sink = n.needs_grad ? &t : nullptr;
  nodes_.push_back(std::move(n));
  return Var{static_cast<NodeId>(nodes_.size() - 1)};
}

Var Graph::view(const Tensor& t) {
  Node n;
  n.kind = OpKind::kParameter;
  n.shape = t.shape();
  n.source = &t;
  nodes_.push_back(std::move(n));
  return Var{static_cast<NodeId>(nodes_.size() - 1)};
}

Var Graph::constant(Tensor t) {
  Node n;
  n.kind = OpKind::kConstant;
  n.shape = t.shape();
  n.value.assign(t.data().begin(), t.data().end());
  nodes_.push_back(std::move(n));
  return Var{static_cast<NodeId>(nodes_.size() - 1)};
}

std::span<const double> Graph::value(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (n.source != nullptr) return n.source->data();
  return n.value;
}

Tensor Graph::to_tensor(Var v) const {
  auto values = value(v);
  return Tensor(shape(v), std::vector<double>(values.begin(), values.end()));
}

Var Graph::record(OpKind kind, std::vector<NodeId> inputs, Shape shape,
                  std::vector<double> value, std::uint64_t flops,
                  BackwardFn backward) {
  if (shape_size(shape) != value.size()) {
    throw ShapeError(std::string(op_name(kind)) + ": produced " + std::to_string(value.size()) +
                     " values for shape " + shape_string(shape));
  }
  Node n;
  n.kind = kind;
  n.shape = std::move(shape);
  n.value = std::move(value);
  if (recording()) {
    for (NodeId in : inputs) n.needs_grad = n.needs_grad || nodes_.at(in).needs_grad;
  }
  if (n.needs_grad) n.backward = std::move(backward);
  n.inputs = std::move(inputs);
  flops_ += flops;
  nodes_.push_back(std::move(n));
  return Var{static_cast<NodeId>(nodes_.size() - 1)};
}

std::span<double> Graph::adjoint(NodeId id) {
  Node& n = nodes_.at(id);
  if (n.adjoint.empty()) n.adjoint.assign(shape_size(n.shape), 0.0);
  return n.adjoint;
}

void Graph::backward(Var loss) {
  if (loss.id >= nodes_.size()) throw ContractError("backward: variable is not part of this graph");
  if (shape_size(nodes_[loss.id].shape) != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        shape_string(nodes_[loss.id].shape));
  }
  if (!recording()) throw ContractError("backward: graph was built without gradient recording");
  if (backward_done_) throw ContractError("backward: graph already consumed");
  backward_done_ = true;
  if (!nodes_[loss.id].needs_grad) return;

  adjoint(loss.id)[0] = 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.adjoint.empty()) continue;
    if (n.backward) n.backward(*this, static_cast<NodeId>(i));
    if (n.grad_sink != nullptr) n.grad_sink->accumulate_grad(n.adjoint);
  }
}

}  // namespace palab
