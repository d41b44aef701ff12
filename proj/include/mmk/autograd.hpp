#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mmk/tensor.hpp"

namespace mmk {

class Graph;
class Gradients;
class Rng;

using NodeId = std::size_t;

enum class OpKind {
  Constant,
  Leaf,
  MatMul,
  Transpose,
  Add,
  Sub,
  Mul,
  Scale,
  AddBias,
  Relu,
  Sigmoid,
  Softmax,
  LayerNorm,
  Embedding,
  EmbeddingBag,
  ConcatCols,
  RepeatRows,
  Attention,
  CrossEntropy,
  Sum,
  Dropout,
};

std::string_view op_name(OpKind kind);

// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
struct Var {
  Graph* graph = nullptr;
  NodeId id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

// Tape of op records in topological order. Ops append nodes; backward()
// walks the tape in exact reverse order, once.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, NodeId)>;

  struct Node {
    OpKind op = OpKind::Constant;
    std::vector<NodeId> inputs;
    Tensor value;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Graph();

  Var constant(Tensor value);
  Var variable(Tensor value);
  // Named trainable leaf. Requesting the same name twice returns the same
  // node, so shared weights accumulate into a single gradient.
  Var parameter(const std::string& name, const Tensor& value);
  bool has_parameter(const std::string& name) const { return named_.count(name) != 0; }

  // Op-implementor API: append a node. `backward` may be empty for ops with
  // no differentiable inputs.
  Var record(OpKind op, std::vector<NodeId> inputs, Tensor value, BackwardFn backward);

  const Node& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }
  bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }

  // Gradient buffer of a node during backward (allocated as zeros on demand).
  Tensor& grad(NodeId id);

  Gradients backward(Var loss);

  void set_check_finite(bool on) { check_finite_ = on; }
  bool check_finite() const { return check_finite_; }

 private:
  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::map<std::string, NodeId> named_;
  bool backward_done_ = false;
  bool check_finite_;
};

// Result of Graph::backward: gradients of every trainable leaf.
class Gradients {
 public:
  const Tensor& of(Var v) const;
  const std::map<std::string, Tensor>& named() const { return named_; }

 private:
  friend class Graph;
  std::unordered_map<NodeId, Tensor> leaves_;
  std::map<std::string, Tensor> named_;
};

// Finite-value checking default: on in debug builds, off in release unless
// enabled here (the CLI exposes --check-finite).
void set_default_check_finite(bool on);
bool default_check_finite();

struct AttentionMask {
  bool causal = false;
  std::vector<bool> key_valid;  // empty: every key valid
};

enum class Reduction { Mean, Sum };

// Differentiable ops. Shapes must match exactly except where noted.
Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
// x[..., n] + bias[n]; the only broadcast the engine supports.
Var add_bias(Var x, Var bias);
Var relu(Var x);
Var sigmoid(Var x);
Var softmax(Var x, int axis = -1);
Var layer_norm(Var x, Var gain, Var bias, double eps);
// Rows of table[V x d] gathered by id -> [ids x d].
Var embedding(Var table, std::span<const std::int32_t> ids);
// sum_i weights[i] * table[ids[i]] -> [1 x d].
Var embedding_bag(Var table, std::span<const std::int32_t> ids, std::span<const double> weights);
Var concat_cols(Var a, Var b);
// [1 x d] repeated to [n x d].
Var repeat_rows(Var row, std::size_t n);
// Multi-head scaled dot-product attention over pre-projected q [Lq x d],
// k, v [Lk x d]; heads are contiguous column slices of width d / n_heads.
Var attention(Var q, Var k, Var v, std::size_t n_heads, const AttentionMask& mask);
// Token-level cross entropy of logits [L x V]; targets equal to `ignore`
// are skipped. Throws ContractError when every target is ignored.
Var cross_entropy(Var logits, std::span<const std::int32_t> targets, std::int32_t ignore,
                  Reduction reduction = Reduction::Mean);
Var sum(Var x);
// Inverted dropout; identity when rate == 0.
Var dropout(Var x, double rate, Rng& rng);

}  // namespace mmk
