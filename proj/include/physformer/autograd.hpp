// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "physformer/tensor.hpp"

namespace physformer {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One recorded primitive. Interior nodes own a closure that reads `grad`
/// and accumulates into the parents' gradient buffers.
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward;

  /// Gradient accumulator, zero-initialised on first use.
  Tensor& grad_buffer();
};

/// Handle to a value in a (possibly unrecorded) computation.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  /// Gradient accumulated by backward(); empty when nothing flowed here.
  const Tensor& grad() const { return node_->grad; }
  bool has_grad() const { return node_ && !node_->grad.empty(); }

  Node* node() const { return node_.get(); }
  const NodePtr& node_ptr() const { return node_; }

 private:
  friend Var make_result(const char*, Tensor, std::vector<Var>, std::function<void(Node&)>);
  NodePtr node_;
};

/// Wraps a primitive's output. The closure and parent links are kept only
/// when some parent requires a gradient.
Var make_result(const char* op, Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward);

/// Topologically ordered view of the recorded nodes reachable from a root.
class Graph {
 public:
  static Graph trace(const Var& root);

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t i) const { return *nodes_[i]; }
  const std::vector<std::size_t>& parents(std::size_t i) const { return parents_[i]; }

  /// Seeds the root gradient with ones and runs every closure once, in
  /// reverse order. Interior nodes are released afterwards.
  void run_backward();

 private:
  std::vector<Node*> nodes_;
  std::vector<std::vector<std::size_t>> parents_;
  NodePtr root_;
};

/// Reverse-mode sweep from a scalar loss.
void backward(const Var& loss);

/// Hash of branch decisions (ReLU signs, max-pool winners) taken while it is
/// installed. Finite-difference checks compare the patterns at x±eps to skip
/// coordinates that straddle a kink.
class KinkRecorder {
 public:
  KinkRecorder();
  ~KinkRecorder();
  KinkRecorder(const KinkRecorder&) = delete;
  KinkRecorder& operator=(const KinkRecorder&) = delete;

  std::uint64_t signature() const { return hash_; }
  void mix(std::uint64_t v);

  static KinkRecorder* active();

 private:
  std::uint64_t hash_ = 1469598103934665603ull;
  KinkRecorder* previous_;
};

}  // namespace physformer
