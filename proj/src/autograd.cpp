// SPDX-License-Identifier: Apache-2.0
#include "physformer/autograd.hpp"

#include <stdexcept>
#include <unordered_map>

namespace physformer {

Tensor& Node::grad_buffer() {
  if (grad.empty()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Var make_result(const char* op, Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward) {
  Var out;
  out.node_ = std::make_shared<Node>();
  out.node_->value = std::move(value);
  out.node_->op = op;
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  if (needs) {
    out.node_->requires_grad = true;
    out.node_->backward = std::move(backward);
    out.node_->parents.reserve(parents.size());
    for (auto& p : parents) out.node_->parents.push_back(p.node_ptr());
  }
  return out;
}

Graph Graph::trace(const Var& root) {
  Graph g;
  g.root_ = root.node_ptr();
  if (!root.requires_grad()) return g;

  std::unordered_map<const Node*, std::size_t> index;
  // Iterative post-order DFS: a node is emitted after all of its parents.
  struct Frame {
    Node* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack{{root.node(), 0}};
  std::unordered_map<const Node*, bool> on_stack{{root.node(), true}};
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      Node* p = f.node->parents[f.next_parent++].get();
      if (!p->requires_grad || index.count(p) || on_stack[p]) continue;
      on_stack[p] = true;
      stack.push_back({p, 0});
      continue;
    }
    Node* done = f.node;
    stack.pop_back();
    index[done] = g.nodes_.size();
    g.nodes_.push_back(done);
    std::vector<std::size_t> pidx;
    for (const auto& p : done->parents)
      if (p->requires_grad) pidx.push_back(index.at(p.get()));
    g.parents_.push_back(std::move(pidx));
  }
  return g;
}

void Graph::run_backward() {
  if (nodes_.empty()) return;
  Node* root = nodes_.back();
  Tensor& seed = root->grad_buffer();
  seed.fill(1.0);
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node* n = nodes_[i];
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  for (Node* n : nodes_) {
    if (!n->backward) continue;  // leaves keep their gradients
    n->backward = nullptr;
    n->parents.clear();
    n->grad = Tensor();
  }
  nodes_.clear();
  parents_.clear();
}

void backward(const Var& loss) {
  if (!loss.defined() || loss.value().numel() != 1)
    throw std::invalid_argument("backward requires a scalar loss, got " +
                                (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  Graph g = Graph::trace(loss);
  g.run_backward();
}

namespace {
thread_local KinkRecorder* g_active_recorder = nullptr;
}

KinkRecorder::KinkRecorder() : previous_(g_active_recorder) { g_active_recorder = this; }
KinkRecorder::~KinkRecorder() { g_active_recorder = previous_; }

void KinkRecorder::mix(std::uint64_t v) {
  hash_ ^= v + 0x9e3779b97f4a7c15ull + (hash_ << 6) + (hash_ >> 2);
}

KinkRecorder* KinkRecorder::active() { return g_active_recorder; }

}  // namespace physformer
