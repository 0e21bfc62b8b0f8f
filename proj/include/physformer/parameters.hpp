// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "physformer/ops.hpp"

namespace physformer {

/// Named model state in insertion order. Buffers (batch-norm running
/// statistics) are saved with the parameters but never receive gradients.
class ParameterStore {
 public:
  void add(const std::string& name, Tensor value, bool trainable = true);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor& value(const std::string& name);
  const Tensor& value(const std::string& name) const;
  bool trainable(const std::string& name) const;

  const std::vector<std::string>& names() const { return names_; }
  std::vector<std::string> trainable_names() const;
  std::size_t trainable_count() const;

 private:
  struct Entry {
    Tensor value;
    bool trainable;
  };
  std::vector<std::string> names_;
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// One forward (and optional backward) pass over a ParameterStore. Each
/// parameter becomes a leaf Var on first use; in training mode the leaves
/// require gradients and batch norm updates the store's running statistics.
class Session {
 public:
  Session(ParameterStore& store, bool training);

  bool training() const { return training_; }
  Var param(const std::string& name);

  /// Substitutes a caller-owned Var for a parameter (used by gradient checks).
  void bind(const std::string& name, Var v);

  Var batch_norm(const std::string& prefix, const Var& x);

  /// Gradients of every trainable leaf touched in this session, after backward.
  std::map<std::string, Tensor> gradients() const;

 private:
  ParameterStore& store_;
  bool training_;
  std::unordered_map<std::string, Var> leaves_;
};

}  // namespace physformer
