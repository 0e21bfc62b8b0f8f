// SPDX-License-Identifier: Apache-2.0
#include "physformer/parameters.hpp"

#include <stdexcept>

namespace physformer {

void ParameterStore::add(const std::string& name, Tensor value, bool trainable) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name " + name);
  index_[name] = entries_.size();
  names_.push_back(name);
  entries_.push_back({std::move(value), trainable});
}

Tensor& ParameterStore::value(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
  return entries_[it->second].value;
}

const Tensor& ParameterStore::value(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
  return entries_[it->second].value;
}

bool ParameterStore::trainable(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter " + name);
  return entries_[it->second].trainable;
}

std::vector<std::string> ParameterStore::trainable_names() const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (entries_[i].trainable) out.push_back(names_[i]);
  return out;
}

std::size_t ParameterStore::trainable_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_)
    if (e.trainable) n += e.value.numel();
  return n;
}

Session::Session(ParameterStore& store, bool training) : store_(store), training_(training) {}

Var Session::param(const std::string& name) {
  auto it = leaves_.find(name);
  if (it != leaves_.end()) return it->second;
  Var v(store_.value(name), training_ && store_.trainable(name));
  leaves_.emplace(name, v);
  return v;
}

void Session::bind(const std::string& name, Var v) {
  if (!store_.contains(name)) throw std::out_of_range("unknown parameter " + name);
  leaves_[name] = std::move(v);
}

Var Session::batch_norm(const std::string& prefix, const Var& x) {
  BatchNormStats stats{store_.value(prefix + ".running_mean"), store_.value(prefix + ".running_var")};
  BatchNormOptions opt;
  opt.training = training_;
  Var y = physformer::batch_norm(x, param(prefix + ".gamma"), param(prefix + ".beta"), stats, opt);
  if (training_) {
    store_.value(prefix + ".running_mean") = std::move(stats.running_mean);
    store_.value(prefix + ".running_var") = std::move(stats.running_var);
  }
  return y;
}

std::map<std::string, Tensor> Session::gradients() const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, v] : leaves_)
    if (v.has_grad()) out.emplace(name, v.grad());
  return out;
}

}  // namespace physformer
