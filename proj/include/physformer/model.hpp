// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "physformer/parameters.hpp"
#include "physformer/tdc.hpp"

namespace physformer {

enum class AttentionKind { TemporalDifference, Vanilla, None };
enum class FeedForwardKind { SpatioTemporal, Vanilla };

struct ArchConfig {
  std::size_t blocks = 12;   // N
  std::size_t heads = 4;     // h
  std::size_t dim = 96;      // D
  std::size_t ff_dim = 144;  // D'
  double theta = 0.7;
  double tau = 2.0;
  Triple tube{4, 4, 4};
  Triple input{160, 128, 128};
  bool stem = true;
  AttentionKind attention = AttentionKind::TemporalDifference;
  FeedForwardKind feed_forward = FeedForwardKind::SpatioTemporal;

  std::size_t head_dim() const { return dim / heads; }
  /// Token grid (T', H', W') for an input of the given extents.
  Triple token_grid(const Triple& thw) const;
  Triple token_grid() const { return token_grid(input); }
  void validate() const;
};

/// Desk-scale configuration used by the end-to-end harness.
ArchConfig toy_arch();

/// Per-forward capture of intermediate results for inspection.
struct ForwardTrace {
  std::vector<Tensor> attention;  // per block: [B, heads, M, M]
  Triple token_grid{0, 0, 0};
};

class PhysFormer {
 public:
  PhysFormer(ArchConfig cfg, std::uint64_t seed);
  /// Wraps existing state (e.g. loaded from a checkpoint).
  PhysFormer(ArchConfig cfg, ParameterStore params);

  const ArchConfig& config() const { return cfg_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  /// [B,3,T,H,W] video -> [B,T] signal.
  Var forward(Session& s, const Var& video, ForwardTrace* trace = nullptr) const;

  Var stem_forward(Session& s, const Var& video) const;
  Var tube_tokenize(const Var& features) const;
  Var td_mhsa(Session& s, std::size_t block, const Var& tokens, ForwardTrace* trace = nullptr) const;
  Var st_ff(Session& s, std::size_t block, const Var& tokens) const;
  Var predictor_head(Session& s, const Var& tokens) const;

  /// Softmax attention [M, M] of one head in one block for batch item 0.
  Tensor export_attention(const Tensor& video, std::size_t block, std::size_t head);

  /// Temporal upsampling factors applied by the head (product == tube T).
  std::vector<std::size_t> upsample_stages() const;

 private:
  void init_params(std::uint64_t seed);

  ArchConfig cfg_;
  ParameterStore params_;
};

std::string block_prefix(std::size_t block);

}  // namespace physformer
