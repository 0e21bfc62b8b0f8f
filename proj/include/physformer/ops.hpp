// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <vector>

#include "physformer/autograd.hpp"

// Differentiable primitives. Elementwise binaries require identical shapes;
// the only implicit broadcast is the per-channel pattern of add_channel.
namespace physformer {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
/// x is [B, C, ...], bias is [C].
Var add_channel(const Var& x, const Var& bias);

Var relu(const Var& a);
Var elu(const Var& a, double alpha = 1.0);
Var exp(const Var& a);
Var log(const Var& a);
Var power(const Var& a, double p);

Var sum(const Var& a);
Var mean(const Var& a);
/// Reduces the listed axes; the result drops them unless keepdims.
Var sum_axes(const Var& a, std::vector<std::size_t> axes, bool keepdims = false);
Var mean_axes(const Var& a, std::vector<std::size_t> axes, bool keepdims = false);

Var reshape(const Var& a, Shape shape);
Var permute(const Var& a, std::vector<std::size_t> perm);
Var transpose(const Var& a, std::size_t axis0, std::size_t axis1);
Var concat(const std::vector<Var>& parts, std::size_t axis);
Var slice(const Var& a, std::size_t axis, std::size_t start, std::size_t length);

/// [M,K]x[K,N] or batched [B,M,K]x[B,K,N].
Var matmul(const Var& a, const Var& b);

Var softmax(const Var& a, std::size_t axis);
Var log_softmax(const Var& a, std::size_t axis);

/// Normalises over `axis`; gamma/beta have that axis' extent.
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, std::size_t axis, double eps = 1e-5);

struct BatchNormStats {
  Tensor running_mean;
  Tensor running_var;
};

struct BatchNormOptions {
  bool training = true;
  double momentum = 0.9;  // weight kept on the running estimate
  double eps = 1e-5;
};

/// x is [B, C, ...]; statistics are per channel over every other axis.
/// Training mode normalises with batch statistics and updates `stats`.
Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormStats& stats,
               const BatchNormOptions& opt);

using Triple = std::array<std::size_t, 3>;

struct ConvGeometry {
  Triple stride{1, 1, 1};
  Triple padding{0, 0, 0};
  std::size_t groups = 1;
};

/// Cross-correlation. x [B,Cin,T,H,W], w [Cout,Cin/groups,kT,kH,kW],
/// bias [Cout] or undefined.
Var conv3d(const Var& x, const Var& w, const Var& bias, const ConvGeometry& geom);

/// Folds the temporal-difference term into a 3x3x3 kernel: the centre tap
/// loses theta times the summed weight of the 18 adjacent-frame taps.
Var tdc_kernel(const Var& w, double theta);

/// 1x2x2 max pooling over [B,C,T,H,W]; H and W must be even.
Var max_pool_spatial(const Var& x);
/// Non-overlapping average pooling with kernel == stride; trailing cells
/// that do not fill a window are dropped.
Var avg_pool3d(const Var& x, const Triple& kernel);
/// Nearest-neighbour repetition along T of [B,C,T,H,W].
Var repeat_temporal(const Var& x, std::size_t factor);

}  // namespace physformer
