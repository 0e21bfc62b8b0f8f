// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "physformer/ops.hpp"

namespace physformer {

struct Conv3dParams {
  Var weight;  // [Cout, Cin (or 1 when depthwise), kT, kH, kW]
  Var bias;    // [Cout] or undefined
  Triple stride{1, 1, 1};
  Triple padding{0, 0, 0};
  bool depthwise = false;
};

/// Temporal difference convolution: a 3x3x3 convolution minus theta times
/// the centre value scaled by the weight mass of the two adjacent frames.
struct TdcParams {
  Conv3dParams conv;
  double theta = 0.7;
};

Var conv3d(const Var& x, const Conv3dParams& p);
Var tdc(const Var& x, const TdcParams& p);

/// Nearest-neighbour repetition along T followed by `conv` (a 3x1x1
/// temporal convolution in the predictor head).
Var upsample_temporal(const Var& x, std::size_t factor, const Conv3dParams& conv);

/// Padding that keeps extents at stride 1: (k-1)/2 per axis.
Triple same_padding(const Shape& weight_shape);

}  // namespace physformer
