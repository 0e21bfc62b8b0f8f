// SPDX-License-Identifier: Apache-2.0
#include "physformer/tdc.hpp"

#include <stdexcept>

namespace physformer {

Triple same_padding(const Shape& ws) {
  if (ws.size() != 5) throw std::invalid_argument("same_padding: expected rank-5 weight, got " + shape_str(ws));
  return {(ws[2] - 1) / 2, (ws[3] - 1) / 2, (ws[4] - 1) / 2};
}

Var conv3d(const Var& x, const Conv3dParams& p) {
  ConvGeometry g;
  g.stride = p.stride;
  g.padding = p.padding;
  if (p.depthwise) {
    if (x.shape().size() != 5 || p.weight.shape()[0] != x.shape()[1] || p.weight.shape()[1] != 1)
      throw std::invalid_argument("depthwise conv3d: weight " + shape_str(p.weight.shape()) +
                                  " does not match input " + shape_str(x.shape()));
    g.groups = x.shape()[1];
  }
  return conv3d(x, p.weight, p.bias, g);
}

Var tdc(const Var& x, const TdcParams& p) {
  if (p.theta < 0.0 || p.theta > 1.0) throw std::invalid_argument("tdc: theta must lie in [0, 1]");
  Conv3dParams folded = p.conv;
  folded.weight = tdc_kernel(p.conv.weight, p.theta);
  return conv3d(x, folded);
}

Var upsample_temporal(const Var& x, std::size_t factor, const Conv3dParams& conv) {
  if (factor < 1) throw std::invalid_argument("upsample_temporal: factor must be >= 1");
  return conv3d(repeat_temporal(x, factor), conv);
}

}  // namespace physformer
