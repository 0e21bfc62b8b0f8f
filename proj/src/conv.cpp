// SPDX-License-Identifier: Apache-2.0
#include <Eigen/Core>
#include <algorithm>
#include <stdexcept>

#include "physformer/ops.hpp"

namespace physformer {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Stride = Eigen::OuterStride<>;
using MapStrided = Eigen::Map<RowMat, 0, Stride>;
using ConstMapStrided = Eigen::Map<const RowMat, 0, Stride>;

// Column buffers are built a few output frames at a time to bound memory.
constexpr std::size_t kMaxColumnElements = std::size_t{1} << 22;

struct ConvPlan {
  std::size_t B, Cin, T, H, W;
  std::size_t Cout, cin_g, cout_g, groups;
  std::size_t kT, kH, kW;
  Triple stride, pad;
  std::size_t oT, oH, oW;
  std::size_t K() const { return cin_g * kT * kH * kW; }
  std::size_t plane() const { return oH * oW; }
  std::size_t N() const { return oT * oH * oW; }
  std::size_t frames_per_chunk() const {
    return std::max<std::size_t>(1, kMaxColumnElements / std::max<std::size_t>(1, K() * plane()));
  }
};

std::size_t out_extent(std::size_t ext, std::size_t pad, std::size_t k, std::size_t stride, const char* axis,
                       const Shape& xs, const Shape& ws) {
  if (stride == 0) throw std::invalid_argument("conv3d: stride must be positive");
  if (ext + 2 * pad < k)
    throw std::invalid_argument(std::string("conv3d: zero-extent output along ") + axis + " for input " +
                                shape_str(xs) + " and kernel " + shape_str(ws));
  return (ext + 2 * pad - k) / stride + 1;
}

ConvPlan make_plan(const Shape& xs, const Shape& ws, const ConvGeometry& g) {
  if (xs.size() != 5 || ws.size() != 5)
    throw std::invalid_argument("conv3d: expected rank-5 input and weight, got " + shape_str(xs) + " and " +
                                shape_str(ws));
  ConvPlan p{};
  p.B = xs[0], p.Cin = xs[1], p.T = xs[2], p.H = xs[3], p.W = xs[4];
  p.Cout = ws[0], p.cin_g = ws[1], p.kT = ws[2], p.kH = ws[3], p.kW = ws[4];
  p.groups = g.groups;
  if (p.groups == 0 || p.Cin % p.groups || p.Cout % p.groups || p.cin_g * p.groups != p.Cin)
    throw std::invalid_argument("conv3d: channel mismatch between input " + shape_str(xs) + " and weight " +
                                shape_str(ws) + " with groups=" + std::to_string(g.groups));
  p.cout_g = p.Cout / p.groups;
  p.stride = g.stride;
  p.pad = g.padding;
  p.oT = out_extent(p.T, p.pad[0], p.kT, p.stride[0], "T", xs, ws);
  p.oH = out_extent(p.H, p.pad[1], p.kH, p.stride[1], "H", xs, ws);
  p.oW = out_extent(p.W, p.pad[2], p.kW, p.stride[2], "W", xs, ws);
  return p;
}

// cols[(c,kt,kh,kw), (ot-t0, oh, ow)] for channels of one group and output
// frames [t0, t0+nt).
void im2col(const ConvPlan& p, const double* x, std::size_t t0, std::size_t nt, double* cols) {
  const std::size_t ncols = nt * p.plane();
  std::size_t row = 0;
  for (std::size_t c = 0; c < p.cin_g; ++c)
    for (std::size_t kt = 0; kt < p.kT; ++kt)
      for (std::size_t kh = 0; kh < p.kH; ++kh)
        for (std::size_t kw = 0; kw < p.kW; ++kw, ++row) {
          double* dst = cols + row * ncols;
          for (std::size_t ot = 0; ot < nt; ++ot) {
            const long it = static_cast<long>((t0 + ot) * p.stride[0] + kt) - static_cast<long>(p.pad[0]);
            double* dplane = dst + ot * p.plane();
            if (it < 0 || it >= static_cast<long>(p.T)) {
              std::fill_n(dplane, p.plane(), 0.0);
              continue;
            }
            const double* src_t = x + (c * p.T + static_cast<std::size_t>(it)) * p.H * p.W;
            for (std::size_t oh = 0; oh < p.oH; ++oh) {
              const long ih = static_cast<long>(oh * p.stride[1] + kh) - static_cast<long>(p.pad[1]);
              double* drow = dplane + oh * p.oW;
              if (ih < 0 || ih >= static_cast<long>(p.H)) {
                std::fill_n(drow, p.oW, 0.0);
                continue;
              }
              const double* srow = src_t + static_cast<std::size_t>(ih) * p.W;
              for (std::size_t ow = 0; ow < p.oW; ++ow) {
                const long iw = static_cast<long>(ow * p.stride[2] + kw) - static_cast<long>(p.pad[2]);
                drow[ow] = (iw < 0 || iw >= static_cast<long>(p.W)) ? 0.0 : srow[iw];
              }
            }
          }
        }
}

void col2im(const ConvPlan& p, const double* cols, std::size_t t0, std::size_t nt, double* dx) {
  const std::size_t ncols = nt * p.plane();
  std::size_t row = 0;
  for (std::size_t c = 0; c < p.cin_g; ++c)
    for (std::size_t kt = 0; kt < p.kT; ++kt)
      for (std::size_t kh = 0; kh < p.kH; ++kh)
        for (std::size_t kw = 0; kw < p.kW; ++kw, ++row) {
          const double* src = cols + row * ncols;
          for (std::size_t ot = 0; ot < nt; ++ot) {
            const long it = static_cast<long>((t0 + ot) * p.stride[0] + kt) - static_cast<long>(p.pad[0]);
            if (it < 0 || it >= static_cast<long>(p.T)) continue;
            const double* splane = src + ot * p.plane();
            double* dst_t = dx + (c * p.T + static_cast<std::size_t>(it)) * p.H * p.W;
            for (std::size_t oh = 0; oh < p.oH; ++oh) {
              const long ih = static_cast<long>(oh * p.stride[1] + kh) - static_cast<long>(p.pad[1]);
              if (ih < 0 || ih >= static_cast<long>(p.H)) continue;
              double* drow = dst_t + static_cast<std::size_t>(ih) * p.W;
              const double* srow = splane + oh * p.oW;
              for (std::size_t ow = 0; ow < p.oW; ++ow) {
                const long iw = static_cast<long>(ow * p.stride[2] + kw) - static_cast<long>(p.pad[2]);
                if (iw >= 0 && iw < static_cast<long>(p.W)) drow[iw] += srow[ow];
              }
            }
          }
        }
}

}  // namespace

Var conv3d(const Var& x, const Var& w, const Var& bias, const ConvGeometry& geom) {
  const ConvPlan p = make_plan(x.shape(), w.shape(), geom);
  if (bias.defined() && bias.shape() != Shape{p.Cout})
    throw std::invalid_argument("conv3d: bias shape " + shape_str(bias.shape()) + " does not match weight " +
                                shape_str(w.shape()));
  Tensor out({p.B, p.Cout, p.oT, p.oH, p.oW}, 0.0);
  const std::size_t in_per_group = p.cin_g * p.T * p.H * p.W;
  const std::size_t fpc = p.frames_per_chunk();
  std::vector<double> cols(p.K() * std::min(fpc, p.oT) * p.plane());
  const double* wv = w.value().ptr();
  for (std::size_t b = 0; b < p.B; ++b)
    for (std::size_t g = 0; g < p.groups; ++g) {
      const double* xg = x.value().ptr() + b * p.Cin * p.T * p.H * p.W + g * in_per_group;
      double* og = out.ptr() + (b * p.Cout + g * p.cout_g) * p.N();
      Eigen::Map<const RowMat> Wg(wv + g * p.cout_g * p.K(), p.cout_g, p.K());
      for (std::size_t t0 = 0; t0 < p.oT; t0 += fpc) {
        const std::size_t nt = std::min(fpc, p.oT - t0);
        const std::size_t nc = nt * p.plane();
        im2col(p, xg, t0, nt, cols.data());
        Eigen::Map<const RowMat> Cm(cols.data(), p.K(), nc);
        MapStrided O(og + t0 * p.plane(), p.cout_g, nc, Stride(p.N()));
        O.noalias() = Wg * Cm;
      }
    }
  if (bias.defined()) {
    const auto bv = bias.value().data();
    for (std::size_t b = 0; b < p.B; ++b)
      for (std::size_t o = 0; o < p.Cout; ++o) {
        double* row = out.ptr() + (b * p.Cout + o) * p.N();
        for (std::size_t n = 0; n < p.N(); ++n) row[n] += bv[o];
      }
  }
  std::vector<Var> parents{x, w};
  if (bias.defined()) parents.push_back(bias);
  return make_result("conv3d", std::move(out), std::move(parents), [p](Node& self) {
    Node& px = *self.parents[0];
    Node& pw = *self.parents[1];
    const std::size_t in_per_group = p.cin_g * p.T * p.H * p.W;
    const std::size_t fpc = p.frames_per_chunk();
    std::vector<double> cols(p.K() * std::min(fpc, p.oT) * p.plane());
    const double* g_all = self.grad.ptr();
    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
      auto gb = self.parents[2]->grad_buffer().data();
      for (std::size_t b = 0; b < p.B; ++b)
        for (std::size_t o = 0; o < p.Cout; ++o) {
          const double* row = g_all + (b * p.Cout + o) * p.N();
          double acc = 0.0;
          for (std::size_t n = 0; n < p.N(); ++n) acc += row[n];
          gb[o] += acc;
        }
    }
    for (std::size_t b = 0; b < p.B; ++b)
      for (std::size_t g = 0; g < p.groups; ++g) {
        const double* xg = px.value.ptr() + b * p.Cin * p.T * p.H * p.W + g * in_per_group;
        const double* gg = g_all + (b * p.Cout + g * p.cout_g) * p.N();
        for (std::size_t t0 = 0; t0 < p.oT; t0 += fpc) {
          const std::size_t nt = std::min(fpc, p.oT - t0);
          const std::size_t nc = nt * p.plane();
          ConstMapStrided G(gg + t0 * p.plane(), p.cout_g, nc, Stride(p.N()));
          if (pw.requires_grad) {
            im2col(p, xg, t0, nt, cols.data());
            Eigen::Map<const RowMat> Cm(cols.data(), p.K(), nc);
            Eigen::Map<RowMat> GW(pw.grad_buffer().ptr() + g * p.cout_g * p.K(), p.cout_g, p.K());
            GW.noalias() += G * Cm.transpose();
          }
          if (px.requires_grad) {
            Eigen::Map<const RowMat> Wg(pw.value.ptr() + g * p.cout_g * p.K(), p.cout_g, p.K());
            Eigen::Map<RowMat> Cm(cols.data(), p.K(), nc);
            Cm.noalias() = Wg.transpose() * G;
            double* dxg = px.grad_buffer().ptr() + b * p.Cin * p.T * p.H * p.W + g * in_per_group;
            col2im(p, cols.data(), t0, nt, dxg);
          }
        }
      }
  });
}

Var tdc_kernel(const Var& w, double theta) {
  const Shape& s = w.shape();
  if (s.size() != 5 || s[2] != 3 || s[3] != 3 || s[4] != 3)
    throw std::invalid_argument("tdc_kernel: expected [Cout,Cin,3,3,3] weights, got " + shape_str(s));
  const std::size_t pairs = s[0] * s[1];
  Tensor out = w.value();
  for (std::size_t k = 0; k < pairs; ++k) {
    const double* src = w.value().ptr() + k * 27;
    double adjacent = 0.0;
    for (std::size_t i = 0; i < 9; ++i) adjacent += src[i] + src[18 + i];
    out[k * 27 + 13] = src[13] - theta * adjacent;
  }
  return make_result("tdc_kernel", std::move(out), {w}, [pairs, theta](Node& self) {
    auto gw = self.parents[0]->grad_buffer().data();
    const auto g = self.grad.data();
    for (std::size_t k = 0; k < pairs; ++k) {
      const double gc = g[k * 27 + 13];
      for (std::size_t i = 0; i < 27; ++i) gw[k * 27 + i] += g[k * 27 + i];
      for (std::size_t i = 0; i < 9; ++i) {
        gw[k * 27 + i] -= theta * gc;
        gw[k * 27 + 18 + i] -= theta * gc;
      }
    }
  });
}

Var max_pool_spatial(const Var& x) {
  const Shape& s = x.shape();
  if (s.size() != 5) throw std::invalid_argument("max_pool_spatial: expected [B,C,T,H,W], got " + shape_str(s));
  if (s[3] % 2 || s[4] % 2) throw std::invalid_argument("max_pool_spatial: odd spatial extent in " + shape_str(s));
  const std::size_t planes = s[0] * s[1] * s[2];
  const std::size_t H = s[3], W = s[4], oH = H / 2, oW = W / 2;
  Tensor out({s[0], s[1], s[2], oH, oW});
  std::vector<std::uint32_t> winner(out.numel());
  const double* xv = x.value().ptr();
  KinkRecorder* rec = KinkRecorder::active();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t h = 0; h < oH; ++h)
      for (std::size_t w = 0; w < oW; ++w) {
        const std::size_t base = p * H * W + 2 * h * W + 2 * w;
        const std::size_t cand[4] = {base, base + 1, base + W, base + W + 1};
        std::size_t best = cand[0];
        for (int k = 1; k < 4; ++k)
          if (xv[cand[k]] > xv[best]) best = cand[k];
        const std::size_t o = (p * oH + h) * oW + w;
        out[o] = xv[best];
        winner[o] = static_cast<std::uint32_t>(best - p * H * W);
        if (rec) rec->mix(best);
      }
  return make_result("max_pool_spatial", std::move(out), {x}, [planes, H, W, winner = std::move(winner)](Node& self) {
    auto gx = self.parents[0]->grad_buffer().data();
    const std::size_t per_plane = winner.size() / planes;
    for (std::size_t o = 0; o < winner.size(); ++o) gx[(o / per_plane) * H * W + winner[o]] += self.grad[o];
  });
}

Var avg_pool3d(const Var& x, const Triple& k) {
  const Shape& s = x.shape();
  if (s.size() != 5) throw std::invalid_argument("avg_pool3d: expected [B,C,T,H,W], got " + shape_str(s));
  if (k[0] == 0 || k[1] == 0 || k[2] == 0 || k[0] > s[2] || k[1] > s[3] || k[2] > s[4])
    throw std::invalid_argument("avg_pool3d: window " + shape_str({k[0], k[1], k[2]}) + " exceeds extent " +
                                shape_str(s));
  const std::size_t planes = s[0] * s[1];
  const std::size_t T = s[2], H = s[3], W = s[4];
  const std::size_t oT = T / k[0], oH = H / k[1], oW = W / k[2];
  const double inv = 1.0 / static_cast<double>(k[0] * k[1] * k[2]);
  Tensor out({s[0], s[1], oT, oH, oW}, 0.0);
  const double* xv = x.value().ptr();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t t = 0; t < oT * k[0]; ++t)
      for (std::size_t h = 0; h < oH * k[1]; ++h)
        for (std::size_t w = 0; w < oW * k[2]; ++w)
          out[((p * oT + t / k[0]) * oH + h / k[1]) * oW + w / k[2]] += xv[((p * T + t) * H + h) * W + w] * inv;
  return make_result("avg_pool3d", std::move(out), {x}, [=](Node& self) {
    auto gx = self.parents[0]->grad_buffer().data();
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t t = 0; t < oT * k[0]; ++t)
        for (std::size_t h = 0; h < oH * k[1]; ++h)
          for (std::size_t w = 0; w < oW * k[2]; ++w)
            gx[((p * T + t) * H + h) * W + w] += self.grad[((p * oT + t / k[0]) * oH + h / k[1]) * oW + w / k[2]] * inv;
  });
}

Var repeat_temporal(const Var& x, std::size_t factor) {
  const Shape& s = x.shape();
  if (s.size() != 5) throw std::invalid_argument("repeat_temporal: expected [B,C,T,H,W], got " + shape_str(s));
  if (factor < 1) throw std::invalid_argument("repeat_temporal: factor must be >= 1");
  const std::size_t planes = s[0] * s[1], T = s[2], hw = s[3] * s[4];
  Tensor out({s[0], s[1], T * factor, s[3], s[4]});
  const double* xv = x.value().ptr();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t t = 0; t < T * factor; ++t)
      std::copy_n(xv + (p * T + t / factor) * hw, hw, out.ptr() + (p * T * factor + t) * hw);
  return make_result("repeat_temporal", std::move(out), {x}, [=](Node& self) {
    auto gx = self.parents[0]->grad_buffer().data();
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t t = 0; t < T * factor; ++t) {
        const double* src = self.grad.ptr() + (p * T * factor + t) * hw;
        double* dst = gx.data() + (p * T + t / factor) * hw;
        for (std::size_t i = 0; i < hw; ++i) dst[i] += src[i];
      }
  });
}

}  // namespace physformer
