// SPDX-License-Identifier: Apache-2.0
#include "physformer/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace physformer {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
}

bool wants(const NodePtr& p) { return p->requires_grad; }

// Splits a shape around `axis` into (outer, extent, inner) for strided loops.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw std::invalid_argument("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

template <class F, class DF>
Var unary(const char* op, const Var& a, F f, DF df) {
  Tensor out(a.shape());
  const auto in = a.value().data();
  auto o = out.data();
  for (std::size_t i = 0; i < in.size(); ++i) o[i] = f(in[i]);
  return make_result(op, std::move(out), {a}, [df](Node& self) {
    Node& pa = *self.parents[0];
    auto g = self.grad.data();
    auto x = pa.value.data();
    auto y = self.value.data();
    auto ga = pa.grad_buffer().data();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(x[i], y[i]);
  });
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_shape("add", a, b);
  Tensor out = a.value();
  out.add_(b.value());
  return make_result("add", std::move(out), {a, b}, [](Node& self) {
    for (auto& p : self.parents)
      if (wants(p)) p->grad_buffer().add_(self.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape("sub", a, b);
  Tensor out = a.value();
  out.add_(b.value(), -1.0);
  return make_result("sub", std::move(out), {a, b}, [](Node& self) {
    if (wants(self.parents[0])) self.parents[0]->grad_buffer().add_(self.grad);
    if (wants(self.parents[1])) self.parents[1]->grad_buffer().add_(self.grad, -1.0);
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape("mul", a, b);
  Tensor out(a.shape());
  const auto x = a.value().data();
  const auto y = b.value().data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  return make_result("mul", std::move(out), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    auto g = self.grad.data();
    if (pa.requires_grad) {
      auto ga = pa.grad_buffer().data();
      auto y = pb.value.data();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
    }
    if (pb.requires_grad) {
      auto gb = pb.grad_buffer().data();
      auto x = pa.value.data();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
    }
  });
}

Var scale(const Var& a, double s) {
  return unary("scale", a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_scalar(const Var& a, double s) {
  return unary("add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var add_channel(const Var& x, const Var& bias) {
  const Shape& s = x.shape();
  if (s.size() < 2 || bias.shape() != Shape{s[1]})
    throw std::invalid_argument("add_channel: shape mismatch " + shape_str(s) + " vs " + shape_str(bias.shape()));
  const AxisSplit sp = split_at(s, 1);
  Tensor out = x.value();
  const auto b = bias.value().data();
  auto o = out.data();
  for (std::size_t n = 0; n < sp.outer; ++n)
    for (std::size_t c = 0; c < sp.extent; ++c) {
      double* row = o.data() + (n * sp.extent + c) * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) row[i] += b[c];
    }
  return make_result("add_channel", std::move(out), {x, bias}, [sp](Node& self) {
    if (wants(self.parents[0])) self.parents[0]->grad_buffer().add_(self.grad);
    if (wants(self.parents[1])) {
      auto gb = self.parents[1]->grad_buffer().data();
      auto g = self.grad.data();
      for (std::size_t n = 0; n < sp.outer; ++n)
        for (std::size_t c = 0; c < sp.extent; ++c) {
          const double* row = g.data() + (n * sp.extent + c) * sp.inner;
          double acc = 0.0;
          for (std::size_t i = 0; i < sp.inner; ++i) acc += row[i];
          gb[c] += acc;
        }
    }
  });
}

Var relu(const Var& a) {
  if (KinkRecorder* rec = KinkRecorder::active()) {
    std::uint64_t bits = 0;
    std::size_t k = 0;
    for (double v : a.value().data()) {
      bits = (bits << 1) | (v > 0.0 ? 1u : 0u);
      if (++k % 64 == 0) rec->mix(bits), bits = 0;
    }
    rec->mix(bits);
  }
  return unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var elu(const Var& a, double alpha) {
  return unary("elu", a, [alpha](double x) { return x > 0.0 ? x : alpha * std::expm1(x); },
               [alpha](double x, double y) { return x > 0.0 ? 1.0 : y + alpha; });
}

Var exp(const Var& a) {
  return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(const Var& a) {
  return unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var power(const Var& a, double p) {
  return unary("power", a, [p](double x) { return std::pow(x, p); },
               [p](double x, double) { return p * std::pow(x, p - 1.0); });
}

Var sum(const Var& a) {
  double acc = 0.0;
  for (double v : a.value().data()) acc += v;
  return make_result("sum", Tensor::scalar(acc), {a}, [](Node& self) {
    const double g = self.grad[0];
    for (double& v : self.parents[0]->grad_buffer().data()) v += g;
  });
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().numel())); }

Var sum_axes(const Var& a, std::vector<std::size_t> axes, bool keepdims) {
  const Shape& s = a.shape();
  std::vector<bool> reduce(s.size(), false);
  for (auto ax : axes) {
    if (ax >= s.size()) throw std::invalid_argument("sum_axes: axis out of range for " + shape_str(s));
    reduce[ax] = true;
  }
  Shape kept(s.size());
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i) {
    kept[i] = reduce[i] ? 1 : s[i];
    if (!reduce[i] || keepdims) out_shape.push_back(kept[i]);
  }
  if (out_shape.empty()) out_shape.push_back(1);

  // Map each input element to its output slot via the kept-shape strides.
  const auto in_strides = strides_of(s);
  const auto out_strides = strides_of(kept);
  std::vector<std::size_t> target(a.value().numel());
  for (std::size_t i = 0; i < target.size(); ++i) {
    std::size_t rem = i, off = 0;
    for (std::size_t d = 0; d < s.size(); ++d) {
      const std::size_t idx = rem / in_strides[d];
      rem %= in_strides[d];
      if (!reduce[d]) off += idx * out_strides[d];
    }
    target[i] = off;
  }
  Tensor out(out_shape, 0.0);
  const auto x = a.value().data();
  for (std::size_t i = 0; i < x.size(); ++i) out[target[i]] += x[i];
  return make_result("sum_axes", std::move(out), {a}, [target = std::move(target)](Node& self) {
    auto ga = self.parents[0]->grad_buffer().data();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[target[i]];
  });
}

Var mean_axes(const Var& a, std::vector<std::size_t> axes, bool keepdims) {
  double count = 1.0;
  for (auto ax : axes) {
    if (ax >= a.shape().size()) throw std::invalid_argument("mean_axes: axis out of range for " + shape_str(a.shape()));
    count *= static_cast<double>(a.shape()[ax]);
  }
  return scale(sum_axes(a, std::move(axes), keepdims), 1.0 / count);
}

Var reshape(const Var& a, Shape shape) {
  if (shape_numel(shape) != a.value().numel())
    throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  return make_result("reshape", a.value().reshaped(std::move(shape)), {a}, [](Node& self) {
    auto ga = self.parents[0]->grad_buffer().data();
    auto g = self.grad.data();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
  });
}

namespace {

// Source offset for every destination element of a permutation.
std::vector<std::size_t> permutation_map(const Shape& s, const std::vector<std::size_t>& perm, Shape& out_shape) {
  const std::size_t r = s.size();
  out_shape.resize(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = s[perm[i]];
  const auto src_strides = strides_of(s);
  std::vector<std::size_t> step(r);
  for (std::size_t i = 0; i < r; ++i) step[i] = src_strides[perm[i]];
  std::vector<std::size_t> map(shape_numel(s));
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t n = 0; n < map.size(); ++n) {
    map[n] = src;
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < out_shape[d]) {
        src += step[d];
        break;
      }
      src -= step[d] * (out_shape[d] - 1);
      idx[d] = 0;
    }
  }
  return map;
}

}  // namespace

Var permute(const Var& a, std::vector<std::size_t> perm) {
  const Shape& s = a.shape();
  std::vector<std::size_t> check = perm;
  std::sort(check.begin(), check.end());
  bool ok = check.size() == s.size();
  for (std::size_t i = 0; ok && i < check.size(); ++i) ok = check[i] == i;
  if (!ok) throw std::invalid_argument("permute: invalid permutation for " + shape_str(s));
  Shape out_shape;
  auto map = permutation_map(s, perm, out_shape);
  Tensor out(out_shape);
  const auto x = a.value().data();
  for (std::size_t n = 0; n < map.size(); ++n) out[n] = x[map[n]];
  return make_result("permute", std::move(out), {a}, [map = std::move(map)](Node& self) {
    auto ga = self.parents[0]->grad_buffer().data();
    for (std::size_t n = 0; n < map.size(); ++n) ga[map[n]] += self.grad[n];
  });
}

Var transpose(const Var& a, std::size_t axis0, std::size_t axis1) {
  std::vector<std::size_t> perm(a.shape().size());
  std::iota(perm.begin(), perm.end(), 0);
  if (axis0 >= perm.size() || axis1 >= perm.size())
    throw std::invalid_argument("transpose: axis out of range for " + shape_str(a.shape()));
  std::swap(perm[axis0], perm[axis1]);
  return permute(a, std::move(perm));
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  Shape out_shape = parts[0].shape();
  if (axis >= out_shape.size()) throw std::invalid_argument("concat: axis out of range for " + shape_str(out_shape));
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = parts[0].shape();
    if (a.size() != b.size()) throw std::invalid_argument("concat: rank mismatch " + shape_str(a) + " vs " + shape_str(b));
    a[axis] = b[axis] = 0;
    if (a != b) throw std::invalid_argument("concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
    out_shape[axis] += p.shape()[axis];
  }
  const AxisSplit sp = split_at(out_shape, axis);
  Tensor out(out_shape);
  std::vector<std::size_t> offsets;
  std::size_t at = 0;
  for (const auto& p : parts) {
    offsets.push_back(at);
    const std::size_t ext = p.shape()[axis];
    const auto x = p.value().data();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(x.data() + o * ext * sp.inner, ext * sp.inner, out.ptr() + (o * sp.extent + at) * sp.inner);
    at += ext;
  }
  return make_result("concat", std::move(out), parts, [sp, offsets, axis](Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      Node& p = *self.parents[k];
      if (!p.requires_grad) continue;
      const std::size_t ext = p.value.shape()[axis];
      auto gp = p.grad_buffer().data();
      for (std::size_t o = 0; o < sp.outer; ++o) {
        const double* src = self.grad.ptr() + (o * sp.extent + offsets[k]) * sp.inner;
        double* dst = gp.data() + o * ext * sp.inner;
        for (std::size_t i = 0; i < ext * sp.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

Var slice(const Var& a, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& s = a.shape();
  const AxisSplit sp = split_at(s, axis);
  if (length == 0 || start + length > sp.extent)
    throw std::invalid_argument("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                                ") outside " + shape_str(s));
  Shape out_shape = s;
  out_shape[axis] = length;
  Tensor out(out_shape);
  const auto x = a.value().data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(x.data() + (o * sp.extent + start) * sp.inner, length * sp.inner, out.ptr() + o * length * sp.inner);
  return make_result("slice", std::move(out), {a}, [sp, start, length](Node& self) {
    auto ga = self.parents[0]->grad_buffer().data();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      const double* src = self.grad.ptr() + o * length * sp.inner;
      double* dst = ga.data() + (o * sp.extent + start) * sp.inner;
      for (std::size_t i = 0; i < length * sp.inner; ++i) dst[i] += src[i];
    }
  });
}

Var matmul(const Var& a, const Var& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool batched = sa.size() == 3;
  const bool ok = (sa.size() == 2 && sb.size() == 2 && sa[1] == sb[0]) ||
                  (sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0] && sa[2] == sb[1]);
  if (!ok) throw std::invalid_argument("matmul: shape mismatch " + shape_str(sa) + " vs " + shape_str(sb));
  const std::size_t batch = batched ? sa[0] : 1;
  const std::size_t m = sa[sa.size() - 2], k = sa.back(), n = sb.back();
  Shape out_shape = batched ? Shape{batch, m, n} : Shape{m, n};
  Tensor out(out_shape);
  for (std::size_t i = 0; i < batch; ++i) {
    ConstMapMat A(a.value().ptr() + i * m * k, m, k);
    ConstMapMat B(b.value().ptr() + i * k * n, k, n);
    MapMat C(out.ptr() + i * m * n, m, n);
    C.noalias() = A * B;
  }
  return make_result("matmul", std::move(out), {a, b}, [batch, m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    for (std::size_t i = 0; i < batch; ++i) {
      ConstMapMat G(self.grad.ptr() + i * m * n, m, n);
      if (pa.requires_grad) {
        MapMat GA(pa.grad_buffer().ptr() + i * m * k, m, k);
        ConstMapMat B(pb.value.ptr() + i * k * n, k, n);
        GA.noalias() += G * B.transpose();
      }
      if (pb.requires_grad) {
        MapMat GB(pb.grad_buffer().ptr() + i * k * n, k, n);
        ConstMapMat A(pa.value.ptr() + i * m * k, m, k);
        GB.noalias() += A.transpose() * G;
      }
    }
  });
}

Var softmax(const Var& a, std::size_t axis) {
  const AxisSplit sp = split_at(a.shape(), axis);
  Tensor out(a.shape());
  const auto x = a.value().data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.extent * sp.inner + i;
      double mx = -INFINITY;
      for (std::size_t e = 0; e < sp.extent; ++e) mx = std::max(mx, x[base + e * sp.inner]);
      double z = 0.0;
      for (std::size_t e = 0; e < sp.extent; ++e) z += (out[base + e * sp.inner] = std::exp(x[base + e * sp.inner] - mx));
      for (std::size_t e = 0; e < sp.extent; ++e) out[base + e * sp.inner] /= z;
    }
  return make_result("softmax", std::move(out), {a}, [sp](Node& self) {
    auto ga = self.parents[0]->grad_buffer().data();
    const auto y = self.value.data();
    const auto g = self.grad.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.extent * sp.inner + i;
        double dot = 0.0;
        for (std::size_t e = 0; e < sp.extent; ++e) dot += g[base + e * sp.inner] * y[base + e * sp.inner];
        for (std::size_t e = 0; e < sp.extent; ++e) {
          const std::size_t j = base + e * sp.inner;
          ga[j] += y[j] * (g[j] - dot);
        }
      }
  });
}

Var log_softmax(const Var& a, std::size_t axis) {
  const AxisSplit sp = split_at(a.shape(), axis);
  Tensor out(a.shape());
  const auto x = a.value().data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.extent * sp.inner + i;
      double mx = -INFINITY;
      for (std::size_t e = 0; e < sp.extent; ++e) mx = std::max(mx, x[base + e * sp.inner]);
      double z = 0.0;
      for (std::size_t e = 0; e < sp.extent; ++e) z += std::exp(x[base + e * sp.inner] - mx);
      const double lse = mx + std::log(z);
      for (std::size_t e = 0; e < sp.extent; ++e) out[base + e * sp.inner] = x[base + e * sp.inner] - lse;
    }
  return make_result("log_softmax", std::move(out), {a}, [sp](Node& self) {
    auto ga = self.parents[0]->grad_buffer().data();
    const auto y = self.value.data();
    const auto g = self.grad.data();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.extent * sp.inner + i;
        double gs = 0.0;
        for (std::size_t e = 0; e < sp.extent; ++e) gs += g[base + e * sp.inner];
        for (std::size_t e = 0; e < sp.extent; ++e) {
          const std::size_t j = base + e * sp.inner;
          ga[j] += g[j] - std::exp(y[j]) * gs;
        }
      }
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, std::size_t axis, double eps) {
  const AxisSplit sp = split_at(x.shape(), axis);
  if (gamma.shape() != Shape{sp.extent} || beta.shape() != Shape{sp.extent})
    throw std::invalid_argument("layer_norm: affine shape mismatch " + shape_str(gamma.shape()) + " vs " +
                                shape_str(x.shape()));
  const std::size_t groups = sp.outer * sp.inner;
  Tensor out(x.shape());
  Tensor xhat(x.shape());
  std::vector<double> inv_std(groups);
  const auto xv = x.value().data();
  const auto gm = gamma.value().data();
  const auto bt = beta.value().data();
  const double n = static_cast<double>(sp.extent);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.extent * sp.inner + i;
      double mu = 0.0;
      for (std::size_t e = 0; e < sp.extent; ++e) mu += xv[base + e * sp.inner];
      mu /= n;
      double var = 0.0;
      for (std::size_t e = 0; e < sp.extent; ++e) {
        const double d = xv[base + e * sp.inner] - mu;
        var += d * d;
      }
      var /= n;
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[o * sp.inner + i] = is;
      for (std::size_t e = 0; e < sp.extent; ++e) {
        const std::size_t j = base + e * sp.inner;
        xhat[j] = (xv[j] - mu) * is;
        out[j] = gm[e] * xhat[j] + bt[e];
      }
    }
  return make_result("layer_norm", std::move(out), {x, gamma, beta},
                     [sp, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                       Node& px = *self.parents[0];
                       Node& pg = *self.parents[1];
                       Node& pb = *self.parents[2];
                       const auto g = self.grad.data();
                       const auto gm = pg.value.data();
                       const double n = static_cast<double>(sp.extent);
                       for (std::size_t o = 0; o < sp.outer; ++o)
                         for (std::size_t i = 0; i < sp.inner; ++i) {
                           const std::size_t base = o * sp.extent * sp.inner + i;
                           double s1 = 0.0, s2 = 0.0;
                           for (std::size_t e = 0; e < sp.extent; ++e) {
                             const std::size_t j = base + e * sp.inner;
                             const double dxh = g[j] * gm[e];
                             s1 += dxh;
                             s2 += dxh * xhat[j];
                           }
                           if (px.requires_grad) {
                             auto gx = px.grad_buffer().data();
                             const double is = inv_std[o * sp.inner + i];
                             for (std::size_t e = 0; e < sp.extent; ++e) {
                               const std::size_t j = base + e * sp.inner;
                               gx[j] += is * (g[j] * gm[e] - s1 / n - xhat[j] * s2 / n);
                             }
                           }
                           if (pg.requires_grad) {
                             auto gg = pg.grad_buffer().data();
                             for (std::size_t e = 0; e < sp.extent; ++e) gg[e] += g[base + e * sp.inner] * xhat[base + e * sp.inner];
                           }
                           if (pb.requires_grad) {
                             auto gb = pb.grad_buffer().data();
                             for (std::size_t e = 0; e < sp.extent; ++e) gb[e] += g[base + e * sp.inner];
                           }
                         }
                     });
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormStats& stats, const BatchNormOptions& opt) {
  const Shape& s = x.shape();
  if (s.size() < 2) throw std::invalid_argument("batch_norm: expected [B,C,...], got " + shape_str(s));
  const std::size_t B = s[0], C = s[1];
  const std::size_t inner = shape_numel(s) / (B * C);
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C})
    throw std::invalid_argument("batch_norm: affine shape mismatch " + shape_str(gamma.shape()) + " vs " + shape_str(s));
  if (stats.running_mean.empty()) stats.running_mean = Tensor({C}, 0.0);
  if (stats.running_var.empty()) stats.running_var = Tensor({C}, 1.0);

  const double count = static_cast<double>(B * inner);
  if (opt.training && B * inner < 2)
    throw std::invalid_argument("batch_norm: training mode needs more than one value per channel, got " + shape_str(s));
  std::vector<double> mu(C), inv_std(C);
  const auto xv = x.value().data();
  for (std::size_t c = 0; c < C; ++c) {
    double m, v;
    if (opt.training) {
      double acc = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const double* row = xv.data() + (b * C + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) acc += row[i];
      }
      m = acc / count;
      double sq = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const double* row = xv.data() + (b * C + c) * inner;
        for (std::size_t i = 0; i < inner; ++i) sq += (row[i] - m) * (row[i] - m);
      }
      v = sq / count;
      stats.running_mean[c] = opt.momentum * stats.running_mean[c] + (1.0 - opt.momentum) * m;
      stats.running_var[c] = opt.momentum * stats.running_var[c] + (1.0 - opt.momentum) * sq / (count - 1.0);
    } else {
      m = stats.running_mean[c];
      v = stats.running_var[c];
    }
    mu[c] = m;
    inv_std[c] = 1.0 / std::sqrt(v + opt.eps);
  }
  Tensor out(s);
  Tensor xhat(s);
  const auto gm = gamma.value().data();
  const auto bt = beta.value().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t off = (b * C + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        xhat[off + i] = (xv[off + i] - mu[c]) * inv_std[c];
        out[off + i] = gm[c] * xhat[off + i] + bt[c];
      }
    }
  const bool training = opt.training;
  return make_result("batch_norm", std::move(out), {x, gamma, beta},
                     [B, C, inner, count, training, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
                       Node& px = *self.parents[0];
                       Node& pg = *self.parents[1];
                       Node& pb = *self.parents[2];
                       const auto g = self.grad.data();
                       const auto gm = pg.value.data();
                       for (std::size_t c = 0; c < C; ++c) {
                         double sg = 0.0, sgx = 0.0;
                         for (std::size_t b = 0; b < B; ++b) {
                           const std::size_t off = (b * C + c) * inner;
                           for (std::size_t i = 0; i < inner; ++i) {
                             sg += g[off + i];
                             sgx += g[off + i] * xhat[off + i];
                           }
                         }
                         if (pg.requires_grad) pg.grad_buffer()[c] += sgx;
                         if (pb.requires_grad) pb.grad_buffer()[c] += sg;
                         if (!px.requires_grad) continue;
                         auto gx = px.grad_buffer().data();
                         const double k = gm[c] * inv_std[c];
                         for (std::size_t b = 0; b < B; ++b) {
                           const std::size_t off = (b * C + c) * inner;
                           for (std::size_t i = 0; i < inner; ++i) {
                             if (training)
                               gx[off + i] += k * (g[off + i] - sg / count - xhat[off + i] * sgx / count);
                             else
                               gx[off + i] += k * g[off + i];
                           }
                         }
                       }
                     });
}

}  // namespace physformer
