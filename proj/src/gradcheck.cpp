// SPDX-License-Identifier: Apache-2.0
#include "physformer/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "physformer/losses.hpp"
#include "physformer/model.hpp"

namespace physformer {

namespace {

struct Probe {
  double value;
  std::uint64_t kinks;
};

Probe evaluate(const std::function<Var(const Var&)>& f, const Tensor& x) {
  KinkRecorder rec;
  Var out = f(Var(x));
  if (out.value().numel() != 1) throw std::invalid_argument("grad_check: f must be scalar-valued");
  return {out.value().item(), rec.signature()};
}

}  // namespace

GradCheckReport grad_check(const std::function<Var(const Var&)>& f, const Tensor& x, const GradCheckOptions& opt) {
  if (!(opt.eps > 0.0)) throw std::invalid_argument("grad_check: eps must be positive");
  GradCheckReport rep;
  rep.tol = opt.tol;

  Var leaf(x, true);
  std::uint64_t base_kinks = 0;
  {
    KinkRecorder rec;
    Var out = f(leaf);
    if (out.value().numel() != 1) throw std::invalid_argument("grad_check: f must be scalar-valued");
    base_kinks = rec.signature();
    backward(out);
  }
  const Tensor analytic = leaf.has_grad() ? leaf.grad() : Tensor(x.shape(), 0.0);

  std::vector<std::size_t> coords(x.numel());
  std::iota(coords.begin(), coords.end(), 0);
  if (opt.max_coords && opt.max_coords < coords.size()) {
    std::mt19937_64 rng(opt.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(opt.max_coords);
    std::sort(coords.begin(), coords.end());
  }

  Tensor probe = x;
  for (std::size_t i : coords) {
    const double orig = probe[i];
    probe[i] = orig + opt.eps;
    const Probe plus = evaluate(f, probe);
    probe[i] = orig - opt.eps;
    const Probe minus = evaluate(f, probe);
    probe[i] = orig;
    if (plus.kinks != base_kinks || minus.kinks != base_kinks) {
      ++rep.skipped_kinks;
      continue;
    }
    const double a = analytic[i];
    const double n = (plus.value - minus.value) / (2.0 * opt.eps);
    if (!std::isfinite(a) || !std::isfinite(n)) {
      rep.nonfinite.push_back(i);
      continue;
    }
    ++rep.checked;
    const double rel = std::abs(a - n) / std::max({std::abs(a), std::abs(n), opt.floor});
    if (rel >= rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst_index = i;
      rep.worst_analytic = a;
      rep.worst_numeric = n;
    }
  }
  rep.passed = rep.nonfinite.empty() && rep.checked > 0 && rep.max_rel_err <= opt.tol;
  return rep;
}

// ---- suite ----------------------------------------------------------------

namespace {

// Scalarises an output with fixed random weights so that symmetric
// reductions (sum of softmax, sum of layer norm) do not hide errors.
Var weighted_sum(const Var& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, Var(Tensor::uniform(y.shape(), rng, -1.0, 1.0))));
}

class Suite {
 public:
  explicit Suite(double tol) { opt_.tol = tol; }

  void run(const std::string& name, const Tensor& x, const std::function<Var(const Var&)>& f,
           std::size_t max_coords = 0) {
    GradCheckOptions o = opt_;
    o.max_coords = max_coords;
    cases_.push_back({name, grad_check(f, x, o)});
  }
  void with_tol(double tol) { opt_.tol = tol; }

  Tensor rand(Shape s, double lo = -1.0, double hi = 1.0) { return Tensor::uniform(std::move(s), rng_, lo, hi); }

  std::vector<GradCheckCase> take() { return std::move(cases_); }

 private:
  GradCheckOptions opt_;
  std::mt19937_64 rng_{20240917};
  std::vector<GradCheckCase> cases_;
};

void primitives(Suite& s) {
  const Tensor a = s.rand({3, 4}), b = s.rand({3, 4});
  const Tensor sq = s.rand({4, 4});
  s.run("add", a, [&](const Var& x) { return weighted_sum(add(x, Var(b)), 1); });
  s.run("sub", a, [&](const Var& x) { return weighted_sum(sub(Var(b), x), 2); });
  s.run("mul", a, [&](const Var& x) { return weighted_sum(mul(x, Var(b)), 3); });
  s.run("mul_shared", a, [&](const Var& x) { return weighted_sum(mul(x, x), 4); });
  s.run("scale", a, [&](const Var& x) { return weighted_sum(scale(x, -2.5), 5); });
  s.run("add_scalar", a, [&](const Var& x) { return weighted_sum(add_scalar(x, 0.3), 6); });
  const Tensor chan = s.rand({2, 3, 2, 2, 2});
  const Tensor bias = s.rand({3});
  s.run("add_channel.x", chan, [&](const Var& x) { return weighted_sum(add_channel(x, Var(bias)), 7); });
  s.run("add_channel.bias", bias, [&](const Var& bb) { return weighted_sum(add_channel(Var(chan), bb), 8); });
  s.run("relu", a, [&](const Var& x) { return weighted_sum(relu(x), 9); });
  s.run("elu", a, [&](const Var& x) { return weighted_sum(elu(x), 10); });
  s.run("exp", a, [&](const Var& x) { return weighted_sum(exp(x), 11); });
  s.run("log", s.rand({3, 4}, 0.5, 2.0), [&](const Var& x) { return weighted_sum(log(x), 12); });
  s.run("power", s.rand({3, 4}, 0.5, 2.0), [&](const Var& x) { return weighted_sum(power(x, -1.5), 13); });
  s.run("sum", a, [&](const Var& x) { return sum(mul(x, x)); });
  s.run("mean", a, [&](const Var& x) { return mean(mul(x, x)); });
  const Tensor r5 = s.rand({2, 3, 2, 3, 2});
  s.run("sum_axes", r5, [&](const Var& x) { return weighted_sum(sum_axes(x, {1, 3}), 14); });
  s.run("mean_axes", r5, [&](const Var& x) { return weighted_sum(mean_axes(x, {0, 4}, true), 15); });
  s.run("reshape", r5, [&](const Var& x) { return weighted_sum(reshape(x, {6, 12}), 16); });
  s.run("permute", r5, [&](const Var& x) { return weighted_sum(permute(x, {4, 2, 0, 3, 1}), 17); });
  s.run("transpose", r5, [&](const Var& x) { return weighted_sum(transpose(x, 1, 3), 18); });
  s.run("concat", a, [&](const Var& x) { return weighted_sum(concat({x, Var(b), x}, 1), 19); });
  s.run("slice", a, [&](const Var& x) { return weighted_sum(slice(x, 1, 1, 2), 20); });
  s.run("matmul", sq, [&](const Var& x) { return weighted_sum(matmul(matmul(x, Var(sq)), x), 21); });
  const Tensor b3 = s.rand({2, 3, 4}), c3 = s.rand({2, 4, 5});
  s.run("matmul_batched", b3, [&](const Var& x) { return weighted_sum(matmul(x, Var(c3)), 22); });
  s.run("matmul_batched.rhs", c3, [&](const Var& y) { return weighted_sum(matmul(Var(b3), y), 23); });
  s.run("softmax", b3, [&](const Var& x) { return weighted_sum(softmax(x, 1), 24); });
  s.run("log_softmax", b3, [&](const Var& x) { return weighted_sum(log_softmax(x, 2), 25); });
  const Tensor g = s.rand({3}, 0.5, 1.5), be = s.rand({3});
  s.run("layer_norm.x", r5, [&](const Var& x) { return weighted_sum(layer_norm(x, Var(g), Var(be), 1), 26); });
  s.run("layer_norm.gamma", g, [&](const Var& gg) { return weighted_sum(layer_norm(Var(r5), gg, Var(be), 1), 27); });
  s.run("layer_norm.beta", be, [&](const Var& bb) { return weighted_sum(layer_norm(Var(r5), Var(g), bb, 1), 28); });
  auto bn = [&](bool training) {
    return [&, training](const Var& x) {
      BatchNormStats st{Tensor({3}, 0.1), Tensor({3}, 0.8)};
      BatchNormOptions o;
      o.training = training;
      return weighted_sum(batch_norm(x, Var(g), Var(be), st, o), 29);
    };
  };
  s.run("batch_norm.train", r5, bn(true));
  s.run("batch_norm.eval", r5, bn(false));
  s.run("batch_norm.gamma", g, [&](const Var& gg) {
    BatchNormStats st{Tensor({3}, 0.0), Tensor({3}, 1.0)};
    return weighted_sum(batch_norm(Var(r5), gg, Var(be), st, {}), 30);
  });
}

void convolutions(Suite& s) {
  const Tensor x = s.rand({2, 2, 4, 5, 5});
  const Tensor w = s.rand({3, 2, 3, 3, 3}), bias = s.rand({3});
  const ConvGeometry same{{1, 1, 1}, {1, 1, 1}, 1};
  const ConvGeometry strided{{2, 1, 2}, {0, 1, 1}, 1};
  s.run("conv3d.x", x, [&](const Var& v) { return weighted_sum(conv3d(v, Var(w), Var(bias), same), 31); });
  s.run("conv3d.w", w, [&](const Var& v) { return weighted_sum(conv3d(Var(x), v, Var(bias), same), 32); });
  s.run("conv3d.bias", bias, [&](const Var& v) { return weighted_sum(conv3d(Var(x), Var(w), v, same), 33); });
  s.run("conv3d.strided", x, [&](const Var& v) { return weighted_sum(conv3d(v, Var(w), Var(bias), strided), 34); });
  const Tensor dw = s.rand({2, 1, 3, 3, 3});
  const ConvGeometry depth{{1, 1, 1}, {1, 1, 1}, 2};
  s.run("conv3d.depthwise.x", x, [&](const Var& v) { return weighted_sum(conv3d(v, Var(dw), Var(), depth), 35); });
  s.run("conv3d.depthwise.w", dw, [&](const Var& v) { return weighted_sum(conv3d(Var(x), v, Var(), depth), 36); });

  const Tensor tx = s.rand({1, 1, 8, 6, 6});
  const Tensor tw = s.rand({2, 1, 3, 3, 3});
  auto tdc_params = [](const Var& weight) {
    TdcParams p;
    p.conv.weight = weight;
    p.conv.padding = {1, 1, 1};
    p.theta = 0.7;
    return p;
  };
  s.run("tdc.x", tx, [&](const Var& v) { return weighted_sum(tdc(v, tdc_params(Var(tw))), 37); });
  s.run("tdc.w", tw, [&](const Var& v) { return weighted_sum(tdc(Var(tx), tdc_params(v)), 38); });
  s.run("tdc.sum", tx, [&](const Var& v) { return sum(tdc(v, tdc_params(Var(tw)))); });

  const Tensor px = s.rand({2, 2, 3, 4, 6});
  s.run("max_pool_spatial", px, [&](const Var& v) { return weighted_sum(max_pool_spatial(v), 39); });
  s.run("avg_pool3d", px, [&](const Var& v) { return weighted_sum(avg_pool3d(v, {2, 2, 3}), 40); });
  s.run("repeat_temporal", px, [&](const Var& v) { return weighted_sum(repeat_temporal(v, 2), 41); });
  const Tensor uw = s.rand({2, 2, 3, 1, 1}), ub = s.rand({2});
  s.run("upsample_temporal", px, [&](const Var& v) {
    Conv3dParams c;
    c.weight = Var(uw);
    c.bias = Var(ub);
    c.padding = {1, 0, 0};
    return weighted_sum(upsample_temporal(v, 2, c), 42);
  });
}

void transformer_block(Suite& s) {
  ArchConfig cfg = toy_arch();
  cfg.blocks = 1;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.ff_dim = 12;
  cfg.tube = {2, 1, 1};
  cfg.input = {8, 16, 16};
  const PhysFormer model(cfg, 11);
  const Tensor tokens = s.rand({2, 8, 4, 2, 2});
  auto block = [&model](Session& ss, const Var& t) {
    return weighted_sum(model.st_ff(ss, 0, model.td_mhsa(ss, 0, t)), 43);
  };
  s.run("block.tokens", tokens, [&](const Var& t) {
    ParameterStore store = model.params();
    Session ss(store, true);
    return block(ss, t);
  });
  for (const char* name : {"block00.qk0.weight", "block00.v.weight", "block00.ff.dw.weight", "block00.ln1.gamma"}) {
    const std::string pname = name;
    s.run(std::string("block.") + (pname.c_str() + 8), model.params().value(pname), [&, pname](const Var& p) {
      ParameterStore store = model.params();
      Session ss(store, true);
      ss.bind(pname, p);
      return block(ss, Var(tokens));
    }, 40);
  }
}

void losses(Suite& s) {
  constexpr double fs = 30.0;
  const Tensor y = s.rand({64});
  Tensor truth({64});
  for (std::size_t t = 0; t < 64; ++t) truth[t] = std::sin(2.0 * 3.141592653589793 * 1.5 * static_cast<double>(t) / fs);
  s.run("neg_pearson", y, [&](const Var& v) { return neg_pearson(v, truth).loss; });
  s.run("psd_at_classes", y, [&](const Var& v) { return weighted_sum(psd_at_classes(v, fs), 44); });
  for (PsdLogits mode : {PsdLogits::SumNormalized, PsdLogits::Raw}) {
    const std::string tag = mode == PsdLogits::Raw ? ".raw" : "";
    s.run("freq_ce" + tag, y, [&, mode](const Var& v) { return freq_ce_loss(psd_logits(psd_at_classes(v, fs), mode), 90); });
    s.run("ld" + tag, y, [&, mode](const Var& v) {
      return ld_loss(label_distribution(90, 1.0), psd_logits(psd_at_classes(v, fs), mode));
    });
  }
  s.run("overall_loss", y, [&](const Var& v) { return overall_loss(v, truth, 90, fs, 3, ScheduleConfig{}).total; });
}

void full_model(Suite& s) {
  ArchConfig cfg = toy_arch();
  cfg.blocks = 1;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.ff_dim = 12;
  cfg.tube = {2, 1, 1};
  cfg.input = {8, 16, 16};
  const PhysFormer model(cfg, 12);
  const Tensor video = s.rand({2, 3, 8, 16, 16});
  s.run("model.input", video, [&](const Var& v) {
    ParameterStore store = model.params();
    Session ss(store, true);
    return weighted_sum(model.forward(ss, v), 45);
  }, 60);
  for (const char* name : {"stem.conv1.weight", "block00.qk1.weight", "head.up0.weight", "head.out.weight"}) {
    const std::string pname = name;
    s.run("model." + pname, model.params().value(pname), [&, pname](const Var& p) {
      ParameterStore store = model.params();
      Session ss(store, true);
      ss.bind(pname, p);
      return weighted_sum(model.forward(ss, Var(video)), 46);
    }, 30);
  }
}

}  // namespace

std::vector<GradCheckCase> gradcheck_suite(double tol, double model_tol) {
  Suite s(tol);
  primitives(s);
  convolutions(s);
  transformer_block(s);
  losses(s);
  s.with_tol(model_tol);
  full_model(s);
  return s.take();
}

}  // namespace physformer
