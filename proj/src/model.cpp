// SPDX-License-Identifier: Apache-2.0
#include "physformer/model.hpp"

#include <cmath>
#include <cstdio>
#include <random>
#include <stdexcept>

namespace physformer {

namespace {

bool is_power_of_two(std::size_t v) { return v && !(v & (v - 1)); }

}  // namespace

std::string block_prefix(std::size_t block) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "block%02zu", block);
  return buf;
}

Triple ArchConfig::token_grid(const Triple& thw) const {
  const std::size_t reduce = stem ? 8 : 1;
  if (stem && (thw[1] % 8 || thw[2] % 8))
    throw std::invalid_argument("input height/width must be divisible by 8, got " + shape_str({thw[1], thw[2]}));
  const Triple feat{thw[0], thw[1] / reduce, thw[2] / reduce};
  for (int i = 0; i < 3; ++i)
    if (tube[i] == 0 || tube[i] > feat[i])
      throw std::invalid_argument("tube " + shape_str({tube[0], tube[1], tube[2]}) + " exceeds feature extent " +
                                  shape_str({feat[0], feat[1], feat[2]}));
  return {feat[0] / tube[0], feat[1] / tube[1], feat[2] / tube[2]};
}

void ArchConfig::validate() const {
  if (heads == 0 || dim == 0 || dim % heads) throw std::invalid_argument("embed dim must be divisible by head count");
  if (stem && dim % 4) throw std::invalid_argument("embed dim must be divisible by 4 for the stem widths");
  if (ff_dim == 0) throw std::invalid_argument("feed-forward dim must be positive");
  if (theta < 0.0 || theta > 1.0) throw std::invalid_argument("theta must lie in [0, 1]");
  if (!(tau > 0.0)) throw std::invalid_argument("tau must be positive");
  token_grid();
}

ArchConfig toy_arch() {
  ArchConfig c;
  c.blocks = 2;
  c.heads = 2;
  c.dim = 24;
  c.ff_dim = 36;
  c.tube = {4, 1, 1};
  c.input = {64, 32, 32};
  return c;
}

PhysFormer::PhysFormer(ArchConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  init_params(seed);
}

PhysFormer::PhysFormer(ArchConfig cfg, ParameterStore params) : cfg_(std::move(cfg)), params_(std::move(params)) {
  cfg_.validate();
  PhysFormer reference(cfg_, 0);
  for (const auto& name : reference.params().names()) {
    if (!params_.contains(name)) throw std::invalid_argument("missing parameter " + name);
    if (params_.value(name).shape() != reference.params().value(name).shape())
      throw std::invalid_argument("parameter " + name + " has shape " + shape_str(params_.value(name).shape()) +
                                  ", expected " + shape_str(reference.params().value(name).shape()));
  }
}

void PhysFormer::init_params(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto conv = [&](const std::string& name, Shape w) {
    const double fan_in = static_cast<double>(w[1] * w[2] * w[3] * w[4]);
    const double bound = 1.0 / std::sqrt(fan_in);
    const std::size_t cout = w[0];
    params_.add(name + ".weight", Tensor::uniform(std::move(w), rng, -bound, bound));
    params_.add(name + ".bias", Tensor::uniform({cout}, rng, -bound, bound));
  };
  auto norm = [&](const std::string& name, std::size_t c, bool running) {
    params_.add(name + ".gamma", Tensor({c}, 1.0));
    params_.add(name + ".beta", Tensor({c}, 0.0));
    if (running) {
      params_.add(name + ".running_mean", Tensor({c}, 0.0), false);
      params_.add(name + ".running_var", Tensor({c}, 1.0), false);
    }
  };
  const std::size_t D = cfg_.dim, F = cfg_.ff_dim;
  if (cfg_.stem) {
    const std::size_t w1 = D / 4, w2 = D / 2;
    conv("stem.conv1", {w1, 3, 1, 5, 5});
    norm("stem.bn1", w1, true);
    conv("stem.conv2", {w2, w1, 3, 3, 3});
    norm("stem.bn2", w2, true);
    conv("stem.conv3", {D, w2, 3, 3, 3});
    norm("stem.bn3", D, true);
  } else {
    conv("embed", {D, 3, 1, 1, 1});
  }
  for (std::size_t b = 0; b < cfg_.blocks; ++b) {
    const std::string p = block_prefix(b);
    if (cfg_.attention != AttentionKind::None) {
      if (cfg_.attention == AttentionKind::TemporalDifference) {
        conv(p + ".qk0", {D, D, 3, 3, 3});
        conv(p + ".qk1", {D, D, 3, 3, 3});
        norm(p + ".bn_q", D, true);
        norm(p + ".bn_k", D, true);
      } else {
        conv(p + ".qk0", {D, D, 1, 1, 1});
        conv(p + ".qk1", {D, D, 1, 1, 1});
      }
      conv(p + ".v", {D, D, 1, 1, 1});
      conv(p + ".proj", {D, D, 1, 1, 1});
      norm(p + ".ln1", D, false);
    }
    conv(p + ".ff.expand", {F, D, 1, 1, 1});
    if (cfg_.feed_forward == FeedForwardKind::SpatioTemporal) {
      conv(p + ".ff.dw", {F, 1, 3, 3, 3});
      norm(p + ".ff.bn", F, true);
    }
    conv(p + ".ff.project", {D, F, 1, 1, 1});
    norm(p + ".ln2", D, false);
  }
  const auto stages = upsample_stages();
  for (std::size_t i = 0; i < stages.size(); ++i) {
    conv("head.up" + std::to_string(i), {D, D, 3, 1, 1});
    norm("head.bn" + std::to_string(i), D, true);
  }
  conv("head.out", {1, D, 1, 1, 1});
}

std::vector<std::size_t> PhysFormer::upsample_stages() const {
  std::vector<std::size_t> stages;
  std::size_t f = cfg_.tube[0];
  if (f <= 1) return stages;
  if (!is_power_of_two(f)) return {f};
  while (f > 1) {
    stages.push_back(2);
    f /= 2;
  }
  return stages;
}

namespace {

Conv3dParams conv_params(Session& s, const std::string& name, bool same = true) {
  Conv3dParams p;
  p.weight = s.param(name + ".weight");
  p.bias = s.param(name + ".bias");
  if (same) p.padding = same_padding(p.weight.shape());
  return p;
}

}  // namespace

Var PhysFormer::stem_forward(Session& s, const Var& video) const {
  const Shape& xs = video.shape();
  if (xs.size() != 5 || xs[1] != 3)
    throw std::invalid_argument("stem expects [B,3,T,H,W] input, got " + shape_str(xs));
  if (!cfg_.stem) return conv3d(video, conv_params(s, "embed"));
  if (xs[3] % 8 || xs[4] % 8)
    throw std::invalid_argument("stem needs height and width divisible by 8, got " + shape_str(xs));
  Var x = video;
  for (int i = 1; i <= 3; ++i) {
    const std::string n = std::to_string(i);
    x = conv3d(x, conv_params(s, "stem.conv" + n));
    x = s.batch_norm("stem.bn" + n, x);
    x = relu(x);
    x = max_pool_spatial(x);
  }
  return x;
}

Var PhysFormer::tube_tokenize(const Var& features) const { return avg_pool3d(features, cfg_.tube); }

Var PhysFormer::td_mhsa(Session& s, std::size_t block, const Var& tokens, ForwardTrace* trace) const {
  const std::string p = block_prefix(block);
  const Shape& ts = tokens.shape();
  const std::size_t B = ts[0], D = cfg_.dim, h = cfg_.heads, Dh = D / h;
  const std::size_t M = ts[2] * ts[3] * ts[4];
  if (ts[1] != D) throw std::invalid_argument("td_mhsa: token channels " + shape_str(ts) + " != embed dim");

  Var q, k;
  if (cfg_.attention == AttentionKind::TemporalDifference) {
    q = s.batch_norm(p + ".bn_q", tdc(tokens, TdcParams{conv_params(s, p + ".qk0"), cfg_.theta}));
    k = s.batch_norm(p + ".bn_k", tdc(tokens, TdcParams{conv_params(s, p + ".qk1"), cfg_.theta}));
  } else {
    q = conv3d(tokens, conv_params(s, p + ".qk0"));
    k = conv3d(tokens, conv_params(s, p + ".qk1"));
  }
  Var v = conv3d(tokens, conv_params(s, p + ".v"));

  auto split_heads = [&](const Var& t) {
    return reshape(permute(reshape(t, {B, h, Dh, M}), {0, 1, 3, 2}), {B * h, M, Dh});
  };
  Var scores = scale(matmul(split_heads(q), transpose(split_heads(k), 1, 2)), 1.0 / cfg_.tau);
  if (!all_finite(scores.value()))
    throw std::runtime_error("non-finite attention logits in block " + std::to_string(block));
  Var attn = softmax(scores, 2);
  if (trace) trace->attention.push_back(attn.value().reshaped({B, h, M, M}));
  Var mixed = matmul(attn, split_heads(v));
  Var merged = reshape(permute(reshape(mixed, {B, h, M, Dh}), {0, 1, 3, 2}), ts);
  Var out = conv3d(merged, conv_params(s, p + ".proj"));
  return layer_norm(add(tokens, out), s.param(p + ".ln1.gamma"), s.param(p + ".ln1.beta"), 1);
}

Var PhysFormer::st_ff(Session& s, std::size_t block, const Var& tokens) const {
  const std::string p = block_prefix(block);
  Var x = conv3d(tokens, conv_params(s, p + ".ff.expand"));
  if (cfg_.feed_forward == FeedForwardKind::SpatioTemporal) {
    Conv3dParams dw = conv_params(s, p + ".ff.dw");
    dw.depthwise = true;
    x = elu(s.batch_norm(p + ".ff.bn", conv3d(x, dw)));
  } else {
    x = elu(x);
  }
  x = conv3d(x, conv_params(s, p + ".ff.project"));
  return layer_norm(add(tokens, x), s.param(p + ".ln2.gamma"), s.param(p + ".ln2.beta"), 1);
}

Var PhysFormer::predictor_head(Session& s, const Var& tokens) const {
  Var x = tokens;
  const auto stages = upsample_stages();
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const std::string n = std::to_string(i);
    x = upsample_temporal(x, stages[i], conv_params(s, "head.up" + n));
    x = elu(s.batch_norm("head.bn" + n, x));
  }
  const std::size_t B = x.shape()[0], D = x.shape()[1], T = x.shape()[2];
  x = reshape(mean_axes(x, {3, 4}), {B, D, T, 1, 1});
  x = conv3d(x, conv_params(s, "head.out"));
  return reshape(x, {B, T});
}

Var PhysFormer::forward(Session& s, const Var& video, ForwardTrace* trace) const {
  Var x = tube_tokenize(stem_forward(s, video));
  if (trace) trace->token_grid = {x.shape()[2], x.shape()[3], x.shape()[4]};
  for (std::size_t b = 0; b < cfg_.blocks; ++b) {
    if (cfg_.attention != AttentionKind::None) x = td_mhsa(s, b, x, trace);
    x = st_ff(s, b, x);
  }
  return predictor_head(s, x);
}

Tensor PhysFormer::export_attention(const Tensor& video, std::size_t block, std::size_t head) {
  if (cfg_.attention == AttentionKind::None) throw std::out_of_range("model has no attention layers");
  if (block >= cfg_.blocks) throw std::out_of_range("block index " + std::to_string(block) + " out of range");
  if (head >= cfg_.heads) throw std::out_of_range("head index " + std::to_string(head) + " out of range");
  Session s(params_, false);
  ForwardTrace trace;
  forward(s, Var(video), &trace);
  const Tensor& a = trace.attention.at(block);
  const std::size_t M = a.dim(2);
  std::vector<double> out(a.ptr() + head * M * M, a.ptr() + (head + 1) * M * M);
  return Tensor({M, M}, std::move(out));
}

}  // namespace physformer
