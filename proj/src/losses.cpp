// SPDX-License-Identifier: Apache-2.0
#include "physformer/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace physformer {

std::size_t hr_class(int bpm) {
  if (bpm < kMinBpm || bpm > kMaxBpm)
    throw std::out_of_range("HR " + std::to_string(bpm) + " bpm outside [42, 180]");
  return static_cast<std::size_t>(bpm - kMinBpm);
}

int hr_label(double bpm) {
  const long r = std::lround(bpm);
  return static_cast<int>(std::clamp<long>(r, kMinBpm, kMaxBpm));
}

namespace {

void require_signal(const Shape& s, const char* what) {
  if (s.size() != 1 || s[0] < 2)
    throw std::invalid_argument(std::string(what) + ": expected a [T] signal with T >= 2, got " + shape_str(s));
}

// s - mean(s), built from primitives so gradients flow through the mean.
Var centered(const Var& s) {
  const std::size_t T = s.shape()[0];
  Var ones(Tensor({T, 1}, 1.0));
  Var m = reshape(matmul(ones, reshape(mean(s), {1, 1})), {T});
  return sub(s, m);
}

}  // namespace

NegPearson neg_pearson(const Var& pred, const Tensor& truth) {
  require_signal(pred.shape(), "neg_pearson");
  if (truth.shape() != pred.shape())
    throw std::invalid_argument("neg_pearson: shape mismatch " + shape_str(pred.shape()) + " vs " +
                                shape_str(truth.shape()));
  const std::size_t T = truth.numel();
  double tm = 0.0;
  for (double v : truth.data()) tm += v;
  tm /= static_cast<double>(T);
  Tensor tc(truth.shape());
  double tnorm2 = 0.0;
  for (std::size_t i = 0; i < T; ++i) {
    tc[i] = truth[i] - tm;
    tnorm2 += tc[i] * tc[i];
  }
  if (tnorm2 == 0.0) throw std::invalid_argument("neg_pearson: target signal is constant");

  Var pc = centered(pred);
  Var pnorm2 = sum(mul(pc, pc));
  // Rounding in the mean leaves ~1e-17 residue on a constant signal.
  double scale2 = 0.0;
  for (double v : pred.value().data()) scale2 += v * v;
  if (pnorm2.value().item() <= 1e-24 * scale2) return {add_scalar(scale(sum(pred), 0.0), 1.0), true};
  Var cov = sum(mul(pc, Var(std::move(tc))));
  Var rho = scale(mul(cov, power(pnorm2, -0.5)), 1.0 / std::sqrt(tnorm2));
  return {add_scalar(scale(rho, -1.0), 1.0), false};
}

namespace {

struct ClassBasis {
  Tensor cos, sin;  // [T, 139]
};

ClassBasis class_basis(std::size_t T, double fs) {
  if (!(fs > 0.0)) throw std::invalid_argument("psd_at_classes: sampling rate must be positive");
  const double nyquist = fs / 2.0;
  if (kMaxBpm / 60.0 >= nyquist)
    throw std::invalid_argument("psd_at_classes: class frequency " + std::to_string(kMaxBpm / 60.0) +
                                " Hz is not below Nyquist " + std::to_string(nyquist) + " Hz");
  ClassBasis b{Tensor({T, kHrClasses}), Tensor({T, kHrClasses})};
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t k = 0; k < kHrClasses; ++k) {
      const double f = static_cast<double>(kMinBpm + static_cast<int>(k)) / 60.0;
      const double ph = 2.0 * std::numbers::pi * f * static_cast<double>(t) / fs;
      b.cos[t * kHrClasses + k] = std::cos(ph);
      b.sin[t * kHrClasses + k] = -std::sin(ph);
    }
  return b;
}

}  // namespace

Var psd_at_classes(const Var& signal, double fs) {
  require_signal(signal.shape(), "psd_at_classes");
  const std::size_t T = signal.shape()[0];
  ClassBasis basis = class_basis(T, fs);
  Var row = reshape(centered(signal), {1, T});
  Var re = matmul(row, Var(std::move(basis.cos)));
  Var im = matmul(row, Var(std::move(basis.sin)));
  return reshape(add(mul(re, re), mul(im, im)), {kHrClasses});
}

std::vector<double> psd_at_classes(std::span<const double> signal, double fs) {
  Tensor t({signal.size()}, std::vector<double>(signal.begin(), signal.end()));
  Var p = psd_at_classes(Var(std::move(t)), fs);
  return {p.value().data().begin(), p.value().data().end()};
}

Var freq_ce_loss(const Var& logits, int hr_gt) {
  if (logits.shape() != Shape{kHrClasses})
    throw std::invalid_argument("freq_ce_loss: expected 139 logits, got " + shape_str(logits.shape()));
  const std::size_t k = hr_class(hr_gt);
  return scale(slice(log_softmax(logits, 0), 0, k, 1), -1.0);
}

std::vector<double> gaussian_label_weights(int hr_gt, double sigma) {
  const std::size_t center = hr_class(hr_gt);
  if (!(sigma > 0.0)) throw std::invalid_argument("label_distribution: sigma must be positive");
  std::vector<double> w(kHrClasses);
  const double norm = 1.0 / (std::sqrt(2.0 * std::numbers::pi) * sigma);
  for (std::size_t k = 0; k < kHrClasses; ++k) {
    const double d = static_cast<double>(k) - static_cast<double>(center);
    w[k] = norm * std::exp(-d * d / (2.0 * sigma * sigma));
  }
  return w;
}

HrDistribution label_distribution(int hr_gt, double sigma) {
  HrDistribution p{gaussian_label_weights(hr_gt, sigma)};
  double z = 0.0;
  for (double v : p.probs) z += v;
  for (double& v : p.probs) v /= z;
  return p;
}

Var ld_loss(const HrDistribution& p, const Var& logits) {
  if (logits.shape() != Shape{kHrClasses} || p.probs.size() != kHrClasses)
    throw std::invalid_argument("ld_loss: expected 139 logits and probabilities, got " + shape_str(logits.shape()));
  double mass = 0.0;
  for (double v : p.probs) {
    if (!(v >= 0.0)) throw std::invalid_argument("ld_loss: target has a negative or NaN entry");
    mass += v;
  }
  if (std::abs(mass - 1.0) > 1e-9) throw std::invalid_argument("ld_loss: target does not sum to 1");

  // Dedicated primitive: zero-probability classes contribute nothing even
  // when their logit is -inf.
  Var ls = log_softmax(logits, 0);
  double kl = 0.0;
  for (std::size_t k = 0; k < kHrClasses; ++k)
    if (p.probs[k] > 0.0) kl += p.probs[k] * (std::log(p.probs[k]) - ls.value()[k]);
  return make_result("kl_div", Tensor::scalar(kl), {ls}, [probs = p.probs](Node& self) {
    const double g = self.grad[0];
    auto gl = self.parents[0]->grad_buffer().data();
    for (std::size_t k = 0; k < probs.size(); ++k)
      if (probs[k] > 0.0) gl[k] -= g * probs[k];
  });
}

double beta_at(int epoch, const ScheduleConfig& cfg) {
  if (cfg.total_epochs < 1) throw std::invalid_argument("beta_at: total_epochs must be positive");
  if (epoch < 1 || epoch > cfg.total_epochs)
    throw std::out_of_range("beta_at: epoch " + std::to_string(epoch) + " outside [1, " +
                            std::to_string(cfg.total_epochs) + "]");
  const double progress = static_cast<double>(epoch - 1) / static_cast<double>(cfg.total_epochs);
  switch (cfg.strategy) {
    case BetaStrategy::Exponential:
      return cfg.beta0 * std::pow(cfg.eta, progress);
    case BetaStrategy::Linear:
      return cfg.beta0 * (1.0 + (cfg.eta - 1.0) * progress);
    case BetaStrategy::Fixed:
      return cfg.beta0;
  }
  return cfg.beta0;
}

Var psd_logits(const Var& psd, PsdLogits mode) {
  // An all-zero spectrum (constant prediction) stays all-zero: uniform softmax.
  if (mode == PsdLogits::Raw || sum(psd).value().item() == 0.0) return psd;
  const std::size_t L = psd.shape()[0];
  Var inv_total = reshape(power(sum(psd), -1.0), {1, 1});
  return reshape(matmul(reshape(psd, {L, 1}), inv_total), {L});
}

OverallLoss overall_loss(const Var& y_pred, const Tensor& y_true, int hr_gt, double fs, int epoch,
                         const ScheduleConfig& schedule, const LossOptions& opt) {
  const double alpha = schedule.alpha;
  const double beta = beta_at(epoch, schedule);
  NegPearson time = neg_pearson(y_pred, y_true);

  Var logits = psd_logits(psd_at_classes(y_pred, fs), opt.psd_logits);
  HrDistribution target;
  if (opt.real_distribution) {
    target.probs = psd_at_classes(y_true.data(), fs);
    double z = 0.0;
    for (double v : target.probs) z += v;
    for (double& v : target.probs) v /= z;
  } else {
    target = label_distribution(hr_gt, opt.sigma);
  }
  Var zero = scale(sum(logits), 0.0);
  Var ce = opt.use_ce ? freq_ce_loss(logits, hr_gt) : zero;
  Var ld = opt.use_ld ? ld_loss(target, logits) : zero;

  Var total = add(scale(time.loss, alpha), scale(add(ce, ld), beta));
  OverallLoss out;
  out.breakdown.l_time = time.loss.value().item();
  out.breakdown.l_ce = ce.value().item();
  out.breakdown.l_ld = ld.value().item();
  out.breakdown.alpha = alpha;
  out.breakdown.beta = beta;
  out.breakdown.l_total = total.value().item();
  out.degenerate = time.degenerate;
  out.total = std::move(total);
  return out;
}

}  // namespace physformer
