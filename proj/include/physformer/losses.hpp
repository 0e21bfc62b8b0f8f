// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <string>
#include <vector>

#include "physformer/ops.hpp"

namespace physformer {

inline constexpr int kMinBpm = 42;
inline constexpr int kMaxBpm = 180;
inline constexpr std::size_t kHrClasses = 139;

/// Class index (0-based) for an integer HR; class k covers k + 42 bpm.
std::size_t hr_class(int bpm);
/// Rounds a real-valued label to its integer HR class label.
int hr_label(double bpm);

/// Probability vector over the 139 integer-HR classes.
struct HrDistribution {
  std::vector<double> probs;
};

struct NegPearson {
  Var loss;
  bool degenerate = false;  // prediction had zero variance
};

/// 1 - Pearson correlation between prediction and target.
NegPearson neg_pearson(const Var& pred, const Tensor& truth);

/// Squared magnitude of the mean-removed signal's direct Fourier projection
/// at each class frequency (42..180 bpm). Signal is [T].
Var psd_at_classes(const Var& signal, double fs);
std::vector<double> psd_at_classes(std::span<const double> signal, double fs);

/// Cross-entropy of softmax(logits) against the class of `hr_gt`.
Var freq_ce_loss(const Var& logits, int hr_gt);

/// Discretised Gaussian around the ground-truth class, renormalised.
HrDistribution label_distribution(int hr_gt, double sigma);
/// The same Gaussian before renormalisation.
std::vector<double> gaussian_label_weights(int hr_gt, double sigma);

/// KL(p || softmax(logits)) with 0 ln 0 = 0.
Var ld_loss(const HrDistribution& p, const Var& logits);

enum class BetaStrategy { Exponential, Linear, Fixed };

struct ScheduleConfig {
  double alpha = 0.1;
  double beta0 = 1.0;
  double eta = 5.0;
  int total_epochs = 25;
  BetaStrategy strategy = BetaStrategy::Exponential;
};

/// Frequency-loss weight for a 1-based epoch.
double beta_at(int epoch, const ScheduleConfig& cfg);

/// How the class PSD is turned into softmax logits for the frequency losses.
enum class PsdLogits {
  Raw,            // p-hat as is
  SumNormalized,  // p-hat / sum(p-hat)
};

struct LossOptions {
  double sigma = 1.0;
  PsdLogits psd_logits = PsdLogits::SumNormalized;
  bool use_ce = true;
  bool use_ld = true;
  /// Use the ground-truth signal's normalised PSD as the LD target.
  bool real_distribution = false;
};

struct LossBreakdown {
  double l_time = 0.0;
  double l_ce = 0.0;
  double l_ld = 0.0;
  double l_total = 0.0;
  double alpha = 0.0;
  double beta = 0.0;
};

struct OverallLoss {
  Var total;
  LossBreakdown breakdown;
  bool degenerate = false;
};

/// alpha * L_time + beta * (L_CE + L_LD) for one [T] prediction.
OverallLoss overall_loss(const Var& y_pred, const Tensor& y_true, int hr_gt, double fs, int epoch,
                         const ScheduleConfig& schedule, const LossOptions& opt = {});

Var psd_logits(const Var& psd, PsdLogits mode);

}  // namespace physformer
