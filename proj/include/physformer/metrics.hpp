// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

namespace physformer {

/// Raised when a signal carries no usable rhythm (flat spectrum, too few beats).
class EstimationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct HrEstimate {
  double hr_bpm = 0.0;
  double peak_power = 0.0;
  std::vector<double> spectrum;  // 139 class powers
};

/// Dominant integer HR from the class-frequency PSD. Needs >= 2 s of samples.
HrEstimate estimate_hr(std::span<const double> signal, double fs);

/// Zero-phase brick-wall band-pass via the DFT.
std::vector<double> bandpass(std::span<const double> signal, double fs, double lo_hz = 0.7, double hi_hz = 3.0);

struct PeakOptions {
  double max_bpm = 180.0;             // sets the minimum peak separation
  double prominence_factor = 0.3;     // times the signal standard deviation
};

/// Beat times in seconds (parabolic sub-sample refinement) of a band-passed
/// pulse signal.
std::vector<double> detect_peaks(std::span<const double> signal, double fs, const PeakOptions& opt = {});

struct HrvReport {
  double lf_nu = 0.0;
  double hf_nu = 0.0;
  double lf_hf = 0.0;
  double rf_hz = 0.0;
  double lf_power = 0.0;
  double hf_power = 0.0;
  bool degenerate = false;  // no inter-beat variability in either band
};

/// LF/HF analysis of the inter-beat-interval series; needs >= 30 s of beats.
HrvReport hrv_report(std::span<const double> beat_times);

struct MetricSet {
  double sd = 0.0;
  double mae = 0.0;
  double rmse = 0.0;
  std::optional<double> r;  // undefined for fewer than two items or zero variance
  double bias = 0.0;
};

MetricSet metric_set(std::span<const double> pred_hrs, std::span<const double> gt_hrs);

/// Pearson correlation; nullopt when undefined.
std::optional<double> pearson(std::span<const double> a, std::span<const double> b);

}  // namespace physformer
