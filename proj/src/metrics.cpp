// SPDX-License-Identifier: Apache-2.0
#include "physformer/metrics.hpp"

#include <gsl/gsl_errno.h>
#include <gsl/gsl_spline.h>

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <numeric>

#include "physformer/losses.hpp"

namespace physformer {

HrEstimate estimate_hr(std::span<const double> signal, double fs) {
  if (!(fs > 0.0)) throw std::invalid_argument("estimate_hr: sampling rate must be positive");
  if (static_cast<double>(signal.size()) < 2.0 * fs)
    throw std::invalid_argument("estimate_hr: need at least 2 s of samples, got " + std::to_string(signal.size()));
  HrEstimate est;
  est.spectrum = psd_at_classes(signal, fs);
  const auto it = std::max_element(est.spectrum.begin(), est.spectrum.end());
  // A constant signal leaves only mean-removal rounding in the spectrum.
  double energy = 0.0;
  for (double v : signal) energy += v * v;
  if (!(*it > 1e-24 * static_cast<double>(signal.size()) * energy))
    throw EstimationError("estimate_hr: spectrum is all zero");
  est.peak_power = *it;
  est.hr_bpm = static_cast<double>(kMinBpm + (it - est.spectrum.begin()));
  return est;
}

std::vector<double> bandpass(std::span<const double> signal, double fs, double lo_hz, double hi_hz) {
  const std::size_t n = signal.size();
  if (n < 2 || !(fs > 0.0) || !(lo_hz < hi_hz)) throw std::invalid_argument("bandpass: invalid arguments");
  std::vector<double> c(n), s(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double ph = 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n);
    c[i] = std::cos(ph);
    s[i] = std::sin(ph);
  }
  std::vector<double> out(n, 0.0);
  for (std::size_t k = 1; k <= n / 2; ++k) {
    const double f = static_cast<double>(k) * fs / static_cast<double>(n);
    if (f < lo_hz || f > hi_hz) continue;
    double re = 0.0, im = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
      const std::size_t j = (k * t) % n;
      re += signal[t] * c[j];
      im -= signal[t] * s[j];
    }
    // Real inverse: Nyquist bin counted once, others twice.
    const double w = (2 * k == n ? 1.0 : 2.0) / static_cast<double>(n);
    for (std::size_t t = 0; t < n; ++t) {
      const std::size_t j = (k * t) % n;
      out[t] += w * (re * c[j] - im * s[j]);
    }
  }
  return out;
}

std::vector<double> detect_peaks(std::span<const double> x, double fs, const PeakOptions& opt) {
  const std::size_t n = x.size();
  if (!(fs > 0.0)) throw std::invalid_argument("detect_peaks: sampling rate must be positive");
  double mu = 0.0;
  for (double v : x) mu += v;
  mu /= std::max<std::size_t>(n, 1);
  double var = 0.0;
  for (double v : x) var += (v - mu) * (v - mu);
  const double sd = n ? std::sqrt(var / static_cast<double>(n)) : 0.0;

  std::vector<std::size_t> cand;
  for (std::size_t i = 1; i + 1 < n; ++i)
    if (x[i] > x[i - 1] && x[i] >= x[i + 1]) cand.push_back(i);

  // Prominence: height above the higher of the two bases, each base being the
  // minimum between the peak and the nearest higher sample on that side.
  std::vector<std::size_t> prominent;
  for (std::size_t i : cand) {
    double left_min = x[i];
    for (std::size_t j = i; j-- > 0;) {
      if (x[j] > x[i]) break;
      left_min = std::min(left_min, x[j]);
    }
    double right_min = x[i];
    for (std::size_t j = i + 1; j < n; ++j) {
      if (x[j] > x[i]) break;
      right_min = std::min(right_min, x[j]);
    }
    const double prom = x[i] - std::max(left_min, right_min);
    if (sd > 0.0 && prom >= opt.prominence_factor * sd) prominent.push_back(i);
  }

  // Enforce the minimum separation, keeping taller peaks first.
  const double min_sep = 60.0 / opt.max_bpm * fs;
  std::vector<std::size_t> order(prominent.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return x[prominent[a]] > x[prominent[b]]; });
  std::vector<bool> removed(prominent.size(), false);
  for (std::size_t oi : order) {
    if (removed[oi]) continue;
    for (std::size_t j = 0; j < prominent.size(); ++j)
      if (j != oi && !removed[j] &&
          std::abs(static_cast<double>(prominent[j]) - static_cast<double>(prominent[oi])) < min_sep)
        removed[j] = true;
  }

  std::vector<double> beats;
  for (std::size_t j = 0; j < prominent.size(); ++j) {
    if (removed[j]) continue;
    const std::size_t i = prominent[j];
    const double a = x[i - 1], b = x[i], c = x[i + 1];
    const double denom = a - 2.0 * b + c;
    const double offset = denom != 0.0 ? 0.5 * (a - c) / denom : 0.0;
    beats.push_back((static_cast<double>(i) + offset) / fs);
  }
  if (beats.size() < 3)
    throw EstimationError("detect_peaks: found " + std::to_string(beats.size()) + " beats, need at least 3");
  return beats;
}

HrvReport hrv_report(std::span<const double> beats) {
  if (beats.size() < 4 || beats.back() - beats.front() < 30.0)
    throw std::invalid_argument("hrv_report: need at least 30 s of beats");
  std::vector<double> t, ibi;
  for (std::size_t i = 1; i < beats.size(); ++i) {
    const double d = beats[i] - beats[i - 1];
    if (!(d > 0.0)) throw std::invalid_argument("hrv_report: beat times must be strictly increasing");
    t.push_back(beats[i]);
    ibi.push_back(d);
  }

  HrvReport rep;
  const double ibi_mean = std::accumulate(ibi.begin(), ibi.end(), 0.0) / static_cast<double>(ibi.size());
  double ibi_dev = 0.0;
  for (double v : ibi) ibi_dev = std::max(ibi_dev, std::abs(v - ibi_mean));
  if (ibi_dev < 1e-9) {
    rep.degenerate = true;
    return rep;
  }

  // Natural cubic spline onto a 4 Hz grid.
  constexpr double kRate = 4.0;
  gsl_set_error_handler_off();
  std::unique_ptr<gsl_interp_accel, decltype(&gsl_interp_accel_free)> acc(gsl_interp_accel_alloc(),
                                                                           &gsl_interp_accel_free);
  std::unique_ptr<gsl_spline, decltype(&gsl_spline_free)> spline(gsl_spline_alloc(gsl_interp_cspline, t.size()),
                                                                 &gsl_spline_free);
  if (gsl_spline_init(spline.get(), t.data(), ibi.data(), t.size()) != GSL_SUCCESS)
    throw std::runtime_error("hrv_report: spline fit failed");
  std::vector<double> grid;
  for (double tt = t.front(); tt <= t.back(); tt += 1.0 / kRate) grid.push_back(gsl_spline_eval(spline.get(), tt, acc.get()));
  const double gm = std::accumulate(grid.begin(), grid.end(), 0.0) / static_cast<double>(grid.size());
  const std::size_t n = grid.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double hann = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n - 1));
    grid[i] = (grid[i] - gm) * hann;
  }

  constexpr double kLfLo = 0.04, kLfHi = 0.15, kHfHi = 0.4, kStep = 0.001;
  double best = -1.0;
  for (int fi = 0; fi * kStep <= kHfHi + 1e-12; ++fi) {
    const double f = fi * kStep;
    if (f < kLfLo) continue;
    double re = 0.0, im = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double ph = 2.0 * std::numbers::pi * f * static_cast<double>(i) / kRate;
      re += grid[i] * std::cos(ph);
      im -= grid[i] * std::sin(ph);
    }
    const double p = (re * re + im * im) * kStep;
    if (f < kLfHi) {
      rep.lf_power += p;
    } else {
      rep.hf_power += p;
      if (p > best) best = p, rep.rf_hz = f;
    }
  }
  const double total = rep.lf_power + rep.hf_power;
  if (!(total > 0.0)) {
    rep.degenerate = true;
    return rep;
  }
  rep.lf_nu = rep.lf_power / total;
  rep.hf_nu = rep.hf_power / total;
  rep.lf_hf = rep.hf_power > 0.0 ? rep.lf_power / rep.hf_power : INFINITY;
  return rep;
}

std::optional<double> pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("pearson: length mismatch");
  const std::size_t n = a.size();
  if (n < 2) return std::nullopt;
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / static_cast<double>(n);
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / static_cast<double>(n);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return std::nullopt;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

MetricSet metric_set(std::span<const double> pred, std::span<const double> gt) {
  if (pred.size() != gt.size() || pred.empty())
    throw std::invalid_argument("metric_set: need equal, nonzero lengths");
  const double n = static_cast<double>(pred.size());
  MetricSet m;
  double abs_sum = 0.0, sq_sum = 0.0, err_sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = pred[i] - gt[i];
    err_sum += e;
    abs_sum += std::abs(e);
    sq_sum += e * e;
  }
  m.bias = err_sum / n;
  m.mae = abs_sum / n;
  m.rmse = std::sqrt(sq_sum / n);
  double dev = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - gt[i] - m.bias;
    dev += d * d;
  }
  m.sd = std::sqrt(dev / n);
  // Rounding can leave rmse a hair below mae when every error is equal.
  m.rmse = std::max(m.rmse, m.mae);
  m.r = pearson(pred, gt);
  return m;
}

}  // namespace physformer
