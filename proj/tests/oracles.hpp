// SPDX-License-Identifier: Apache-2.0
// Brute-force reference implementations used as test oracles.
#pragma once

#include <cmath>
#include <complex>
#include <vector>

#include "physformer/tensor.hpp"

namespace oracle {

using physformer::Tensor;

/// Direct seven-loop cross-correlation (stride 1, zero padding `pad`),
/// optionally minus theta * x(centre) * (sum of the 18 adjacent-frame taps).
inline Tensor conv3d_loops(const Tensor& x, const Tensor& w, std::size_t pad, double theta = 0.0) {
  const std::size_t B = x.dim(0), C = x.dim(1), T = x.dim(2), H = x.dim(3), W = x.dim(4);
  const std::size_t O = w.dim(0), kt = w.dim(2), kh = w.dim(3), kw = w.dim(4);
  const std::size_t To = T + 2 * pad - kt + 1, Ho = H + 2 * pad - kh + 1, Wo = W + 2 * pad - kw + 1;
  Tensor y({B, O, To, Ho, Wo});
  auto X = [&](std::size_t b, std::size_t c, long t, long h, long ww) -> double {
    if (t < 0 || h < 0 || ww < 0 || t >= long(T) || h >= long(H) || ww >= long(W)) return 0.0;
    return x[(((b * C + c) * T + t) * H + h) * W + ww];
  };
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t t = 0; t < To; ++t)
        for (std::size_t h = 0; h < Ho; ++h)
          for (std::size_t q = 0; q < Wo; ++q) {
            double acc = 0.0;
            for (std::size_t c = 0; c < C; ++c) {
              double adjacent = 0.0;
              for (std::size_t i = 0; i < kt; ++i)
                for (std::size_t j = 0; j < kh; ++j)
                  for (std::size_t k = 0; k < kw; ++k) {
                    const double wv = w[(((o * C + c) * kt + i) * kh + j) * kw + k];
                    acc += wv * X(b, c, long(t + i) - long(pad), long(h + j) - long(pad), long(q + k) - long(pad));
                    if (i != kt / 2) adjacent += wv;
                  }
              const double centre = X(b, c, long(t + kt / 2) - long(pad), long(h + kh / 2) - long(pad),
                                      long(q + kw / 2) - long(pad));
              acc -= theta * centre * adjacent;
            }
            y[(((b * O + o) * To + t) * Ho + h) * Wo + q] = acc;
          }
  return y;
}

/// |sum_t (s_t - mean) e^{-2 pi i f t / fs}|^2 by complex accumulation.
inline double dft_power(const std::vector<double>& s, double f, double fs) {
  double m = 0.0;
  for (double v : s) m += v;
  m /= double(s.size());
  std::complex<double> acc = 0.0;
  for (std::size_t t = 0; t < s.size(); ++t)
    acc += (s[t] - m) * std::polar(1.0, -2.0 * M_PI * f * double(t) / fs);
  return std::norm(acc);
}

inline std::vector<double> sinusoid(double bpm, double fs, std::size_t n, double amp = 1.0, double phase = 0.0) {
  std::vector<double> s(n);
  for (std::size_t t = 0; t < n; ++t) s[t] = amp * std::sin(2.0 * M_PI * bpm / 60.0 * double(t) / fs + phase);
  return s;
}

}  // namespace oracle
