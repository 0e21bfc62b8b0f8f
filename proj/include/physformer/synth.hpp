// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "physformer/tensor.hpp"

namespace physformer {

/// [C, T, H, W] video in single precision; clips are widened to double only
/// when fed to the model.
struct VideoClip {
  std::size_t channels = 3, frames = 0, height = 0, width = 0;
  std::vector<float> data;

  VideoClip() = default;
  VideoClip(std::size_t c, std::size_t t, std::size_t h, std::size_t w);

  float& at(std::size_t c, std::size_t t, std::size_t y, std::size_t x) {
    return data[((c * frames + t) * height + y) * width + x];
  }
  float at(std::size_t c, std::size_t t, std::size_t y, std::size_t x) const {
    return data[((c * frames + t) * height + y) * width + x];
  }

  /// Frames [t0, t0 + length) as a [1, C, length, H, W] tensor.
  Tensor to_tensor(std::size_t t0, std::size_t length) const;
  Tensor to_tensor() const { return to_tensor(0, frames); }
};

using RppgSignal = std::vector<double>;

enum class MaskShape { Rectangle, Ellipse };

/// Skin region in fractions of the frame: centre (cx, cy) and half extents.
struct MaskSpec {
  MaskShape shape = MaskShape::Ellipse;
  double cx = 0.5, cy = 0.5;
  double rx = 0.3, ry = 0.38;

  bool contains(std::size_t y, std::size_t x, std::size_t height, std::size_t width) const;
  /// Boolean [H, W] map, row-major.
  std::vector<bool> raster(std::size_t height, std::size_t width) const;
};

struct SynthConfig {
  double hr_bpm = 90.0;
  double fs = 30.0;
  std::size_t frames = 300;
  std::size_t height = 32, width = 32;
  MaskSpec mask;
  double amplitude = 1.0;
  double noise_sigma = 1.0;
  double drift_amp = 2.0;
  double drift_period = 12.0;  // s
  double hr_jitter = 0.03;     // fractional frequency modulation depth
  double jitter_period = 7.0;  // s
  double phase = 0.0;          // pulse phase at t = 0, rad
  /// Background-only periodic illumination flicker (no effect inside the mask).
  double flicker_amp = 0.0;
  double flicker_hz = 1.0;
  std::array<double, 3> channel_gains{0.35, 1.0, 0.55};
  std::uint64_t seed = 0;

  void validate() const;
};

struct SynthSample {
  VideoClip video;
  RppgSignal gt_signal;
  double gt_hr = 0.0;
  double fs = 30.0;
};

/// Clean pulse waveform (fundamental plus 0.3x second harmonic). Depends only
/// on the rhythm fields of the config, never on the seed.
RppgSignal pulse_waveform(const SynthConfig& cfg);

SynthSample generate(const SynthConfig& cfg);

/// Mean over in-mask pixels of one channel, per frame.
RppgSignal masked_mean(const VideoClip& v, const MaskSpec& mask, std::size_t channel = 1);

VideoClip augment_flip(const VideoClip& v);

struct Resampled {
  VideoClip video;
  RppgSignal gt_signal;
  double gt_hr = 0.0;
};

/// Linear resampling along T by `factor` (output length floor((T-1) factor) + 1).
/// Heart rate scales by 1/factor; nullopt when it would leave [42, 180].
std::optional<Resampled> augment_temporal_resample(const VideoClip& v, const RppgSignal& gt, double gt_hr,
                                                   double factor);

/// Per-recording generator settings for a seed-disjoint split.
struct SplitSpec {
  std::size_t count = 200;
  std::size_t frames = 160;
  std::uint64_t seed = 1;
  double fs = 30.0;
  std::size_t height = 32, width = 32;
  double min_hr = 48.0, max_hr = 150.0;
  double min_flicker = 1.5, max_flicker = 3.0;  // amplitude range
};

/// Draws recording `index` of a split: HR, phase, drift, background flicker
/// and mask placement vary; the sample seed is derived from (split seed, index).
SynthConfig recording_config(const SplitSpec& split, std::size_t index);

// ---- on-disk format -------------------------------------------------------

void write_sample(const std::filesystem::path& path, const SynthSample& s);
SynthSample read_sample(const std::filesystem::path& path);

struct ManifestEntry {
  std::filesystem::path path;
  double label = 0.0;
};

/// One "path label" per line; relative paths resolve against the manifest.
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

/// Generates a split into `dir` (sample files plus manifest.txt).
std::filesystem::path write_split(const std::filesystem::path& dir, const SplitSpec& split);

}  // namespace physformer
