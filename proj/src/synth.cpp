// SPDX-License-Identifier: Apache-2.0
#include "physformer/synth.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "physformer/losses.hpp"

namespace physformer {

static_assert(std::endian::native == std::endian::little, "sample files are written in host byte order");

VideoClip::VideoClip(std::size_t c, std::size_t t, std::size_t h, std::size_t w)
    : channels(c), frames(t), height(h), width(w), data(c * t * h * w, 0.0f) {}

Tensor VideoClip::to_tensor(std::size_t t0, std::size_t length) const {
  if (length == 0 || t0 + length > frames)
    throw std::out_of_range("clip frames [" + std::to_string(t0) + ", " + std::to_string(t0 + length) +
                            ") exceed video length " + std::to_string(frames));
  Tensor out({1, channels, length, height, width});
  const std::size_t plane = height * width;
  for (std::size_t c = 0; c < channels; ++c) {
    const float* src = data.data() + (c * frames + t0) * plane;
    double* dst = out.ptr() + c * length * plane;
    for (std::size_t i = 0; i < length * plane; ++i) dst[i] = src[i];
  }
  return out;
}

bool MaskSpec::contains(std::size_t y, std::size_t x, std::size_t height, std::size_t width) const {
  const double u = ((static_cast<double>(x) + 0.5) / static_cast<double>(width) - cx) / rx;
  const double v = ((static_cast<double>(y) + 0.5) / static_cast<double>(height) - cy) / ry;
  if (shape == MaskShape::Rectangle) return std::abs(u) <= 1.0 && std::abs(v) <= 1.0;
  return u * u + v * v <= 1.0;
}

std::vector<bool> MaskSpec::raster(std::size_t height, std::size_t width) const {
  std::vector<bool> m(height * width);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) m[y * width + x] = contains(y, x, height, width);
  return m;
}

void SynthConfig::validate() const {
  if (hr_bpm < kMinBpm || hr_bpm > kMaxBpm) throw std::invalid_argument("synth: hr_bpm outside [42, 180]");
  if (!(fs > 0.0)) throw std::invalid_argument("synth: fs must be positive");
  if (static_cast<double>(frames) < 2.0 * fs) throw std::invalid_argument("synth: need at least 2 s of frames");
  if (height == 0 || width == 0) throw std::invalid_argument("synth: empty frame size");
  if (!(amplitude > 0.0)) throw std::invalid_argument("synth: amplitude must be positive");
  if (noise_sigma < 0.0 || drift_amp < 0.0 || flicker_amp < 0.0 || hr_jitter < 0.0 || hr_jitter >= 1.0)
    throw std::invalid_argument("synth: noise, drift, flicker and jitter must be non-negative (jitter < 1)");
  if (!(drift_period > 0.0) || !(jitter_period > 0.0) || !(flicker_hz > 0.0))
    throw std::invalid_argument("synth: periods and frequencies must be positive");
  if (!(mask.rx > 0.0) || !(mask.ry > 0.0)) throw std::invalid_argument("synth: invalid mask: non-positive radius");
  std::size_t area = 0;
  for (bool b : mask.raster(height, width)) area += b;
  if (static_cast<double>(area) < 0.1 * static_cast<double>(height * width))
    throw std::invalid_argument("synth: invalid mask: covers " + std::to_string(area) + " of " +
                                std::to_string(height * width) + " pixels, need at least 10%");
}

RppgSignal pulse_waveform(const SynthConfig& cfg) {
  const double f0 = cfg.hr_bpm / 60.0;
  const double wj = 2.0 * std::numbers::pi / cfg.jitter_period;
  RppgSignal s(cfg.frames);
  for (std::size_t i = 0; i < cfg.frames; ++i) {
    const double t = static_cast<double>(i) / cfg.fs;
    // Instantaneous frequency f0 (1 + j sin(wj t)) integrated to a phase.
    const double phi = 2.0 * std::numbers::pi * f0 * (t + cfg.hr_jitter * (1.0 - std::cos(wj * t)) / wj) + cfg.phase;
    s[i] = std::sin(phi) + 0.3 * std::sin(2.0 * phi);
  }
  return s;
}

SynthSample generate(const SynthConfig& cfg) {
  cfg.validate();
  const std::size_t T = cfg.frames, H = cfg.height, W = cfg.width, plane = H * W;
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  SynthSample out;
  out.fs = cfg.fs;
  out.gt_hr = cfg.hr_bpm;
  out.gt_signal = pulse_waveform(cfg);
  out.video = VideoClip(3, T, H, W);

  const std::vector<bool> mask = cfg.mask.raster(H, W);
  constexpr std::array<double, 3> kSkinTone{0.8, 0.55, 0.45};
  constexpr std::array<double, 3> kBackground{0.4, 0.45, 0.5};
  std::vector<double> texture(3 * plane);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < plane; ++p)
      texture[c * plane + p] = (mask[p] ? kSkinTone[c] : kBackground[c]) + 0.1 * unit(rng);
  const double drift_phase = std::numbers::pi * (unit(rng) + 1.0);
  const double flicker_phase = std::numbers::pi * (unit(rng) + 1.0);

  for (std::size_t c = 0; c < 3; ++c) {
    const double gain = cfg.amplitude * cfg.channel_gains[c];
    for (std::size_t t = 0; t < T; ++t) {
      const double time = static_cast<double>(t) / cfg.fs;
      const double drift = cfg.drift_amp * std::sin(2.0 * std::numbers::pi * time / cfg.drift_period + drift_phase);
      const double pulse = gain * out.gt_signal[t];
      const double flicker =
          cfg.flicker_amp * std::sin(2.0 * std::numbers::pi * cfg.flicker_hz * time + flicker_phase);
      float* frame = out.video.data.data() + (c * T + t) * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        double v = texture[c * plane + p] + drift + (mask[p] ? pulse : flicker);
        if (cfg.noise_sigma > 0.0) v += cfg.noise_sigma * gauss(rng);
        frame[p] = static_cast<float>(v);
      }
    }
  }
  return out;
}

RppgSignal masked_mean(const VideoClip& v, const MaskSpec& mask, std::size_t channel) {
  if (channel >= v.channels) throw std::out_of_range("masked_mean: channel out of range");
  const std::vector<bool> m = mask.raster(v.height, v.width);
  std::size_t area = 0;
  for (bool b : m) area += b;
  if (area == 0) throw std::invalid_argument("masked_mean: empty mask");
  RppgSignal out(v.frames, 0.0);
  const std::size_t plane = v.height * v.width;
  for (std::size_t t = 0; t < v.frames; ++t) {
    const float* frame = v.data.data() + (channel * v.frames + t) * plane;
    double acc = 0.0;
    for (std::size_t p = 0; p < plane; ++p)
      if (m[p]) acc += frame[p];
    out[t] = acc / static_cast<double>(area);
  }
  return out;
}

VideoClip augment_flip(const VideoClip& v) {
  VideoClip out = v;
  const std::size_t rows = v.channels * v.frames * v.height;
  for (std::size_t r = 0; r < rows; ++r) {
    float* row = out.data.data() + r * v.width;
    std::reverse(row, row + v.width);
  }
  return out;
}

std::optional<Resampled> augment_temporal_resample(const VideoClip& v, const RppgSignal& gt, double gt_hr,
                                                   double factor) {
  if (!(factor >= 0.5 && factor <= 2.0)) throw std::invalid_argument("resample factor must lie in [0.5, 2]");
  if (gt.size() != v.frames) throw std::invalid_argument("resample: signal and video lengths differ");
  if (v.frames < 2) throw std::invalid_argument("resample: need at least two frames");
  const double hr = gt_hr / factor;
  if (hr < kMinBpm || hr > kMaxBpm) return std::nullopt;

  const std::size_t L = static_cast<std::size_t>(std::floor(static_cast<double>(v.frames - 1) * factor)) + 1;
  Resampled out;
  out.gt_hr = std::clamp(hr, static_cast<double>(kMinBpm), static_cast<double>(kMaxBpm));
  out.video = VideoClip(v.channels, L, v.height, v.width);
  out.gt_signal.resize(L);
  const std::size_t plane = v.height * v.width;
  for (std::size_t i = 0; i < L; ++i) {
    const double src = static_cast<double>(i) / factor;
    const std::size_t i0 = std::min(static_cast<std::size_t>(src), v.frames - 1);
    const std::size_t i1 = std::min(i0 + 1, v.frames - 1);
    const double w = src - static_cast<double>(i0);
    out.gt_signal[i] = (1.0 - w) * gt[i0] + w * gt[i1];
    for (std::size_t c = 0; c < v.channels; ++c) {
      const float* a = v.data.data() + (c * v.frames + i0) * plane;
      const float* b = v.data.data() + (c * v.frames + i1) * plane;
      float* dst = out.video.data.data() + (c * L + i) * plane;
      for (std::size_t p = 0; p < plane; ++p)
        dst[p] = static_cast<float>((1.0 - w) * static_cast<double>(a[p]) + w * static_cast<double>(b[p]));
    }
  }
  return out;
}

SynthConfig recording_config(const SplitSpec& split, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(split.seed), static_cast<std::uint32_t>(split.seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  SynthConfig c;
  c.fs = split.fs;
  c.frames = split.frames;
  c.height = split.height;
  c.width = split.width;
  c.hr_bpm = split.min_hr + (split.max_hr - split.min_hr) * u(rng);
  c.phase = 2.0 * std::numbers::pi * u(rng);
  c.drift_period = 8.0 + 12.0 * u(rng);
  c.drift_amp = 1.0 + 2.0 * u(rng);
  c.jitter_period = 5.0 + 5.0 * u(rng);
  c.mask.shape = u(rng) < 0.75 ? MaskShape::Ellipse : MaskShape::Rectangle;
  c.mask.cx = 0.4 + 0.2 * u(rng);
  c.mask.cy = 0.4 + 0.2 * u(rng);
  c.mask.rx = 0.2 + 0.1 * u(rng);
  c.mask.ry = 0.25 + 0.12 * u(rng);
  c.flicker_amp = split.min_flicker + (split.max_flicker - split.min_flicker) * u(rng);
  c.flicker_hz = (45.0 + 130.0 * u(rng)) / 60.0;
  c.seed = rng();
  return c;
}

// ---- on-disk format -------------------------------------------------------

namespace {

constexpr char kSampleMagic[4] = {'P', 'H', 'Y', 'D'};

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& is, const std::filesystem::path& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw std::runtime_error("truncated sample file " + path.string());
  return v;
}

}  // namespace

void write_sample(const std::filesystem::path& path, const SynthSample& s) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  const VideoClip& v = s.video;
  os.write(kSampleMagic, 4);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(v.channels));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(v.frames));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(v.height));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(v.width));
  put<float>(os, static_cast<float>(s.fs));
  put<float>(os, static_cast<float>(s.gt_hr));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.gt_signal.size()));
  for (double x : s.gt_signal) put<float>(os, static_cast<float>(x));
  os.write(reinterpret_cast<const char*>(v.data.data()), static_cast<std::streamsize>(v.data.size() * sizeof(float)));
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

SynthSample read_sample(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open sample file " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kSampleMagic, 4) != 0)
    throw std::runtime_error("not a sample file (bad magic): " + path.string());
  const auto C = get<std::uint32_t>(is, path), T = get<std::uint32_t>(is, path);
  const auto H = get<std::uint32_t>(is, path), W = get<std::uint32_t>(is, path);
  SynthSample s;
  s.fs = get<float>(is, path);
  s.gt_hr = get<float>(is, path);
  const auto L = get<std::uint32_t>(is, path);
  s.gt_signal.resize(L);
  for (auto& x : s.gt_signal) x = get<float>(is, path);
  s.video = VideoClip(C, T, H, W);
  if (!is.read(reinterpret_cast<char*>(s.video.data.data()),
               static_cast<std::streamsize>(s.video.data.size() * sizeof(float))))
    throw std::runtime_error("truncated sample file " + path.string());
  return s;
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.precision(17);
  for (const auto& e : entries) os << e.path.string() << ' ' << e.label << '\n';
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open manifest " + path.string());
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string p;
    ManifestEntry e;
    if (!(ls >> p >> e.label))
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected '<path> <label>'");
    e.path = p;
    if (e.path.is_relative()) e.path = path.parent_path() / e.path;
    out.push_back(std::move(e));
  }
  return out;
}

std::filesystem::path write_split(const std::filesystem::path& dir, const SplitSpec& split) {
  if (split.count == 0) throw std::invalid_argument("split must contain at least one recording");
  std::filesystem::create_directories(dir);
  std::vector<ManifestEntry> entries;
  for (std::size_t i = 0; i < split.count; ++i) {
    const SynthConfig cfg = recording_config(split, i);
    char name[32];
    std::snprintf(name, sizeof name, "rec%05zu.phyd", i);
    write_sample(dir / name, generate(cfg));
    entries.push_back({name, cfg.hr_bpm});
  }
  const auto manifest = dir / "manifest.txt";
  write_manifest(manifest, entries);
  return manifest;
}

}  // namespace physformer
