// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "physformer/harness.hpp"

namespace physformer {

Adam::Adam(double lr, double weight_decay, double beta1, double beta2, double eps)
    : lr_(lr), wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {}

void Adam::step(ParameterStore& params, const std::map<std::string, Tensor>& grads) {
  ++t_;
  const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (const auto& name : params.trainable_names()) {
    auto g = grads.find(name);
    if (g == grads.end()) continue;
    Tensor& w = params.value(name);
    auto [mi, fresh_m] = m_.try_emplace(name, w.shape(), 0.0);
    auto [vi, fresh_v] = v_.try_emplace(name, w.shape(), 0.0);
    Tensor& m = mi->second;
    Tensor& v = vi->second;
    for (std::size_t i = 0; i < w.numel(); ++i) {
      const double gi = g->second[i] + wd_ * w[i];
      m[i] = b1_ * m[i] + (1.0 - b1_) * gi;
      v[i] = b2_ * v[i] + (1.0 - b2_) * gi * gi;
      w[i] -= lr_ * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_);
    }
  }
}

void write_log_csv(const std::filesystem::path& path, const std::vector<LogRow>& rows) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.precision(17);
  os << "epoch,step,l_time,l_ce,l_ld,alpha,beta,l_total\n";
  for (const auto& r : rows)
    os << r.epoch << ',' << r.step << ',' << r.loss.l_time << ',' << r.loss.l_ce << ',' << r.loss.l_ld << ','
       << r.loss.alpha << ',' << r.loss.beta << ',' << r.loss.l_total << '\n';
}

std::vector<SynthSample> load_split(const std::filesystem::path& manifest) {
  std::vector<SynthSample> out;
  for (const auto& e : read_manifest(manifest)) out.push_back(read_sample(e.path));
  if (out.empty()) throw std::invalid_argument("manifest " + manifest.string() + " lists no recordings");
  return out;
}

namespace {

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(c)};
  return std::mt19937_64(seq);
}

VideoClip crop(const VideoClip& v, std::size_t t0, std::size_t len) {
  VideoClip out(v.channels, len, v.height, v.width);
  const std::size_t plane = v.height * v.width;
  for (std::size_t c = 0; c < v.channels; ++c)
    std::copy_n(v.data.begin() + static_cast<std::ptrdiff_t>((c * v.frames + t0) * plane), len * plane,
                out.data.begin() + static_cast<std::ptrdiff_t>(c * len * plane));
  return out;
}

struct TrainingClip {
  VideoClip video;
  Tensor truth;
  int label = 0;
};

// Random crop with optional temporal resampling and horizontal flip.
TrainingClip training_clip(const SynthSample& s, const RunConfig& cfg, std::mt19937_64& rng) {
  const std::size_t T = cfg.clip_frames();
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double factor = 1.0;
  if (u(rng) < cfg.resample_prob) {
    for (int attempt = 0; attempt < 16; ++attempt) {
      const double f = std::exp(std::log(0.5) + u(rng) * std::log(4.0));
      const double hr = s.gt_hr / f;
      // Rejected draws are redrawn; the source span must also fit.
      const auto span = static_cast<std::size_t>(std::ceil(static_cast<double>(T - 1) / f)) + 2;
      if (hr >= kMinBpm && hr <= kMaxBpm && span <= s.video.frames) {
        factor = f;
        break;
      }
    }
  }
  TrainingClip out;
  double hr = s.gt_hr;
  const std::size_t span =
      factor == 1.0 ? T : static_cast<std::size_t>(std::ceil(static_cast<double>(T - 1) / factor)) + 2;
  if (span > s.video.frames)
    throw std::invalid_argument("recording has " + std::to_string(s.video.frames) + " frames, clip needs " +
                                std::to_string(span));
  const std::size_t t0 = std::uniform_int_distribution<std::size_t>(0, s.video.frames - span)(rng);
  VideoClip v = crop(s.video, t0, span);
  RppgSignal gt(s.gt_signal.begin() + static_cast<std::ptrdiff_t>(t0),
                s.gt_signal.begin() + static_cast<std::ptrdiff_t>(t0 + span));
  if (factor != 1.0) {
    auto r = augment_temporal_resample(v, gt, s.gt_hr, factor);
    if (!r) throw std::logic_error("resample factor accepted but rejected on use");
    v = crop(r->video, 0, T);
    gt.assign(r->gt_signal.begin(), r->gt_signal.begin() + static_cast<std::ptrdiff_t>(T));
    hr = r->gt_hr;
  }
  if (u(rng) < cfg.flip_prob) v = augment_flip(v);
  out.video = std::move(v);
  out.truth = Tensor({T}, std::move(gt));
  out.label = hr_label(hr);
  return out;
}

std::string diagnostics(int epoch, std::size_t step, const LossBreakdown& b) {
  std::ostringstream os;
  os << "non-finite loss at epoch " << epoch << " step " << step << ": l_time=" << b.l_time << " l_ce=" << b.l_ce
     << " l_ld=" << b.l_ld << " alpha=" << b.alpha << " beta=" << b.beta << " l_total=" << b.l_total;
  return os.str();
}

}  // namespace

TrainResult train(const RunConfig& cfg, const std::vector<SynthSample>& data, const TrainHooks& hooks) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train: no training recordings");
  if (cfg.schedule.total_epochs < cfg.epochs)
    throw std::invalid_argument("schedule.total_epochs is below the number of training epochs");
  const std::size_t T = cfg.clip_frames();
  for (const auto& s : data) {
    if (s.video.frames < T) throw std::invalid_argument("train: recording shorter than the training clip");
    if (s.fs != cfg.fs) throw std::invalid_argument("train: recording frame rate differs from fs");
  }
  if (!hooks.out_dir.empty()) std::filesystem::create_directories(hooks.out_dir);

  PhysFormer model(cfg.arch, cfg.seed);
  Adam opt(cfg.lr, cfg.weight_decay);
  TrainResult result;
  const std::size_t B = cfg.batch_size;
  std::size_t steps = (data.size() + B - 1) / B;
  if (hooks.max_steps_per_epoch) steps = std::min(steps, hooks.max_steps_per_epoch);
  const std::size_t H = data.front().video.height, W = data.front().video.width;

  std::size_t global = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    auto shuffle_rng = stream(cfg.seed, static_cast<std::uint64_t>(epoch), 0xfeedu);
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    for (std::size_t s = 0; s < steps; ++s, ++global) {
      const std::size_t begin = s * B, count = std::min(B, data.size() - begin);
      Tensor batch({count, 3, T, H, W});
      std::vector<TrainingClip> clips;
      for (std::size_t i = 0; i < count; ++i) {
        auto rng = stream(cfg.seed, static_cast<std::uint64_t>(epoch), global + 1, i);
        clips.push_back(training_clip(data[order[begin + i]], cfg, rng));
        const Tensor x = clips.back().video.to_tensor();
        std::copy(x.ptr(), x.ptr() + x.numel(), batch.ptr() + i * x.numel());
      }

      Session sess(model.params(), true);
      Var y = model.forward(sess, Var(std::move(batch)));
      Var total;
      LogRow row{epoch, global, {}};
      for (std::size_t i = 0; i < count; ++i) {
        Var yi = reshape(slice(y, 0, i, 1), {T});
        OverallLoss ol = overall_loss(yi, clips[i].truth, clips[i].label, cfg.fs, epoch, cfg.schedule, cfg.loss);
        total = i == 0 ? ol.total : add(total, ol.total);
        row.loss.l_time += ol.breakdown.l_time / static_cast<double>(count);
        row.loss.l_ce += ol.breakdown.l_ce / static_cast<double>(count);
        row.loss.l_ld += ol.breakdown.l_ld / static_cast<double>(count);
        row.loss.alpha = ol.breakdown.alpha;
        row.loss.beta = ol.breakdown.beta;
      }
      total = scale(total, 1.0 / static_cast<double>(count));
      row.loss.l_total = total.value().item();
      if (!std::isfinite(row.loss.l_total)) throw TrainingError(diagnostics(epoch, global, row.loss));
      backward(total);
      opt.step(model.params(), sess.gradients());
      result.log.push_back(row);
      if (hooks.on_step) hooks.on_step(row);
    }

    Checkpoint& ck = result.checkpoint;
    ck.arch = cfg.arch;
    ck.params = model.params();
    ck.adam_m = opt.first_moments();
    ck.adam_v = opt.second_moments();
    ck.adam_steps = opt.steps();
    ck.epoch = epoch;
    ck.rng_seed = cfg.seed;
    if (!hooks.out_dir.empty()) {
      save_checkpoint(hooks.out_dir / "checkpoint.phyf", ck);
      write_log_csv(hooks.out_dir / "train_log.csv", result.log);
    }
    if (hooks.on_epoch) hooks.on_epoch(epoch, ck);
  }
  return result;
}

TrainResult train(const RunConfig& cfg, const TrainHooks& hooks) {
  if (cfg.train_manifest.empty()) throw std::invalid_argument("train: no training manifest configured");
  return train(cfg, load_split(cfg.train_manifest), hooks);
}

}  // namespace physformer
