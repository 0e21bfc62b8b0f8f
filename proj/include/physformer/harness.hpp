// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "physformer/losses.hpp"
#include "physformer/metrics.hpp"
#include "physformer/model.hpp"
#include "physformer/synth.hpp"

namespace physformer {

struct RunConfig {
  ArchConfig arch;
  ScheduleConfig schedule;
  LossOptions loss;  // loss.sigma is the label-distribution width
  double lr = 1e-4;
  double weight_decay = 5e-5;
  std::size_t batch_size = 4;
  int epochs = 25;
  std::uint64_t seed = 0;
  std::filesystem::path train_manifest;
  std::filesystem::path eval_manifest;
  double fs = 30.0;
  double clip_seconds = 160.0 / 30.0;
  double eval_clip_seconds = 10.0;
  double flip_prob = 0.5;
  double resample_prob = 0.5;

  std::size_t clip_frames() const;
  std::size_t eval_clip_frames() const;
  void validate() const;
};

/// Desk-scale run: toy architecture on 64-frame 32x32 clips.
RunConfig toy_run_config();

/// Applies one dotted key=value setting ("arch.N", "lr", ...). Throws
/// std::invalid_argument naming the key on unknown keys or bad values.
void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value);
/// Every key accepted by apply_setting.
std::vector<std::string> setting_keys();
/// Reads key=value lines ('#' comments, blank lines ignored).
void load_config_file(RunConfig& cfg, const std::filesystem::path& path);
/// Serialises every key (round-trips through load_config_file).
std::string dump_config(const RunConfig& cfg);

// ---- checkpoints ----------------------------------------------------------

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void save_tensors(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors load_tensors(const std::filesystem::path& path);

class Adam {
 public:
  Adam(double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  /// One update of every trainable parameter that has a gradient. Weight
  /// decay is added to the gradient (plain L2).
  void step(ParameterStore& params, const std::map<std::string, Tensor>& grads);

  std::int64_t steps() const { return t_; }
  std::map<std::string, Tensor>& first_moments() { return m_; }
  std::map<std::string, Tensor>& second_moments() { return v_; }
  const std::map<std::string, Tensor>& first_moments() const { return m_; }
  const std::map<std::string, Tensor>& second_moments() const { return v_; }
  void set_steps(std::int64_t t) { t_ = t; }

 private:
  double lr_, wd_, b1_, b2_, eps_;
  std::int64_t t_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

struct Checkpoint {
  ArchConfig arch;
  ParameterStore params;
  std::map<std::string, Tensor> adam_m, adam_v;
  std::int64_t adam_steps = 0;
  int epoch = 0;
  /// Training randomness is counter based: every draw derives from
  /// (rng_seed, epoch, step), so the seed plus the epoch is the full state.
  std::uint64_t rng_seed = 0;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
PhysFormer model_from_checkpoint(const Checkpoint& ckpt);

// ---- training -------------------------------------------------------------

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LogRow {
  int epoch = 0;
  std::size_t step = 0;  // global step, 0-based
  LossBreakdown loss;
};

void write_log_csv(const std::filesystem::path& path, const std::vector<LogRow>& rows);

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<LogRow> log;
};

struct TrainHooks {
  std::filesystem::path out_dir;  // empty: no files written
  std::function<void(const LogRow&)> on_step;
  std::function<void(int epoch, const Checkpoint&)> on_epoch;
  std::size_t max_steps_per_epoch = 0;  // 0: one pass over the data
};

TrainResult train(const RunConfig& cfg, const std::vector<SynthSample>& data, const TrainHooks& hooks = {});
/// Loads cfg.train_manifest and trains on it.
TrainResult train(const RunConfig& cfg, const TrainHooks& hooks = {});

std::vector<SynthSample> load_split(const std::filesystem::path& manifest);

// ---- evaluation -----------------------------------------------------------

struct RecordingResult {
  std::string id;
  double gt_hr = 0.0;
  double pred_hr = 0.0;
  std::vector<double> clip_hrs;
  RppgSignal prediction;  // clip predictions concatenated in time
};

struct EvalResult {
  MetricSet metrics;
  std::vector<RecordingResult> recordings;
};

/// Predicted rPPG for frames [t0, t0 + length) of one recording.
using Predictor = std::function<RppgSignal(const SynthSample&, std::size_t t0, std::size_t length)>;

/// Start frames of ceil(frames / clip) uniformly spaced clips.
std::vector<std::size_t> clip_starts(std::size_t frames, std::size_t clip);

EvalResult evaluate(const Predictor& predict, const std::vector<SynthSample>& data, const RunConfig& cfg,
                    const std::vector<std::string>& ids = {});
EvalResult evaluate(const PhysFormer& model, const std::vector<SynthSample>& data, const RunConfig& cfg,
                    const std::vector<std::string>& ids = {});

/// Eval-mode forward of a [1,3,T,H,W] clip.
RppgSignal predict_clip(const PhysFormer& model, const Tensor& clip);

void write_eval_csv(const std::filesystem::path& path, const EvalResult& r);
/// Per-recording HRV of the predicted signal; recordings whose beats cannot
/// support the analysis get a status message instead of values.
void write_hrv_csv(const std::filesystem::path& path, const EvalResult& r, double fs);

}  // namespace physformer
