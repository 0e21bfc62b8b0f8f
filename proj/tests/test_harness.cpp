// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "physformer/harness.hpp"

using namespace physformer;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("physformer_test_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::vector<SynthSample> small_split(std::size_t count, std::size_t frames, std::uint64_t seed) {
  SplitSpec spec;
  spec.count = count;
  spec.frames = frames;
  spec.seed = seed;
  std::vector<SynthSample> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate(recording_config(spec, i)));
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("run defaults follow the reference training recipe") {
  const RunConfig c;
  CHECK(c.lr == 1e-4);
  CHECK(c.weight_decay == 5e-5);
  CHECK(c.epochs == 25);
  CHECK(c.batch_size == 4);
  CHECK(c.loss.sigma == 1.0);
  CHECK(c.clip_frames() == 160);
  CHECK(c.eval_clip_frames() == 300);
  const RunConfig toy = toy_run_config();
  CHECK(toy.arch.blocks == 2);
  CHECK(toy.arch.dim == 24);
  CHECK(toy.arch.heads == 2);
  CHECK(toy.arch.input == Triple{64, 32, 32});
  CHECK(toy.clip_frames() == 64);
}

TEST_CASE("config settings: apply, dump and reload") {
  RunConfig c = toy_run_config();
  apply_setting(c, "arch.N", "3");
  apply_setting(c, "arch.tube", "2x1x1");
  apply_setting(c, "schedule.strategy", "fixed");
  apply_setting(c, "schedule.beta0", "5");
  apply_setting(c, "loss.sigma", "1.5");
  apply_setting(c, "loss.psd_logits", "raw");
  apply_setting(c, "arch.attention", "vanilla");
  apply_setting(c, "lr", "0.0003");
  apply_setting(c, "epochs", "7");
  CHECK(c.arch.blocks == 3);
  CHECK(c.arch.tube == Triple{2, 1, 1});
  CHECK(c.schedule.strategy == BetaStrategy::Fixed);
  CHECK(c.schedule.total_epochs == 7);
  CHECK(c.loss.psd_logits == PsdLogits::Raw);

  const fs::path dir = scratch_dir("config");
  std::ofstream(dir / "run.cfg") << dump_config(c) << "# trailing comment\n\n";
  RunConfig back = toy_run_config();
  load_config_file(back, dir / "run.cfg");
  CHECK(dump_config(back) == dump_config(c));
  CHECK(back.lr == 0.0003);
  CHECK(back.arch.attention == AttentionKind::Vanilla);
  fs::remove_all(dir);
}

TEST_CASE("config settings: unknown keys and bad values name the key") {
  RunConfig c;
  try {
    apply_setting(c, "arch.depth", "3");
    FAIL("expected a throw");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("arch.depth") != std::string::npos);
  }
  CHECK_THROWS_AS(apply_setting(c, "lr", "fast"), std::invalid_argument);
  CHECK_THROWS_AS(apply_setting(c, "arch.tube", "4x4"), std::invalid_argument);
  CHECK_THROWS_AS(apply_setting(c, "schedule.strategy", "cosine"), std::invalid_argument);
  c.loss.sigma = 3.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  for (const auto& key : setting_keys()) CHECK_FALSE(key.empty());
}

TEST_CASE("tensor files round-trip bitwise") {
  const fs::path dir = scratch_dir("tensors");
  std::mt19937_64 rng(1);
  const NamedTensors t{{"a", Tensor::randn({2, 3}, rng)}, {"b/c", Tensor::randn({4}, rng)}};
  save_tensors(dir / "t.bin", t);
  const NamedTensors r = load_tensors(dir / "t.bin");
  REQUIRE(r.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(r[i].first == t[i].first);
    CHECK(r[i].second.shape() == t[i].second.shape());
    for (std::size_t j = 0; j < t[i].second.numel(); ++j) CHECK(r[i].second[j] == t[i].second[j]);
  }
  std::ofstream(dir / "junk.bin") << "garbage";
  CHECK_THROWS(load_tensors(dir / "junk.bin"));
  CHECK_THROWS(load_tensors(dir / "missing.bin"));
  fs::remove_all(dir);
}

TEST_CASE("clip_starts spreads ceil(frames / clip) windows uniformly") {
  CHECK(clip_starts(900, 300) == std::vector<std::size_t>{0, 300, 600});
  CHECK(clip_starts(300, 300) == std::vector<std::size_t>{0});
  CHECK(clip_starts(1000, 300) == std::vector<std::size_t>{0, 233, 467, 700});
  CHECK(clip_starts(301, 300) == std::vector<std::size_t>{0, 1});
  CHECK_THROWS_AS(clip_starts(200, 300), std::invalid_argument);
}

TEST_CASE("ground-truth signals as predictions score within quantisation") {
  const auto data = small_split(10, 900, 11);
  const RunConfig cfg = toy_run_config();
  const EvalResult r = evaluate(
      [](const SynthSample& s, std::size_t t0, std::size_t len) {
        return RppgSignal(s.gt_signal.begin() + static_cast<std::ptrdiff_t>(t0),
                          s.gt_signal.begin() + static_cast<std::ptrdiff_t>(t0 + len));
      },
      data, cfg);
  CHECK(r.metrics.mae <= 1.0);
  REQUIRE(r.recordings.size() == 10);
  CHECK(r.recordings[0].clip_hrs.size() == 3);
  CHECK(r.recordings[0].prediction.size() == 900);
}

TEST_CASE("single-clip recordings report the clip HR") {
  auto data = small_split(2, 300, 12);
  const EvalResult r = evaluate(
      [](const SynthSample& s, std::size_t t0, std::size_t len) {
        return RppgSignal(s.gt_signal.begin() + static_cast<std::ptrdiff_t>(t0),
                          s.gt_signal.begin() + static_cast<std::ptrdiff_t>(t0 + len));
      },
      data, toy_run_config(), {"x", "y"});
  for (const auto& rec : r.recordings) {
    REQUIRE(rec.clip_hrs.size() == 1);
    CHECK(rec.pred_hr == rec.clip_hrs[0]);
  }
  CHECK(r.recordings[1].id == "y");
}

TEST_CASE("report CSVs carry the per-recording rows and a metric footer") {
  const fs::path dir = scratch_dir("reports");
  const auto data = small_split(3, 300, 13);
  const EvalResult r = evaluate(
      [](const SynthSample& s, std::size_t t0, std::size_t len) {
        return RppgSignal(s.gt_signal.begin() + static_cast<std::ptrdiff_t>(t0),
                          s.gt_signal.begin() + static_cast<std::ptrdiff_t>(t0 + len));
      },
      data, toy_run_config());
  write_eval_csv(dir / "eval.csv", r);
  write_hrv_csv(dir / "hrv.csv", r, 30.0);
  const std::string eval = slurp(dir / "eval.csv");
  CHECK(eval.rfind("recording,gt_hr,pred_hr,abs_err\nrec0,", 0) == 0);
  CHECK(eval.find("\nmetric,value\nsd,") != std::string::npos);
  CHECK(eval.find("\nmae,") != std::string::npos);
  const std::string hrv = slurp(dir / "hrv.csv");
  CHECK(hrv.rfind("recording,lf_nu,hf_nu,lf_hf,rf_hz,status\n", 0) == 0);
  CHECK(std::count(hrv.begin(), hrv.end(), '\n') == 4);
  fs::remove_all(dir);
}

TEST_CASE("Adam: first step moves each weight by lr against its gradient sign") {
  ParameterStore p;
  p.add("w", Tensor({3}, std::vector<double>{1.0, -2.0, 0.5}));
  p.add("frozen", Tensor({1}, 7.0), false);
  Adam opt(0.01, 0.0);
  opt.step(p, {{"w", Tensor({3}, std::vector<double>{0.3, -4.0, 0.0})}, {"frozen", Tensor({1}, 1.0)}});
  CHECK(p.value("w")[0] == doctest::Approx(0.99).epsilon(1e-9));
  CHECK(p.value("w")[1] == doctest::Approx(-1.99).epsilon(1e-9));
  CHECK(p.value("w")[2] == 0.5);
  CHECK(p.value("frozen")[0] == 7.0);
  CHECK(opt.steps() == 1);

  // Plain L2: decay enters the gradient, so a zero gradient still moves.
  ParameterStore q;
  q.add("w", Tensor({1}, 2.0));
  Adam decay(0.01, 0.1);
  decay.step(q, {{"w", Tensor({1}, 0.0)}});
  CHECK(q.value("w")[0] == doctest::Approx(1.99).epsilon(1e-9));
}

TEST_CASE("Adam minimises a quadratic") {
  ParameterStore p;
  p.add("w", Tensor({2}, std::vector<double>{3.0, -1.0}));
  Adam opt(0.05, 0.0);
  for (int i = 0; i < 2000; ++i) {
    const Tensor& w = p.value("w");
    opt.step(p, {{"w", Tensor({2}, std::vector<double>{2 * (w[0] - 1.0), 2 * (w[1] + 0.5)})}});
  }
  CHECK(std::abs(p.value("w")[0] - 1.0) < 1e-3);
  CHECK(std::abs(p.value("w")[1] + 0.5) < 1e-3);
}

TEST_CASE("checkpoint round-trip restores forward outputs and optimiser state bitwise") {
  const fs::path dir = scratch_dir("ckpt");
  RunConfig cfg = toy_run_config();
  cfg.epochs = 1;
  const auto data = small_split(4, 160, 14);
  TrainHooks hooks;
  hooks.out_dir = dir;
  hooks.max_steps_per_epoch = 1;
  const TrainResult r = train(cfg, data, hooks);
  REQUIRE(fs::exists(dir / "checkpoint.phyf"));
  REQUIRE(fs::exists(dir / "train_log.csv"));
  CHECK(slurp(dir / "train_log.csv").rfind("epoch,step,l_time,l_ce,l_ld,alpha,beta,l_total\n", 0) == 0);

  const Checkpoint back = load_checkpoint(dir / "checkpoint.phyf");
  CHECK(back.epoch == 1);
  CHECK(back.adam_steps == 1);
  CHECK(back.rng_seed == cfg.seed);
  CHECK(back.arch.tube == cfg.arch.tube);
  for (const auto& [name, m] : r.checkpoint.adam_m) {
    REQUIRE(back.adam_m.count(name));
    for (std::size_t i = 0; i < m.numel(); ++i) CHECK(back.adam_m.at(name)[i] == m[i]);
  }
  for (const auto& name : r.checkpoint.params.names())
    CHECK(back.params.trainable(name) == r.checkpoint.params.trainable(name));

  const Tensor clip = data[0].video.to_tensor(0, 64);
  const RppgSignal a = predict_clip(model_from_checkpoint(r.checkpoint), clip);
  const RppgSignal b = predict_clip(model_from_checkpoint(back), clip);
  CHECK(a == b);

  std::ofstream(dir / "bad.phyf") << "PHYF";
  CHECK_THROWS(load_checkpoint(dir / "bad.phyf"));
  fs::remove_all(dir);
}

TEST_CASE("fixed-seed training reproduces the loss log bitwise and logs the schedule") {
  RunConfig cfg = toy_run_config();
  cfg.epochs = 2;
  cfg.schedule.total_epochs = 25;
  const auto data = small_split(8, 160, 15);
  TrainHooks hooks;
  hooks.max_steps_per_epoch = 2;
  const auto a = train(cfg, data, hooks).log, b = train(cfg, data, hooks).log;
  REQUIRE(a.size() == 4);
  REQUIRE(b.size() == 4);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].loss.l_total == b[i].loss.l_total);
    CHECK(a[i].loss.l_time == b[i].loss.l_time);
    CHECK(a[i].loss.beta == beta_at(a[i].epoch, cfg.schedule));
    CHECK(a[i].step == i);
  }
  cfg.seed = 1;
  CHECK(train(cfg, data, hooks).log[0].loss.l_total != a[0].loss.l_total);
}

TEST_CASE("non-finite loss aborts with step diagnostics") {
  auto data = small_split(4, 160, 16);
  for (auto& s : data) std::fill(s.gt_signal.begin(), s.gt_signal.end(), std::nan(""));
  RunConfig cfg = toy_run_config();
  cfg.epochs = 1;
  cfg.resample_prob = 0.0;
  try {
    train(cfg, data);
    FAIL("expected TrainingError");
  } catch (const TrainingError& e) {
    CHECK(std::string(e.what()).find("epoch 1 step 0") != std::string::npos);
  }
}

TEST_CASE("training rejects recordings shorter than the clip or at another frame rate") {
  RunConfig cfg = toy_run_config();
  CHECK_THROWS_AS(train(cfg, small_split(2, 60, 17)), std::invalid_argument);
  auto data = small_split(2, 160, 18);
  data[1].fs = 25.0;
  CHECK_THROWS_AS(train(cfg, data), std::invalid_argument);
  CHECK_THROWS_AS(train(cfg, std::vector<SynthSample>{}), std::invalid_argument);
}

TEST_CASE("first epoch lowers the temporal loss from its first-step value") {
  RunConfig cfg = toy_run_config();
  cfg.epochs = 1;
  const auto data = small_split(200, 160, 19);
  const auto log = train(cfg, data).log;
  REQUIRE(log.size() == 50);
  double mean = 0.0;
  for (const auto& row : log) mean += row.loss.l_time / static_cast<double>(log.size());
  MESSAGE("step-0 l_time " << log[0].loss.l_time << ", epoch-1 mean " << mean);
  CHECK(mean < log[0].loss.l_time);
}
