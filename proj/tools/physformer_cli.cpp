// SPDX-License-Identifier: Apache-2.0
// Command-line front end: synth | train | eval | gradcheck | attn-dump.
#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>

#include "physformer/gradcheck.hpp"
#include "physformer/harness.hpp"

namespace fs = std::filesystem;
using namespace physformer;

namespace {

/// Exit code for problems with the invocation itself (bad flag, missing file).
constexpr int kUsageError = 2;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("PHYSFORMER_SEED");
  if (!s || !*s) return std::nullopt;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(s, &end, 10);
  if (*end) throw UsageError(std::string("PHYSFORMER_SEED is not an unsigned integer: ") + s);
  return v;
}

void require_file(const fs::path& p, const std::string& what) {
  if (p.empty()) throw UsageError(what + " is required");
  if (!fs::is_regular_file(p)) throw UsageError(what + " not found: " + p.string());
}

/// RunConfig assembled from defaults, --config, PHYSFORMER_SEED and then
/// individual --key flags, in that order of precedence (last wins).
struct ConfigFlags {
  std::string config_file;
  std::map<std::string, std::string> values;

  void attach(CLI::App& app) {
    app.add_option("--config", config_file, "key=value run configuration file");
    for (const auto& key : setting_keys()) app.add_option("--" + key, values[key], "override " + key);
  }

  RunConfig build(const CLI::App& app) const {
    RunConfig cfg = toy_run_config();
    if (!config_file.empty()) {
      require_file(config_file, "--config");
      load_config_file(cfg, config_file);
    }
    if (auto s = env_seed()) cfg.seed = *s;
    for (const auto& [key, value] : values)
      if (app.count("--" + key)) apply_setting(cfg, key, value);
    return cfg;
  }
};

int cmd_synth(fs::path out, std::size_t count, SplitSpec split) {
  if (count == 0) throw UsageError("--count must be at least 1");
  if (auto s = env_seed()) split.seed = *s;
  split.count = count;
  const fs::path manifest = write_split(out, split);
  std::printf("wrote %zu recordings, manifest %s\n", count, manifest.string().c_str());
  return 0;
}

int cmd_train(const RunConfig& cfg, const fs::path& out) {
  require_file(cfg.train_manifest, "training manifest (train_manifest)");
  fs::create_directories(out);
  std::ofstream(out / "config.txt") << dump_config(cfg);
  TrainHooks hooks;
  hooks.out_dir = out;
  double sum = 0.0;
  std::size_t n = 0;
  hooks.on_step = [&](const LogRow& r) {
    sum += r.loss.l_total;
    ++n;
  };
  hooks.on_epoch = [&](int epoch, const Checkpoint&) {
    std::printf("epoch %d/%d mean l_total %.6f\n", epoch, cfg.epochs, sum / static_cast<double>(n));
    std::fflush(stdout);
    sum = 0.0;
    n = 0;
  };
  train(cfg, hooks);
  std::printf("checkpoint %s\n", (out / "checkpoint.phyf").string().c_str());
  return 0;
}

int cmd_eval(RunConfig cfg, const fs::path& checkpoint, const fs::path& manifest, const fs::path& out) {
  require_file(checkpoint, "--checkpoint");
  const fs::path m = manifest.empty() ? cfg.eval_manifest : manifest;
  require_file(m, "evaluation manifest (--manifest or eval_manifest)");
  const Checkpoint ck = load_checkpoint(checkpoint);
  cfg.arch = ck.arch;
  const PhysFormer model = model_from_checkpoint(ck);
  std::vector<SynthSample> data;
  std::vector<std::string> ids;
  for (const auto& e : read_manifest(m)) {
    data.push_back(read_sample(e.path));
    ids.push_back(e.path.stem().string());
  }
  const EvalResult r = evaluate(model, data, cfg, ids);
  fs::create_directories(out);
  write_eval_csv(out / "eval_report.csv", r);
  write_hrv_csv(out / "hrv_report.csv", r, cfg.fs);
  std::printf("recordings %zu  SD %.3f  MAE %.3f  RMSE %.3f  r ", r.recordings.size(), r.metrics.sd, r.metrics.mae,
              r.metrics.rmse);
  if (r.metrics.r) std::printf("%.4f\n", *r.metrics.r);
  else std::printf("undefined\n");
  return 0;
}

int cmd_gradcheck(double tol, double model_tol) {
  int failures = 0;
  for (const auto& c : gradcheck_suite(tol, model_tol)) {
    const auto& r = c.report;
    failures += !r.passed;
    std::printf("%-28s %s  max_rel_err %.3e  checked %zu  kink-skipped %zu", c.name.c_str(), r.passed ? "ok  " : "FAIL",
                r.max_rel_err, r.checked, r.skipped_kinks);
    if (!r.nonfinite.empty()) std::printf("  non-finite at %zu coordinates (first %zu)", r.nonfinite.size(), r.nonfinite[0]);
    std::printf("\n");
  }
  std::printf("%s\n", failures ? "gradcheck FAILED" : "gradcheck passed");
  return failures ? 1 : 0;
}

int cmd_attn_dump(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& sample_path, std::size_t block,
                  std::size_t head, std::size_t t0, const fs::path& out) {
  require_file(checkpoint, "--checkpoint");
  require_file(sample_path, "--sample");
  const Checkpoint ck = load_checkpoint(checkpoint);
  PhysFormer model = model_from_checkpoint(ck);
  const SynthSample s = read_sample(sample_path);
  const std::size_t len = cfg.eval_clip_frames();
  const Tensor clip = s.video.to_tensor(t0, std::min(len, s.video.frames - std::min(t0, s.video.frames)));
  const Tensor attn = model.export_attention(clip, block, head);
  const RppgSignal pred = predict_clip(model, clip);

  fs::create_directories(out);
  std::ofstream a(out / "attention.csv");
  a.precision(12);
  const std::size_t M = attn.dim(0);
  for (std::size_t i = 0; i < M; ++i) {
    for (std::size_t j = 0; j < M; ++j) a << (j ? "," : "") << attn[i * M + j];
    a << '\n';
  }
  std::ofstream sig(out / "signal.csv");
  sig.precision(12);
  sig << "frame,predicted,ground_truth\n";
  for (std::size_t t = 0; t < pred.size(); ++t) sig << t0 + t << ',' << pred[t] << ',' << s.gt_signal[t0 + t] << '\n';
  std::printf("attention %zux%zu (block %zu head %zu) and %zu-frame signal written to %s\n", M, M, block, head,
              pred.size(), out.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PhysFormer rPPG toolkit"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "generate a synthetic split and its manifest");
  fs::path synth_out;
  std::size_t synth_count = 200;
  SplitSpec split;
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--count", synth_count, "number of recordings");
  synth->add_option("--frames", split.frames, "frames per recording");
  synth->add_option("--seed", split.seed, "split seed");
  synth->add_option("--fs", split.fs, "frame rate (Hz)");
  synth->add_option("--height", split.height, "frame height");
  synth->add_option("--width", split.width, "frame width");
  synth->add_option("--min-hr", split.min_hr, "lowest HR label (bpm)");
  synth->add_option("--max-hr", split.max_hr, "highest HR label (bpm)");

  auto* train_cmd = app.add_subcommand("train", "train a model; writes log, checkpoint and config under --out");
  ConfigFlags train_flags;
  fs::path train_out;
  train_flags.attach(*train_cmd);
  train_cmd->add_option("--out", train_out, "output directory")->required();

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a manifest");
  ConfigFlags eval_flags;
  fs::path eval_ckpt, eval_manifest, eval_out;
  eval_flags.attach(*eval_cmd);
  eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint file");
  eval_cmd->add_option("--manifest", eval_manifest, "evaluation manifest (default: eval_manifest)");
  eval_cmd->add_option("--out", eval_out, "output directory")->required();

  auto* gc_cmd = app.add_subcommand("gradcheck", "run the finite-difference gradient suite");
  double tol = 1e-4, model_tol = 1e-3;
  gc_cmd->add_option("--tol", tol, "relative tolerance for primitives, layers and losses");
  gc_cmd->add_option("--model-tol", model_tol, "relative tolerance for the full toy model");

  auto* attn_cmd = app.add_subcommand("attn-dump", "write one attention map and the predicted signal to CSV");
  ConfigFlags attn_flags;
  fs::path attn_ckpt, attn_sample, attn_out;
  std::size_t attn_block = 0, attn_head = 0, attn_t0 = 0;
  attn_flags.attach(*attn_cmd);
  attn_cmd->add_option("--checkpoint", attn_ckpt, "checkpoint file");
  attn_cmd->add_option("--sample", attn_sample, "sample file (.phyd)");
  attn_cmd->add_option("--block", attn_block, "block index");
  attn_cmd->add_option("--head", attn_head, "head index");
  attn_cmd->add_option("--start", attn_t0, "first frame of the clip");
  attn_cmd->add_option("--out", attn_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }

  try {
    if (*synth) return cmd_synth(synth_out, synth_count, split);
    if (*train_cmd) return cmd_train(train_flags.build(*train_cmd), train_out);
    if (*eval_cmd) return cmd_eval(eval_flags.build(*eval_cmd), eval_ckpt, eval_manifest, eval_out);
    if (*gc_cmd) return cmd_gradcheck(tol, model_tol);
    if (*attn_cmd)
      return cmd_attn_dump(attn_flags.build(*attn_cmd), attn_ckpt, attn_sample, attn_block, attn_head, attn_t0,
                           attn_out);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kUsageError;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "invalid argument: %s\n", e.what());
    return kUsageError;
  } catch (const std::out_of_range& e) {
    std::fprintf(stderr, "out of range: %s\n", e.what());
    return kUsageError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return kUsageError;
}
