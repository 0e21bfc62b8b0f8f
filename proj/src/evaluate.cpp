// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <fstream>

#include "physformer/harness.hpp"

namespace physformer {

std::vector<std::size_t> clip_starts(std::size_t frames, std::size_t clip) {
  if (clip == 0) throw std::invalid_argument("clip length must be positive");
  if (frames < clip)
    throw std::invalid_argument("recording has " + std::to_string(frames) + " frames, shorter than the " +
                                std::to_string(clip) + "-frame evaluation clip");
  const std::size_t n = (frames + clip - 1) / clip;
  if (n == 1) return {0};
  std::vector<std::size_t> starts(n);
  for (std::size_t i = 0; i < n; ++i)
    starts[i] = static_cast<std::size_t>(
        std::lround(static_cast<double>(i) * static_cast<double>(frames - clip) / static_cast<double>(n - 1)));
  return starts;
}

RppgSignal predict_clip(const PhysFormer& model, const Tensor& clip) {
  ParameterStore params = model.params();
  Session s(params, false);
  const Var y = model.forward(s, Var(clip));
  if (y.shape()[0] != 1) throw std::invalid_argument("predict_clip expects a single clip");
  return {y.value().data().begin(), y.value().data().end()};
}

EvalResult evaluate(const Predictor& predict, const std::vector<SynthSample>& data, const RunConfig& cfg,
                    const std::vector<std::string>& ids) {
  if (data.empty()) throw std::invalid_argument("evaluate: no recordings");
  if (!ids.empty() && ids.size() != data.size()) throw std::invalid_argument("evaluate: one id per recording");
  const std::size_t clip = cfg.eval_clip_frames();
  EvalResult out;
  std::vector<double> preds, gts;
  for (std::size_t r = 0; r < data.size(); ++r) {
    const SynthSample& s = data[r];
    RecordingResult rec;
    rec.id = ids.empty() ? "rec" + std::to_string(r) : ids[r];
    rec.gt_hr = s.gt_hr;
    for (std::size_t t0 : clip_starts(s.video.frames, clip)) {
      const RppgSignal sig = predict(s, t0, clip);
      rec.clip_hrs.push_back(estimate_hr(sig, cfg.fs).hr_bpm);
      rec.prediction.insert(rec.prediction.end(), sig.begin(), sig.end());
    }
    double acc = 0.0;
    for (double h : rec.clip_hrs) acc += h;
    rec.pred_hr = acc / static_cast<double>(rec.clip_hrs.size());
    preds.push_back(rec.pred_hr);
    gts.push_back(rec.gt_hr);
    out.recordings.push_back(std::move(rec));
  }
  out.metrics = metric_set(preds, gts);
  return out;
}

EvalResult evaluate(const PhysFormer& model, const std::vector<SynthSample>& data, const RunConfig& cfg,
                    const std::vector<std::string>& ids) {
  return evaluate(
      [&model](const SynthSample& s, std::size_t t0, std::size_t len) {
        return predict_clip(model, s.video.to_tensor(t0, len));
      },
      data, cfg, ids);
}

void write_eval_csv(const std::filesystem::path& path, const EvalResult& r) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.precision(10);
  os << "recording,gt_hr,pred_hr,abs_err\n";
  for (const auto& rec : r.recordings)
    os << rec.id << ',' << rec.gt_hr << ',' << rec.pred_hr << ',' << std::abs(rec.pred_hr - rec.gt_hr) << '\n';
  os << "\nmetric,value\n";
  os << "sd," << r.metrics.sd << "\nmae," << r.metrics.mae << "\nrmse," << r.metrics.rmse << "\nr,";
  if (r.metrics.r) os << *r.metrics.r;
  else os << "undefined";
  os << '\n';
}

void write_hrv_csv(const std::filesystem::path& path, const EvalResult& r, double fs) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.precision(10);
  os << "recording,lf_nu,hf_nu,lf_hf,rf_hz,status\n";
  for (const auto& rec : r.recordings) {
    os << rec.id << ',';
    try {
      const HrvReport h = hrv_report(detect_peaks(bandpass(rec.prediction, fs), fs));
      os << h.lf_nu << ',' << h.hf_nu << ',' << h.lf_hf << ',' << h.rf_hz << ','
         << (h.degenerate ? "degenerate" : "ok") << '\n';
    } catch (const std::exception& e) {
      std::string msg = e.what();
      for (char& c : msg)
        if (c == ',') c = ';';
      os << ",,,," << msg << '\n';
    }
  }
}

}  // namespace physformer
