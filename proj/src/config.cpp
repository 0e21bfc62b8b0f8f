// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <fstream>
#include <sstream>

#include "physformer/harness.hpp"

namespace physformer {

std::size_t RunConfig::clip_frames() const { return static_cast<std::size_t>(std::lround(clip_seconds * fs)); }
std::size_t RunConfig::eval_clip_frames() const {
  return static_cast<std::size_t>(std::lround(eval_clip_seconds * fs));
}

void RunConfig::validate() const {
  arch.validate();
  if (!(lr > 0.0)) throw std::invalid_argument("lr must be positive");
  if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be non-negative");
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (epochs < 1) throw std::invalid_argument("epochs must be positive");
  if (!(fs > 0.0)) throw std::invalid_argument("fs must be positive");
  if (loss.sigma < 0.5 || loss.sigma > 2.0) throw std::invalid_argument("loss.sigma must lie in [0.5, 2]");
  const std::size_t tt = arch.tube[0];
  if (clip_frames() < 2 || clip_frames() % tt)
    throw std::invalid_argument("clip_seconds * fs = " + std::to_string(clip_frames()) +
                                " frames must be a positive multiple of the tube length " + std::to_string(tt));
  if (eval_clip_frames() < 2 || eval_clip_frames() % tt)
    throw std::invalid_argument("eval_clip_seconds * fs = " + std::to_string(eval_clip_frames()) +
                                " frames must be a positive multiple of the tube length " + std::to_string(tt));
  if (flip_prob < 0.0 || flip_prob > 1.0 || resample_prob < 0.0 || resample_prob > 1.0)
    throw std::invalid_argument("augmentation probabilities must lie in [0, 1]");
}

RunConfig toy_run_config() {
  RunConfig c;
  c.arch = toy_arch();
  c.clip_seconds = static_cast<double>(c.arch.input[0]) / c.fs;
  return c;
}

namespace {

std::string triple_str(const Triple& t) {
  return std::to_string(t[0]) + "x" + std::to_string(t[1]) + "x" + std::to_string(t[2]);
}

[[noreturn]] void bad(const std::string& key, const std::string& value, const std::string& why) {
  throw std::invalid_argument("config " + key + "=" + value + ": " + why);
}

double to_real(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double d = 0.0;
  try {
    d = std::stod(v, &used);
  } catch (const std::exception&) {
    bad(key, v, "expected a number");
  }
  if (used != v.size()) bad(key, v, "expected a number");
  return d;
}

std::uint64_t to_uint(const std::string& key, const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) bad(key, v, "expected an unsigned integer");
  try {
    return std::stoull(v);
  } catch (const std::exception&) {
    bad(key, v, "integer out of range");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  bad(key, v, "expected true or false");
}

Triple to_triple(const std::string& key, const std::string& v) {
  Triple t{};
  std::istringstream is(v);
  std::string part;
  int i = 0;
  while (std::getline(is, part, 'x')) {
    if (i == 3) bad(key, v, "expected TxHxW");
    t[i++] = to_uint(key, part);
  }
  if (i != 3) bad(key, v, "expected TxHxW");
  return t;
}

struct Field {
  const char* key;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

std::string real_str(double d) {
  std::ostringstream os;
  os.precision(17);
  os << d;
  return os.str();
}

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      {"arch.N", [](RunConfig& c, auto& k, auto& v) { c.arch.blocks = to_uint(k, v); },
       [](const RunConfig& c) { return std::to_string(c.arch.blocks); }},
      {"arch.h", [](RunConfig& c, auto& k, auto& v) { c.arch.heads = to_uint(k, v); },
       [](const RunConfig& c) { return std::to_string(c.arch.heads); }},
      {"arch.D", [](RunConfig& c, auto& k, auto& v) { c.arch.dim = to_uint(k, v); },
       [](const RunConfig& c) { return std::to_string(c.arch.dim); }},
      {"arch.D_ff", [](RunConfig& c, auto& k, auto& v) { c.arch.ff_dim = to_uint(k, v); },
       [](const RunConfig& c) { return std::to_string(c.arch.ff_dim); }},
      {"arch.theta", [](RunConfig& c, auto& k, auto& v) { c.arch.theta = to_real(k, v); },
       [](const RunConfig& c) { return real_str(c.arch.theta); }},
      {"arch.tau", [](RunConfig& c, auto& k, auto& v) { c.arch.tau = to_real(k, v); },
       [](const RunConfig& c) { return real_str(c.arch.tau); }},
      {"arch.tube", [](RunConfig& c, auto& k, auto& v) { c.arch.tube = to_triple(k, v); },
       [](const RunConfig& c) { return triple_str(c.arch.tube); }},
      {"arch.input", [](RunConfig& c, auto& k, auto& v) { c.arch.input = to_triple(k, v); },
       [](const RunConfig& c) { return triple_str(c.arch.input); }},
      {"arch.stem", [](RunConfig& c, auto& k, auto& v) { c.arch.stem = to_bool(k, v); },
       [](const RunConfig& c) { return std::string(c.arch.stem ? "true" : "false"); }},
      {"arch.attention",
       [](RunConfig& c, auto& k, auto& v) {
         if (v == "td") c.arch.attention = AttentionKind::TemporalDifference;
         else if (v == "vanilla") c.arch.attention = AttentionKind::Vanilla;
         else if (v == "none") c.arch.attention = AttentionKind::None;
         else bad(k, v, "expected td, vanilla or none");
       },
       [](const RunConfig& c) {
         switch (c.arch.attention) {
           case AttentionKind::TemporalDifference: return std::string("td");
           case AttentionKind::Vanilla: return std::string("vanilla");
           case AttentionKind::None: break;
         }
         return std::string("none");
       }},
      {"arch.ff",
       [](RunConfig& c, auto& k, auto& v) {
         if (v == "st") c.arch.feed_forward = FeedForwardKind::SpatioTemporal;
         else if (v == "vanilla") c.arch.feed_forward = FeedForwardKind::Vanilla;
         else bad(k, v, "expected st or vanilla");
       },
       [](const RunConfig& c) {
         return std::string(c.arch.feed_forward == FeedForwardKind::SpatioTemporal ? "st" : "vanilla");
       }},
      {"schedule.alpha", [](RunConfig& c, auto& k, auto& v) { c.schedule.alpha = to_real(k, v); },
       [](const RunConfig& c) { return real_str(c.schedule.alpha); }},
      {"schedule.beta0", [](RunConfig& c, auto& k, auto& v) { c.schedule.beta0 = to_real(k, v); },
       [](const RunConfig& c) { return real_str(c.schedule.beta0); }},
      {"schedule.eta", [](RunConfig& c, auto& k, auto& v) { c.schedule.eta = to_real(k, v); },
       [](const RunConfig& c) { return real_str(c.schedule.eta); }},
      {"schedule.strategy",
       [](RunConfig& c, auto& k, auto& v) {
         if (v == "exponential") c.schedule.strategy = BetaStrategy::Exponential;
         else if (v == "linear") c.schedule.strategy = BetaStrategy::Linear;
         else if (v == "fixed") c.schedule.strategy = BetaStrategy::Fixed;
         else bad(k, v, "expected exponential, linear or fixed");
       },
       [](const RunConfig& c) {
         switch (c.schedule.strategy) {
           case BetaStrategy::Exponential: return std::string("exponential");
           case BetaStrategy::Linear: return std::string("linear");
           case BetaStrategy::Fixed: break;
         }
         return std::string("fixed");
       }},
      {"loss.sigma", [](RunConfig& c, auto& k, auto& v) { c.loss.sigma = to_real(k, v); },
       [](const RunConfig& c) { return real_str(c.loss.sigma); }},
      {"loss.psd_logits",
       [](RunConfig& c, auto& k, auto& v) {
         if (v == "sum") c.loss.psd_logits = PsdLogits::SumNormalized;
         else if (v == "raw") c.loss.psd_logits = PsdLogits::Raw;
         else bad(k, v, "expected sum or raw");
       },
       [](const RunConfig& c) { return std::string(c.loss.psd_logits == PsdLogits::Raw ? "raw" : "sum"); }},
      {"loss.ce", [](RunConfig& c, auto& k, auto& v) { c.loss.use_ce = to_bool(k, v); },
       [](const RunConfig& c) { return std::string(c.loss.use_ce ? "true" : "false"); }},
      {"loss.ld", [](RunConfig& c, auto& k, auto& v) { c.loss.use_ld = to_bool(k, v); },
       [](const RunConfig& c) { return std::string(c.loss.use_ld ? "true" : "false"); }},
      {"loss.real_distribution", [](RunConfig& c, auto& k, auto& v) { c.loss.real_distribution = to_bool(k, v); },
       [](const RunConfig& c) { return std::string(c.loss.real_distribution ? "true" : "false"); }},
      {"lr", [](RunConfig& c, auto& k, auto& v) { c.lr = to_real(k, v); },
       [](const RunConfig& c) { return real_str(c.lr); }},
      {"weight_decay", [](RunConfig& c, auto& k, auto& v) { c.weight_decay = to_real(k, v); },
       [](const RunConfig& c) { return real_str(c.weight_decay); }},
      {"batch_size", [](RunConfig& c, auto& k, auto& v) { c.batch_size = to_uint(k, v); },
       [](const RunConfig& c) { return std::to_string(c.batch_size); }},
      {"epochs",
       [](RunConfig& c, auto& k, auto& v) {
         c.epochs = static_cast<int>(to_uint(k, v));
         c.schedule.total_epochs = c.epochs;
       },
       [](const RunConfig& c) { return std::to_string(c.epochs); }},
      {"seed", [](RunConfig& c, auto& k, auto& v) { c.seed = to_uint(k, v); },
       [](const RunConfig& c) { return std::to_string(c.seed); }},
      {"train_manifest", [](RunConfig& c, auto&, auto& v) { c.train_manifest = v; },
       [](const RunConfig& c) { return c.train_manifest.string(); }},
      {"eval_manifest", [](RunConfig& c, auto&, auto& v) { c.eval_manifest = v; },
       [](const RunConfig& c) { return c.eval_manifest.string(); }},
      {"fs", [](RunConfig& c, auto& k, auto& v) { c.fs = to_real(k, v); },
       [](const RunConfig& c) { return real_str(c.fs); }},
      {"clip_seconds", [](RunConfig& c, auto& k, auto& v) { c.clip_seconds = to_real(k, v); },
       [](const RunConfig& c) { return real_str(c.clip_seconds); }},
      {"eval_clip_seconds", [](RunConfig& c, auto& k, auto& v) { c.eval_clip_seconds = to_real(k, v); },
       [](const RunConfig& c) { return real_str(c.eval_clip_seconds); }},
      {"augment.flip", [](RunConfig& c, auto& k, auto& v) { c.flip_prob = to_real(k, v); },
       [](const RunConfig& c) { return real_str(c.flip_prob); }},
      {"augment.resample", [](RunConfig& c, auto& k, auto& v) { c.resample_prob = to_real(k, v); },
       [](const RunConfig& c) { return real_str(c.resample_prob); }},
  };
  return f;
}

}  // namespace

void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : fields())
    if (key == f.key) return f.set(cfg, key, value);
  throw std::invalid_argument("unknown config key '" + key + "'");
}

std::vector<std::string> setting_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.emplace_back(f.key);
  return keys;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void load_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config file " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument(path.string() + ":" + std::to_string(lineno) + ": expected key=value");
    try {
      apply_setting(cfg, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  // Relative manifest paths are relative to the config file.
  for (auto* p : {&cfg.train_manifest, &cfg.eval_manifest})
    if (!p->empty() && p->is_relative()) *p = path.parent_path() / *p;
}

std::string dump_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + "=" + f.get(cfg) + "\n";
  return out;
}

}  // namespace physformer
