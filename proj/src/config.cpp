#include "m2d/config.hpp"

#include <cctype>
#include <climits>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "m2d/errors.hpp"

namespace m2d {
namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& msg) { throw ConfigError(msg); }

void require_object(const json& j, const std::string& path) {
  if (!j.is_object()) fail(path + " must be an object");
}

double as_double(const json& j, const std::string& path) {
  if (!j.is_number()) fail(path + " must be a number");
  return j.get<double>();
}

long as_long(const json& j, const std::string& path) {
  if (!j.is_number_integer()) fail(path + " must be an integer");
  return j.get<long>();
}

int as_int(const json& j, const std::string& path) {
  long v = as_long(j, path);
  if (v < INT_MIN || v > INT_MAX) fail(path + " out of range");
  return static_cast<int>(v);
}

uint64_t as_u64(const json& j, const std::string& path) {
  if (!j.is_number_unsigned() && !(j.is_number_integer() && j.get<long long>() >= 0))
    fail(path + " must be a non-negative integer");
  return j.get<uint64_t>();
}

std::string as_string(const json& j, const std::string& path) {
  if (!j.is_string()) fail(path + " must be a string");
  return j.get<std::string>();
}

void parse_mel(const json& j, MelConfig& mel, const std::string& path) {
  require_object(j, path);
  for (const auto& [key, val] : j.items()) {
    if (key == "sample_rate_hz") mel.sample_rate_hz = as_int(val, path + ".sample_rate_hz");
    else if (key == "window_ms") mel.window_ms = as_double(val, path + ".window_ms");
    else if (key == "hop_ms") mel.hop_ms = as_double(val, path + ".hop_ms");
    else if (key == "n_mels") mel.n_mels = as_int(val, path + ".n_mels");
    else if (key == "fmin_hz") mel.fmin_hz = as_double(val, path + ".fmin_hz");
    else if (key == "fmax_hz") mel.fmax_hz = as_double(val, path + ".fmax_hz");
    else fail("unknown config key: " + path + "." + key);
  }
}

// Either {"preset": name} or explicit {"mean": m, "std_dev": s}; mixing the
// two forms is rejected so a typo cannot silently half-apply.
void parse_stats(const json& j, RunConfig& cfg, const std::string& path) {
  require_object(j, path);
  bool has_preset = false, has_value = false;
  for (const auto& [key, val] : j.items()) {
    if (key == "preset") {
      cfg.stats_preset = as_string(val, path + ".preset");
      has_preset = true;
    } else if (key == "mean") {
      cfg.stats.mean = as_double(val, path + ".mean");
      has_value = true;
    } else if (key == "std_dev") {
      cfg.stats.std_dev = as_double(val, path + ".std_dev");
      has_value = true;
    } else {
      fail("unknown config key: " + path + "." + key);
    }
  }
  if (has_preset && has_value) fail(path + ": give either preset or mean/std_dev, not both");
  if (has_value) cfg.stats_preset.clear();
  if (has_preset && cfg.stats_preset != "dataset")
    cfg.stats = dataset_stats_preset(cfg.stats_preset);
}

void parse_encoder(const json& j, EncoderConfig& enc, const std::string& path) {
  require_object(j, path);
  for (const auto& [key, val] : j.items()) {
    if (key == "depth") enc.depth = as_int(val, path + ".depth");
    else if (key == "dim") enc.dim = as_int(val, path + ".dim");
    else if (key == "heads") enc.heads = as_int(val, path + ".heads");
    else if (key == "mlp_ratio") enc.mlp_ratio = as_double(val, path + ".mlp_ratio");
    else if (key == "patch_f") enc.patch_f = as_int(val, path + ".patch_f");
    else if (key == "patch_t") enc.patch_t = as_int(val, path + ".patch_t");
    else if (key == "predictor_depth") enc.predictor_depth = as_int(val, path + ".predictor_depth");
    else if (key == "predictor_dim") enc.predictor_dim = as_int(val, path + ".predictor_dim");
    else fail("unknown config key: " + path + "." + key);
  }
}

void parse_schedule(const json& j, TauSchedule& sch, const std::string& path) {
  require_object(j, path);
  for (const auto& [key, val] : j.items()) {
    if (key == "tau_start") sch.tau_start = as_double(val, path + ".tau_start");
    else if (key == "tau_end") sch.tau_end = as_double(val, path + ".tau_end");
    else fail("unknown config key: " + path + "." + key);
  }
}

void parse_optimizer(const json& j, OptimizerConfig& opt, const std::string& path) {
  require_object(j, path);
  for (const auto& [key, val] : j.items()) {
    if (key == "base_lr") opt.base_lr = as_double(val, path + ".base_lr");
    else if (key == "lr_scale") opt.lr_scale = as_double(val, path + ".lr_scale");
    else if (key == "beta1") opt.beta1 = as_double(val, path + ".beta1");
    else if (key == "beta2") opt.beta2 = as_double(val, path + ".beta2");
    else if (key == "eps") opt.eps = as_double(val, path + ".eps");
    else if (key == "weight_decay") opt.weight_decay = as_double(val, path + ".weight_decay");
    else if (key == "warmup_steps") opt.warmup_steps = as_long(val, path + ".warmup_steps");
    else fail("unknown config key: " + path + "." + key);
  }
}

Scenario scenario_from(const std::string& name, const std::string& path) {
  if (name == "supervised") return Scenario::supervised;
  if (name == "distill") return Scenario::distill;
  if (name == "regularize") return Scenario::regularize;
  fail(path + ": unknown scenario \"" + name + "\"");
}

void parse_offline(const json& j, OfflineConfig& off, const std::string& path) {
  require_object(j, path);
  for (const auto& [key, val] : j.items()) {
    if (key == "scenario") {
      off.scenario = scenario_from(as_string(val, path + ".scenario"), path + ".scenario");
    } else if (key == "lambda_m2d") off.lambda_m2d = as_double(val, path + ".lambda_m2d");
    else if (key == "lambda_off") off.lambda_off = as_double(val, path + ".lambda_off");
    else if (key == "eta") off.eta = as_double(val, path + ".eta");
    else if (key == "n_classes") off.n_classes = as_int(val, path + ".n_classes");
    else fail("unknown config key: " + path + "." + key);
  }
}

// Scalar knobs only; the band table always follows the stock geometric
// layout, truncated to n_classes.
void parse_synth(const json& j, SynthTask& task, const std::string& path) {
  require_object(j, path);
  for (const auto& [key, val] : j.items()) {
    if (key == "n_classes") task.n_classes = as_int(val, path + ".n_classes");
    else if (key == "clips_per_class") task.clips_per_class = as_int(val, path + ".clips_per_class");
    else if (key == "duration_s") task.duration_s = as_double(val, path + ".duration_s");
    else if (key == "sample_rate_hz") task.sample_rate_hz = as_int(val, path + ".sample_rate_hz");
    else fail("unknown config key: " + path + "." + key);
  }
  if (task.n_classes < 1 || task.n_classes > static_cast<int>(task.class_spec.size()))
    fail(path + ".n_classes must lie in [1, " + std::to_string(task.class_spec.size()) + "]");
  task.class_spec.resize(task.n_classes);
}

void parse_data(const json& j, DataConfig& data, const std::string& path) {
  require_object(j, path);
  for (const auto& [key, val] : j.items()) {
    if (key == "source") {
      std::string s = as_string(val, path + ".source");
      if (s == "synth") data.use_synth = true;
      else if (s == "wav") data.use_synth = false;
      else fail(path + ".source must be \"synth\" or \"wav\"");
    } else if (key == "synth") parse_synth(val, data.synth, path + ".synth");
    else if (key == "synth_seed") data.synth_seed = as_u64(val, path + ".synth_seed");
    else if (key == "train_dir") data.train_dir = as_string(val, path + ".train_dir");
    else if (key == "background_dir") data.background_dir = as_string(val, path + ".background_dir");
    else if (key == "labels_path") data.labels_path = as_string(val, path + ".labels_path");
    else if (key == "teacher_path") data.teacher_path = as_string(val, path + ".teacher_path");
    else fail("unknown config key: " + path + "." + key);
  }
}

void apply_preset(const std::string& name, RunConfig& cfg) {
  if (name == "audioset") {
    cfg.has_offline = true;
    cfg.offline.scenario = Scenario::supervised;
    cfg.offline.lambda_m2d = 1.0;
    cfg.offline.lambda_off = 1.0;
    cfg.offline.eta = 0.0;
  } else if (name == "speech") {
    cfg.has_offline = true;
    cfg.offline.scenario = Scenario::distill;
    cfg.offline.lambda_m2d = 1.0;
    cfg.offline.lambda_off = 0.5;
    cfg.offline.eta = 0.2;
    cfg.encoder.patch_f = 80;
    cfg.encoder.patch_t = 2;
    cfg.mask_ratio = 0.6;
  } else if (name == "further") {
    cfg.has_offline = true;
    cfg.offline.scenario = Scenario::regularize;
    cfg.offline.lambda_m2d = 1.0;
    cfg.offline.lambda_off = 1.0;
    cfg.offline.eta = 0.3;
    cfg.encoder.patch_f = 16;
    cfg.encoder.patch_t = 4;
  } else {
    fail("preset: unknown preset \"" + name + "\"");
  }
}

std::string variant_name(Variant v) {
  return v == Variant::m2d ? "m2d" : "all_patches_to_target";
}

std::string scenario_name(Scenario s) {
  switch (s) {
    case Scenario::supervised: return "supervised";
    case Scenario::distill: return "distill";
    default: return "regularize";
  }
}

}  // namespace

RunConfig parse_config(const std::string& json_text) {
  RunConfig cfg;

  bool blank = true;
  for (char c : json_text)
    if (!std::isspace(static_cast<unsigned char>(c))) { blank = false; break; }
  if (!blank) {
    json root;
    try {
      root = json::parse(json_text);
    } catch (const json::parse_error& e) {
      fail(std::string("invalid JSON: ") + e.what());
    }
    require_object(root, "config");

    // Preset first so explicit keys override its choices.
    if (auto it = root.find("preset"); it != root.end()) {
      cfg.preset = as_string(*it, "preset");
      apply_preset(cfg.preset, cfg);
    }
    for (const auto& [key, val] : root.items()) {
      if (key == "preset") continue;
      else if (key == "seed") cfg.seed = as_u64(val, "seed");
      else if (key == "mel") parse_mel(val, cfg.mel, "mel");
      else if (key == "stats") parse_stats(val, cfg, "stats");
      else if (key == "encoder") parse_encoder(val, cfg.encoder, "encoder");
      else if (key == "mask_ratio") cfg.mask_ratio = as_double(val, "mask_ratio");
      else if (key == "variant") {
        std::string v = as_string(val, "variant");
        if (v == "m2d") cfg.variant = Variant::m2d;
        else if (v == "all_patches_to_target") cfg.variant = Variant::all_patches_to_target;
        else fail("variant must be \"m2d\" or \"all_patches_to_target\"");
      } else if (key == "offline") {
        cfg.has_offline = true;
        parse_offline(val, cfg.offline, "offline");
      } else if (key == "schedule") parse_schedule(val, cfg.schedule, "schedule");
      else if (key == "optimizer") parse_optimizer(val, cfg.optimizer, "optimizer");
      else if (key == "total_steps") cfg.total_steps = as_long(val, "total_steps");
      else if (key == "batch_size") cfg.batch_size = as_int(val, "batch_size");
      else if (key == "grad_accum_steps") cfg.grad_accum_steps = as_int(val, "grad_accum_steps");
      else if (key == "virtual_epoch_samples") cfg.virtual_epoch_samples = as_long(val, "virtual_epoch_samples");
      else if (key == "save_every") cfg.save_every = as_long(val, "save_every");
      else if (key == "data") parse_data(val, cfg.data, "data");
      else fail("unknown config key: " + key);
    }
  }

  // Supervised class count defaults to the synthetic task's.
  if (cfg.has_offline && cfg.offline.scenario == Scenario::supervised &&
      cfg.offline.n_classes == 0 && cfg.data.use_synth)
    cfg.offline.n_classes = cfg.data.synth.n_classes;

  cfg.schedule.total_steps = cfg.total_steps;
  cfg.optimizer.total_steps = cfg.total_steps;
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

void RunConfig::validate() const {
  mel.validate();
  if (stats_preset != "dataset") stats.validate();
  encoder.validate();
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0))
    throw ConfigError("mask_ratio must lie in (0, 1); got " + std::to_string(mask_ratio));
  if (total_steps < 1) throw ConfigError("total_steps must be >= 1");
  schedule.validate();
  if (optimizer.base_lr <= 0.0) throw ConfigError("optimizer.base_lr must be positive");
  if (optimizer.lr_scale <= 0.0) throw ConfigError("optimizer.lr_scale must be positive");
  if (optimizer.warmup_steps < 0) throw ConfigError("optimizer.warmup_steps must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (grad_accum_steps < 1) throw ConfigError("grad_accum_steps must be >= 1");
  if (virtual_epoch_samples < 0) throw ConfigError("virtual_epoch_samples must be >= 0");
  if (save_every < 0) throw ConfigError("save_every must be >= 0");
  if (has_offline) {
    offline.validate(!data.teacher_path.empty());
    if (offline.eta > 0.0 && !data.use_synth && data.background_dir.empty())
      throw ConfigError("offline.eta > 0 needs data.background_dir for wav sources");
    if (offline.scenario == Scenario::supervised && !data.use_synth && data.labels_path.empty())
      throw ConfigError("supervised scenario needs data.labels_path for wav sources");
  }
  if (data.use_synth) {
    if (data.synth.sample_rate_hz != mel.sample_rate_hz)
      throw ConfigError("data.synth.sample_rate_hz must match mel.sample_rate_hz");
    data.synth.validate();
  } else if (data.train_dir.empty()) {
    throw ConfigError("data.train_dir required when data.source is \"wav\"");
  }
}

std::string RunConfig::to_json() const {
  json root;
  if (!preset.empty()) root["preset"] = preset;
  root["seed"] = seed;
  root["mel"] = {{"sample_rate_hz", mel.sample_rate_hz}, {"window_ms", mel.window_ms},
                 {"hop_ms", mel.hop_ms},                 {"n_mels", mel.n_mels},
                 {"fmin_hz", mel.fmin_hz},               {"fmax_hz", mel.fmax_hz}};
  if (stats_preset.empty())
    root["stats"] = {{"mean", stats.mean}, {"std_dev", stats.std_dev}};
  else
    root["stats"] = {{"preset", stats_preset}};
  root["encoder"] = {{"depth", encoder.depth},
                     {"dim", encoder.dim},
                     {"heads", encoder.heads},
                     {"mlp_ratio", encoder.mlp_ratio},
                     {"patch_f", encoder.patch_f},
                     {"patch_t", encoder.patch_t},
                     {"predictor_depth", encoder.predictor_depth},
                     {"predictor_dim", encoder.predictor_dim}};
  root["mask_ratio"] = mask_ratio;
  root["variant"] = variant_name(variant);
  if (has_offline)
    root["offline"] = {{"scenario", scenario_name(offline.scenario)},
                       {"lambda_m2d", offline.lambda_m2d},
                       {"lambda_off", offline.lambda_off},
                       {"eta", offline.eta},
                       {"n_classes", offline.n_classes}};
  root["schedule"] = {{"tau_start", schedule.tau_start}, {"tau_end", schedule.tau_end}};
  root["optimizer"] = {{"base_lr", optimizer.base_lr},
                       {"lr_scale", optimizer.lr_scale},
                       {"beta1", optimizer.beta1},
                       {"beta2", optimizer.beta2},
                       {"eps", optimizer.eps},
                       {"weight_decay", optimizer.weight_decay},
                       {"warmup_steps", optimizer.warmup_steps}};
  root["total_steps"] = total_steps;
  root["batch_size"] = batch_size;
  root["grad_accum_steps"] = grad_accum_steps;
  root["virtual_epoch_samples"] = virtual_epoch_samples;
  root["save_every"] = save_every;
  json data_j = {{"source", data.use_synth ? "synth" : "wav"},
                 {"synth",
                  {{"n_classes", data.synth.n_classes},
                   {"clips_per_class", data.synth.clips_per_class},
                   {"duration_s", data.synth.duration_s},
                   {"sample_rate_hz", data.synth.sample_rate_hz}}},
                 {"synth_seed", data.synth_seed}};
  if (!data.train_dir.empty()) data_j["train_dir"] = data.train_dir;
  if (!data.background_dir.empty()) data_j["background_dir"] = data.background_dir;
  if (!data.labels_path.empty()) data_j["labels_path"] = data.labels_path;
  if (!data.teacher_path.empty()) data_j["teacher_path"] = data.teacher_path;
  root["data"] = data_j;
  return root.dump(2) + "\n";
}

}  // namespace m2d
