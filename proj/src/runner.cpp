#include "m2d/runner.hpp"

#include <algorithm>
#include <climits>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>

#include "json.hpp"
#include "m2d/errors.hpp"
#include "m2d/wav.hpp"

namespace m2d {
namespace {

namespace fs = std::filesystem;

std::vector<std::string> list_wavs(const std::string& dir) {
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir);
  std::vector<std::string> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".wav")
      files.push_back(e.path().string());
  std::sort(files.begin(), files.end());
  return files;
}

// "clip_id c1,c2,..." per line; blank lines and #-comments skipped.
std::map<std::string, std::vector<int>> read_labels(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open labels file " + path);
  std::map<std::string, std::vector<int>> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    std::string id, rest;
    ss >> id >> rest;
    if (id.empty() || rest.empty()) throw DataError("malformed labels line: " + line);
    std::vector<int> classes;
    std::istringstream cs(rest);
    std::string tok;
    while (std::getline(cs, tok, ',')) {
      try {
        classes.push_back(std::stoi(tok));
      } catch (const std::exception&) {
        throw DataError("malformed class index in labels line: " + line);
      }
    }
    out[id] = std::move(classes);
  }
  return out;
}

struct RawClips {
  std::vector<Spectrogram> raw;
  std::vector<std::vector<int>> labels;
  std::vector<std::string> ids;
  int n_classes = 0;
};

RawClips load_clips(const RunConfig& cfg) {
  RawClips out;
  if (cfg.data.use_synth) {
    Rng rng(cfg.data.synth_seed);
    SynthSet set = generate_synth(cfg.data.synth, rng);
    out.n_classes = set.n_classes;
    for (size_t i = 0; i < set.waves.size(); ++i) {
      out.raw.push_back(compute_logmel(set.waves[i], cfg.mel));
      out.labels.push_back({set.labels[i]});
      out.ids.push_back("synth_" + std::to_string(set.labels[i]) + "_" + std::to_string(i));
    }
    return out;
  }
  auto files = list_wavs(cfg.data.train_dir);
  if (files.empty()) throw DataError("no .wav files in " + cfg.data.train_dir);
  std::map<std::string, std::vector<int>> label_map;
  bool have_labels = !cfg.data.labels_path.empty();
  if (have_labels) label_map = read_labels(cfg.data.labels_path);
  for (const auto& f : files) {
    WavData w = read_wav(f, cfg.mel.sample_rate_hz);
    out.raw.push_back(compute_logmel(w.samples, cfg.mel));
    std::string id = fs::path(f).stem().string();
    out.ids.push_back(id);
    if (have_labels) {
      auto it = label_map.find(id);
      if (it == label_map.end()) throw DataError("no label for clip " + id);
      out.labels.push_back(it->second);
    }
  }
  if (cfg.has_offline && cfg.offline.n_classes > 0) {
    out.n_classes = cfg.offline.n_classes;
  } else if (have_labels) {
    for (const auto& ls : out.labels)
      for (int c : ls) out.n_classes = std::max(out.n_classes, c + 1);
  }
  return out;
}

Spectrogram window_of(const Spectrogram& full, long offset, int width) {
  Spectrogram w;
  w.config = full.config;
  w.data = full.data.middleCols(offset, width);
  return w;
}

Matrix grid_tensor(const PatchGrid& grid) {
  Matrix g(1, 2);
  g << double(grid.n_f), double(grid.n_t);
  return g;
}

bool same_encoder(const EncoderConfig& a, const EncoderConfig& b) {
  return a.depth == b.depth && a.dim == b.dim && a.heads == b.heads &&
         a.mlp_ratio == b.mlp_ratio && a.patch_f == b.patch_f && a.patch_t == b.patch_t &&
         a.predictor_depth == b.predictor_depth && a.predictor_dim == b.predictor_dim;
}

}  // namespace

Dataset prepare_dataset(const RunConfig& cfg) {
  cfg.validate();
  RawClips clips = load_clips(cfg);
  Dataset ds;
  ds.raw = std::move(clips.raw);
  ds.labels = std::move(clips.labels);
  ds.ids = std::move(clips.ids);
  ds.n_classes = clips.n_classes;

  if (!cfg.data.background_dir.empty()) {
    for (const auto& f : list_wavs(cfg.data.background_dir)) {
      WavData w = read_wav(f, cfg.mel.sample_rate_hz);
      ds.raw_bg.push_back(compute_logmel(w.samples, cfg.mel));
    }
    if (ds.raw_bg.empty()) throw DataError("no .wav files in " + cfg.data.background_dir);
  }

  ds.stats = cfg.stats_preset == "dataset" ? compute_stats(ds.raw) : cfg.stats;

  if (cfg.mel.n_mels % cfg.encoder.patch_f != 0)
    throw ConfigError("encoder.patch_f must divide mel.n_mels");
  long min_frames = LONG_MAX;
  for (const auto& s : ds.raw) min_frames = std::min(min_frames, s.data.cols());
  ds.grid.patch_f = cfg.encoder.patch_f;
  ds.grid.patch_t = cfg.encoder.patch_t;
  ds.grid.n_f = cfg.mel.n_mels / cfg.encoder.patch_f;
  ds.grid.n_t = int(std::max<long>(1, min_frames / cfg.encoder.patch_t));
  ds.clip_frames = ds.grid.n_t * ds.grid.patch_t;
  ds.pe = make_positional_encoding(ds.grid, cfg.encoder.dim);

  // Clips shorter than one window are padded with the dataset mean, which is
  // zero after standardization (same convention as chunked encoding).
  auto pad = [&](Spectrogram& s) {
    if (s.data.cols() >= ds.clip_frames) return;
    Matrix p = Matrix::Constant(s.data.rows(), ds.clip_frames, ds.stats.mean);
    p.leftCols(s.data.cols()) = s.data;
    s.data = std::move(p);
  };
  for (auto& s : ds.raw) pad(s);
  for (auto& s : ds.raw_bg) pad(s);
  return ds;
}

StepBatch draw_step_batch(const Dataset& ds, const RunConfig& cfg, long step) {
  if (ds.raw.empty()) throw DataError("empty dataset");
  Rng rng = Rng::for_step(cfg.seed, static_cast<uint64_t>(step));
  long n = static_cast<long>(ds.raw.size());
  long pool = cfg.virtual_epoch_samples > 0 ? cfg.virtual_epoch_samples : n;
  int b_eff = cfg.batch_size * cfg.grad_accum_steps;
  double eta = cfg.has_offline ? cfg.offline.eta : 0.0;
  bool need_clean = cfg.has_offline && cfg.offline.scenario != Scenario::supervised;
  bool need_label = cfg.has_offline && cfg.offline.scenario == Scenario::supervised;

  StepBatch sb;
  if (need_label) {
    if (ds.labels.empty()) throw DataError("supervised scenario needs labeled clips");
    sb.batch.y_label = Matrix::Zero(b_eff, cfg.offline.n_classes);
  }
  const auto& bg_pool = ds.raw_bg.empty() ? ds.raw : ds.raw_bg;

  for (int i = 0; i < b_eff; ++i) {
    long idx = long(rng.uniform_int(static_cast<uint64_t>(pool))) % n;
    const Spectrogram& full = ds.raw[size_t(idx)];
    long off = long(rng.uniform_int(static_cast<uint64_t>(full.data.cols() - ds.clip_frames + 1)));
    Spectrogram win = window_of(full, off, ds.clip_frames);

    Spectrogram noisy = win;
    if (eta > 0.0) {
      long bg_idx = long(rng.uniform_int(bg_pool.size()));
      const Spectrogram& bg = bg_pool[size_t(bg_idx)];
      long bg_off = long(rng.uniform_int(static_cast<uint64_t>(bg.data.cols() - ds.clip_frames + 1)));
      noisy = mix_noisy(win, window_of(bg, bg_off, ds.clip_frames), eta);
    }
    sb.batch.x_noisy.push_back(standardize(noisy, ds.stats));
    if (need_clean) sb.batch.y_audio.push_back(standardize(win, ds.stats));
    if (need_label) {
      for (int c : ds.labels[size_t(idx)]) {
        if (c < 0 || c >= cfg.offline.n_classes)
          throw DataError("label " + std::to_string(c) + " out of range for clip " +
                          ds.ids[size_t(idx)]);
        sb.batch.y_label(i, c) = 1.0;
      }
    }
    sb.plans.push_back(sample_mask(ds.grid.n_patches(), cfg.mask_ratio, rng));
  }
  return sb;
}

namespace {

// One optimizer update. With accumulation the micro-batch losses and
// gradients are averaged uniformly (the usual loss / accum_steps recipe).
TrainStepReport one_step(XContext& xctx, bool with_offline, OnlineState& online,
                         TargetState& target, MapperParams& mapper, bool has_mapper,
                         AdamW& opt, const RunConfig& cfg, const StepBatch& sb, long step) {
  if (cfg.grad_accum_steps == 1) {
    if (with_offline)
      return train_step_x(xctx, online, target, mapper, sb.batch, sb.plans, opt, step);
    return train_step(xctx.core, online, target, sb.batch.x_noisy, sb.plans, opt, step);
  }

  std::vector<Matrix*> params;
  visit_params(online, [&](const std::string&, Matrix& m) { params.push_back(&m); });
  if (has_mapper) {
    params.push_back(&mapper.lin.w);
    params.push_back(&mapper.lin.b);
  }

  GradStore combined;
  double lm = 0.0, lo = 0.0, lt = 0.0;
  const double w = 1.0 / cfg.grad_accum_steps;
  for (int a = 0; a < cfg.grad_accum_steps; ++a) {
    OfflineBatch mb;
    std::vector<MaskPlan> mp;
    for (int i = a * cfg.batch_size; i < (a + 1) * cfg.batch_size; ++i) {
      mb.x_noisy.push_back(sb.batch.x_noisy[size_t(i)]);
      if (!sb.batch.y_audio.empty()) mb.y_audio.push_back(sb.batch.y_audio[size_t(i)]);
      mp.push_back(sb.plans[size_t(i)]);
    }
    if (sb.batch.y_label.size() > 0)
      mb.y_label = sb.batch.y_label.middleRows(long(a) * cfg.batch_size, cfg.batch_size);

    GradStore g;
    if (with_offline) {
      XForwardResult r = m2dx_forward(xctx, online, target, mapper, mb, mp, &g);
      lm += w * r.loss_m2d;
      lo += w * r.loss_off;
      lt += w * r.loss_total;
    } else {
      double l = m2d_forward(xctx.core, online, target, mb.x_noisy, mp, &g);
      lm += w * l;
      lt += w * l;
    }
    for (Matrix* p : params)
      if (g.has(p)) combined.add(p, g.get(p), w);
  }

  if (!std::isfinite(lt)) throw DivergenceError(step, "combined loss " + std::to_string(lt));
  if (lm > 4.0 + 1e-3)
    throw DivergenceError(step, "masked-prediction loss " + std::to_string(lm));
  opt.step(combined);
  double tau = tau_at(xctx.core.schedule, step);
  ema_update(target, online, tau);

  TrainStepReport rep;
  rep.loss_m2d = lm;
  rep.loss_off = lo;
  rep.loss_total = lt;
  rep.step = step;
  rep.tau_used = tau;
  return rep;
}

RunResult run_impl(const RunConfig& cfg_in, const std::string& out_dir,
                   const CheckpointData* resume, bool with_offline) {
  RunConfig cfg = cfg_in;
  cfg.validate();
  if (with_offline && !cfg.has_offline)
    throw ConfigError("pretrain-x needs an offline section in the config");
  if (!with_offline && cfg.has_offline)
    throw ConfigError("config has an offline section; use pretrain-x");

  Dataset ds = prepare_dataset(cfg);

  // The snapshot carries resolved stats so checkpoint consumers reproduce
  // the training-time normalization without the data.
  RunConfig snap_cfg = cfg;
  snap_cfg.stats = ds.stats;
  if (snap_cfg.stats_preset == "dataset") snap_cfg.stats_preset.clear();
  const std::string snapshot = snap_cfg.to_json();

  Rng init_rng(cfg.seed);
  OnlineState online = init_online(cfg.encoder, init_rng);
  TargetState target = init_target_from(online);
  MapperParams mapper;
  bool has_mapper = false;
  std::unique_ptr<FrozenEncoderTeacher> teacher;

  XContext xctx;
  xctx.core.encoder = cfg.encoder;
  xctx.core.grid = ds.grid;
  xctx.core.pe = ds.pe;
  xctx.core.schedule = cfg.schedule;
  xctx.core.variant = cfg.variant;

  if (with_offline) {
    xctx.offline = cfg.offline;
    if (cfg.offline.scenario != Scenario::supervised) {
      CheckpointData tckpt = load_checkpoint(cfg.data.teacher_path);
      if (cfg.offline.scenario == Scenario::regularize) {
        LoadedModel orig = model_from_checkpoint(tckpt);
        if (!same_encoder(orig.cfg.encoder, cfg.encoder))
          throw ConsistencyError("regularize teacher architecture differs from this run's encoder");
        RegularizeSetup rs = regularize_setup(orig.online, cfg.encoder, ds.grid, ds.clip_frames);
        online = std::move(rs.online_init);
        target = init_target_from(online);
        teacher = std::move(rs.teacher);
      } else {
        FeatureExtractor tex = extractor_from_checkpoint(tckpt);
        int chunk = tex.grid.n_t * tex.grid.patch_t;
        teacher = std::make_unique<FrozenEncoderTeacher>(std::move(tex), chunk);
      }
      xctx.teacher = teacher.get();
    }
    long out_dim = cfg.offline.scenario == Scenario::supervised ? cfg.offline.n_classes
                                                                : teacher->feature_dim();
    mapper = init_mapper(ds.grid.n_f * cfg.encoder.dim, int(out_dim), init_rng);
    has_mapper = true;
  }

  AdamW opt(cfg.optimizer);
  opt.register_model(online);
  if (has_mapper) {
    opt.register_param("mapper.w", &mapper.lin.w);
    opt.register_param("mapper.b", &mapper.lin.b);
  }

  long start_step = 0;
  if (resume) {
    if (resume->config_json != snapshot)
      throw ConsistencyError("resume checkpoint was produced by a different config");
    restore_state(*resume, online, target, has_mapper ? &mapper : nullptr, &opt);
    start_step = resume->step;
    if (start_step >= cfg.total_steps)
      throw ConsistencyError("checkpoint already has " + std::to_string(start_step) +
                             " of " + std::to_string(cfg.total_steps) + " steps");
  }

  fs::create_directories(out_dir);
  RunResult result;
  result.metrics_path = out_dir + "/metrics.csv";
  result.checkpoint_path = out_dir + "/checkpoint.ckpt";
  MetricsWriter metrics(result.metrics_path);

  auto snapshot_now = [&](long done) {
    CheckpointData c = snapshot_state(done, snapshot, online, target,
                                      has_mapper ? &mapper : nullptr, &opt);
    c.tensors.emplace_back("grid.shape", grid_tensor(ds.grid));
    return c;
  };

  for (long step = start_step; step < cfg.total_steps; ++step) {
    StepBatch sb = draw_step_batch(ds, cfg, step);
    TrainStepReport rep =
        one_step(xctx, with_offline, online, target, mapper, has_mapper, opt, cfg, sb, step);
    metrics.add(step + 1, rep.loss_m2d, rep.loss_off, rep.loss_total, rep.tau_used);
    result.last_loss_total = rep.loss_total;
    result.steps_done = step + 1;
    if (cfg.save_every > 0 && (step + 1) % cfg.save_every == 0 && step + 1 < cfg.total_steps)
      save_checkpoint(out_dir + "/checkpoint_" + std::to_string(step + 1) + ".ckpt",
                      snapshot_now(step + 1));
  }

  save_checkpoint(result.checkpoint_path, snapshot_now(cfg.total_steps));
  metrics.close();
  return result;
}

}  // namespace

RunResult run_pretrain(const RunConfig& cfg, const std::string& out_dir,
                       const CheckpointData* resume) {
  return run_impl(cfg, out_dir, resume, false);
}

RunResult run_pretrain_x(const RunConfig& cfg, const std::string& out_dir,
                         const CheckpointData* resume) {
  return run_impl(cfg, out_dir, resume, true);
}

LoadedModel model_from_checkpoint(const CheckpointData& ckpt) {
  LoadedModel m;
  m.cfg = parse_config(ckpt.config_json);
  const Matrix* g = ckpt.find("grid.shape");
  if (!g || g->rows() != 1 || g->cols() != 2)
    throw ConsistencyError("checkpoint lacks a grid.shape record");
  m.grid.patch_f = m.cfg.encoder.patch_f;
  m.grid.patch_t = m.cfg.encoder.patch_t;
  m.grid.n_f = int((*g)(0, 0));
  m.grid.n_t = int((*g)(0, 1));
  m.pe = make_positional_encoding(m.grid, m.cfg.encoder.dim);
  Rng rng(m.cfg.seed);
  m.online = init_online(m.cfg.encoder, rng);
  m.target = init_target_from(m.online);
  restore_state(ckpt, m.online, m.target, nullptr, nullptr);
  return m;
}

FeatureExtractor extractor_from_checkpoint(const CheckpointData& ckpt) {
  LoadedModel m = model_from_checkpoint(ckpt);
  return make_extractor(m.online, m.cfg.encoder, m.grid);
}

ExtractResult extract_features(const CheckpointData& ckpt, const RunConfig& data_cfg) {
  LoadedModel m = model_from_checkpoint(ckpt);
  RunConfig eff = m.cfg;  // mel, stats, encoder pinned by the training run
  eff.data = data_cfg.data;
  RawClips clips = load_clips(eff);
  FeatureExtractor ex = make_extractor(m.online, m.cfg.encoder, m.grid);
  int chunk = m.grid.n_t * m.grid.patch_t;

  ExtractResult res;
  res.ids = std::move(clips.ids);
  res.task = eff.data.use_synth
                 ? "synth" + std::to_string(eff.data.synth.n_classes)
                 : fs::path(eff.data.train_dir).filename().string();
  res.n_classes = clips.n_classes;
  for (size_t i = 0; i < clips.raw.size(); ++i) {
    Spectrogram spec = standardize(clips.raw[i], m.cfg.stats);
    ClipFeature cf = clip_feature(encode_chunked(ex, spec, chunk));
    if (res.features.size() == 0) res.features.resize(long(clips.raw.size()), cf.data.cols());
    res.features.row(long(i)) = cf.data.row(0);
    bool single = i < clips.labels.size() && clips.labels[i].size() == 1;
    res.labels.push_back(single ? clips.labels[i][0] : -1);
  }
  return res;
}

void write_features(const std::string& path, const ExtractResult& res) {
  CheckpointData c;
  nlohmann::json meta;
  meta["ids"] = res.ids;
  meta["task"] = res.task;
  meta["n_classes"] = res.n_classes;
  c.config_json = meta.dump();
  c.tensors.emplace_back("features", res.features);
  Matrix lab(1, long(res.labels.size()));
  for (size_t i = 0; i < res.labels.size(); ++i) lab(0, long(i)) = res.labels[i];
  c.tensors.emplace_back("labels", lab);
  save_checkpoint(path, c);
}

ExtractResult read_features(const std::string& path) {
  CheckpointData c = load_checkpoint(path);
  const Matrix* f = c.find("features");
  const Matrix* l = c.find("labels");
  if (!f || !l) throw ConsistencyError("not a feature container: " + path);
  ExtractResult res;
  res.features = *f;
  for (long i = 0; i < l->cols(); ++i) res.labels.push_back(int((*l)(0, i)));
  try {
    nlohmann::json meta = nlohmann::json::parse(c.config_json);
    for (const auto& id : meta.at("ids")) res.ids.push_back(id.get<std::string>());
    res.task = meta.at("task").get<std::string>();
    res.n_classes = meta.at("n_classes").get<int>();
  } catch (const nlohmann::json::exception&) {
    throw ConsistencyError("feature container has a malformed manifest: " + path);
  }
  if (long(res.ids.size()) != res.features.rows() || l->cols() != res.features.rows())
    throw ConsistencyError("feature container rows disagree with its manifest: " + path);
  return res;
}

EncoderProbe probe_features(const Matrix& features, const std::vector<int>& labels,
                            int n_classes, const std::vector<uint64_t>& seeds,
                            const ProbeHyper& hyper) {
  if (seeds.empty()) throw ConfigError("probe needs at least one seed");
  for (int l : labels)
    if (l < 0) throw DataError("unlabeled clips cannot be probed");
  EncoderProbe probe;
  double lo = 1.0, hi = 0.0;
  for (uint64_t s : seeds) {
    ProbeResult r = linear_probe(features, labels, n_classes, hyper, s);
    probe.per_seed.push_back(r);
    probe.mean_accuracy += r.accuracy;
    lo = std::min(lo, r.accuracy);
    hi = std::max(hi, r.accuracy);
  }
  probe.mean_accuracy /= double(seeds.size());
  probe.accuracy_spread = hi - lo;
  return probe;
}

CompareResult compare_to_random_init(const CheckpointData& ckpt,
                                     const std::vector<uint64_t>& seeds,
                                     const ProbeHyper& hyper) {
  LoadedModel m = model_from_checkpoint(ckpt);
  if (!m.cfg.data.use_synth)
    throw ConfigError("compare needs a config with a synthetic task");
  FeatureExtractor candidate = make_extractor(m.online, m.cfg.encoder, m.grid);
  Rng rng(m.cfg.seed);
  OnlineState fresh = init_online(m.cfg.encoder, rng);
  FeatureExtractor baseline = make_extractor(fresh, m.cfg.encoder, m.grid);
  return compare_encoders(candidate, baseline, m.cfg.data.synth, seeds, hyper);
}

}  // namespace m2d
