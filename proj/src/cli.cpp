#include "m2d/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "m2d/config.hpp"
#include "m2d/errors.hpp"
#include "m2d/runner.hpp"

namespace m2d {
namespace {

struct CommonOpts {
  std::string config_path;
  std::string out_dir = "m2d_out";
  std::string resume_path;
  uint64_t seed = 0;
  bool seed_set = false;
};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

// With --resume the checkpoint's config snapshot is authoritative; an
// explicit --config or --seed may only confirm it.
RunConfig resolve_config(const CommonOpts& o, const CheckpointData* resume) {
  if (resume) {
    RunConfig cfg = parse_config(resume->config_json);
    if (!o.config_path.empty()) {
      RunConfig given = load_config(o.config_path);
      given.stats = cfg.stats;  // the snapshot always carries resolved stats
      given.stats_preset = cfg.stats_preset;
      if (o.seed_set) given.seed = o.seed;
      if (given.to_json() != cfg.to_json())
        throw ConsistencyError("--config disagrees with the checkpoint's config snapshot");
    }
    if (o.seed_set && o.seed != cfg.seed)
      throw ConsistencyError("--seed disagrees with the checkpoint's config snapshot");
    return cfg;
  }
  RunConfig cfg = o.config_path.empty() ? parse_config("") : load_config(o.config_path);
  if (o.seed_set) cfg.seed = o.seed;
  return cfg;
}

int do_pretrain(const CommonOpts& o, bool with_offline) {
  CheckpointData resume;
  bool have_resume = !o.resume_path.empty();
  if (have_resume) resume = load_checkpoint(o.resume_path);
  RunConfig cfg = resolve_config(o, have_resume ? &resume : nullptr);
  RunResult res = with_offline ? run_pretrain_x(cfg, o.out_dir, have_resume ? &resume : nullptr)
                               : run_pretrain(cfg, o.out_dir, have_resume ? &resume : nullptr);
  std::cout << "completed " << res.steps_done << " steps, final loss_total "
            << fmt(res.last_loss_total) << "\n"
            << "metrics: " << res.metrics_path << "\n"
            << "checkpoint: " << res.checkpoint_path << "\n";
  return 0;
}

int do_extract(const std::string& ckpt_path, const std::string& out_path,
               const std::string& config_path) {
  CheckpointData ckpt = load_checkpoint(ckpt_path);
  RunConfig data_cfg =
      config_path.empty() ? parse_config(ckpt.config_json) : load_config(config_path);
  ExtractResult res = extract_features(ckpt, data_cfg);
  write_features(out_path, res);
  std::cout << "wrote " << res.features.rows() << " clip features ("
            << res.features.cols() << " dims) to " << out_path << "\n";
  return 0;
}

std::vector<uint64_t> seed_list(int n) {
  if (n < 1) throw ConfigError("--seeds must be >= 1");
  std::vector<uint64_t> seeds;
  for (int i = 0; i < n; ++i) seeds.push_back(uint64_t(i));
  return seeds;
}

int do_probe(const std::string& features_path, int n_seeds) {
  ExtractResult res = read_features(features_path);
  int n_classes = res.n_classes;
  if (n_classes <= 0)
    for (int l : res.labels) n_classes = std::max(n_classes, l + 1);
  std::string id = std::filesystem::path(features_path).stem().string();
  EncoderProbe p = probe_features(res.features, res.labels, n_classes, seed_list(n_seeds));
  for (const auto& r : p.per_seed)
    std::cout << id << " " << res.task << " " << r.seed << " " << fmt(r.accuracy) << "\n";
  std::cout << "# mean " << fmt(p.mean_accuracy) << " spread " << fmt(p.accuracy_spread)
            << "\n";
  return 0;
}

int do_compare(const std::string& ckpt_path, int n_seeds) {
  CheckpointData ckpt = load_checkpoint(ckpt_path);
  CompareResult r = compare_to_random_init(ckpt, seed_list(n_seeds));
  std::cout << "encoder      seed  accuracy\n";
  for (const auto& pr : r.candidate.per_seed)
    std::cout << "pretrained   " << pr.seed << "     " << fmt(pr.accuracy) << "\n";
  for (const auto& pr : r.baseline.per_seed)
    std::cout << "random-init  " << pr.seed << "     " << fmt(pr.accuracy) << "\n";
  std::cout << "mean pretrained " << fmt(r.candidate.mean_accuracy) << ", random-init "
            << fmt(r.baseline.mean_accuracy) << ", gap " << fmt(r.gap_mean) << " (spread "
            << fmt(r.gap_spread) << ")\n";
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"masked-prediction audio pre-training toolkit"};
  app.name("m2d");
  app.require_subcommand(1);

  CommonOpts opt_plain, opt_x;
  auto add_common = [](CLI::App* sub, CommonOpts& o) {
    sub->add_option("--config", o.config_path, "JSON config file (empty: stock defaults)");
    sub->add_option("--seed", o.seed, "seed override");
    sub->add_option("--out", o.out_dir, "output directory");
    sub->add_option("--resume", o.resume_path, "checkpoint to continue from");
  };
  CLI::App* pre = app.add_subcommand("pretrain", "masked-prediction pre-training");
  add_common(pre, opt_plain);
  CLI::App* pre_x = app.add_subcommand("pretrain-x", "combined-objective pre-training");
  add_common(pre_x, opt_x);

  std::string ex_ckpt, ex_out, ex_cfg;
  CLI::App* ext = app.add_subcommand("extract", "frozen-encoder clip features");
  ext->add_option("--checkpoint", ex_ckpt, "trained checkpoint")->required();
  ext->add_option("--out", ex_out, "feature container to write")->required();
  ext->add_option("--config", ex_cfg, "config naming the clips (default: training data)");

  std::string pr_features;
  int pr_seeds = 3;
  CLI::App* prb = app.add_subcommand("probe", "linear probe on extracted features");
  prb->add_option("--features", pr_features, "feature container")->required();
  prb->add_option("--seeds", pr_seeds, "number of probe seeds");

  std::string cm_ckpt;
  int cm_seeds = 3;
  CLI::App* cmp = app.add_subcommand("compare", "probe checkpoint vs its random init");
  cmp->add_option("--checkpoint", cm_ckpt, "trained checkpoint")->required();
  cmp->add_option("--seeds", cm_seeds, "number of probe seeds");

  int rc = 0;
  pre->callback([&] {
    opt_plain.seed_set = pre->count("--seed") > 0;
    rc = do_pretrain(opt_plain, false);
  });
  pre_x->callback([&] {
    opt_x.seed_set = pre_x->count("--seed") > 0;
    rc = do_pretrain(opt_x, true);
  });
  ext->callback([&] { rc = do_extract(ex_ckpt, ex_out, ex_cfg); });
  prb->callback([&] { rc = do_probe(pr_features, pr_seeds); });
  cmp->callback([&] { rc = do_compare(cm_ckpt, cm_seeds); });

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const DivergenceError& e) {
    std::cerr << e.what() << "\n";
    return 4;
  } catch (const ConfigError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }
  return rc;
}

}  // namespace m2d
