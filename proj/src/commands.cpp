#include "litediff/commands.hpp"

#include <chrono>
#include <cstdio>
#include <iostream>
#include <mutex>
#include <optional>

#include <CLI11.hpp>

namespace litediff {

namespace {

void say(const CommandContext& ctx, const std::string& msg) {
  if (ctx.log) ctx.log(msg);
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t fnv1a_bytes(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string file_digest(const std::filesystem::path& p) { return hex64(fnv1a_bytes(read_file(p))); }

// Reports and other shared outputs reference their config through a sibling file.
void write_report(const std::filesystem::path& csv, const std::vector<ReportRow>& rows, const ExperimentConfig& cfg) {
  write_report_csv(csv, rows);
  write_text(std::filesystem::path(csv).replace_extension(".config.txt"), cfg.to_text());
  write_text(std::filesystem::path(csv).replace_extension(".txt"), report_table(rows));
}

double read_wall_seconds(const std::filesystem::path& arm_dir) {
  const auto p = arm_dir / "wall_seconds.txt";
  if (!std::filesystem::exists(p)) return 0.0;
  return std::stod(read_file(p));
}

}  // namespace

bool arm_is_complete(const ExperimentConfig& cfg) {
  const auto path = cfg.arm_dir() / "adapter.ldck";
  if (!std::filesystem::exists(path)) return false;
  const auto meta = load_checkpoint(path).meta;
  return meta.value("kind", "") == "phase_b" && meta.value("epochs_done", -1) == cfg.epochs &&
         meta.value("config", Json()) == cfg.train_config().to_json() &&
         meta.value("pattern", "") == cfg.hook_pattern.name() &&
         meta.value("target_images", std::size_t{0}) == cfg.target_images &&
         meta.value("adapter_activation", "") == (cfg.adapter_relu ? "relu" : "leaky");
}

namespace {

struct ArmResult {
  std::filesystem::path checkpoint;
  double wall_seconds = 0.0;
};

ArmResult ensure_adapted(const ExperimentConfig& cfg, const BaseStack& base, const CommandContext& ctx) {
  if (arm_is_complete(cfg)) {
    say(ctx, cfg.arm + ": reusing finished adapters");
    return {cfg.arm_dir() / "adapter.ldck", read_wall_seconds(cfg.arm_dir())};
  }
  ExperimentConfig fresh = cfg;
  fresh.resume = false;
  const auto out = run_adapt(fresh, base, obtain_lma(fresh, ctx.log), ctx.log);
  write_text(cfg.arm_dir() / "wall_seconds.txt", std::to_string(out.wall_seconds) + "\n");
  return {out.checkpoint, out.wall_seconds};
}

// Samples are cached next to the arm, keyed by the exact model files and sampling settings.
Tensor samples_for(const ExperimentConfig& cfg, const std::filesystem::path& dir, const Denoiser& model,
                   const BaseStack& base, const std::optional<std::filesystem::path>& adapter, int jobs,
                   const CommandContext& ctx) {
  const Json fp{{"base", file_digest(cfg.base_path())},
                {"adapter", adapter ? file_digest(*adapter) : std::string("none")},
                {"sample_seed", cfg.sample_seed},
                {"sample_count", cfg.sample_count},
                {"schedule_T", cfg.schedule_T}};
  const auto cache = dir / "samples.ldck";
  if (std::filesystem::exists(cache)) {
    auto ck = load_checkpoint(cache);
    if (ck.meta.value("fingerprint", Json()) == fp) return ck.params.get("samples");
  }
  say(ctx, "sampling " + std::to_string(cfg.sample_count) + " images into " + dir.string());
  auto samples = draw_samples(model, *base.vae, cfg, jobs);
  ParamStore store;
  store.add("samples", samples, false);
  std::filesystem::create_directories(dir);
  save_checkpoint(cache, store, Json{{"kind", "samples"}, {"fingerprint", fp}});
  return samples;
}

struct EvalShared {
  BaseStack base;
  std::shared_ptr<const EvalEncoder> enc;
  Tensor reference;
};

EvalShared eval_shared(const ExperimentConfig& cfg, const CommandContext& ctx) {
  EvalShared s{obtain_base(cfg, ctx.log), obtain_eval_encoder(cfg, ctx.log), fid_reference_images(cfg)};
  if (cfg.sample_count < kMinFidImages) {
    throw ConfigError("config key 'sample_count': evaluation needs at least " + std::to_string(kMinFidImages));
  }
  return s;
}

ReportRow evaluate_base(const ExperimentConfig& cfg, const EvalShared& s, int jobs, const CommandContext& ctx) {
  const auto samples = samples_for(cfg, cfg.out() / kBaseArm, *s.base.unet, s.base, std::nullopt, jobs, ctx);
  return evaluate_samples(kBaseArm, samples, s.reference, *s.enc, cfg.seed);
}

ReportRow evaluate_adapted(const ExperimentConfig& cfg, const std::string& row_name, const ArmResult& arm,
                           const EvalShared& s, int jobs, const CommandContext& ctx) {
  const auto model = load_adapted(arm.checkpoint, s.base);
  const auto samples = samples_for(cfg, cfg.arm_dir(), *model, s.base, arm.checkpoint, jobs, ctx);
  auto row = evaluate_samples(row_name, samples, s.reference, *s.enc, cfg.seed);
  row.trainable_fraction = trainable_fraction(*model);
  row.wall_seconds = arm.wall_seconds;
  return row;
}

std::string safe_name(std::string s) {
  for (auto& c : s)
    if (c == ':' || c == '/' || c == ' ') c = '_';
  return s;
}

}  // namespace

std::string ablation_arm(const HookPattern& p) { return "hooks_" + safe_name(p.name()); }
std::string datasize_arm(std::size_t n) { return "size_" + std::to_string(n); }

// ----------------------------------------------------------------- commands

std::filesystem::path cmd_datagen(const ExperimentConfig& cfg, const CommandContext& ctx) {
  const auto dir = cfg.out() / "datagen";
  std::filesystem::create_directories(dir);
  const auto items = generate({cfg.datagen_domain, cfg.datagen_count, cfg.data_seed, cfg.resolution});
  std::string manifest = "file,class,seed\n";
  for (std::size_t i = 0; i < items.size(); ++i) {
    char name[64];
    std::snprintf(name, sizeof name, "%s_%05zu.pgm", domain_name(cfg.datagen_domain).c_str(), i);
    write_file_atomic(dir / name, encode_pgm(items[i].image, items[i].seed));
    manifest += std::string(name) + "," + std::to_string(items[i].class_id) + "," + std::to_string(items[i].seed) + "\n";
  }
  write_text(dir / "manifest.csv", manifest);
  write_text(dir / "config.txt", cfg.to_text());
  say(ctx, "wrote " + std::to_string(items.size()) + " images to " + dir.string());
  return dir;
}

std::filesystem::path cmd_pretrain_base(const ExperimentConfig& cfg, const CommandContext& ctx) {
  const auto base = obtain_base(cfg, ctx.log);
  // load_base refuses trainable tensors; also confirm nothing drifted on disk.
  const auto again = load_base(load_checkpoint(cfg.base_path()));
  const auto drift = freeze_audit(frozen_hashes({{"unet", &base.unet->params()}, {"vae", &base.vae->params()}}),
                                  frozen_hashes({{"unet", &again.unet->params()}, {"vae", &again.vae->params()}}));
  if (!drift.empty()) throw FreezeViolation("base checkpoint does not round-trip: " + drift.front());
  write_text(cfg.base_path().string() + ".config.txt", cfg.to_text());
  say(ctx, "base checkpoint " + cfg.base_path().string());
  return cfg.base_path();
}

std::filesystem::path cmd_train_lma(const ExperimentConfig& cfg, const CommandContext& ctx) {
  obtain_lma(cfg, ctx.log);
  write_text(cfg.lma_path().string() + ".config.txt", cfg.to_text());
  say(ctx, "LMA checkpoint " + cfg.lma_path().string());
  return cfg.lma_path();
}

AdaptOutcome cmd_adapt(const ExperimentConfig& cfg, const CommandContext& ctx) {
  const auto base = obtain_base(cfg, ctx.log);
  auto out = run_adapt(cfg, base, obtain_lma(cfg, ctx.log), ctx.log);
  write_text(cfg.arm_dir() / "wall_seconds.txt", std::to_string(out.wall_seconds) + "\n");
  say(ctx, cfg.arm + ": trainable fraction " + std::to_string(out.trainable_fraction) + ", checkpoint " +
               out.checkpoint.string());
  return out;
}

std::filesystem::path cmd_sample(const ExperimentConfig& cfg, const CommandContext& ctx) {
  const auto base = obtain_base(cfg, ctx.log);
  const auto ckpt = cfg.arm_dir() / "adapter.ldck";
  Tensor samples;
  if (std::filesystem::exists(ckpt)) {
    const auto model = load_adapted(ckpt, base);
    samples = samples_for(cfg, cfg.arm_dir(), *model, base, ckpt, ctx.jobs, ctx);
  } else {
    say(ctx, cfg.arm + " has no adapters; sampling the base model");
    samples = samples_for(cfg, cfg.arm_dir(), *base.unet, base, std::nullopt, ctx.jobs, ctx);
  }
  const auto dir = cfg.arm_dir() / "samples";
  std::filesystem::create_directories(dir);
  const auto images = images_from_batch(samples);
  for (std::size_t i = 0; i < images.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "sample_%05zu.pgm", i);
    write_file_atomic(dir / name, encode_pgm(images[i], cfg.sample_seed));
  }
  write_file_atomic(dir / "grid.pgm", encode_pgm(make_grid(images, 8), cfg.sample_seed));
  write_text(dir / "config.txt", cfg.to_text());
  say(ctx, "wrote " + std::to_string(images.size()) + " samples to " + dir.string());
  return dir;
}

std::vector<ReportRow> cmd_evaluate(const ExperimentConfig& cfg, const CommandContext& ctx) {
  const auto shared = eval_shared(cfg, ctx);
  std::vector<ReportRow> rows(cfg.evaluate_arms.size());
  parallel_for(rows.size(), ctx.jobs, [&](std::size_t i) {
    const auto& name = cfg.evaluate_arms[i];
    if (name == kBaseArm) {
      rows[i] = evaluate_base(cfg, shared, 1, ctx);
      return;
    }
    ExperimentConfig arm = cfg;
    arm.arm = name;
    const auto ckpt = arm.arm_dir() / "adapter.ldck";
    if (!std::filesystem::exists(ckpt)) throw std::runtime_error("arm '" + name + "' has no checkpoint at " + ckpt.string());
    rows[i] = evaluate_adapted(arm, name, {ckpt, read_wall_seconds(arm.arm_dir())}, shared, 1, ctx);
  });
  rows = build_report(std::move(rows));
  write_report(cfg.out() / "evaluate.csv", rows, cfg);
  return rows;
}

std::vector<ReportRow> cmd_ablate_hooks(const ExperimentConfig& cfg, const CommandContext& ctx) {
  std::vector<HookPattern> patterns = cfg.ablation_patterns;
  if (patterns.empty())
    for (auto k : kAblationPatterns) patterns.push_back({k, {}});
  const auto shared = eval_shared(cfg, ctx);
  obtain_lma(cfg, ctx.log);  // shared by every arm; trained once up front
  std::vector<ReportRow> rows(patterns.size());
  parallel_for(patterns.size(), ctx.jobs, [&](std::size_t i) {
    ExperimentConfig arm = cfg;
    arm.hook_pattern = patterns[i];
    arm.arm = ablation_arm(patterns[i]);
    write_text(arm.arm_dir() / "config.txt", arm.to_text());
    const auto result = ensure_adapted(arm, shared.base, ctx);
    auto name = patterns[i].name();
    if (patterns[i].kind == HookKind::All) name += kReferenceSuffix;
    rows[i] = evaluate_adapted(arm, name, result, shared, 1, ctx);
  });
  rows = build_report(std::move(rows));
  write_report(cfg.out() / "ablate_hooks.csv", rows, cfg);
  return rows;
}

std::vector<ReportRow> cmd_datasize(const ExperimentConfig& cfg, const CommandContext& ctx) {
  const auto shared = eval_shared(cfg, ctx);
  std::vector<ReportRow> rows(cfg.datasize_sizes.size());
  parallel_for(rows.size(), ctx.jobs, [&](std::size_t i) {
    ExperimentConfig arm = cfg;
    arm.target_images = cfg.datasize_sizes[i];
    arm.arm = datasize_arm(arm.target_images);
    write_text(arm.arm_dir() / "config.txt", arm.to_text());
    const auto result = ensure_adapted(arm, shared.base, ctx);
    rows[i] = evaluate_adapted(arm, arm.arm, result, shared, 1, ctx);
  });
  rows = build_report(std::move(rows));
  write_report(cfg.out() / "datasize.csv", rows, cfg);
  return rows;
}

// ---------------------------------------------------------------------- CLI

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Desk-scale latent diffusion with hooked residual adapters"};
  app.require_subcommand(1);
  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  int jobs = 1;

  const std::vector<std::pair<std::string, std::string>> commands{
      {"datagen", "write synthetic PGM images and a manifest"},
      {"pretrain-base", "pretrain and freeze the base VAE and UNet"},
      {"train-lma", "phase A: train and freeze the morphology autoencoder"},
      {"adapt", "phase B: train adapters and discriminator"},
      {"sample", "draw samples from an arm (or the base model)"},
      {"evaluate", "fid_desk and perceptual proxy report over arms"},
      {"ablate-hooks", "one adapted arm per hooking pattern"},
      {"datasize", "one adapted arm per training-set size"},
  };
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "experiment config file")->required();
    sub->add_option("--out", out_dir, "output directory (overrides out_dir)");
    sub->add_option("--seed", seed, "seed (overrides seed)");
    sub->add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  std::mutex log_mutex;
  CommandContext ctx;
  ctx.jobs = jobs;
  ctx.log = [&](const std::string& msg) {
    std::lock_guard lock(log_mutex);
    std::cerr << "[litediff] " << msg << std::endl;
  };
  try {
    auto cfg = ExperimentConfig::load(config_path);
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (seed) cfg.seed = *seed;
    cfg.validate();
    std::filesystem::create_directories(cfg.out());

    const std::string cmd = app.get_subcommands().front()->get_name();
    if (cmd == "datagen") {
      std::cout << cmd_datagen(cfg, ctx).string() << "\n";
    } else if (cmd == "pretrain-base") {
      std::cout << cmd_pretrain_base(cfg, ctx).string() << "\n";
    } else if (cmd == "train-lma") {
      std::cout << cmd_train_lma(cfg, ctx).string() << "\n";
    } else if (cmd == "adapt") {
      std::cout << cmd_adapt(cfg, ctx).checkpoint.string() << "\n";
    } else if (cmd == "sample") {
      std::cout << cmd_sample(cfg, ctx).string() << "\n";
    } else if (cmd == "evaluate") {
      std::cout << report_table(cmd_evaluate(cfg, ctx));
    } else if (cmd == "ablate-hooks") {
      std::cout << report_table(cmd_ablate_hooks(cfg, ctx));
    } else {
      std::cout << report_table(cmd_datasize(cfg, ctx));
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace litediff
