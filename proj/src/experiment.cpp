#include "litediff/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <exception>
#include <fstream>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

namespace litediff {

// ------------------------------------------------------------------- config

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

[[noreturn]] void bad(const std::string& key, const std::string& value, const std::string& why) {
  throw ConfigError("config key '" + key + "': " + why + " (got '" + value + "')");
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T v{};
  const auto* end = value.data() + value.size();
  const auto r = std::from_chars(value.data(), end, v);
  if (r.ec != std::errc() || r.ptr != end) bad(key, value, "expected a number");
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  bad(key, value, "expected true or false");
}

std::string fmt(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

template <typename T>
std::string join(const std::vector<T>& items, const std::function<std::string(const T&)>& f) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) out += (i ? "," : "") + f(items[i]);
  return out;
}

struct Key {
  std::string name;
  std::function<void(ExperimentConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

#define LD_STRING(field)                                                                              \
  Key{#field, [](ExperimentConfig& c, const std::string&, const std::string& v) { c.field = v; },      \
      [](const ExperimentConfig& c) { return c.field; }}
#define LD_NUMBER(field)                                                                           \
  Key{#field,                                                                                      \
      [](ExperimentConfig& c, const std::string& k, const std::string& v) {                        \
        c.field = parse_number<decltype(c.field)>(k, v);                                           \
      },                                                                                           \
      [](const ExperimentConfig& c) {                                                              \
        if constexpr (std::is_floating_point_v<decltype(c.field)>) return fmt(c.field);            \
        else return std::to_string(c.field);                                                       \
      }}
#define LD_BOOL(field)                                                                                         \
  Key{#field, [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.field = parse_bool(k, v); }, \
      [](const ExperimentConfig& c) { return std::string(c.field ? "true" : "false"); }}
#define LD_DOMAIN(field)                                                                 \
  Key{#field,                                                                            \
      [](ExperimentConfig& c, const std::string& k, const std::string& v) {              \
        try {                                                                            \
          c.field = parse_domain(v);                                                     \
        } catch (const std::invalid_argument&) {                                         \
          bad(k, v, "expected base_textures or morph_lungs");                            \
        }                                                                                \
      },                                                                                 \
      [](const ExperimentConfig& c) { return domain_name(c.field); }}

const std::vector<Key>& key_table() {
  static const std::vector<Key> table{
      LD_STRING(arm),
      LD_STRING(out_dir),
      LD_NUMBER(seed),
      LD_DOMAIN(base_domain),
      LD_DOMAIN(target_domain),
      LD_NUMBER(resolution),
      LD_NUMBER(data_seed),
      LD_NUMBER(base_images),
      LD_NUMBER(target_images),
      LD_NUMBER(eval_images),
      LD_NUMBER(fid_images),
      LD_DOMAIN(datagen_domain),
      LD_NUMBER(datagen_count),
      LD_NUMBER(base_seed),
      LD_NUMBER(vae_epochs),
      LD_NUMBER(unet_epochs),
      LD_NUMBER(pretrain_batch_size),
      LD_NUMBER(pretrain_learning_rate),
      LD_NUMBER(lma_epochs),
      LD_NUMBER(epochs),
      LD_NUMBER(batch_size),
      LD_NUMBER(learning_rate),
      LD_NUMBER(lambda_adv),
      LD_NUMBER(lambda_morph),
      LD_NUMBER(schedule_T),
      Key{"x0_estimate",
          [](ExperimentConfig& c, const std::string& k, const std::string& v) {
            try {
              c.x0_estimate_mode = parse_x0_mode(v);
            } catch (const std::invalid_argument&) {
              bad(k, v, "expected paper or variance_preserving");
            }
          },
          [](const ExperimentConfig& c) { return to_string(c.x0_estimate_mode); }},
      Key{"adv_target",
          [](ExperimentConfig& c, const std::string& k, const std::string& v) {
            try {
              c.adv_target = parse_adv_target(v);
            } catch (const std::invalid_argument&) {
              bad(k, v, "expected one or half");
            }
          },
          [](const ExperimentConfig& c) { return to_string(c.adv_target); }},
      LD_NUMBER(clip_norm),
      Key{"hook_pattern",
          [](ExperimentConfig& c, const std::string& k, const std::string& v) {
            try {
              c.hook_pattern = HookPattern::parse(v);
            } catch (const std::invalid_argument& e) {
              bad(k, v, e.what());
            }
          },
          [](const ExperimentConfig& c) { return c.hook_pattern.name(); }},
      LD_BOOL(adapter_relu),
      LD_BOOL(resume),
      LD_NUMBER(eval_encoder_epochs),
      LD_NUMBER(sample_count),
      LD_NUMBER(sample_seed),
      Key{"evaluate_arms",
          [](ExperimentConfig& c, const std::string&, const std::string& v) { c.evaluate_arms = split_list(v); },
          [](const ExperimentConfig& c) {
            return join<std::string>(c.evaluate_arms, [](const std::string& s) { return s; });
          }},
      Key{"ablation_patterns",
          [](ExperimentConfig& c, const std::string& k, const std::string& v) {
            c.ablation_patterns.clear();
            for (const auto& item : split_list(v)) {
              try {
                c.ablation_patterns.push_back(HookPattern::parse(item));
              } catch (const std::invalid_argument& e) {
                bad(k, v, e.what());
              }
            }
          },
          [](const ExperimentConfig& c) {
            return join<HookPattern>(c.ablation_patterns, [](const HookPattern& p) { return p.name(); });
          }},
      Key{"datasize_sizes",
          [](ExperimentConfig& c, const std::string& k, const std::string& v) {
            c.datasize_sizes.clear();
            for (const auto& item : split_list(v)) c.datasize_sizes.push_back(parse_number<std::size_t>(k, item));
          },
          [](const ExperimentConfig& c) {
            return join<std::size_t>(c.datasize_sizes, [](const std::size_t& n) { return std::to_string(n); });
          }},
      LD_STRING(base_checkpoint),
      LD_STRING(lma_checkpoint),
      LD_STRING(eval_encoder_checkpoint),
  };
  return table;
}

#undef LD_STRING
#undef LD_NUMBER
#undef LD_BOOL
#undef LD_DOMAIN

}  // namespace

const std::vector<std::string>& ExperimentConfig::keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& k : key_table()) out.push_back(k.name);
    return out;
  }();
  return names;
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  for (const auto& k : key_table()) {
    if (k.name == key) {
      k.set(*this, key, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

ExperimentConfig ExperimentConfig::parse(const std::string& text) {
  ExperimentConfig cfg;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  for (int lineno = 1; std::getline(in, line); ++lineno) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError("config key '" + key + "' given twice");
    cfg.set(key, value);
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

void ExperimentConfig::validate() const {
  auto need = [](bool ok, const std::string& key, const std::string& why) {
    if (!ok) throw ConfigError("config key '" + key + "': " + why);
  };
  need(!arm.empty() && arm.find_first_of("/\\") == std::string::npos, "arm", "must be a plain non-empty name");
  need(!out_dir.empty(), "out_dir", "must not be empty");
  need(resolution == 64 || resolution == 128 || resolution == 256, "resolution", "must be 64, 128 or 256");
  need(base_images > 0, "base_images", "must be positive");
  need(target_images > 0, "target_images", "must be positive");
  need(eval_images > 0, "eval_images", "must be positive");
  need(fid_images >= kMinFidImages, "fid_images", "must be at least " + std::to_string(kMinFidImages));
  need(datagen_count > 0, "datagen_count", "must be positive");
  need(vae_epochs >= 0, "vae_epochs", "must be non-negative");
  need(unet_epochs >= 0, "unet_epochs", "must be non-negative");
  need(pretrain_batch_size > 0, "pretrain_batch_size", "must be positive");
  need(pretrain_learning_rate > 0.0, "pretrain_learning_rate", "must be positive");
  need(lma_epochs >= 0, "lma_epochs", "must be non-negative");
  need(epochs >= 0, "epochs", "must be non-negative");
  need(batch_size > 0, "batch_size", "must be positive");
  need(learning_rate > 0.0, "learning_rate", "must be positive");
  need(lambda_adv >= 0.0, "lambda_adv", "must be non-negative");
  need(lambda_morph >= 0.0, "lambda_morph", "must be non-negative");
  need(schedule_T >= 1, "schedule_T", "must be at least 1");
  need(clip_norm > 0.0, "clip_norm", "must be positive");
  need(eval_encoder_epochs >= 0, "eval_encoder_epochs", "must be non-negative");
  need(sample_count > 0, "sample_count", "must be positive");
  need(!evaluate_arms.empty(), "evaluate_arms", "must list at least one arm");
  need(!datasize_sizes.empty(), "datasize_sizes", "must list at least one size");
  for (auto n : datasize_sizes) need(n > 0, "datasize_sizes", "sizes must be positive");
  if (hook_pattern.kind == HookKind::Custom) {
    UNetSpec spec;
    need(hook_pattern.mask.size() == spec.block_count(), "hook_pattern",
         "custom mask needs " + std::to_string(spec.block_count()) + " digits");
  }
}

std::string ExperimentConfig::to_text() const {
  std::string out;
  for (const auto& k : key_table()) out += k.name + " = " + k.get(*this) + "\n";
  return out;
}

Json ExperimentConfig::to_json() const {
  Json j = Json::object();
  for (const auto& k : key_table()) j[k.name] = k.get(*this);
  return j;
}

TrainConfig ExperimentConfig::train_config() const {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = batch_size;
  t.learning_rate = learning_rate;
  t.seed = seed;
  t.loss_weights = {lambda_adv, lambda_morph};
  t.schedule_T = schedule_T;
  t.x0_estimate_mode = x0_estimate_mode;
  t.adv_target = adv_target;
  t.clip_norm = clip_norm;
  return t;
}

TrainConfig ExperimentConfig::lma_config() const {
  TrainConfig t = train_config();
  t.epochs = lma_epochs;
  return t;
}

PretrainConfig ExperimentConfig::pretrain_config() const {
  PretrainConfig p;
  p.vae_epochs = vae_epochs;
  p.unet_epochs = unet_epochs;
  p.batch_size = pretrain_batch_size;
  p.learning_rate = pretrain_learning_rate;
  p.seed = base_seed;
  p.schedule_T = schedule_T;
  p.spec.base_resolution = resolution / 4;
  return p;
}

EvalEncoderConfig ExperimentConfig::eval_encoder_config() const {
  EvalEncoderConfig e;
  e.epochs = eval_encoder_epochs;
  e.seed = data_seed;
  return e;
}

Activation ExperimentConfig::adapter_activation() const {
  return adapter_relu ? Activation::relu() : Activation::leaky(0.01);
}

std::filesystem::path ExperimentConfig::base_path() const {
  return base_checkpoint.empty() ? out() / "base.ldck" : std::filesystem::path(base_checkpoint);
}
std::filesystem::path ExperimentConfig::lma_path() const {
  return lma_checkpoint.empty() ? out() / ("lma_seed" + std::to_string(seed) + "_n" + std::to_string(target_images) + ".ldck")
                                : std::filesystem::path(lma_checkpoint);
}
std::filesystem::path ExperimentConfig::eval_encoder_path() const {
  return eval_encoder_checkpoint.empty() ? out() / "eval_encoder.ldck"
                                         : std::filesystem::path(eval_encoder_checkpoint);
}

// ----------------------------------------------------------------- datasets

namespace {

// Seed streams of data_seed: 1 base, 2 target train, 3 eval encoder, 4 FID reference.
Tensor images_for(const ExperimentConfig& cfg, Domain d, std::size_t n, std::uint64_t stream) {
  return to_batch(images_of(generate({d, n, Rng::derive(cfg.data_seed, stream), cfg.resolution})));
}

}  // namespace

Tensor base_train_images(const ExperimentConfig& cfg) { return images_for(cfg, cfg.base_domain, cfg.base_images, 1); }
Tensor target_train_images(const ExperimentConfig& cfg, std::size_t count) {
  return images_for(cfg, cfg.target_domain, count, 2);
}
Tensor eval_encoder_images(const ExperimentConfig& cfg) {
  return images_for(cfg, cfg.target_domain, cfg.eval_images, 3);
}
Tensor fid_reference_images(const ExperimentConfig& cfg) {
  return images_for(cfg, cfg.target_domain, cfg.fid_images, 4);
}

// ------------------------------------------------------------ frozen stack

namespace {

void say(const Logger& log, const std::string& msg) {
  if (log) log(msg);
}

ParamStore sub_store(const ParamStore& s, const std::string& prefix) {
  ParamStore out;
  for (const auto& [name, e] : s.entries()) {
    if (name.rfind(prefix, 0) == 0) out.add(name.substr(prefix.size()), e.tensor.clone(), e.trainable);
  }
  return out;
}

Json base_fingerprint(const ExperimentConfig& c) {
  return Json{{"domain", domain_name(c.base_domain)}, {"resolution", c.resolution},
              {"data_seed", c.data_seed},             {"images", c.base_images},
              {"seed", c.base_seed},                  {"vae_epochs", c.vae_epochs},
              {"unet_epochs", c.unet_epochs},         {"batch_size", c.pretrain_batch_size},
              {"learning_rate", c.pretrain_learning_rate}, {"schedule_T", c.schedule_T}};
}

// Only what phase A reads, so arms that differ in phase B settings share one LMA.
Json lma_fingerprint(const ExperimentConfig& c) {
  const auto t = c.lma_config();
  return Json{{"domain", domain_name(c.target_domain)}, {"resolution", c.resolution},
              {"data_seed", c.data_seed},               {"images", c.target_images},
              {"seed", t.seed},                         {"epochs", t.epochs},
              {"batch_size", t.batch_size},             {"learning_rate", t.learning_rate},
              {"clip_norm", t.clip_norm}};
}

Json eval_fingerprint(const ExperimentConfig& c) {
  return Json{{"domain", domain_name(c.target_domain)}, {"resolution", c.resolution},
              {"data_seed", c.data_seed},             {"images", c.eval_images},
              {"epochs", c.eval_encoder_epochs}};
}

// Checkpoint at `path` when it exists and carries `fingerprint`.
std::optional<Checkpoint> cached(const std::filesystem::path& path, const std::string& kind, const Json& fingerprint,
                                 const Logger& log) {
  if (!std::filesystem::exists(path)) return std::nullopt;
  auto ck = load_checkpoint(path);
  if (ck.meta.value("kind", "") == kind && ck.meta.contains("fingerprint") && ck.meta["fingerprint"] == fingerprint) {
    say(log, "reusing " + path.string());
    return ck;
  }
  say(log, path.string() + " was built from other settings; rebuilding");
  return std::nullopt;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

void save_base(const std::filesystem::path& path, const BaseModel& base, const Json& meta) {
  ParamStore store;
  store.merge(base.unet.params(), "unet.");
  store.merge(base.vae.params(), "vae.");
  Json m = meta;
  m["kind"] = "base";
  m["latent_resolution"] = base.unet.spec().base_resolution;
  m["vae_loss"] = base.vae_loss;
  m["unet_loss"] = base.unet_loss;
  save_checkpoint(path, store, m);
}

BaseStack load_base(const Checkpoint& ck) {
  if (ck.meta.value("kind", "") != "base") throw CheckpointError("not a base checkpoint");
  UNetSpec spec;
  spec.base_resolution = ck.meta.at("latent_resolution").get<std::size_t>();
  auto unet = std::make_shared<UNet>(spec, sub_store(ck.params, "unet."));
  auto vae = std::make_shared<Vae>(sub_store(ck.params, "vae."));
  if (!unet->params().all_frozen() || !vae->params().all_frozen()) {
    throw FreezeViolation("base checkpoint holds trainable parameters");
  }
  return {std::move(unet), std::move(vae)};
}

Lma load_lma(const Checkpoint& ck) {
  if (ck.meta.value("kind", "") != "lma") throw CheckpointError("not an LMA checkpoint");
  Lma lma(ck.params, ck.meta.at("resolution").get<std::size_t>());
  if (!lma.params().all_frozen()) throw FreezeViolation("LMA checkpoint holds trainable parameters");
  return lma;
}

BaseStack obtain_base(const ExperimentConfig& cfg, const Logger& log) {
  const auto fp = base_fingerprint(cfg);
  if (auto ck = cached(cfg.base_path(), "base", fp, log)) return load_base(*ck);
  say(log, "pretraining base on " + std::to_string(cfg.base_images) + " " + domain_name(cfg.base_domain) + " images");
  auto base = pretrain_base(base_train_images(cfg), cfg.pretrain_config());
  if (!base.vae_loss.empty()) say(log, "vae final loss " + fmt(base.vae_loss.back()));
  if (!base.unet_loss.empty()) say(log, "unet final loss " + fmt(base.unet_loss.back()));
  save_base(cfg.base_path(), base, Json{{"fingerprint", fp}});
  return load_base(load_checkpoint(cfg.base_path()));
}

std::shared_ptr<const Lma> obtain_lma(const ExperimentConfig& cfg, const Logger& log) {
  const auto fp = lma_fingerprint(cfg);
  if (auto ck = cached(cfg.lma_path(), "lma", fp, log)) return std::make_shared<Lma>(load_lma(*ck));
  say(log, "phase A: LMA on " + std::to_string(cfg.target_images) + " images");
  auto res = phase_a_train(target_train_images(cfg, cfg.target_images), cfg.lma_config());
  if (!res.epoch_loss.empty()) say(log, "lma final loss " + fmt(res.epoch_loss.back()));
  save_checkpoint(cfg.lma_path(), res.lma.params(),
                  Json{{"kind", "lma"}, {"fingerprint", fp}, {"resolution", cfg.resolution},
                       {"epoch_loss", res.epoch_loss}});
  return std::make_shared<Lma>(std::move(res.lma));
}

std::shared_ptr<const EvalEncoder> obtain_eval_encoder(const ExperimentConfig& cfg, const Logger& log) {
  const auto fp = eval_fingerprint(cfg);
  if (auto ck = cached(cfg.eval_encoder_path(), "eval_encoder", fp, log)) {
    auto enc = std::make_shared<EvalEncoder>(ck->params, ck->meta.at("resolution").get<std::size_t>());
    if (!enc->params().all_frozen()) throw FreezeViolation("eval encoder checkpoint holds trainable parameters");
    return enc;
  }
  say(log, "training eval encoder on " + std::to_string(cfg.eval_images) + " held-out images");
  std::vector<double> losses;
  auto enc = train_eval_encoder(eval_encoder_images(cfg), cfg.eval_encoder_config(), &losses);
  save_checkpoint(cfg.eval_encoder_path(), enc.params(),
                  Json{{"kind", "eval_encoder"}, {"fingerprint", fp}, {"resolution", cfg.resolution},
                       {"epoch_loss", losses}, {"checksum", enc.checksum()}});
  return std::make_shared<EvalEncoder>(std::move(enc));
}

// -------------------------------------------------------------------- arms

AdaptOutcome run_adapt(const ExperimentConfig& cfg, const BaseStack& base, std::shared_ptr<const Lma> lma,
                       const Logger& log) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto dir = cfg.arm_dir();
  std::filesystem::create_directories(dir);
  AdaptOutcome out;
  out.checkpoint = dir / "adapter.ldck";
  out.loss_csv = dir / "loss.csv";
  write_text(dir / "config.txt", cfg.to_text());

  const auto images = target_train_images(cfg, cfg.target_images);
  auto latents = encode_dataset(*base.vae, images);
  const auto tcfg = cfg.train_config();
  // Everything except out_dir and resume, so a resumed run writes the same bytes.
  const Json extra{{"arm", cfg.arm}, {"target_images", cfg.target_images}};

  std::optional<PhaseBState> state;
  if (cfg.resume && std::filesystem::exists(out.checkpoint)) {
    const auto ck = load_checkpoint(out.checkpoint);
    state.emplace(load_phase_b(ck, base.unet, base.vae, lma));
    Json saved = state->cfg.to_json(), wanted = tcfg.to_json();
    saved["epochs"] = wanted["epochs"] = 0;
    if (saved != wanted) throw ConfigError("resume: training settings differ from " + out.checkpoint.string());
    if (ck.meta.value("pattern", "") != cfg.hook_pattern.name() ||
        ck.meta.value("target_images", std::size_t{0}) != cfg.target_images ||
        ck.meta.value("adapter_activation", "") != (cfg.adapter_relu ? "relu" : "leaky")) {
      throw ConfigError("resume: hook_pattern, target_images or adapter_relu differ from " +
                        out.checkpoint.string());
    }
    state->cfg.epochs = cfg.epochs;
    if (std::filesystem::exists(out.loss_csv)) {
      for (const auto& r : read_loss_csv(out.loss_csv))
        if (r.step < state->step) out.log.push_back(r);
    }
    say(log, cfg.arm + ": resuming after epoch " + std::to_string(state->epochs_done));
  } else {
    state.emplace(make_phase_b_state(base.unet, base.vae, std::move(lma), cfg.hook_pattern, tcfg,
                                     cfg.adapter_activation()));
  }

  auto& log_rows = out.log;
  phase_b_train(*state, images, std::move(latents), log_rows, [&](const PhaseBState& s) {
    save_phase_b(out.checkpoint, s, extra);
    write_loss_csv(out.loss_csv, log_rows);
    const auto& last = log_rows.back();
    say(log, cfg.arm + ": epoch " + std::to_string(s.epochs_done) + "/" + std::to_string(s.cfg.epochs) +
                 " recon " + fmt(last.recon) + " adv " + fmt(last.adv) + " morph " + fmt(last.morph));
  });
  if (!std::filesystem::exists(out.checkpoint) || state->epochs_done == 0) {
    save_phase_b(out.checkpoint, *state, extra);
    write_loss_csv(out.loss_csv, log_rows);
  }
  out.trainable_fraction = trainable_fraction(state->model);
  out.wall_seconds = seconds_since(t0);
  return out;
}

std::shared_ptr<HookedUNet> load_adapted(const std::filesystem::path& checkpoint, const BaseStack& base) {
  const auto ck = load_checkpoint(checkpoint);
  if (ck.meta.value("kind", "") != "phase_b") throw CheckpointError(checkpoint.string() + " is not a phase B checkpoint");
  const auto act = ck.meta.value("adapter_activation", "leaky") == "relu" ? Activation::relu() : Activation::leaky(0.01);
  auto model = std::make_shared<HookedUNet>(base.unet, act);
  model->attach_from(HookPattern::parse(ck.meta.at("pattern").get<std::string>()), sub_store(ck.params, "adapter."));
  return model;
}

Tensor draw_samples(const Denoiser& model, const Vae& vae, const ExperimentConfig& cfg, int jobs) {
  constexpr std::size_t kChunk = 32;
  const std::size_t n = cfg.sample_count, chunks = (n + kChunk - 1) / kChunk;
  const auto sched = schedule_new(cfg.schedule_T);
  std::vector<Tensor> parts(chunks);
  parallel_for(chunks, jobs, [&](std::size_t k) {
    const std::size_t m = std::min(kChunk, n - k * kChunk);
    parts[k] = sample(model, vae, sched, null_condition(m, model.spec().cond_dim), Rng::derive(cfg.sample_seed, k));
  });
  Shape shape = parts.front().shape();
  shape[0] = n;
  std::vector<double> data;
  data.reserve(shape_numel(shape));
  for (const auto& p : parts) data.insert(data.end(), p.data().begin(), p.data().end());
  return Tensor(shape, std::move(data));
}

ReportRow evaluate_samples(const std::string& arm, const Tensor& samples, const Tensor& reference,
                           const EvalEncoder& enc, std::uint64_t seed) {
  ReportRow row;
  row.arm = arm;
  row.fid_desk = fid_desk(reference, samples, enc);
  const std::size_t k = std::min(samples.dim(0), reference.dim(0));
  std::vector<std::size_t> idx(k);
  for (std::size_t i = 0; i < k; ++i) idx[i] = i;
  row.perceptual_proxy = perceptual_proxy(gather_rows(samples, idx), gather_rows(reference, idx), enc);
  row.seed = seed;
  row.encoder_checksum = enc.checksum();
  return row;
}

void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(jobs, 1)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_file_atomic(path, text);
}

}  // namespace litediff
