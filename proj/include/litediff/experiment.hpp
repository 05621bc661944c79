#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "litediff/adaptation.hpp"
#include "litediff/checkpoint.hpp"
#include "litediff/data.hpp"
#include "litediff/diffusion.hpp"
#include "litediff/metrics.hpp"
#include "litediff/training.hpp"

namespace litediff {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Everything one experiment arm needs, read from a flat `key = value` file.
/// Lines starting with '#' and blank lines are ignored; unknown or repeated
/// keys are errors.
struct ExperimentConfig {
  std::string arm = "litediff";
  std::string out_dir = "runs";
  std::uint64_t seed = 0;

  // data
  Domain base_domain = Domain::BaseTextures;
  Domain target_domain = Domain::MorphLungs;
  std::size_t resolution = 64;
  std::uint64_t data_seed = 7;
  std::size_t base_images = 2000;
  std::size_t target_images = 2000;
  std::size_t eval_images = 500;  // EvalEncoder training slice
  std::size_t fid_images = 512;   // held-out real reference set
  Domain datagen_domain = Domain::MorphLungs;
  std::size_t datagen_count = 10;

  // base pretraining (shared across seeds)
  std::uint64_t base_seed = 0;
  int vae_epochs = 20;
  int unet_epochs = 40;
  std::size_t pretrain_batch_size = 8;
  double pretrain_learning_rate = 1e-3;

  // phase A
  int lma_epochs = 40;

  // phase B
  int epochs = 10;
  std::size_t batch_size = 8;
  double learning_rate = 1e-4;
  double lambda_adv = 0.1;
  double lambda_morph = 0.001;
  int schedule_T = 200;
  X0Mode x0_estimate_mode = X0Mode::Paper;
  AdvTarget adv_target = AdvTarget::One;
  double clip_norm = 1.0;
  HookPattern hook_pattern{HookKind::All, {}};
  bool adapter_relu = false;  // plain ReLU inside adapters instead of leaky
  bool resume = false;

  // evaluation
  int eval_encoder_epochs = 10;
  std::size_t sample_count = 256;
  std::uint64_t sample_seed = 1;
  std::vector<std::string> evaluate_arms{"litediff"};
  std::vector<HookPattern> ablation_patterns;  // empty: the seven standard ones
  std::vector<std::size_t> datasize_sizes{250, 500, 1000, 2000};

  // checkpoint locations; empty means <out_dir>/<default name>
  std::string base_checkpoint;
  std::string lma_checkpoint;
  std::string eval_encoder_checkpoint;

  static ExperimentConfig parse(const std::string& text);
  static ExperimentConfig load(const std::filesystem::path& path);
  // Applies one key; ConfigError names the key on bad values.
  void set(const std::string& key, const std::string& value);
  void validate() const;
  // Canonical text form (every key, fixed order); parse(to_text()) round-trips.
  std::string to_text() const;
  Json to_json() const;
  static const std::vector<std::string>& keys();

  TrainConfig train_config() const;
  TrainConfig lma_config() const;
  PretrainConfig pretrain_config() const;
  EvalEncoderConfig eval_encoder_config() const;
  Activation adapter_activation() const;

  std::filesystem::path out() const { return out_dir; }
  std::filesystem::path arm_dir() const { return out() / arm; }
  std::filesystem::path base_path() const;
  std::filesystem::path lma_path() const;
  std::filesystem::path eval_encoder_path() const;
};

// ----------------------------------------------------------------- datasets

// Each set comes from its own seed stream, so they are disjoint by construction.
Tensor base_train_images(const ExperimentConfig& cfg);
Tensor target_train_images(const ExperimentConfig& cfg, std::size_t count);
Tensor eval_encoder_images(const ExperimentConfig& cfg);
Tensor fid_reference_images(const ExperimentConfig& cfg);

// ------------------------------------------------------------ frozen stack

using Logger = std::function<void(const std::string&)>;

struct BaseStack {
  std::shared_ptr<const UNet> unet;
  std::shared_ptr<const Vae> vae;
};

// Each obtain_* loads its checkpoint when present and built from the same
// settings, otherwise trains, saves and returns the result.
BaseStack obtain_base(const ExperimentConfig& cfg, const Logger& log = {});
std::shared_ptr<const Lma> obtain_lma(const ExperimentConfig& cfg, const Logger& log = {});
std::shared_ptr<const EvalEncoder> obtain_eval_encoder(const ExperimentConfig& cfg, const Logger& log = {});

void save_base(const std::filesystem::path& path, const BaseModel& base, const Json& meta);
BaseStack load_base(const Checkpoint& ck);
Lma load_lma(const Checkpoint& ck);

// -------------------------------------------------------------------- arms

struct AdaptOutcome {
  std::filesystem::path checkpoint;  // final phase B checkpoint
  std::filesystem::path loss_csv;
  std::vector<LossBreakdown> log;
  double wall_seconds = 0.0;
  double trainable_fraction = 0.0;
};

/// Phase B for cfg.arm on the first cfg.target_images target images. Writes
/// <arm_dir>/adapter.ldck and loss.csv after every epoch, plus config.txt.
/// With cfg.resume an existing adapter.ldck is continued; only `epochs` may
/// differ from the run that wrote it.
AdaptOutcome run_adapt(const ExperimentConfig& cfg, const BaseStack& base, std::shared_ptr<const Lma> lma,
                       const Logger& log = {});

// Base UNet with the adapters (and adapter activation) of a phase B checkpoint.
std::shared_ptr<HookedUNet> load_adapted(const std::filesystem::path& checkpoint, const BaseStack& base);

// cfg.sample_count samples from `model`, 32 at a time; chunk k is seeded from
// (sample_seed, k), so the result does not depend on `jobs`.
Tensor draw_samples(const Denoiser& model, const Vae& vae, const ExperimentConfig& cfg, int jobs = 1);

/// fid_desk and perceptual proxy of `samples` against the reference set.
ReportRow evaluate_samples(const std::string& arm, const Tensor& samples, const Tensor& reference,
                           const EvalEncoder& enc, std::uint64_t seed);

// Runs fn(i) for i in [0, n) on up to `jobs` threads; rethrows the first error.
void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn);

void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace litediff
