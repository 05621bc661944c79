#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "litediff/adaptation.hpp"
#include "litediff/checkpoint.hpp"
#include "litediff/diffusion.hpp"

namespace litediff {

// How x_gen is decoded from a noisy latent and the predicted noise.
enum class X0Mode {
  Paper,               // z_t - eps_hat
  VariancePreserving,  // (z_t - sigma_t eps_hat) / alpha_t
};
enum class AdvTarget { One, Half };

std::string to_string(X0Mode m);
std::string to_string(AdvTarget t);
X0Mode parse_x0_mode(const std::string& s);
AdvTarget parse_adv_target(const std::string& s);

struct TrainConfig {
  int epochs = 10;
  std::size_t batch_size = 8;
  double learning_rate = 1e-4;
  std::uint64_t seed = 0;
  LossWeights loss_weights;
  int schedule_T = 200;
  X0Mode x0_estimate_mode = X0Mode::Paper;
  AdvTarget adv_target = AdvTarget::One;
  double clip_norm = 1.0;

  void validate() const;
  Json to_json() const;
  static TrainConfig from_json(const Json& j);
};

struct LossBreakdown {
  std::int64_t step = 0;
  int epoch = 0;
  double recon = 0.0;
  double adv = 0.0;
  double morph = 0.0;
  double gen_total = 0.0;
  double disc = 0.0;
};

// Raised when a parameter that must stay frozen is trainable or has changed.
class FreezeViolation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ------------------------------------------------------------------- phase A

struct LmaTrainResult {
  Lma lma;
  std::vector<double> epoch_loss;  // mean reconstruction MSE per epoch
};

/// Trains the LMA on reconstruction MSE over `images` (N×1×R×R) and freezes it.
LmaTrainResult phase_a_train(const Tensor& images, const TrainConfig& cfg);

// ------------------------------------------------------------------- phase B

struct PhaseBState {
  HookedUNet model;
  std::shared_ptr<const Vae> vae;
  std::shared_ptr<const Lma> lma;
  PixelDiscriminator disc;
  Optimizer adapter_opt;
  Optimizer disc_opt;
  DiffusionSchedule sched;
  TrainConfig cfg;
  Rng rng;
  std::int64_t step = 0;
  int epochs_done = 0;
};

/// Fresh state: zero-initialised adapters under `pattern`, a new
/// discriminator, Adam for both, all streams derived from cfg.seed.
PhaseBState make_phase_b_state(std::shared_ptr<const UNet> base, std::shared_ptr<const Vae> vae,
                               std::shared_ptr<const Lma> lma, const HookPattern& pattern, const TrainConfig& cfg,
                               Activation adapter_act = Activation::leaky(0.01));

/// One iteration of the adaptation loop on a batch:
///  encode z0, draw t and eps, noise, predict, L_recon, decode x_gen,
///  update the discriminator, re-run it for L_adv, L_morph, update adapters.
/// `z0` may carry precomputed encoder latents of `x_real`.
LossBreakdown phase_b_step(PhaseBState& state, const Tensor& x_real, const Tensor& p, const Tensor* z0 = nullptr);

using EpochCallback = std::function<void(const PhaseBState&)>;

/// Runs epochs state.epochs_done .. cfg.epochs-1 over shuffled minibatches,
/// appending one LossBreakdown per step to `log`. `latents` are the frozen
/// encoder outputs of `images` (computed when empty).
void phase_b_train(PhaseBState& state, const Tensor& images, Tensor latents, std::vector<LossBreakdown>& log,
                   const EpochCallback& on_epoch_end = {});

// Adapter + discriminator + optimizer + rng state; resumable.
ParamStore phase_b_store(const PhaseBState& state);
Json phase_b_meta(const PhaseBState& state);
void save_phase_b(const std::filesystem::path& path, const PhaseBState& state, const Json& extra = Json::object());
// Rebuilds a state from a phase B checkpoint against the same frozen parts.
PhaseBState load_phase_b(const Checkpoint& ck, std::shared_ptr<const UNet> base, std::shared_ptr<const Vae> vae,
                         std::shared_ptr<const Lma> lma);

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossBreakdown>& log);
std::vector<LossBreakdown> read_loss_csv(const std::filesystem::path& path);

// ------------------------------------------------------------------- audit

using TensorHashes = std::map<std::string, std::uint64_t>;

std::uint64_t fnv1a(const Tensor& t);
// Hashes of the non-trainable entries of each named store, keyed "<store>/<param>".
TensorHashes frozen_hashes(const std::vector<std::pair<std::string, const ParamStore*>>& stores);
TensorHashes frozen_hashes(const PhaseBState& state);
// Names whose hash changed or disappeared.
std::vector<std::string> freeze_audit(const TensorHashes& before, const TensorHashes& after);

}  // namespace litediff
