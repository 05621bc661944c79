#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "litediff/layers.hpp"

namespace litediff {

// ------------------------------------------------------------------ schedule

/// Variance-preserving schedule over t = 0..T. Index 0 is the clean state
/// (alpha 1, sigma 0, beta 0).
struct DiffusionSchedule {
  int T = 0;
  std::vector<double> beta;
  std::vector<double> alpha_bar;
  std::vector<double> alpha;
  std::vector<double> sigma;

  // Posterior variance of z_{t-1} given z_t and z_0; zero at t = 1.
  double posterior_variance(int t) const;
};

// Linearly spaced betas; for T = 1 the single beta is beta_start.
DiffusionSchedule schedule_new(int T, double beta_start = 1e-4, double beta_end = 0.02);

// alpha_t z0 + sigma_t eps. t = 0 is accepted and returns z0 unchanged.
Tensor forward_diffuse(const Tensor& z0, int t, const Tensor& eps, const DiffusionSchedule& sched);
// Per-sample timesteps along the batch axis.
Tensor forward_diffuse(const Tensor& z0, const std::vector<int>& t, const Tensor& eps,
                       const DiffusionSchedule& sched);

/// One ancestral step z_t -> z_{t-1}. At t = 1 the posterior variance is zero
/// and `noise` does not enter the result.
Tensor ddpm_step(const Tensor& z_t, const Tensor& eps_hat, int t, const DiffusionSchedule& sched,
                 const Tensor& noise);

// ---------------------------------------------------------------------- UNet

struct UNetSpec {
  std::vector<std::size_t> down_channels{16, 32, 64};
  std::size_t mid_channels = 64;
  std::size_t latent_channels = 4;
  std::size_t base_resolution = 16;
  std::size_t t_embed_dim = 32;
  std::size_t cond_dim = 8;

  std::size_t depth() const { return down_channels.size(); }
  // Down blocks 0..k-1, mid k, up k+1..2k.
  std::size_t block_count() const { return 2 * depth() + 1; }
  std::size_t block_channels(std::size_t block) const;
  void validate() const;
};

// Optional interception points. on_block_output may replace a block's output
// (the replacement is also what later blocks and skips see); on_skip may
// replace the skip tensor taken from down block `block` at concatenation.
struct BlockHooks {
  std::function<Tensor(std::size_t block, const Tensor& h)> on_block_output;
  std::function<Tensor(std::size_t block, const Tensor& skip)> on_skip;
};

Tensor sinusoidal_embedding(const std::vector<int>& t, std::size_t dim);
Tensor null_condition(std::size_t n, std::size_t cond_dim);

class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual Tensor predict(const Tensor& z_t, const std::vector<int>& t, const Tensor& p) const = 0;
  virtual const UNetSpec& spec() const = 0;
};

/// Convolutional UNet predicting the noise in a latent. Each block is a
/// residual pair of 3×3 convs with GroupNorm and leaky ReLU; the timestep and
/// condition embedding is projected per block and added after the first conv.
class UNet : public Denoiser {
 public:
  UNet(UNetSpec spec, std::uint64_t seed);
  UNet(UNetSpec spec, ParamStore params);

  Tensor forward(const Tensor& z_t, const std::vector<int>& t, const Tensor& p,
                 const BlockHooks* hooks = nullptr) const;
  Tensor predict(const Tensor& z_t, const std::vector<int>& t, const Tensor& p) const override {
    return forward(z_t, t, p);
  }
  const UNetSpec& spec() const override { return spec_; }

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

 private:
  Tensor res_block(const std::string& name, const Tensor& x, const Tensor& emb, std::size_t in,
                   std::size_t out) const;

  UNetSpec spec_;
  ParamStore params_;
};

// ----------------------------------------------------------------------- VAE

/// Deterministic convolutional autoencoder, N×1×H×W <-> N×4×(H/4)×(W/4).
/// Latents are multiplied by a stored scale fitted so pretraining latents
/// have unit standard deviation.
class Vae {
 public:
  static constexpr std::size_t kLatentChannels = 4;

  explicit Vae(std::uint64_t seed);
  explicit Vae(ParamStore params);

  Tensor encode(const Tensor& x) const;
  Tensor decode(const Tensor& z) const;
  double latent_scale() const { return params_.get("latent_scale").item(); }
  void set_latent_scale(double s);

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

 private:
  Tensor encode_raw(const Tensor& x) const;
  Tensor decode_raw(const Tensor& z) const;
  ParamStore params_;
};

// ------------------------------------------------------------------- sampling

// Draws z_T, runs ddpm_step from T down to 1 and returns z_0. `p` is N×cond.
Tensor sample_latents(const Denoiser& model, const DiffusionSchedule& sched, const Tensor& p, std::uint64_t seed);
// sample_latents followed by the decoder; values lie in [-1, 1].
Tensor sample(const Denoiser& model, const Vae& vae, const DiffusionSchedule& sched, const Tensor& p,
              std::uint64_t seed);

// --------------------------------------------------------------- pretraining

struct PretrainConfig {
  int vae_epochs = 20;
  int unet_epochs = 40;
  std::size_t batch_size = 8;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  int schedule_T = 200;
  UNetSpec spec;
};

struct BaseModel {
  Vae vae;
  UNet unet;
  std::vector<double> vae_loss;   // mean loss per epoch
  std::vector<double> unet_loss;  // mean loss per epoch
};

/// Trains the VAE on reconstruction, freezes it, fits the latent scale, then
/// trains the UNet on noise prediction over the frozen latents. Everything is
/// frozen on return. `images` is N×1×H×W.
BaseModel pretrain_base(const Tensor& images, const PretrainConfig& cfg);

// Rows `indices` of an N×... tensor, stacked.
Tensor gather_rows(const Tensor& t, const std::vector<std::size_t>& indices);
// Seeded shuffle of 0..n-1 cut into consecutive minibatches (last may be short).
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, std::uint64_t seed);
// Frozen-encoder latents of a whole image set, computed `chunk` images at a time.
Tensor encode_dataset(const Vae& vae, const Tensor& images, std::size_t chunk = 64);

}  // namespace litediff
