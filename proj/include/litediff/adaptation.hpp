#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "litediff/diffusion.hpp"
#include "litediff/layers.hpp"

namespace litediff {

// ------------------------------------------------------------------- adapter

/// h + act(GN(conv1x1(h))) using the four tensors registered under `prefix`
/// (<prefix>.conv.weight, .conv.bias, .gn.gamma, .gn.beta).
Tensor adapter_forward(const ParamStore& store, const std::string& prefix, const Tensor& h,
                       const Activation& act = Activation::leaky(0.01));
// Zero conv, unit gamma, zero beta. A nonzero init_scale draws the conv
// weight and bias from N(0, init_scale^2) instead (used by tests).
void register_adapter(ParamStore& store, const std::string& prefix, std::size_t channels, Rng& rng,
                      double init_scale = 0.0);

// ------------------------------------------------------------------- pattern

enum class HookKind { All, SkipDown, SkipMid, SkipUp, Alternate, SkipTwo, SkipOneDown, Custom };

struct HookPattern {
  HookKind kind = HookKind::All;
  std::vector<bool> mask;  // Custom only, one entry per block

  static HookPattern custom(std::vector<bool> mask) { return {HookKind::Custom, std::move(mask)}; }
  std::string name() const;
  // Accepts the names produced by name(); Custom as "custom:1010101".
  static HookPattern parse(const std::string& text);
};

// The seven hooking patterns of the ablation study, All first.
inline constexpr std::array<HookKind, 7> kAblationPatterns{HookKind::All,       HookKind::SkipDown, HookKind::SkipMid,
                                                           HookKind::SkipUp,    HookKind::Alternate, HookKind::SkipTwo,
                                                           HookKind::SkipOneDown};

// Sorted block indices that receive an adapter.
std::vector<std::size_t> resolve_pattern(const HookPattern& pattern, const UNetSpec& spec);

// --------------------------------------------------------------- hooked UNet

class AttachError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A frozen UNet with adapters applied to selected block outputs. Only the
/// adapter store is trainable.
class HookedUNet : public Denoiser {
 public:
  explicit HookedUNet(std::shared_ptr<const UNet> base, Activation act = Activation::leaky(0.01));

  void attach(const HookPattern& pattern, std::uint64_t seed, double init_scale = 0.0);
  // Re-attaches from a saved adapter store (same pattern descriptor).
  void attach_from(const HookPattern& pattern, ParamStore adapters);
  bool attached() const { return attached_; }

  // `fired`, when given, receives the block indices whose adapter ran, in
  // execution order. `extra` hooks run after the adapter.
  Tensor forward(const Tensor& z_t, const std::vector<int>& t, const Tensor& p, const BlockHooks* extra = nullptr,
                 std::vector<std::size_t>* fired = nullptr) const;
  Tensor predict(const Tensor& z_t, const std::vector<int>& t, const Tensor& p) const override {
    return forward(z_t, t, p);
  }
  const UNetSpec& spec() const override { return base_->spec(); }

  const UNet& base() const { return *base_; }
  std::shared_ptr<const UNet> base_ptr() const { return base_; }
  ParamStore& adapters() { return adapters_; }
  const ParamStore& adapters() const { return adapters_; }
  const HookPattern& pattern() const { return pattern_; }
  const std::vector<std::size_t>& hooked_blocks() const { return blocks_; }
  const Activation& activation_kind() const { return act_; }

  static std::string adapter_prefix(std::size_t block) { return "block" + std::to_string(block); }

 private:
  std::shared_ptr<const UNet> base_;
  Activation act_;
  HookPattern pattern_;
  std::vector<std::size_t> blocks_;
  ParamStore adapters_;
  bool attached_ = false;
};

// adapter params / (adapter + base params); 0 when nothing is attached.
double trainable_fraction(const HookedUNet& model);

// ----------------------------------------------------------------------- LMA

/// Latent morphology autoencoder: two stride-2 convs and a dense layer down
/// to a 32-vector, mirrored back to an image through tanh.
class Lma {
 public:
  static constexpr std::size_t kLatentDim = 32;

  Lma(std::uint64_t seed, std::size_t resolution = 64);
  Lma(ParamStore params, std::size_t resolution);

  Tensor encode(const Tensor& x) const;  // N×1×R×R -> N×32
  Tensor decode(const Tensor& z) const;  // N×32 -> N×1×R×R
  std::size_t resolution() const { return resolution_; }

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

 private:
  std::size_t resolution_;
  ParamStore params_;
};

// ------------------------------------------------------------- discriminator

/// Three spectrally normalised stride-2 convs (1→16→32→64) with leaky ReLU,
/// global average pooling, a 1×1 conv and a sigmoid. Every forward advances
/// the power-iteration state of each normalised layer.
class PixelDiscriminator {
 public:
  static constexpr std::size_t kLayers = 3;

  explicit PixelDiscriminator(std::uint64_t seed);
  // Restores from a store holding both parameters and "spectral.u<i>" entries.
  explicit PixelDiscriminator(const ParamStore& saved);

  Tensor forward(const Tensor& x);  // N×1×H×W -> N probabilities

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const std::array<SpectralState, kLayers>& spectral() const { return spectral_; }
  // Parameters plus spectral vectors as non-trainable entries.
  ParamStore snapshot() const;

 private:
  ParamStore params_;
  std::array<SpectralState, kLayers> spectral_;
};

// -------------------------------------------------------------------- losses

struct LossWeights {
  double lambda_adv = 0.1;
  double lambda_morph = 0.001;
};

// ½·[BCE(p_real, 1) + BCE(p_gen, 0)], each term averaged over the batch.
Tensor discriminator_loss(const Tensor& p_real, const Tensor& p_gen);
double discriminator_loss(double p_real, double p_gen);
// BCE(p_gen, target); target 1 unless configured otherwise.
Tensor adversarial_loss(const Tensor& p_gen, double target = 1.0);
double adversarial_loss(double p_gen, double target = 1.0);
// Mean squared difference over every element.
Tensor morph_loss(const Tensor& z_real, const Tensor& z_gen);
// recon + λ_adv·adv + λ_morph·morph, summed left to right.
Tensor total_gen_loss(const Tensor& recon, const Tensor& adv, const Tensor& morph, const LossWeights& w);
double total_gen_loss(double recon, double adv, double morph, const LossWeights& w);

}  // namespace litediff
