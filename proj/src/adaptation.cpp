#include "litediff/adaptation.hpp"

#include <algorithm>
#include <cmath>

namespace litediff {

// ------------------------------------------------------------------- adapter

Tensor adapter_forward(const ParamStore& store, const std::string& prefix, const Tensor& h, const Activation& act) {
  const auto& w = store.get(prefix + ".conv.weight");
  if (h.rank() != 4 || h.dim(1) != w.dim(0)) throw ShapeError("adapter_forward", w.shape(), h.shape());
  auto y = conv(store, prefix + ".conv", h, 1, 0);
  y = group_norm(store, prefix + ".gn", y);
  return add(h, activation(act, y));
}

void register_adapter(ParamStore& store, const std::string& prefix, std::size_t channels, Rng& rng,
                      double init_scale) {
  if (init_scale == 0.0) {
    store.add(prefix + ".conv.weight", Tensor::zeros({channels, channels, 1, 1}), true);
    store.add(prefix + ".conv.bias", Tensor::zeros({channels}), true);
  } else {
    store.add(prefix + ".conv.weight", init_normal({channels, channels, 1, 1}, init_scale, rng), true);
    store.add(prefix + ".conv.bias", init_normal({channels}, init_scale, rng), true);
  }
  register_group_norm(store, prefix + ".gn", channels, true);
}

// ------------------------------------------------------------------- pattern

std::string HookPattern::name() const {
  switch (kind) {
    case HookKind::All: return "all";
    case HookKind::SkipDown: return "skip_down";
    case HookKind::SkipMid: return "skip_mid";
    case HookKind::SkipUp: return "skip_up";
    case HookKind::Alternate: return "alternate";
    case HookKind::SkipTwo: return "skip_two";
    case HookKind::SkipOneDown: return "skip_one_down";
    case HookKind::Custom: {
      std::string s = "custom:";
      for (bool b : mask) s.push_back(b ? '1' : '0');
      return s;
    }
  }
  return "?";
}

HookPattern HookPattern::parse(const std::string& text) {
  for (auto k : kAblationPatterns) {
    if (HookPattern{k, {}}.name() == text) return {k, {}};
  }
  if (text.rfind("custom:", 0) == 0) {
    std::vector<bool> mask;
    for (char c : text.substr(7)) {
      if (c != '0' && c != '1') throw std::invalid_argument("hook pattern mask must be 0/1 digits: " + text);
      mask.push_back(c == '1');
    }
    return custom(std::move(mask));
  }
  throw std::invalid_argument("unknown hook pattern '" + text +
                              "' (all, skip_down, skip_mid, skip_up, alternate, skip_two, skip_one_down, custom:...)");
}

std::vector<std::size_t> resolve_pattern(const HookPattern& pattern, const UNetSpec& spec) {
  const std::size_t count = spec.block_count(), k = spec.depth();
  std::vector<std::size_t> out;
  auto keep_if = [&](auto pred) {
    for (std::size_t b = 0; b < count; ++b)
      if (pred(b)) out.push_back(b);
  };
  switch (pattern.kind) {
    case HookKind::All: keep_if([](std::size_t) { return true; }); break;
    case HookKind::SkipDown: keep_if([&](std::size_t b) { return b >= k; }); break;
    case HookKind::SkipMid: keep_if([&](std::size_t b) { return b != k; }); break;
    case HookKind::SkipUp: keep_if([&](std::size_t b) { return b <= k; }); break;
    case HookKind::Alternate: keep_if([](std::size_t b) { return b % 2 == 0; }); break;
    case HookKind::SkipTwo: keep_if([](std::size_t b) { return b % 3 == 0; }); break;
    case HookKind::SkipOneDown: keep_if([&](std::size_t b) { return !(k > 1 && b == 1); }); break;
    case HookKind::Custom:
      if (pattern.mask.size() != count) {
        throw std::invalid_argument("custom hook mask has " + std::to_string(pattern.mask.size()) +
                                    " entries, spec has " + std::to_string(count) + " blocks");
      }
      keep_if([&](std::size_t b) { return static_cast<bool>(pattern.mask[b]); });
      break;
  }
  return out;
}

// --------------------------------------------------------------- hooked UNet

HookedUNet::HookedUNet(std::shared_ptr<const UNet> base, Activation act) : base_(std::move(base)), act_(act) {
  if (!base_) throw std::invalid_argument("HookedUNet: null base");
}

void HookedUNet::attach(const HookPattern& pattern, std::uint64_t seed, double init_scale) {
  if (attached_) throw AttachError("adapters already attached (pattern " + pattern_.name() + ")");
  if (!base_->params().all_frozen()) throw AttachError("cannot attach adapters to a base with trainable parameters");
  const auto blocks = resolve_pattern(pattern, base_->spec());
  Rng rng(seed);
  ParamStore store;
  for (auto b : blocks) register_adapter(store, adapter_prefix(b), base_->spec().block_channels(b), rng, init_scale);
  pattern_ = pattern;
  blocks_ = blocks;
  adapters_ = std::move(store);
  attached_ = true;
}

void HookedUNet::attach_from(const HookPattern& pattern, ParamStore adapters) {
  if (attached_) throw AttachError("adapters already attached (pattern " + pattern_.name() + ")");
  if (!base_->params().all_frozen()) throw AttachError("cannot attach adapters to a base with trainable parameters");
  const auto blocks = resolve_pattern(pattern, base_->spec());
  ParamStore reference;
  Rng rng(0);
  for (auto b : blocks) register_adapter(reference, adapter_prefix(b), base_->spec().block_channels(b), rng);
  if (reference.size() != adapters.size()) throw AttachError("adapter store does not match pattern " + pattern.name());
  for (const auto& [name, e] : reference.entries()) {
    if (!adapters.contains(name) || adapters.get(name).shape() != e.tensor.shape()) {
      throw AttachError("adapter store does not match pattern " + pattern.name() + " at '" + name + "'");
    }
  }
  adapters.set_all_trainable(true);
  pattern_ = pattern;
  blocks_ = blocks;
  adapters_ = std::move(adapters);
  attached_ = true;
}

Tensor HookedUNet::forward(const Tensor& z_t, const std::vector<int>& t, const Tensor& p, const BlockHooks* extra,
                           std::vector<std::size_t>* fired) const {
  BlockHooks hooks;
  hooks.on_block_output = [&](std::size_t block, const Tensor& h) {
    Tensor out = h;
    if (std::binary_search(blocks_.begin(), blocks_.end(), block)) {
      out = adapter_forward(adapters_, adapter_prefix(block), h, act_);
      if (fired) fired->push_back(block);
    }
    if (extra && extra->on_block_output) out = extra->on_block_output(block, out);
    return out;
  };
  if (extra && extra->on_skip) hooks.on_skip = extra->on_skip;
  return base_->forward(z_t, t, p, &hooks);
}

double trainable_fraction(const HookedUNet& model) {
  const double a = static_cast<double>(model.adapters().param_count());
  const double b = static_cast<double>(model.base().params().param_count());
  return a / (a + b);
}

// ----------------------------------------------------------------------- LMA

namespace {

constexpr std::size_t kLmaC1 = 16, kLmaC2 = 32;

void check_resolution(const char* op, const Tensor& x, std::size_t res) {
  if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) != res || x.dim(3) != res) throw ShapeError(op, {0, 1, res, res}, x.shape());
}

}  // namespace

Lma::Lma(std::uint64_t seed, std::size_t resolution) : resolution_(resolution) {
  if (resolution == 0 || resolution % 4 != 0) throw std::invalid_argument("Lma: resolution must be a multiple of 4");
  Rng rng(seed);
  const std::size_t flat = kLmaC2 * (resolution / 4) * (resolution / 4);
  register_conv(params_, "enc.conv1", 1, kLmaC1, 3, rng, true);
  register_conv(params_, "enc.conv2", kLmaC1, kLmaC2, 3, rng, true);
  register_dense(params_, "enc.fc", flat, kLatentDim, rng, true);
  register_dense(params_, "dec.fc", kLatentDim, flat, rng, true);
  register_conv(params_, "dec.conv1", kLmaC2, kLmaC1, 3, rng, true);
  register_conv(params_, "dec.conv2", kLmaC1, 1, 3, rng, true);
}

Lma::Lma(ParamStore params, std::size_t resolution) : resolution_(resolution), params_(std::move(params)) {
  const Lma reference(0, resolution);
  for (const auto& [name, e] : reference.params().entries()) {
    if (!params_.contains(name)) throw std::invalid_argument("Lma: checkpoint lacks parameter '" + name + "'");
    if (params_.get(name).shape() != e.tensor.shape()) {
      throw ShapeError("Lma parameter " + name, e.tensor.shape(), params_.get(name).shape());
    }
  }
}

Tensor Lma::encode(const Tensor& x) const {
  check_resolution("lma_encode", x, resolution_);
  auto h = leaky_relu(conv(params_, "enc.conv1", x, 2, 1));
  h = leaky_relu(conv(params_, "enc.conv2", h, 2, 1));
  return dense(params_, "enc.fc", reshape(h, {x.dim(0), h.numel() / x.dim(0)}));
}

Tensor Lma::decode(const Tensor& z) const {
  if (z.rank() != 2 || z.dim(1) != kLatentDim) throw ShapeError("lma_decode", {0, kLatentDim}, z.shape());
  const std::size_t q = resolution_ / 4;
  auto h = leaky_relu(dense(params_, "dec.fc", z));
  h = resample(reshape(h, {z.dim(0), kLmaC2, q, q}), Resample::Up2);
  h = resample(leaky_relu(conv(params_, "dec.conv1", h, 1, 1)), Resample::Up2);
  return activation(Activation::tanh(), conv(params_, "dec.conv2", h, 1, 1));
}

// ------------------------------------------------------------- discriminator

namespace {

constexpr std::array<std::size_t, PixelDiscriminator::kLayers + 1> kDiscChannels{1, 16, 32, 64};

std::string disc_layer(std::size_t i) { return "conv" + std::to_string(i); }
std::string spectral_name(std::size_t i) { return "spectral.u" + std::to_string(i); }

}  // namespace

PixelDiscriminator::PixelDiscriminator(std::uint64_t seed) {
  Rng rng(seed);
  for (std::size_t i = 0; i < kLayers; ++i) {
    register_conv(params_, disc_layer(i), kDiscChannels[i], kDiscChannels[i + 1], 3, rng, true);
    spectral_[i] = SpectralState::random(kDiscChannels[i + 1], rng);
  }
  register_conv(params_, "out", kDiscChannels[kLayers], 1, 1, rng, true);
}

PixelDiscriminator::PixelDiscriminator(const ParamStore& saved) : PixelDiscriminator(0) {
  for (auto& [name, e] : params_.entries()) {
    if (!saved.contains(name)) throw std::invalid_argument("PixelDiscriminator: missing '" + name + "'");
    const auto& src = saved.get(name);
    if (src.shape() != e.tensor.shape()) throw ShapeError("PixelDiscriminator " + name, e.tensor.shape(), src.shape());
    std::copy(src.data().begin(), src.data().end(), params_.get(name).mutable_data().begin());
    params_.set_trainable(name, saved.trainable(name));
  }
  for (std::size_t i = 0; i < kLayers; ++i) {
    const auto& u = saved.get(spectral_name(i));
    if (u.numel() != spectral_[i].u.size()) throw ShapeError("spectral state", {spectral_[i].u.size()}, u.shape());
    spectral_[i].u.assign(u.data().begin(), u.data().end());
  }
}

Tensor PixelDiscriminator::forward(const Tensor& x) {
  if (x.rank() != 4 || x.dim(1) != 1) throw ShapeError("disc_forward", {0, 1, 64, 64}, x.shape());
  Tensor h = x;
  for (std::size_t i = 0; i < kLayers; ++i) {
    const auto name = disc_layer(i);
    h = leaky_relu(spectral_conv2d(h, params_.get(name + ".weight"), params_.get(name + ".bias"), spectral_[i], 2, 1));
  }
  const std::size_t n = x.dim(0);
  auto pooled = reshape(global_avg_pool(h), {n, kDiscChannels[kLayers], 1, 1});
  return reshape(sigmoid(conv(params_, "out", pooled, 1, 0)), {n});
}

ParamStore PixelDiscriminator::snapshot() const {
  ParamStore out = params_.clone();
  for (std::size_t i = 0; i < kLayers; ++i) {
    out.add(spectral_name(i), Tensor({spectral_[i].u.size()}, spectral_[i].u), false);
  }
  return out;
}

// -------------------------------------------------------------------- losses

Tensor discriminator_loss(const Tensor& p_real, const Tensor& p_gen) {
  return mul(add(bce_loss(p_real, 1.0), bce_loss(p_gen, 0.0)), 0.5);
}

double discriminator_loss(double p_real, double p_gen) {
  return discriminator_loss(Tensor::scalar(p_real), Tensor::scalar(p_gen)).item();
}

Tensor adversarial_loss(const Tensor& p_gen, double target) { return bce_loss(p_gen, target); }

double adversarial_loss(double p_gen, double target) { return adversarial_loss(Tensor::scalar(p_gen), target).item(); }

Tensor morph_loss(const Tensor& z_real, const Tensor& z_gen) {
  if (z_real.shape() != z_gen.shape()) throw ShapeError("morph_loss", z_real.shape(), z_gen.shape());
  return mse_loss(z_gen, z_real);
}

Tensor total_gen_loss(const Tensor& recon, const Tensor& adv, const Tensor& morph, const LossWeights& w) {
  return add(add(recon, mul(adv, w.lambda_adv)), mul(morph, w.lambda_morph));
}

double total_gen_loss(double recon, double adv, double morph, const LossWeights& w) {
  return total_gen_loss(Tensor::scalar(recon), Tensor::scalar(adv), Tensor::scalar(morph), w).item();
}

}  // namespace litediff
