#include "litediff/diffusion.hpp"

#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>
#include <string>

#include "litediff/data.hpp"

namespace litediff {

// ------------------------------------------------------------------ schedule

DiffusionSchedule schedule_new(int T, double beta_start, double beta_end) {
  if (T < 1) throw std::invalid_argument("schedule_new: T must be >= 1, got " + std::to_string(T));
  if (!(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0)) {
    throw std::invalid_argument("schedule_new: need 0 < beta_start < beta_end < 1");
  }
  DiffusionSchedule s;
  s.T = T;
  s.beta.assign(T + 1, 0.0);
  s.alpha_bar.assign(T + 1, 1.0);
  s.alpha.assign(T + 1, 1.0);
  s.sigma.assign(T + 1, 0.0);
  for (int t = 1; t <= T; ++t) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(T - 1);
    s.beta[t] = beta_start + frac * (beta_end - beta_start);
    s.alpha_bar[t] = s.alpha_bar[t - 1] * (1.0 - s.beta[t]);
    s.alpha[t] = std::sqrt(s.alpha_bar[t]);
    s.sigma[t] = std::sqrt(1.0 - s.alpha_bar[t]);
  }
  return s;
}

double DiffusionSchedule::posterior_variance(int t) const {
  if (t < 1 || t > T) throw std::out_of_range("posterior_variance: t out of range");
  return (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * beta[t];
}

namespace {

void check_t(const char* op, int t, int lo, const DiffusionSchedule& sched) {
  if (t < lo || t > sched.T) {
    throw std::out_of_range(std::string(op) + ": t=" + std::to_string(t) + " outside [" + std::to_string(lo) + ", " +
                            std::to_string(sched.T) + "]");
  }
}

}  // namespace

Tensor forward_diffuse(const Tensor& z0, int t, const Tensor& eps, const DiffusionSchedule& sched) {
  check_t("forward_diffuse", t, 0, sched);
  if (z0.shape() != eps.shape()) throw ShapeError("forward_diffuse", z0.shape(), eps.shape());
  if (t == 0) return z0;
  return add(mul(z0, sched.alpha[t]), mul(eps, sched.sigma[t]));
}

Tensor forward_diffuse(const Tensor& z0, const std::vector<int>& t, const Tensor& eps,
                       const DiffusionSchedule& sched) {
  if (z0.shape() != eps.shape()) throw ShapeError("forward_diffuse", z0.shape(), eps.shape());
  if (z0.rank() == 0 || t.size() != z0.dim(0)) {
    throw std::invalid_argument("forward_diffuse: need one timestep per batch row");
  }
  const std::size_t per = z0.numel() / z0.dim(0);
  std::vector<double> a(z0.numel()), s(z0.numel());
  for (std::size_t n = 0; n < t.size(); ++n) {
    check_t("forward_diffuse", t[n], 0, sched);
    std::fill_n(a.begin() + n * per, per, sched.alpha[t[n]]);
    std::fill_n(s.begin() + n * per, per, sched.sigma[t[n]]);
  }
  return add(mul(z0, Tensor(z0.shape(), std::move(a))), mul(eps, Tensor(z0.shape(), std::move(s))));
}

Tensor ddpm_step(const Tensor& z_t, const Tensor& eps_hat, int t, const DiffusionSchedule& sched,
                 const Tensor& noise) {
  check_t("ddpm_step", t, 1, sched);
  if (z_t.shape() != eps_hat.shape()) throw ShapeError("ddpm_step", z_t.shape(), eps_hat.shape());
  if (z_t.shape() != noise.shape()) throw ShapeError("ddpm_step", z_t.shape(), noise.shape());
  const double inv_sqrt = 1.0 / std::sqrt(1.0 - sched.beta[t]);
  const double k = sched.beta[t] / sched.sigma[t];
  const double sd = std::sqrt(sched.posterior_variance(t));
  std::vector<double> out(z_t.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = inv_sqrt * (z_t[i] - k * eps_hat[i]);
    if (t > 1) out[i] += sd * noise[i];
  }
  return Tensor(z_t.shape(), std::move(out));
}

// ---------------------------------------------------------------------- UNet

std::size_t UNetSpec::block_channels(std::size_t block) const {
  const std::size_t k = depth();
  if (block < k) return down_channels[block];
  if (block == k) return mid_channels;
  if (block < block_count()) return down_channels[2 * k - block];
  throw std::out_of_range("block index " + std::to_string(block) + " >= " + std::to_string(block_count()));
}

void UNetSpec::validate() const {
  if (down_channels.empty()) throw std::invalid_argument("UNetSpec: need at least one down block");
  if (base_resolution % (std::size_t{1} << depth()) != 0) {
    throw std::invalid_argument("UNetSpec: base_resolution " + std::to_string(base_resolution) +
                                " not divisible by 2^" + std::to_string(depth()));
  }
  if (t_embed_dim == 0 || t_embed_dim % 2 != 0) throw std::invalid_argument("UNetSpec: t_embed_dim must be even");
  if (latent_channels == 0 || cond_dim == 0 || mid_channels == 0) {
    throw std::invalid_argument("UNetSpec: zero-sized dimension");
  }
}

Tensor sinusoidal_embedding(const std::vector<int>& t, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<double> out(t.size() * dim);
  for (std::size_t n = 0; n < t.size(); ++n) {
    for (std::size_t k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
      out[n * dim + k] = std::sin(t[n] * freq);
      out[n * dim + half + k] = std::cos(t[n] * freq);
    }
  }
  return Tensor({t.size(), dim}, std::move(out));
}

Tensor null_condition(std::size_t n, std::size_t cond_dim) { return Tensor::zeros({n, cond_dim}); }

namespace {

constexpr std::size_t kEmbedWidth = 64;

std::string block_name(const UNetSpec& spec, std::size_t block) {
  const std::size_t k = spec.depth();
  if (block < k) return "down" + std::to_string(block);
  if (block == k) return "mid";
  return "up" + std::to_string(block - k - 1);
}

// Input channels of each block's residual pair.
std::size_t block_in_channels(const UNetSpec& spec, std::size_t block) {
  const std::size_t k = spec.depth();
  if (block == 0) return spec.down_channels[0];
  if (block < k) return spec.down_channels[block - 1];
  if (block == k) return spec.down_channels[k - 1];
  // Up block j concatenates the previous output with down block k-1-j.
  return spec.block_channels(block - 1) + spec.down_channels[2 * k - block];
}

void register_res_block(ParamStore& s, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
  register_conv(s, name + ".conv1", in, out, 3, rng, true);
  register_dense(s, name + ".emb", kEmbedWidth, out, rng, true);
  register_group_norm(s, name + ".gn1", out, true);
  register_conv(s, name + ".conv2", out, out, 3, rng, true);
  register_group_norm(s, name + ".gn2", out, true);
  if (in != out) register_conv(s, name + ".skip", in, out, 1, rng, true);
}

}  // namespace

UNet::UNet(UNetSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  spec_.validate();
  Rng rng(seed);
  auto& s = params_;
  register_dense(s, "temb.dense1", spec_.t_embed_dim, kEmbedWidth, rng, true);
  register_dense(s, "temb.dense2", kEmbedWidth, kEmbedWidth, rng, true);
  register_dense(s, "cond.dense", spec_.cond_dim, kEmbedWidth, rng, true);
  register_conv(s, "stem", spec_.latent_channels, spec_.down_channels[0], 3, rng, true);
  for (std::size_t b = 0; b < spec_.block_count(); ++b) {
    register_res_block(s, block_name(spec_, b), block_in_channels(spec_, b), spec_.block_channels(b), rng);
  }
  register_group_norm(s, "head.gn", spec_.down_channels[0], true);
  register_conv(s, "head.conv", spec_.down_channels[0], spec_.latent_channels, 3, rng, true);
}

UNet::UNet(UNetSpec spec, ParamStore params) : spec_(std::move(spec)), params_(std::move(params)) {
  spec_.validate();
  const UNet reference(spec_, 0);
  for (const auto& [name, e] : reference.params().entries()) {
    if (!params_.contains(name)) throw std::invalid_argument("UNet: checkpoint lacks parameter '" + name + "'");
    if (params_.get(name).shape() != e.tensor.shape()) {
      throw ShapeError("UNet parameter " + name, e.tensor.shape(), params_.get(name).shape());
    }
  }
}

Tensor UNet::res_block(const std::string& name, const Tensor& x, const Tensor& emb, std::size_t in,
                       std::size_t out) const {
  const auto& s = params_;
  auto h = conv(s, name + ".conv1", x, 1, 1);
  h = add_channel_bias(h, dense(s, name + ".emb", emb));
  h = leaky_relu(group_norm(s, name + ".gn1", h));
  h = group_norm(s, name + ".gn2", conv(s, name + ".conv2", h, 1, 1));
  const auto skip = in == out ? x : conv(s, name + ".skip", x, 1, 0);
  return add(h, skip);
}

Tensor UNet::forward(const Tensor& z_t, const std::vector<int>& t, const Tensor& p, const BlockHooks* hooks) const {
  const auto& sp = spec_;
  if (z_t.rank() != 4 || z_t.dim(1) != sp.latent_channels || z_t.dim(2) != sp.base_resolution ||
      z_t.dim(3) != sp.base_resolution) {
    throw ShapeError("unet_forward", {0, sp.latent_channels, sp.base_resolution, sp.base_resolution}, z_t.shape());
  }
  const std::size_t n = z_t.dim(0);
  if (t.size() != n) throw std::invalid_argument("unet_forward: need one timestep per batch row");
  for (int ti : t) {
    if (ti < 0) throw std::out_of_range("unet_forward: negative timestep " + std::to_string(ti));
  }
  if (p.shape() != Shape{n, sp.cond_dim}) throw ShapeError("unet_forward condition", {n, sp.cond_dim}, p.shape());

  const auto& s = params_;
  auto emb = dense(s, "temb.dense2", leaky_relu(dense(s, "temb.dense1", sinusoidal_embedding(t, sp.t_embed_dim))));
  emb = add(emb, dense(s, "cond.dense", p));

  auto finish = [&](std::size_t block, Tensor h) {
    if (hooks && hooks->on_block_output) return hooks->on_block_output(block, h);
    return h;
  };

  const std::size_t k = sp.depth();
  auto h = conv(s, "stem", z_t, 1, 1);
  std::vector<Tensor> skips;
  for (std::size_t b = 0; b < k; ++b) {
    h = res_block(block_name(sp, b), h, emb, block_in_channels(sp, b), sp.block_channels(b));
    h = finish(b, resample(h, Resample::Down2));
    skips.push_back(h);
  }
  h = finish(k, res_block("mid", h, emb, block_in_channels(sp, k), sp.mid_channels));
  for (std::size_t j = 0; j < k; ++j) {
    const std::size_t b = k + 1 + j;
    const std::size_t src = k - 1 - j;
    auto skip = skips[src];
    if (hooks && hooks->on_skip) skip = hooks->on_skip(src, skip);
    h = res_block(block_name(sp, b), concat_channels(h, skip), emb, block_in_channels(sp, b), sp.block_channels(b));
    h = finish(b, resample(h, Resample::Up2));
  }
  h = leaky_relu(group_norm(s, "head.gn", h));
  return conv(s, "head.conv", h, 1, 1);
}

// ----------------------------------------------------------------------- VAE

namespace {

constexpr std::size_t kVaeC1 = 8, kVaeC2 = 16;

void check_image(const char* op, const Tensor& x) {
  if (x.rank() != 4 || x.dim(1) != 1 || x.dim(2) % 4 != 0 || x.dim(3) % 4 != 0 || x.dim(2) == 0) {
    throw ShapeError(op, {0, 1, 64, 64}, x.shape());
  }
}

}  // namespace

Vae::Vae(std::uint64_t seed) {
  Rng rng(seed);
  auto& s = params_;
  register_conv(s, "enc.conv1", 1, kVaeC1, 3, rng, true);
  register_conv(s, "enc.conv2", kVaeC1, kVaeC2, 3, rng, true);
  register_conv(s, "enc.conv3", kVaeC2, kVaeC2, 3, rng, true);
  register_conv(s, "enc.out", kVaeC2, kLatentChannels, 3, rng, true);
  register_conv(s, "dec.in", kLatentChannels, kVaeC2, 3, rng, true);
  register_conv(s, "dec.conv1", kVaeC2, kVaeC2, 3, rng, true);
  register_conv(s, "dec.conv2", kVaeC2, kVaeC1, 3, rng, true);
  register_conv(s, "dec.out", kVaeC1, 1, 3, rng, true);
  s.add("latent_scale", Tensor::scalar(1.0), false);
}

Vae::Vae(ParamStore params) : params_(std::move(params)) {
  const Vae reference(0);
  for (const auto& [name, e] : reference.params().entries()) {
    if (!params_.contains(name)) throw std::invalid_argument("Vae: checkpoint lacks parameter '" + name + "'");
    if (params_.get(name).shape() != e.tensor.shape()) {
      throw ShapeError("Vae parameter " + name, e.tensor.shape(), params_.get(name).shape());
    }
  }
}

void Vae::set_latent_scale(double s) {
  if (!(s > 0.0) || !std::isfinite(s)) throw std::invalid_argument("Vae: latent scale must be positive");
  params_.get("latent_scale").mutable_data()[0] = s;
}

Tensor Vae::encode_raw(const Tensor& x) const {
  const auto& s = params_;
  auto h = resample(leaky_relu(conv(s, "enc.conv1", x, 1, 1)), Resample::Down2);
  h = resample(leaky_relu(conv(s, "enc.conv2", h, 1, 1)), Resample::Down2);
  h = leaky_relu(conv(s, "enc.conv3", h, 1, 1));
  return conv(s, "enc.out", h, 1, 1);
}

Tensor Vae::decode_raw(const Tensor& z) const {
  const auto& s = params_;
  auto h = leaky_relu(conv(s, "dec.in", z, 1, 1));
  h = resample(leaky_relu(conv(s, "dec.conv1", h, 1, 1)), Resample::Up2);
  h = resample(leaky_relu(conv(s, "dec.conv2", h, 1, 1)), Resample::Up2);
  return activation(Activation::tanh(), conv(s, "dec.out", h, 1, 1));
}

Tensor Vae::encode(const Tensor& x) const {
  check_image("vae_encode", x);
  auto z = encode_raw(x);
  const double sc = latent_scale();
  return sc == 1.0 ? z : mul(z, sc);
}

Tensor Vae::decode(const Tensor& z) const {
  if (z.rank() != 4 || z.dim(1) != kLatentChannels) throw ShapeError("vae_decode", {0, kLatentChannels, 16, 16}, z.shape());
  const double sc = latent_scale();
  return decode_raw(sc == 1.0 ? z : mul(z, 1.0 / sc));
}

// ------------------------------------------------------------------- sampling

Tensor sample_latents(const Denoiser& model, const DiffusionSchedule& sched, const Tensor& p, std::uint64_t seed) {
  const auto& sp = model.spec();
  if (p.rank() != 2 || p.dim(1) != sp.cond_dim) throw ShapeError("sample condition", {0, sp.cond_dim}, p.shape());
  const std::size_t n = p.dim(0);
  const Shape shape{n, sp.latent_channels, sp.base_resolution, sp.base_resolution};
  Rng rng(seed);
  auto draw = [&] {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.normal();
    return Tensor(shape, std::move(v));
  };
  auto z = draw();
  const auto zero = Tensor::zeros(shape);
  for (int t = sched.T; t >= 1; --t) {
    const auto eps_hat = model.predict(z, std::vector<int>(n, t), p);
    z = ddpm_step(z, eps_hat, t, sched, t > 1 ? draw() : zero);
  }
  return z;
}

Tensor sample(const Denoiser& model, const Vae& vae, const DiffusionSchedule& sched, const Tensor& p,
              std::uint64_t seed) {
  return vae.decode(sample_latents(model, sched, p, seed));
}

// --------------------------------------------------------------- pretraining

Tensor gather_rows(const Tensor& t, const std::vector<std::size_t>& indices) {
  if (t.rank() == 0) throw std::invalid_argument("gather_rows: scalar tensor");
  const std::size_t per = t.numel() / t.dim(0);
  std::vector<double> out;
  out.reserve(indices.size() * per);
  for (auto i : indices) {
    if (i >= t.dim(0)) throw std::out_of_range("gather_rows: row " + std::to_string(i));
    const auto row = t.data().subspan(i * per, per);
    out.insert(out.end(), row.begin(), row.end());
  }
  Shape shape = t.shape();
  shape[0] = indices.size();
  return Tensor(std::move(shape), std::move(out));
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, std::uint64_t seed) {
  const auto order = shuffled_indices(n, seed);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch)));
  }
  return out;
}

Tensor encode_dataset(const Vae& vae, const Tensor& images, std::size_t chunk) {
  const std::size_t n = images.dim(0);
  std::vector<double> out;
  Shape shape;
  for (std::size_t i = 0; i < n; i += chunk) {
    std::vector<std::size_t> idx(std::min(chunk, n - i));
    std::iota(idx.begin(), idx.end(), i);
    const auto z = vae.encode(gather_rows(images, idx));
    shape = z.shape();
    out.insert(out.end(), z.data().begin(), z.data().end());
  }
  shape[0] = n;
  return Tensor(std::move(shape), std::move(out));
}

BaseModel pretrain_base(const Tensor& images, const PretrainConfig& cfg) {
  if (images.rank() != 4 || images.dim(0) == 0) throw std::invalid_argument("pretrain_base: empty dataset");
  if (cfg.batch_size == 0) throw std::invalid_argument("pretrain_base: batch_size must be positive");
  const std::size_t n = images.dim(0);

  BaseModel out{Vae(Rng::derive(cfg.seed, 1)), UNet(cfg.spec, Rng::derive(cfg.seed, 2)), {}, {}};

  Optimizer vae_opt(Adam{cfg.learning_rate});
  for (int epoch = 0; epoch < cfg.vae_epochs; ++epoch) {
    double total = 0.0;
    const auto batches = epoch_batches(n, cfg.batch_size, Rng::derive(cfg.seed, 100 + epoch));
    for (const auto& idx : batches) {
      const auto x = gather_rows(images, idx);
      Tape tape;
      Tensor loss;
      {
        TapeScope scope(tape);
        loss = mse_loss(out.vae.decode(out.vae.encode(x)), x);
      }
      backward(loss, tape);
      clip_grad_norm(out.vae.params(), 1.0);
      vae_opt.step(out.vae.params());
      total += loss.item();
    }
    out.vae_loss.push_back(total / static_cast<double>(batches.size()));
  }
  out.vae.params().freeze_all();

  auto latents = encode_dataset(out.vae, images);
  double sq = 0.0;
  for (double v : latents.data()) sq += v * v;
  const double scale = 1.0 / std::sqrt(sq / static_cast<double>(latents.numel()));
  out.vae.set_latent_scale(scale);
  latents = mul(latents, scale);

  const auto sched = schedule_new(cfg.schedule_T);
  const auto& sp = out.unet.spec();
  if (latents.dim(2) != sp.base_resolution) {
    throw ShapeError("pretrain_base latent", {n, sp.latent_channels, sp.base_resolution, sp.base_resolution},
                     latents.shape());
  }
  Optimizer unet_opt(Adam{cfg.learning_rate});
  Rng rng(Rng::derive(cfg.seed, 3));
  for (int epoch = 0; epoch < cfg.unet_epochs; ++epoch) {
    double total = 0.0;
    const auto batches = epoch_batches(n, cfg.batch_size, Rng::derive(cfg.seed, 1000 + epoch));
    for (const auto& idx : batches) {
      const auto z0 = gather_rows(latents, idx);
      std::vector<int> t(idx.size());
      for (auto& ti : t) ti = static_cast<int>(rng.uniform_int(1, sched.T));
      std::vector<double> e(z0.numel());
      for (auto& v : e) v = rng.normal();
      const Tensor eps(z0.shape(), std::move(e));
      Tape tape;
      Tensor loss;
      {
        TapeScope scope(tape);
        loss = mse_loss(out.unet.forward(forward_diffuse(z0, t, eps, sched), t, null_condition(idx.size(), sp.cond_dim)),
                        eps);
      }
      backward(loss, tape);
      clip_grad_norm(out.unet.params(), 1.0);
      unet_opt.step(out.unet.params());
      total += loss.item();
    }
    out.unet_loss.push_back(total / static_cast<double>(batches.size()));
  }
  out.unet.params().freeze_all();
  return out;
}

}  // namespace litediff
