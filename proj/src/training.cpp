#include "litediff/training.hpp"

#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>

namespace litediff {

std::string to_string(X0Mode m) { return m == X0Mode::Paper ? "paper" : "variance_preserving"; }
std::string to_string(AdvTarget t) { return t == AdvTarget::One ? "one" : "half"; }

X0Mode parse_x0_mode(const std::string& s) {
  if (s == "paper") return X0Mode::Paper;
  if (s == "variance_preserving" || s == "vp") return X0Mode::VariancePreserving;
  throw std::invalid_argument("unknown x0_estimate '" + s + "' (expected paper or variance_preserving)");
}

AdvTarget parse_adv_target(const std::string& s) {
  if (s == "one") return AdvTarget::One;
  if (s == "half") return AdvTarget::Half;
  throw std::invalid_argument("unknown adv_target '" + s + "' (expected one or half)");
}

void TrainConfig::validate() const {
  if (epochs < 0) throw std::invalid_argument("TrainConfig: epochs must be >= 0");
  if (batch_size == 0) throw std::invalid_argument("TrainConfig: batch_size must be positive");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("TrainConfig: learning_rate must be positive");
  if (schedule_T < 1) throw std::invalid_argument("TrainConfig: schedule_T must be >= 1");
  if (loss_weights.lambda_adv < 0.0 || loss_weights.lambda_morph < 0.0) {
    throw std::invalid_argument("TrainConfig: loss weights must be non-negative");
  }
  if (!(clip_norm > 0.0)) throw std::invalid_argument("TrainConfig: clip_norm must be positive");
}

Json TrainConfig::to_json() const {
  return Json{{"epochs", epochs},
              {"batch_size", batch_size},
              {"learning_rate", learning_rate},
              {"seed", seed},
              {"lambda_adv", loss_weights.lambda_adv},
              {"lambda_morph", loss_weights.lambda_morph},
              {"schedule_T", schedule_T},
              {"x0_estimate_mode", to_string(x0_estimate_mode)},
              {"adv_target", to_string(adv_target)},
              {"clip_norm", clip_norm}};
}

TrainConfig TrainConfig::from_json(const Json& j) {
  TrainConfig c;
  c.epochs = j.at("epochs").get<int>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.loss_weights.lambda_adv = j.at("lambda_adv").get<double>();
  c.loss_weights.lambda_morph = j.at("lambda_morph").get<double>();
  c.schedule_T = j.at("schedule_T").get<int>();
  c.x0_estimate_mode = parse_x0_mode(j.at("x0_estimate_mode").get<std::string>());
  c.adv_target = parse_adv_target(j.at("adv_target").get<std::string>());
  c.clip_norm = j.value("clip_norm", 1.0);
  c.validate();
  return c;
}

// ------------------------------------------------------------------- phase A

LmaTrainResult phase_a_train(const Tensor& images, const TrainConfig& cfg) {
  cfg.validate();
  if (images.rank() != 4 || images.dim(0) == 0) throw std::invalid_argument("phase_a_train: empty dataset");
  const std::size_t n = images.dim(0);
  LmaTrainResult out{Lma(Rng::derive(cfg.seed, 1), images.dim(2)), {}};
  Optimizer opt(Adam{cfg.learning_rate});
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double total = 0.0;
    const auto batches = epoch_batches(n, cfg.batch_size, Rng::derive(cfg.seed, 100 + epoch));
    for (const auto& idx : batches) {
      const auto x = gather_rows(images, idx);
      Tape tape;
      Tensor loss;
      {
        TapeScope scope(tape);
        loss = mse_loss(out.lma.decode(out.lma.encode(x)), x);
      }
      backward(loss, tape);
      clip_grad_norm(out.lma.params(), cfg.clip_norm);
      opt.step(out.lma.params());
      total += loss.item();
    }
    out.epoch_loss.push_back(total / static_cast<double>(batches.size()));
  }
  out.lma.params().freeze_all();
  return out;
}

// ------------------------------------------------------------------- phase B

namespace {

void require_frozen(const PhaseBState& s) {
  if (!s.model.base().params().all_frozen()) throw FreezeViolation("phase B: base UNet has trainable parameters");
  if (!s.vae->params().all_frozen()) throw FreezeViolation("phase B: VAE has trainable parameters");
  if (!s.lma->params().all_frozen()) throw FreezeViolation("phase B: LMA has trainable parameters");
  if (!s.model.attached()) throw AttachError("phase B: no adapters attached");
}

Tensor gaussian(Shape shape, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal();
  return Tensor(std::move(shape), std::move(v));
}

// Per-row constants broadcast over the rest of a tensor of `shape`.
Tensor per_row(const Shape& shape, const std::vector<int>& t, const std::vector<double>& table, bool invert) {
  const std::size_t per = shape_numel(shape) / shape[0];
  std::vector<double> v(shape_numel(shape));
  for (std::size_t n = 0; n < t.size(); ++n) {
    const double c = table[t[n]];
    std::fill_n(v.begin() + n * per, per, invert ? 1.0 / c : c);
  }
  return Tensor(shape, std::move(v));
}

ParamStore sub_store(const ParamStore& s, const std::string& prefix) {
  ParamStore out;
  for (const auto& [name, e] : s.entries()) {
    if (name.rfind(prefix, 0) == 0) out.add(name.substr(prefix.size()), e.tensor.clone(), e.trainable);
  }
  return out;
}

}  // namespace

PhaseBState make_phase_b_state(std::shared_ptr<const UNet> base, std::shared_ptr<const Vae> vae,
                               std::shared_ptr<const Lma> lma, const HookPattern& pattern, const TrainConfig& cfg,
                               Activation adapter_act) {
  cfg.validate();
  if (!vae || !lma) throw std::invalid_argument("make_phase_b_state: null VAE or LMA");
  HookedUNet model(std::move(base), adapter_act);
  model.attach(pattern, Rng::derive(cfg.seed, 1));
  PhaseBState s{std::move(model),
                std::move(vae),
                std::move(lma),
                PixelDiscriminator(Rng::derive(cfg.seed, 2)),
                Optimizer(Adam{cfg.learning_rate}),
                Optimizer(Adam{cfg.learning_rate}),
                schedule_new(cfg.schedule_T),
                cfg,
                Rng(Rng::derive(cfg.seed, 3)),
                0,
                0};
  require_frozen(s);
  return s;
}

LossBreakdown phase_b_step(PhaseBState& s, const Tensor& x_real, const Tensor& p, const Tensor* z0_cached) {
  require_frozen(s);
  const std::size_t n = x_real.dim(0);
  const auto z0 = z0_cached ? *z0_cached : s.vae->encode(x_real);
  if (z0.dim(0) != n) throw ShapeError("phase_b_step latents", {n}, z0.shape());

  std::vector<int> t(n);
  for (auto& ti : t) ti = static_cast<int>(s.rng.uniform_int(1, s.sched.T));
  const auto eps = gaussian(z0.shape(), s.rng);
  const auto z_t = forward_diffuse(z0, t, eps, s.sched);

  LossBreakdown out;
  out.step = s.step;
  out.epoch = s.epochs_done;

  Tape tape;
  Tensor l_gen;
  std::optional<ParamsAsConstants> disc_fixed;  // lives through the generator backward
  {
    TapeScope scope(tape);
    const auto eps_hat = s.model.forward(z_t, t, p);
    const auto l_recon = mse_loss(eps_hat, eps);

    Tensor z_pred;
    if (s.cfg.x0_estimate_mode == X0Mode::Paper) {
      z_pred = sub(z_t, eps_hat);
    } else {
      z_pred = mul(sub(z_t, mul(eps_hat, per_row(z_t.shape(), t, s.sched.sigma, false))),
                   per_row(z_t.shape(), t, s.sched.alpha, true));
    }
    const auto x_gen = s.vae->decode(z_pred);

    {
      // Discriminator update on its own tape, against the detached sample.
      Tape dtape;
      Tensor l_d;
      {
        TapeScope dscope(dtape);
        const auto p_real = s.disc.forward(x_real);
        const auto p_gen = s.disc.forward(x_gen.detach());
        l_d = discriminator_loss(p_real, p_gen);
      }
      backward(l_d, dtape);
      s.disc_opt.step(s.disc.params());
      out.disc = l_d.item();
    }

    disc_fixed.emplace(s.disc.params());
    const auto l_adv = adversarial_loss(s.disc.forward(x_gen), s.cfg.adv_target == AdvTarget::One ? 1.0 : 0.5);
    // z_real embeds the clean batch; nothing upstream of it needs grad.
    const auto l_morph = morph_loss(s.lma->encode(x_real), s.lma->encode(x_gen));
    l_gen = total_gen_loss(l_recon, l_adv, l_morph, s.cfg.loss_weights);

    out.recon = l_recon.item();
    out.adv = l_adv.item();
    out.morph = l_morph.item();
  }
  backward(l_gen, tape);
  disc_fixed.reset();
  clip_grad_norm(s.model.adapters(), s.cfg.clip_norm);
  s.adapter_opt.step(s.model.adapters());
  out.gen_total = l_gen.item();
  ++s.step;
  return out;
}

void phase_b_train(PhaseBState& s, const Tensor& images, Tensor latents, std::vector<LossBreakdown>& log,
                   const EpochCallback& on_epoch_end) {
  require_frozen(s);
  if (images.rank() != 4 || images.dim(0) == 0) throw std::invalid_argument("phase_b_train: empty dataset");
  const std::size_t n = images.dim(0);
  if (latents.numel() == 0) latents = encode_dataset(*s.vae, images);
  if (latents.dim(0) != n) throw ShapeError("phase_b_train latents", {n}, latents.shape());
  const auto cond = s.model.spec().cond_dim;

  while (s.epochs_done < s.cfg.epochs) {
    const auto before = frozen_hashes(s);
    const auto batches =
        epoch_batches(n, s.cfg.batch_size, Rng::derive(s.cfg.seed, 1000 + static_cast<std::uint64_t>(s.epochs_done)));
    for (const auto& idx : batches) {
      const auto z0 = gather_rows(latents, idx);
      log.push_back(phase_b_step(s, gather_rows(images, idx), null_condition(idx.size(), cond), &z0));
    }
    ++s.epochs_done;
    const auto mutated = freeze_audit(before, frozen_hashes(s));
    if (!mutated.empty()) throw FreezeViolation("frozen parameter changed during phase B: " + mutated.front());
    if (on_epoch_end) on_epoch_end(s);
  }
}

// ---------------------------------------------------------------- checkpoint

ParamStore phase_b_store(const PhaseBState& s) {
  ParamStore out;
  out.merge(s.model.adapters(), "adapter.");
  out.merge(s.disc.snapshot(), "disc.");
  s.adapter_opt.export_state(out, "opt.adapter.");
  s.disc_opt.export_state(out, "opt.disc.");
  return out;
}

Json phase_b_meta(const PhaseBState& s) {
  return Json{{"kind", "phase_b"},
              {"config", s.cfg.to_json()},
              {"pattern", s.model.pattern().name()},
              {"adapter_activation", s.model.activation_kind().kind == Activation::Kind::Relu ? "relu" : "leaky"},
              {"rng", s.rng.state()},
              {"step", s.step},
              {"epochs_done", s.epochs_done}};
}

void save_phase_b(const std::filesystem::path& path, const PhaseBState& s, const Json& extra) {
  Json meta = phase_b_meta(s);
  for (const auto& [k, v] : extra.items()) meta[k] = v;
  save_checkpoint(path, phase_b_store(s), meta);
}

PhaseBState load_phase_b(const Checkpoint& ck, std::shared_ptr<const UNet> base, std::shared_ptr<const Vae> vae,
                         std::shared_ptr<const Lma> lma) {
  if (ck.meta.value("kind", "") != "phase_b") throw CheckpointError("not a phase B checkpoint");
  const auto cfg = TrainConfig::from_json(ck.meta.at("config"));
  const auto act = ck.meta.value("adapter_activation", "leaky") == "relu" ? Activation::relu() : Activation::leaky(0.01);
  HookedUNet model(std::move(base), act);
  model.attach_from(HookPattern::parse(ck.meta.at("pattern").get<std::string>()), sub_store(ck.params, "adapter."));
  Rng rng;
  rng.set_state(ck.meta.at("rng").get<std::string>());
  PhaseBState s{std::move(model),
                std::move(vae),
                std::move(lma),
                PixelDiscriminator(sub_store(ck.params, "disc.")),
                Optimizer(Adam{cfg.learning_rate}),
                Optimizer(Adam{cfg.learning_rate}),
                schedule_new(cfg.schedule_T),
                cfg,
                rng,
                ck.meta.at("step").get<std::int64_t>(),
                ck.meta.at("epochs_done").get<int>()};
  s.adapter_opt.import_state(ck.params, "opt.adapter.");
  s.disc_opt.import_state(ck.params, "opt.disc.");
  require_frozen(s);
  return s;
}

// ------------------------------------------------------------------ loss CSV

namespace {

constexpr const char* kLossHeader = "step,epoch,recon,adv,morph,gen_total,disc";

void put(std::string& line, double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  line.append(buf, r.ptr);
}

double parse_double(const std::string& field) {
  double v = 0.0;
  const auto r = std::from_chars(field.data(), field.data() + field.size(), v);
  if (r.ec != std::errc{} || r.ptr != field.data() + field.size()) {
    throw std::invalid_argument("loss CSV: bad number '" + field + "'");
  }
  return v;
}

}  // namespace

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossBreakdown>& log) {
  std::string text = std::string(kLossHeader) + "\n";
  for (const auto& r : log) {
    text += std::to_string(r.step) + "," + std::to_string(r.epoch);
    for (double v : {r.recon, r.adv, r.morph, r.gen_total, r.disc}) {
      text += ",";
      put(text, v);
    }
    text += "\n";
  }
  write_file_atomic(path, text);
}

std::vector<LossBreakdown> read_loss_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kLossHeader) throw std::invalid_argument("loss CSV: bad header");
  std::vector<LossBreakdown> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 7) throw std::invalid_argument("loss CSV: expected 7 columns, got " + std::to_string(f.size()));
    LossBreakdown r;
    r.step = static_cast<std::int64_t>(parse_double(f[0]));
    r.epoch = static_cast<int>(parse_double(f[1]));
    r.recon = parse_double(f[2]);
    r.adv = parse_double(f[3]);
    r.morph = parse_double(f[4]);
    r.gen_total = parse_double(f[5]);
    r.disc = parse_double(f[6]);
    out.push_back(r);
  }
  return out;
}

// --------------------------------------------------------------------- audit

std::uint64_t fnv1a(const Tensor& t) {
  std::uint64_t h = 1469598103934665603ULL;
  for (double v : t.data()) {
    unsigned char bytes[sizeof(double)];
    std::memcpy(bytes, &v, sizeof v);
    for (unsigned char b : bytes) {
      h ^= b;
      h *= 1099511628211ULL;
    }
  }
  for (auto d : t.shape()) {
    h ^= d;
    h *= 1099511628211ULL;
  }
  return h;
}

TensorHashes frozen_hashes(const std::vector<std::pair<std::string, const ParamStore*>>& stores) {
  TensorHashes out;
  for (const auto& [label, store] : stores) {
    for (const auto& [name, e] : store->entries()) {
      if (!e.trainable) out[label + "/" + name] = fnv1a(e.tensor);
    }
  }
  return out;
}

TensorHashes frozen_hashes(const PhaseBState& s) {
  return frozen_hashes({{"unet", &s.model.base().params()}, {"vae", &s.vae->params()}, {"lma", &s.lma->params()}});
}

std::vector<std::string> freeze_audit(const TensorHashes& before, const TensorHashes& after) {
  std::vector<std::string> out;
  for (const auto& [name, h] : before) {
    const auto it = after.find(name);
    if (it == after.end() || it->second != h) out.push_back(name);
  }
  return out;
}

}  // namespace litediff
