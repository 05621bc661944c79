#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <memory>

#include "litediff/data.hpp"
#include "litediff/training.hpp"
#include "support/oracles.hpp"

using namespace litediff;

namespace {

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

struct Frozen {
  std::shared_ptr<UNet> unet;
  std::shared_ptr<Vae> vae;
  std::shared_ptr<Lma> lma;
};

Frozen make_frozen(std::uint64_t seed = 1) {
  Frozen f{std::make_shared<UNet>(UNetSpec{}, seed), std::make_shared<Vae>(seed + 1), std::make_shared<Lma>(seed + 2)};
  f.unet->params().freeze_all();
  f.vae->params().freeze_all();
  f.lma->params().freeze_all();
  return f;
}

PhaseBState fresh(const Frozen& f, const TrainConfig& cfg, HookPattern pattern = {HookKind::All, {}}) {
  return make_phase_b_state(f.unet, f.vae, f.lma, pattern, cfg);
}

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.batch_size = 2;
  cfg.schedule_T = 20;
  cfg.seed = 5;
  cfg.epochs = 2;
  return cfg;
}

Tensor lung_batch(std::size_t n, std::uint64_t seed = 3) {
  return to_batch(images_of(generate({Domain::MorphLungs, n, seed, 64})));
}

std::string store_bytes(const ParamStore& s) { return encode_checkpoint(s, Json::object()); }

}  // namespace

TEST_CASE("config json round trip and validation") {
  auto cfg = small_config();
  cfg.x0_estimate_mode = X0Mode::VariancePreserving;
  cfg.adv_target = AdvTarget::Half;
  cfg.loss_weights = {0.25, 0.5};
  const auto back = TrainConfig::from_json(cfg.to_json());
  CHECK(back.to_json() == cfg.to_json());
  CHECK(back.x0_estimate_mode == X0Mode::VariancePreserving);
  CHECK(parse_x0_mode("paper") == X0Mode::Paper);
  CHECK_THROWS(parse_x0_mode("ddim"));
  CHECK_THROWS(parse_adv_target("0.5"));
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = small_config();
  cfg.loss_weights.lambda_adv = -1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("phase A overfits a small set and freezes the LMA") {
  const auto imgs = lung_batch(10);
  TrainConfig cfg;
  cfg.epochs = 40;
  cfg.batch_size = 5;
  cfg.learning_rate = 1e-3;
  cfg.seed = 2;
  const auto a = phase_a_train(imgs, cfg);
  REQUIRE(a.epoch_loss.size() == 40);
  MESSAGE("phase A loss " << a.epoch_loss.front() << " -> " << a.epoch_loss.back());
  CHECK(a.epoch_loss.back() < 0.1 * a.epoch_loss.front());
  CHECK(a.lma.params().all_frozen());

  // a further optimizer step cannot touch the frozen model
  auto lma = a.lma;
  const auto before = store_bytes(lma.params());
  Optimizer opt(Adam{1e-2});
  opt.step(lma.params());
  CHECK(store_bytes(lma.params()) == before);

  cfg.epochs = 2;
  CHECK(store_bytes(phase_a_train(imgs, cfg).lma.params()) == store_bytes(phase_a_train(imgs, cfg).lma.params()));
  CHECK_THROWS(phase_a_train(Tensor::zeros({0, 1, 64, 64}), cfg));
}

TEST_CASE("one phase B step respects the freeze contract") {
  const auto f = make_frozen();
  auto s = fresh(f, small_config());
  const auto before = frozen_hashes(s);
  const auto adapters = s.model.adapters().clone();
  const auto disc = s.disc.params().clone();
  const auto x = lung_batch(2);
  const auto row = phase_b_step(s, x, null_condition(2, 8));
  CHECK(freeze_audit(before, frozen_hashes(s)).empty());
  CHECK_FALSE(bit_equal(adapters.get("block0.conv.weight"), s.model.adapters().get("block0.conv.weight")));
  CHECK_FALSE(bit_equal(adapters.get("block6.gn.beta"), s.model.adapters().get("block6.gn.beta")));
  for (const auto& [name, e] : disc.entries()) CHECK_FALSE(bit_equal(e.tensor, s.disc.params().get(name)));
  CHECK(row.step == 0);
  CHECK(s.step == 1);
  CHECK(row.gen_total == total_gen_loss(row.recon, row.adv, row.morph, s.cfg.loss_weights));
  for (const auto& [name, e] : f.unet->params().entries()) CHECK_FALSE(e.tensor.has_grad());
  // the generator pass must not leave gradients on the discriminator
  for (const auto& [name, e] : s.disc.params().entries()) CHECK_FALSE(e.tensor.has_grad());
}

TEST_CASE("cached latents give the same step as encoding on the fly") {
  const auto f = make_frozen();
  auto a = fresh(f, small_config());
  auto b = fresh(f, small_config());
  const auto x = lung_batch(2);
  const auto z0 = f.vae->encode(x);
  const auto ra = phase_b_step(a, x, null_condition(2, 8), &z0);
  const auto rb = phase_b_step(b, x, null_condition(2, 8));
  CHECK(ra.gen_total == rb.gen_total);
  CHECK(store_bytes(phase_b_store(a)) == store_bytes(phase_b_store(b)));
}

TEST_CASE("zero loss weights reduce the adapter update to the reconstruction gradient") {
  const auto f = make_frozen();
  auto cfg = small_config();
  cfg.loss_weights = {0.0, 0.0};
  auto s = fresh(f, cfg);
  auto ref = fresh(f, cfg);
  const auto x = lung_batch(2);
  const auto p = null_condition(2, 8);
  phase_b_step(s, x, p);

  // reference: same draws, L_recon alone
  const auto z0 = ref.vae->encode(x);
  std::vector<int> t(2);
  for (auto& ti : t) ti = static_cast<int>(ref.rng.uniform_int(1, ref.sched.T));
  const auto eps = oracle::random_tensor(z0.shape(), ref.rng);
  Tape tape;
  Tensor loss;
  {
    TapeScope scope(tape);
    loss = mse_loss(ref.model.forward(forward_diffuse(z0, t, eps, ref.sched), t, p), eps);
  }
  backward(loss, tape);
  clip_grad_norm(ref.model.adapters(), cfg.clip_norm);
  ref.adapter_opt.step(ref.model.adapters());
  CHECK(store_bytes(s.model.adapters()) == store_bytes(ref.model.adapters()));
}

TEST_CASE("phase B step reproduces a straight-line re-implementation") {
  for (auto mode : {X0Mode::Paper, X0Mode::VariancePreserving}) {
    CAPTURE(to_string(mode));
    const auto f = make_frozen(7);
    auto cfg = small_config();
    cfg.x0_estimate_mode = mode;
    cfg.adv_target = mode == X0Mode::Paper ? AdvTarget::One : AdvTarget::Half;
    auto s = fresh(f, cfg);
    auto o = fresh(f, cfg);
    const auto x = lung_batch(3, 9);
    const auto p = null_condition(3, 8);
    const auto got = phase_b_step(s, x, p);

    // line 2-4
    const auto z0 = o.vae->encode(x);
    std::vector<int> t(3);
    for (auto& ti : t) ti = static_cast<int>(o.rng.uniform_int(1, o.sched.T));
    const auto eps = oracle::random_tensor(z0.shape(), o.rng);
    std::vector<double> zt(z0.numel()), zp(z0.numel());
    const std::size_t per = z0.numel() / 3;
    for (std::size_t i = 0; i < zt.size(); ++i) zt[i] = o.sched.alpha[t[i / per]] * z0[i] + o.sched.sigma[t[i / per]] * eps[i];
    const Tensor z_t(z0.shape(), zt);
    // line 5-6
    Tape tape;
    TapeScope scope(tape);
    const auto eps_hat = o.model.forward(z_t, t, p);
    double recon = 0.0;
    for (std::size_t i = 0; i < eps.numel(); ++i) recon += (eps_hat[i] - eps[i]) * (eps_hat[i] - eps[i]);
    recon /= static_cast<double>(eps.numel());
    // line 7
    for (std::size_t i = 0; i < zp.size(); ++i) {
      const int ti = t[i / per];
      zp[i] = mode == X0Mode::Paper ? z_t[i] - eps_hat[i] : (z_t[i] - o.sched.sigma[ti] * eps_hat[i]) / o.sched.alpha[ti];
    }
    const auto x_gen = o.vae->decode(Tensor(z0.shape(), zp));
    // line 8
    PixelDiscriminator before_update(o.disc.snapshot());
    double disc = 0.0;
    {
      Tape dtape;
      TapeScope ds(dtape);
      const auto pr = o.disc.forward(x);
      const auto pg = o.disc.forward(x_gen.detach());
      double a = 0.0, b = 0.0;
      for (std::size_t i = 0; i < 3; ++i) {
        a -= std::log(pr[i]);
        b -= std::log(1.0 - pg[i]);
      }
      disc = 0.5 * (a / 3.0 + b / 3.0);
      backward(discriminator_loss(pr, pg), dtape);
      o.disc_opt.step(o.disc.params());
    }
    // line 9: on the updated discriminator
    const double target = cfg.adv_target == AdvTarget::One ? 1.0 : 0.5;
    auto bce = [&](const Tensor& q) {
      double v = 0.0;
      for (std::size_t i = 0; i < q.numel(); ++i) v -= target * std::log(q[i]) + (1.0 - target) * std::log(1.0 - q[i]);
      return v / static_cast<double>(q.numel());
    };
    PixelDiscriminator after_update(o.disc.snapshot());
    const double adv = bce(after_update.forward(x_gen.detach()));
    const double adv_stale = bce(before_update.forward(x_gen.detach()));
    // line 10
    const auto zr = o.lma->encode(x), zg = o.lma->encode(x_gen.detach());
    double morph = 0.0;
    for (std::size_t i = 0; i < zr.numel(); ++i) morph += (zr[i] - zg[i]) * (zr[i] - zg[i]);
    morph /= static_cast<double>(zr.numel());

    CHECK(std::abs(got.recon - recon) < 1e-12);
    CHECK(std::abs(got.disc - disc) < 1e-12);
    CHECK(std::abs(got.adv - adv) < 1e-12);
    CHECK(std::abs(got.morph - morph) < 1e-12);
    CHECK(std::abs(got.gen_total - (recon + 0.1 * adv + 0.001 * morph)) < 1e-12);
    // the stale discriminator would have given a different adversarial loss
    CHECK(std::abs(adv_stale - adv) > 1e-9);
  }
}

TEST_CASE("adversarial and morphological terms alone reach the adapters") {
  const auto f = make_frozen(11);
  HookedUNet model(f.unet);
  model.attach({HookKind::All, {}}, 0, 0.05);
  PixelDiscriminator d(3);
  const auto x = lung_batch(2);
  Rng rng(1);
  const auto z = oracle::random_tensor({2, 4, 16, 16}, rng);
  for (int which = 0; which < 2; ++which) {
    Tape tape;
    Tensor loss;
    ParamsAsConstants fixed(d.params());
    {
      TapeScope scope(tape);
      const auto x_gen = f.vae->decode(sub(z, model.forward(z, {30, 30}, null_condition(2, 8))));
      if (which == 0) {
        loss = adversarial_loss(d.forward(x_gen));
      } else {
        loss = morph_loss(f.lma->encode(x), f.lma->encode(x_gen));
      }
    }
    backward(loss, tape);
    double norm = 0.0;
    for (const auto& [name, e] : model.adapters().entries()) {
      REQUIRE(e.tensor.has_grad());
      for (double g : e.tensor.grad()) norm += g * g;
    }
    CHECK(norm > 0.0);
    for (const auto& [name, e] : d.params().entries()) CHECK_FALSE(e.tensor.has_grad());
    model.adapters().clear_grads();
  }
}

TEST_CASE("training log accounting and csv round trip") {
  const auto f = make_frozen();
  auto cfg = small_config();
  auto s = fresh(f, cfg);
  const auto imgs = lung_batch(5);
  std::vector<LossBreakdown> log;
  int calls = 0;
  phase_b_train(s, imgs, Tensor(), log, [&](const PhaseBState&) { ++calls; });
  CHECK(log.size() == 2 * 3);  // epochs * ceil(5 / 2)
  CHECK(calls == 2);
  CHECK(log.back().step == 5);
  CHECK(log.back().epoch == 1);
  const auto path = std::filesystem::temp_directory_path() / "litediff_loss.csv";
  write_loss_csv(path, log);
  const auto back = read_loss_csv(path);
  REQUIRE(back.size() == log.size());
  for (std::size_t i = 0; i < log.size(); ++i) {
    CHECK(back[i].step == log[i].step);
    CHECK(back[i].recon == log[i].recon);
    CHECK(back[i].gen_total == log[i].gen_total);
    CHECK(back[i].disc == log[i].disc);
  }
  std::filesystem::remove(path);
}

TEST_CASE("resuming from an epoch checkpoint matches the uninterrupted run") {
  const auto f = make_frozen();
  const auto imgs = lung_batch(5);
  auto cfg = small_config();
  cfg.epochs = 3;

  auto full = fresh(f, cfg);
  std::vector<LossBreakdown> full_log;
  std::string after_first;
  const auto path = std::filesystem::temp_directory_path() / "litediff_resume.ldck";
  phase_b_train(full, imgs, Tensor(), full_log, [&](const PhaseBState& st) {
    if (st.epochs_done == 1) save_phase_b(path, st);
  });

  auto resumed = load_phase_b(load_checkpoint(path), f.unet, f.vae, f.lma);
  CHECK(resumed.epochs_done == 1);
  CHECK(resumed.step == 3);
  std::vector<LossBreakdown> tail;
  phase_b_train(resumed, imgs, Tensor(), tail);
  REQUIRE(tail.size() == 6);
  for (std::size_t i = 0; i < tail.size(); ++i) {
    CHECK(tail[i].step == full_log[3 + i].step);
    CHECK(tail[i].gen_total == full_log[3 + i].gen_total);
    CHECK(tail[i].disc == full_log[3 + i].disc);
  }
  CHECK(store_bytes(phase_b_store(resumed)) == store_bytes(phase_b_store(full)));
  CHECK(phase_b_meta(resumed) == phase_b_meta(full));
  std::filesystem::remove(path);
}

TEST_CASE("freeze audit") {
  auto f = make_frozen();
  auto s = fresh(f, small_config());
  const auto imgs = lung_batch(4);
  const auto latents = encode_dataset(*f.vae, imgs);
  const auto p = null_condition(2, 8);

  SUBCASE("a long window leaves every frozen tensor untouched") {
    const auto before = frozen_hashes(s);
    for (int i = 0; i < 100; ++i) {
      const std::vector<std::size_t> idx{static_cast<std::size_t>(i % 4), static_cast<std::size_t>((i + 1) % 4)};
      const auto z0 = gather_rows(latents, idx);
      phase_b_step(s, gather_rows(imgs, idx), p, &z0);
    }
    CHECK(freeze_audit(before, frozen_hashes(s)).empty());
  }
  SUBCASE("a mutated frozen weight is reported") {
    const auto before = frozen_hashes(s);
    f.unet->params().get("mid.conv1.weight").mutable_data()[7] += 1e-9;
    CHECK(freeze_audit(before, frozen_hashes(s)) == std::vector<std::string>{"unet/mid.conv1.weight"});
  }
  SUBCASE("an unfrozen weight stops training") {
    f.unet->params().set_trainable("stem.weight", true);
    CHECK_THROWS_AS(phase_b_step(s, gather_rows(imgs, {0, 1}), p), FreezeViolation);
    const auto hashes = frozen_hashes(s);
    CHECK(hashes.count("unet/stem.weight") == 0);
  }
  SUBCASE("phase A output is untouched by phase B") {
    const auto before = frozen_hashes({{"lma", &f.lma->params()}});
    std::vector<LossBreakdown> log;
    phase_b_train(s, imgs, latents, log);
    CHECK(freeze_audit(before, frozen_hashes({{"lma", &f.lma->params()}})).empty());
  }
  CHECK(fnv1a(Tensor({2}, {1.0, 2.0})) != fnv1a(Tensor({2}, {2.0, 1.0})));
  CHECK(fnv1a(Tensor({2}, {1.0, 2.0})) != fnv1a(Tensor({1, 2}, {1.0, 2.0})));
}

TEST_CASE("checkpoint of a training state is deterministic") {
  const auto f = make_frozen();
  const auto imgs = lung_batch(3);
  std::string bytes[2];
  for (auto& b : bytes) {
    auto s = fresh(f, small_config());
    std::vector<LossBreakdown> log;
    phase_b_train(s, imgs, Tensor(), log);
    b = encode_checkpoint(phase_b_store(s), phase_b_meta(s));
  }
  CHECK(bytes[0] == bytes[1]);
  CHECK_THROWS_AS(load_phase_b(Checkpoint{Json{{"kind", "base"}}, {}}, f.unet, f.vae, f.lma), CheckpointError);
}
