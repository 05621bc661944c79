#include <doctest.h>

#include <atomic>
#include <cstring>
#include <filesystem>

#include "litediff/commands.hpp"

using namespace litediff;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("litediff_experiment_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ExperimentConfig tiny(const fs::path& out) {
  auto c = ExperimentConfig::parse(
      "base_images = 16\n"
      "target_images = 16\n"
      "eval_images = 16\n"
      "fid_images = 64\n"
      "vae_epochs = 1\n"
      "unet_epochs = 1\n"
      "lma_epochs = 1\n"
      "epochs = 2\n"
      "eval_encoder_epochs = 1\n"
      "sample_count = 64\n"
      "schedule_T = 10\n");
  c.out_dir = out.string();
  return c;
}

void require_config_error(const std::string& text, const std::string& key) {
  try {
    ExperimentConfig::parse(text);
    FAIL("expected ConfigError for " << key);
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("'" + key + "'") != std::string::npos);
  }
}

}  // namespace

TEST_CASE("config defaults match the documented experiment") {
  const auto c = ExperimentConfig::parse("");
  CHECK(c.epochs == 10);
  CHECK(c.batch_size == 8);
  CHECK(c.learning_rate == 1e-4);
  CHECK(c.lambda_adv == 0.1);
  CHECK(c.lambda_morph == 0.001);
  CHECK(c.schedule_T == 200);
  CHECK(c.target_images == 2000);
  CHECK(c.hook_pattern.kind == HookKind::All);
  CHECK(c.datasize_sizes == std::vector<std::size_t>{250, 500, 1000, 2000});
}

TEST_CASE("config parsing: comments, whitespace and every key round-trip") {
  const auto c = ExperimentConfig::parse(
      "# leading comment\n\n"
      "  arm   =  probe  \n"
      "lambda_morph = 0\n"
      "hook_pattern = custom:1010101\n"
      "x0_estimate = variance_preserving\n"
      "adv_target = half\n"
      "adapter_relu = true\n"
      "evaluate_arms = base, probe\n"
      "ablation_patterns = all,skip_up\n"
      "datasize_sizes = 8,16\n"
      "learning_rate = 0.00025\n");
  CHECK(c.arm == "probe");
  CHECK(c.lambda_morph == 0.0);
  CHECK(c.hook_pattern.name() == "custom:1010101");
  CHECK(c.x0_estimate_mode == X0Mode::VariancePreserving);
  CHECK(c.adv_target == AdvTarget::Half);
  CHECK(c.adapter_relu);
  CHECK(c.evaluate_arms == std::vector<std::string>{"base", "probe"});
  REQUIRE(c.ablation_patterns.size() == 2);
  CHECK(c.ablation_patterns[1].kind == HookKind::SkipUp);
  CHECK(c.learning_rate == 0.00025);

  const auto again = ExperimentConfig::parse(c.to_text());
  CHECK(again.to_text() == c.to_text());
  CHECK(again.to_json() == c.to_json());
  CHECK(c.to_json().size() == ExperimentConfig::keys().size());
}

TEST_CASE("config errors name the offending key") {
  require_config_error("bogus = 1\n", "bogus");
  require_config_error("epochs = 3\nepochs = 4\n", "epochs");
  require_config_error("epochs = three\n", "epochs");
  require_config_error("resolution = 48\n", "resolution");
  require_config_error("batch_size = 0\n", "batch_size");
  require_config_error("hook_pattern = sideways\n", "hook_pattern");
  require_config_error("hook_pattern = custom:101\n", "hook_pattern");
  require_config_error("base_domain = xrays\n", "base_domain");
  require_config_error("adapter_relu = maybe\n", "adapter_relu");
  require_config_error("fid_images = 10\n", "fid_images");
  require_config_error("learning_rate = 1e-4x\n", "learning_rate");
  CHECK_THROWS_AS(ExperimentConfig::parse("no equals sign\n"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::load("/nonexistent/litediff.cfg"), ConfigError);
}

TEST_CASE("config maps onto the trainer configs") {
  auto c = ExperimentConfig::parse("seed = 9\nlambda_adv = 0.5\nlma_epochs = 3\nresolution = 128\n");
  const auto t = c.train_config();
  CHECK(t.seed == 9);
  CHECK(t.loss_weights.lambda_adv == 0.5);
  CHECK(c.lma_config().epochs == 3);
  CHECK(c.pretrain_config().spec.base_resolution == 32);
  CHECK(c.lma_path().filename() == "lma_seed9_n2000.ldck");
}

TEST_CASE("datasets: disjoint streams, target sets nest by size") {
  auto c = tiny(scratch("data"));
  const auto small = target_train_images(c, 4);
  const auto big = target_train_images(c, 8);
  CHECK(std::memcmp(small.data().data(), big.data().data(), small.numel() * sizeof(double)) == 0);
  const auto held = eval_encoder_images(c);
  CHECK(std::memcmp(held.data().data(), big.data().data(), small.numel() * sizeof(double)) != 0);
  CHECK(fid_reference_images(c).dim(0) == 64);
}

TEST_CASE("LMA cache ignores phase B settings but not phase A ones") {
  auto c = tiny(scratch("lma_cache"));
  c.target_images = 8;
  obtain_lma(c);
  std::vector<std::string> said;
  const Logger log = [&](const std::string& s) { said.push_back(s); };

  auto no_morph = c;
  no_morph.lambda_morph = 0.0;
  no_morph.lambda_adv = 0.3;
  obtain_lma(no_morph, log);
  REQUIRE(said.size() == 1);
  CHECK(said[0].starts_with("reusing"));

  auto longer = c;
  longer.lma_epochs = 2;
  said.clear();
  obtain_lma(longer, log);
  CHECK(said.front().find("rebuilding") != std::string::npos);
}

TEST_CASE("parallel_for visits every index once and rethrows") {
  for (int jobs : {1, 3}) {
    std::vector<std::atomic<int>> hits(37);
    parallel_for(hits.size(), jobs, [&](std::size_t i) { ++hits[i]; });
    for (auto& h : hits) CHECK(h.load() == 1);
  }
  CHECK_THROWS_AS(parallel_for(10, 2,
                               [](std::size_t i) {
                                 if (i == 4) throw std::runtime_error("boom");
                               }),
                  std::runtime_error);
}

TEST_CASE("adapt: reruns and resumes are byte-identical") {
  const auto root = scratch("adapt");
  auto c = tiny(root / "a");
  const auto first = cmd_adapt(c);
  const auto ref = read_file(first.checkpoint);
  const auto ref_csv = read_file(first.loss_csv);
  CHECK(first.log.size() == 4);  // 2 epochs × 16 / 8

  auto rerun = tiny(root / "b");
  fs::create_directories(rerun.out());
  fs::copy_file(c.base_path(), rerun.base_path());  // shared base, as in the studies
  CHECK(read_file(cmd_adapt(rerun).checkpoint) == ref);

  auto part = tiny(root / "c");
  fs::create_directories(part.out());
  fs::copy_file(c.base_path(), part.base_path());
  part.epochs = 1;
  cmd_adapt(part);
  part.epochs = 2;
  part.resume = true;
  const auto resumed = cmd_adapt(part);
  CHECK(read_file(resumed.checkpoint) == ref);
  CHECK(read_file(resumed.loss_csv) == ref_csv);

  auto clash = part;
  clash.lambda_adv = 0.2;
  CHECK_THROWS_AS(cmd_adapt(clash), ConfigError);
}

TEST_CASE("sampling does not depend on the worker count") {
  auto c = tiny(scratch("sample"));
  c.sample_count = 40;  // two chunks, the second short
  const auto base = obtain_base(c);
  const auto a = draw_samples(*base.unet, *base.vae, c, 1);
  const auto b = draw_samples(*base.unet, *base.vae, c, 2);
  CHECK(a.shape() == Shape{40, 1, 64, 64});
  CHECK(std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0);
}

TEST_CASE("ablate-hooks: seven rows, fractions match checkpoints, reference flagged") {
  auto c = tiny(scratch("ablate"));
  c.epochs = 1;
  const auto rows = cmd_ablate_hooks(c);
  REQUIRE(rows.size() == 7);
  int references = 0;
  const auto base = obtain_base(c);
  for (const auto& r : rows) {
    std::string name = r.arm;
    if (name.ends_with(kReferenceSuffix)) {
      ++references;
      name.resize(name.size() - std::strlen(kReferenceSuffix));
      CHECK(name == "all");
    }
    ExperimentConfig arm = c;
    arm.arm = ablation_arm(HookPattern::parse(name));
    const auto model = load_adapted(arm.arm_dir() / "adapter.ldck", base);
    CHECK(r.trainable_fraction == trainable_fraction(*model));
    CHECK(r.encoder_checksum == rows.front().encoder_checksum);
  }
  CHECK(references == 1);
  for (std::size_t i = 1; i < rows.size(); ++i) CHECK(rows[i - 1].fid_desk <= rows[i].fid_desk);
  const auto parsed = read_report_csv(c.out() / "ablate_hooks.csv");
  CHECK(parsed.size() == 7);
  CHECK(fs::exists(c.out() / "ablate_hooks.config.txt"));
}

TEST_CASE("datasize: one arm per size, each with its own LMA") {
  auto c = tiny(scratch("datasize"));
  c.epochs = 1;
  c.datasize_sizes = {8, 16};
  const auto rows = cmd_datasize(c);
  REQUIRE(rows.size() == 2);
  CHECK(fs::exists(c.out() / "lma_seed0_n8.ldck"));
  CHECK(fs::exists(c.out() / "lma_seed0_n16.ldck"));
  CHECK(fs::exists(c.out() / "size_8" / "adapter.ldck"));
}

TEST_CASE("datagen writes images and a manifest deterministically") {
  auto c = tiny(scratch("datagen"));
  c.datagen_count = 4;
  const auto dir = cmd_datagen(c);
  const auto manifest = read_file(dir / "manifest.csv");
  CHECK(manifest.rfind("file,class,seed\n", 0) == 0);
  CHECK(std::count(manifest.begin(), manifest.end(), '\n') == 5);
  const auto img = read_file(dir / "morph_lungs_00003.pgm");
  cmd_datagen(c);
  CHECK(read_file(dir / "morph_lungs_00003.pgm") == img);
  CHECK(load_pgm(dir / "morph_lungs_00003.pgm").width == 64);
}
