#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "litediff/experiment.hpp"

namespace litediff {

struct CommandContext {
  int jobs = 1;  // worker threads for arms and sampling
  Logger log;
};

// Each command writes under cfg.out_dir and throws on any failure.

// <out>/datagen/: one PGM per image, manifest.csv (file,class,seed), config.txt.
std::filesystem::path cmd_datagen(const ExperimentConfig& cfg, const CommandContext& ctx = {});
std::filesystem::path cmd_pretrain_base(const ExperimentConfig& cfg, const CommandContext& ctx = {});
std::filesystem::path cmd_train_lma(const ExperimentConfig& cfg, const CommandContext& ctx = {});
AdaptOutcome cmd_adapt(const ExperimentConfig& cfg, const CommandContext& ctx = {});
// Samples from the arm's adapted model, or the bare base when the arm has no
// checkpoint. Writes <arm_dir>/samples/ and returns that directory.
std::filesystem::path cmd_sample(const ExperimentConfig& cfg, const CommandContext& ctx = {});
// Arms named in cfg.evaluate_arms; "base" is the unadapted model.
std::vector<ReportRow> cmd_evaluate(const ExperimentConfig& cfg, const CommandContext& ctx = {});
std::vector<ReportRow> cmd_ablate_hooks(const ExperimentConfig& cfg, const CommandContext& ctx = {});
std::vector<ReportRow> cmd_datasize(const ExperimentConfig& cfg, const CommandContext& ctx = {});

inline constexpr const char* kBaseArm = "base";
inline constexpr const char* kReferenceSuffix = " (reference)";

// True when <arm_dir>/adapter.ldck finished cfg.epochs under the same phase B
// settings. The studies reuse such arms instead of retraining them.
bool arm_is_complete(const ExperimentConfig& cfg);

// Arm directory names used by the two studies.
std::string ablation_arm(const HookPattern& p);
std::string datasize_arm(std::size_t n);

// Entry point of the command-line tool; returns the process exit code.
int run_cli(int argc, const char* const* argv);

}  // namespace litediff
