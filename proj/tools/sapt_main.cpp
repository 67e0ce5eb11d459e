// sapt: corpus generation, pretraining, adaptive pretraining, fine-tuning,
// evaluation and the full few-shot experiment, all driven by one config file.

#include <CLI11.hpp>
#include <fmt/format.h>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "sapt/config.hpp"
#include "sapt/experiment.hpp"

namespace fs = std::filesystem;

namespace {

struct CommonFlags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  int workers = 1;
  bool resume = true;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config, "Experiment config file (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", flags.out, "Experiment directory (default: output_dir from the config)");
  cmd->add_option("--seed", flags.seed, "Override the global seed");
  cmd->add_option("--set", flags.overrides, "Override a config key, e.g. --set pretrain.steps=500");
  cmd->add_option("--workers", flags.workers, "Worker threads for fine-tuning cells")->check(CLI::PositiveNumber);
  cmd->add_flag("--resume,!--no-resume", flags.resume, "Reuse finished outputs in the experiment directory");
}

sapt::Experiment open_experiment(const CommonFlags& flags) {
  std::vector<std::string> overrides = flags.overrides;
  if (flags.seed) overrides.push_back(fmt::format("seed={}", *flags.seed));
  sapt::ExperimentConfig cfg = sapt::load_config(flags.config, overrides);
  const fs::path out = flags.out.empty() ? fs::path(cfg.output_dir) : fs::path(flags.out);
  sapt::ExperimentOptions options;
  options.workers = flags.workers;
  options.resume = flags.resume;
  options.log = &std::cerr;
  return sapt::Experiment(std::move(cfg), out, options);
}

int exit_code(const std::exception& e) {
  if (dynamic_cast<const sapt::ConfigError*>(&e)) return 2;
  if (dynamic_cast<const sapt::DependencyError*>(&e)) return 3;
  if (dynamic_cast<const sapt::SplitViolation*>(&e)) return 4;
  if (dynamic_cast<const sapt::NumericalFailure*>(&e)) return 5;
  if (dynamic_cast<const sapt::IoError*>(&e)) return 6;
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-supervised adaptive pretraining for spoken language identification (synthetic benchmark)"};
  app.require_subcommand(1);

  CommonFlags gen_flags, pre_flags, sapt_flags, ft_flags, exp_flags;
  auto* gen = app.add_subcommand("gen-corpus", "Render the synthetic benchmark into <out>/corpus");
  add_common(gen, gen_flags);
  auto* pre = app.add_subcommand("pretrain", "Self-supervised pretraining on D0 -> checkpoints/theta0.ckpt");
  add_common(pre, pre_flags);
  auto* adapt = app.add_subcommand("sapt", "Adaptive pretraining on the D_T train split -> checkpoints/sapt.ckpt");
  add_common(adapt, sapt_flags);
  auto* ft = app.add_subcommand("finetune", "Full-data fine-tuning -> checkpoints/finetuned-<from>.ckpt");
  add_common(ft, ft_flags);
  std::string ft_from = "sapt";
  ft->add_option("--from", ft_from, "Start checkpoint")->check(CLI::IsMember({"theta0", "sapt"}));
  auto* exp = app.add_subcommand("experiment", "gen-corpus, pretrain, sapt, full-data and few-shot fine-tuning, reports");
  add_common(exp, exp_flags);

  auto* ev = app.add_subcommand("evaluate", "Score a finetuned checkpoint on one split of a manifest");
  std::string ev_ckpt, ev_manifest, ev_split = "test", ev_out;
  ev->add_option("--checkpoint", ev_ckpt, "Finetuned checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--manifest", ev_manifest, "Target manifest (dt.jsonl)")->required()->check(CLI::ExistingFile);
  ev->add_option("--split", ev_split, "dev or test")->check(CLI::IsMember({"dev", "test"}));
  ev->add_option("--out", ev_out, "Output directory for report files")->required();

  CLI11_PARSE(app, argc, argv);

  const char* stage = "sapt";
  try {
    if (*gen) {
      stage = "gen-corpus";
      open_experiment(gen_flags).generate_corpus();
    } else if (*pre) {
      stage = "pretrain";
      open_experiment(pre_flags).ensure_theta0();
    } else if (*adapt) {
      stage = "sapt";
      open_experiment(sapt_flags).ensure_sapt();
    } else if (*ft) {
      stage = "finetune";
      open_experiment(ft_flags).finetune_full(ft_from == "theta0" ? sapt::FineTuneMode::vanilla
                                                                  : sapt::FineTuneMode::sapt);
    } else if (*ev) {
      stage = "evaluate";
      const auto report = sapt::evaluate_files(ev_ckpt, ev_manifest, sapt::split_from_string(ev_split), ev_out);
      std::cout << fmt::format("{} accuracy (macro): {:.1f}%\n", ev_split, sapt::round_one_decimal(report.macro_average));
    } else if (*exp) {
      stage = "experiment";
      auto experiment = open_experiment(exp_flags);
      const auto outcome = experiment.run();
      std::cout << fmt::format("training steps executed: {}\ncells computed: {} of {}\nreports: {}\n",
                               outcome.training_steps, outcome.cells_computed, outcome.protocol.cells.size(),
                               experiment.paths().root.string());
    }
  } catch (const std::exception& e) {
    std::cerr << fmt::format("sapt {}: error: {}\n", stage, e.what());
    return exit_code(e);
  }
  return 0;
}
