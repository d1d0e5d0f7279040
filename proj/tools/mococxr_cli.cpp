// mococxr: synth-data -> pretrain -> finetune/probe -> compare/evaluate.
#include <CLI11.hpp>
#include <fmt/format.h>

#include <cstdio>
#include <exception>
#include <optional>
#include <string>
#include <vector>

#include "mococxr/cli.hpp"

namespace {

struct Common {
  std::string config_file;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string data_dir;
  std::string out_dir;
  bool force = false;
};

void add_common(CLI::App& sub, Common& c, bool needs_data) {
  sub.add_option("-c,--config", c.config_file, "INI config file (a run_config.ini reproduces that run)");
  sub.add_option("--set", c.sets, "Override one config value: section.key=value (repeatable)");
  sub.add_option("--seed", c.seed, "Set every seed in the config");
  if (needs_data) sub.add_option("--data", c.data_dir, "Dataset directory holding manifest.csv");
  sub.add_option("-o,--out", c.out_dir, "Output directory");
  sub.add_flag("--force", c.force, "Write into a non-empty output directory");
}

}  // namespace

int main(int argc, char** argv) {
  using namespace mococxr;
  CLI::App app{"MoCo-style contrastive pretraining and label-fraction transfer on grayscale radiographs"};
  app.require_subcommand(1);

  Common common;
  cli::CommandOptions opts;
  std::vector<std::string> flag_overrides;
  auto set_flag = [&](const std::string& key) {
    return [&, key](const std::string& value) { flag_overrides.push_back(key + "=" + value); };
  };

  auto* synth = app.add_subcommand("synth-data", "Generate a synthetic labeled dataset");
  add_common(*synth, common, false);

  auto* pre = app.add_subcommand("pretrain", "Contrastive pretraining with per-epoch checkpoints");
  add_common(*pre, common, true);
  pre->add_flag("--resume", opts.resume, "Continue from the newest epoch checkpoint in the output directory");
  pre->add_flag("--lr-grid", opts.lr_grid, "One sub-run per pretrain.lr_grid entry plus a learning-rate table");

  std::string pretrain_dir;
  auto add_arms = [&](CLI::App& sub) {
    sub.add_option("--pretrain-dir", pretrain_dir, "Use best.ckpt and generic.ckpt from a pretrain output");
    sub.add_option_function<std::string>("--moco", set_flag("arms.moco_checkpoint"), "Checkpoint of the MoCo arm");
    sub.add_option_function<std::string>("--generic", set_flag("arms.generic_checkpoint"),
                                         "Checkpoint of the generic-init arm");
    sub.add_option_function<std::string>("--parallel-trials", set_flag("run.parallel_trials"),
                                         "Worker count for independent trials");
    sub.add_option_function<std::string>("--fractions", set_flag("plan.fractions"), "Comma-separated label fractions");
    sub.add_option_function<std::string>("--trials", set_flag("plan.trials_per_fraction"), "Trials per fraction");
  };
  auto* ft = app.add_subcommand("finetune", "Label-fraction experiment over both init arms");
  add_common(*ft, common, true);
  add_arms(*ft);
  ft->add_option_function<std::string>("--mode", set_flag("finetune.mode"), "linear | end_to_end");
  auto* probe = app.add_subcommand("probe", "finetune with --mode linear");
  add_common(*probe, common, true);
  add_arms(*probe);

  auto add_grid = [&](CLI::App& sub) {
    sub.add_option_function<std::string>("--grid", set_flag("compare.grid_dir"), "Output directory of finetune")
        ->required();
    sub.add_option_function<std::string>("--replicates", set_flag("compare.replicates"), "Bootstrap replicates");
  };
  auto* cmp = app.add_subcommand("compare", "Paired bootstrap of arm_a minus arm_b per cell");
  add_common(*cmp, common, false);
  add_grid(*cmp);
  auto* eval = app.add_subcommand("evaluate", "AUROC with bootstrap interval per cell");
  add_common(*eval, common, false);
  add_grid(*eval);

  CLI11_PARSE(app, argc, argv);

  auto* chosen = app.get_subcommands().front();
  const std::string command = chosen->get_name();
  try {
    std::vector<std::string> overrides;
    if (common.seed) {
      for (const char* section : {"synthetic", "moco", "generic", "plan", "compare"}) {
        overrides.push_back(fmt::format("{}.seed={}", section, *common.seed));
      }
    }
    if (!common.data_dir.empty()) overrides.push_back("run.data_dir=" + common.data_dir);
    if (!common.out_dir.empty()) overrides.push_back("run.out_dir=" + common.out_dir);
    if (!pretrain_dir.empty()) {
      overrides.push_back("arms.moco_checkpoint=" + (std::filesystem::path(pretrain_dir) / cli::kBestCheckpoint).string());
      overrides.push_back("arms.generic_checkpoint=" +
                          (std::filesystem::path(pretrain_dir) / cli::kGenericCheckpoint).string());
    }
    if (command == "probe") overrides.push_back("finetune.mode=linear");
    overrides.insert(overrides.end(), flag_overrides.begin(), flag_overrides.end());
    overrides.insert(overrides.end(), common.sets.begin(), common.sets.end());
    std::optional<std::filesystem::path> file;
    if (!common.config_file.empty()) file = common.config_file;
    const auto config = cli::resolve_config(command, file, overrides);
    opts.force = common.force;

    if (command == "synth-data") cli::cmd_synth_data(config, opts);
    else if (command == "pretrain") cli::cmd_pretrain(config, opts);
    else if (command == "finetune" || command == "probe") cli::cmd_finetune(config, opts);
    else if (command == "compare") cli::cmd_compare(config, opts);
    else cli::cmd_evaluate(config, opts);
  } catch (const std::exception& e) {
    fmt::print(stderr, "mococxr {}: error: {}\n", command, e.what());
    return 1;
  }
  return 0;
}
