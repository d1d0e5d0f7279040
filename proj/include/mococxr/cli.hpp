#pragma once

// Pipeline commands behind the mococxr executable. Each command resolves a
// RunConfig, writes it to its output directory as run_config.ini, and keeps an
// INCOMPLETE marker there until it finishes.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mococxr/data.hpp"
#include "mococxr/diffcore/encoder.hpp"
#include "mococxr/fields.hpp"
#include "mococxr/finetune.hpp"
#include "mococxr/metrics.hpp"
#include "mococxr/moco.hpp"

namespace mococxr::cli {

// section -> key -> value. Keys outside any section are rejected.
using Ini = std::map<std::string, fields::Fields>;

// '#' and ';' start comment lines. Errors carry "<source>:<line>:".
Ini parse_ini(const std::string& text, const std::string& source = "config");
std::string format_ini(const Ini& ini);

struct RunSection {
  std::filesystem::path data_dir = "data";
  std::filesystem::path out_dir = "out";
  data::UncertainPolicy uncertain_policy = data::UncertainPolicy::kPositive;
  std::size_t parallel_trials = 1;
};

struct PretrainSection {
  // Linear-probe epochs used to score each pretraining epoch on the valid split.
  std::size_t selection_probe_epochs = 40;
  std::vector<double> lr_grid{1e-2, 1e-3, 1e-4, 1e-5};
  // Label fraction and trial count of the probe behind each learning-rate row.
  double lr_grid_fraction = 0.1;
  std::size_t lr_grid_trials = 3;
};

struct ArmsSection {
  std::filesystem::path moco_checkpoint;
  std::filesystem::path generic_checkpoint;
};

struct CompareSection {
  std::filesystem::path grid_dir;
  std::size_t replicates = 500;
  std::uint64_t seed = 0;
  std::string arm_a = "moco";
  std::string arm_b = "generic";
};

struct RunConfig {
  std::string command;
  RunSection run;
  data::SyntheticSpec synthetic;
  diffcore::EncoderSpec encoder;
  moco::MoCoConfig moco;
  moco::GenericInitConfig generic;
  PretrainSection pretrain;
  finetune::FinetuneConfig finetune;
  finetune::LabelFractionPlan plan;
  ArmsSection arms;
  CompareSection compare;

  void validate() const;
  Ini to_ini() const;
  // Absent sections and keys keep their defaults; unknown ones throw.
  static RunConfig from_ini(const Ini& ini);
};

// "section.key=value"
void apply_override(Ini& ini, const std::string& assignment);

// Defaults, then the file (when given), then the "section.key=value"
// overrides in order. The result is validated.
RunConfig resolve_config(const std::string& command, const std::optional<std::filesystem::path>& config_file,
                         const std::vector<std::string>& overrides);

// Sets every seed field (synthetic, moco, generic, plan, compare).
void set_all_seeds(Ini& ini, std::uint64_t seed);

inline constexpr const char* kRunConfigFile = "run_config.ini";
inline constexpr const char* kIncompleteMarker = "INCOMPLETE";

struct CommandOptions {
  bool force = false;   // allow a non-empty output directory
  bool resume = false;  // pretrain: continue from the newest epoch checkpoint
  bool lr_grid = false; // pretrain: one sub-run per learning rate
};

void cmd_synth_data(const RunConfig& config, const CommandOptions& options);
void cmd_pretrain(const RunConfig& config, const CommandOptions& options);
void cmd_finetune(const RunConfig& config, const CommandOptions& options);
void cmd_compare(const RunConfig& config, const CommandOptions& options);
void cmd_evaluate(const RunConfig& config, const CommandOptions& options);

// Output file names.
inline constexpr const char* kGenericCheckpoint = "generic.ckpt";
inline constexpr const char* kBestCheckpoint = "best.ckpt";
inline constexpr const char* kResultGridFile = "result_grid.csv";
inline constexpr const char* kCellsFile = "cells.csv";
inline constexpr const char* kScoresDir = "scores";
inline constexpr const char* kComparisonTable = "comparison.txt";
inline constexpr const char* kComparisonCsv = "comparison.csv";
inline constexpr const char* kEvaluationTable = "evaluation.txt";
inline constexpr const char* kEvaluationCsv = "evaluation.csv";
inline constexpr const char* kLrGridTable = "lr_grid.txt";
inline constexpr const char* kLrGridCsv = "lr_grid.csv";

// "image_path,label,score" rows as written by finetune.
metrics::ScoredSet read_score_file(const std::filesystem::path& path);

// Label for an encoder layout, e.g. "res1x8-16-32".
std::string architecture_name(const diffcore::EncoderSpec& spec);

// Trials of a finetune output directory with their test scores attached.
std::vector<finetune::TrialResult> load_grid(const std::filesystem::path& grid_dir,
                                             std::vector<metrics::ScoredSet>* scored = nullptr);

}  // namespace mococxr::cli
