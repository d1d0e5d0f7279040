#pragma once

// Label-fraction transfer experiments: sample a labeled subset, then train a
// linear classifier on frozen backbone features or fine-tune end to end, and
// score the held-out test split.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mococxr/data.hpp"
#include "mococxr/diffcore/encoder.hpp"

namespace mococxr::finetune {

using diffcore::EncoderSpec;
using diffcore::ParamSet;
using diffcore::Tensor;

enum class SamplingUnit { kPatient, kImage };
std::string to_string(SamplingUnit unit);
SamplingUnit parse_sampling_unit(const std::string& text);

enum class Mode { kLinear, kEndToEnd };
std::string to_string(Mode mode);
Mode parse_mode(const std::string& text);

struct LabelFractionPlan {
  std::vector<double> fractions{0.001, 0.01, 0.1, 1.0};
  std::size_t trials_per_fraction = 5;
  std::uint64_t seed = 0;
  SamplingUnit unit = SamplingUnit::kPatient;

  void validate() const;
  std::map<std::string, std::string> to_fields() const;
  static LabelFractionPlan from_fields(const std::map<std::string, std::string>& fields);
};

using EpochMap = std::map<double, std::size_t>;
EpochMap default_epochs_by_fraction();

struct FinetuneConfig {
  Mode mode = Mode::kLinear;
  double learning_rate = 3e-5;
  std::size_t batch_size = 16;
  EpochMap epochs_by_fraction = default_epochs_by_fraction();
  double momentum = 0.9;
  double weight_decay = 1e-4;
  // Classify the projection-head output instead of the pooled backbone features.
  bool keep_head = false;
  // Linear mode: z-score features with the labeled subset's mean and spread.
  bool standardize_features = true;
  // Linear mode: start the classifier at zero instead of fan-in uniform.
  bool zero_init_classifier = true;
  // Share of the labeled subset held out for epoch selection, used when the
  // subset has at least validation_min_examples examples.
  double validation_fraction = 0.1;
  std::size_t validation_min_examples = 20;

  void validate() const;
  // Exact entry when present, otherwise log-linear interpolation between the
  // neighbouring entries in log(fraction), clamped at both ends.
  std::size_t epochs_for(double fraction) const;
  std::map<std::string, std::string> to_fields() const;
  static FinetuneConfig from_fields(const std::map<std::string, std::string>& fields);
};

// Sorted indices into `records`. Patient unit: max(1, round(f * #patients))
// patients drawn without replacement, all their images returned.
std::vector<std::size_t> sample_label_fraction(std::span<const data::LabeledRecord> records, double fraction,
                                               std::uint64_t seed, SamplingUnit unit);

// FNV-1a over the image paths of the selected records, in index order.
std::uint64_t subset_fingerprint(std::span<const data::LabeledRecord> records, std::span<const std::size_t> indices);

struct TrialResult {
  std::string init_kind;  // "moco" | "generic" | any arm name
  std::string architecture;
  Mode mode = Mode::kLinear;
  double fraction = 0.0;
  std::size_t trial = 0;
  std::uint64_t trial_seed = 0;
  std::vector<double> scores;  // sigmoid probability per test example
  double auroc = 0.0;
  double auprc = 0.0;
  std::uint64_t subset_fingerprint = 0;
  std::size_t train_examples = 0;
  std::size_t validation_examples = 0;
  std::size_t epochs = 0;
  std::size_t selected_epoch = 0;
  // Set when the labeled subset holds a single class.
  bool single_class_subset = false;
  std::uint64_t backbone_checksum_before = 0;
  std::uint64_t backbone_checksum_after = 0;
};

// Pooled backbone features (or projected embeddings with keep_head) for every
// image, computed without gradient recording in batches.
Tensor extract_features(const ParamSet& params, const EncoderSpec& spec, std::span<const Tensor> images,
                        bool keep_head, std::size_t batch_size = 64);

struct ProbeOutcome {
  ParamSet classifier;
  std::vector<double> test_scores;
  std::size_t validation_examples = 0;
  std::size_t selected_epoch = 0;
};

// Logistic regression by minibatch SGD on fixed features: [N x C] rows.
ProbeOutcome fit_probe(const Tensor& train_features, std::span<const std::uint8_t> train_labels,
                       const Tensor& test_features, const FinetuneConfig& config, std::size_t epochs,
                       std::uint64_t seed);

// Linear protocol on images. The backbone is checksummed before and after and
// a change raises std::logic_error.
TrialResult train_linear_probe(const ParamSet& backbone, const EncoderSpec& spec, const data::ImageDataset& train,
                               const data::ImageDataset& test, const FinetuneConfig& config, double fraction,
                               std::uint64_t seed);

// End-to-end protocol: all backbone parameters plus a fresh classifier train.
// `final_params` receives the trained parameters when non-null.
TrialResult train_end_to_end(const ParamSet& init, const EncoderSpec& spec, const data::ImageDataset& train,
                             const data::ImageDataset& test, const FinetuneConfig& config, double fraction,
                             std::uint64_t seed, ParamSet* final_params = nullptr);

// Pretraining checkpoint score: patients of `labeled` alternate (in order of
// first appearance) between a probe-fitting half and a scoring half, and the
// result is the scoring half's AUROC (0.5 when it holds a single class).
std::function<double(const ParamSet&)> probe_selection_metric(data::ImageDataset labeled, EncoderSpec spec,
                                                              FinetuneConfig config, std::size_t epochs,
                                                              std::uint64_t seed);

struct InitArm {
  std::string name;
  std::string architecture;
  EncoderSpec spec;
  ParamSet params;
};

struct ExperimentOptions {
  std::size_t parallel_trials = 1;
  std::function<void(const TrialResult&)> on_result;
};

struct CellSummary {
  std::string init_kind;
  std::string architecture;
  Mode mode = Mode::kLinear;
  double fraction = 0.0;
  double mean_auroc = 0.0;
  double mean_auprc = 0.0;
  std::size_t trials = 0;
};

struct ExperimentResult {
  std::vector<TrialResult> trials;  // order: fraction, trial, arm
  std::vector<CellSummary> cells;
  std::size_t leakage_checks = 0;
  std::size_t freeze_checks = 0;
  std::size_t pairing_checks = 0;
};

// Samples each (fraction, trial) subset once from `train` and reuses it for
// every arm. Throws std::logic_error if any test image or patient appears in
// a labeled subset, if arms of a cell disagree on the subset, or if a
// linear-probe backbone changes.
ExperimentResult run_experiment(const LabelFractionPlan& plan, std::span<const InitArm> arms,
                                const data::ImageDataset& train, const data::ImageDataset& test,
                                const FinetuneConfig& config, const ExperimentOptions& options = {});

std::vector<CellSummary> summarize_cells(std::span<const TrialResult> trials);

inline constexpr const char* kResultGridHeader = "init,arch,mode,fraction,trial,seed,auroc,auprc,subset_fingerprint";

std::string result_grid_csv(std::span<const TrialResult> trials);
std::vector<TrialResult> parse_result_grid(const std::string& csv);

// "image_path,label,score" rows for one trial.
std::string score_file_csv(const TrialResult& trial, const data::ImageDataset& test);
std::string score_file_name(const TrialResult& trial);

}  // namespace mococxr::finetune
