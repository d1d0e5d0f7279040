#pragma once

// Ranking metrics and the paired bootstrap used to compare two arms that
// score the same test examples.

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mococxr::metrics {

// Raised when a metric is undefined for the given labels (e.g. one class only).
class UndefinedMetric : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

struct ScoredSet {
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;

  std::size_t size() const { return scores.size(); }
  std::size_t positives() const;
  // Equal lengths, finite scores, binary labels.
  void validate() const;
};

// Mann-Whitney statistic P(s+ > s-) + 0.5 P(s+ = s-).
double auroc(const ScoredSet& set);

// Average precision: sum over descending distinct thresholds of delta-recall x precision.
double auprc(const ScoredSet& set);

// AUROC of a resample given per-example multiplicities. `order` sorts the
// examples by ascending score (see ascending_order).
double weighted_auroc(const ScoredSet& set, std::span<const std::size_t> order, std::span<const std::uint32_t> counts);
std::vector<std::size_t> ascending_order(const ScoredSet& set);

// Per-replicate example multiplicities. Draws that contain a single class are
// redrawn from the same stream so every replicate has a defined AUROC.
struct BootstrapPlan {
  std::uint64_t seed = 0;
  std::vector<std::vector<std::uint32_t>> counts;  // [replicate][example]
  std::size_t redraws = 0;

  std::uint64_t fingerprint(std::size_t replicate) const;
};

BootstrapPlan make_bootstrap_plan(std::span<const std::uint8_t> labels, std::size_t n_replicates, std::uint64_t seed);

// Nearest-rank percentile of an ascending-sorted sample, p in (0, 100].
double nearest_rank_percentile(std::span<const double> sorted, double p);

struct ComparisonReport {
  double auc_a = 0.0;
  double auc_b = 0.0;
  double delta = 0.0;  // auc_a - auc_b
  double ci_low = 0.0;
  double ci_high = 0.0;
  std::size_t n_replicates = 0;
  bool significant = false;  // 0 outside [ci_low, ci_high]
  std::uint64_t seed = 0;
  std::vector<double> replicate_deltas;
  std::vector<std::uint64_t> replicate_fingerprints;
};

// Paired bootstrap of auc(a) - auc(b); the same resample is applied to both
// arms. a and b must score the same examples (identical labels, same order).
ComparisonReport bootstrap_compare(const ScoredSet& a, const ScoredSet& b, std::size_t n_replicates,
                                   std::uint64_t seed);

// Multi-trial form: each arm's statistic is the mean AUROC over its trials,
// computed on every shared resample.
ComparisonReport bootstrap_compare_trials(std::span<const ScoredSet> a, std::span<const ScoredSet> b,
                                          std::size_t n_replicates, std::uint64_t seed);

struct AucInterval {
  double auc = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
};

// Mean AUROC over trials with a 95% percentile interval.
AucInterval bootstrap_auc(std::span<const ScoredSet> trials, std::size_t n_replicates, std::uint64_t seed);

// "0.037(0.015, 0.062)"
std::string format_delta_cell(double delta, double lo, double hi);
// "0.944 (0.907, 0.972)"
std::string format_auc_cell(const AucInterval& interval);
// 0.001 -> "0.1%", 1.0 -> "100%"
std::string format_fraction(double fraction);

struct ComparisonCell {
  std::string architecture;
  std::string mode_a;
  std::string mode_b;
  double fraction = 0.0;
  ComparisonReport report;
};

inline constexpr const char* kMissingCell = "--";

// Rows are distinct (architecture, mode_a, mode_b) in first-seen order;
// columns are `fractions`. Cells with no report render as kMissingCell.
std::string render_comparison_table(std::span<const double> fractions, std::span<const ComparisonCell> cells,
                                    const std::string& label_a = "MoCo-pretrained",
                                    const std::string& label_b = "Generic-pretrained");

std::string comparison_csv(std::span<const ComparisonCell> cells);

struct LearningRateRow {
  double learning_rate = 0.0;
  AucInterval auc;
};

std::string render_learning_rate_table(std::span<const LearningRateRow> rows);

// Aligns '|' separated rows into padded columns.
std::string align_table(const std::vector<std::vector<std::string>>& rows);

}  // namespace mococxr::metrics
