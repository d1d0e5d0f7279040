#include "mococxr/metrics.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mococxr/random.hpp"

namespace mococxr::metrics {

std::size_t ScoredSet::positives() const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), std::uint8_t{1}));
}

void ScoredSet::validate() const {
  if (scores.size() != labels.size()) {
    throw std::invalid_argument(fmt::format("scored set: {} scores vs {} labels", scores.size(), labels.size()));
  }
  for (double s : scores) {
    if (!std::isfinite(s)) throw std::invalid_argument("scored set: non-finite score");
  }
  for (auto l : labels) {
    if (l > 1) throw std::invalid_argument("scored set: labels must be 0 or 1");
  }
}

std::vector<std::size_t> ascending_order(const ScoredSet& set) {
  std::vector<std::size_t> order(set.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto i, auto j) { return set.scores[i] < set.scores[j]; });
  return order;
}

double weighted_auroc(const ScoredSet& set, std::span<const std::size_t> order, std::span<const std::uint32_t> counts) {
  // Sweep tie groups in ascending score order; each positive beats the
  // negatives strictly below it and ties half of those in its own group.
  double pairs_won = 0.0;
  double neg_below = 0.0;
  double total_pos = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    double pos = 0.0, neg = 0.0;
    while (j < order.size() && set.scores[order[j]] == set.scores[order[i]]) {
      const double w = counts.empty() ? 1.0 : counts[order[j]];
      (set.labels[order[j]] ? pos : neg) += w;
      ++j;
    }
    pairs_won += pos * (neg_below + 0.5 * neg);
    neg_below += neg;
    total_pos += pos;
    i = j;
  }
  if (total_pos == 0.0 || neg_below == 0.0) {
    throw UndefinedMetric("auroc: undefined without both positive and negative examples");
  }
  return pairs_won / (total_pos * neg_below);
}

double auroc(const ScoredSet& set) {
  set.validate();
  const auto order = ascending_order(set);
  return weighted_auroc(set, order, {});
}

double auprc(const ScoredSet& set) {
  set.validate();
  const auto total_pos = static_cast<double>(set.positives());
  if (total_pos == 0.0) throw UndefinedMetric("auprc: undefined without positive examples");
  auto order = ascending_order(set);
  std::reverse(order.begin(), order.end());
  double tp = 0.0, fp = 0.0, ap = 0.0, prev_recall = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && set.scores[order[j]] == set.scores[order[i]]) {
      (set.labels[order[j]] ? tp : fp) += 1.0;
      ++j;
    }
    const double recall = tp / total_pos;
    ap += (recall - prev_recall) * (tp / (tp + fp));
    prev_recall = recall;
    i = j;
  }
  return ap;
}

std::uint64_t BootstrapPlan::fingerprint(std::size_t replicate) const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto c : counts.at(replicate)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

BootstrapPlan make_bootstrap_plan(std::span<const std::uint8_t> labels, std::size_t n_replicates, std::uint64_t seed) {
  if (n_replicates == 0) throw std::invalid_argument("bootstrap: n_replicates must be >= 1");
  const auto n = labels.size();
  const auto pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), std::uint8_t{1}));
  if (pos == 0 || pos == n) throw UndefinedMetric("bootstrap: test labels contain a single class");
  BootstrapPlan plan;
  plan.seed = seed;
  plan.counts.resize(n_replicates);
  Rng rng(derive_seed(seed, {0x626f6f74ULL}));
  for (auto& counts : plan.counts) {
    for (;;) {
      counts.assign(n, 0);
      std::size_t drawn_pos = 0;
      for (std::size_t k = 0; k < n; ++k) {
        const auto idx = rng.below(n);
        ++counts[idx];
        drawn_pos += labels[idx];
      }
      if (drawn_pos != 0 && drawn_pos != n) break;
      ++plan.redraws;
    }
  }
  return plan;
}

double nearest_rank_percentile(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw std::invalid_argument("percentile: empty sample");
  if (!(p > 0.0 && p <= 100.0)) throw std::invalid_argument("percentile: p must lie in (0, 100]");
  auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(sorted.size()) - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, sorted.size());
  return sorted[rank - 1];
}

namespace {

void check_paired(std::span<const ScoredSet> a, std::span<const ScoredSet> b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("bootstrap: each arm needs at least one scored set");
  const auto& labels = a.front().labels;
  for (auto arm : {a, b}) {
    for (const auto& s : arm) {
      s.validate();
      if (s.size() != labels.size()) {
        throw std::invalid_argument(
            fmt::format("bootstrap: arms score different example counts ({} vs {})", s.size(), labels.size()));
      }
      if (s.labels != labels) throw std::invalid_argument("bootstrap: arms disagree on labels; not a paired comparison");
    }
  }
}

double mean_auc(std::span<const ScoredSet> arm, const std::vector<std::vector<std::size_t>>& orders,
                std::span<const std::uint32_t> counts) {
  double total = 0.0;
  for (std::size_t t = 0; t < arm.size(); ++t) total += weighted_auroc(arm[t], orders[t], counts);
  return total / static_cast<double>(arm.size());
}

std::vector<std::vector<std::size_t>> orders_for(std::span<const ScoredSet> arm) {
  std::vector<std::vector<std::size_t>> out;
  for (const auto& s : arm) out.push_back(ascending_order(s));
  return out;
}

}  // namespace

ComparisonReport bootstrap_compare_trials(std::span<const ScoredSet> a, std::span<const ScoredSet> b,
                                          std::size_t n_replicates, std::uint64_t seed) {
  check_paired(a, b);
  const auto plan = make_bootstrap_plan(a.front().labels, n_replicates, seed);
  const auto orders_a = orders_for(a);
  const auto orders_b = orders_for(b);
  ComparisonReport report;
  report.seed = seed;
  report.n_replicates = n_replicates;
  report.auc_a = mean_auc(a, orders_a, {});
  report.auc_b = mean_auc(b, orders_b, {});
  report.delta = report.auc_a - report.auc_b;
  report.replicate_deltas.reserve(n_replicates);
  for (std::size_t r = 0; r < n_replicates; ++r) {
    const auto& counts = plan.counts[r];
    report.replicate_deltas.push_back(mean_auc(a, orders_a, counts) - mean_auc(b, orders_b, counts));
    report.replicate_fingerprints.push_back(plan.fingerprint(r));
  }
  std::vector<double> sorted = report.replicate_deltas;
  std::sort(sorted.begin(), sorted.end());
  report.ci_low = nearest_rank_percentile(sorted, 2.5);
  report.ci_high = nearest_rank_percentile(sorted, 97.5);
  report.significant = report.ci_low > 0.0 || report.ci_high < 0.0;
  return report;
}

ComparisonReport bootstrap_compare(const ScoredSet& a, const ScoredSet& b, std::size_t n_replicates,
                                   std::uint64_t seed) {
  return bootstrap_compare_trials(std::span(&a, 1), std::span(&b, 1), n_replicates, seed);
}

AucInterval bootstrap_auc(std::span<const ScoredSet> trials, std::size_t n_replicates, std::uint64_t seed) {
  check_paired(trials, trials);
  const auto plan = make_bootstrap_plan(trials.front().labels, n_replicates, seed);
  const auto orders = orders_for(trials);
  AucInterval out;
  out.auc = mean_auc(trials, orders, {});
  std::vector<double> reps;
  reps.reserve(n_replicates);
  for (const auto& counts : plan.counts) reps.push_back(mean_auc(trials, orders, counts));
  std::sort(reps.begin(), reps.end());
  out.ci_low = nearest_rank_percentile(reps, 2.5);
  out.ci_high = nearest_rank_percentile(reps, 97.5);
  return out;
}

namespace {
std::string fixed3(double v) {
  if (std::abs(v) < 0.0005) v = 0.0;  // no "-0.000"
  return fmt::format("{:.3f}", v);
}
}  // namespace

std::string format_delta_cell(double delta, double lo, double hi) {
  return fixed3(delta) + "(" + fixed3(lo) + ", " + fixed3(hi) + ")";
}

std::string format_auc_cell(const AucInterval& interval) {
  return fixed3(interval.auc) + " (" + fixed3(interval.ci_low) + ", " + fixed3(interval.ci_high) + ")";
}

std::string format_fraction(double fraction) { return fmt::format("{:g}%", fraction * 100.0); }

std::string align_table(const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> widths;
  for (const auto& row : rows) {
    if (widths.size() < row.size()) widths.resize(row.size(), 0);
    for (std::size_t c = 0; c < row.size(); ++c) widths[c] = std::max(widths[c], row[c].size());
  }
  std::string out;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::string line;
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      if (c) line += " | ";
      line += rows[r][c];
      if (c + 1 < rows[r].size()) line.append(widths[c] - rows[r][c].size(), ' ');
    }
    out += line + "\n";
    if (r == 0) {
      std::string rule;
      for (std::size_t c = 0; c < widths.size(); ++c) {
        if (c) rule += "-+-";
        rule.append(widths[c], '-');
      }
      out += rule + "\n";
    }
  }
  return out;
}

std::string render_comparison_table(std::span<const double> fractions, std::span<const ComparisonCell> cells,
                                    const std::string& label_a, const std::string& label_b) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> header{"Architecture", label_a, label_b};
  for (double f : fractions) header.push_back(format_fraction(f));
  rows.push_back(std::move(header));

  struct RowKey {
    std::string arch, mode_a, mode_b;
    bool operator==(const RowKey&) const = default;
  };
  std::vector<RowKey> keys;
  for (const auto& cell : cells) {
    RowKey k{cell.architecture, cell.mode_a, cell.mode_b};
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
  }
  for (const auto& k : keys) {
    std::vector<std::string> row{k.arch, k.mode_a, k.mode_b};
    for (double f : fractions) {
      auto it = std::find_if(cells.begin(), cells.end(), [&](const ComparisonCell& c) {
        return c.fraction == f && RowKey{c.architecture, c.mode_a, c.mode_b} == k;
      });
      row.push_back(it == cells.end() ? std::string(kMissingCell)
                                      : format_delta_cell(it->report.delta, it->report.ci_low, it->report.ci_high));
    }
    rows.push_back(std::move(row));
  }
  return align_table(rows);
}

std::string comparison_csv(std::span<const ComparisonCell> cells) {
  std::string out = "arch,mode_a,mode_b,fraction,auc_a,auc_b,delta,ci_low,ci_high,n_replicates,significant,seed\n";
  for (const auto& c : cells) {
    const auto& r = c.report;
    out += fmt::format("{},{},{},{:g},{:.6f},{:.6f},{:.6f},{:.6f},{:.6f},{},{},{}\n", c.architecture, c.mode_a,
                       c.mode_b, c.fraction, r.auc_a, r.auc_b, r.delta, r.ci_low, r.ci_high, r.n_replicates,
                       r.significant ? 1 : 0, r.seed);
  }
  return out;
}

std::string render_learning_rate_table(std::span<const LearningRateRow> rows) {
  std::vector<std::vector<std::string>> table{{"Learning Rate", "AUC"}};
  for (const auto& r : rows) table.push_back({fmt::format("{:.0e}", r.learning_rate), format_auc_cell(r.auc)});
  return align_table(table);
}

}  // namespace mococxr::metrics
