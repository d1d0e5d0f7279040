#include <fmt/format.h>
#include <fmt/ranges.h>

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <tuple>

#include "mococxr/cli.hpp"
#include "mococxr/diffcore/checkpoint.hpp"

namespace mococxr::cli {

namespace fs = std::filesystem;

namespace {

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

// Creates `dir`, writes the incomplete marker and the resolved config.
void begin_output(const fs::path& dir, const RunConfig& config, bool allow_existing) {
  if (dir.empty()) throw std::invalid_argument("no output directory given");
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw std::runtime_error(dir.string() + " exists and is not a directory");
    if (!allow_existing && !fs::is_empty(dir)) {
      throw std::runtime_error("output directory " + dir.string() + " is not empty (pass --force to write into it)");
    }
  }
  fs::create_directories(dir);
  write_text(dir / kIncompleteMarker, config.command + "\n");
  write_text(dir / kRunConfigFile, format_ini(config.to_ini()));
}

void finish_output(const fs::path& dir) { fs::remove(dir / kIncompleteMarker); }

data::ImageDataset load_data(const RunConfig& config, std::size_t image_size) {
  const auto manifest = config.run.data_dir / "manifest.csv";
  if (!fs::exists(manifest)) {
    throw std::runtime_error("dataset not found: " + manifest.string() + " is missing (run synth-data first)");
  }
  const auto records = data::map_labels(data::load_manifest(manifest), config.run.uncertain_policy);
  return data::load_dataset(records, image_size);
}

void progress(const std::string& line) { fmt::print(stderr, "{}\n", line); }

std::map<std::string, std::string> generic_header(const RunConfig& config) {
  return {{"generic_init", moco::to_string(config.generic.kind)},
          {"generic_seed", std::to_string(config.generic.seed)},
          {"generic_supervised_steps", std::to_string(config.generic.supervised_steps)}};
}

std::vector<metrics::ScoredSet> scored_sets(const std::vector<finetune::TrialResult>& trials,
                                            const data::ImageDataset& test) {
  std::vector<metrics::ScoredSet> out;
  for (const auto& t : trials) out.push_back({t.scores, test.labels()});
  return out;
}

}  // namespace

std::string architecture_name(const diffcore::EncoderSpec& spec) {
  return fmt::format("res{}x{}", spec.blocks_per_stage, fmt::join(spec.channel_widths, "-"));
}

metrics::ScoredSet read_score_file(const fs::path& path) {
  std::istringstream in(read_text(path));
  std::string line;
  if (!std::getline(in, line) || line != "image_path,label,score") {
    throw std::runtime_error(path.string() + ":1: expected header 'image_path,label,score'");
  }
  metrics::ScoredSet set;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto c2 = line.rfind(',');
    const auto c1 = c2 == std::string::npos || c2 == 0 ? std::string::npos : line.rfind(',', c2 - 1);
    if (c1 == std::string::npos) throw std::runtime_error(fmt::format("{}:{}: expected 3 columns", path.string(), lineno));
    const auto label = line.substr(c1 + 1, c2 - c1 - 1);
    if (label != "0" && label != "1") {
      throw std::runtime_error(fmt::format("{}:{}: label must be 0 or 1, got '{}'", path.string(), lineno, label));
    }
    set.labels.push_back(label == "1");
    set.scores.push_back(fields::parse_double(fmt::format("{}:{} score", path.string(), lineno), line.substr(c2 + 1)));
  }
  return set;
}

std::vector<finetune::TrialResult> load_grid(const fs::path& grid_dir, std::vector<metrics::ScoredSet>* scored) {
  if (grid_dir.empty()) throw std::invalid_argument("no result grid directory given");
  const auto grid_path = grid_dir / kResultGridFile;
  if (!fs::exists(grid_path)) throw std::runtime_error("result grid not found: " + grid_path.string());
  if (fs::exists(grid_dir / kIncompleteMarker)) {
    throw std::runtime_error(grid_dir.string() + " is marked incomplete; rerun finetune first");
  }
  auto trials = finetune::parse_result_grid(read_text(grid_path));
  if (scored) scored->clear();
  for (auto& t : trials) {
    auto set = read_score_file(grid_dir / kScoresDir / finetune::score_file_name(t));
    t.scores = set.scores;
    if (scored) scored->push_back(std::move(set));
  }
  return trials;
}

void cmd_synth_data(const RunConfig& config, const CommandOptions& options) {
  const auto& dir = config.run.out_dir;
  begin_output(dir, config, options.force);
  const auto records = data::write_synthetic(config.synthetic, dir);
  if (records.size() != config.synthetic.n_images) {
    throw std::logic_error(fmt::format("synth-data wrote {} rows, expected {}", records.size(), config.synthetic.n_images));
  }
  const auto summary = data::summarize(records);
  progress(fmt::format("wrote {} images ({} patients, prevalence {:.4f}) to {}", summary.total, summary.patients,
                       summary.prevalence(), dir.string()));
  finish_output(dir);
}

namespace {

moco::PretrainResult pretrain_once(const RunConfig& config, const data::ImageDataset& all, const diffcore::ParamSet& init,
                                   const fs::path& dir, double learning_rate, bool resume) {
  auto mc = config.moco;
  mc.learning_rate = learning_rate;
  const auto train = all.split(data::Split::kTrain);
  const auto valid = all.split(data::Split::kValid);
  moco::PretrainOptions opts;
  opts.output_dir = dir;
  opts.resume = resume;
  opts.header = generic_header(config);
  if (valid.size() > 0) {
    opts.selection_metric = finetune::probe_selection_metric(valid, config.encoder, config.finetune,
                                                             config.pretrain.selection_probe_epochs, config.moco.seed);
  }
  opts.on_epoch = [&](std::size_t epoch, double loss, double metric) {
    progress(fmt::format("lr {} epoch {}/{} loss {:.4f} valid probe auroc {:.4f}", fields::format_double(learning_rate),
                         epoch, mc.total_epochs, loss, metric));
  };
  auto result = moco::pretrain(train.images, config.encoder, mc, init, opts);
  progress(fmt::format("lr {} best epoch {}", fields::format_double(learning_rate), result.best_epoch));
  return result;
}

}  // namespace

void cmd_pretrain(const RunConfig& config, const CommandOptions& options) {
  const auto& dir = config.run.out_dir;
  auto all = load_data(config, config.encoder.input_size);
  if (all.split(data::Split::kTrain).size() == 0) throw std::runtime_error("dataset has no train split");
  begin_output(dir, config, options.force || options.resume);

  const auto init = moco::generic_init(config.encoder, config.generic);
  diffcore::Checkpoint generic;
  generic.set_encoder(config.encoder);
  generic.params = init;
  for (const auto& [k, v] : generic_header(config)) generic.header[k] = v;
  generic.header["kind"] = "generic_init";
  diffcore::write_checkpoint(dir / kGenericCheckpoint, generic);

  if (!options.lr_grid) {
    pretrain_once(config, all, init, dir, config.moco.learning_rate, options.resume);
    finish_output(dir);
    return;
  }

  const auto train = all.split(data::Split::kTrain);
  const auto test = all.split(data::Split::kTest);
  if (test.size() == 0) throw std::runtime_error("dataset has no test split");
  finetune::LabelFractionPlan plan = config.plan;
  plan.fractions = {config.pretrain.lr_grid_fraction};
  plan.trials_per_fraction = config.pretrain.lr_grid_trials;
  auto probe = config.finetune;
  probe.mode = finetune::Mode::kLinear;
  std::vector<metrics::LearningRateRow> rows;
  std::string csv = "learning_rate,best_epoch,auroc,ci_low,ci_high\n";
  for (double lr : config.pretrain.lr_grid) {
    const auto sub = dir / ("lr_" + fields::format_double(lr));
    fs::create_directories(sub);
    const auto result = pretrain_once(config, all, init, sub, lr, options.resume);
    const std::vector<finetune::InitArm> arms{{"moco", architecture_name(config.encoder), config.encoder, result.best_query}};
    finetune::ExperimentOptions eo;
    eo.parallel_trials = config.run.parallel_trials;
    const auto er = finetune::run_experiment(plan, arms, train, test, probe, eo);
    const auto sets = scored_sets(er.trials, test);
    const auto interval = metrics::bootstrap_auc(sets, config.compare.replicates, config.compare.seed);
    rows.push_back({lr, interval});
    csv += fmt::format("{},{},{},{},{}\n", fields::format_double(lr), result.best_epoch, fields::format_double(interval.auc),
                       fields::format_double(interval.ci_low), fields::format_double(interval.ci_high));
  }
  const auto table = metrics::render_learning_rate_table(rows);
  write_text(dir / kLrGridTable, table);
  write_text(dir / kLrGridCsv, csv);
  fmt::print("{}", table);
  finish_output(dir);
}

void cmd_finetune(const RunConfig& config, const CommandOptions& options) {
  if (config.arms.moco_checkpoint.empty() || config.arms.generic_checkpoint.empty()) {
    throw std::invalid_argument("finetune needs both arms.moco_checkpoint and arms.generic_checkpoint");
  }
  for (const auto& p : {config.arms.moco_checkpoint, config.arms.generic_checkpoint}) {
    if (!fs::exists(p)) throw std::runtime_error("checkpoint not found: " + p.string());
  }
  const auto moco_ckpt = moco::load_encoder(config.arms.moco_checkpoint);
  const auto generic_ckpt = moco::load_encoder(config.arms.generic_checkpoint);
  if (moco_ckpt.spec.input_size != generic_ckpt.spec.input_size) {
    throw std::invalid_argument("the two checkpoints expect different input sizes");
  }
  auto all = load_data(config, moco_ckpt.spec.input_size);
  const auto train = all.split(data::Split::kTrain);
  const auto test = all.split(data::Split::kTest);
  if (train.size() == 0 || test.size() == 0) throw std::runtime_error("dataset needs non-empty train and test splits");

  const auto& dir = config.run.out_dir;
  begin_output(dir, config, options.force);
  const std::vector<finetune::InitArm> arms{
      {"moco", architecture_name(moco_ckpt.spec), moco_ckpt.spec, moco_ckpt.params},
      {"generic", architecture_name(generic_ckpt.spec), generic_ckpt.spec, generic_ckpt.params}};
  finetune::ExperimentOptions eo;
  eo.parallel_trials = config.run.parallel_trials;
  eo.on_result = [](const finetune::TrialResult& t) {
    progress(fmt::format("{} {} f={} trial {} auroc {:.4f}", t.init_kind, finetune::to_string(t.mode),
                         fields::format_double(t.fraction), t.trial, t.auroc));
  };
  const auto result = finetune::run_experiment(config.plan, arms, train, test, config.finetune, eo);

  fs::create_directories(dir / kScoresDir);
  for (const auto& t : result.trials) write_text(dir / kScoresDir / finetune::score_file_name(t), finetune::score_file_csv(t, test));
  write_text(dir / kResultGridFile, finetune::result_grid_csv(result.trials));
  std::string cells = "init,arch,mode,fraction,mean_auroc,mean_auprc,trials\n";
  std::vector<std::vector<std::string>> rows{{"init", "arch", "mode", "fraction", "mean AUROC", "mean AUPRC"}};
  for (const auto& c : result.cells) {
    cells += fmt::format("{},{},{},{},{},{},{}\n", c.init_kind, c.architecture, finetune::to_string(c.mode),
                         fields::format_double(c.fraction), fields::format_double(c.mean_auroc),
                         fields::format_double(c.mean_auprc), c.trials);
    rows.push_back({c.init_kind, c.architecture, finetune::to_string(c.mode), metrics::format_fraction(c.fraction),
                    fmt::format("{:.3f}", c.mean_auroc), fmt::format("{:.3f}", c.mean_auprc)});
  }
  write_text(dir / kCellsFile, cells);
  fmt::print("{}", metrics::align_table(rows));
  progress(fmt::format("checks: leakage {} freeze {} pairing {}", result.leakage_checks, result.freeze_checks,
                       result.pairing_checks));
  finish_output(dir);
}

void cmd_compare(const RunConfig& config, const CommandOptions& options) {
  std::vector<metrics::ScoredSet> sets;
  const auto trials = load_grid(config.compare.grid_dir, &sets);
  using Key = std::tuple<std::string, std::string, double>;  // arch, mode, fraction
  std::map<Key, std::map<std::string, std::map<std::size_t, std::size_t>>> groups;  // -> arm -> trial -> index
  std::vector<Key> order;
  for (std::size_t i = 0; i < trials.size(); ++i) {
    const auto& t = trials[i];
    const Key key{t.architecture, finetune::to_string(t.mode), t.fraction};
    if (!groups.count(key)) order.push_back(key);
    groups[key][t.init_kind][t.trial] = i;
  }
  std::vector<metrics::ComparisonCell> cells;
  std::set<double> fractions;
  for (const auto& key : order) {
    const auto& arms = groups[key];
    auto ia = arms.find(config.compare.arm_a);
    auto ib = arms.find(config.compare.arm_b);
    if (ia == arms.end() || ib == arms.end()) continue;
    std::vector<metrics::ScoredSet> a, b;
    for (const auto& [trial, index] : ia->second) {
      auto jb = ib->second.find(trial);
      if (jb == ib->second.end()) continue;
      a.push_back(sets[index]);
      b.push_back(sets[jb->second]);
    }
    if (a.empty()) continue;
    metrics::ComparisonCell cell;
    cell.architecture = std::get<0>(key);
    cell.mode_a = cell.mode_b = std::get<1>(key);
    cell.fraction = std::get<2>(key);
    cell.report = metrics::bootstrap_compare_trials(a, b, config.compare.replicates, config.compare.seed);
    fractions.insert(cell.fraction);
    cells.push_back(std::move(cell));
  }
  if (cells.empty()) {
    throw std::runtime_error(fmt::format("no cell of {} holds paired trials of '{}' and '{}'",
                                         config.compare.grid_dir.string(), config.compare.arm_a, config.compare.arm_b));
  }
  const auto& dir = config.run.out_dir;
  begin_output(dir, config, options.force);
  const std::vector<double> cols(fractions.begin(), fractions.end());
  const auto table = metrics::render_comparison_table(cols, cells, config.compare.arm_a, config.compare.arm_b);
  const auto header = fmt::format("replicates = {}\nseed = {}\narm_a = {}\narm_b = {}\n\n", config.compare.replicates,
                                  config.compare.seed, config.compare.arm_a, config.compare.arm_b);
  write_text(dir / kComparisonTable, header + table);
  write_text(dir / kComparisonCsv, metrics::comparison_csv(cells));
  fmt::print("{}", table);
  finish_output(dir);
}

void cmd_evaluate(const RunConfig& config, const CommandOptions& options) {
  std::vector<metrics::ScoredSet> sets;
  const auto trials = load_grid(config.compare.grid_dir, &sets);
  using Key = std::tuple<std::string, std::string, std::string, double>;  // init, arch, mode, fraction
  std::map<Key, std::vector<std::size_t>> groups;
  std::vector<Key> order;
  for (std::size_t i = 0; i < trials.size(); ++i) {
    const auto& t = trials[i];
    const Key key{t.init_kind, t.architecture, finetune::to_string(t.mode), t.fraction};
    if (!groups.count(key)) order.push_back(key);
    groups[key].push_back(i);
  }
  std::vector<std::vector<std::string>> rows{{"init", "arch", "mode", "fraction", "AUROC (95% CI)", "AUPRC", "trials"}};
  std::string csv = "init,arch,mode,fraction,auroc,ci_low,ci_high,auprc,trials\n";
  for (const auto& key : order) {
    std::vector<metrics::ScoredSet> group;
    double auprc = 0.0;
    for (auto i : groups[key]) {
      group.push_back(sets[i]);
      auprc += metrics::auprc(sets[i]);
    }
    auprc /= static_cast<double>(group.size());
    const auto interval = metrics::bootstrap_auc(group, config.compare.replicates, config.compare.seed);
    const auto& [init, arch, mode, fraction] = key;
    rows.push_back({init, arch, mode, metrics::format_fraction(fraction), metrics::format_auc_cell(interval),
                    fmt::format("{:.3f}", auprc), std::to_string(group.size())});
    csv += fmt::format("{},{},{},{},{},{},{},{},{}\n", init, arch, mode, fields::format_double(fraction),
                       fields::format_double(interval.auc), fields::format_double(interval.ci_low),
                       fields::format_double(interval.ci_high), fields::format_double(auprc), group.size());
  }
  const auto& dir = config.run.out_dir;
  begin_output(dir, config, options.force);
  const auto table = metrics::align_table(rows);
  write_text(dir / kEvaluationTable, fmt::format("replicates = {}\nseed = {}\n\n", config.compare.replicates,
                                                 config.compare.seed) + table);
  write_text(dir / kEvaluationCsv, csv);
  fmt::print("{}", table);
  finish_output(dir);
}

}  // namespace mococxr::cli
