#include "mococxr/finetune.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <limits>
#include <memory>
#include <mutex>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "mococxr/augment.hpp"
#include "mococxr/diffcore/ops.hpp"
#include "mococxr/diffcore/optim.hpp"
#include "mococxr/fields.hpp"
#include "mococxr/metrics.hpp"
#include "mococxr/random.hpp"

namespace mococxr::finetune {

std::string to_string(SamplingUnit unit) { return unit == SamplingUnit::kPatient ? "patient" : "image"; }

SamplingUnit parse_sampling_unit(const std::string& text) {
  if (text == "patient") return SamplingUnit::kPatient;
  if (text == "image") return SamplingUnit::kImage;
  throw std::invalid_argument("unknown sampling unit '" + text + "' (expected patient|image)");
}

std::string to_string(Mode mode) { return mode == Mode::kLinear ? "linear" : "end_to_end"; }

Mode parse_mode(const std::string& text) {
  if (text == "linear") return Mode::kLinear;
  if (text == "end_to_end" || text == "end-to-end") return Mode::kEndToEnd;
  throw std::invalid_argument("unknown fine-tune mode '" + text + "' (expected linear|end_to_end)");
}

namespace {

void check_fraction(double f) {
  if (!(f > 0.0 && f <= 1.0)) throw std::invalid_argument(fmt::format("label fraction {} is outside (0, 1]", f));
}

std::string format_epoch_map(const EpochMap& m) {
  std::string out;
  for (const auto& [f, e] : m) out += fmt::format("{}{}:{}", out.empty() ? "" : ",", f, e);
  return out;
}

EpochMap parse_epoch_map(const std::string& key, const std::string& text) {
  EpochMap m;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw std::invalid_argument(key + ": expected fraction:epochs pairs, got '" + item + "'");
    m[fields::parse_double(key, item.substr(0, colon))] =
        static_cast<std::size_t>(fields::parse_uint(key, item.substr(colon + 1)));
  }
  return m;
}

}  // namespace

void LabelFractionPlan::validate() const {
  if (fractions.empty()) throw std::invalid_argument("label fraction plan: no fractions");
  for (double f : fractions) check_fraction(f);
  if (trials_per_fraction == 0) throw std::invalid_argument("label fraction plan: trials_per_fraction must be >= 1");
}

std::map<std::string, std::string> LabelFractionPlan::to_fields() const {
  return {{"fractions", fields::format_list(fractions)},
          {"trials_per_fraction", std::to_string(trials_per_fraction)},
          {"seed", std::to_string(seed)},
          {"sampling_unit", to_string(unit)}};
}

LabelFractionPlan LabelFractionPlan::from_fields(const std::map<std::string, std::string>& f) {
  fields::reject_unknown(f, {"fractions", "trials_per_fraction", "seed", "sampling_unit"}, "label fraction plan");
  LabelFractionPlan p;
  if (auto it = f.find("fractions"); it != f.end()) p.fractions = fields::parse_double_list("fractions", it->second);
  if (auto it = f.find("trials_per_fraction"); it != f.end()) {
    p.trials_per_fraction = fields::parse_uint("trials_per_fraction", it->second);
  }
  if (auto it = f.find("seed"); it != f.end()) p.seed = fields::parse_uint("seed", it->second);
  if (auto it = f.find("sampling_unit"); it != f.end()) p.unit = parse_sampling_unit(it->second);
  p.validate();
  return p;
}

EpochMap default_epochs_by_fraction() { return {{0.001, 220}, {0.01, 95}, {0.1, 41}, {1.0, 18}}; }

void FinetuneConfig::validate() const {
  if (!(learning_rate >= 0.0)) throw std::invalid_argument("finetune: learning_rate must be >= 0");
  if (batch_size == 0) throw std::invalid_argument("finetune: batch_size must be >= 1");
  if (epochs_by_fraction.empty()) throw std::invalid_argument("finetune: epochs_by_fraction is empty");
  for (const auto& [f, e] : epochs_by_fraction) {
    check_fraction(f);
    if (e == 0) throw std::invalid_argument("finetune: epoch counts must be >= 1");
  }
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
    throw std::invalid_argument("finetune: validation_fraction must lie in [0,1)");
  }
}

std::size_t FinetuneConfig::epochs_for(double fraction) const {
  check_fraction(fraction);
  if (auto it = epochs_by_fraction.find(fraction); it != epochs_by_fraction.end()) return it->second;
  auto hi = epochs_by_fraction.lower_bound(fraction);
  if (hi == epochs_by_fraction.begin()) return hi->second;
  if (hi == epochs_by_fraction.end()) return std::prev(hi)->second;
  auto lo = std::prev(hi);
  const double t = (std::log(fraction) - std::log(lo->first)) / (std::log(hi->first) - std::log(lo->first));
  const double e = static_cast<double>(lo->second) + t * (static_cast<double>(hi->second) - static_cast<double>(lo->second));
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(e)));
}

std::map<std::string, std::string> FinetuneConfig::to_fields() const {
  return {{"mode", to_string(mode)},
          {"learning_rate", fields::format_double(learning_rate)},
          {"batch_size", std::to_string(batch_size)},
          {"epochs_by_fraction", format_epoch_map(epochs_by_fraction)},
          {"momentum", fields::format_double(momentum)},
          {"weight_decay", fields::format_double(weight_decay)},
          {"keep_head", keep_head ? "true" : "false"},
          {"standardize_features", standardize_features ? "true" : "false"},
          {"zero_init_classifier", zero_init_classifier ? "true" : "false"},
          {"validation_fraction", fields::format_double(validation_fraction)},
          {"validation_min_examples", std::to_string(validation_min_examples)}};
}

FinetuneConfig FinetuneConfig::from_fields(const std::map<std::string, std::string>& f) {
  fields::reject_unknown(f,
                         {"mode", "learning_rate", "batch_size", "epochs_by_fraction", "momentum", "weight_decay",
                          "keep_head", "standardize_features", "zero_init_classifier", "validation_fraction",
                          "validation_min_examples"},
                         "finetune config");
  FinetuneConfig c;
  auto get = [&](const char* key) -> const std::string* {
    auto it = f.find(key);
    return it == f.end() ? nullptr : &it->second;
  };
  if (auto v = get("mode")) c.mode = parse_mode(*v);
  if (auto v = get("learning_rate")) c.learning_rate = fields::parse_double("learning_rate", *v);
  if (auto v = get("batch_size")) c.batch_size = fields::parse_uint("batch_size", *v);
  if (auto v = get("epochs_by_fraction")) c.epochs_by_fraction = parse_epoch_map("epochs_by_fraction", *v);
  if (auto v = get("momentum")) c.momentum = fields::parse_double("momentum", *v);
  if (auto v = get("weight_decay")) c.weight_decay = fields::parse_double("weight_decay", *v);
  if (auto v = get("keep_head")) c.keep_head = fields::parse_bool("keep_head", *v);
  if (auto v = get("standardize_features")) c.standardize_features = fields::parse_bool("standardize_features", *v);
  if (auto v = get("zero_init_classifier")) c.zero_init_classifier = fields::parse_bool("zero_init_classifier", *v);
  if (auto v = get("validation_fraction")) c.validation_fraction = fields::parse_double("validation_fraction", *v);
  if (auto v = get("validation_min_examples")) c.validation_min_examples = fields::parse_uint("validation_min_examples", *v);
  c.validate();
  return c;
}

std::vector<std::size_t> sample_label_fraction(std::span<const data::LabeledRecord> records, double fraction,
                                               std::uint64_t seed, SamplingUnit unit) {
  check_fraction(fraction);
  if (records.empty()) throw std::invalid_argument("sample_label_fraction: empty record list");
  Rng rng(derive_seed(seed, {0x73616d70ULL}));
  std::vector<std::size_t> out;
  if (unit == SamplingUnit::kImage) {
    std::vector<std::size_t> idx(records.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    const auto k = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(idx.size()))));
    rng.shuffle(idx);
    out.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(std::min(k, idx.size())));
  } else {
    // Patients in first-appearance order so the draw does not depend on id spelling.
    std::vector<std::string> patients;
    std::map<std::string, std::size_t> seen;
    for (const auto& r : records) {
      if (seen.emplace(r.patient_id, patients.size()).second) patients.push_back(r.patient_id);
    }
    const auto k = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(patients.size()))));
    std::vector<std::size_t> order(patients.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    std::set<std::size_t> chosen(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(std::min(k, order.size())));
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (chosen.count(seen.at(records[i].patient_id))) out.push_back(i);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::uint64_t subset_fingerprint(std::span<const data::LabeledRecord> records, std::span<const std::size_t> indices) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](unsigned char c) {
    h ^= c;
    h *= 0x100000001b3ULL;
  };
  for (auto i : indices) {
    for (unsigned char c : records[i].image_path) mix(c);
    mix(0);
  }
  return h;
}

namespace {

Tensor gather_rows(const Tensor& m, std::span<const std::size_t> rows) {
  const auto c = m.dim(1);
  const auto src = m.values();
  std::vector<float> out(rows.size() * c);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(rows[i] * c), c, out.begin() + static_cast<std::ptrdiff_t>(i * c));
  }
  return Tensor({rows.size(), c}, std::move(out));
}

// Per-column mean and standard deviation; spreads below 1e-6 are treated as 1.
std::pair<std::vector<double>, std::vector<double>> column_stats(const Tensor& m) {
  const auto n = m.dim(0), c = m.dim(1);
  const auto v = m.values();
  std::vector<double> mu(c, 0.0), sd(c, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) mu[j] += v[i * c + j];
  for (auto& x : mu) x /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) sd[j] += (v[i * c + j] - mu[j]) * (v[i * c + j] - mu[j]);
  for (auto& x : sd) {
    x = std::sqrt(x / static_cast<double>(n));
    if (x < 1e-6) x = 1.0;
  }
  return {mu, sd};
}

Tensor standardize(const Tensor& m, const std::vector<double>& mu, const std::vector<double>& sd) {
  const auto c = m.dim(1);
  std::vector<float> out(m.values().begin(), m.values().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>((out[i] - mu[i % c]) / sd[i % c]);
  return Tensor(m.shape(), std::move(out));
}

std::vector<double> sigmoid_scores(const Tensor& logits) {
  std::vector<double> out;
  out.reserve(logits.numel());
  for (float z : logits.values()) out.push_back(1.0 / (1.0 + std::exp(-static_cast<double>(z))));
  return out;
}

// Shared minibatch loop. `logits_for(rows)` runs a recording forward pass on
// the given training rows; `eval(rows)` scores rows without recording.
struct TrainLoop {
  std::size_t n_examples = 0;
  std::span<const std::uint8_t> labels;
  std::size_t epochs = 0;
  std::uint64_t seed = 0;
  const FinetuneConfig* config = nullptr;
  ParamSet* trainable = nullptr;
  std::function<Tensor(std::span<const std::size_t>)> logits_for;
  std::function<std::vector<double>(std::span<const std::size_t>)> eval;

  struct Outcome {
    ParamSet best;
    std::size_t validation_examples = 0;
    std::size_t selected_epoch = 0;
  };

  Outcome run() {
    Rng rng(derive_seed(seed, {0x6c6f6f70ULL}));
    std::vector<std::size_t> train_rows(n_examples), val_rows;
    for (std::size_t i = 0; i < n_examples; ++i) train_rows[i] = i;
    if (n_examples >= config->validation_min_examples && config->validation_fraction > 0.0) {
      rng.shuffle(train_rows);
      const auto n_val = std::max<std::size_t>(
          1, static_cast<std::size_t>(std::llround(config->validation_fraction * static_cast<double>(n_examples))));
      val_rows.assign(train_rows.begin(), train_rows.begin() + static_cast<std::ptrdiff_t>(n_val));
      train_rows.erase(train_rows.begin(), train_rows.begin() + static_cast<std::ptrdiff_t>(n_val));
      std::sort(val_rows.begin(), val_rows.end());
      std::sort(train_rows.begin(), train_rows.end());
    }
    metrics::ScoredSet val_set;
    for (auto r : val_rows) val_set.labels.push_back(labels[r]);
    const bool can_select = !val_rows.empty() && val_set.positives() > 0 && val_set.positives() < val_rows.size();

    diffcore::SgdState opt;
    opt.config = {config->learning_rate, config->momentum, config->weight_decay};
    trainable->set_requires_grad(true);
    Outcome out;
    out.validation_examples = val_rows.size();
    double best_auc = -1.0;
    std::vector<std::size_t> batch_rows;
    std::vector<std::uint8_t> batch_labels;
    for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
      rng.shuffle(train_rows);
      for (std::size_t start = 0; start < train_rows.size(); start += config->batch_size) {
        const auto end = std::min(train_rows.size(), start + config->batch_size);
        batch_rows.assign(train_rows.begin() + static_cast<std::ptrdiff_t>(start),
                          train_rows.begin() + static_cast<std::ptrdiff_t>(end));
        batch_labels.clear();
        for (auto r : batch_rows) batch_labels.push_back(labels[r]);
        trainable->zero_grad();
        auto loss = diffcore::bce_with_logits(logits_for(batch_rows), batch_labels);
        loss.backward();
        diffcore::sgd_step(*trainable, opt);
      }
      if (can_select) {
        val_set.scores = eval(val_rows);
        const double auc = metrics::auroc(val_set);
        if (auc > best_auc) {
          best_auc = auc;
          out.best = trainable->clone();
          out.selected_epoch = epoch;
        }
      }
    }
    if (out.selected_epoch == 0) {
      out.best = trainable->clone();
      out.selected_epoch = epochs;
    }
    out.best.set_requires_grad(false);
    return out;
  }
};

void score_test(TrialResult& r, std::span<const std::uint8_t> test_labels) {
  metrics::ScoredSet s{r.scores, {test_labels.begin(), test_labels.end()}};
  const auto pos = s.positives();
  r.auroc = (pos == 0 || pos == s.size()) ? std::numeric_limits<double>::quiet_NaN() : metrics::auroc(s);
  r.auprc = pos == 0 ? std::numeric_limits<double>::quiet_NaN() : metrics::auprc(s);
}

bool single_class(std::span<const std::uint8_t> labels) {
  return std::adjacent_find(labels.begin(), labels.end(), std::not_equal_to<>()) == labels.end();
}

ParamSet encoder_part(const ParamSet& params, bool keep_head) {
  ParamSet out;
  for (const auto& [name, t] : params) {
    if (name.rfind(diffcore::kBackbonePrefix, 0) == 0 || (keep_head && name.rfind(diffcore::kHeadPrefix, 0) == 0)) {
      out.add(name, t);
    }
  }
  return out;
}

Tensor encode(const ParamSet& params, const EncoderSpec& spec, const Tensor& batch, bool keep_head) {
  auto feats = diffcore::backbone_features(params, spec, batch);
  return keep_head ? diffcore::project(params, spec, feats) : feats;
}

std::size_t feature_width(const EncoderSpec& spec, bool keep_head) {
  return keep_head ? spec.feature_dim : spec.backbone_width();
}

}  // namespace

Tensor extract_features(const ParamSet& params, const EncoderSpec& spec, std::span<const Tensor> images, bool keep_head,
                        std::size_t batch_size) {
  if (images.empty()) throw std::invalid_argument("extract_features: no images");
  diffcore::NoGradGuard no_grad;
  const auto width = feature_width(spec, keep_head);
  std::vector<float> out;
  out.reserve(images.size() * width);
  for (std::size_t start = 0; start < images.size(); start += batch_size) {
    const auto end = std::min(images.size(), start + batch_size);
    const auto f = encode(params, spec, augment::stack(images.subspan(start, end - start)), keep_head);
    out.insert(out.end(), f.values().begin(), f.values().end());
  }
  return Tensor({images.size(), width}, std::move(out));
}

ProbeOutcome fit_probe(const Tensor& train_features, std::span<const std::uint8_t> train_labels,
                       const Tensor& test_features, const FinetuneConfig& config, std::size_t epochs,
                       std::uint64_t seed) {
  config.validate();
  if (train_features.ndim() != 2 || train_features.dim(0) == 0) throw std::invalid_argument("fit_probe: empty labeled subset");
  if (train_features.dim(0) != train_labels.size()) throw std::invalid_argument("fit_probe: feature/label count mismatch");
  auto classifier = diffcore::init_classifier<float>(train_features.dim(1), derive_seed(seed, {0x636c6173ULL}));
  if (config.zero_init_classifier) {
    for (auto& [name, t] : classifier) std::fill(t.values_mut().begin(), t.values_mut().end(), 0.0f);
  }
  Tensor train_x = train_features, test_x = test_features;
  if (config.standardize_features) {
    const auto [mu, sd] = column_stats(train_features);
    train_x = standardize(train_features, mu, sd);
    test_x = standardize(test_features, mu, sd);
  }
  TrainLoop loop;
  loop.n_examples = train_labels.size();
  loop.labels = train_labels;
  loop.epochs = epochs;
  loop.seed = seed;
  loop.config = &config;
  loop.trainable = &classifier;
  loop.logits_for = [&](std::span<const std::size_t> rows) {
    return diffcore::classify(classifier, gather_rows(train_x, rows));
  };
  loop.eval = [&](std::span<const std::size_t> rows) {
    diffcore::NoGradGuard no_grad;
    return sigmoid_scores(diffcore::classify(classifier, gather_rows(train_x, rows)));
  };
  auto outcome = loop.run();
  ProbeOutcome out;
  {
    diffcore::NoGradGuard no_grad;
    out.test_scores = sigmoid_scores(diffcore::classify(outcome.best, test_x));
  }
  out.classifier = std::move(outcome.best);
  out.validation_examples = outcome.validation_examples;
  out.selected_epoch = outcome.selected_epoch;
  return out;
}

TrialResult train_linear_probe(const ParamSet& backbone, const EncoderSpec& spec, const data::ImageDataset& train,
                               const data::ImageDataset& test, const FinetuneConfig& config, double fraction,
                               std::uint64_t seed) {
  if (config.mode != Mode::kLinear) throw std::invalid_argument("train_linear_probe: config.mode must be linear");
  if (train.size() == 0) throw std::invalid_argument("train_linear_probe: empty labeled subset");
  if (test.size() == 0) throw std::invalid_argument("train_linear_probe: empty test set");
  const auto frozen = encoder_part(backbone, config.keep_head);
  TrialResult r;
  r.mode = Mode::kLinear;
  r.fraction = fraction;
  r.trial_seed = seed;
  r.backbone_checksum_before = backbone.checksum();
  const auto labels = train.labels();
  r.single_class_subset = single_class(labels);
  r.epochs = config.epochs_for(fraction);
  const auto train_f = extract_features(frozen, spec, train.images, config.keep_head);
  const auto test_f = extract_features(frozen, spec, test.images, config.keep_head);
  auto probe = fit_probe(train_f, labels, test_f, config, r.epochs, seed);
  r.backbone_checksum_after = backbone.checksum();
  if (r.backbone_checksum_after != r.backbone_checksum_before) {
    throw std::logic_error("train_linear_probe: frozen backbone changed during training");
  }
  r.scores = std::move(probe.test_scores);
  r.train_examples = train.size() - probe.validation_examples;
  r.validation_examples = probe.validation_examples;
  r.selected_epoch = probe.selected_epoch;
  r.subset_fingerprint = subset_fingerprint(train.records, [&] {
    std::vector<std::size_t> all(train.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return all;
  }());
  score_test(r, test.labels());
  return r;
}

std::function<double(const ParamSet&)> probe_selection_metric(data::ImageDataset labeled, EncoderSpec spec,
                                                              FinetuneConfig config, std::size_t epochs,
                                                              std::uint64_t seed) {
  config.mode = Mode::kLinear;
  config.validate();
  std::map<std::string, std::size_t> patient_rank;
  std::vector<std::size_t> fit_rows, score_rows;
  for (std::size_t i = 0; i < labeled.size(); ++i) {
    const auto [it, fresh] = patient_rank.emplace(labeled.records[i].patient_id, patient_rank.size());
    (it->second % 2 == 0 ? fit_rows : score_rows).push_back(i);
  }
  if (fit_rows.empty() || score_rows.empty()) {
    throw std::invalid_argument("probe_selection_metric: need at least two labeled patients");
  }
  auto fit = std::make_shared<data::ImageDataset>(labeled.subset(fit_rows));
  auto score = std::make_shared<data::ImageDataset>(labeled.subset(score_rows));
  return [fit, score, spec, config, epochs, seed](const ParamSet& params) {
    const auto frozen = encoder_part(params, config.keep_head);
    const auto fit_f = extract_features(frozen, spec, fit->images, config.keep_head);
    const auto score_f = extract_features(frozen, spec, score->images, config.keep_head);
    const auto outcome = fit_probe(fit_f, fit->labels(), score_f, config, epochs, seed);
    metrics::ScoredSet set{outcome.test_scores, score->labels()};
    const auto pos = set.positives();
    if (pos == 0 || pos == set.size()) return 0.5;
    return metrics::auroc(set);
  };
}

TrialResult train_end_to_end(const ParamSet& init, const EncoderSpec& spec, const data::ImageDataset& train,
                             const data::ImageDataset& test, const FinetuneConfig& config, double fraction,
                             std::uint64_t seed, ParamSet* final_params) {
  if (config.mode != Mode::kEndToEnd) throw std::invalid_argument("train_end_to_end: config.mode must be end_to_end");
  if (train.size() == 0) throw std::invalid_argument("train_end_to_end: empty labeled subset");
  if (test.size() == 0) throw std::invalid_argument("train_end_to_end: empty test set");
  TrialResult r;
  r.mode = Mode::kEndToEnd;
  r.fraction = fraction;
  r.trial_seed = seed;
  r.backbone_checksum_before = init.checksum();
  const auto labels = train.labels();
  r.single_class_subset = single_class(labels);
  r.epochs = config.epochs_for(fraction);

  ParamSet trainable = encoder_part(init, config.keep_head).clone();
  const auto classifier = diffcore::init_classifier<float>(feature_width(spec, config.keep_head),
                                                           derive_seed(seed, {0x636c6173ULL}));
  for (const auto& [name, t] : classifier) trainable.add(name, t.clone());
  auto forward = [&](const ParamSet& p, std::span<const std::size_t> rows) {
    std::vector<Tensor> imgs;
    imgs.reserve(rows.size());
    for (auto i : rows) imgs.push_back(train.images[i]);
    return diffcore::classify(p, encode(p, spec, augment::stack(imgs), config.keep_head));
  };
  TrainLoop loop;
  loop.n_examples = train.size();
  loop.labels = labels;
  loop.epochs = r.epochs;
  loop.seed = seed;
  loop.config = &config;
  loop.trainable = &trainable;
  loop.logits_for = [&](std::span<const std::size_t> rows) { return forward(trainable, rows); };
  loop.eval = [&](std::span<const std::size_t> rows) {
    diffcore::NoGradGuard no_grad;
    return sigmoid_scores(forward(trainable, rows));
  };
  auto outcome = loop.run();
  {
    diffcore::NoGradGuard no_grad;
    for (std::size_t start = 0; start < test.size(); start += 64) {
      const auto end = std::min(test.size(), start + 64);
      const auto logits = diffcore::classify(
          outcome.best,
          encode(outcome.best, spec, augment::stack(std::span(test.images).subspan(start, end - start)), config.keep_head));
      const auto s = sigmoid_scores(logits);
      r.scores.insert(r.scores.end(), s.begin(), s.end());
    }
  }
  r.backbone_checksum_after = encoder_part(outcome.best, config.keep_head).checksum();
  r.train_examples = train.size() - outcome.validation_examples;
  r.validation_examples = outcome.validation_examples;
  r.selected_epoch = outcome.selected_epoch;
  std::vector<std::size_t> all(train.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  r.subset_fingerprint = subset_fingerprint(train.records, all);
  score_test(r, test.labels());
  if (final_params) *final_params = std::move(outcome.best);
  return r;
}

namespace {

std::uint64_t cell_seed(std::uint64_t base, double fraction, std::size_t trial) {
  return derive_seed(base, {std::bit_cast<std::uint64_t>(fraction), trial});
}

}  // namespace

ExperimentResult run_experiment(const LabelFractionPlan& plan, std::span<const InitArm> arms,
                                const data::ImageDataset& train, const data::ImageDataset& test,
                                const FinetuneConfig& config, const ExperimentOptions& options) {
  plan.validate();
  config.validate();
  if (arms.empty()) throw std::invalid_argument("run_experiment: no init arms");
  if (train.size() == 0 || test.size() == 0) throw std::invalid_argument("run_experiment: empty train or test set");
  {
    std::set<std::string> names;
    for (const auto& a : arms) {
      if (!names.insert(a.name + "/" + a.architecture).second) {
        throw std::invalid_argument("run_experiment: duplicate arm '" + a.name + "'");
      }
      if (a.params.empty()) throw std::invalid_argument("run_experiment: arm '" + a.name + "' has no parameters");
    }
  }
  std::set<std::string> test_paths, test_patients;
  for (const auto& r : test.records) {
    test_paths.insert(r.image_path);
    test_patients.insert(r.patient_id);
  }

  ExperimentResult result;
  struct Cell {
    double fraction;
    std::size_t trial;
    std::uint64_t seed;
    std::vector<std::size_t> subset;
    std::uint64_t fingerprint;
  };
  std::vector<Cell> cells;
  for (double f : plan.fractions) {
    for (std::size_t t = 0; t < plan.trials_per_fraction; ++t) {
      Cell c{f, t, cell_seed(plan.seed, f, t), {}, 0};
      c.subset = sample_label_fraction(train.records, f, c.seed, plan.unit);
      for (auto i : c.subset) {
        const auto& rec = train.records[i];
        ++result.leakage_checks;
        if (test_paths.count(rec.image_path) || test_patients.count(rec.patient_id)) {
          throw std::logic_error(fmt::format("test leakage: '{}' (patient {}) is in a labeled subset", rec.image_path,
                                             rec.patient_id));
        }
      }
      c.fingerprint = subset_fingerprint(train.records, c.subset);
      cells.push_back(std::move(c));
    }
  }

  // Linear probes reuse frozen features of the whole pool.
  struct ArmFeatures {
    Tensor train, test;
    std::uint64_t checksum = 0;
  };
  std::vector<ArmFeatures> feats(arms.size());
  for (std::size_t a = 0; a < arms.size(); ++a) {
    feats[a].checksum = arms[a].params.checksum();
    if (config.mode == Mode::kLinear) {
      const auto frozen = encoder_part(arms[a].params, config.keep_head);
      feats[a].train = extract_features(frozen, arms[a].spec, train.images, config.keep_head);
      feats[a].test = extract_features(frozen, arms[a].spec, test.images, config.keep_head);
    }
  }
  const auto test_labels = test.labels();
  const auto train_labels = train.labels();

  const std::size_t n_tasks = cells.size() * arms.size();
  result.trials.resize(n_tasks);
  std::atomic<std::size_t> next{0};
  std::mutex report_mutex;
  std::exception_ptr failure;
  auto worker = [&] {
    for (;;) {
      const auto task = next.fetch_add(1);
      if (task >= n_tasks) return;
      const auto& cell = cells[task / arms.size()];
      const auto& arm = arms[task % arms.size()];
      const auto& af = feats[task % arms.size()];
      try {
        TrialResult r;
        if (config.mode == Mode::kLinear) {
          std::vector<std::uint8_t> labels;
          for (auto i : cell.subset) labels.push_back(train_labels[i]);
          r.backbone_checksum_before = arm.params.checksum();
          auto probe = fit_probe(gather_rows(af.train, cell.subset), labels, af.test, config,
                                 config.epochs_for(cell.fraction), cell.seed);
          r.backbone_checksum_after = arm.params.checksum();
          r.mode = Mode::kLinear;
          r.fraction = cell.fraction;
          r.trial_seed = cell.seed;
          r.single_class_subset = single_class(labels);
          r.epochs = config.epochs_for(cell.fraction);
          r.scores = std::move(probe.test_scores);
          r.train_examples = labels.size() - probe.validation_examples;
          r.validation_examples = probe.validation_examples;
          r.selected_epoch = probe.selected_epoch;
          score_test(r, test_labels);
        } else {
          r = train_end_to_end(arm.params, arm.spec, train.subset(cell.subset), test, config, cell.fraction, cell.seed);
        }
        r.init_kind = arm.name;
        r.architecture = arm.architecture;
        r.trial = cell.trial;
        r.subset_fingerprint = cell.fingerprint;
        result.trials[task] = std::move(r);
        if (options.on_result) {
          std::lock_guard lock(report_mutex);
          options.on_result(result.trials[task]);
        }
      } catch (...) {
        std::lock_guard lock(report_mutex);
        if (!failure) failure = std::current_exception();
        next.store(n_tasks);
        return;
      }
    }
  };
  const auto n_workers = std::max<std::size_t>(1, std::min(options.parallel_trials, n_tasks));
  if (n_workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  for (std::size_t a = 0; a < arms.size(); ++a) {
    if (arms[a].params.checksum() != feats[a].checksum) {
      throw std::logic_error("run_experiment: init parameters of arm '" + arms[a].name + "' changed");
    }
  }
  for (const auto& r : result.trials) {
    if (r.mode == Mode::kLinear) {
      ++result.freeze_checks;
      if (r.backbone_checksum_before != r.backbone_checksum_after) {
        throw std::logic_error("run_experiment: linear-probe backbone changed in trial " + std::to_string(r.trial));
      }
    }
  }
  for (std::size_t c = 0; c < cells.size(); ++c) {
    for (std::size_t a = 0; a < arms.size(); ++a) {
      ++result.pairing_checks;
      if (result.trials[c * arms.size() + a].subset_fingerprint != cells[c].fingerprint) {
        throw std::logic_error("run_experiment: arms of a cell saw different labeled subsets");
      }
    }
  }
  result.cells = summarize_cells(result.trials);
  return result;
}

std::vector<CellSummary> summarize_cells(std::span<const TrialResult> trials) {
  std::vector<CellSummary> out;
  std::map<std::tuple<std::string, std::string, int, double>, std::size_t> index;
  for (const auto& t : trials) {
    const auto key = std::make_tuple(t.init_kind, t.architecture, static_cast<int>(t.mode), t.fraction);
    auto [it, fresh] = index.emplace(key, out.size());
    if (fresh) out.push_back({t.init_kind, t.architecture, t.mode, t.fraction, 0.0, 0.0, 0});
    auto& c = out[it->second];
    c.mean_auroc += t.auroc;
    c.mean_auprc += t.auprc;
    ++c.trials;
  }
  for (auto& c : out) {
    c.mean_auroc /= static_cast<double>(c.trials);
    c.mean_auprc /= static_cast<double>(c.trials);
  }
  return out;
}

std::string result_grid_csv(std::span<const TrialResult> trials) {
  std::string out = std::string(kResultGridHeader) + "\n";
  for (const auto& t : trials) {
    out += fmt::format("{},{},{},{},{},{},{},{},{:016x}\n", t.init_kind, t.architecture, to_string(t.mode),
                       fields::format_double(t.fraction), t.trial, t.trial_seed, fields::format_double(t.auroc),
                       fields::format_double(t.auprc), t.subset_fingerprint);
  }
  return out;
}

std::vector<TrialResult> parse_result_grid(const std::string& csv) {
  std::stringstream in(csv);
  std::string line;
  if (!std::getline(in, line) || line != kResultGridHeader) {
    throw std::invalid_argument(std::string("result grid: expected header '") + kResultGridHeader + "'");
  }
  std::vector<TrialResult> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cols.push_back(c);
    if (cols.size() != 9) throw std::invalid_argument(fmt::format("result grid line {}: expected 9 columns", line_no));
    TrialResult t;
    t.init_kind = cols[0];
    t.architecture = cols[1];
    t.mode = parse_mode(cols[2]);
    t.fraction = fields::parse_double("fraction", cols[3]);
    t.trial = fields::parse_uint("trial", cols[4]);
    t.trial_seed = fields::parse_uint("seed", cols[5]);
    t.auroc = cols[6] == "nan" ? std::numeric_limits<double>::quiet_NaN() : fields::parse_double("auroc", cols[6]);
    t.auprc = cols[7] == "nan" ? std::numeric_limits<double>::quiet_NaN() : fields::parse_double("auprc", cols[7]);
    t.subset_fingerprint = std::stoull(cols[8], nullptr, 16);
    out.push_back(std::move(t));
  }
  return out;
}

std::string score_file_name(const TrialResult& t) {
  return fmt::format("{}_{}_{}_f{}_t{}.csv", t.init_kind, t.architecture, to_string(t.mode),
                     fields::format_double(t.fraction), t.trial);
}

std::string score_file_csv(const TrialResult& t, const data::ImageDataset& test) {
  if (t.scores.size() != test.size()) throw std::invalid_argument("score file: score count does not match the test set");
  std::string out = "image_path,label,score\n";
  for (std::size_t i = 0; i < test.size(); ++i) {
    out += fmt::format("{},{},{}\n", test.records[i].image_path, test.records[i].label, fields::format_double(t.scores[i]));
  }
  return out;
}

}  // namespace mococxr::finetune
