#include <doctest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "mococxr/finetune.hpp"
#include "mococxr/metrics.hpp"
#include "mococxr/random.hpp"

using namespace mococxr;
using namespace mococxr::finetune;
namespace dc = mococxr::diffcore;

namespace {

std::vector<data::LabeledRecord> patients(std::size_t n_patients, std::size_t per_patient) {
  std::vector<data::LabeledRecord> out;
  for (std::size_t p = 0; p < n_patients; ++p) {
    for (std::size_t i = 0; i < per_patient; ++i) {
      data::LabeledRecord r;
      r.image_path = "img_" + std::to_string(p) + "_" + std::to_string(i) + ".pgm";
      r.patient_id = "P" + std::to_string(p);
      r.label = static_cast<std::uint8_t>((p + i) % 2);
      out.push_back(r);
    }
  }
  return out;
}

dc::EncoderSpec tiny_encoder() {
  dc::EncoderSpec spec;
  spec.input_size = 8;
  spec.channel_widths = {4, 8};
  spec.blocks_per_stage = 1;
  spec.norm_groups = 2;
  spec.stem_stride = 1;
  spec.feature_dim = 8;
  spec.projection_hidden = 8;
  return spec;
}

// Images whose label is a bright left half versus a bright right half.
data::ImageDataset halves_dataset(std::size_t n, std::uint64_t seed, const std::string& prefix, data::Split split) {
  Rng rng(seed);
  data::ImageDataset ds;
  for (std::size_t i = 0; i < n; ++i) {
    const bool y = rng.bernoulli(0.5);
    std::vector<float> v(64);
    for (std::size_t r = 0; r < 8; ++r)
      for (std::size_t c = 0; c < 8; ++c)
        v[r * 8 + c] = static_cast<float>(std::clamp(((c < 4) == y ? 0.75 : 0.25) + rng.normal() * 0.05, 0.0, 1.0));
    ds.images.emplace_back(dc::Shape{1, 8, 8}, std::move(v));
    data::LabeledRecord rec;
    rec.image_path = prefix + std::to_string(i) + ".pgm";
    rec.patient_id = prefix + "P" + std::to_string(i / 2);
    rec.label = y;
    rec.split = split;
    ds.records.push_back(rec);
  }
  return ds;
}

}  // namespace

TEST_CASE("label-fraction sampling counts") {
  const auto recs = patients(10, 3);
  SUBCASE("fraction one returns everything for any seed") {
    for (std::uint64_t seed : {0u, 1u, 99u}) {
      const auto idx = sample_label_fraction(recs, 1.0, seed, SamplingUnit::kPatient);
      CHECK(idx.size() == recs.size());
      CHECK(sample_label_fraction(recs, 1.0, seed, SamplingUnit::kImage).size() == recs.size());
    }
  }
  SUBCASE("half of ten patients is five whole patients") {
    const auto idx = sample_label_fraction(recs, 0.5, 3, SamplingUnit::kPatient);
    std::set<std::string> chosen;
    for (auto i : idx) chosen.insert(recs[i].patient_id);
    CHECK(chosen.size() == 5);
    CHECK(idx.size() == 15);
    CHECK(std::is_sorted(idx.begin(), idx.end()));
  }
  SUBCASE("tiny fractions still take one patient") {
    const auto three = patients(3, 2);
    const auto idx = sample_label_fraction(three, 0.001, 5, SamplingUnit::kPatient);
    CHECK(idx.size() == 2);
    CHECK(three[idx[0]].patient_id == three[idx[1]].patient_id);
    CHECK(sample_label_fraction(three, 0.001, 5, SamplingUnit::kImage).size() == 1);
  }
  SUBCASE("image unit counts images") {
    CHECK(sample_label_fraction(recs, 0.2, 1, SamplingUnit::kImage).size() == 6);
  }
  SUBCASE("errors") {
    CHECK_THROWS(sample_label_fraction(recs, 0.0, 1, SamplingUnit::kPatient));
    CHECK_THROWS(sample_label_fraction(recs, 1.5, 1, SamplingUnit::kPatient));
    CHECK_THROWS(sample_label_fraction(std::vector<data::LabeledRecord>{}, 0.5, 1, SamplingUnit::kPatient));
  }
  SUBCASE("deterministic per seed and varied across seeds") {
    const auto big = patients(200, 2);
    const auto a = sample_label_fraction(big, 0.1, 7, SamplingUnit::kPatient);
    CHECK(a == sample_label_fraction(big, 0.1, 7, SamplingUnit::kPatient));
    std::size_t distinct = 0;
    for (std::uint64_t s = 0; s < 20; ++s) distinct += sample_label_fraction(big, 0.1, s, SamplingUnit::kPatient) != a;
    CHECK(distinct >= 19);
    CHECK(subset_fingerprint(big, a) == subset_fingerprint(big, a));
    CHECK(subset_fingerprint(big, a) != subset_fingerprint(big, sample_label_fraction(big, 0.1, 8, SamplingUnit::kPatient)));
  }
}

TEST_CASE("epoch schedule defaults and interpolation") {
  const FinetuneConfig c;
  CHECK(c.learning_rate == 3e-5);
  CHECK(c.batch_size == 16);
  CHECK(c.epochs_for(0.001) == 220);
  CHECK(c.epochs_for(0.01) == 95);
  CHECK(c.epochs_for(0.1) == 41);
  CHECK(c.epochs_for(1.0) == 18);
  CHECK(c.epochs_for(0.0001) == 220);
  // Halfway between 0.01 and 0.1 in log(fraction) is halfway in epochs.
  CHECK(c.epochs_for(std::sqrt(0.01 * 0.1)) == 68);
  const double t = std::log(0.0625 / 0.01) / std::log(10.0);
  CHECK(c.epochs_for(0.0625) == static_cast<std::size_t>(std::lround(95.0 + t * (41.0 - 95.0))));
  const auto e = c.epochs_for(0.25);
  CHECK(e < 41);
  CHECK(e > 18);
  for (double f = 0.001; f < 1.0; f *= 1.3) CHECK(c.epochs_for(f * 1.3 > 1.0 ? 1.0 : f * 1.3) <= c.epochs_for(f));
  const auto back = FinetuneConfig::from_fields(c.to_fields());
  CHECK(back.to_fields() == c.to_fields());
  CHECK(back.epochs_by_fraction == default_epochs_by_fraction());
  auto f = c.to_fields();
  f["dropout"] = "0.1";
  CHECK_THROWS(FinetuneConfig::from_fields(f));
}

TEST_CASE("plan validation and alternative fraction grids") {
  LabelFractionPlan plan;
  CHECK_NOTHROW(plan.validate());
  plan.fractions = {0.0625, 0.25, 1.0};
  CHECK_NOTHROW(plan.validate());
  CHECK(LabelFractionPlan::from_fields(plan.to_fields()).fractions == plan.fractions);
  plan.fractions = {0.0};
  CHECK_THROWS(plan.validate());
  plan.fractions = {0.5};
  plan.trials_per_fraction = 0;
  CHECK_THROWS(plan.validate());
}

TEST_CASE("probe on separable features reaches training auroc of 0.99 within 200 epochs") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const std::size_t n = 80, d = 6;
    std::vector<float> x(n * d);
    std::vector<std::uint8_t> y(n);
    std::vector<double> w(d);
    for (auto& v : w) v = rng.normal();
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0;
      for (std::size_t j = 0; j < d; ++j) {
        x[i * d + j] = static_cast<float>(rng.normal());
        dot += w[j] * x[i * d + j];
      }
      // Margin of 0.3 around the separating hyperplane.
      if (std::abs(dot) < 0.3) {
        for (std::size_t j = 0; j < d; ++j) x[i * d + j] += static_cast<float>((dot >= 0 ? 0.3 : -0.3) * w[j]);
      }
      y[i] = dot >= 0;
    }
    const Tensor feats({n, d}, x);
    FinetuneConfig cfg;
    cfg.validation_min_examples = 1000;  // train on every row
    cfg.learning_rate = 0.1;
    const auto out = fit_probe(feats, y, feats, cfg, 200, seed);
    const metrics::ScoredSet s{out.test_scores, y};
    CHECK(metrics::auroc(s) >= 0.99);
    for (double p : out.test_scores) CHECK((p >= 0.0 && p <= 1.0));
  }
}

TEST_CASE("linear probe keeps the backbone bitwise frozen") {
  const auto spec = tiny_encoder();
  const auto params = dc::init_encoder<float>(spec, 1);
  const auto train = halves_dataset(24, 1, "tr", data::Split::kTrain);
  const auto test = halves_dataset(16, 2, "te", data::Split::kTest);
  const auto before = params.checksum();
  FinetuneConfig cfg;
  cfg.learning_rate = 0.05;
  const auto r = train_linear_probe(params, spec, train, test, cfg, 1.0, 3);
  CHECK(params.checksum() == before);
  CHECK(r.backbone_checksum_before == r.backbone_checksum_after);
  CHECK(r.scores.size() == 16);
  CHECK(r.epochs == 18);
  CHECK(r.validation_examples == 2);
  CHECK(r.train_examples == 22);
  CHECK(std::isfinite(r.auroc));
  CHECK_THROWS(train_linear_probe(params, spec, data::ImageDataset{}, test, cfg, 1.0, 3));
  auto e2e = cfg;
  e2e.mode = Mode::kEndToEnd;
  CHECK_THROWS(train_linear_probe(params, spec, train, test, e2e, 1.0, 3));
}

TEST_CASE("a single-class labeled subset is flagged instead of failing") {
  const auto spec = tiny_encoder();
  const auto params = dc::init_encoder<float>(spec, 1);
  auto train = halves_dataset(6, 4, "tr", data::Split::kTrain);
  for (auto& r : train.records) r.label = 1;
  const auto test = halves_dataset(16, 2, "te", data::Split::kTest);
  const auto r = train_linear_probe(params, spec, train, test, FinetuneConfig{}, 0.001, 1);
  CHECK(r.single_class_subset);
  CHECK(r.scores.size() == 16);
  CHECK(std::isfinite(r.auroc));
  // A single-class test set leaves the metric undefined.
  auto mono = test;
  for (auto& rec : mono.records) rec.label = 0;
  const auto u = train_linear_probe(params, spec, train, mono, FinetuneConfig{}, 0.001, 1);
  CHECK(std::isnan(u.auroc));
}

TEST_CASE("end-to-end fine-tuning") {
  const auto spec = tiny_encoder();
  const auto init = dc::init_encoder<float>(spec, 2);
  const auto train = halves_dataset(12, 5, "tr", data::Split::kTrain);
  const auto test = halves_dataset(10, 6, "te", data::Split::kTest);
  FinetuneConfig cfg;
  cfg.mode = Mode::kEndToEnd;
  cfg.epochs_by_fraction = {{0.01, 95}, {1.0, 2}};
  SUBCASE("zero learning rate leaves every parameter bitwise unchanged") {
    cfg.learning_rate = 0.0;
    cfg.weight_decay = 0.0;
    dc::ParamSet out;
    train_end_to_end(init, spec, train, test, cfg, 1.0, 1, &out);
    CHECK(out.with_prefix(dc::kBackbonePrefix).checksum() == init.with_prefix(dc::kBackbonePrefix).checksum());
  }
  SUBCASE("the default mapping runs 95 epochs at one percent") {
    const auto r = train_end_to_end(init, spec, train, test, cfg, 0.01, 1);
    CHECK(r.epochs == 95);
    CHECK(r.mode == Mode::kEndToEnd);
  }
  SUBCASE("training moves the backbone and reruns are identical") {
    cfg.learning_rate = 0.01;
    dc::ParamSet a, b;
    const auto ra = train_end_to_end(init, spec, train, test, cfg, 1.0, 7, &a);
    const auto rb = train_end_to_end(init, spec, train, test, cfg, 1.0, 7, &b);
    CHECK(a.with_prefix(dc::kBackbonePrefix).checksum() != init.with_prefix(dc::kBackbonePrefix).checksum());
    CHECK(a.checksum() == b.checksum());
    CHECK(ra.scores == rb.scores);
    CHECK(init.checksum() == dc::init_encoder<float>(spec, 2).checksum());
  }
  CHECK_THROWS(train_end_to_end(init, spec, data::ImageDataset{}, test, cfg, 1.0, 1));
}

TEST_CASE("experiment grid, pairing and hygiene") {
  const auto spec = tiny_encoder();
  auto train = halves_dataset(60, 8, "tr", data::Split::kTrain);
  const auto test = halves_dataset(20, 9, "te", data::Split::kTest);
  const std::vector<InitArm> arms{{"moco", "tiny", spec, dc::init_encoder<float>(spec, 1)},
                                  {"generic", "tiny", spec, dc::init_encoder<float>(spec, 2)}};
  LabelFractionPlan plan;
  plan.fractions = {0.001, 0.01, 0.1, 1.0};
  plan.trials_per_fraction = 3;
  FinetuneConfig cfg;
  cfg.epochs_by_fraction = {{0.001, 3}, {1.0, 2}};
  const auto result = run_experiment(plan, arms, train, test, cfg);
  REQUIRE(result.trials.size() == 24);
  CHECK(result.cells.size() == 8);
  CHECK(result.freeze_checks == 24);
  CHECK(result.pairing_checks == 24);
  std::size_t labeled = 0;
  for (std::size_t i = 0; i < result.trials.size(); i += 2)
    labeled += result.trials[i].train_examples + result.trials[i].validation_examples;
  CHECK(result.leakage_checks == labeled);
  for (std::size_t i = 0; i < result.trials.size(); i += 2) {
    const auto& a = result.trials[i];
    const auto& b = result.trials[i + 1];
    CHECK(a.init_kind == "moco");
    CHECK(b.init_kind == "generic");
    CHECK(a.subset_fingerprint == b.subset_fingerprint);
    CHECK(a.trial_seed == b.trial_seed);
    CHECK(a.fraction == b.fraction);
  }
  for (const auto& cell : result.cells) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& t : result.trials) {
      if (t.init_kind == cell.init_kind && t.fraction == cell.fraction) {
        sum += t.auroc;
        ++n;
      }
    }
    CHECK(n == 3);
    CHECK(std::abs(cell.mean_auroc - sum / n) <= 1e-12);
  }
  SUBCASE("parallel trials give identical results") {
    ExperimentOptions opt;
    opt.parallel_trials = 3;
    const auto par = run_experiment(plan, arms, train, test, cfg, opt);
    REQUIRE(par.trials.size() == result.trials.size());
    for (std::size_t i = 0; i < par.trials.size(); ++i) CHECK(par.trials[i].scores == result.trials[i].scores);
  }
  SUBCASE("a test image inside the labeled pool is caught") {
    auto leaky = train;
    leaky.records[0].image_path = test.records[0].image_path;
    CHECK_THROWS_AS(run_experiment(plan, arms, leaky, test, cfg), std::logic_error);
  }
  SUBCASE("a test patient inside the labeled pool is caught") {
    auto leaky = train;
    for (auto& r : leaky.records) r.patient_id = test.records[3].patient_id;
    CHECK_THROWS_AS(run_experiment(plan, arms, leaky, test, cfg), std::logic_error);
  }
  SUBCASE("result grid csv round trip") {
    const auto csv = result_grid_csv(result.trials);
    CHECK(csv.rfind(kResultGridHeader, 0) == 0);
    const auto parsed = parse_result_grid(csv);
    REQUIRE(parsed.size() == 24);
    CHECK(parsed[5].subset_fingerprint == result.trials[5].subset_fingerprint);
    CHECK(parsed[5].auroc == doctest::Approx(result.trials[5].auroc).epsilon(1e-9));
    CHECK(score_file_name(result.trials[0]).ends_with(".csv"));
    const auto scores = score_file_csv(result.trials[0], test);
    CHECK(std::count(scores.begin(), scores.end(), '\n') == 21);
  }
}

TEST_CASE("end-to-end experiment with two modes") {
  const auto spec = tiny_encoder();
  const auto train = halves_dataset(20, 10, "tr", data::Split::kTrain);
  const auto test = halves_dataset(10, 11, "te", data::Split::kTest);
  const std::vector<InitArm> arms{{"moco", "tiny", spec, dc::init_encoder<float>(spec, 3)},
                                  {"generic", "tiny", spec, dc::init_encoder<float>(spec, 4)}};
  LabelFractionPlan plan;
  plan.fractions = {0.0625, 0.25, 1.0};
  plan.trials_per_fraction = 1;
  FinetuneConfig cfg;
  cfg.mode = Mode::kEndToEnd;
  cfg.epochs_by_fraction = {{0.0625, 2}, {1.0, 1}};
  const auto r = run_experiment(plan, arms, train, test, cfg);
  CHECK(r.trials.size() == 6);
  CHECK(r.freeze_checks == 0);
  for (const auto& t : r.trials) CHECK(t.mode == Mode::kEndToEnd);
}

TEST_CASE("probe selection metric") {
  const auto spec = tiny_encoder();
  const auto a = dc::init_encoder<float>(spec, 1);
  const auto valid = halves_dataset(40, 12, "va", data::Split::kValid);
  FinetuneConfig cfg;
  cfg.learning_rate = 0.1;
  const auto metric = probe_selection_metric(valid, spec, cfg, 20, 3);
  const double m = metric(a);
  CHECK(m >= 0.0);
  CHECK(m <= 1.0);
  CHECK(metric(a) == m);
  // Left versus right brightness survives a random backbone.
  CHECK(m > 0.7);
  auto mono = valid;
  for (auto& r : mono.records) r.label = 1;
  CHECK(probe_selection_metric(mono, spec, cfg, 20, 3)(a) == 0.5);
  auto one = valid;
  for (auto& r : one.records) r.patient_id = "same";
  CHECK_THROWS(probe_selection_metric(one, spec, cfg, 20, 3)(a));
}
