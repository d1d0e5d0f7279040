#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <unistd.h>

#include "mococxr/cli.hpp"
#include "mococxr/finetune.hpp"
#include "mococxr/metrics.hpp"
#include "mococxr/moco.hpp"

using namespace mococxr;
using namespace mococxr::cli;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"(# small enough to run in well under a second
[synthetic]
n_images = 120
image_size = 16

[encoder]
input_size = 16
channel_widths = 4,8
blocks_per_stage = 1
norm_groups = 2
stem_stride = 1
feature_dim = 16
projection_hidden = 16

[moco]
feature_dim = 16
queue_size = 32
total_epochs = 2

[pretrain]
selection_probe_epochs = 5
lr_grid_trials = 1

[plan]
trials_per_fraction = 2
fractions = 0.1,1

[compare]
replicates = 50
)";

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() / ("mococxr_cli_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Relative path -> contents (symlinks as their target), skipping run_config.ini.
std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    const auto rel = fs::relative(e.path(), dir).string();
    if (rel == kRunConfigFile) continue;
    if (e.is_symlink()) out[rel] = "-> " + fs::read_symlink(e.path()).string();
    else if (e.is_regular_file()) out[rel] = slurp(e.path());
  }
  return out;
}

RunConfig tiny(const std::string& command, const std::vector<std::string>& overrides = {}) {
  auto ini = parse_ini(kTinyConfig, "tiny");
  for (const auto& o : overrides) apply_override(ini, o);
  auto c = RunConfig::from_ini(ini);
  c.command = command;
  c.validate();
  return c;
}

fs::path make_data(const fs::path& root) {
  auto c = tiny("synth-data", {"run.out_dir=" + (root / "data").string()});
  cmd_synth_data(c, {});
  return root / "data";
}

fs::path make_pretrain(const fs::path& root, const fs::path& data) {
  auto c = tiny("pretrain", {"run.data_dir=" + data.string(), "run.out_dir=" + (root / "pre").string()});
  cmd_pretrain(c, {});
  return root / "pre";
}

std::vector<std::string> arm_overrides(const fs::path& data, const fs::path& pre, const fs::path& out) {
  return {"run.data_dir=" + data.string(), "run.out_dir=" + out.string(),
          "arms.moco_checkpoint=" + (pre / kBestCheckpoint).string(),
          "arms.generic_checkpoint=" + (pre / kGenericCheckpoint).string()};
}

// Rows of a comparison csv and how many of them are significant.
std::pair<std::size_t, std::size_t> significant_rows(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  std::size_t rows = 0, significant = 0;
  while (std::getline(in, line)) {
    ++rows;
    std::stringstream ss(line);
    std::string cell;
    for (int i = 0; i <= 10; ++i) std::getline(ss, cell, ',');
    significant += cell == "1";
  }
  return {rows, significant};
}

}  // namespace

TEST_CASE("ini parsing") {
  const auto ini = parse_ini("# c\n[a]\nx = 1\n; c\n\n[b]\ny=two words \n", "f");
  CHECK(ini.at("a").at("x") == "1");
  CHECK(ini.at("b").at("y") == "two words");
  CHECK(parse_ini(format_ini(ini)) == ini);
  auto error_of = [](const std::string& text) {
    try {
      parse_ini(text, "f.ini");
    } catch (const std::invalid_argument& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(error_of("x = 1\n").find("f.ini:1:") != std::string::npos);
  CHECK(error_of("[a]\nx = 1\nx = 2\n").find("f.ini:3:") != std::string::npos);
  CHECK(error_of("[a]\n\njunk\n").find("f.ini:3:") != std::string::npos);
  CHECK(error_of("[a\n").find("f.ini:1:") != std::string::npos);
}

TEST_CASE("run config resolution") {
  const RunConfig defaults;
  const auto ini = defaults.to_ini();
  SUBCASE("round trip") { CHECK(RunConfig::from_ini(ini).to_ini() == ini); }
  SUBCASE("fine-tune defaults are in the provenance") {
    CHECK(ini.at("finetune").at("learning_rate") == "3e-05");
    CHECK(ini.at("finetune").at("batch_size") == "16");
    CHECK(ini.at("finetune").at("epochs_by_fraction") == "0.001:220,0.01:95,0.1:41,1:18");
    CHECK(ini.at("compare").at("replicates") == "500");
    CHECK(ini.at("pretrain").at("lr_grid") == "0.01,0.001,0.0001,1e-05");
  }
  SUBCASE("unknown sections and keys are rejected") {
    Ini bad{{"nonsense", {{"a", "1"}}}};
    CHECK_THROWS_AS(RunConfig::from_ini(bad), std::invalid_argument);
    for (const char* section : {"run", "synthetic", "encoder", "moco", "generic", "pretrain", "finetune", "plan", "arms",
                                "compare"}) {
      Ini one{{section, {{"no_such_key", "1"}}}};
      CHECK_THROWS_AS(RunConfig::from_ini(one), std::invalid_argument);
    }
  }
  SUBCASE("overrides") {
    Ini o;
    apply_override(o, "compare.replicates=50");
    apply_override(o, "plan.fractions = 0.0625,0.25,1");
    const auto c = RunConfig::from_ini(o);
    CHECK(c.compare.replicates == 50);
    CHECK(c.plan.fractions == std::vector<double>{0.0625, 0.25, 1.0});
    CHECK_THROWS(apply_override(o, "replicates=5"));
    CHECK_THROWS(apply_override(o, "compare.replicates"));
    CHECK_THROWS(apply_override(o, ".x=1"));
  }
  SUBCASE("seeds") {
    Ini o;
    set_all_seeds(o, 7);
    const auto c = RunConfig::from_ini(o);
    CHECK(c.synthetic.seed == 7);
    CHECK(c.moco.seed == 7);
    CHECK(c.generic.seed == 7);
    CHECK(c.plan.seed == 7);
    CHECK(c.compare.seed == 7);
  }
  SUBCASE("cross-module validation") {
    auto c = RunConfig::from_ini(Ini{{"moco", {{"feature_dim", "64"}}}});
    CHECK_THROWS(c.validate());
    c = RunConfig::from_ini(Ini{{"compare", {{"replicates", "0"}}}});
    CHECK_THROWS(c.validate());
    c = RunConfig::from_ini(Ini{{"run", {{"parallel_trials", "0"}}}});
    CHECK_THROWS(c.validate());
  }
  SUBCASE("file plus overrides") {
    TempDir tmp;
    std::ofstream(tmp.path / "c.ini") << kTinyConfig;
    const auto c = resolve_config("pretrain", tmp.path / "c.ini", {"moco.total_epochs=1"});
    CHECK(c.command == "pretrain");
    CHECK(c.moco.total_epochs == 1);
    CHECK(c.encoder.input_size == 16);
    CHECK_THROWS(resolve_config("pretrain", tmp.path / "missing.ini", {}));
  }
  SUBCASE("shipped desk config") {
    const auto c = resolve_config("pretrain", fs::path(MOCOCXR_SOURCE_DIR) / "configs" / "desk.ini", {});
    CHECK_NOTHROW(c.validate());
    CHECK(c.encoder.input_size == 32);
    CHECK(c.moco.learning_rate == 0.003);
    CHECK(c.generic.kind == mococxr::moco::GenericInitKind::kSupervised);
    CHECK(c.plan.fractions == std::vector<double>{0.01, 0.1, 1.0});
  }
}

TEST_CASE("synth-data command") {
  TempDir tmp;
  const auto data = make_data(tmp.path);
  const auto rows = data::load_manifest(data / "manifest.csv");
  CHECK(rows.size() == 120);
  CHECK(fs::exists(data / kRunConfigFile));
  CHECK_FALSE(fs::exists(data / kIncompleteMarker));
  auto again = tiny("synth-data", {"run.out_dir=" + data.string()});
  CHECK_THROWS_WITH(cmd_synth_data(again, {}), doctest::Contains("--force"));
  CommandOptions force;
  force.force = true;
  CHECK_NOTHROW(cmd_synth_data(again, force));

  auto a = tiny("synth-data", {"run.out_dir=" + (tmp.path / "s7a").string(), "synthetic.seed=7"});
  auto b = tiny("synth-data", {"run.out_dir=" + (tmp.path / "s7b").string(), "synthetic.seed=7"});
  cmd_synth_data(a, {});
  cmd_synth_data(b, {});
  CHECK(snapshot(tmp.path / "s7a") == snapshot(tmp.path / "s7b"));
  CHECK(snapshot(tmp.path / "s7a") != snapshot(data));
}

TEST_CASE("pretrain command") {
  TempDir tmp;
  const auto data = make_data(tmp.path);
  SUBCASE("one epoch gives one checkpoint and a best marker") {
    auto c = tiny("pretrain", {"run.data_dir=" + data.string(), "run.out_dir=" + (tmp.path / "p1").string(),
                               "moco.total_epochs=1"});
    cmd_pretrain(c, {});
    std::size_t epochs = 0;
    for (const auto& e : fs::directory_iterator(tmp.path / "p1")) {
      epochs += e.path().filename().string().rfind("epoch_", 0) == 0;
    }
    CHECK(epochs == 1);
    CHECK(fs::is_symlink(tmp.path / "p1" / kBestCheckpoint));
    CHECK(fs::exists(tmp.path / "p1" / kGenericCheckpoint));
    CHECK(moco::load_encoder(tmp.path / "p1" / kGenericCheckpoint).header.at("generic_init") == "random");
    CHECK(moco::load_encoder(tmp.path / "p1" / kBestCheckpoint).header.at("generic_init") == "random");
  }
  SUBCASE("missing dataset") {
    auto c = tiny("pretrain", {"run.data_dir=" + (tmp.path / "nowhere").string(), "run.out_dir=" + (tmp.path / "p").string()});
    CHECK_THROWS_WITH(cmd_pretrain(c, {}), doctest::Contains("dataset not found"));
  }
  SUBCASE("a failed run leaves the incomplete marker") {
    auto c = tiny("pretrain", {"run.data_dir=" + data.string(), "run.out_dir=" + (tmp.path / "bad").string(),
                               "moco.batch_size=512", "moco.queue_size=512"});
    CHECK_THROWS(cmd_pretrain(c, {}));
    CHECK(fs::exists(tmp.path / "bad" / kIncompleteMarker));
  }
  SUBCASE("resume continues the loss trace") {
    const auto full = make_pretrain(tmp.path, data);
    auto c = tiny("pretrain", {"run.data_dir=" + data.string(), "run.out_dir=" + (tmp.path / "r").string()});
    cmd_pretrain(c, {});
    fs::remove(tmp.path / "r" / "epoch_002.ckpt");
    CommandOptions resume;
    resume.resume = true;
    cmd_pretrain(c, resume);
    CHECK(slurp(tmp.path / "r" / "loss_trace.csv") == slurp(full / "loss_trace.csv"));
    CHECK(slurp(tmp.path / "r" / "epoch_002.ckpt") == slurp(full / "epoch_002.ckpt"));
    std::istringstream trace(slurp(full / "loss_trace.csv"));
    std::string line;
    std::getline(trace, line);
    std::size_t expect = 1;
    bool continuous = true;
    while (std::getline(trace, line)) continuous &= std::stoul(line.substr(0, line.find(','))) == expect++;
    CHECK(continuous);
    CHECK(expect > 1);
  }
  SUBCASE("learning-rate grid") {
    auto c = tiny("pretrain", {"run.data_dir=" + data.string(), "run.out_dir=" + (tmp.path / "grid").string(),
                               "moco.total_epochs=1"});
    CommandOptions grid;
    grid.lr_grid = true;
    cmd_pretrain(c, grid);
    for (const char* lr : {"lr_0.01", "lr_0.001", "lr_0.0001", "lr_1e-05"}) {
      CHECK(fs::is_symlink(tmp.path / "grid" / lr / kBestCheckpoint));
    }
    const auto table = slurp(tmp.path / "grid" / kLrGridTable);
    CHECK(std::count(table.begin(), table.end(), '\n') == 6);
    CHECK(table.find("(") != std::string::npos);
    const auto csv = slurp(tmp.path / "grid" / kLrGridCsv);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
  }
}

TEST_CASE("finetune, compare and evaluate commands") {
  TempDir tmp;
  const auto data = make_data(tmp.path);
  const auto pre = make_pretrain(tmp.path, data);
  auto c = tiny("finetune", arm_overrides(data, pre, tmp.path / "ft"));
  cmd_finetune(c, {});
  const auto grid_csv = slurp(tmp.path / "ft" / kResultGridFile);
  CHECK(grid_csv.rfind(finetune::kResultGridHeader, 0) == 0);
  CHECK(std::count(grid_csv.begin(), grid_csv.end(), '\n') == 9);
  const auto provenance = parse_ini(slurp(tmp.path / "ft" / kRunConfigFile));
  CHECK(provenance.at("finetune").at("learning_rate") == "3e-05");
  CHECK(provenance.at("finetune").at("batch_size") == "16");
  CHECK(provenance.at("finetune").at("epochs_by_fraction") == "0.001:220,0.01:95,0.1:41,1:18");

  SUBCASE("identical config gives identical bytes, also when rerun from the provenance file") {
    auto again = tiny("finetune", arm_overrides(data, pre, tmp.path / "ft2"));
    again.run.parallel_trials = 3;
    cmd_finetune(again, {});
    CHECK(snapshot(tmp.path / "ft") == snapshot(tmp.path / "ft2"));
    const auto rerun =
        resolve_config("finetune", tmp.path / "ft" / kRunConfigFile, {"run.out_dir=" + (tmp.path / "ft3").string()});
    cmd_finetune(rerun, {});
    CHECK(snapshot(tmp.path / "ft") == snapshot(tmp.path / "ft3"));
  }
  SUBCASE("loaded grid matches the score files") {
    std::vector<metrics::ScoredSet> sets;
    const auto trials = load_grid(tmp.path / "ft", &sets);
    REQUIRE(trials.size() == 8);
    for (std::size_t i = 0; i < trials.size(); ++i) {
      CHECK(metrics::auroc(sets[i]) == doctest::Approx(trials[i].auroc).epsilon(1e-12));
    }
  }
  SUBCASE("small external-set fractions are accepted") {
    auto s = tiny("finetune", arm_overrides(data, pre, tmp.path / "shz"));
    s.plan.fractions = {0.0625, 0.25, 1.0};
    s.plan.trials_per_fraction = 1;
    CHECK_NOTHROW(cmd_finetune(s, {}));
    CHECK(load_grid(tmp.path / "shz").size() == 6);
  }
  SUBCASE("missing checkpoints") {
    auto m = tiny("finetune", arm_overrides(data, tmp.path / "nothing", tmp.path / "m"));
    CHECK_THROWS_WITH(cmd_finetune(m, {}), doctest::Contains("checkpoint not found"));
    auto e = tiny("finetune", {"run.data_dir=" + data.string(), "run.out_dir=" + (tmp.path / "e").string()});
    CHECK_THROWS(cmd_finetune(e, {}));
  }
  SUBCASE("compare honours the replicate override and records it") {
    auto cmp = tiny("compare", {"compare.grid_dir=" + (tmp.path / "ft").string(), "run.out_dir=" + (tmp.path / "cmp").string()});
    cmd_compare(cmp, {});
    const auto table = slurp(tmp.path / "cmp" / kComparisonTable);
    CHECK(table.rfind("replicates = 50\n", 0) == 0);
    CHECK(parse_ini(slurp(tmp.path / "cmp" / kRunConfigFile)).at("compare").at("replicates") == "50");
    CHECK(table.find("10%") != std::string::npos);
    CHECK(table.find("100%") != std::string::npos);
  }
  SUBCASE("evaluate") {
    auto ev = tiny("evaluate", {"compare.grid_dir=" + (tmp.path / "ft").string(), "run.out_dir=" + (tmp.path / "ev").string()});
    cmd_evaluate(ev, {});
    const auto csv = slurp(tmp.path / "ev" / kEvaluationCsv);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
  }
  SUBCASE("an incomplete grid is refused") {
    std::ofstream(tmp.path / "ft" / kIncompleteMarker) << "finetune\n";
    auto cmp = tiny("compare", {"compare.grid_dir=" + (tmp.path / "ft").string(), "run.out_dir=" + (tmp.path / "x").string()});
    CHECK_THROWS_WITH(cmd_compare(cmp, {}), doctest::Contains("incomplete"));
  }
  SUBCASE("identical arms compare to exact zero") {
    auto same = tiny("finetune", arm_overrides(data, pre, tmp.path / "same"));
    same.arms.moco_checkpoint = same.arms.generic_checkpoint;
    cmd_finetune(same, {});
    auto cmp = tiny("compare", {"compare.grid_dir=" + (tmp.path / "same").string(),
                                "run.out_dir=" + (tmp.path / "cmp0").string()});
    cmd_compare(cmp, {});
    const auto table = slurp(tmp.path / "cmp0" / kComparisonTable);
    std::size_t zeros = 0;
    for (auto p = table.find("0.000(0.000, 0.000)"); p != std::string::npos; p = table.find("0.000(0.000, 0.000)", p + 1)) {
      ++zeros;
    }
    CHECK(zeros == 2);
    const auto [rows, significant] = significant_rows(slurp(tmp.path / "cmp0" / kComparisonCsv));
    CHECK(rows == 2);
    CHECK(significant == 0);
  }
}

TEST_CASE("compare flags a dominating arm in every cell") {
  TempDir tmp;
  const fs::path grid = tmp.path / "grid";
  fs::create_directories(grid / kScoresDir);
  data::ImageDataset test;
  const std::size_t n = 60;
  for (std::size_t i = 0; i < n; ++i) {
    data::LabeledRecord r;
    r.image_path = "t" + std::to_string(i) + ".pgm";
    r.label = i % 3 == 0;
    test.records.push_back(r);
  }
  std::vector<finetune::TrialResult> trials;
  for (double f : {0.01, 0.1, 1.0}) {
    for (std::size_t t = 0; t < 2; ++t) {
      for (const char* arm : {"moco", "generic"}) {
        finetune::TrialResult r;
        r.init_kind = arm;
        r.architecture = "res1x4-8";
        r.fraction = f;
        r.trial = t;
        for (std::size_t i = 0; i < n; ++i) {
          const double y = test.records[i].label;
          // The first arm ranks perfectly; the second is noisy.
          r.scores.push_back(std::string(arm) == "moco" ? 0.2 + 0.6 * y : ((i * 37 + t) % 11) / 11.0 + 0.05 * y);
        }
        r.auroc = metrics::auroc({r.scores, test.labels()});
        trials.push_back(r);
        std::ofstream(grid / kScoresDir / finetune::score_file_name(r)) << finetune::score_file_csv(r, test);
      }
    }
  }
  std::ofstream(grid / kResultGridFile) << finetune::result_grid_csv(trials);
  auto c = tiny("compare", {"compare.grid_dir=" + grid.string(), "run.out_dir=" + (tmp.path / "cmp").string()});
  cmd_compare(c, {});
  const auto [rows, significant] = significant_rows(slurp(tmp.path / "cmp" / kComparisonCsv));
  CHECK(rows == 3);
  CHECK(significant == 3);
}

TEST_CASE("executable exit status") {
  TempDir tmp;
  const std::string exe = MOCOCXR_CLI_PATH;
  const auto run = [&](const std::string& args) {
    return std::system((exe + " " + args + " >/dev/null 2>&1").c_str());
  };
  std::ofstream(tmp.path / "tiny.ini") << kTinyConfig;
  const auto cfg = (tmp.path / "tiny.ini").string();
  const auto data = (tmp.path / "data").string();
  CHECK(run("--help") == 0);
  CHECK(run("") != 0);
  CHECK(run("synth-data -c " + cfg + " -o " + data) == 0);
  CHECK(run("synth-data -c " + cfg + " -o " + data) != 0);
  CHECK(run("synth-data -c " + cfg + " -o " + data + " --force") == 0);
  CHECK(run("synth-data -c " + cfg + " -o " + data + " --force --set synthetic.bogus=1") != 0);
  CHECK(run("pretrain -c " + cfg + " --data " + (tmp.path / "none").string() + " -o " + (tmp.path / "p").string()) != 0);
  const auto pre = (tmp.path / "pre").string();
  CHECK(run("pretrain -c " + cfg + " --data " + data + " -o " + pre + " --seed 3 --set moco.total_epochs=1") == 0);
  CHECK(parse_ini(slurp(fs::path(pre) / kRunConfigFile)).at("moco").at("seed") == "3");
  const auto ft = (tmp.path / "ft").string();
  CHECK(run("probe -c " + cfg + " --data " + data + " --pretrain-dir " + pre + " -o " + ft + " --parallel-trials 2") == 0);
  CHECK(parse_ini(slurp(fs::path(ft) / kRunConfigFile)).at("finetune").at("mode") == "linear");
  CHECK(run("compare --grid " + ft + " -o " + (tmp.path / "c").string() + " --replicates 20") == 0);
  CHECK(parse_ini(slurp(tmp.path / "c" / kRunConfigFile)).at("compare").at("replicates") == "20");
  CHECK(run("compare --grid " + (tmp.path / "none").string() + " -o " + (tmp.path / "c2").string()) != 0);
}
