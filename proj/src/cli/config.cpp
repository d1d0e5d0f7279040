#include <fmt/format.h>

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "mococxr/cli.hpp"

namespace mococxr::cli {

namespace fs = std::filesystem;
using fields::Fields;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

Fields known_only(const Ini& ini, const std::string& section, const std::set<std::string>& keys) {
  auto it = ini.find(section);
  if (it == ini.end()) return {};
  fields::reject_unknown(it->second, keys, "[" + section + "]");
  return it->second;
}

std::set<std::string> keys_of(const Fields& f) {
  std::set<std::string> out;
  for (const auto& [k, v] : f) out.insert(k);
  return out;
}

// Module configs parse the merge of their defaults and the given overrides.
template <class Config>
Config parse_module(const Ini& ini, const std::string& section) {
  auto it = ini.find(section);
  if (it == ini.end()) return Config{};
  auto merged = Config{}.to_fields();
  fields::reject_unknown(it->second, keys_of(merged), "[" + section + "]");
  for (const auto& [k, v] : it->second) merged[k] = v;
  return Config::from_fields(merged);
}

Fields generic_fields(const moco::GenericInitConfig& g) {
  return {{"kind", moco::to_string(g.kind)},
          {"supervised_steps", std::to_string(g.supervised_steps)},
          {"supervised_batch", std::to_string(g.supervised_batch)},
          {"supervised_lr", fields::format_double(g.supervised_lr)},
          {"seed", std::to_string(g.seed)}};
}

}  // namespace

Ini parse_ini(const std::string& text, const std::string& source) {
  Ini ini;
  std::istringstream in(text);
  std::string line;
  std::string section;
  bool in_section = false;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    const auto where = fmt::format("{}:{}: ", source, lineno);
    if (t.front() == '[') {
      if (t.back() != ']' || t.size() < 3) throw std::invalid_argument(where + "malformed section header '" + t + "'");
      section = trim(t.substr(1, t.size() - 2));
      in_section = true;
      ini[section];
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw std::invalid_argument(where + "expected 'key = value', got '" + t + "'");
    if (!in_section) throw std::invalid_argument(where + "key outside of any [section]");
    const auto key = trim(t.substr(0, eq));
    if (key.empty()) throw std::invalid_argument(where + "empty key");
    if (!ini[section].emplace(key, trim(t.substr(eq + 1))).second) {
      throw std::invalid_argument(where + "duplicate key '" + key + "' in [" + section + "]");
    }
  }
  return ini;
}

std::string format_ini(const Ini& ini) {
  std::string out;
  for (const auto& [section, values] : ini) {
    if (!out.empty()) out += "\n";
    out += "[" + section + "]\n";
    for (const auto& [k, v] : values) out += k + " = " + v + "\n";
  }
  return out;
}

void RunConfig::validate() const {
  synthetic.validate();
  encoder.validate();
  moco.validate();
  finetune.validate();
  plan.validate();
  if (moco.feature_dim != encoder.feature_dim) {
    throw std::invalid_argument(fmt::format("moco.feature_dim ({}) must equal encoder.feature_dim ({})",
                                            moco.feature_dim, encoder.feature_dim));
  }
  if (run.parallel_trials == 0) throw std::invalid_argument("run.parallel_trials must be >= 1");
  if (generic.supervised_batch == 0) throw std::invalid_argument("generic.supervised_batch must be >= 1");
  if (pretrain.selection_probe_epochs == 0) throw std::invalid_argument("pretrain.selection_probe_epochs must be >= 1");
  if (pretrain.lr_grid.empty()) throw std::invalid_argument("pretrain.lr_grid must not be empty");
  for (double lr : pretrain.lr_grid) {
    if (!(lr > 0.0)) throw std::invalid_argument("pretrain.lr_grid entries must be > 0");
  }
  if (!(pretrain.lr_grid_fraction > 0.0 && pretrain.lr_grid_fraction <= 1.0)) {
    throw std::invalid_argument("pretrain.lr_grid_fraction must be in (0, 1]");
  }
  if (pretrain.lr_grid_trials == 0) throw std::invalid_argument("pretrain.lr_grid_trials must be >= 1");
  if (compare.replicates == 0) throw std::invalid_argument("compare.replicates must be >= 1");
  if (compare.arm_a == compare.arm_b) throw std::invalid_argument("compare.arm_a and compare.arm_b must differ");
}

Ini RunConfig::to_ini() const {
  Ini ini;
  ini["run"] = {{"command", command},
                {"data_dir", run.data_dir.string()},
                {"out_dir", run.out_dir.string()},
                {"uncertain_policy", data::to_string(run.uncertain_policy)},
                {"parallel_trials", std::to_string(run.parallel_trials)}};
  ini["synthetic"] = synthetic.to_fields();
  ini["encoder"] = encoder.to_fields();
  ini["moco"] = moco.to_fields();
  ini["generic"] = generic_fields(generic);
  ini["pretrain"] = {{"selection_probe_epochs", std::to_string(pretrain.selection_probe_epochs)},
                     {"lr_grid", fields::format_list(pretrain.lr_grid)},
                     {"lr_grid_fraction", fields::format_double(pretrain.lr_grid_fraction)},
                     {"lr_grid_trials", std::to_string(pretrain.lr_grid_trials)}};
  ini["finetune"] = finetune.to_fields();
  ini["plan"] = plan.to_fields();
  ini["arms"] = {{"moco_checkpoint", arms.moco_checkpoint.string()},
                 {"generic_checkpoint", arms.generic_checkpoint.string()}};
  ini["compare"] = {{"grid_dir", compare.grid_dir.string()},
                    {"replicates", std::to_string(compare.replicates)},
                    {"seed", std::to_string(compare.seed)},
                    {"arm_a", compare.arm_a},
                    {"arm_b", compare.arm_b}};
  return ini;
}

RunConfig RunConfig::from_ini(const Ini& ini) {
  const RunConfig defaults;
  const auto reference = defaults.to_ini();
  for (const auto& [section, values] : ini) {
    if (!reference.count(section)) throw std::invalid_argument("unknown config section [" + section + "]");
  }
  RunConfig c;
  c.synthetic = parse_module<data::SyntheticSpec>(ini, "synthetic");
  c.encoder = parse_module<diffcore::EncoderSpec>(ini, "encoder");
  c.moco = parse_module<moco::MoCoConfig>(ini, "moco");
  c.finetune = parse_module<finetune::FinetuneConfig>(ini, "finetune");
  c.plan = parse_module<finetune::LabelFractionPlan>(ini, "plan");

  const auto run = known_only(ini, "run", keys_of(reference.at("run")));
  if (auto it = run.find("command"); it != run.end()) c.command = it->second;
  if (auto it = run.find("data_dir"); it != run.end()) c.run.data_dir = it->second;
  if (auto it = run.find("out_dir"); it != run.end()) c.run.out_dir = it->second;
  if (auto it = run.find("uncertain_policy"); it != run.end()) {
    c.run.uncertain_policy = data::parse_uncertain_policy(it->second);
  }
  if (auto it = run.find("parallel_trials"); it != run.end()) {
    c.run.parallel_trials = fields::parse_uint("run.parallel_trials", it->second);
  }

  const auto gen = known_only(ini, "generic", keys_of(reference.at("generic")));
  if (auto it = gen.find("kind"); it != gen.end()) c.generic.kind = moco::parse_generic_init_kind(it->second);
  if (auto it = gen.find("supervised_steps"); it != gen.end()) {
    c.generic.supervised_steps = fields::parse_uint("generic.supervised_steps", it->second);
  }
  if (auto it = gen.find("supervised_batch"); it != gen.end()) {
    c.generic.supervised_batch = fields::parse_uint("generic.supervised_batch", it->second);
  }
  if (auto it = gen.find("supervised_lr"); it != gen.end()) {
    c.generic.supervised_lr = fields::parse_double("generic.supervised_lr", it->second);
  }
  if (auto it = gen.find("seed"); it != gen.end()) c.generic.seed = fields::parse_uint("generic.seed", it->second);

  const auto pre = known_only(ini, "pretrain", keys_of(reference.at("pretrain")));
  if (auto it = pre.find("selection_probe_epochs"); it != pre.end()) {
    c.pretrain.selection_probe_epochs = fields::parse_uint("pretrain.selection_probe_epochs", it->second);
  }
  if (auto it = pre.find("lr_grid"); it != pre.end()) {
    c.pretrain.lr_grid = fields::parse_double_list("pretrain.lr_grid", it->second);
  }
  if (auto it = pre.find("lr_grid_fraction"); it != pre.end()) {
    c.pretrain.lr_grid_fraction = fields::parse_double("pretrain.lr_grid_fraction", it->second);
  }
  if (auto it = pre.find("lr_grid_trials"); it != pre.end()) {
    c.pretrain.lr_grid_trials = fields::parse_uint("pretrain.lr_grid_trials", it->second);
  }

  const auto arms = known_only(ini, "arms", keys_of(reference.at("arms")));
  if (auto it = arms.find("moco_checkpoint"); it != arms.end()) c.arms.moco_checkpoint = it->second;
  if (auto it = arms.find("generic_checkpoint"); it != arms.end()) c.arms.generic_checkpoint = it->second;

  const auto cmp = known_only(ini, "compare", keys_of(reference.at("compare")));
  if (auto it = cmp.find("grid_dir"); it != cmp.end()) c.compare.grid_dir = it->second;
  if (auto it = cmp.find("replicates"); it != cmp.end()) {
    c.compare.replicates = fields::parse_uint("compare.replicates", it->second);
  }
  if (auto it = cmp.find("seed"); it != cmp.end()) c.compare.seed = fields::parse_uint("compare.seed", it->second);
  if (auto it = cmp.find("arm_a"); it != cmp.end()) c.compare.arm_a = it->second;
  if (auto it = cmp.find("arm_b"); it != cmp.end()) c.compare.arm_b = it->second;
  return c;
}

void apply_override(Ini& ini, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq || dot == 0 || dot + 1 == eq) {
    throw std::invalid_argument("override '" + assignment + "' is not of the form section.key=value");
  }
  ini[trim(assignment.substr(0, dot))][trim(assignment.substr(dot + 1, eq - dot - 1))] =
      trim(assignment.substr(eq + 1));
}

void set_all_seeds(Ini& ini, std::uint64_t seed) {
  for (const char* section : {"synthetic", "moco", "generic", "plan", "compare"}) {
    ini[section]["seed"] = std::to_string(seed);
  }
}

RunConfig resolve_config(const std::string& command, const std::optional<fs::path>& config_file,
                         const std::vector<std::string>& overrides) {
  Ini ini;
  if (config_file) {
    std::ifstream in(*config_file, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read config file " + config_file->string());
    std::stringstream ss;
    ss << in.rdbuf();
    ini = parse_ini(ss.str(), config_file->string());
  }
  for (const auto& o : overrides) apply_override(ini, o);
  auto config = RunConfig::from_ini(ini);
  config.command = command;
  config.validate();
  return config;
}

}  // namespace mococxr::cli
