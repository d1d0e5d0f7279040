#include "mococxr/moco.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <regex>
#include <sstream>
#include <stdexcept>

#include "mococxr/diffcore/ops.hpp"
#include "mococxr/fields.hpp"
#include "mococxr/random.hpp"

namespace mococxr::moco {

using diffcore::BasicParamSet;
using diffcore::BasicTensor;
namespace fs = std::filesystem;

void MoCoConfig::validate() const {
  if (!(momentum >= 0.0 && momentum <= 1.0)) throw std::invalid_argument("moco: momentum must lie in [0,1]");
  if (!(temperature > 0.0)) throw std::invalid_argument("moco: temperature must be > 0");
  if (batch_size == 0) throw std::invalid_argument("moco: batch_size must be >= 1");
  if (queue_size < batch_size) throw std::invalid_argument("moco: queue_size must be >= batch_size");
  if (queue_size % batch_size != 0) {
    throw std::invalid_argument(
        fmt::format("moco: queue_size {} is not divisible by batch_size {}", queue_size, batch_size));
  }
  if (feature_dim < 2) throw std::invalid_argument("moco: feature_dim must be >= 2");
  if (total_epochs == 0) throw std::invalid_argument("moco: total_epochs must be >= 1");
  if (!(learning_rate >= 0.0)) throw std::invalid_argument("moco: learning_rate must be >= 0");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("moco: gamma must lie in [0,1]");
  if (!std::is_sorted(milestone_epochs.begin(), milestone_epochs.end())) {
    throw std::invalid_argument("moco: milestone_epochs must be ascending");
  }
  augment.validate();
}

std::map<std::string, std::string> MoCoConfig::to_fields() const {
  using fields::format_double;
  return {
      {"momentum", format_double(momentum)},
      {"temperature", format_double(temperature)},
      {"queue_size", std::to_string(queue_size)},
      {"feature_dim", std::to_string(feature_dim)},
      {"batch_size", std::to_string(batch_size)},
      {"total_epochs", std::to_string(total_epochs)},
      {"schedule", diffcore::to_string(schedule)},
      {"learning_rate", format_double(learning_rate)},
      {"milestone_epochs", fields::format_list(milestone_epochs)},
      {"gamma", format_double(gamma)},
      {"sgd_momentum", format_double(sgd_momentum)},
      {"weight_decay", format_double(weight_decay)},
      {"max_rotation_degrees", format_double(augment.max_rotation_degrees)},
      {"hflip_probability", format_double(augment.hflip_probability)},
      {"seed", std::to_string(seed)},
  };
}

MoCoConfig MoCoConfig::from_fields(const std::map<std::string, std::string>& f) {
  MoCoConfig c;
  fields::reject_unknown(f, [&] {
    std::set<std::string> keys;
    for (const auto& [k, v] : c.to_fields()) keys.insert(k);
    return keys;
  }(), "moco config");
  auto num = [&](const char* key, double& target) {
    if (auto it = f.find(key); it != f.end()) target = fields::parse_double(key, it->second);
  };
  auto uint = [&](const char* key, auto& target) {
    if (auto it = f.find(key); it != f.end()) target = static_cast<std::decay_t<decltype(target)>>(fields::parse_uint(key, it->second));
  };
  num("momentum", c.momentum);
  num("temperature", c.temperature);
  uint("queue_size", c.queue_size);
  uint("feature_dim", c.feature_dim);
  uint("batch_size", c.batch_size);
  uint("total_epochs", c.total_epochs);
  if (auto it = f.find("schedule"); it != f.end()) c.schedule = diffcore::parse_schedule_kind(it->second);
  num("learning_rate", c.learning_rate);
  if (auto it = f.find("milestone_epochs"); it != f.end()) {
    c.milestone_epochs = fields::parse_size_list("milestone_epochs", it->second);
  }
  num("gamma", c.gamma);
  num("sgd_momentum", c.sgd_momentum);
  num("weight_decay", c.weight_decay);
  num("max_rotation_degrees", c.augment.max_rotation_degrees);
  num("hflip_probability", c.augment.hflip_probability);
  uint("seed", c.seed);
  c.validate();
  return c;
}

diffcore::ScheduleSpec MoCoConfig::schedule_for(std::size_t steps_per_epoch) const {
  diffcore::ScheduleSpec s;
  s.kind = schedule;
  s.base_lr = learning_rate;
  s.total_steps = total_epochs * steps_per_epoch;
  s.gamma = gamma;
  for (auto e : milestone_epochs) s.milestones.push_back(e * steps_per_epoch);
  return s;
}

namespace {

template <class T>
void check_unit_rows(const BasicTensor<T>& m, const char* what) {
  const auto rows = m.dim(0), cols = m.dim(1);
  const auto v = m.values();
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < cols; ++c) ss += static_cast<double>(v[r * cols + c]) * static_cast<double>(v[r * cols + c]);
    const double norm = std::sqrt(ss);
    if (std::abs(norm - 1.0) > kUnitNormTolerance) {
      throw std::invalid_argument(fmt::format("{}: row {} has norm {:.6f}, expected unit norm", what, r, norm));
    }
  }
}

template <class T>
void require_matrix(const BasicTensor<T>& m, const char* what) {
  if (m.ndim() != 2) throw std::invalid_argument(std::string(what) + ": expected a matrix, got " + diffcore::shape_str(m.shape()));
}

}  // namespace

template <class T>
BasicQueueState<T> init_queue(std::size_t queue_size, std::size_t feature_dim, std::uint64_t seed) {
  if (queue_size == 0 || feature_dim == 0) throw std::invalid_argument("init_queue: sizes must be >= 1");
  Rng rng(derive_seed(seed, {0x7175657565ULL}));
  std::vector<T> v(queue_size * feature_dim);
  for (std::size_t r = 0; r < queue_size; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < feature_dim; ++c) {
      const double x = rng.normal();
      v[r * feature_dim + c] = static_cast<T>(x);
      ss += x * x;
    }
    const double inv = 1.0 / std::sqrt(std::max(ss, 1e-300));
    for (std::size_t c = 0; c < feature_dim; ++c) v[r * feature_dim + c] = static_cast<T>(v[r * feature_dim + c] * inv);
  }
  return {BasicTensor<T>({queue_size, feature_dim}, std::move(v)), 0};
}

template <class T>
void enqueue(BasicQueueState<T>& queue, const BasicTensor<T>& new_keys) {
  require_matrix(new_keys, "enqueue");
  const auto k = queue.size(), d = queue.dim(), n = new_keys.dim(0);
  if (new_keys.dim(1) != d) {
    throw std::invalid_argument(fmt::format("enqueue: key width {} does not match queue width {}", new_keys.dim(1), d));
  }
  if (n == 0 || n > k) throw std::invalid_argument(fmt::format("enqueue: batch of {} keys does not fit queue of {}", n, k));
  if (k % n != 0) throw std::invalid_argument(fmt::format("enqueue: queue size {} not divisible by batch {}", k, n));
  check_unit_rows(new_keys, "enqueue");
  auto dst = queue.keys.values_mut();
  const auto src = new_keys.values();
  std::copy(src.begin(), src.end(), dst.begin() + static_cast<std::ptrdiff_t>(queue.pointer * d));
  queue.pointer = (queue.pointer + n) % k;
}

template <class T>
void momentum_update(BasicParamSet<T>& key, const BasicParamSet<T>& query, double m) {
  if (!key.same_layout(query)) throw std::invalid_argument("momentum_update: key and query parameter sets differ in layout");
  if (!(m >= 0.0 && m <= 1.0)) throw std::invalid_argument("momentum_update: momentum must lie in [0, 1]");
  if (m == 1.0) return;
  const T mt = static_cast<T>(m), qt = static_cast<T>(1.0 - m);
  auto qi = query.begin();
  for (auto ki = key.begin(); ki != key.end(); ++ki, ++qi) {
    auto kv = ki->second.values_mut();
    const auto qv = qi->second.values();
    if (m == 0.0) {
      std::copy(qv.begin(), qv.end(), kv.begin());
      continue;
    }
    for (std::size_t i = 0; i < kv.size(); ++i) kv[i] = mt * kv[i] + qt * qv[i];
  }
}

template <class T>
BasicTensor<T> info_nce(const BasicTensor<T>& q, const BasicTensor<T>& k_pos, const BasicQueueState<T>& queue,
                        double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("info_nce: temperature must be > 0");
  require_matrix(q, "info_nce");
  require_matrix(k_pos, "info_nce");
  if (q.shape() != k_pos.shape()) {
    throw std::invalid_argument("info_nce: q " + diffcore::shape_str(q.shape()) + " vs k_pos " +
                                diffcore::shape_str(k_pos.shape()));
  }
  if (q.dim(1) != queue.dim()) throw std::invalid_argument("info_nce: embedding width does not match the queue");
  check_unit_rows(q, "info_nce q");
  check_unit_rows(k_pos, "info_nce k_pos");
  check_unit_rows(queue.keys, "info_nce queue");
  const auto l_pos = diffcore::row_dot(q, k_pos.detach());
  const auto l_neg = diffcore::matmul_nt(q, queue.keys.detach());
  const auto logits = diffcore::scale(diffcore::concat_cols(l_pos, l_neg), static_cast<T>(1.0 / tau));
  return diffcore::cross_entropy(logits, std::vector<std::size_t>(q.dim(0), 0));
}

#define MOCOCXR_INSTANTIATE(T)                                                                                  \
  template BasicQueueState<T> init_queue<T>(std::size_t, std::size_t, std::uint64_t);                          \
  template void enqueue<T>(BasicQueueState<T>&, const BasicTensor<T>&);                                         \
  template void momentum_update<T>(BasicParamSet<T>&, const BasicParamSet<T>&, double);                         \
  template BasicTensor<T> info_nce<T>(const BasicTensor<T>&, const BasicTensor<T>&, const BasicQueueState<T>&, \
                                      double);
MOCOCXR_INSTANTIATE(float)
MOCOCXR_INSTANTIATE(double)
#undef MOCOCXR_INSTANTIATE

MoCoState init_state(const EncoderSpec& encoder, const MoCoConfig& config, const ParamSet& init) {
  encoder.validate();
  config.validate();
  if (config.feature_dim != encoder.feature_dim) {
    throw std::invalid_argument(fmt::format("moco: feature_dim {} does not match encoder feature_dim {}",
                                            config.feature_dim, encoder.feature_dim));
  }
  const auto reference = diffcore::init_encoder<float>(encoder, 0);
  if (!reference.same_layout(init)) throw std::invalid_argument("moco: init parameters do not match the encoder spec");
  MoCoState s;
  s.encoder = encoder;
  s.config = config;
  s.config.augment.output_size = encoder.input_size;
  s.query = init.clone();
  s.query.set_requires_grad(true);
  s.key = init.clone();
  s.key.set_requires_grad(false);
  s.queue = init_queue<float>(config.queue_size, config.feature_dim, config.seed);
  s.optimizer.config = {config.learning_rate, config.sgd_momentum, config.weight_decay};
  return s;
}

double pretrain_step(MoCoState& state, std::span<const augment::ViewPair> pairs, double learning_rate) {
  if (pairs.size() != state.config.batch_size) {
    throw std::invalid_argument(
        fmt::format("pretrain_step: got {} view pairs, batch_size is {}", pairs.size(), state.config.batch_size));
  }
  std::vector<Tensor> vq, vk;
  vq.reserve(pairs.size());
  vk.reserve(pairs.size());
  for (const auto& p : pairs) {
    vq.push_back(p.view_q);
    vk.push_back(p.view_k);
  }
  const auto xq = augment::stack(vq);
  const auto xk = augment::stack(vk);
  state.query.zero_grad();

  const auto q = diffcore::forward_encoder(state.query, state.encoder, xq);
  momentum_update(state.key, state.query, state.config.momentum);
  Tensor k;
  {
    diffcore::NoGradGuard no_grad;
    k = diffcore::forward_encoder(state.key, state.encoder, xk);
  }
  auto loss = info_nce(q, k, state.queue, state.config.temperature);
  const double value = loss.item();
  loss.backward();
  state.optimizer.config.learning_rate = learning_rate;
  diffcore::sgd_step(state.query, state.optimizer);
  enqueue(state.queue, k);
  ++state.step;
  return value;
}

namespace {

const std::string kKeyPrefix = "key.";
const std::string kQueueName = "queue.keys";
const std::string kVelocityPrefix = "optim.velocity.";
const std::string kMoCoPrefix = "moco.";

std::string epoch_filename(std::size_t epoch) { return fmt::format("epoch_{:03d}.ckpt", epoch); }

}  // namespace

diffcore::Checkpoint state_checkpoint(const MoCoState& state, std::size_t epoch) {
  diffcore::Checkpoint ckpt;
  ckpt.set_encoder(state.encoder);
  for (const auto& [k, v] : state.config.to_fields()) ckpt.header[kMoCoPrefix + k] = v;
  ckpt.header["kind"] = "moco_state";
  ckpt.header["step"] = std::to_string(state.step);
  ckpt.header["epoch"] = std::to_string(epoch);
  ckpt.header["queue.pointer"] = std::to_string(state.queue.pointer);
  ckpt.header["seed"] = std::to_string(state.config.seed);
  for (const auto& [name, t] : state.query) ckpt.params.add(name, t.detach());
  for (const auto& [name, t] : state.key) ckpt.params.add(kKeyPrefix + name, t.detach());
  ckpt.params.add(kQueueName, state.queue.keys.detach());
  for (const auto& [name, t] : state.query) {
    auto it = state.optimizer.velocity.find(name);
    if (it == state.optimizer.velocity.end()) continue;
    ckpt.params.add(kVelocityPrefix + name, Tensor({it->second.size()}, it->second));
  }
  return ckpt;
}

MoCoState restore_state(const diffcore::Checkpoint& ckpt) {
  if (ckpt.field_or("kind", "") != "moco_state") throw std::runtime_error("checkpoint does not hold a pretraining state");
  const auto encoder = ckpt.encoder();
  const auto config = MoCoConfig::from_fields(fields::strip_prefix(ckpt.header, kMoCoPrefix));
  ParamSet query;
  for (const auto& [name, t] : diffcore::init_encoder<float>(encoder, 0)) {
    const auto& stored = ckpt.params.get(name);
    if (stored.shape() != t.shape()) throw std::runtime_error("checkpoint: shape mismatch for " + name);
    query.add(name, stored.clone());
  }
  MoCoState s = init_state(encoder, config, query);
  for (auto& [name, t] : s.key) {
    const auto& stored = ckpt.params.get(kKeyPrefix + name);
    std::copy(stored.values().begin(), stored.values().end(), t.values_mut().begin());
  }
  s.queue.keys = ckpt.params.get(kQueueName).clone();
  s.queue.pointer = fields::parse_uint("queue.pointer", ckpt.field("queue.pointer"));
  s.step = fields::parse_uint("step", ckpt.field("step"));
  for (const auto& [name, t] : s.query) {
    if (!ckpt.params.contains(kVelocityPrefix + name)) continue;
    const auto v = ckpt.params.get(kVelocityPrefix + name).values();
    s.optimizer.velocity[name].assign(v.begin(), v.end());
  }
  return s;
}

EncoderCheckpoint load_encoder(const fs::path& path) {
  const auto ckpt = diffcore::read_checkpoint(path);
  EncoderCheckpoint out;
  out.spec = ckpt.encoder();
  out.header = ckpt.header;
  for (const auto& [name, t] : diffcore::init_encoder<float>(out.spec, 0)) {
    if (!ckpt.params.contains(name)) throw std::runtime_error(fmt::format("{}: missing parameter '{}'", path.string(), name));
    const auto& stored = ckpt.params.get(name);
    if (stored.shape() != t.shape()) throw std::runtime_error(fmt::format("{}: shape mismatch for '{}'", path.string(), name));
    out.params.add(name, stored.clone());
  }
  return out;
}

namespace {

std::vector<LossRecord> read_trace(const fs::path& path, std::size_t up_to_step) {
  std::vector<LossRecord> out;
  std::ifstream in(path);
  if (!in) return out;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string a, b, c, d;
    std::getline(ss, a, ',');
    std::getline(ss, b, ',');
    std::getline(ss, c, ',');
    std::getline(ss, d, ',');
    LossRecord r{fields::parse_uint("step", a), fields::parse_uint("epoch", b), fields::parse_double("loss", c),
                 fields::parse_double("lr", d)};
    if (r.step <= up_to_step) out.push_back(r);
  }
  return out;
}

void write_trace_row(std::ostream& out, const LossRecord& r) {
  out << r.step << ',' << r.epoch << ',' << fields::format_double(r.loss) << ',' << fields::format_double(r.lr) << '\n';
}

void point_best(const fs::path& dir, std::size_t epoch) {
  const auto link = dir / "best.ckpt";
  const auto tmp = dir / "best.ckpt.tmp";
  fs::remove(tmp);
  fs::create_symlink(epoch_filename(epoch), tmp);
  fs::rename(tmp, link);
}

}  // namespace

PretrainResult pretrain(std::span<const Tensor> images, const EncoderSpec& encoder, const MoCoConfig& config,
                        const ParamSet& init, const PretrainOptions& options) {
  if (images.empty()) throw std::invalid_argument("pretrain: empty dataset");
  MoCoState state = init_state(encoder, config, init);
  const auto n = images.size();
  const auto steps_per_epoch = n / config.batch_size;
  if (steps_per_epoch == 0) {
    throw std::invalid_argument(fmt::format("pretrain: {} images is fewer than one batch of {}", n, config.batch_size));
  }
  for (const auto& img : images) {
    if (img.ndim() != 3 || img.dim(1) != encoder.input_size || img.dim(2) != encoder.input_size) {
      throw std::invalid_argument("pretrain: images must be [1 x S x S] with S = encoder input_size");
    }
  }
  const auto schedule = config.schedule_for(steps_per_epoch);
  const bool write = !options.output_dir.empty();
  const auto& dir = options.output_dir;

  PretrainResult result;
  std::size_t start_epoch = 1;
  double best_metric = -std::numeric_limits<double>::infinity();
  if (write) fs::create_directories(dir);
  if (options.resume && write) {
    std::size_t last = 0;
    const std::regex pattern(R"(epoch_(\d{3,})\.ckpt)");
    for (const auto& entry : fs::directory_iterator(dir)) {
      std::smatch m;
      const auto name = entry.path().filename().string();
      if (std::regex_match(name, m, pattern)) last = std::max<std::size_t>(last, std::stoul(m[1]));
    }
    if (last > 0) {
      for (std::size_t e = 1; e <= last; ++e) {
        const auto ckpt = diffcore::read_checkpoint(dir / epoch_filename(e));
        result.checkpoints.push_back(dir / epoch_filename(e));
        result.epoch_mean_loss.push_back(fields::parse_double("epoch_mean_loss", ckpt.field("epoch_mean_loss")));
        const auto metric_text = ckpt.field_or("selection_metric", "");
        const double metric = metric_text.empty() ? std::numeric_limits<double>::quiet_NaN()
                                                  : fields::parse_double("selection_metric", metric_text);
        result.epoch_metric.push_back(metric);
        if (e == last) {
          auto restored = restore_state(ckpt);
          if (restored.encoder != encoder || restored.config.to_fields() != state.config.to_fields()) {
            throw std::invalid_argument("pretrain: --resume configuration differs from the one in " +
                                        (dir / epoch_filename(e)).string());
          }
          state = std::move(restored);
        }
        if (!(metric <= best_metric) || std::isnan(metric)) {
          best_metric = std::isnan(metric) ? best_metric : metric;
          result.best_epoch = e;
        }
      }
      start_epoch = last + 1;
      result.trace = read_trace(dir / "loss_trace.csv", state.step);
    }
  }
  std::ofstream trace_out;
  if (write) {
    trace_out.open(dir / "loss_trace.csv", std::ios::trunc);
    trace_out << kLossTraceHeader << '\n';
    for (const auto& r : result.trace) write_trace_row(trace_out, r);
    trace_out.flush();
  }

  ParamSet best_query = result.best_epoch > 0 ? state.query.clone() : ParamSet{};
  if (result.best_epoch > 0 && result.best_epoch != start_epoch - 1) {
    best_query = load_encoder(dir / epoch_filename(result.best_epoch)).params;
  }

  std::vector<std::size_t> order(n);
  for (std::size_t epoch = start_epoch; epoch <= config.total_epochs; ++epoch) {
    Rng rng(derive_seed(config.seed, {0x6d6f636fULL, epoch}));
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::vector<augment::ViewPair> pairs(config.batch_size);
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      for (std::size_t j = 0; j < config.batch_size; ++j) {
        const auto idx = order[s * config.batch_size + j];
        pairs[j] = augment::make_view_pair(images[idx], idx, state.config.augment, rng);
      }
      const double lr = diffcore::lr_at(schedule, state.step);
      const double loss = pretrain_step(state, pairs, lr);
      if (!std::isfinite(loss)) throw std::runtime_error(fmt::format("pretrain: non-finite loss at step {}", state.step));
      loss_sum += loss;
      LossRecord rec{state.step, epoch, loss, lr};
      result.trace.push_back(rec);
      if (write) write_trace_row(trace_out, rec);
    }
    const double mean_loss = loss_sum / static_cast<double>(steps_per_epoch);
    result.epoch_mean_loss.push_back(mean_loss);
    double metric = std::numeric_limits<double>::quiet_NaN();
    if (options.selection_metric) metric = options.selection_metric(state.query);
    result.epoch_metric.push_back(metric);
    const bool improved = std::isnan(metric) || metric > best_metric;
    if (improved) {
      if (!std::isnan(metric)) best_metric = metric;
      result.best_epoch = epoch;
      best_query = state.query.clone();
    }
    if (write) {
      trace_out.flush();
      auto ckpt = state_checkpoint(state, epoch);
      for (const auto& [k, v] : options.header) ckpt.header[k] = v;
      ckpt.header["epoch_mean_loss"] = fields::format_double(mean_loss);
      if (!std::isnan(metric)) ckpt.header["selection_metric"] = fields::format_double(metric);
      const auto path = dir / epoch_filename(epoch);
      diffcore::write_checkpoint(path, ckpt);
      result.checkpoints.push_back(path);
      if (improved) point_best(dir, epoch);
    }
    if (options.on_epoch) options.on_epoch(epoch, mean_loss, metric);
  }
  result.final_query = state.query.clone();
  result.best_query = std::move(best_query);
  return result;
}

std::string to_string(GenericInitKind kind) { return kind == GenericInitKind::kRandom ? "random" : "supervised"; }

GenericInitKind parse_generic_init_kind(const std::string& text) {
  if (text == "random") return GenericInitKind::kRandom;
  if (text == "supervised") return GenericInitKind::kSupervised;
  throw std::invalid_argument("unknown generic init '" + text + "' (expected random|supervised)");
}

namespace {

// Oriented sinusoidal grating; label 1 for near-horizontal stripes, 0 for near-vertical.
Tensor grating(std::size_t size, bool horizontal, Rng& rng) {
  const double jitter = rng.uniform(-15.0, 15.0) * std::numbers::pi / 180.0;
  const double theta = (horizontal ? std::numbers::pi / 2.0 : 0.0) + jitter;
  const double freq = rng.uniform(2.0, 6.0);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double contrast = rng.uniform(0.15, 0.35);
  const double s = static_cast<double>(size);
  std::vector<float> v(size * size);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double u = static_cast<double>(x) * std::cos(theta) + static_cast<double>(y) * std::sin(theta);
      const double val = 0.5 + contrast * std::cos(2.0 * std::numbers::pi * freq * u / s + phase) + 0.05 * rng.normal();
      v[y * size + x] = static_cast<float>(std::clamp(val, 0.0, 1.0));
    }
  }
  return Tensor({1, size, size}, std::move(v));
}

}  // namespace

ParamSet generic_init(const EncoderSpec& encoder, const GenericInitConfig& config) {
  auto params = diffcore::init_encoder<float>(encoder, derive_seed(config.seed, {0x696e6974ULL}));
  if (config.kind == GenericInitKind::kRandom) return params;
  if (config.supervised_batch == 0) throw std::invalid_argument("generic init: supervised_batch must be >= 1");
  auto backbone = params.with_prefix(diffcore::kBackbonePrefix);
  auto classifier = diffcore::init_classifier<float>(encoder.backbone_width(), derive_seed(config.seed, {0x636c73ULL}));
  ParamSet trainable;
  for (auto& [name, t] : backbone) trainable.add(name, t);
  for (auto& [name, t] : classifier) trainable.add(name, t);
  trainable.set_requires_grad(true);
  diffcore::SgdState opt;
  opt.config = {config.supervised_lr, 0.9, 1e-4};
  diffcore::ScheduleSpec sched{diffcore::ScheduleKind::kCosine, config.supervised_lr, config.supervised_steps, {}, 0.1};
  Rng rng(derive_seed(config.seed, {0x67726174ULL}));
  for (std::size_t step = 0; step < config.supervised_steps; ++step) {
    std::vector<Tensor> batch;
    std::vector<std::uint8_t> labels;
    for (std::size_t i = 0; i < config.supervised_batch; ++i) {
      const bool horizontal = rng.bernoulli(0.5);
      batch.push_back(grating(encoder.input_size, horizontal, rng));
      labels.push_back(horizontal ? 1 : 0);
    }
    trainable.zero_grad();
    const auto feats = diffcore::backbone_features(backbone, encoder, augment::stack(batch));
    auto loss = diffcore::bce_with_logits(diffcore::classify(classifier, feats), labels);
    loss.backward();
    opt.config.learning_rate = diffcore::lr_at(sched, step);
    diffcore::sgd_step(trainable, opt);
  }
  params.set_requires_grad(false);
  return params;
}

}  // namespace mococxr::moco
