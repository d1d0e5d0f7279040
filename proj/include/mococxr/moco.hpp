#pragma once

// Momentum-contrast pretraining: a query encoder trained by SGD, a key
// encoder that tracks it by exponential moving average, and a FIFO queue of
// past keys used as negatives in the InfoNCE loss.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mococxr/augment.hpp"
#include "mococxr/diffcore/checkpoint.hpp"
#include "mococxr/diffcore/encoder.hpp"
#include "mococxr/diffcore/optim.hpp"
#include "mococxr/diffcore/tensor.hpp"

namespace mococxr::moco {

using diffcore::EncoderSpec;
using diffcore::ParamSet;
using diffcore::Tensor;

struct MoCoConfig {
  double momentum = 0.999;
  double temperature = 0.2;
  std::size_t queue_size = 256;
  std::size_t feature_dim = 128;
  std::size_t batch_size = 16;
  std::size_t total_epochs = 10;
  // Schedule over all pretraining steps; milestones are given in epochs.
  diffcore::ScheduleKind schedule = diffcore::ScheduleKind::kCosine;
  double learning_rate = 1e-2;
  std::vector<std::size_t> milestone_epochs;
  double gamma = 0.1;
  double sgd_momentum = 0.9;
  double weight_decay = 1e-4;
  augment::AugmentSpec augment;
  std::uint64_t seed = 0;

  void validate() const;
  std::map<std::string, std::string> to_fields() const;
  static MoCoConfig from_fields(const std::map<std::string, std::string>& fields);

  diffcore::ScheduleSpec schedule_for(std::size_t steps_per_epoch) const;
};

template <class T>
struct BasicQueueState {
  diffcore::BasicTensor<T> keys;  // [K x d], unit-norm rows, never requires grad
  std::size_t pointer = 0;

  std::size_t size() const { return keys.dim(0); }
  std::size_t dim() const { return keys.dim(1); }
};

using QueueState = BasicQueueState<float>;

// Gaussian rows normalized to unit length.
template <class T>
BasicQueueState<T> init_queue(std::size_t queue_size, std::size_t feature_dim, std::uint64_t seed);

// Overwrites rows [pointer, pointer + N) and advances the pointer by N mod K.
// Throws if N > K, K % N != 0, the widths differ, or a row is not unit-norm.
template <class T>
void enqueue(BasicQueueState<T>& queue, const diffcore::BasicTensor<T>& new_keys);

// key <- m * key + (1 - m) * query, elementwise over every parameter.
template <class T>
void momentum_update(diffcore::BasicParamSet<T>& key, const diffcore::BasicParamSet<T>& query, double m);

// Mean over rows of -log softmax(logits)[0] where logits = [q.k_pos, q.queue_j] / tau.
// The positive keys and queue are treated as constants.
// Throws for tau <= 0 or any row whose norm deviates from 1 by more than 1e-3.
template <class T>
diffcore::BasicTensor<T> info_nce(const diffcore::BasicTensor<T>& q, const diffcore::BasicTensor<T>& k_pos,
                                  const BasicQueueState<T>& queue, double tau);

inline constexpr double kUnitNormTolerance = 1e-3;

struct MoCoState {
  EncoderSpec encoder;
  MoCoConfig config;
  ParamSet query;
  ParamSet key;
  QueueState queue;
  diffcore::SgdState optimizer;
  std::size_t step = 0;
};

// Query copy of `init` with gradients enabled, detached key copy, fresh queue.
MoCoState init_state(const EncoderSpec& encoder, const MoCoConfig& config, const ParamSet& init);

// One step in the fixed order: query forward, momentum update, key forward
// without recording, InfoNCE, backward and SGD on the query, enqueue.
// Returns the loss.
double pretrain_step(MoCoState& state, std::span<const augment::ViewPair> pairs, double learning_rate);

struct LossRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct PretrainOptions {
  std::filesystem::path output_dir;  // empty: nothing is written
  bool resume = false;
  // Higher is better. Evaluated on the query encoder after each epoch; when
  // absent the last epoch is selected.
  std::function<double(const ParamSet&)> selection_metric;
  // Extra header fields stored in every checkpoint (e.g. the init kind).
  std::map<std::string, std::string> header;
  std::function<void(std::size_t epoch, double mean_loss, double metric)> on_epoch;
};

struct PretrainResult {
  std::vector<LossRecord> trace;
  std::vector<double> epoch_mean_loss;
  std::vector<double> epoch_metric;
  std::size_t best_epoch = 0;  // 1-based
  std::vector<std::filesystem::path> checkpoints;
  ParamSet final_query;
  ParamSet best_query;
};

// images: resized to encoder.input_size. Steps per epoch = floor(n / N); each
// epoch shuffles with a stream derived from (seed, epoch).
// Files: epoch_XXX.ckpt, best.ckpt (symlink), loss_trace.csv.
PretrainResult pretrain(std::span<const Tensor> images, const EncoderSpec& encoder, const MoCoConfig& config,
                        const ParamSet& init, const PretrainOptions& options = {});

inline constexpr const char* kLossTraceHeader = "step,epoch,loss,lr";

// Full training state (query, key, queue, velocity, counters) in one checkpoint.
diffcore::Checkpoint state_checkpoint(const MoCoState& state, std::size_t epoch);
MoCoState restore_state(const diffcore::Checkpoint& ckpt);

// Encoder parameters (backbone.* and head.*) from any checkpoint this
// library writes.
struct EncoderCheckpoint {
  EncoderSpec spec;
  ParamSet params;
  std::map<std::string, std::string> header;
};
EncoderCheckpoint load_encoder(const std::filesystem::path& path);

enum class GenericInitKind { kRandom, kSupervised };
std::string to_string(GenericInitKind kind);
GenericInitKind parse_generic_init_kind(const std::string& text);

struct GenericInitConfig {
  GenericInitKind kind = GenericInitKind::kRandom;
  // Supervised variant: orientation classification of synthetic gratings,
  // a task unrelated to the lesion labels.
  std::size_t supervised_steps = 200;
  std::size_t supervised_batch = 16;
  double supervised_lr = 1e-2;
  std::uint64_t seed = 0;
};

ParamSet generic_init(const EncoderSpec& encoder, const GenericInitConfig& config);

}  // namespace mococxr::moco
