#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "mococxr/diffcore/encoder.hpp"

namespace mococxr::diffcore {

struct SgdConfig {
  double learning_rate = 0.0;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

// Velocity buffers keyed by parameter name; created lazily on first step.
template <class T>
struct BasicSgdState {
  SgdConfig config;
  std::map<std::string, std::vector<T>> velocity;
};

using SgdState = BasicSgdState<float>;

// Coupled weight decay, applied in this order for every parameter:
//   v <- momentum * v + grad + weight_decay * theta
//   theta <- theta - learning_rate * v
// Throws std::logic_error if any parameter lacks a populated gradient.
template <class T>
void sgd_step(BasicParamSet<T>& params, BasicSgdState<T>& state);

enum class ScheduleKind { kCosine, kMilestone };

std::string to_string(ScheduleKind kind);
ScheduleKind parse_schedule_kind(const std::string& text);

struct ScheduleSpec {
  ScheduleKind kind = ScheduleKind::kCosine;
  double base_lr = 0.0;
  std::size_t total_steps = 0;
  std::vector<std::size_t> milestones;  // milestone kind only
  double gamma = 0.1;                   // milestone kind only
};

// cosine:    base_lr * 0.5 * (1 + cos(pi * step / total_steps))
// milestone: base_lr * gamma^(number of milestones <= step)
// Throws std::out_of_range when step > total_steps.
double lr_at(const ScheduleSpec& schedule, std::size_t step);

}  // namespace mococxr::diffcore
