#include "mococxr/diffcore/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace mococxr::diffcore {

template <class T>
void sgd_step(BasicParamSet<T>& params, BasicSgdState<T>& state) {
  for (const auto& [name, p] : params) {
    if (!p.has_grad()) throw std::logic_error("sgd_step: parameter '" + name + "' has no populated gradient");
  }
  const T lr = static_cast<T>(state.config.learning_rate);
  const T mu = static_cast<T>(state.config.momentum);
  const T wd = static_cast<T>(state.config.weight_decay);
  for (auto& [name, p] : params) {
    auto theta = p.values_mut();
    auto grad = p.grad();
    auto& v = state.velocity[name];
    if (v.size() != theta.size()) v.assign(theta.size(), T{0});
    for (std::size_t i = 0; i < theta.size(); ++i) {
      v[i] = mu * v[i] + grad[i] + wd * theta[i];
      theta[i] -= lr * v[i];
    }
  }
}

template void sgd_step(BasicParamSet<float>&, BasicSgdState<float>&);
template void sgd_step(BasicParamSet<double>&, BasicSgdState<double>&);

std::string to_string(ScheduleKind kind) { return kind == ScheduleKind::kCosine ? "cosine" : "milestone"; }

ScheduleKind parse_schedule_kind(const std::string& text) {
  if (text == "cosine") return ScheduleKind::kCosine;
  if (text == "milestone") return ScheduleKind::kMilestone;
  throw std::invalid_argument("unknown schedule kind '" + text + "' (expected cosine|milestone)");
}

double lr_at(const ScheduleSpec& schedule, std::size_t step) {
  if (step > schedule.total_steps) {
    throw std::out_of_range("lr_at: step " + std::to_string(step) + " beyond schedule length " +
                            std::to_string(schedule.total_steps));
  }
  if (schedule.kind == ScheduleKind::kCosine) {
    if (schedule.total_steps == 0) return schedule.base_lr;
    const double frac = static_cast<double>(step) / static_cast<double>(schedule.total_steps);
    return schedule.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
  }
  if (!(schedule.gamma >= 0.0 && schedule.gamma <= 1.0)) {
    throw std::invalid_argument("lr_at: milestone gamma must lie in [0,1]");
  }
  double lr = schedule.base_lr;
  for (auto m : schedule.milestones) {
    if (m <= step) lr *= schedule.gamma;
  }
  return lr;
}

}  // namespace mococxr::diffcore
