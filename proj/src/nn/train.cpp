#include "ur3/nn/train.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace ur3::nn {

void TrainSchedule::validate() const {
  if (!(initial_lr > final_lr && final_lr > 0))
    throw std::invalid_argument("TrainSchedule: need initial_lr > final_lr > 0");
  if (warm_iters < 0 || total_iters < warm_iters)
    throw std::invalid_argument("TrainSchedule: need 0 <= warm_iters <= total_iters");
  if (batch_size < 1) throw std::invalid_argument("TrainSchedule: batch_size must be >= 1");
  if (checkpoint_every < 0) throw std::invalid_argument("TrainSchedule: checkpoint_every < 0");
}

double lr_at(const TrainSchedule& s, int64_t iter) {
  s.validate();
  if (iter < 0 || iter > s.total_iters)
    throw std::out_of_range("lr_at: iteration " + std::to_string(iter) + " outside [0, " +
                            std::to_string(s.total_iters) + "]");
  if (iter < s.warm_iters) return s.initial_lr;
  const int64_t span = s.total_iters - s.warm_iters;
  if (span == 0) return s.final_lr;
  const double progress = static_cast<double>(iter - s.warm_iters) / static_cast<double>(span);
  return s.final_lr +
         0.5 * (s.initial_lr - s.final_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

nlohmann::json to_json(const TrainSchedule& s) {
  return {{"initial_lr", s.initial_lr},   {"final_lr", s.final_lr},
          {"warm_iters", s.warm_iters},   {"total_iters", s.total_iters},
          {"batch_size", s.batch_size},   {"seed", s.seed},
          {"weight_decay", s.weight_decay}, {"checkpoint_every", s.checkpoint_every},
          {"checkpoint_path", s.checkpoint_path.string()}};
}

TrainSchedule train_schedule_from_json(const nlohmann::json& j, TrainSchedule s) {
  s.initial_lr = j.value("initial_lr", s.initial_lr);
  s.final_lr = j.value("final_lr", s.final_lr);
  s.warm_iters = j.value("warm_iters", s.warm_iters);
  s.total_iters = j.value("total_iters", s.total_iters);
  s.batch_size = j.value("batch_size", s.batch_size);
  s.seed = j.value("seed", s.seed);
  s.weight_decay = j.value("weight_decay", s.weight_decay);
  s.checkpoint_every = j.value("checkpoint_every", s.checkpoint_every);
  if (j.contains("checkpoint_path")) s.checkpoint_path = j["checkpoint_path"].get<std::string>();
  s.validate();
  return s;
}

}  // namespace ur3::nn
