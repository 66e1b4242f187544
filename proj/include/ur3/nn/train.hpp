#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>

#include <nlohmann/json.hpp>

namespace ur3::nn {

struct TrainSchedule {
  double initial_lr = 3e-4;
  double final_lr = 1e-6;
  int64_t warm_iters = 0;
  int64_t total_iters = 1000;
  int64_t batch_size = 4;
  std::uint64_t seed = 0;
  double weight_decay = 0.0;
  /// Checkpoint every K iterations when > 0 and a path is given.
  int64_t checkpoint_every = 0;
  std::filesystem::path checkpoint_path;

  void validate() const;
};

/// Constant `initial_lr` before `warm_iters`, then half-cosine down to `final_lr`.
double lr_at(const TrainSchedule& sched, int64_t iter);

/// Optional per-iteration callback: (iteration, loss, lr).
using TrainLog = std::function<void(int64_t, double, double)>;

nlohmann::json to_json(const TrainSchedule& s);
TrainSchedule train_schedule_from_json(const nlohmann::json& j, TrainSchedule base = {});

}  // namespace ur3::nn
