#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "denseplan/errors.hpp"

namespace denseplan {

enum class ScheduleKind { Step, Cosine };

// Learning-rate schedule over integer epochs [0, total_epochs).
// Step: base_lr multiplied by `factor` once per milestone passed.
// Cosine: floor + (base_lr - floor)/2 * (cos(pi*t/T) + 1), i.e. with the
// defaults 0.1 at t=0, 0.05 at t=T/2, annealing smoothly toward the floor.
struct LrSchedule {
  ScheduleKind kind = ScheduleKind::Step;
  double base_lr = 0.1;
  int total_epochs = 100;
  std::vector<int> milestones;  // Step only
  double factor = 0.1;          // Step only
  double floor = 0.0;           // Cosine only

  static LrSchedule step_default(int epochs) {
    LrSchedule s;
    s.kind = ScheduleKind::Step;
    s.base_lr = 0.1;
    s.total_epochs = epochs;
    s.milestones = {epochs / 2, epochs * 3 / 4};
    s.factor = 0.1;
    return s;
  }

  static LrSchedule cosine_default(int epochs) {
    LrSchedule s;
    s.kind = ScheduleKind::Cosine;
    s.base_lr = 0.1;
    s.total_epochs = epochs;
    s.floor = 0.0;
    return s;
  }
};

inline double lr_at(const LrSchedule& s, int t) {
  if (t < 0 || t >= s.total_epochs) {
    throw RangeError("epoch " + std::to_string(t) + " outside [0, " +
                     std::to_string(s.total_epochs) + ")");
  }
  if (s.kind == ScheduleKind::Cosine) {
    const double pi = 3.14159265358979323846;
    return s.floor +
           (s.base_lr - s.floor) / 2.0 *
               (std::cos(pi * static_cast<double>(t) / s.total_epochs) + 1.0);
  }
  double lr = s.base_lr;
  for (int m : s.milestones) {
    if (t >= m) lr *= s.factor;
  }
  return lr;
}

}  // namespace denseplan
