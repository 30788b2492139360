#pragma once

#include <cstdint>
#include <vector>

#include "sta/tensor.hpp"

namespace sta {

// Adam with bias correction. Moment buffers are allocated lazily on the first
// step and must thereafter match the parameter list, element for element.
struct AdamState {
  double lr = 8e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step_count = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

// Applies one update in place from each parameter's attached gradient.
// Gradients are left untouched; callers zero them between steps.
void adam_step(std::vector<Tensor>& params, AdamState& state);

}  // namespace sta
