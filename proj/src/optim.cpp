#include "sta/optim.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace sta {

void adam_step(std::vector<Tensor>& params, AdamState& state) {
  if (state.first_moment.empty()) {
    state.first_moment.resize(params.size());
    state.second_moment.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.first_moment[i].assign(params[i].numel(), 0.0);
      state.second_moment[i].assign(params[i].numel(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw std::invalid_argument("adam_step: state tracks " +
                                std::to_string(state.first_moment.size()) +
                                " parameters, got " + std::to_string(params.size()));
  }
  state.step_count += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    if (!p.requires_grad()) {
      throw std::invalid_argument("adam_step: parameter " + std::to_string(i) +
                                  " has no gradient buffer");
    }
    if (state.first_moment[i].size() != p.numel()) {
      throw std::invalid_argument("adam_step: parameter " + std::to_string(i) +
                                  " changed size since the state was created");
    }
    const std::vector<double>& g = p.grad();
    std::vector<double>& m = state.first_moment[i];
    std::vector<double>& v = state.second_moment[i];
    for (std::size_t j = 0; j < p.numel(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p.values()[j] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

}  // namespace sta
