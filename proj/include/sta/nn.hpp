#pragma once

#include <random>
#include <string>
#include <vector>

#include "sta/ops.hpp"
#include "sta/tensor.hpp"

namespace sta {

Tensor normal_init(std::mt19937_64& rng, std::vector<int> shape, double stddev = 0.02);

// Named view of a learnable tensor; copies alias the same storage, so an
// optimizer stepping the list updates the owning module in place.
struct NamedParam {
  std::string name;
  Tensor value;
};
using ParamList = std::vector<NamedParam>;

struct Linear {
  Tensor w;  // [in x out]
  Tensor b;  // [out] when has_bias
  bool has_bias = false;

  static Linear create(std::mt19937_64& rng, int in, int out, bool bias,
                       double stddev = 0.02);
  // Zero weights: a residual branch ending here starts as the identity map.
  static Linear create_zero(int in, int out, bool bias);

  Tensor forward(const Tensor& x) const;
  void collect_params(const std::string& prefix, ParamList& out) const;
};

}  // namespace sta
