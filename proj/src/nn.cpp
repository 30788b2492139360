#include "sta/nn.hpp"

namespace sta {

Tensor normal_init(std::mt19937_64& rng, std::vector<int> shape, double stddev) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

Linear Linear::create(std::mt19937_64& rng, int in, int out, bool bias, double stddev) {
  Linear l;
  l.w = normal_init(rng, {in, out}, stddev);
  l.has_bias = bias;
  if (bias) l.b = Tensor::zeros({out}, true);
  return l;
}

Linear Linear::create_zero(int in, int out, bool bias) {
  Linear l;
  l.w = Tensor::zeros({in, out}, true);
  l.has_bias = bias;
  if (bias) l.b = Tensor::zeros({out}, true);
  return l;
}

Tensor Linear::forward(const Tensor& x) const {
  Tensor y = matmul(x, w);
  return has_bias ? add_rowvec(y, b) : y;
}

void Linear::collect_params(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + ".w", w});
  if (has_bias) out.push_back({prefix + ".b", b});
}

}  // namespace sta
