#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "sta/tensor.hpp"

namespace sta::testutil {

inline Tensor uniform(std::mt19937_64& rng, std::vector<int> shape, double lo = -1.0,
                      double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

// Largest absolute gradient discrepancy, normalized by the largest
// finite-difference gradient magnitude across all inputs.
inline double fd_rel_err(const std::function<Tensor(const std::vector<Tensor>&)>& loss_fn,
                         const std::vector<Tensor>& inputs, double step) {
  std::vector<Tensor> tracked;
  tracked.reserve(inputs.size());
  for (const Tensor& in : inputs) {
    tracked.push_back(Tensor::from(in.values(), in.shape(), true));
  }
  Tape::active().clear();
  Tensor loss = loss_fn(tracked);
  backward(loss);
  Tape::active().clear();

  double max_diff = 0.0, max_fd = 0.0;
  {
    NoGradGuard ng;
    std::vector<Tensor> probe;
    for (const Tensor& in : inputs) probe.push_back(Tensor::from(in.values(), in.shape()));
    for (std::size_t pi = 0; pi < probe.size(); ++pi) {
      for (std::size_t j = 0; j < probe[pi].numel(); ++j) {
        const double saved = probe[pi].values()[j];
        probe[pi].values()[j] = saved + step;
        const double up = loss_fn(probe).values()[0];
        probe[pi].values()[j] = saved - step;
        const double dn = loss_fn(probe).values()[0];
        probe[pi].values()[j] = saved;
        const double fd = (up - dn) / (2.0 * step);
        const double an = tracked[pi].grad()[j];
        max_diff = std::max(max_diff, std::abs(an - fd));
        max_fd = std::max(max_fd, std::abs(fd));
      }
    }
  }
  return max_diff / std::max(max_fd, 1e-12);
}

inline bool all_finite(const Tensor& t) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

// Regularized lower incomplete gamma P(a, x): series for x < a + 1, Lentz
// continued fraction otherwise. Accuracy far exceeds what a p-value gate at
// 0.01 needs.
inline double gamma_p(double a, double x) {
  if (x <= 0.0) return 0.0;
  const double lg = std::lgamma(a);
  if (x < a + 1.0) {
    double ap = a;
    double term = 1.0 / a;
    double sum = term;
    for (int i = 0; i < 1000; ++i) {
      ap += 1.0;
      term *= x / ap;
      sum += term;
      if (std::abs(term) < std::abs(sum) * 1e-15) break;
    }
    return sum * std::exp(-x + a * std::log(x) - lg);
  }
  double b = x + 1.0 - a;
  double c = 1e300;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i <= 1000; ++i) {
    const double an = -static_cast<double>(i) * (static_cast<double>(i) - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < 1e-300) d = 1e-300;
    c = b + an / c;
    if (std::abs(c) < 1e-300) c = 1e-300;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < 1e-15) break;
  }
  return 1.0 - std::exp(-x + a * std::log(x) - lg) * h;
}

// Upper-tail p-value of Pearson's chi-square statistic with df = bins - 1.
inline double chi_square_p(const std::vector<long>& observed,
                           const std::vector<double>& expected) {
  double chi2 = 0.0;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    const double diff = static_cast<double>(observed[i]) - expected[i];
    chi2 += diff * diff / expected[i];
  }
  const double df = static_cast<double>(observed.size()) - 1.0;
  return 1.0 - gamma_p(df / 2.0, chi2 / 2.0);
}

inline double chi_square_uniform_p(const std::vector<long>& observed) {
  double total = 0.0;
  for (long c : observed) total += static_cast<double>(c);
  const std::vector<double> expected(observed.size(),
                                     total / static_cast<double>(observed.size()));
  return chi_square_p(observed, expected);
}

}  // namespace sta::testutil
