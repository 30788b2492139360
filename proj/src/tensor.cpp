#include "sta/tensor.hpp"

#include <numeric>
#include <stdexcept>

namespace sta {

thread_local bool GradMode::enabled_ = true;

namespace {
std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor: extents must be positive");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}
}  // namespace

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::make_shared<std::vector<double>>(shape_numel(t.shape_), 0.0);
  if (requires_grad) t.set_requires_grad(true);
  return t;
}

Tensor Tensor::full(std::vector<int> shape, double value) {
  Tensor t = zeros(std::move(shape));
  std::fill(t.data_->begin(), t.data_->end(), value);
  return t;
}

Tensor Tensor::from(std::vector<double> values, std::vector<int> shape,
                    bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw std::invalid_argument("tensor: data length does not match shape");
  }
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::make_shared<std::vector<double>>(std::move(values));
  if (requires_grad) t.set_requires_grad(true);
  return t;
}

Tensor Tensor::scalar(double value) { return from({value}, {1}); }

std::string Tensor::shape_str() const {
  std::string s;
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (i) s += " x ";
    s += std::to_string(shape_[i]);
  }
  return s.empty() ? "scalar" : s;
}

void Tensor::set_requires_grad(bool on) {
  requires_grad_ = on;
  if (on && !grad_) {
    grad_ = std::make_shared<std::vector<double>>(data_->size(), 0.0);
  }
}

void Tensor::zero_grad() {
  if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
}

Tape& Tape::active() {
  static thread_local Tape tape;
  return tape;
}

void Tape::record(const Tensor& output, std::function<void()> backward) {
  nodes_.push_back(Node{output.grad_handle(), std::move(backward)});
  outputs_.insert(output.storage_id());
}

bool Tape::produced(const Tensor& t) const {
  return outputs_.count(t.storage_id()) > 0;
}

void Tape::clear() {
  nodes_.clear();
  outputs_.clear();
}

void Tape::run_backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                loss.shape_str());
  }
  if (!produced(loss)) {
    throw std::invalid_argument(
        "backward: loss was not produced through the active tape");
  }
  // Intermediate grads are scratch state per sweep; leaves keep accumulating.
  for (Node& n : nodes_) {
    if (n.out_grad) std::fill(n.out_grad->begin(), n.out_grad->end(), 0.0);
  }
  (*loss.grad_handle())[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    it->backward();
  }
}

void backward(const Tensor& loss) { Tape::active().run_backward(loss); }

}  // namespace sta
