#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

namespace sta {

// Dense float64 tensor with reverse-mode autodiff. Values are immutable once
// their producing op has written them; differentiable ops append a backward
// rule to the active tape. Gradients live in a buffer parallel to the data.

class GradMode {
 public:
  static bool enabled() { return enabled_; }
  static void set_enabled(bool on) { enabled_ = on; }

 private:
  static thread_local bool enabled_;
};

// RAII switch for inference paths: no tape nodes, no grad buffers.
struct NoGradGuard {
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double value);
  static Tensor from(std::vector<double> values, std::vector<int> shape,
                     bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return static_cast<bool>(data_); }
  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::size_t numel() const { return data_ ? data_->size() : 0; }
  // "p x q" formatting for error messages.
  std::string shape_str() const;

  std::vector<double>& values() { return *data_; }
  const std::vector<double>& values() const { return *data_; }
  double* ptr() { return data_->data(); }
  const double* ptr() const { return data_->data(); }

  // 2-D accessors (row-major).
  double at(int r, int c) const { return (*data_)[static_cast<std::size_t>(r) * shape_.back() + c]; }
  double& at(int r, int c) { return (*data_)[static_cast<std::size_t>(r) * shape_.back() + c]; }

  bool requires_grad() const { return requires_grad_; }
  // Marks this tensor as a differentiation target and allocates its grad buffer.
  void set_requires_grad(bool on);
  bool has_grad() const { return static_cast<bool>(grad_); }
  std::vector<double>& grad() { return *grad_; }
  const std::vector<double>& grad() const { return *grad_; }
  void zero_grad();

  // Identity of the underlying storage; used by the tape to tell leaves from
  // produced values.
  const void* storage_id() const { return data_.get(); }

  // Storage-sharing handles, needed by backward rules.
  std::shared_ptr<std::vector<double>> data_handle() const { return data_; }
  std::shared_ptr<std::vector<double>> grad_handle() const { return grad_; }

 private:
  std::vector<int> shape_;
  std::shared_ptr<std::vector<double>> data_;
  std::shared_ptr<std::vector<double>> grad_;
  bool requires_grad_ = false;
};

// Ordered record of the ops of one forward pass. Node order is topological by
// construction (ops append as they execute), so a single reverse sweep
// propagates every gradient exactly once.
class Tape {
 public:
  static Tape& active();

  // Registers a produced tensor and the rule that pushes its output gradient
  // into its inputs' gradients.
  void record(const Tensor& output, std::function<void()> backward);

  bool produced(const Tensor& t) const;
  std::size_t size() const { return nodes_.size(); }
  void clear();

  // Seeds d(loss)/d(loss) = 1 and runs all backward rules in reverse order.
  // Intermediate gradients are reset first; leaf gradients accumulate across
  // repeated calls.
  void run_backward(const Tensor& loss);

 private:
  struct Node {
    std::shared_ptr<std::vector<double>> out_grad;
    std::function<void()> backward;
  };
  std::vector<Node> nodes_;
  std::unordered_set<const void*> outputs_;
};

// Backward entry point; `loss` must be a scalar produced through the active tape.
void backward(const Tensor& loss);

// True when the op executing now should be recorded for this input.
inline bool track_grad(const Tensor& t) {
  return GradMode::enabled() && t.requires_grad();
}

}  // namespace sta
