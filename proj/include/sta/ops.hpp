#pragma once

#include <cstdint>
#include <vector>

#include "sta/tensor.hpp"

namespace sta {

// Differentiable ops. Every op validates shapes, computes its forward value,
// and (when grads are being tracked) records a backward rule on the active
// tape. Dimension problems throw std::invalid_argument naming the shapes.

Tensor matmul(const Tensor& a, const Tensor& b);      // [p x q] * [q x r]
Tensor matmul_nt(const Tensor& a, const Tensor& b);   // [p x q] * [r x q]^T

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_rowvec(const Tensor& x, const Tensor& v);  // v broadcast to each row
Tensor row_scale(const Tensor& x, const Tensor& s);   // row i scaled by s[i]
Tensor sum_all(const Tensor& x);                      // -> scalar
Tensor clamp(const Tensor& x, double lo, double hi);

Tensor slice_rows(const Tensor& x, int r0, int r1);   // rows [r0, r1)
Tensor slice_cols(const Tensor& x, int c0, int c1);   // cols [c0, c1)
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor reshape(const Tensor& x, std::vector<int> shape);

// Row-wise softmax with max-subtraction; rows sum to 1.
Tensor softmax_rows(const Tensor& x);

// Trailing-dimension RMS normalization, y = x / sqrt(mean(x^2) + 1e-6) * gain.
Tensor rmsnorm(const Tensor& x, const Tensor& gain);

// Gaussian error linear unit, tanh approximation:
//   gelu(x) = 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
Tensor gelu(const Tensor& x);

// 3x3 cross-correlation with zero padding 1. input [c_in x h x w],
// kernels [c_out x c_in x 3 x 3], stride in {1, 2}; output spatial extent
// is ceil(h / stride) x ceil(w / stride).
Tensor conv2d(const Tensor& input, const Tensor& kernels, int stride);
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);  // x [c x h x w]

// Forward multiply-accumulate bookkeeping for matmul / matmul_nt / conv2d
// (conv counts padded taps). Exact integer counts, thread-local.
std::uint64_t mac_count();
void reset_mac_count();

}  // namespace sta
