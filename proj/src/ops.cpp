#include "sta/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace sta {

namespace {

thread_local std::uint64_t g_macs = 0;

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

void require_2d(const Tensor& t, const char* op) {
  require(t.ndim() == 2, std::string(op) + ": expected a 2-D tensor, got " + t.shape_str());
}

// C += A * B, row-major, i-k-j order.
void mm_acc(double* c, const double* a, const double* b, int p, int q, int r) {
  for (int i = 0; i < p; ++i) {
    const double* ar = a + static_cast<std::size_t>(i) * q;
    double* cr = c + static_cast<std::size_t>(i) * r;
    for (int k = 0; k < q; ++k) {
      const double av = ar[k];
      if (av == 0.0) continue;
      const double* br = b + static_cast<std::size_t>(k) * r;
      for (int j = 0; j < r; ++j) cr[j] += av * br[j];
    }
  }
}

// C += A * B^T  (A [p x q], B [r x q]).
void mm_nt_acc(double* c, const double* a, const double* b, int p, int q, int r) {
  for (int i = 0; i < p; ++i) {
    const double* ar = a + static_cast<std::size_t>(i) * q;
    double* cr = c + static_cast<std::size_t>(i) * r;
    for (int j = 0; j < r; ++j) {
      const double* br = b + static_cast<std::size_t>(j) * q;
      double acc = 0.0;
      for (int k = 0; k < q; ++k) acc += ar[k] * br[k];
      cr[j] += acc;
    }
  }
}

// C += A^T * B  (A [q x p], B [q x r]).
void mm_tn_acc(double* c, const double* a, const double* b, int p, int q, int r) {
  for (int k = 0; k < q; ++k) {
    const double* ar = a + static_cast<std::size_t>(k) * p;
    const double* br = b + static_cast<std::size_t>(k) * r;
    for (int i = 0; i < p; ++i) {
      const double av = ar[i];
      if (av == 0.0) continue;
      double* cr = c + static_cast<std::size_t>(i) * r;
      for (int j = 0; j < r; ++j) cr[j] += av * br[j];
    }
  }
}

}  // namespace

std::uint64_t mac_count() { return g_macs; }
void reset_mac_count() { g_macs = 0; }

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  require(a.dim(1) == b.dim(0), "matmul: inner dimensions disagree, " +
                                    a.shape_str() + " vs " + b.shape_str());
  const int p = a.dim(0), q = a.dim(1), r = b.dim(1);
  Tensor out = Tensor::zeros({p, r});
  mm_acc(out.ptr(), a.ptr(), b.ptr(), p, q, r);
  g_macs += static_cast<std::uint64_t>(p) * q * r;

  const bool ga = track_grad(a), gb = track_grad(b);
  if (ga || gb) {
    out.set_requires_grad(true);
    auto ad = a.data_handle(), bd = b.data_handle(), og = out.grad_handle();
    auto ag = ga ? a.grad_handle() : nullptr;
    auto bg = gb ? b.grad_handle() : nullptr;
    Tape::active().record(out, [=]() {
      if (ag) mm_nt_acc(ag->data(), og->data(), bd->data(), p, r, q);
      if (bg) mm_tn_acc(bg->data(), ad->data(), og->data(), q, p, r);
    });
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul_nt");
  require_2d(b, "matmul_nt");
  require(a.dim(1) == b.dim(1), "matmul_nt: inner dimensions disagree, " +
                                    a.shape_str() + " vs " + b.shape_str());
  const int p = a.dim(0), q = a.dim(1), r = b.dim(0);
  Tensor out = Tensor::zeros({p, r});
  mm_nt_acc(out.ptr(), a.ptr(), b.ptr(), p, q, r);
  g_macs += static_cast<std::uint64_t>(p) * q * r;

  const bool ga = track_grad(a), gb = track_grad(b);
  if (ga || gb) {
    out.set_requires_grad(true);
    auto ad = a.data_handle(), bd = b.data_handle(), og = out.grad_handle();
    auto ag = ga ? a.grad_handle() : nullptr;
    auto bg = gb ? b.grad_handle() : nullptr;
    Tape::active().record(out, [=]() {
      // C = A B^T:  dA += dC B,  dB += dC^T A.
      if (ag) mm_acc(ag->data(), og->data(), bd->data(), p, r, q);
      if (bg) mm_tn_acc(bg->data(), og->data(), ad->data(), r, p, q);
    });
  }
  return out;
}

namespace {

template <typename Fwd, typename Bwd>
Tensor elementwise_binary(const Tensor& a, const Tensor& b, const char* name,
                          Fwd fwd, Bwd bwd) {
  require(a.shape() == b.shape(), std::string(name) + ": shape mismatch, " +
                                      a.shape_str() + " vs " + b.shape_str());
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) {
    out.values()[i] = fwd(a.values()[i], b.values()[i]);
  }
  const bool ga = track_grad(a), gb = track_grad(b);
  if (ga || gb) {
    out.set_requires_grad(true);
    auto ad = a.data_handle(), bd = b.data_handle(), og = out.grad_handle();
    auto ag = ga ? a.grad_handle() : nullptr;
    auto bg = gb ? b.grad_handle() : nullptr;
    Tape::active().record(out, [=]() {
      for (std::size_t i = 0; i < n; ++i) {
        bwd((*og)[i], (*ad)[i], (*bd)[i], ag ? &(*ag)[i] : nullptr,
            bg ? &(*bg)[i] : nullptr);
      }
    });
  }
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double g, double, double, double* da, double* db) {
        if (da) *da += g;
        if (db) *db += g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double g, double, double, double* da, double* db) {
        if (da) *da += g;
        if (db) *db -= g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return elementwise_binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double g, double x, double y, double* da, double* db) {
        if (da) *da += g * y;
        if (db) *db += g * x;
      });
}

Tensor scale(const Tensor& a, double s) {
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] * s;
  if (track_grad(a)) {
    out.set_requires_grad(true);
    auto ag = a.grad_handle(), og = out.grad_handle();
    Tape::active().record(out, [=]() {
      for (std::size_t i = 0; i < n; ++i) (*ag)[i] += (*og)[i] * s;
    });
  }
  return out;
}

Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  require_2d(x, "add_rowvec");
  const int r = x.dim(0), c = x.dim(1);
  require(static_cast<int>(v.numel()) == c,
          "add_rowvec: vector length " + v.shape_str() + " does not match row width " +
              std::to_string(c));
  Tensor out = Tensor::zeros({r, c});
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < c; ++j) out.at(i, j) = x.at(i, j) + v.values()[static_cast<std::size_t>(j)];
  }
  const bool gx = track_grad(x), gv = track_grad(v);
  if (gx || gv) {
    out.set_requires_grad(true);
    auto og = out.grad_handle();
    auto xg = gx ? x.grad_handle() : nullptr;
    auto vg = gv ? v.grad_handle() : nullptr;
    Tape::active().record(out, [=]() {
      for (int i = 0; i < r; ++i) {
        for (int j = 0; j < c; ++j) {
          const double g = (*og)[static_cast<std::size_t>(i) * c + j];
          if (xg) (*xg)[static_cast<std::size_t>(i) * c + j] += g;
          if (vg) (*vg)[static_cast<std::size_t>(j)] += g;
        }
      }
    });
  }
  return out;
}

Tensor row_scale(const Tensor& x, const Tensor& s) {
  require_2d(x, "row_scale");
  const int r = x.dim(0), c = x.dim(1);
  require(static_cast<int>(s.numel()) == r,
          "row_scale: scale length " + s.shape_str() + " does not match row count " +
              std::to_string(r));
  Tensor out = Tensor::zeros({r, c});
  for (int i = 0; i < r; ++i) {
    const double w = s.values()[static_cast<std::size_t>(i)];
    for (int j = 0; j < c; ++j) out.at(i, j) = x.at(i, j) * w;
  }
  const bool gx = track_grad(x), gs = track_grad(s);
  if (gx || gs) {
    out.set_requires_grad(true);
    auto xd = x.data_handle(), sd = s.data_handle(), og = out.grad_handle();
    auto xg = gx ? x.grad_handle() : nullptr;
    auto sg = gs ? s.grad_handle() : nullptr;
    Tape::active().record(out, [=]() {
      for (int i = 0; i < r; ++i) {
        const double w = (*sd)[static_cast<std::size_t>(i)];
        for (int j = 0; j < c; ++j) {
          const std::size_t idx = static_cast<std::size_t>(i) * c + j;
          const double g = (*og)[idx];
          if (xg) (*xg)[idx] += g * w;
          if (sg) (*sg)[static_cast<std::size_t>(i)] += g * (*xd)[idx];
        }
      }
    });
  }
  return out;
}

Tensor sum_all(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  Tensor out = Tensor::scalar(acc);
  if (track_grad(x)) {
    out.set_requires_grad(true);
    auto xg = x.grad_handle(), og = out.grad_handle();
    const std::size_t n = x.numel();
    Tape::active().record(out, [=]() {
      const double g = (*og)[0];
      for (std::size_t i = 0; i < n; ++i) (*xg)[i] += g;
    });
  }
  return out;
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  require(lo <= hi, "clamp: lo exceeds hi");
  Tensor out = Tensor::zeros(x.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) {
    out.values()[i] = std::min(std::max(x.values()[i], lo), hi);
  }
  if (track_grad(x)) {
    out.set_requires_grad(true);
    auto xd = x.data_handle(), xg = x.grad_handle(), og = out.grad_handle();
    Tape::active().record(out, [=]() {
      for (std::size_t i = 0; i < n; ++i) {
        const double v = (*xd)[i];
        if (v >= lo && v <= hi) (*xg)[i] += (*og)[i];
      }
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& x, int r0, int r1) {
  require_2d(x, "slice_rows");
  const int r = x.dim(0), c = x.dim(1);
  require(0 <= r0 && r0 < r1 && r1 <= r, "slice_rows: bad range [" + std::to_string(r0) +
                                             ", " + std::to_string(r1) + ") for " + x.shape_str());
  const int rows = r1 - r0;
  Tensor out = Tensor::zeros({rows, c});
  std::copy_n(x.ptr() + static_cast<std::size_t>(r0) * c, static_cast<std::size_t>(rows) * c,
              out.ptr());
  if (track_grad(x)) {
    out.set_requires_grad(true);
    auto xg = x.grad_handle(), og = out.grad_handle();
    Tape::active().record(out, [=]() {
      for (std::size_t i = 0; i < static_cast<std::size_t>(rows) * c; ++i) {
        (*xg)[static_cast<std::size_t>(r0) * c + i] += (*og)[i];
      }
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& x, int c0, int c1) {
  require_2d(x, "slice_cols");
  const int r = x.dim(0), c = x.dim(1);
  require(0 <= c0 && c0 < c1 && c1 <= c, "slice_cols: bad range [" + std::to_string(c0) +
                                             ", " + std::to_string(c1) + ") for " + x.shape_str());
  const int cols = c1 - c0;
  Tensor out = Tensor::zeros({r, cols});
  for (int i = 0; i < r; ++i) {
    std::copy_n(x.ptr() + static_cast<std::size_t>(i) * c + c0, cols,
                out.ptr() + static_cast<std::size_t>(i) * cols);
  }
  if (track_grad(x)) {
    out.set_requires_grad(true);
    auto xg = x.grad_handle(), og = out.grad_handle();
    Tape::active().record(out, [=]() {
      for (int i = 0; i < r; ++i) {
        for (int j = 0; j < cols; ++j) {
          (*xg)[static_cast<std::size_t>(i) * c + c0 + j] +=
              (*og)[static_cast<std::size_t>(i) * cols + j];
        }
      }
    });
  }
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_rows: no parts");
  const int c = parts[0].dim(1);
  int rows = 0;
  bool any_grad = false;
  for (const Tensor& p : parts) {
    require_2d(p, "concat_rows");
    require(p.dim(1) == c, "concat_rows: column mismatch, " + p.shape_str());
    rows += p.dim(0);
    any_grad = any_grad || track_grad(p);
  }
  Tensor out = Tensor::zeros({rows, c});
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    std::copy_n(p.ptr(), p.numel(), out.ptr() + off);
    off += p.numel();
  }
  if (any_grad) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<std::vector<double>>> grads;
    std::vector<std::size_t> sizes;
    for (const Tensor& p : parts) {
      grads.push_back(track_grad(p) ? p.grad_handle() : nullptr);
      sizes.push_back(p.numel());
    }
    auto og = out.grad_handle();
    Tape::active().record(out, [=]() {
      std::size_t o = 0;
      for (std::size_t pi = 0; pi < grads.size(); ++pi) {
        if (grads[pi]) {
          for (std::size_t i = 0; i < sizes[pi]; ++i) (*grads[pi])[i] += (*og)[o + i];
        }
        o += sizes[pi];
      }
    });
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_cols: no parts");
  const int r = parts[0].dim(0);
  int cols = 0;
  bool any_grad = false;
  for (const Tensor& p : parts) {
    require_2d(p, "concat_cols");
    require(p.dim(0) == r, "concat_cols: row mismatch, " + p.shape_str());
    cols += p.dim(1);
    any_grad = any_grad || track_grad(p);
  }
  Tensor out = Tensor::zeros({r, cols});
  int coff = 0;
  for (const Tensor& p : parts) {
    const int pc = p.dim(1);
    for (int i = 0; i < r; ++i) {
      std::copy_n(p.ptr() + static_cast<std::size_t>(i) * pc, pc,
                  out.ptr() + static_cast<std::size_t>(i) * cols + coff);
    }
    coff += pc;
  }
  if (any_grad) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<std::vector<double>>> grads;
    std::vector<int> widths;
    for (const Tensor& p : parts) {
      grads.push_back(track_grad(p) ? p.grad_handle() : nullptr);
      widths.push_back(p.dim(1));
    }
    auto og = out.grad_handle();
    Tape::active().record(out, [=]() {
      int co = 0;
      for (std::size_t pi = 0; pi < grads.size(); ++pi) {
        const int pc = widths[pi];
        if (grads[pi]) {
          for (int i = 0; i < r; ++i) {
            for (int j = 0; j < pc; ++j) {
              (*grads[pi])[static_cast<std::size_t>(i) * pc + j] +=
                  (*og)[static_cast<std::size_t>(i) * cols + co + j];
            }
          }
        }
        co += pc;
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, std::vector<int> shape) {
  Tensor out = Tensor::zeros(shape);
  require(out.numel() == x.numel(), "reshape: element count mismatch, " + x.shape_str() +
                                        " -> " + out.shape_str());
  std::copy_n(x.ptr(), x.numel(), out.ptr());
  if (track_grad(x)) {
    out.set_requires_grad(true);
    auto xg = x.grad_handle(), og = out.grad_handle();
    const std::size_t n = x.numel();
    Tape::active().record(out, [=]() {
      for (std::size_t i = 0; i < n; ++i) (*xg)[i] += (*og)[i];
    });
  }
  return out;
}

Tensor softmax_rows(const Tensor& x) {
  require_2d(x, "softmax_rows");
  const int r = x.dim(0), c = x.dim(1);
  require(c >= 1, "softmax_rows: empty row dimension in " + x.shape_str());
  Tensor out = Tensor::zeros({r, c});
  for (int i = 0; i < r; ++i) {
    double mx = x.at(i, 0);
    for (int j = 1; j < c; ++j) mx = std::max(mx, x.at(i, j));
    double s = 0.0;
    for (int j = 0; j < c; ++j) {
      const double e = std::exp(x.at(i, j) - mx);
      out.at(i, j) = e;
      s += e;
    }
    const double inv = 1.0 / s;
    for (int j = 0; j < c; ++j) out.at(i, j) *= inv;
  }
  if (track_grad(x)) {
    out.set_requires_grad(true);
    auto od = out.data_handle(), og = out.grad_handle(), xg = x.grad_handle();
    Tape::active().record(out, [=]() {
      for (int i = 0; i < r; ++i) {
        const double* y = od->data() + static_cast<std::size_t>(i) * c;
        const double* gy = og->data() + static_cast<std::size_t>(i) * c;
        double dot = 0.0;
        for (int j = 0; j < c; ++j) dot += gy[j] * y[j];
        double* gx = xg->data() + static_cast<std::size_t>(i) * c;
        for (int j = 0; j < c; ++j) gx[j] += y[j] * (gy[j] - dot);
      }
    });
  }
  return out;
}

Tensor rmsnorm(const Tensor& x, const Tensor& gain) {
  constexpr double kEps = 1e-6;
  const int d = x.shape().back();
  require(static_cast<int>(gain.numel()) == d,
          "rmsnorm: gain length " + gain.shape_str() + " does not match trailing extent " +
              std::to_string(d));
  const std::size_t slices = x.numel() / static_cast<std::size_t>(d);
  Tensor out = Tensor::zeros(x.shape());
  std::vector<double> inv_rms(slices);
  for (std::size_t s = 0; s < slices; ++s) {
    const double* xv = x.ptr() + s * d;
    double ms = 0.0;
    for (int j = 0; j < d; ++j) ms += xv[j] * xv[j];
    ms = ms / d + kEps;
    const double inv = 1.0 / std::sqrt(ms);
    inv_rms[s] = inv;
    double* ov = out.ptr() + s * d;
    for (int j = 0; j < d; ++j) ov[j] = xv[j] * inv * gain.values()[static_cast<std::size_t>(j)];
  }
  const bool gx = track_grad(x), gg = track_grad(gain);
  if (gx || gg) {
    out.set_requires_grad(true);
    auto xd = x.data_handle(), gd = gain.data_handle(), og = out.grad_handle();
    auto xg = gx ? x.grad_handle() : nullptr;
    auto ggr = gg ? gain.grad_handle() : nullptr;
    Tape::active().record(out, [=]() {
      for (std::size_t s = 0; s < slices; ++s) {
        const double* xv = xd->data() + s * d;
        const double* gy = og->data() + s * d;
        const double inv = inv_rms[s];
        if (xg) {
          // dx_j = g_j gy_j inv - (sum_i gy_i g_i x_i) x_j inv^3 / d
          double acc = 0.0;
          for (int j = 0; j < d; ++j) acc += gy[j] * (*gd)[static_cast<std::size_t>(j)] * xv[j];
          acc = acc * inv * inv * inv / d;
          double* gxv = xg->data() + s * d;
          for (int j = 0; j < d; ++j) {
            gxv[j] += gy[j] * (*gd)[static_cast<std::size_t>(j)] * inv - acc * xv[j];
          }
        }
        if (ggr) {
          for (int j = 0; j < d; ++j) (*ggr)[static_cast<std::size_t>(j)] += gy[j] * xv[j] * inv;
        }
      }
    });
  }
  return out;
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Tensor gelu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const std::size_t n = out.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const double v = x.values()[i];
    const double u = kGeluC * (v + kGeluA * v * v * v);
    out.values()[i] = 0.5 * v * (1.0 + std::tanh(u));
  }
  if (track_grad(x)) {
    out.set_requires_grad(true);
    auto xd = x.data_handle(), xg = x.grad_handle(), og = out.grad_handle();
    Tape::active().record(out, [=]() {
      for (std::size_t i = 0; i < n; ++i) {
        const double v = (*xd)[i];
        const double u = kGeluC * (v + kGeluA * v * v * v);
        const double t = std::tanh(u);
        const double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
        const double dy = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
        (*xg)[i] += (*og)[i] * dy;
      }
    });
  }
  return out;
}

namespace {

void conv2d_forward(double* out, const double* in, const double* ker, int c_in, int h, int w,
                    int c_out, int stride, int ho, int wo) {
  for (int oc = 0; oc < c_out; ++oc) {
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        double acc = 0.0;
        for (int ic = 0; ic < c_in; ++ic) {
          const double* ip = in + (static_cast<std::size_t>(ic) * h) * w;
          const double* kp = ker + ((static_cast<std::size_t>(oc) * c_in + ic) * 3) * 3;
          for (int ky = 0; ky < 3; ++ky) {
            const int iy = oy * stride + ky - 1;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const int ix = ox * stride + kx - 1;
              if (ix < 0 || ix >= w) continue;
              acc += ip[static_cast<std::size_t>(iy) * w + ix] * kp[ky * 3 + kx];
            }
          }
        }
        out[(static_cast<std::size_t>(oc) * ho + oy) * wo + ox] = acc;
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernels, int stride) {
  require(input.ndim() == 3, "conv2d: input must be [c x h x w], got " + input.shape_str());
  require(kernels.ndim() == 4 && kernels.dim(2) == 3 && kernels.dim(3) == 3,
          "conv2d: kernels must be [c_out x c_in x 3 x 3], got " + kernels.shape_str());
  require(kernels.dim(1) == input.dim(0),
          "conv2d: kernel channels " + kernels.shape_str() + " do not match input " +
              input.shape_str());
  require(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2");
  const int c_in = input.dim(0), h = input.dim(1), w = input.dim(2);
  require(h >= 3 && w >= 3, "conv2d: spatial extents must be >= 3, got " + input.shape_str());
  const int c_out = kernels.dim(0);
  const int ho = (h - 1) / stride + 1;
  const int wo = (w - 1) / stride + 1;
  Tensor out = Tensor::zeros({c_out, ho, wo});
  conv2d_forward(out.ptr(), input.ptr(), kernels.ptr(), c_in, h, w, c_out, stride, ho, wo);
  g_macs += static_cast<std::uint64_t>(c_out) * ho * wo * c_in * 9;

  const bool gi = track_grad(input), gk = track_grad(kernels);
  if (gi || gk) {
    out.set_requires_grad(true);
    auto ind = input.data_handle(), kd = kernels.data_handle(), og = out.grad_handle();
    auto ig = gi ? input.grad_handle() : nullptr;
    auto kg = gk ? kernels.grad_handle() : nullptr;
    Tape::active().record(out, [=]() {
      for (int oc = 0; oc < c_out; ++oc) {
        for (int oy = 0; oy < ho; ++oy) {
          for (int ox = 0; ox < wo; ++ox) {
            const double g = (*og)[(static_cast<std::size_t>(oc) * ho + oy) * wo + ox];
            if (g == 0.0) continue;
            for (int ic = 0; ic < c_in; ++ic) {
              const std::size_t ibase = static_cast<std::size_t>(ic) * h * w;
              const std::size_t kbase = (static_cast<std::size_t>(oc) * c_in + ic) * 9;
              for (int ky = 0; ky < 3; ++ky) {
                const int iy = oy * stride + ky - 1;
                if (iy < 0 || iy >= h) continue;
                for (int kx = 0; kx < 3; ++kx) {
                  const int ix = ox * stride + kx - 1;
                  if (ix < 0 || ix >= w) continue;
                  const std::size_t ii = ibase + static_cast<std::size_t>(iy) * w + ix;
                  const std::size_t ki = kbase + static_cast<std::size_t>(ky) * 3 + kx;
                  if (ig) (*ig)[ii] += g * (*kd)[ki];
                  if (kg) (*kg)[ki] += g * (*ind)[ii];
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  require(x.ndim() == 3, "add_channel_bias: input must be [c x h x w], got " + x.shape_str());
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  require(static_cast<int>(bias.numel()) == c,
          "add_channel_bias: bias length " + bias.shape_str() + " does not match channels " +
              std::to_string(c));
  Tensor out = Tensor::zeros(x.shape());
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int ch = 0; ch < c; ++ch) {
    const double b = bias.values()[static_cast<std::size_t>(ch)];
    for (std::size_t i = 0; i < plane; ++i) {
      out.values()[static_cast<std::size_t>(ch) * plane + i] =
          x.values()[static_cast<std::size_t>(ch) * plane + i] + b;
    }
  }
  const bool gx = track_grad(x), gb = track_grad(bias);
  if (gx || gb) {
    out.set_requires_grad(true);
    auto og = out.grad_handle();
    auto xg = gx ? x.grad_handle() : nullptr;
    auto bg = gb ? bias.grad_handle() : nullptr;
    Tape::active().record(out, [=]() {
      for (int ch = 0; ch < c; ++ch) {
        for (std::size_t i = 0; i < plane; ++i) {
          const double g = (*og)[static_cast<std::size_t>(ch) * plane + i];
          if (xg) (*xg)[static_cast<std::size_t>(ch) * plane + i] += g;
          if (bg) (*bg)[static_cast<std::size_t>(ch)] += g;
        }
      }
    });
  }
  return out;
}

}  // namespace sta
