#include "longidiff/ops.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace longidiff {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

#ifndef NDEBUG
void debug_assert_finite(const Tensor& t, const char* op) {
  const int64_t n = t.numel();
  for (int64_t i = 0; i < n; ++i)
    if (!std::isfinite(t.at(i)))
      throw std::logic_error(std::string(op) + ": non-finite value produced");
}
#else
void debug_assert_finite(const Tensor&, const char*) {}
#endif

struct Dims5 {
  int64_t n, c, d, h, w;
  int64_t spatial() const { return d * h * w; }
};

Dims5 dims5(const Tensor& t, const char* who) {
  require(t.defined(), std::string(who) + ": undefined tensor");
  require(t.shape().size() == 5,
          std::string(who) + ": expected rank-5 NCDHW tensor, got " + shape_str(t.shape()));
  const Shape& s = t.shape();
  return {s[0], s[1], s[2], s[3], s[4]};
}

void check_same_type(const Tensor& a, const Tensor& b, const char* who) {
  require(a.stype() == b.stype(), std::string(who) + ": mixed scalar types");
}

bool wants_grad(std::initializer_list<const Tensor*> inputs) {
  if (!grad_enabled()) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

void attach(Tensor& out, const char* op, std::initializer_list<const Tensor*> inputs,
            std::function<void(TensorImpl&)> backprop) {
  auto node = std::make_shared<Node>();
  node->op = op;
  for (const Tensor* t : inputs) node->inputs.push_back(t->impl());
  node->backprop = std::move(backprop);
  out.impl()->requires_grad = true;
  out.impl()->grad_fn = std::move(node);
}

template <typename T>
T* grad_data(const std::shared_ptr<TensorImpl>& t) {
  return ensure_grad_buffer(*t).data<T>();
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

enum class EwKind { Add, Sub, Mul };

template <typename T>
void ew_forward(EwKind kind, const T* a, const T* b, T* y, int64_t n) {
  switch (kind) {
    case EwKind::Add:
      for (int64_t i = 0; i < n; ++i) y[i] = a[i] + b[i];
      break;
    case EwKind::Sub:
      for (int64_t i = 0; i < n; ++i) y[i] = a[i] - b[i];
      break;
    case EwKind::Mul:
      for (int64_t i = 0; i < n; ++i) y[i] = a[i] * b[i];
      break;
  }
}

Tensor ew_op(EwKind kind, const char* op, const Tensor& a, const Tensor& b) {
  require(a.defined() && b.defined(), std::string(op) + ": undefined tensor");
  check_same_type(a, b, op);
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                      shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor y = Tensor::zeros(a.shape());
  const int64_t n = a.numel();
  if (a.stype() == ScalarType::F32)
    ew_forward(kind, a.data<float>().data(), b.data<float>().data(),
               y.data_mut<float>().data(), n);
  else
    ew_forward(kind, a.data<double>().data(), b.data<double>().data(),
               y.data_mut<double>().data(), n);
  debug_assert_finite(y, op);

  if (wants_grad({&a, &b})) {
    auto ai = a.impl();
    auto bi = b.impl();
    attach(y, op, {&a, &b}, [kind, ai, bi, n](TensorImpl& out) {
      auto run = [&](auto tag) {
        using T = decltype(tag);
        const T* g = out.grad->data<T>();
        if (ai->requires_grad) {
          T* ga = grad_data<T>(ai);
          if (kind == EwKind::Mul) {
            const T* bv = bi->data<T>();
            for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * bv[i];
          } else {
            for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
          }
        }
        if (bi->requires_grad) {
          T* gb = grad_data<T>(bi);
          switch (kind) {
            case EwKind::Add:
              for (int64_t i = 0; i < n; ++i) gb[i] += g[i];
              break;
            case EwKind::Sub:
              for (int64_t i = 0; i < n; ++i) gb[i] -= g[i];
              break;
            case EwKind::Mul: {
              const T* av = ai->data<T>();
              for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * av[i];
              break;
            }
          }
        }
      };
      if (out.stype == ScalarType::F32)
        run(float{});
      else
        run(double{});
    });
  }
  return y;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return ew_op(EwKind::Add, "add", a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return ew_op(EwKind::Sub, "sub", a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return ew_op(EwKind::Mul, "mul", a, b); }

Tensor leaky_relu(const Tensor& x, double negative_slope) {
  require(x.defined(), "leaky_relu: undefined tensor");
  require(negative_slope >= 0.0, "leaky_relu: negative slope must be >= 0");
  Tensor y = Tensor::zeros(x.shape());
  const int64_t n = x.numel();
  auto fwd = [&](auto tag) {
    using T = decltype(tag);
    const T* xv = x.data<T>().data();
    T* yv = y.data_mut<T>().data();
    const T s = static_cast<T>(negative_slope);
    for (int64_t i = 0; i < n; ++i) yv[i] = xv[i] >= T(0) ? xv[i] : s * xv[i];
  };
  if (x.stype() == ScalarType::F32)
    fwd(float{});
  else
    fwd(double{});
  debug_assert_finite(y, __func__);

  if (wants_grad({&x})) {
    auto xi = x.impl();
    attach(y, "leaky_relu", {&x}, [xi, n, negative_slope](TensorImpl& out) {
      auto run = [&](auto tag) {
        using T = decltype(tag);
        const T* g = out.grad->data<T>();
        const T* xv = xi->data<T>();
        T* gx = grad_data<T>(xi);
        const T s = static_cast<T>(negative_slope);
        for (int64_t i = 0; i < n; ++i) gx[i] += xv[i] >= T(0) ? g[i] : s * g[i];
      };
      if (out.stype == ScalarType::F32)
        run(float{});
      else
        run(double{});
    });
  }
  return y;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  Dims5 da = dims5(a, "concat_channels");
  Dims5 db = dims5(b, "concat_channels");
  check_same_type(a, b, "concat_channels");
  require(da.n == db.n && da.d == db.d && da.h == db.h && da.w == db.w,
          "concat_channels: non-channel dims differ, " + shape_str(a.shape()) + " vs " +
              shape_str(b.shape()));
  Tensor y = Tensor::zeros({da.n, da.c + db.c, da.d, da.h, da.w});
  const int64_t sp = da.spatial();
  auto fwd = [&](auto tag) {
    using T = decltype(tag);
    const T* av = a.data<T>().data();
    const T* bv = b.data<T>().data();
    T* yv = y.data_mut<T>().data();
    for (int64_t n = 0; n < da.n; ++n) {
      std::memcpy(yv + (n * (da.c + db.c)) * sp, av + n * da.c * sp,
                  static_cast<size_t>(da.c * sp) * sizeof(T));
      std::memcpy(yv + (n * (da.c + db.c) + da.c) * sp, bv + n * db.c * sp,
                  static_cast<size_t>(db.c * sp) * sizeof(T));
    }
  };
  if (a.stype() == ScalarType::F32)
    fwd(float{});
  else
    fwd(double{});

  if (wants_grad({&a, &b})) {
    auto ai = a.impl();
    auto bi = b.impl();
    attach(y, "concat_channels", {&a, &b}, [ai, bi, da, db, sp](TensorImpl& out) {
      auto run = [&](auto tag) {
        using T = decltype(tag);
        const T* g = out.grad->data<T>();
        for (int64_t n = 0; n < da.n; ++n) {
          if (ai->requires_grad) {
            T* ga = grad_data<T>(ai);
            const T* gs = g + (n * (da.c + db.c)) * sp;
            T* gd = ga + n * da.c * sp;
            for (int64_t i = 0; i < da.c * sp; ++i) gd[i] += gs[i];
          }
          if (bi->requires_grad) {
            T* gb = grad_data<T>(bi);
            const T* gs = g + (n * (da.c + db.c) + da.c) * sp;
            T* gd = gb + n * db.c * sp;
            for (int64_t i = 0; i < db.c * sp; ++i) gd[i] += gs[i];
          }
        }
      };
      if (out.stype == ScalarType::F32)
        run(float{});
      else
        run(double{});
    });
  }
  return y;
}

Tensor softmax_channels(const Tensor& x) {
  Dims5 d = dims5(x, "softmax_channels");
  Tensor y = Tensor::zeros(x.shape());
  const int64_t sp = d.spatial();
  auto fwd = [&](auto tag) {
    using T = decltype(tag);
    const T* xv = x.data<T>().data();
    T* yv = y.data_mut<T>().data();
    for (int64_t n = 0; n < d.n; ++n) {
      const T* xs = xv + n * d.c * sp;
      T* ys = yv + n * d.c * sp;
      for (int64_t v = 0; v < sp; ++v) {
        T m = xs[v];
        for (int64_t c = 1; c < d.c; ++c) m = std::max(m, xs[c * sp + v]);
        T sum = T(0);
        for (int64_t c = 0; c < d.c; ++c) {
          T e = std::exp(xs[c * sp + v] - m);
          ys[c * sp + v] = e;
          sum += e;
        }
        const T inv = T(1) / sum;
        for (int64_t c = 0; c < d.c; ++c) ys[c * sp + v] *= inv;
      }
    }
  };
  if (x.stype() == ScalarType::F32)
    fwd(float{});
  else
    fwd(double{});
  debug_assert_finite(y, __func__);

  if (wants_grad({&x})) {
    auto xi = x.impl();
    attach(y, "softmax_channels", {&x}, [xi, d, sp](TensorImpl& out) {
      auto run = [&](auto tag) {
        using T = decltype(tag);
        const T* g = out.grad->data<T>();
        const T* p = out.data<T>();
        T* gx = grad_data<T>(xi);
        for (int64_t n = 0; n < d.n; ++n) {
          const int64_t base = n * d.c * sp;
          for (int64_t v = 0; v < sp; ++v) {
            T dot = T(0);
            for (int64_t c = 0; c < d.c; ++c) {
              const int64_t i = base + c * sp + v;
              dot += g[i] * p[i];
            }
            for (int64_t c = 0; c < d.c; ++c) {
              const int64_t i = base + c * sp + v;
              gx[i] += p[i] * (g[i] - dot);
            }
          }
        }
      };
      if (out.stype == ScalarType::F32)
        run(float{});
      else
        run(double{});
    });
  }
  return y;
}

Tensor sum_all(const Tensor& x) {
  require(x.defined(), "sum_all: undefined tensor");
  Tensor y = Tensor::zeros({1});
  const int64_t n = x.numel();
  if (x.stype() == ScalarType::F32) {
    const float* xv = x.data<float>().data();
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) acc += xv[i];
    y.set(0, acc);
  } else {
    const double* xv = x.data<double>().data();
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) acc += xv[i];
    y.set(0, acc);
  }

  if (wants_grad({&x})) {
    auto xi = x.impl();
    attach(y, "sum_all", {&x}, [xi, n](TensorImpl& out) {
      auto run = [&](auto tag) {
        using T = decltype(tag);
        const T g = out.grad->data<T>()[0];
        T* gx = grad_data<T>(xi);
        for (int64_t i = 0; i < n; ++i) gx[i] += g;
      };
      if (out.stype == ScalarType::F32)
        run(float{});
      else
        run(double{});
    });
  }
  return y;
}

Tensor instance_norm(const Tensor& x, double eps) {
  Dims5 d = dims5(x, "instance_norm");
  require(eps > 0.0, "instance_norm: eps must be positive");
  Tensor y = Tensor::zeros(x.shape());
  const int64_t sp = d.spatial();
  const int64_t slices = d.n * d.c;
  // Saved per-slice statistics for the backward pass.
  std::vector<double> means(static_cast<size_t>(slices));
  std::vector<double> inv_stds(static_cast<size_t>(slices));

  auto fwd = [&](auto tag) {
    using T = decltype(tag);
    const T* xv = x.data<T>().data();
    T* yv = y.data_mut<T>().data();
    for (int64_t s = 0; s < slices; ++s) {
      const T* xs = xv + s * sp;
      T* ys = yv + s * sp;
      double sum = 0.0;
      for (int64_t i = 0; i < sp; ++i) sum += xs[i];
      const double mean = sum / static_cast<double>(sp);
      double sq = 0.0;
      for (int64_t i = 0; i < sp; ++i) {
        const double c = xs[i] - mean;
        sq += c * c;
      }
      const double var = sq / static_cast<double>(sp);
      const double inv = 1.0 / std::sqrt(var + eps);
      means[static_cast<size_t>(s)] = mean;
      inv_stds[static_cast<size_t>(s)] = inv;
      const T tm = static_cast<T>(mean);
      const T ti = static_cast<T>(inv);
      for (int64_t i = 0; i < sp; ++i) ys[i] = (xs[i] - tm) * ti;
    }
  };
  if (x.stype() == ScalarType::F32)
    fwd(float{});
  else
    fwd(double{});
  debug_assert_finite(y, __func__);

  if (wants_grad({&x})) {
    auto xi = x.impl();
    attach(y, "instance_norm", {&x},
           [xi, sp, slices, means = std::move(means),
            inv_stds = std::move(inv_stds)](TensorImpl& out) {
             auto run = [&](auto tag) {
               using T = decltype(tag);
               const T* g = out.grad->data<T>();
               const T* xv = xi->data<T>();
               T* gx = grad_data<T>(xi);
               for (int64_t s = 0; s < slices; ++s) {
                 const T* gs = g + s * sp;
                 const T* xs = xv + s * sp;
                 T* gd = gx + s * sp;
                 const double mean = means[static_cast<size_t>(s)];
                 const double inv = inv_stds[static_cast<size_t>(s)];
                 double gsum = 0.0, gxhat = 0.0;
                 for (int64_t i = 0; i < sp; ++i) {
                   const double xh = (xs[i] - mean) * inv;
                   gsum += gs[i];
                   gxhat += gs[i] * xh;
                 }
                 const double gmean = gsum / static_cast<double>(sp);
                 const double ghmean = gxhat / static_cast<double>(sp);
                 for (int64_t i = 0; i < sp; ++i) {
                   const double xh = (xs[i] - mean) * inv;
                   gd[i] += static_cast<T>(inv * (gs[i] - gmean - xh * ghmean));
                 }
               }
             };
             if (out.stype == ScalarType::F32)
               run(float{});
             else
               run(double{});
           });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Convolution kernels
// ---------------------------------------------------------------------------

namespace {

struct ConvGeom {
  Dims5 in;
  int64_t co, k;
  int stride, pad;
  int64_t od, oh, ow;
  int64_t out_spatial() const { return od * oh * ow; }
};

ConvGeom conv_geometry(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
                       int pad) {
  ConvGeom g;
  g.in = dims5(x, "conv3d");
  Dims5 wd = dims5(w, "conv3d(weight)");
  require(wd.d == wd.h && wd.h == wd.w, "conv3d: kernel must be cubic, got " +
                                            shape_str(w.shape()));
  require(wd.c == g.in.c, "conv3d: weight expects " + std::to_string(wd.c) +
                              " input channels, tensor has " + std::to_string(g.in.c));
  if (b.defined()) {
    require(b.shape().size() == 1 && b.dim(0) == wd.n,
            "conv3d: bias shape must be [" + std::to_string(wd.n) + "]");
    check_same_type(x, b, "conv3d");
  }
  check_same_type(x, w, "conv3d");
  require(stride >= 1, "conv3d: stride must be >= 1");
  require(pad >= 0, "conv3d: pad must be >= 0");
  g.co = wd.n;
  g.k = wd.d;
  g.stride = stride;
  g.pad = pad;
  auto out_extent = [&](int64_t in) { return (in + 2 * pad - g.k) / stride + 1; };
  g.od = out_extent(g.in.d);
  g.oh = out_extent(g.in.h);
  g.ow = out_extent(g.in.w);
  require(g.in.d + 2 * pad >= g.k && g.in.h + 2 * pad >= g.k && g.in.w + 2 * pad >= g.k,
          "conv3d: kernel does not fit padded input " + shape_str(x.shape()));
  return g;
}

/// One output row of a stride-1, kernel-3 correlation: three taps fused in a
/// single pass. Handles the two padded edge columns explicitly.
template <typename T>
void corr_row3(T* dst, const T* src, T w0, T w1, T w2, int64_t width) {
  if (width == 1) {
    dst[0] += w1 * src[0];
    return;
  }
  dst[0] += w1 * src[0] + w2 * src[1];
  for (int64_t i = 1; i < width - 1; ++i)
    dst[i] += w0 * src[i - 1] + w1 * src[i] + w2 * src[i + 1];
  dst[width - 1] += w0 * src[width - 2] + w1 * src[width - 1];
}

/// Stride-1 pad-1 kernel-3 correlation of one (input channel, output channel)
/// slice pair; the workhorse of every same-size conv in the network.
/// `wk` points at the 27 kernel taps in [kz][ky][kx] order; `flip` reverses
/// the kernel, which turns the routine into the input-gradient scatter.
template <typename T>
void corr_slice3(const T* xs, const T* wk, T* ys, int64_t D, int64_t H, int64_t W,
                 bool flip) {
  for (int kz = 0; kz < 3; ++kz) {
    const int64_t z_lo = std::max<int64_t>(0, 1 - kz);
    const int64_t z_hi = std::min<int64_t>(D, D + 1 - kz);
    for (int ky = 0; ky < 3; ++ky) {
      const int64_t y_lo = std::max<int64_t>(0, 1 - ky);
      const int64_t y_hi = std::min<int64_t>(H, H + 1 - ky);
      const T* row = wk + (flip ? (2 - kz) * 9 + (2 - ky) * 3 : kz * 9 + ky * 3);
      const T w0 = flip ? row[2] : row[0];
      const T w1 = row[1];
      const T w2 = flip ? row[0] : row[2];
      for (int64_t oz = z_lo; oz < z_hi; ++oz) {
        const int64_t iz = oz + kz - 1;
        const T* xplane = xs + iz * H * W;
        T* yplane = ys + oz * H * W;
        for (int64_t oy = y_lo; oy < y_hi; ++oy)
          corr_row3(yplane + oy * W, xplane + (oy + ky - 1) * W, w0, w1, w2, W);
      }
    }
  }
}

/// General correlation forward for any kernel/stride/pad combination.
/// Slow path; the network only hits it for strided downsampling convs and
/// the 1x1x1 head.
template <typename T>
void corr_general(const ConvGeom& g, const T* xs, const T* wk, T* ys) {
  const auto& in = g.in;
  for (int64_t kz = 0; kz < g.k; ++kz)
    for (int64_t ky = 0; ky < g.k; ++ky)
      for (int64_t kx = 0; kx < g.k; ++kx) {
        const T wv = wk[(kz * g.k + ky) * g.k + kx];
        if (wv == T(0)) continue;
        for (int64_t oz = 0; oz < g.od; ++oz) {
          const int64_t iz = oz * g.stride + kz - g.pad;
          if (iz < 0 || iz >= in.d) continue;
          for (int64_t oy = 0; oy < g.oh; ++oy) {
            const int64_t iy = oy * g.stride + ky - g.pad;
            if (iy < 0 || iy >= in.h) continue;
            const T* xrow = xs + (iz * in.h + iy) * in.w;
            T* yrow = ys + (oz * g.oh + oy) * g.ow;
            for (int64_t ox = 0; ox < g.ow; ++ox) {
              const int64_t ix = ox * g.stride + kx - g.pad;
              if (ix < 0 || ix >= in.w) continue;
              yrow[ox] += wv * xrow[ix];
            }
          }
        }
      }
}

/// Scatter form of corr_general: accumulates wv * g_out into the input
/// gradient. Identical loop geometry with source and destination swapped.
template <typename T>
void corr_general_scatter(const ConvGeom& g, const T* gys, const T* wk, T* gxs) {
  const auto& in = g.in;
  for (int64_t kz = 0; kz < g.k; ++kz)
    for (int64_t ky = 0; ky < g.k; ++ky)
      for (int64_t kx = 0; kx < g.k; ++kx) {
        const T wv = wk[(kz * g.k + ky) * g.k + kx];
        if (wv == T(0)) continue;
        for (int64_t oz = 0; oz < g.od; ++oz) {
          const int64_t iz = oz * g.stride + kz - g.pad;
          if (iz < 0 || iz >= in.d) continue;
          for (int64_t oy = 0; oy < g.oh; ++oy) {
            const int64_t iy = oy * g.stride + ky - g.pad;
            if (iy < 0 || iy >= in.h) continue;
            const T* grow = gys + (oz * g.oh + oy) * g.ow;
            T* xrow = gxs + (iz * in.h + iy) * in.w;
            for (int64_t ox = 0; ox < g.ow; ++ox) {
              const int64_t ix = ox * g.stride + kx - g.pad;
              if (ix < 0 || ix >= in.w) continue;
              xrow[ix] += wv * grow[ox];
            }
          }
        }
      }
}

/// Weight gradient: dw[tap] += <g_out, x shifted by tap> over all rows.
template <typename T>
void corr_general_wgrad(const ConvGeom& g, const T* xs, const T* gys, T* gwk) {
  const auto& in = g.in;
  for (int64_t kz = 0; kz < g.k; ++kz)
    for (int64_t ky = 0; ky < g.k; ++ky)
      for (int64_t kx = 0; kx < g.k; ++kx) {
        T acc = T(0);
        for (int64_t oz = 0; oz < g.od; ++oz) {
          const int64_t iz = oz * g.stride + kz - g.pad;
          if (iz < 0 || iz >= in.d) continue;
          for (int64_t oy = 0; oy < g.oh; ++oy) {
            const int64_t iy = oy * g.stride + ky - g.pad;
            if (iy < 0 || iy >= in.h) continue;
            const T* xrow = xs + (iz * in.h + iy) * in.w;
            const T* grow = gys + (oz * g.oh + oy) * g.ow;
            for (int64_t ox = 0; ox < g.ow; ++ox) {
              const int64_t ix = ox * g.stride + kx - g.pad;
              if (ix < 0 || ix >= in.w) continue;
              acc += grow[ox] * xrow[ix];
            }
          }
        }
        gwk[(kz * g.k + ky) * g.k + kx] += acc;
      }
}

/// Weight gradient for the fused stride-1 kernel-3 path: three running dot
/// products per (kz, ky) row pair, split at the padded edges.
template <typename T>
void wgrad_slice3(const T* xs, const T* gys, T* gwk, int64_t D, int64_t H, int64_t W) {
  for (int kz = 0; kz < 3; ++kz) {
    const int64_t z_lo = std::max<int64_t>(0, 1 - kz);
    const int64_t z_hi = std::min<int64_t>(D, D + 1 - kz);
    for (int ky = 0; ky < 3; ++ky) {
      const int64_t y_lo = std::max<int64_t>(0, 1 - ky);
      const int64_t y_hi = std::min<int64_t>(H, H + 1 - ky);
      T s0 = T(0), s1 = T(0), s2 = T(0);
      for (int64_t oz = z_lo; oz < z_hi; ++oz) {
        const T* xplane = xs + (oz + kz - 1) * H * W;
        const T* gplane = gys + oz * H * W;
        for (int64_t oy = y_lo; oy < y_hi; ++oy) {
          const T* xrow = xplane + (oy + ky - 1) * W;
          const T* grow = gplane + oy * W;
          for (int64_t i = 1; i < W; ++i) s0 += grow[i] * xrow[i - 1];
          for (int64_t i = 0; i < W; ++i) s1 += grow[i] * xrow[i];
          for (int64_t i = 0; i < W - 1; ++i) s2 += grow[i] * xrow[i + 1];
        }
      }
      T* wrow = gwk + (kz * 3 + ky) * 3;
      wrow[0] += s0;
      wrow[1] += s1;
      wrow[2] += s2;
    }
  }
}

/// Pointwise (1x1x1, stride 1) conv forward slice: y += wv * x.
template <typename T>
void axpy(T* dst, const T* src, T wv, int64_t n) {
  for (int64_t i = 0; i < n; ++i) dst[i] += wv * src[i];
}

template <typename T>
T dot(const T* a, const T* b, int64_t n) {
  T acc = T(0);
  for (int64_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
void conv3d_forward(const ConvGeom& g, const T* xv, const T* wv, const T* bv, T* yv) {
  const int64_t in_sp = g.in.spatial();
  const int64_t out_sp = g.out_spatial();
  const bool fast3 = g.k == 3 && g.stride == 1 && g.pad == 1;
  const bool fast1 = g.k == 1 && g.stride == 1 && g.pad == 0;
  for (int64_t n = 0; n < g.in.n; ++n) {
    for (int64_t co = 0; co < g.co; ++co) {
      T* ys = yv + (n * g.co + co) * out_sp;
      if (bv) {
        const T b = bv[co];
        for (int64_t i = 0; i < out_sp; ++i) ys[i] = b;
      }
      for (int64_t ci = 0; ci < g.in.c; ++ci) {
        const T* xs = xv + (n * g.in.c + ci) * in_sp;
        const T* wk = wv + (co * g.in.c + ci) * g.k * g.k * g.k;
        if (fast3)
          corr_slice3(xs, wk, ys, g.in.d, g.in.h, g.in.w, false);
        else if (fast1)
          axpy(ys, xs, wk[0], out_sp);
        else
          corr_general(g, xs, wk, ys);
      }
    }
  }
}

template <typename T>
void conv3d_backward(const ConvGeom& g, const T* xv, const T* wv, const T* gy, T* gx,
                     T* gw, T* gb) {
  const int64_t in_sp = g.in.spatial();
  const int64_t out_sp = g.out_spatial();
  const int64_t ktaps = g.k * g.k * g.k;
  const bool fast3 = g.k == 3 && g.stride == 1 && g.pad == 1;
  const bool fast1 = g.k == 1 && g.stride == 1 && g.pad == 0;
  for (int64_t n = 0; n < g.in.n; ++n) {
    for (int64_t co = 0; co < g.co; ++co) {
      const T* gys = gy + (n * g.co + co) * out_sp;
      if (gb) {
        T acc = T(0);
        for (int64_t i = 0; i < out_sp; ++i) acc += gys[i];
        gb[co] += acc;
      }
      for (int64_t ci = 0; ci < g.in.c; ++ci) {
        const T* xs = xv + (n * g.in.c + ci) * in_sp;
        const T* wk = wv + (co * g.in.c + ci) * ktaps;
        if (gx) {
          T* gxs = gx + (n * g.in.c + ci) * in_sp;
          if (fast3)
            corr_slice3(gys, wk, gxs, g.in.d, g.in.h, g.in.w, true);
          else if (fast1)
            axpy(gxs, gys, wk[0], in_sp);
          else
            corr_general_scatter(g, gys, wk, gxs);
        }
        if (gw) {
          T* gwk = gw + (co * g.in.c + ci) * ktaps;
          if (fast3)
            wgrad_slice3(xs, gys, gwk, g.in.d, g.in.h, g.in.w);
          else if (fast1)
            gwk[0] += dot(gys, xs, out_sp);
          else
            corr_general_wgrad(g, xs, gys, gwk);
        }
      }
    }
  }
}

}  // namespace

Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  ConvGeom g = conv_geometry(x, w, b, stride, pad);
  require(g.od >= 1 && g.oh >= 1 && g.ow >= 1,
          "conv3d: output extent would be empty for input " + shape_str(x.shape()));
  Tensor y = Tensor::zeros({g.in.n, g.co, g.od, g.oh, g.ow});
  if (x.stype() == ScalarType::F32)
    conv3d_forward<float>(g, x.data<float>().data(), w.data<float>().data(),
                          b.defined() ? b.data<float>().data() : nullptr,
                          y.data_mut<float>().data());
  else
    conv3d_forward<double>(g, x.data<double>().data(), w.data<double>().data(),
                           b.defined() ? b.data<double>().data() : nullptr,
                           y.data_mut<double>().data());
  debug_assert_finite(y, "conv3d");

  const bool has_bias = b.defined();
  if ((has_bias && wants_grad({&x, &w, &b})) || (!has_bias && wants_grad({&x, &w}))) {
    auto xi = x.impl();
    auto wi = w.impl();
    auto bi = has_bias ? b.impl() : nullptr;
    auto node_fn = [g, xi, wi, bi](TensorImpl& out) {
      auto run = [&](auto tag) {
        using T = decltype(tag);
        const T* gy = out.grad->data<T>();
        T* gx = xi->requires_grad ? grad_data<T>(xi) : nullptr;
        T* gw = wi->requires_grad ? grad_data<T>(wi) : nullptr;
        T* gb = (bi && bi->requires_grad) ? grad_data<T>(bi) : nullptr;
        conv3d_backward<T>(g, xi->data<T>(), wi->data<T>(), gy, gx, gw, gb);
      };
      if (out.stype == ScalarType::F32)
        run(float{});
      else
        run(double{});
    };
    if (has_bias)
      attach(y, "conv3d", {&x, &w, &b}, std::move(node_fn));
    else
      attach(y, "conv3d", {&x, &w}, std::move(node_fn));
  }
  return y;
}

namespace {

struct TConvGeom {
  Dims5 in;
  int64_t co;
  int64_t od, oh, ow;
};

TConvGeom tconv_geometry(const Tensor& x, const Tensor& w, int stride) {
  require(stride == 2, "conv3d_transpose: only stride 2 is supported");
  TConvGeom g;
  g.in = dims5(x, "conv3d_transpose");
  Dims5 wd = dims5(w, "conv3d_transpose(weight)");
  require(wd.d == 2 && wd.h == 2 && wd.w == 2,
          "conv3d_transpose: kernel must be 2x2x2, got " + shape_str(w.shape()));
  require(wd.n == g.in.c, "conv3d_transpose: weight expects " + std::to_string(wd.n) +
                              " input channels, tensor has " + std::to_string(g.in.c));
  check_same_type(x, w, "conv3d_transpose");
  g.co = wd.c;
  g.od = g.in.d * 2;
  g.oh = g.in.h * 2;
  g.ow = g.in.w * 2;
  return g;
}

template <typename T>
void tconv_forward(const TConvGeom& g, const T* xv, const T* wv, T* yv) {
  const int64_t in_sp = g.in.spatial();
  const int64_t out_sp = g.od * g.oh * g.ow;
  for (int64_t n = 0; n < g.in.n; ++n)
    for (int64_t ci = 0; ci < g.in.c; ++ci) {
      const T* xs = xv + (n * g.in.c + ci) * in_sp;
      for (int64_t co = 0; co < g.co; ++co) {
        T* ys = yv + (n * g.co + co) * out_sp;
        const T* wk = wv + (ci * g.co + co) * 8;
        for (int kz = 0; kz < 2; ++kz)
          for (int ky = 0; ky < 2; ++ky)
            for (int kx = 0; kx < 2; ++kx) {
              const T wt = wk[(kz * 2 + ky) * 2 + kx];
              for (int64_t iz = 0; iz < g.in.d; ++iz) {
                const T* xplane = xs + iz * g.in.h * g.in.w;
                T* yplane = ys + (2 * iz + kz) * g.oh * g.ow;
                for (int64_t iy = 0; iy < g.in.h; ++iy) {
                  const T* xrow = xplane + iy * g.in.w;
                  T* yrow = yplane + (2 * iy + ky) * g.ow + kx;
                  for (int64_t ix = 0; ix < g.in.w; ++ix) yrow[2 * ix] += wt * xrow[ix];
                }
              }
            }
      }
    }
}

template <typename T>
void tconv_backward(const TConvGeom& g, const T* xv, const T* wv, const T* gy, T* gx,
                    T* gw) {
  const int64_t in_sp = g.in.spatial();
  const int64_t out_sp = g.od * g.oh * g.ow;
  for (int64_t n = 0; n < g.in.n; ++n)
    for (int64_t ci = 0; ci < g.in.c; ++ci) {
      const T* xs = xv + (n * g.in.c + ci) * in_sp;
      T* gxs = gx ? gx + (n * g.in.c + ci) * in_sp : nullptr;
      for (int64_t co = 0; co < g.co; ++co) {
        const T* gys = gy + (n * g.co + co) * out_sp;
        const T* wk = wv + (ci * g.co + co) * 8;
        T* gwk = gw ? gw + (ci * g.co + co) * 8 : nullptr;
        for (int kz = 0; kz < 2; ++kz)
          for (int ky = 0; ky < 2; ++ky)
            for (int kx = 0; kx < 2; ++kx) {
              const T wt = wk[(kz * 2 + ky) * 2 + kx];
              T wacc = T(0);
              for (int64_t iz = 0; iz < g.in.d; ++iz) {
                const T* gplane = gys + (2 * iz + kz) * g.oh * g.ow;
                const int64_t xoff = iz * g.in.h * g.in.w;
                for (int64_t iy = 0; iy < g.in.h; ++iy) {
                  const T* grow = gplane + (2 * iy + ky) * g.ow + kx;
                  const int64_t roff = xoff + iy * g.in.w;
                  if (gxs) {
                    T* gxrow = gxs + roff;
                    for (int64_t ix = 0; ix < g.in.w; ++ix) gxrow[ix] += wt * grow[2 * ix];
                  }
                  if (gwk) {
                    const T* xrow = xs + roff;
                    for (int64_t ix = 0; ix < g.in.w; ++ix) wacc += xrow[ix] * grow[2 * ix];
                  }
                }
              }
              if (gwk) gwk[(kz * 2 + ky) * 2 + kx] += wacc;
            }
      }
    }
}

}  // namespace

Tensor conv3d_transpose(const Tensor& x, const Tensor& w, int stride) {
  TConvGeom g = tconv_geometry(x, w, stride);
  Tensor y = Tensor::zeros({g.in.n, g.co, g.od, g.oh, g.ow});
  if (x.stype() == ScalarType::F32)
    tconv_forward<float>(g, x.data<float>().data(), w.data<float>().data(),
                         y.data_mut<float>().data());
  else
    tconv_forward<double>(g, x.data<double>().data(), w.data<double>().data(),
                          y.data_mut<double>().data());
  debug_assert_finite(y, "conv3d_transpose");

  if (wants_grad({&x, &w})) {
    auto xi = x.impl();
    auto wi = w.impl();
    attach(y, "conv3d_transpose", {&x, &w}, [g, xi, wi](TensorImpl& out) {
      auto run = [&](auto tag) {
        using T = decltype(tag);
        const T* gy = out.grad->data<T>();
        T* gx = xi->requires_grad ? grad_data<T>(xi) : nullptr;
        T* gw = wi->requires_grad ? grad_data<T>(wi) : nullptr;
        tconv_backward<T>(g, xi->data<T>(), wi->data<T>(), gy, gx, gw);
      };
      if (out.stype == ScalarType::F32)
        run(float{});
      else
        run(double{});
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Dice + cross-entropy loss
// ---------------------------------------------------------------------------

namespace {

struct DiceCeSums {
  double ce_sum = 0.0;     // sum of -log p_target over voxels
  double s_pt = 0.0;       // sum of p1 * t
  double s_p = 0.0;        // sum of p1
  double s_t = 0.0;        // sum of t
  int64_t nvox = 0;
};

template <typename T>
DiceCeSums dice_ce_sums(const T* z, const T* t, int64_t n, int64_t sp,
                        std::vector<T>* save_p1) {
  DiceCeSums s;
  s.nvox = n * sp;
  if (save_p1) save_p1->resize(static_cast<size_t>(s.nvox));
  for (int64_t b = 0; b < n; ++b) {
    const T* z0 = z + b * 2 * sp;
    const T* z1 = z0 + sp;
    const T* tb = t + b * sp;
    for (int64_t v = 0; v < sp; ++v) {
      const double a0 = z0[v], a1 = z1[v];
      const double m = a0 > a1 ? a0 : a1;
      const double e0 = std::exp(a0 - m), e1 = std::exp(a1 - m);
      const double lse = m + std::log(e0 + e1);
      const double p1 = e1 / (e0 + e1);
      const double tv = tb[v];
      s.ce_sum += lse - (tv != 0.0 ? a1 : a0);
      s.s_pt += p1 * tv;
      s.s_p += p1;
      s.s_t += tv;
      if (save_p1) (*save_p1)[static_cast<size_t>(b * sp + v)] = static_cast<T>(p1);
    }
  }
  return s;
}

double dice_ce_value(const DiceCeSums& s) {
  const double ce = s.ce_sum / static_cast<double>(s.nvox);
  const double dice = (2.0 * s.s_pt + 1.0) / (s.s_p + s.s_t + 1.0);
  return ce + (1.0 - dice);
}

void check_dice_ce_args(const Tensor& logits, const Tensor& target, Dims5& dl,
                        Dims5& dt) {
  dl = dims5(logits, "dice_ce_loss(logits)");
  dt = dims5(target, "dice_ce_loss(target)");
  require(dl.c == 2, "dice_ce_loss: logits must have 2 channels, got " +
                         std::to_string(dl.c));
  require(dt.c == 1, "dice_ce_loss: target must have 1 channel, got " +
                         std::to_string(dt.c));
  require(dl.n == dt.n && dl.d == dt.d && dl.h == dt.h && dl.w == dt.w,
          "dice_ce_loss: logits " + shape_str(logits.shape()) +
              " incompatible with target " + shape_str(target.shape()));
  check_same_type(logits, target, "dice_ce_loss");
  const int64_t n = target.numel();
  for (int64_t i = 0; i < n; ++i) {
    const double v = target.at(i);
    require(v == 0.0 || v == 1.0,
            "dice_ce_loss: target must be binary, found " + std::to_string(v));
  }
}

}  // namespace

Tensor dice_ce_loss(const Tensor& logits, const Tensor& target) {
  Dims5 dl, dt;
  check_dice_ce_args(logits, target, dl, dt);
  const int64_t sp = dl.spatial();

  Tensor y = Tensor::zeros({1});
  const bool rec = wants_grad({&logits});

  auto run = [&](auto tag) {
    using T = decltype(tag);
    std::vector<T> p1;
    DiceCeSums s = dice_ce_sums<T>(logits.data<T>().data(), target.data<T>().data(),
                                   dl.n, sp, rec ? &p1 : nullptr);
    y.set(0, dice_ce_value(s));
    if (!rec) return;
    auto li = logits.impl();
    auto ti = target.impl();
    attach(y, "dice_ce_loss", {&logits, &target},
           [li, ti, s, sp, n = dl.n, p1 = std::move(p1)](TensorImpl& out) {
             using TT = T;
             const TT go = out.grad->data<TT>()[0];
             TT* gl = grad_data<TT>(li);
             const TT* tv = ti->data<TT>();
             const double nvox = static_cast<double>(s.nvox);
             const double a = 2.0 * s.s_pt + 1.0;
             const double bsum = s.s_p + s.s_t + 1.0;
             const double inv_b2 = 1.0 / (bsum * bsum);
             for (int64_t b = 0; b < n; ++b) {
               TT* g0 = gl + b * 2 * sp;
               TT* g1 = g0 + sp;
               const TT* tb = tv + b * sp;
               const TT* pb = p1.data() + b * sp;
               for (int64_t v = 0; v < sp; ++v) {
                 const double p = pb[v];
                 const double t = tb[v];
                 const double ce_term = (p - t) / nvox;
                 const double dice_term = -(2.0 * t * bsum - a) * inv_b2 * p * (1.0 - p);
                 const double dz1 = static_cast<double>(go) * (ce_term + dice_term);
                 g1[v] += static_cast<TT>(dz1);
                 g0[v] -= static_cast<TT>(dz1);
               }
             }
           });
  };
  if (logits.stype() == ScalarType::F32)
    run(float{});
  else
    run(double{});
  debug_assert_finite(y, "dice_ce_loss");
  return y;
}

DiceCeParts dice_ce_parts(const Tensor& logits, const Tensor& target) {
  Dims5 dl, dt;
  check_dice_ce_args(logits, target, dl, dt);
  const int64_t sp = dl.spatial();
  DiceCeSums s;
  if (logits.stype() == ScalarType::F32)
    s = dice_ce_sums<float>(logits.data<float>().data(), target.data<float>().data(),
                            dl.n, sp, nullptr);
  else
    s = dice_ce_sums<double>(logits.data<double>().data(), target.data<double>().data(),
                             dl.n, sp, nullptr);
  DiceCeParts parts;
  parts.ce = s.ce_sum / static_cast<double>(s.nvox);
  parts.dice_loss = 1.0 - (2.0 * s.s_pt + 1.0) / (s.s_p + s.s_t + 1.0);
  return parts;
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

double gradcheck(const std::function<Tensor(std::vector<Tensor>&)>& fn,
                 std::vector<Tensor> inputs, const GradCheckOptions& opt) {
  if (default_scalar() != ScalarType::F64)
    throw std::logic_error("gradcheck: run under ScopedScalar(ScalarType::F64)");
  for (auto& t : inputs) t.zero_grad();

  Tensor out = fn(inputs);
  if (out.numel() != 1)
    throw std::invalid_argument("gradcheck: fn must return a scalar");
  backward(out);

  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) {
    if (t.requires_grad()) {
      Tensor g = t.grad();
      if (!g.defined())
        throw std::logic_error("gradcheck: missing grad on a requires-grad input");
      analytic.push_back(g.values());
    } else {
      analytic.emplace_back();
    }
  }

  double worst = 0.0;
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    Tensor& t = inputs[ti];
    if (!t.requires_grad()) continue;
    const int64_t n = t.numel();
    for (int64_t i = 0; i < n; ++i) {
      const double orig = t.at(i);
      double fp, fm;
      {
        NoGradGuard ng;
        t.set(i, orig + opt.h);
        fp = fn(inputs).at(0);
        t.set(i, orig - opt.h);
        fm = fn(inputs).at(0);
        t.set(i, orig);
      }
      const double numeric = (fp - fm) / (2.0 * opt.h);
      const double a = analytic[ti][static_cast<size_t>(i)];
      const double denom = std::max({std::abs(a), std::abs(numeric), opt.atol_floor});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace longidiff
