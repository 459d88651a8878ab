#pragma once

#include <Eigen/Core>

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "enjoint/autograd.hpp"
#include "enjoint/tensor.hpp"

namespace enjoint {

inline constexpr double kLeakySlope = 0.1;

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

struct ConvGeom {
  int batch, cin, h, w, cout, kh, kw, stride, pad, ho, wo;
  int k() const { return cin * kh * kw; }
  int p() const { return ho * wo; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

// Valid output columns [lo, hi) for kernel offset kx: those whose input index
// ox*stride - pad + kx lands inside [0, w).
inline void valid_cols(const ConvGeom& g, int kx, int& lo, int& hi) {
  const int off = kx - g.pad;
  lo = off >= 0 ? 0 : (-off + g.stride - 1) / g.stride;
  hi = g.w - 1 - off < 0 ? 0 : std::min(g.wo, (g.w - 1 - off) / g.stride + 1);
  if (hi < lo) hi = lo;
}

// col is [cin*kh*kw, ho*wo] with row pitch ld; zero padding outside the input.
template <typename T>
void im2col(const T* img, const ConvGeom& g, T* col, std::size_t ld) {
  for (int c = 0; c < g.cin; ++c) {
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx) {
        T* row = col + static_cast<std::size_t>((c * g.kh + ky) * g.kw + kx) * ld;
        int lo, hi;
        valid_cols(g, kx, lo, hi);
        const int off = kx - g.pad;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          T* dst = row + oy * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.wo, T{0});
            continue;
          }
          const T* src = img + (static_cast<std::size_t>(c) * g.h + iy) * g.w + off;
          std::fill(dst, dst + lo, T{0});
          if (g.stride == 1) {
            std::copy(src + lo, src + hi, dst + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride];
          }
          std::fill(dst + hi, dst + g.wo, T{0});
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeom& g, T* img, std::size_t ld) {
  for (int c = 0; c < g.cin; ++c) {
    for (int ky = 0; ky < g.kh; ++ky) {
      for (int kx = 0; kx < g.kw; ++kx) {
        const T* row = col + static_cast<std::size_t>((c * g.kh + ky) * g.kw + kx) * ld;
        int lo, hi;
        valid_cols(g, kx, lo, hi);
        const int off = kx - g.pad;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          T* dst = img + (static_cast<std::size_t>(c) * g.h + iy) * g.w + off;
          const T* src = row + oy * g.wo;
          if (g.stride == 1) {
            for (int ox = lo; ox < hi; ++ox) dst[ox] += src[ox];
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox * g.stride] += src[ox];
          }
        }
      }
    }
  }
}

// Rank-3 [C,H,W] inputs are treated as a batch of one.
inline Shape as_batched(const Shape& s, const char* op) {
  if (s.size() == 4) return s;
  if (s.size() == 3) return {1, s[0], s[1], s[2]};
  throw ShapeError(std::string(op) + ": expected [C,H,W] or [N,C,H,W], got " + shape_str(s));
}

inline Shape restore_rank(const Shape& batched, std::size_t rank) {
  if (rank == 4) return batched;
  return {batched[1], batched[2], batched[3]};
}

}  // namespace detail

namespace detail {

// 1x1 stride-1 convolution: the input is already the col matrix, one GEMM per image.
template <typename T>
Var<T> conv1x1(const Var<T>& input, const Var<T>& kernel, const Var<T>& bias, const ConvGeom& g) {
  const Eigen::Index P = g.p();
  const std::size_t in_stride = static_cast<std::size_t>(g.cin) * P;
  const std::size_t out_stride = static_cast<std::size_t>(g.cout) * P;
  Shape os = input.shape();
  os[os.size() - 3] = g.cout;
  Tensor<T> out(os);
  ConstMatMap<T> W(kernel.value().ptr(), g.cout, g.cin);
  const T* b = bias.value().ptr();
  for (int n = 0; n < g.batch; ++n) {
    MatMap<T> Y(out.ptr() + n * out_stride, g.cout, P);
    Y.noalias() = W * ConstMatMap<T>(input.value().ptr() + n * in_stride, g.cin, P);
    for (int co = 0; co < g.cout; ++co) Y.row(co).array() += b[co];
  }
  return make_result<T>(std::move(out), {input, kernel, bias}, [g, P, in_stride, out_stride](Node<T>& self) {
    auto& xin = *self.parents[0];
    auto& kn = *self.parents[1];
    auto& bn = *self.parents[2];
    ConstMatMap<T> W(kn.value.ptr(), g.cout, g.cin);
    for (int n = 0; n < g.batch; ++n) {
      ConstMatMap<T> DY(self.grad.ptr() + n * out_stride, g.cout, P);
      if (kn.requires_grad) {
        MatMap<T> DW(kn.grad_buffer().ptr(), g.cout, g.cin);
        DW.noalias() += DY * ConstMatMap<T>(xin.value.ptr() + n * in_stride, g.cin, P).transpose();
      }
      if (bn.requires_grad) {
        T* db = bn.grad_buffer().ptr();
        for (int co = 0; co < g.cout; ++co) db[co] += DY.row(co).sum();
      }
      if (xin.requires_grad) {
        MatMap<T> DX(xin.grad_buffer().ptr() + n * in_stride, g.cin, P);
        DX.noalias() += W.transpose() * DY;
      }
    }
  });
}

}  // namespace detail

/// 2-D cross-correlation with zero padding. Input [N,Cin,H,W] (or [Cin,H,W]),
/// kernel [Cout,Cin,kh,kw], bias [Cout].
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernel, const Var<T>& bias, int stride, int padding) {
  using namespace detail;
  const Shape in = as_batched(input.shape(), "conv2d");
  const Shape& ks = kernel.shape();
  if (ks.size() != 4) throw ShapeError("conv2d: kernel must be [Cout,Cin,kh,kw], got " + shape_str(ks));
  if (ks[1] != in[1]) {
    throw ShapeError("conv2d: input has " + std::to_string(in[1]) + " channels, kernel expects " +
                     std::to_string(ks[1]));
  }
  if (ks[2] % 2 == 0 || ks[3] % 2 == 0) throw ShapeError("conv2d: kernel dims must be odd");
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: stride >= 1 and padding >= 0 required");
  if (bias.shape() != Shape{ks[0]}) throw ShapeError("conv2d: bias must be [Cout]");

  ConvGeom g{in[0], in[1], in[2], in[3], ks[0], ks[2], ks[3], stride, padding, 0, 0};
  g.ho = (g.h + 2 * padding - g.kh) / stride + 1;
  g.wo = (g.w + 2 * padding - g.kw) / stride + 1;
  if (g.ho <= 0 || g.wo <= 0) throw ShapeError("conv2d: kernel larger than padded input");

  if (g.pointwise()) return detail::conv1x1(input, kernel, bias, g);

  // The whole batch goes through one GEMM: col is [K, N*P], image n occupying
  // columns [n*P, (n+1)*P).
  const Shape out_batched{g.batch, g.cout, g.ho, g.wo};
  Tensor<T> out(restore_rank(out_batched, input.shape().size()));
  const std::size_t P = static_cast<std::size_t>(g.p());
  const std::size_t NP = P * static_cast<std::size_t>(g.batch);
  const std::size_t in_stride = static_cast<std::size_t>(g.cin) * g.h * g.w;
  const std::size_t out_stride = static_cast<std::size_t>(g.cout) * P;
  auto col = std::make_shared<AlignedVector<T>>(static_cast<std::size_t>(g.k()) * NP);
  for (int n = 0; n < g.batch; ++n) im2col(input.value().ptr() + n * in_stride, g, col->data() + n * P, NP);

  {
    RowMat<T> Y = ConstMatMap<T>(kernel.value().ptr(), g.cout, g.k()) * ConstMatMap<T>(col->data(), g.k(), NP);
    const T* b = bias.value().ptr();
    for (int n = 0; n < g.batch; ++n) {
      MatMap<T>(out.ptr() + n * out_stride, g.cout, static_cast<Eigen::Index>(P)) =
          Y.middleCols(static_cast<Eigen::Index>(n * P), static_cast<Eigen::Index>(P));
    }
    for (int n = 0; n < g.batch; ++n) {
      for (int co = 0; co < g.cout; ++co) {
        T* row = out.ptr() + n * out_stride + co * P;
        for (std::size_t i = 0; i < P; ++i) row[i] += b[co];
      }
    }
  }
  // The col buffer is only needed for the kernel gradient.
  if (!kernel.requires_grad()) col.reset();

  return make_result<T>(std::move(out), {input, kernel, bias}, [g, P, NP, in_stride, out_stride, col](Node<T>& self) {
    auto& xin = *self.parents[0];
    auto& kn = *self.parents[1];
    auto& bn = *self.parents[2];
    RowMat<T> DY(g.cout, static_cast<Eigen::Index>(NP));
    for (int n = 0; n < g.batch; ++n) {
      DY.middleCols(static_cast<Eigen::Index>(n * P), static_cast<Eigen::Index>(P)) =
          ConstMatMap<T>(self.grad.ptr() + n * out_stride, g.cout, static_cast<Eigen::Index>(P));
    }
    if (kn.requires_grad && col) {
      MatMap<T> DW(kn.grad_buffer().ptr(), g.cout, g.k());
      DW.noalias() += DY * ConstMatMap<T>(col->data(), g.k(), static_cast<Eigen::Index>(NP)).transpose();
    }
    if (bn.requires_grad) {
      T* db = bn.grad_buffer().ptr();
      for (int co = 0; co < g.cout; ++co) db[co] += DY.row(co).sum();
    }
    if (xin.requires_grad) {
      RowMat<T> DC = ConstMatMap<T>(kn.value.ptr(), g.cout, g.k()).transpose() * DY;
      T* dx = xin.grad_buffer().ptr();
      for (int n = 0; n < g.batch; ++n) col2im_add(DC.data() + n * P, g, dx + n * in_stride, NP);
    }
  });
}

/// Elementwise map with derivative expressed through input and output values.
template <typename T, typename F, typename DF>
Var<T> unary_op(const Var<T>& x, F f, DF df) {
  Tensor<T> out(x.shape());
  const T* src = x.value().ptr();
  T* dst = out.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) dst[i] = f(src[i]);
  return make_result<T>(std::move(out), {x}, [df](Node<T>& self) {
    auto& p = *self.parents[0];
    T* dx = p.grad_buffer().ptr();
    const T* xv = p.value.ptr();
    const T* yv = self.value.ptr();
    const T* dy = self.grad.ptr();
    for (std::size_t i = 0; i < self.value.size(); ++i) dx[i] += dy[i] * df(xv[i], yv[i]);
  });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& x, T slope = static_cast<T>(kLeakySlope)) {
  return unary_op(
      x, [slope](T v) { return v > 0 ? v : slope * v; },
      [slope](T v, T) { return v > 0 ? T{1} : slope; });
}

template <typename T>
T sigmoid_scalar(T v) {
  if (v >= 0) return T{1} / (T{1} + std::exp(-v));
  const T e = std::exp(v);
  return e / (T{1} + e);
}

template <typename T>
Var<T> sigmoid(const Var<T>& x) {
  return unary_op(x, [](T v) { return sigmoid_scalar(v); }, [](T, T y) { return y * (T{1} - y); });
}

template <typename T>
Var<T> square(const Var<T>& x) {
  return unary_op(x, [](T v) { return v * v; }, [](T v, T) { return T{2} * v; });
}

template <typename T>
Var<T> abs(const Var<T>& x) {
  return unary_op(
      x, [](T v) { return std::abs(v); },
      [](T v, T) { return v > 0 ? T{1} : (v < 0 ? T{-1} : T{0}); });
}

template <typename T>
Var<T> scale(const Var<T>& x, T s) {
  return unary_op(x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& x, T s) {
  return unary_op(x, [s](T v) { return v + s; }, [](T, T) { return T{1}; });
}

/// a + sign * b, same shapes.
template <typename T>
Var<T> axpy_op(const Var<T>& a, const Var<T>& b, T sign) {
  require_same_shape(a.shape(), b.shape(), "add/sub");
  Tensor<T> out(a.shape());
  const T* pa = a.value().ptr();
  const T* pb = b.value().ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] + sign * pb[i];
  return make_result<T>(std::move(out), {a, b}, [sign](Node<T>& self) {
    const T* dy = self.grad.ptr();
    auto& na = *self.parents[0];
    auto& nb = *self.parents[1];
    if (na.requires_grad) na.accumulate(self.grad.data());
    if (nb.requires_grad) {
      T* db = nb.grad_buffer().ptr();
      for (std::size_t i = 0; i < self.grad.size(); ++i) db[i] += sign * dy[i];
    }
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  return axpy_op(a, b, T{1});
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  return axpy_op(a, b, T{-1});
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
    auto& na = *self.parents[0];
    auto& nb = *self.parents[1];
    const T* dy = self.grad.ptr();
    if (na.requires_grad) {
      T* da = na.grad_buffer().ptr();
      for (std::size_t i = 0; i < self.grad.size(); ++i) da[i] += dy[i] * nb.value[i];
    }
    if (nb.requires_grad) {
      T* db = nb.grad_buffer().ptr();
      for (std::size_t i = 0; i < self.grad.size(); ++i) db[i] += dy[i] * na.value[i];
    }
  });
}

/// Sum of all elements, rank-0 result.
template <typename T>
Var<T> sum_all(const Var<T>& x) {
  T acc{0};
  for (T v : x.value().data()) acc += v;
  return make_result<T>(Tensor<T>::scalar(acc), {x}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    const T g = self.grad[0];
    T* dx = p.grad_buffer().ptr();
    for (std::size_t i = 0; i < p.value.size(); ++i) dx[i] += g;
  });
}

template <typename T>
Var<T> mean_all(const Var<T>& x) {
  return scale(sum_all(x), T{1} / static_cast<T>(x.value().size()));
}

/// Sum of scalar vars; an empty list yields a constant zero.
template <typename T>
Var<T> add_n(const std::vector<Var<T>>& terms) {
  if (terms.empty()) return Var<T>::constant(Tensor<T>::scalar(T{0}));
  Var<T> acc = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

/// Bilinear upsampling with half-pixel centers: output index i samples source
/// coordinate (i + 0.5) / factor - 0.5, clamped to the valid range.
template <typename T>
Var<T> bilinear_upsample(const Var<T>& input, int factor) {
  if (factor < 1) throw ShapeError("bilinear_upsample: factor must be >= 1");
  const Shape in = detail::as_batched(input.shape(), "bilinear_upsample");
  const int N = in[0], C = in[1], H = in[2], W = in[3];
  const int Ho = H * factor, Wo = W * factor;

  struct Tap {
    int i0, i1;
    T w1;
  };
  auto taps = [factor](int out_len, int in_len) {
    std::vector<Tap> t(static_cast<std::size_t>(out_len));
    for (int i = 0; i < out_len; ++i) {
      T src = (static_cast<T>(i) + T{0.5}) / static_cast<T>(factor) - T{0.5};
      src = std::clamp(src, T{0}, static_cast<T>(in_len - 1));
      const int i0 = static_cast<int>(std::floor(src));
      const int i1 = std::min(i0 + 1, in_len - 1);
      t[static_cast<std::size_t>(i)] = {i0, i1, src - static_cast<T>(i0)};
    }
    return t;
  };
  auto ty = taps(Ho, H);
  auto tx = taps(Wo, W);

  Tensor<T> out(detail::restore_rank({N, C, Ho, Wo}, input.shape().size()));
  const T* src = input.value().ptr();
  T* dst = out.ptr();
  for (int nc = 0; nc < N * C; ++nc) {
    const T* s = src + static_cast<std::size_t>(nc) * H * W;
    T* d = dst + static_cast<std::size_t>(nc) * Ho * Wo;
    for (int y = 0; y < Ho; ++y) {
      const Tap& a = ty[static_cast<std::size_t>(y)];
      for (int x = 0; x < Wo; ++x) {
        const Tap& b = tx[static_cast<std::size_t>(x)];
        const T top = s[a.i0 * W + b.i0] * (T{1} - b.w1) + s[a.i0 * W + b.i1] * b.w1;
        const T bot = s[a.i1 * W + b.i0] * (T{1} - b.w1) + s[a.i1 * W + b.i1] * b.w1;
        d[y * Wo + x] = top * (T{1} - a.w1) + bot * a.w1;
      }
    }
  }

  return make_result<T>(std::move(out), {input}, [N, C, H, W, Ho, Wo, ty, tx](Node<T>& self) {
    auto& p = *self.parents[0];
    T* dx = p.grad_buffer().ptr();
    const T* dy = self.grad.ptr();
    for (int nc = 0; nc < N * C; ++nc) {
      T* g = dx + static_cast<std::size_t>(nc) * H * W;
      const T* go = dy + static_cast<std::size_t>(nc) * Ho * Wo;
      for (int y = 0; y < Ho; ++y) {
        const Tap& a = ty[static_cast<std::size_t>(y)];
        for (int x = 0; x < Wo; ++x) {
          const Tap& b = tx[static_cast<std::size_t>(x)];
          const T v = go[y * Wo + x];
          g[a.i0 * W + b.i0] += v * (T{1} - a.w1) * (T{1} - b.w1);
          g[a.i0 * W + b.i1] += v * (T{1} - a.w1) * b.w1;
          g[a.i1 * W + b.i0] += v * a.w1 * (T{1} - b.w1);
          g[a.i1 * W + b.i1] += v * a.w1 * b.w1;
        }
      }
    }
  });
}

/// Channels [c0, c1) of a [N,C,H,W] tensor.
template <typename T>
Var<T> slice_channels(const Var<T>& x, int c0, int c1) {
  const Shape& s = x.shape();
  if (s.size() != 4 || c0 < 0 || c1 > s[1] || c0 >= c1) throw ShapeError("slice_channels: bad range");
  const int N = s[0], C = s[1];
  const std::size_t hw = static_cast<std::size_t>(s[2]) * s[3];
  const int Cs = c1 - c0;
  Tensor<T> out({N, Cs, s[2], s[3]});
  for (int n = 0; n < N; ++n) {
    std::copy_n(x.value().ptr() + (n * C + c0) * hw, Cs * hw, out.ptr() + n * Cs * hw);
  }
  return make_result<T>(std::move(out), {x}, [N, C, Cs, c0, hw](Node<T>& self) {
    auto& p = *self.parents[0];
    T* dx = p.grad_buffer().ptr();
    for (int n = 0; n < N; ++n) {
      const T* g = self.grad.ptr() + n * Cs * hw;
      T* d = dx + (n * C + c0) * hw;
      for (std::size_t i = 0; i < Cs * hw; ++i) d[i] += g[i];
    }
  });
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 4 || sb.size() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3]) {
    throw ShapeError("concat_channels: incompatible " + shape_str(sa) + " and " + shape_str(sb));
  }
  const int N = sa[0], Ca = sa[1], Cb = sb[1];
  const std::size_t hw = static_cast<std::size_t>(sa[2]) * sa[3];
  Tensor<T> out({N, Ca + Cb, sa[2], sa[3]});
  for (int n = 0; n < N; ++n) {
    std::copy_n(a.value().ptr() + n * Ca * hw, Ca * hw, out.ptr() + n * (Ca + Cb) * hw);
    std::copy_n(b.value().ptr() + n * Cb * hw, Cb * hw, out.ptr() + (n * (Ca + Cb) + Ca) * hw);
  }
  return make_result<T>(std::move(out), {a, b}, [N, Ca, Cb, hw](Node<T>& self) {
    auto& na = *self.parents[0];
    auto& nb = *self.parents[1];
    for (int n = 0; n < N; ++n) {
      const T* g = self.grad.ptr() + n * (Ca + Cb) * hw;
      if (na.requires_grad) {
        T* d = na.grad_buffer().ptr() + n * Ca * hw;
        for (std::size_t i = 0; i < Ca * hw; ++i) d[i] += g[i];
      }
      if (nb.requires_grad) {
        T* d = nb.grad_buffer().ptr() + n * Cb * hw;
        for (std::size_t i = 0; i < Cb * hw; ++i) d[i] += g[Ca * hw + i];
      }
    }
  });
}

/// Spatial mean: [N,C,H,W] -> [N,C].
template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw ShapeError("global_avg_pool: expected [N,C,H,W]");
  const int NC = s[0] * s[1];
  const std::size_t hw = static_cast<std::size_t>(s[2]) * s[3];
  Tensor<T> out({s[0], s[1]});
  for (int i = 0; i < NC; ++i) {
    const T* p = x.value().ptr() + i * hw;
    T acc{0};
    for (std::size_t k = 0; k < hw; ++k) acc += p[k];
    out[static_cast<std::size_t>(i)] = acc / static_cast<T>(hw);
  }
  return make_result<T>(std::move(out), {x}, [NC, hw](Node<T>& self) {
    auto& p = *self.parents[0];
    T* dx = p.grad_buffer().ptr();
    for (int i = 0; i < NC; ++i) {
      const T g = self.grad[static_cast<std::size_t>(i)] / static_cast<T>(hw);
      for (std::size_t k = 0; k < hw; ++k) dx[i * hw + k] += g;
    }
  });
}

/// Sample covariance of the rows of X [n,d], normalized by n-1.
template <typename T>
Var<T> covariance(const Var<T>& X) {
  const Shape& s = X.shape();
  if (s.size() != 2) throw ShapeError("covariance: expected [n,d] matrix");
  const int n = s[0], d = s[1];
  if (n < 2) throw ShapeError("covariance: needs at least 2 rows");
  using M = detail::RowMat<T>;
  detail::ConstMatMap<T> xm(X.value().ptr(), n, d);
  M centered = xm.rowwise() - xm.colwise().mean();
  Tensor<T> out({d, d});
  detail::MatMap<T> cm(out.ptr(), d, d);
  cm.noalias() = centered.transpose() * centered;
  cm /= static_cast<T>(n - 1);
  // exact symmetry
  for (int i = 0; i < d; ++i)
    for (int j = i + 1; j < d; ++j) cm(j, i) = cm(i, j);

  return make_result<T>(std::move(out), {X}, [n, d, centered](Node<T>& self) {
    auto& p = *self.parents[0];
    detail::ConstMatMap<T> G(self.grad.ptr(), d, d);
    M dxc = centered * (G + G.transpose()) / static_cast<T>(n - 1);
    M dx = dxc.rowwise() - dxc.colwise().mean();
    detail::MatMap<T> out(p.grad_buffer().ptr(), n, d);
    out += dx;
  });
}

}  // namespace enjoint
