#include "tstcnn/layers.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>

namespace tstcnn::nn {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMat = Eigen::Map<const RowMat<T>>;
template <typename T>
using Mat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstVec = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <typename T>
using Vec = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;

template <typename T>
void require_rank(const char* op, const Tensor<T>& x, std::size_t rank) {
  if (x.rank() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         " input, got " + to_string(x.shape()));
}

struct ConvGeometry {
  std::size_t channels, ti, hi, wi;
  std::size_t kd, kh, kw;
  std::size_t pd, ph, pw;
  std::size_t sd, sh, sw;
  std::size_t to, ho, wo;

  std::size_t in_volume() const { return ti * hi * wi; }
  std::size_t out_volume() const { return to * ho * wo; }
  std::size_t rows() const { return channels * kd * kh * kw; }
  bool pointwise() const {
    return kd == 1 && kh == 1 && kw == 1 && pd == 0 && ph == 0 && pw == 0 && sd == 1 &&
           sh == 1 && sw == 1;
  }
};

// Valid output index range [lo, hi) along one axis for kernel offset k:
// in = out * s - p + k must land in [0, n).
inline void valid_range(std::size_t n, std::size_t out_n, std::size_t s, std::size_t p,
                        std::size_t k, std::size_t& lo, std::size_t& hi) {
  long lo_l = 0;
  long first = static_cast<long>(p) - static_cast<long>(k);
  if (first > 0) lo_l = (first + static_cast<long>(s) - 1) / static_cast<long>(s);
  long last_excl = static_cast<long>(n) + static_cast<long>(p) - static_cast<long>(k);
  long hi_l = last_excl <= 0 ? 0 : (last_excl + static_cast<long>(s) - 1) / static_cast<long>(s);
  hi_l = std::min<long>(hi_l, static_cast<long>(out_n));
  lo_l = std::min(lo_l, hi_l);
  lo = static_cast<std::size_t>(lo_l);
  hi = static_cast<std::size_t>(hi_l);
}

template <typename T>
void vol2col(const T* x, const ConvGeometry& g, T* col) {
  const std::size_t P = g.out_volume();
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.channels; ++c) {
    const T* xc = x + c * g.in_volume();
    for (std::size_t a = 0; a < g.kd; ++a)
      for (std::size_t b = 0; b < g.kh; ++b)
        for (std::size_t e = 0; e < g.kw; ++e, ++row) {
          T* dst = col + row * P;
          std::fill(dst, dst + P, T(0));
          std::size_t t0, t1, h0, h1, w0, w1;
          valid_range(g.ti, g.to, g.sd, g.pd, a, t0, t1);
          valid_range(g.hi, g.ho, g.sh, g.ph, b, h0, h1);
          valid_range(g.wi, g.wo, g.sw, g.pw, e, w0, w1);
          for (std::size_t t = t0; t < t1; ++t) {
            const std::size_t tin = t * g.sd + a - g.pd;
            for (std::size_t h = h0; h < h1; ++h) {
              const std::size_t hin = h * g.sh + b - g.ph;
              const T* src = xc + (tin * g.hi + hin) * g.wi;
              T* d = dst + (t * g.ho + h) * g.wo;
              if (g.sw == 1) {
                const std::size_t off = w0 + e - g.pw;
                std::copy(src + off, src + off + (w1 - w0), d + w0);
              } else {
                for (std::size_t w = w0; w < w1; ++w) d[w] = src[w * g.sw + e - g.pw];
              }
            }
          }
        }
  }
}

template <typename T>
void col2vol(const T* col, const ConvGeometry& g, T* dx) {
  const std::size_t P = g.out_volume();
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.channels; ++c) {
    T* xc = dx + c * g.in_volume();
    for (std::size_t a = 0; a < g.kd; ++a)
      for (std::size_t b = 0; b < g.kh; ++b)
        for (std::size_t e = 0; e < g.kw; ++e, ++row) {
          const T* srcrow = col + row * P;
          std::size_t t0, t1, h0, h1, w0, w1;
          valid_range(g.ti, g.to, g.sd, g.pd, a, t0, t1);
          valid_range(g.hi, g.ho, g.sh, g.ph, b, h0, h1);
          valid_range(g.wi, g.wo, g.sw, g.pw, e, w0, w1);
          for (std::size_t t = t0; t < t1; ++t) {
            const std::size_t tin = t * g.sd + a - g.pd;
            for (std::size_t h = h0; h < h1; ++h) {
              const std::size_t hin = h * g.sh + b - g.ph;
              T* d = xc + (tin * g.hi + hin) * g.wi;
              const T* s = srcrow + (t * g.ho + h) * g.wo;
              for (std::size_t w = w0; w < w1; ++w) d[w * g.sw + e - g.pw] += s[w];
            }
          }
        }
  }
}

}  // namespace

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t pad,
                            std::size_t stride) {
  if (in + 2 * pad < kernel)
    throw DimensionError("extent " + std::to_string(in) + " (padding " + std::to_string(pad) +
                         ") smaller than window " + std::to_string(kernel));
  return (in + 2 * pad - kernel) / stride + 1;
}

// ---------------------------------------------------------------- params

template <typename T>
Conv3dParams<T> Conv3dParams<T>::make(std::size_t out_channels, std::size_t in_channels,
                                      Extents3 kernel, bool same_padding) {
  Conv3dParams p;
  p.weight = Tensor<T>(Shape{out_channels, in_channels, kernel[0], kernel[1], kernel[2]}, T(0), true);
  p.bias = Tensor<T>(Shape{out_channels}, T(0), true);
  if (same_padding) {
    for (std::size_t i = 0; i < 3; ++i) {
      if (kernel[i] % 2 == 0)
        throw ConfigError("same padding requires odd kernel extents, got " +
                          std::to_string(kernel[i]));
      p.padding[i] = (kernel[i] - 1) / 2;
    }
  }
  return p;
}

template <typename T>
void Conv3dParams<T>::validate() const {
  if (weight.rank() != 5) throw DimensionError("conv3d weight must be rank 5");
  if (bias.rank() != 1 || bias.dim(0) != weight.dim(0))
    throw DimensionError("conv3d bias " + to_string(bias.shape()) + " does not match " +
                         std::to_string(weight.dim(0)) + " output channels");
  for (auto s : stride)
    if (s == 0) throw ConfigError("conv3d stride must be positive");
}

template <typename T>
BatchNorm3dParams<T> BatchNorm3dParams<T>::make(std::size_t channels) {
  BatchNorm3dParams p;
  p.gamma = Tensor<T>(Shape{channels}, T(1), true);
  p.beta = Tensor<T>(Shape{channels}, T(0), true);
  p.running_mean = Tensor<T>(Shape{channels}, T(0));
  p.running_var = Tensor<T>(Shape{channels}, T(1));
  return p;
}

template <typename T>
void BatchNorm3dParams<T>::validate() const {
  const auto n = gamma.numel();
  if (beta.numel() != n || running_mean.numel() != n || running_var.numel() != n)
    throw DimensionError("batchnorm3d parameter lengths disagree");
  if (!(eps > T(0))) throw ConfigError("batchnorm3d eps must be positive");
}

// ---------------------------------------------------------------- conv3d

template <typename T>
Tensor<T> conv3d(Tape<T>& tape, const Tensor<T>& x, const Conv3dParams<T>& p) {
  require_rank("conv3d", x, 5);
  p.validate();
  if (x.dim(1) != p.in_channels())
    throw DimensionError("conv3d: input has " + std::to_string(x.dim(1)) +
                         " channels, weights expect " + std::to_string(p.in_channels()) +
                         " (input " + to_string(x.shape()) + ", weight " +
                         to_string(p.weight.shape()) + ")");
  const auto k = p.kernel();
  ConvGeometry g{x.dim(1), x.dim(2), x.dim(3), x.dim(4), k[0], k[1], k[2],
                 p.padding[0], p.padding[1], p.padding[2], p.stride[0], p.stride[1], p.stride[2],
                 0, 0, 0};
  g.to = conv_out_extent(g.ti, g.kd, g.pd, g.sd);
  g.ho = conv_out_extent(g.hi, g.kh, g.ph, g.sh);
  g.wo = conv_out_extent(g.wi, g.kw, g.pw, g.sw);

  const std::size_t B = x.dim(0), O = p.out_channels(), P = g.out_volume(), R = g.rows();
  const std::size_t in_stride = g.channels * g.in_volume();
  Tensor<T> y(Shape{B, O, g.to, g.ho, g.wo});
  {
    auto out = y.mutable_data();
    ConstMat<T> W(p.weight.data().data(), O, R);
    ConstVec<T> bias(p.bias.data().data(), O);
    Buffer<T> col(g.pointwise() ? 0 : R * P);
    for (std::size_t b = 0; b < B; ++b) {
      const T* xb = x.data().data() + b * in_stride;
      Mat<T> Y(out.data() + b * O * P, O, P);
      if (g.pointwise()) {
        Y.noalias() = W * ConstMat<T>(xb, R, P);
      } else {
        vol2col(xb, g, col.data());
        Y.noalias() = W * ConstMat<T>(col.data(), R, P);
      }
      Y.colwise() += bias;
    }
  }

  if (tape.wants({&x, &p.weight, &p.bias})) {
    tape.record("conv3d", {x, p.weight, p.bias}, y,
                [x, w = p.weight, bias = p.bias, g, B, O, P, R, in_stride](
                    std::span<const T> grad) mutable {
                  ConstMat<T> W(w.data().data(), O, R);
                  Buffer<T> col(g.pointwise() ? 0 : R * P);
                  Buffer<T> dcol(g.pointwise() ? 0 : R * P);
                  const bool need_w = w.requires_grad();
                  const bool need_b = bias.requires_grad();
                  const bool need_x = x.requires_grad();
                  T* dW = need_w ? w.mutable_grad().data() : nullptr;
                  T* db = need_b ? bias.mutable_grad().data() : nullptr;
                  T* dx = need_x ? x.mutable_grad().data() : nullptr;
                  for (std::size_t b = 0; b < B; ++b) {
                    ConstMat<T> G(grad.data() + b * O * P, O, P);
                    const T* xb = x.data().data() + b * in_stride;
                    if (need_b) Vec<T>(db, O) += G.rowwise().sum();
                    if (need_w) {
                      Mat<T> dWm(dW, O, R);
                      if (g.pointwise()) {
                        dWm.noalias() += G * ConstMat<T>(xb, R, P).transpose();
                      } else {
                        vol2col(xb, g, col.data());
                        dWm.noalias() += G * ConstMat<T>(col.data(), R, P).transpose();
                      }
                    }
                    if (need_x) {
                      if (g.pointwise()) {
                        Mat<T>(dx + b * in_stride, R, P).noalias() += W.transpose() * G;
                      } else {
                        Mat<T>(dcol.data(), R, P).noalias() = W.transpose() * G;
                        col2vol(dcol.data(), g, dx + b * in_stride);
                      }
                    }
                  }
                });
  }
  return y;
}

// ---------------------------------------------------------------- maxpool

template <typename T>
Tensor<T> maxpool3d(Tape<T>& tape, const Tensor<T>& x, std::size_t kernel, std::size_t stride) {
  if (x.rank() < 3) throw DimensionError("maxpool3d: need at least 3 axes, got " + to_string(x.shape()));
  if (kernel == 0 || stride == 0) throw ConfigError("maxpool3d: kernel and stride must be positive");
  const std::size_t r = x.rank();
  const std::size_t ti = x.dim(r - 3), hi = x.dim(r - 2), wi = x.dim(r - 1);
  for (auto e : {ti, hi, wi})
    if (e < kernel)
      throw DimensionError("maxpool3d: extent " + std::to_string(e) + " smaller than kernel " +
                           std::to_string(kernel) + " in " + to_string(x.shape()));
  const std::size_t to = (ti - kernel) / stride + 1, ho = (hi - kernel) / stride + 1,
                    wo = (wi - kernel) / stride + 1;
  const std::size_t planes = x.numel() / (ti * hi * wi);
  Shape out_shape = x.shape();
  out_shape[r - 3] = to;
  out_shape[r - 2] = ho;
  out_shape[r - 1] = wo;
  Tensor<T> y(out_shape);
  std::vector<std::uint32_t> arg(y.numel());
  auto in = x.data();
  auto out = y.mutable_data();
  std::size_t o = 0;
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const T* src = in.data() + pl * ti * hi * wi;
    for (std::size_t t = 0; t < to; ++t)
      for (std::size_t h = 0; h < ho; ++h)
        for (std::size_t w = 0; w < wo; ++w, ++o) {
          std::size_t best = ((t * stride) * hi + h * stride) * wi + w * stride;
          T bv = src[best];
          for (std::size_t a = 0; a < kernel; ++a)
            for (std::size_t b = 0; b < kernel; ++b)
              for (std::size_t e = 0; e < kernel; ++e) {
                std::size_t idx = ((t * stride + a) * hi + h * stride + b) * wi + w * stride + e;
                if (src[idx] > bv) {
                  bv = src[idx];
                  best = idx;
                }
              }
          out[o] = bv;
          arg[o] = static_cast<std::uint32_t>(best);
        }
  }
  if (tape.wants({&x})) {
    const std::size_t in_plane = ti * hi * wi, out_plane = to * ho * wo;
    tape.record("maxpool3d", {x}, y,
                [x, arg = std::move(arg), in_plane, out_plane, planes](std::span<const T> g) mutable {
                  auto gx = x.mutable_grad();
                  std::size_t o = 0;
                  for (std::size_t pl = 0; pl < planes; ++pl)
                    for (std::size_t i = 0; i < out_plane; ++i, ++o)
                      gx[pl * in_plane + arg[o]] += g[o];
                });
  }
  return y;
}

// ---------------------------------------------------------------- batchnorm

template <typename T>
Tensor<T> batchnorm3d(Tape<T>& tape, const Tensor<T>& x, BatchNorm3dParams<T>& p, Mode mode) {
  require_rank("batchnorm3d", x, 5);
  p.validate();
  const std::size_t B = x.dim(0), C = x.dim(1), S = x.dim(2) * x.dim(3) * x.dim(4);
  if (C != p.channels())
    throw DimensionError("batchnorm3d: input " + to_string(x.shape()) + " has " +
                         std::to_string(C) + " channels, parameters have " +
                         std::to_string(p.channels()));
  const std::size_t M = B * S;
  if (mode == Mode::train && M < 2)
    throw ContractError("batchnorm3d: train mode needs at least 2 values per channel, got " +
                        std::to_string(M));

  auto in = x.data();
  auto gamma = p.gamma.data();
  auto beta = p.beta.data();
  Buffer<T> inv_std(C), mean(C);
  if (mode == Mode::train) {
    auto rm = p.running_mean.mutable_data();
    auto rv = p.running_var.mutable_data();
    for (std::size_t c = 0; c < C; ++c) {
      double s = 0;
      for (std::size_t b = 0; b < B; ++b) {
        const T* v = in.data() + (b * C + c) * S;
        for (std::size_t i = 0; i < S; ++i) s += v[i];
      }
      const double mu = s / static_cast<double>(M);
      double ss = 0;
      for (std::size_t b = 0; b < B; ++b) {
        const T* v = in.data() + (b * C + c) * S;
        for (std::size_t i = 0; i < S; ++i) {
          const double d = v[i] - mu;
          ss += d * d;
        }
      }
      const double var = ss / static_cast<double>(M);
      mean[c] = static_cast<T>(mu);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(p.eps)));
      const double unbiased = ss / static_cast<double>(M - 1);
      rm[c] = static_cast<T>((1.0 - p.momentum) * rm[c] + p.momentum * mu);
      rv[c] = static_cast<T>((1.0 - p.momentum) * rv[c] + p.momentum * unbiased);
    }
  } else {
    auto rm = p.running_mean.data();
    auto rv = p.running_var.data();
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = rm[c];
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(rv[c]) + p.eps));
    }
  }

  Tensor<T> y(x.shape());
  Buffer<T> xhat(x.numel());
  auto out = y.mutable_data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t off = (b * C + c) * S;
      for (std::size_t i = 0; i < S; ++i) {
        const T h = (in[off + i] - mean[c]) * inv_std[c];
        xhat[off + i] = h;
        out[off + i] = h * gamma[c] + beta[c];
      }
    }

  if (tape.wants({&x, &p.gamma, &p.beta})) {
    tape.record("batchnorm3d", {x, p.gamma, p.beta}, y,
                [x, gm = p.gamma, bt = p.beta, xhat = std::move(xhat),
                 inv_std = std::move(inv_std), B, C, S, M, mode](std::span<const T> g) mutable {
                  std::vector<double> sum_g(C, 0.0), sum_gx(C, 0.0);
                  for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t c = 0; c < C; ++c) {
                      const std::size_t off = (b * C + c) * S;
                      double sg = 0, sgx = 0;
                      for (std::size_t i = 0; i < S; ++i) {
                        sg += g[off + i];
                        sgx += g[off + i] * xhat[off + i];
                      }
                      sum_g[c] += sg;
                      sum_gx[c] += sgx;
                    }
                  if (gm.requires_grad()) {
                    auto dg = gm.mutable_grad();
                    for (std::size_t c = 0; c < C; ++c) dg[c] += static_cast<T>(sum_gx[c]);
                  }
                  if (bt.requires_grad()) {
                    auto db = bt.mutable_grad();
                    for (std::size_t c = 0; c < C; ++c) db[c] += static_cast<T>(sum_g[c]);
                  }
                  if (x.requires_grad()) {
                    auto dx = x.mutable_grad();
                    auto gam = gm.data();
                    for (std::size_t b = 0; b < B; ++b)
                      for (std::size_t c = 0; c < C; ++c) {
                        const std::size_t off = (b * C + c) * S;
                        const T scale = gam[c] * inv_std[c];
                        if (mode == Mode::train) {
                          const T mg = static_cast<T>(sum_g[c] / static_cast<double>(M));
                          const T mgx = static_cast<T>(sum_gx[c] / static_cast<double>(M));
                          for (std::size_t i = 0; i < S; ++i)
                            dx[off + i] += scale * (g[off + i] - mg - xhat[off + i] * mgx);
                        } else {
                          for (std::size_t i = 0; i < S; ++i) dx[off + i] += scale * g[off + i];
                        }
                      }
                  }
                });
  }
  return y;
}

// ---------------------------------------------------------------- upsample

namespace {

struct AxisTaps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> w_hi;
};

AxisTaps axis_taps(std::size_t in, std::size_t out) {
  AxisTaps a;
  a.lo.resize(out);
  a.hi.resize(out);
  a.w_hi.resize(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    std::size_t i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    a.lo[o] = i0;
    a.hi[o] = std::min(i0 + 1, in - 1);
    a.w_hi[o] = src - static_cast<double>(i0);
  }
  return a;
}

}  // namespace

template <typename T>
Tensor<T> trilinear_upsample(Tape<T>& tape, const Tensor<T>& x, Extents3 target) {
  if (x.rank() < 3)
    throw DimensionError("trilinear_upsample: need at least 3 axes, got " + to_string(x.shape()));
  const std::size_t r = x.rank();
  const Extents3 src{x.dim(r - 3), x.dim(r - 2), x.dim(r - 1)};
  for (std::size_t i = 0; i < 3; ++i)
    if (target[i] < src[i])
      throw ContractError("trilinear_upsample: target extent " + std::to_string(target[i]) +
                          " smaller than source " + std::to_string(src[i]) +
                          " (downsampling is not supported)");
  const auto at = axis_taps(src[0], target[0]);
  const auto ah = axis_taps(src[1], target[1]);
  const auto aw = axis_taps(src[2], target[2]);
  const std::size_t planes = x.numel() / (src[0] * src[1] * src[2]);
  const std::size_t in_plane = src[0] * src[1] * src[2];
  const std::size_t out_plane = target[0] * target[1] * target[2];
  Shape out_shape = x.shape();
  for (std::size_t i = 0; i < 3; ++i) out_shape[r - 3 + i] = target[i];
  Tensor<T> y(out_shape);

  auto for_each_tap = [&](auto&& fn) {
    for (std::size_t t = 0; t < target[0]; ++t) {
      const T wt1 = static_cast<T>(at.w_hi[t]), wt0 = T(1) - wt1;
      for (std::size_t h = 0; h < target[1]; ++h) {
        const T wh1 = static_cast<T>(ah.w_hi[h]), wh0 = T(1) - wh1;
        for (std::size_t w = 0; w < target[2]; ++w) {
          const T ww1 = static_cast<T>(aw.w_hi[w]), ww0 = T(1) - ww1;
          const std::size_t o = (t * target[1] + h) * target[2] + w;
          auto idx = [&](std::size_t ti, std::size_t hi, std::size_t wi) {
            return (ti * src[1] + hi) * src[2] + wi;
          };
          fn(o, idx(at.lo[t], ah.lo[h], aw.lo[w]), wt0 * wh0 * ww0);
          fn(o, idx(at.lo[t], ah.lo[h], aw.hi[w]), wt0 * wh0 * ww1);
          fn(o, idx(at.lo[t], ah.hi[h], aw.lo[w]), wt0 * wh1 * ww0);
          fn(o, idx(at.lo[t], ah.hi[h], aw.hi[w]), wt0 * wh1 * ww1);
          fn(o, idx(at.hi[t], ah.lo[h], aw.lo[w]), wt1 * wh0 * ww0);
          fn(o, idx(at.hi[t], ah.lo[h], aw.hi[w]), wt1 * wh0 * ww1);
          fn(o, idx(at.hi[t], ah.hi[h], aw.lo[w]), wt1 * wh1 * ww0);
          fn(o, idx(at.hi[t], ah.hi[h], aw.hi[w]), wt1 * wh1 * ww1);
        }
      }
    }
  };

  auto in = x.data();
  auto out = y.mutable_data();
  for (std::size_t pl = 0; pl < planes; ++pl) {
    const T* s = in.data() + pl * in_plane;
    T* d = out.data() + pl * out_plane;
    for_each_tap([&](std::size_t o, std::size_t i, T w) { d[o] += w * s[i]; });
  }

  if (tape.wants({&x})) {
    tape.record("trilinear_upsample", {x}, y,
                [x, at, ah, aw, src, target, planes, in_plane, out_plane](std::span<const T> g) mutable {
                  auto gx = x.mutable_grad();
                  for (std::size_t pl = 0; pl < planes; ++pl) {
                    T* d = gx.data() + pl * in_plane;
                    const T* gs = g.data() + pl * out_plane;
                    for (std::size_t t = 0; t < target[0]; ++t) {
                      const T wt1 = static_cast<T>(at.w_hi[t]), wt0 = T(1) - wt1;
                      for (std::size_t h = 0; h < target[1]; ++h) {
                        const T wh1 = static_cast<T>(ah.w_hi[h]), wh0 = T(1) - wh1;
                        for (std::size_t w = 0; w < target[2]; ++w) {
                          const T ww1 = static_cast<T>(aw.w_hi[w]), ww0 = T(1) - ww1;
                          const T go = gs[(t * target[1] + h) * target[2] + w];
                          auto idx = [&](std::size_t ti, std::size_t hi, std::size_t wi) {
                            return (ti * src[1] + hi) * src[2] + wi;
                          };
                          d[idx(at.lo[t], ah.lo[h], aw.lo[w])] += go * wt0 * wh0 * ww0;
                          d[idx(at.lo[t], ah.lo[h], aw.hi[w])] += go * wt0 * wh0 * ww1;
                          d[idx(at.lo[t], ah.hi[h], aw.lo[w])] += go * wt0 * wh1 * ww0;
                          d[idx(at.lo[t], ah.hi[h], aw.hi[w])] += go * wt0 * wh1 * ww1;
                          d[idx(at.hi[t], ah.lo[h], aw.lo[w])] += go * wt1 * wh0 * ww0;
                          d[idx(at.hi[t], ah.lo[h], aw.hi[w])] += go * wt1 * wh0 * ww1;
                          d[idx(at.hi[t], ah.hi[h], aw.lo[w])] += go * wt1 * wh1 * ww0;
                          d[idx(at.hi[t], ah.hi[h], aw.hi[w])] += go * wt1 * wh1 * ww1;
                        }
                      }
                    }
                  }
                });
  }
  return y;
}

// ---------------------------------------------------------------- activations

template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x) {
  auto in = x.data();
  std::vector<T> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > T(0) ? in[i] : T(0);
  Tensor<T> y(x.shape(), std::move(out));
  if (tape.wants({&x})) {
    tape.record("relu", {x}, y, [x](std::span<const T> g) mutable {
      auto gx = x.mutable_grad();
      auto v = x.data();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (v[i] > T(0)) gx[i] += g[i];
    });
  }
  return y;
}

template <typename T>
Tensor<T> sigmoid(Tape<T>& tape, const Tensor<T>& x) {
  constexpr T lo = std::numeric_limits<T>::epsilon();
  constexpr T hi = T(1) - std::numeric_limits<T>::epsilon();
  auto in = x.data();
  std::vector<T> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    const T v = in[i];
    T s;
    if (v >= T(0)) {
      s = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      s = e / (T(1) + e);
    }
    out[i] = std::clamp(s, lo, hi);
  }
  Tensor<T> y(x.shape(), std::move(out));
  if (tape.wants({&x})) {
    tape.record("sigmoid", {x}, y, [x, y](std::span<const T> g) mutable {
      auto gx = x.mutable_grad();
      auto s = y.data();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s[i] * (T(1) - s[i]);
    });
  }
  return y;
}

template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& logits) {
  require_rank("softmax", logits, 2);
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  auto z = logits.data();
  std::vector<T> out(z.size());
  for (std::size_t b = 0; b < B; ++b) {
    const T* zb = z.data() + b * K;
    T* pb = out.data() + b * K;
    const T m = *std::max_element(zb, zb + K);
    T s = 0;
    for (std::size_t k = 0; k < K; ++k) s += (pb[k] = std::exp(zb[k] - m));
    for (std::size_t k = 0; k < K; ++k) pb[k] /= s;
  }
  Tensor<T> y(logits.shape(), std::move(out));
  if (tape.wants({&logits})) {
    tape.record("softmax", {logits}, y, [logits, y, B, K](std::span<const T> g) mutable {
      auto gz = logits.mutable_grad();
      auto p = y.data();
      for (std::size_t b = 0; b < B; ++b) {
        T dot = 0;
        for (std::size_t k = 0; k < K; ++k) dot += g[b * K + k] * p[b * K + k];
        for (std::size_t k = 0; k < K; ++k) gz[b * K + k] += p[b * K + k] * (g[b * K + k] - dot);
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------- dense

template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank("linear", x, 2);
  require_rank("linear weight", weight, 2);
  const std::size_t B = x.dim(0), F = x.dim(1), O = weight.dim(0);
  if (weight.dim(1) != F || bias.rank() != 1 || bias.dim(0) != O)
    throw DimensionError("linear: input " + to_string(x.shape()) + ", weight " +
                         to_string(weight.shape()) + ", bias " + to_string(bias.shape()));
  Tensor<T> y(Shape{B, O});
  {
    Mat<T> Y(y.mutable_data().data(), B, O);
    ConstMat<T> X(x.data().data(), B, F);
    ConstMat<T> W(weight.data().data(), O, F);
    Y.noalias() = X * W.transpose();
    Y.rowwise() += ConstVec<T>(bias.data().data(), O).transpose();
  }
  if (tape.wants({&x, &weight, &bias})) {
    tape.record("linear", {x, weight, bias}, y,
                [x, weight, bias, B, F, O](std::span<const T> g) mutable {
                  ConstMat<T> G(g.data(), B, O);
                  if (x.requires_grad())
                    Mat<T>(x.mutable_grad().data(), B, F).noalias() +=
                        G * ConstMat<T>(weight.data().data(), O, F);
                  if (weight.requires_grad())
                    Mat<T>(weight.mutable_grad().data(), O, F).noalias() +=
                        G.transpose() * ConstMat<T>(x.data().data(), B, F);
                  if (bias.requires_grad())
                    Vec<T>(bias.mutable_grad().data(), O) += G.colwise().sum().transpose();
                });
  }
  return y;
}

template <typename T>
Tensor<T> bilinear(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& c, const Tensor<T>& weight,
                   const Tensor<T>& bias) {
  require_rank("bilinear", a, 2);
  require_rank("bilinear", c, 2);
  require_rank("bilinear weight", weight, 3);
  const std::size_t B = a.dim(0), F1 = a.dim(1), F2 = c.dim(1), O = weight.dim(0);
  if (c.dim(0) != B || weight.dim(1) != F1 || weight.dim(2) != F2 || bias.rank() != 1 ||
      bias.dim(0) != O)
    throw DimensionError("bilinear: a " + to_string(a.shape()) + ", c " + to_string(c.shape()) +
                         ", weight " + to_string(weight.shape()) + ", bias " +
                         to_string(bias.shape()));
  Tensor<T> y(Shape{B, O});
  ConstMat<T> A(a.data().data(), B, F1);
  ConstMat<T> Cm(c.data().data(), B, F2);
  {
    auto out = y.mutable_data();
    RowMat<T> tmp(B, F2);
    for (std::size_t k = 0; k < O; ++k) {
      ConstMat<T> Wk(weight.data().data() + k * F1 * F2, F1, F2);
      tmp.noalias() = A * Wk;
      for (std::size_t b = 0; b < B; ++b)
        out[b * O + k] = tmp.row(b).dot(Cm.row(b)) + bias.data()[k];
    }
  }
  if (tape.wants({&a, &c, &weight, &bias})) {
    tape.record("bilinear", {a, c, weight, bias}, y,
                [a, c, weight, bias, B, F1, F2, O](std::span<const T> g) mutable {
                  ConstMat<T> A(a.data().data(), B, F1);
                  ConstMat<T> Cm(c.data().data(), B, F2);
                  RowMat<T> scaled(B, F2);
                  for (std::size_t k = 0; k < O; ++k) {
                    ConstMat<T> Wk(weight.data().data() + k * F1 * F2, F1, F2);
                    Eigen::Matrix<T, Eigen::Dynamic, 1> gk(B);
                    for (std::size_t b = 0; b < B; ++b) gk[b] = g[b * O + k];
                    if (a.requires_grad()) {
                      scaled = gk.asDiagonal() * Cm;
                      Mat<T>(a.mutable_grad().data(), B, F1).noalias() += scaled * Wk.transpose();
                    }
                    if (c.requires_grad()) {
                      RowMat<T> sa = gk.asDiagonal() * A;
                      Mat<T>(c.mutable_grad().data(), B, F2).noalias() += sa * Wk;
                    }
                    if (weight.requires_grad()) {
                      scaled = gk.asDiagonal() * Cm;
                      Mat<T>(weight.mutable_grad().data() + k * F1 * F2, F1, F2).noalias() +=
                          A.transpose() * scaled;
                    }
                    if (bias.requires_grad()) bias.mutable_grad()[k] += gk.sum();
                  }
                });
  }
  return y;
}

template <typename T>
Tensor<T> softmax_cross_entropy(Tape<T>& tape, const Tensor<T>& logits, std::span<const int> labels) {
  require_rank("softmax_cross_entropy", logits, 2);
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  if (labels.size() != B)
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for batch of " + std::to_string(B));
  for (int l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= K)
      throw DimensionError("softmax_cross_entropy: label " + std::to_string(l) +
                           " outside [0, " + std::to_string(K) + ")");
  auto z = logits.data();
  Buffer<T> prob(z.size());
  double loss = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const T* zb = z.data() + b * K;
    const T m = *std::max_element(zb, zb + K);
    double s = 0;
    for (std::size_t k = 0; k < K; ++k) s += std::exp(static_cast<double>(zb[k] - m));
    for (std::size_t k = 0; k < K; ++k)
      prob[b * K + k] = static_cast<T>(std::exp(static_cast<double>(zb[k] - m)) / s);
    loss += std::log(s) + static_cast<double>(m) - static_cast<double>(zb[labels[b]]);
  }
  Tensor<T> y(Shape{1}, static_cast<T>(loss / static_cast<double>(B)));
  if (tape.wants({&logits})) {
    std::vector<int> lab(labels.begin(), labels.end());
    tape.record("softmax_cross_entropy", {logits}, y,
                [logits, prob = std::move(prob), lab = std::move(lab), B, K](std::span<const T> g) mutable {
                  auto gz = logits.mutable_grad();
                  const T scale = g[0] / static_cast<T>(B);
                  for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t k = 0; k < K; ++k) {
                      const T onehot = static_cast<int>(k) == lab[b] ? T(1) : T(0);
                      gz[b * K + k] += scale * (prob[b * K + k] - onehot);
                    }
                });
  }
  return y;
}

#define TSTCNN_INSTANTIATE_LAYERS(T)                                                           \
  template struct Conv3dParams<T>;                                                             \
  template struct BatchNorm3dParams<T>;                                                        \
  template Tensor<T> conv3d(Tape<T>&, const Tensor<T>&, const Conv3dParams<T>&);               \
  template Tensor<T> maxpool3d(Tape<T>&, const Tensor<T>&, std::size_t, std::size_t);          \
  template Tensor<T> batchnorm3d(Tape<T>&, const Tensor<T>&, BatchNorm3dParams<T>&, Mode);     \
  template Tensor<T> trilinear_upsample(Tape<T>&, const Tensor<T>&, Extents3);                 \
  template Tensor<T> relu(Tape<T>&, const Tensor<T>&);                                         \
  template Tensor<T> sigmoid(Tape<T>&, const Tensor<T>&);                                      \
  template Tensor<T> softmax(Tape<T>&, const Tensor<T>&);                                      \
  template Tensor<T> linear(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);   \
  template Tensor<T> bilinear(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,  \
                              const Tensor<T>&);                                               \
  template Tensor<T> softmax_cross_entropy(Tape<T>&, const Tensor<T>&, std::span<const int>);

TSTCNN_INSTANTIATE_LAYERS(float)
TSTCNN_INSTANTIATE_LAYERS(double)

}  // namespace tstcnn::nn
