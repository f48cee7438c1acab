#pragma once

#include <array>
#include <span>

#include "tstcnn/tape.hpp"
#include "tstcnn/tensor.hpp"

/// Differentiable layer primitives over (B, C, T, H, W) volumes.
namespace tstcnn::nn {

enum class Mode { train, eval };

using Extents3 = std::array<std::size_t, 3>;

template <typename T>
struct Conv3dParams {
  Tensor<T> weight;  // (out, in, kd, kh, kw)
  Tensor<T> bias;    // (out)
  Extents3 padding{0, 0, 0};
  Extents3 stride{1, 1, 1};

  /// Zero weights and bias, both requiring grad. `same_padding` pads each
  /// axis by (k - 1) / 2 and requires odd kernel extents.
  static Conv3dParams make(std::size_t out_channels, std::size_t in_channels, Extents3 kernel,
                           bool same_padding);

  std::size_t out_channels() const { return weight.dim(0); }
  std::size_t in_channels() const { return weight.dim(1); }
  Extents3 kernel() const { return {weight.dim(2), weight.dim(3), weight.dim(4)}; }
  std::size_t parameter_count() const { return weight.numel() + bias.numel(); }
  void validate() const;
};

template <typename T>
struct BatchNorm3dParams {
  Tensor<T> gamma;         // per-channel scale
  Tensor<T> beta;          // per-channel offset
  Tensor<T> running_mean;  // not learnable
  Tensor<T> running_var;   // not learnable
  T eps = T(1e-5);
  T momentum = T(0.1);

  /// gamma = 1, beta = 0, running_mean = 0, running_var = 1.
  static BatchNorm3dParams make(std::size_t channels);

  std::size_t channels() const { return gamma.numel(); }
  std::size_t parameter_count() const { return gamma.numel() + beta.numel(); }
  void validate() const;
};

/// Output extent of a convolution/pooling window along one axis.
std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t pad,
                            std::size_t stride);

template <typename T>
Tensor<T> conv3d(Tape<T>& tape, const Tensor<T>& x, const Conv3dParams<T>& p);

/// Pools the three trailing axes; extents shrink to floor((e - k) / s) + 1.
/// Backward routes to the first maximum in scan order.
template <typename T>
Tensor<T> maxpool3d(Tape<T>& tape, const Tensor<T>& x, std::size_t kernel = 2,
                    std::size_t stride = 2);

/**
 * Per-channel normalization (x - mu) / sqrt(var + eps) * gamma + beta.
 *
 * Train mode uses batch statistics over (B, T, H, W) and updates the running
 * statistics in `p`; eval mode uses the running statistics.
 */
template <typename T>
Tensor<T> batchnorm3d(Tape<T>& tape, const Tensor<T>& x, BatchNorm3dParams<T>& p, Mode mode);

/// Trilinear resampling of the three trailing axes to `target` extents, with
/// half-pixel centers and edge clamping. Target extents must be >= source.
template <typename T>
Tensor<T> trilinear_upsample(Tape<T>& tape, const Tensor<T>& x, Extents3 target);

template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& x);

/// Logistic function, saturating one machine epsilon away from 0 and 1 so
/// outputs stay strictly inside (0, 1).
template <typename T>
Tensor<T> sigmoid(Tape<T>& tape, const Tensor<T>& x);

/// Row-wise softmax of (B, K) logits.
template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& logits);

/// x (B, F) . W^T (F, O) + b.
template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& weight,
                 const Tensor<T>& bias);

/// out[b, k] = sum_ij a[b, i] W[k, i, j] c[b, j] + bias[k].
template <typename T>
Tensor<T> bilinear(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& c, const Tensor<T>& weight,
                   const Tensor<T>& bias);

/// Mean negative log-likelihood of `labels` under softmax(logits).
template <typename T>
Tensor<T> softmax_cross_entropy(Tape<T>& tape, const Tensor<T>& logits, std::span<const int> labels);

}  // namespace tstcnn::nn
