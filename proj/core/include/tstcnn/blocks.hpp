#pragma once

#include <array>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "tstcnn/layers.hpp"

namespace tstcnn {

/// A tensor addressed by a stable slash-separated path.
template <typename T>
struct NamedTensor {
  std::string path;
  Tensor<T> tensor;
  bool learnable = true;  // false for batch-norm running statistics
  bool fully_connected = false;
};

template <typename T>
using TensorList = std::vector<NamedTensor<T>>;

/// Sum of element counts of the learnable entries.
template <typename T>
std::size_t count_learnable(const TensorList<T>& list, bool include_fc = true) {
  std::size_t n = 0;
  for (const auto& e : list)
    if (e.learnable && (include_fc || !e.fully_connected)) n += e.tensor.numel();
  return n;
}

/// Zero-mean normal with standard deviation sqrt(2 / fan_in), fan_in being
/// the element count of one output slice.
template <typename T>
void he_normal(Tensor<T>& weight, std::mt19937_64& rng) {
  const double fan_in = static_cast<double>(weight.numel() / weight.dim(0));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (auto& v : weight.mutable_data()) v = static_cast<T>(dist(rng));
}

/// conv(ReLU(BN(x))).
template <typename T>
struct FConvStage {
  nn::BatchNorm3dParams<T> bn;
  nn::Conv3dParams<T> conv;

  static FConvStage make(std::size_t in_channels, std::size_t out_channels, std::size_t kernel);
  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x, nn::Mode mode);
  void append_tensors(const std::string& prefix, TensorList<T>& out) const;
};

/// res(x) = f3(f2(f1(x))) + x with widths floor(N/4), floor(N/4), N and
/// kernels 1, 3, 1.
template <typename T>
struct ResidualBlock {
  std::size_t width = 0;
  std::array<FConvStage<T>, 3> stages;

  static ResidualBlock make(std::size_t width);
  static std::size_t hidden_width(std::size_t width) { return width / 4; }
  /// Closed-form learnable parameter count for width N.
  static std::size_t parameter_count(std::size_t width);

  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& x, nn::Mode mode);
  void append_tensors(const std::string& prefix, TensorList<T>& out) const;
  void init(std::mt19937_64& rng);
};

template <typename T>
struct AttentionOutput {
  Tensor<T> y;
  Tensor<T> mask;
};

/**
 * Trunk/soft-mask attention block over a (B, N, T, H, W) volume.
 *
 *   r0    = res(x)
 *   trunk = res(res(r0))
 *   x1 = res(pool(r0)), x2 = res(pool(x1)), x3 = res(pool(x2))
 *   y1 = up(res(x3)) + res(x2)
 *   y2 = up(res(y1)) + res(x1)
 *   y3 = up(res(y2))
 *   mask = sigmoid(fconv(fconv(y3)))
 *   y  = res(trunk * (1 + mask))
 *
 * Each up-sampling targets the extents of the tensor it is added to (or of
 * r0 for y3), so odd extents are handled. Twelve residual blocks in total.
 */
template <typename T>
struct AttentionBlock {
  static constexpr std::size_t kPoolingSteps = 3;
  /// Smallest T, H and W that survive three 2x poolings.
  static constexpr std::size_t kMinExtent = 8;

  std::size_t width = 0;
  ResidualBlock<T> initial;
  std::array<ResidualBlock<T>, 2> trunk;
  std::array<ResidualBlock<T>, 3> down;
  std::array<ResidualBlock<T>, 3> up;
  std::array<ResidualBlock<T>, 2> skip;
  std::array<FConvStage<T>, 2> head;
  ResidualBlock<T> final;

  static AttentionBlock make(std::size_t width);
  static std::size_t parameter_count(std::size_t width);
  static constexpr std::size_t kResidualBlocks = 12;

  AttentionOutput<T> forward(Tape<T>& tape, const Tensor<T>& x, nn::Mode mode);
  void append_tensors(const std::string& prefix, TensorList<T>& out) const;
  void init(std::mt19937_64& rng);
};

/// Exact learnable-scalar count by enumeration.
template <typename T>
std::size_t count_parameters_block(const ResidualBlock<T>& b) {
  TensorList<T> list;
  b.append_tensors("", list);
  return count_learnable(list);
}

template <typename T>
std::size_t count_parameters_block(const AttentionBlock<T>& b) {
  TensorList<T> list;
  b.append_tensors("", list);
  return count_learnable(list);
}

extern template struct FConvStage<float>;
extern template struct FConvStage<double>;
extern template struct ResidualBlock<float>;
extern template struct ResidualBlock<double>;
extern template struct AttentionBlock<float>;
extern template struct AttentionBlock<double>;

}  // namespace tstcnn
