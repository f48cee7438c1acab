#include "tstcnn/blocks.hpp"

#include "tstcnn/ops.hpp"

namespace tstcnn {
namespace {

template <typename T>
nn::Extents3 volume_extents(const Tensor<T>& t) {
  const auto r = t.rank();
  return {t.dim(r - 3), t.dim(r - 2), t.dim(r - 1)};
}

template <typename T>
void append_conv(const std::string& prefix, const nn::Conv3dParams<T>& c, TensorList<T>& out) {
  out.push_back({prefix + "/weight", c.weight});
  out.push_back({prefix + "/bias", c.bias});
}

template <typename T>
void append_bn(const std::string& prefix, const nn::BatchNorm3dParams<T>& b, TensorList<T>& out) {
  out.push_back({prefix + "/gamma", b.gamma});
  out.push_back({prefix + "/beta", b.beta});
  out.push_back({prefix + "/running_mean", b.running_mean, false});
  out.push_back({prefix + "/running_var", b.running_var, false});
}

}  // namespace

template <typename T>
FConvStage<T> FConvStage<T>::make(std::size_t in_channels, std::size_t out_channels,
                                  std::size_t kernel) {
  return {nn::BatchNorm3dParams<T>::make(in_channels),
          nn::Conv3dParams<T>::make(out_channels, in_channels, {kernel, kernel, kernel}, true)};
}

template <typename T>
Tensor<T> FConvStage<T>::forward(Tape<T>& tape, const Tensor<T>& x, nn::Mode mode) {
  auto h = nn::batchnorm3d(tape, x, bn, mode);
  h = nn::relu(tape, h);
  return nn::conv3d(tape, h, conv);
}

template <typename T>
void FConvStage<T>::append_tensors(const std::string& prefix, TensorList<T>& out) const {
  append_bn(prefix + "/bn", bn, out);
  append_conv(prefix + "/conv", conv, out);
}

// ---------------------------------------------------------------- residual

template <typename T>
ResidualBlock<T> ResidualBlock<T>::make(std::size_t width) {
  const std::size_t h = hidden_width(width);
  if (h == 0) throw ConfigError("residual block width must be >= 4, got " + std::to_string(width));
  ResidualBlock b;
  b.width = width;
  b.stages = {FConvStage<T>::make(width, h, 1), FConvStage<T>::make(h, h, 3),
              FConvStage<T>::make(h, width, 1)};
  return b;
}

template <typename T>
std::size_t ResidualBlock<T>::parameter_count(std::size_t width) {
  const std::size_t n = width, h = hidden_width(width);
  // BN(n) + conv n->h (1^3) | BN(h) + conv h->h (3^3) | BN(h) + conv h->n (1^3)
  return (2 * n + n * h + h) + (2 * h + 27 * h * h + h) + (2 * h + h * n + n);
}

template <typename T>
Tensor<T> ResidualBlock<T>::forward(Tape<T>& tape, const Tensor<T>& x, nn::Mode mode) {
  if (x.rank() != 5 || x.dim(1) != width)
    throw DimensionError("residual block of width " + std::to_string(width) + " given input " +
                         to_string(x.shape()));
  auto h = stages[0].forward(tape, x, mode);
  h = stages[1].forward(tape, h, mode);
  h = stages[2].forward(tape, h, mode);
  return ops::add(tape, h, x);
}

template <typename T>
void ResidualBlock<T>::append_tensors(const std::string& prefix, TensorList<T>& out) const {
  for (std::size_t i = 0; i < stages.size(); ++i)
    stages[i].append_tensors(prefix + "/stage" + std::to_string(i + 1), out);
}

template <typename T>
void ResidualBlock<T>::init(std::mt19937_64& rng) {
  for (auto& s : stages) he_normal(s.conv.weight, rng);
}

// ---------------------------------------------------------------- attention

template <typename T>
AttentionBlock<T> AttentionBlock<T>::make(std::size_t width) {
  AttentionBlock b;
  b.width = width;
  b.initial = ResidualBlock<T>::make(width);
  for (auto& r : b.trunk) r = ResidualBlock<T>::make(width);
  for (auto& r : b.down) r = ResidualBlock<T>::make(width);
  for (auto& r : b.up) r = ResidualBlock<T>::make(width);
  for (auto& r : b.skip) r = ResidualBlock<T>::make(width);
  for (auto& s : b.head) s = FConvStage<T>::make(width, width, 1);
  b.final = ResidualBlock<T>::make(width);
  return b;
}

template <typename T>
std::size_t AttentionBlock<T>::parameter_count(std::size_t width) {
  const std::size_t head = 2 * (2 * width + width * width + width);
  return kResidualBlocks * ResidualBlock<T>::parameter_count(width) + head;
}

template <typename T>
AttentionOutput<T> AttentionBlock<T>::forward(Tape<T>& tape, const Tensor<T>& x, nn::Mode mode) {
  if (x.rank() != 5 || x.dim(1) != width)
    throw DimensionError("attention block of width " + std::to_string(width) + " given input " +
                         to_string(x.shape()));
  for (std::size_t a = 2; a < 5; ++a)
    if (x.dim(a) < kMinExtent)
      throw ContractError("attention block needs T, H, W >= " + std::to_string(kMinExtent) +
                          " for " + std::to_string(kPoolingSteps) + " pooling steps, got " +
                          to_string(x.shape()));

  auto r0 = initial.forward(tape, x, mode);
  auto branch_trunk = trunk[1].forward(tape, trunk[0].forward(tape, r0, mode), mode);

  auto x1 = down[0].forward(tape, nn::maxpool3d(tape, r0), mode);
  auto x2 = down[1].forward(tape, nn::maxpool3d(tape, x1), mode);
  auto x3 = down[2].forward(tape, nn::maxpool3d(tape, x2), mode);

  auto s2 = skip[0].forward(tape, x2, mode);
  auto y1 = ops::add(tape, nn::trilinear_upsample(tape, up[0].forward(tape, x3, mode), volume_extents(s2)), s2);
  auto s1 = skip[1].forward(tape, x1, mode);
  auto y2 = ops::add(tape, nn::trilinear_upsample(tape, up[1].forward(tape, y1, mode), volume_extents(s1)), s1);
  auto y3 = nn::trilinear_upsample(tape, up[2].forward(tape, y2, mode), volume_extents(r0));

  auto logits = head[1].forward(tape, head[0].forward(tape, y3, mode), mode);
  auto mask = nn::sigmoid(tape, logits);

  auto gated = ops::mul(tape, branch_trunk, ops::add_scalar(tape, mask, T(1)));
  return {final.forward(tape, gated, mode), mask};
}

template <typename T>
void AttentionBlock<T>::append_tensors(const std::string& prefix, TensorList<T>& out) const {
  initial.append_tensors(prefix + "/initial", out);
  for (std::size_t i = 0; i < trunk.size(); ++i)
    trunk[i].append_tensors(prefix + "/trunk" + std::to_string(i + 1), out);
  for (std::size_t i = 0; i < down.size(); ++i)
    down[i].append_tensors(prefix + "/down" + std::to_string(i + 1), out);
  for (std::size_t i = 0; i < skip.size(); ++i)
    skip[i].append_tensors(prefix + "/skip" + std::to_string(i + 1), out);
  for (std::size_t i = 0; i < up.size(); ++i)
    up[i].append_tensors(prefix + "/up" + std::to_string(i + 1), out);
  for (std::size_t i = 0; i < head.size(); ++i)
    head[i].append_tensors(prefix + "/head" + std::to_string(i + 1), out);
  final.append_tensors(prefix + "/final", out);
}

template <typename T>
void AttentionBlock<T>::init(std::mt19937_64& rng) {
  initial.init(rng);
  for (auto& r : trunk) r.init(rng);
  for (auto& r : down) r.init(rng);
  for (auto& r : skip) r.init(rng);
  for (auto& r : up) r.init(rng);
  for (auto& s : head) he_normal(s.conv.weight, rng);
  final.init(rng);
}

template struct FConvStage<float>;
template struct FConvStage<double>;
template struct ResidualBlock<float>;
template struct ResidualBlock<double>;
template struct AttentionBlock<float>;
template struct AttentionBlock<double>;

}  // namespace tstcnn
