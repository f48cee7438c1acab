#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "tstcnn/blocks.hpp"

namespace tstcnn {

enum class ModelKind { rgb, flow, twin };
enum class BlockMode { none, residual, attention };

std::string to_string(ModelKind k);
std::string to_string(BlockMode m);
ModelKind parse_model_kind(const std::string& s);
BlockMode parse_block_mode(const std::string& s);

/// Declarative description of a single-branch or twin network.
struct ModelConfig {
  ModelKind kind = ModelKind::twin;
  std::size_t rgb_channels = 3;
  std::size_t flow_channels = 2;  // (v_x, v_y)
  std::size_t frames = 16;
  std::size_t height = 32;
  std::size_t width = 32;
  std::array<std::size_t, 3> filters{30, 60, 80};
  std::size_t kernel = 3;
  std::size_t fc_width = 500;
  std::size_t n_classes = 21;
  BlockMode block_mode = BlockMode::none;
  /// Blocks attach after pooling layers 1..n_blocks.
  std::size_t n_blocks = 0;

  /// 100 x 120 x 120 input, 21 classes.
  static ModelConfig full_scale(ModelKind kind, BlockMode mode, std::size_t n_blocks);
  /// 16 x 32 x 32 input, 6 classes.
  static ModelConfig desk_scale(ModelKind kind, BlockMode mode, std::size_t n_blocks);

  /// Throws ConfigError for inconsistent settings or geometry that collapses
  /// under pooling or is too small for an attention block.
  void validate() const;
  std::size_t branch_count() const { return kind == ModelKind::twin ? 2 : 1; }
  /// Extents (T, H, W) after pooling stage `stage` (1-based), 0 = input.
  nn::Extents3 extents_after_pool(std::size_t stage) const;
  std::size_t fc_inputs() const;

  bool operator==(const ModelConfig&) const = default;
};

/// Path, shape and role of one tensor of a network built from a config.
struct ParamSpec {
  std::string path;
  Shape shape;
  bool learnable = true;
  bool fully_connected = false;
};

/// Enumerates the tensors `Network(config)` will own, in the same order,
/// without allocating them.
std::vector<ParamSpec> describe(const ModelConfig& config);

/// Learnable scalars from describe(); include_fc = false drops the FC-500
/// layers, the single-branch head and the bilinear fusion.
std::size_t count_parameters(const ModelConfig& config, bool include_fc);

/// One line per tensor: "path<TAB>shape<TAB>learnable count".
std::string manifest_text(const std::vector<ParamSpec>& specs);

template <typename T>
struct MaskDump {
  std::string branch;       // "rgb" or "flow"
  std::size_t block_index;  // 1-based position in the branch
  Tensor<T> mask;           // (B, N, T, H, W), values in (0, 1)
};

template <typename T>
struct ModelInput {
  Tensor<T> rgb;   // (B, 3, T, H, W)
  Tensor<T> flow;  // (B, 2, T, H, W)
};

template <typename T>
struct ModelOutput {
  Tensor<T> logits;  // (B, n_classes), recorded on the tape
  Tensor<T> probs;   // softmax(logits), not recorded
  std::vector<MaskDump<T>> masks;
};

template <typename T>
struct Branch {
  std::string name;
  std::array<nn::Conv3dParams<T>, 3> convs;
  std::vector<ResidualBlock<T>> residual;
  std::vector<AttentionBlock<T>> attention;
  Tensor<T> fc_weight;  // (fc_width, fc_inputs)
  Tensor<T> fc_bias;
};

/**
 * Twin or single-branch spatio-temporal network.
 *
 * Branch: [conv3^3 -> ReLU -> maxpool -> block?] x 3 -> flatten -> FC -> ReLU.
 * Twin networks fuse the two branch features with a bilinear layer,
 * logits_k = (a / sqrt(F))^T W_k b + c_k with F = fc_width; single branch
 * networks use a linear head. Tensors are owned by the instance and
 * shared with nothing else, so the type is move-only.
 */
template <typename T>
class Network {
 public:
  /// All weights zero, BN at identity; call initialize() for training.
  explicit Network(ModelConfig config);
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;

  /// He-normal conv/linear weights from `seed`, biases zero, BN identity.
  /// The last convolution of every residual block starts at zero, so each
  /// residual path is initially the identity map.
  void initialize(std::uint64_t seed);

  ModelOutput<T> forward(Tape<T>& tape, const ModelInput<T>& input, nn::Mode mode);

  const ModelConfig& config() const { return config_; }
  /// Every tensor (learnable and running statistics) in stable order.
  const TensorList<T>& tensors() const { return tensors_; }
  TensorList<T> parameters() const;
  std::size_t count_parameters(bool include_fc) const { return count_learnable(tensors_, include_fc); }
  std::string manifest() const;

  std::vector<Branch<T>>& branches() { return branches_; }
  const std::vector<Branch<T>>& branches() const { return branches_; }
  /// Bilinear (twin) or linear (single-branch) head.
  Tensor<T>& head_weight() { return head_weight_; }
  Tensor<T>& head_bias() { return head_bias_; }

 private:
  Tensor<T> forward_branch(Tape<T>& tape, Branch<T>& br, const Tensor<T>& x, nn::Mode mode,
                           std::vector<MaskDump<T>>& masks);

  ModelConfig config_;
  std::vector<Branch<T>> branches_;
  Tensor<T> head_weight_;
  Tensor<T> head_bias_;
  TensorList<T> tensors_;
};

extern template class Network<float>;
extern template class Network<double>;

}  // namespace tstcnn
