#include "tstcnn/model.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "tstcnn/ops.hpp"
#include "tstcnn/rng.hpp"

namespace tstcnn {

std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::rgb: return "rgb";
    case ModelKind::flow: return "flow";
    case ModelKind::twin: return "twin";
  }
  return "?";
}

std::string to_string(BlockMode m) {
  switch (m) {
    case BlockMode::none: return "none";
    case BlockMode::residual: return "residual";
    case BlockMode::attention: return "attention";
  }
  return "?";
}

ModelKind parse_model_kind(const std::string& s) {
  if (s == "rgb") return ModelKind::rgb;
  if (s == "flow") return ModelKind::flow;
  if (s == "twin") return ModelKind::twin;
  throw ConfigError("unknown model kind '" + s + "' (expected rgb, flow or twin)");
}

BlockMode parse_block_mode(const std::string& s) {
  if (s == "none") return BlockMode::none;
  if (s == "residual") return BlockMode::residual;
  if (s == "attention") return BlockMode::attention;
  throw ConfigError("unknown block mode '" + s + "' (expected none, residual or attention)");
}

ModelConfig ModelConfig::full_scale(ModelKind kind, BlockMode mode, std::size_t n_blocks) {
  ModelConfig c;
  c.kind = kind;
  c.frames = 100;
  c.height = 120;
  c.width = 120;
  c.n_classes = 21;
  c.block_mode = mode;
  c.n_blocks = mode == BlockMode::none ? 0 : n_blocks;
  return c;
}

ModelConfig ModelConfig::desk_scale(ModelKind kind, BlockMode mode, std::size_t n_blocks) {
  ModelConfig c;
  c.kind = kind;
  c.n_classes = 6;
  c.block_mode = mode;
  c.n_blocks = mode == BlockMode::none ? 0 : n_blocks;
  return c;
}

nn::Extents3 ModelConfig::extents_after_pool(std::size_t stage) const {
  nn::Extents3 e{frames, height, width};
  for (std::size_t s = 0; s < stage; ++s)
    for (auto& v : e) {
      if (v < 2)
        throw ConfigError("input " + std::to_string(frames) + "x" + std::to_string(height) + "x" +
                          std::to_string(width) + " collapses under pooling stage " +
                          std::to_string(s + 1));
      v /= 2;
    }
  return e;
}

std::size_t ModelConfig::fc_inputs() const {
  auto e = extents_after_pool(3);
  return filters[2] * e[0] * e[1] * e[2];
}

void ModelConfig::validate() const {
  if (n_classes < 2) throw ConfigError("n_classes must be >= 2");
  if (n_blocks > 3) throw ConfigError("n_blocks must be <= 3 (one per pooling layer)");
  if (block_mode == BlockMode::none && n_blocks != 0)
    throw ConfigError("n_blocks must be 0 when block mode is none");
  if (block_mode != BlockMode::none && n_blocks == 0)
    throw ConfigError("block mode " + to_string(block_mode) + " needs n_blocks >= 1");
  if (kernel % 2 == 0) throw ConfigError("kernel extent must be odd");
  if (fc_width == 0) throw ConfigError("fc_width must be positive");
  for (auto f : filters)
    if (f < 4) throw ConfigError("filter counts must be >= 4");
  if (rgb_channels == 0 || flow_channels == 0) throw ConfigError("input channels must be positive");
  (void)extents_after_pool(3);
  if (block_mode == BlockMode::attention) {
    for (std::size_t s = 1; s <= n_blocks; ++s) {
      auto e = extents_after_pool(s);
      for (auto v : e)
        if (v < AttentionBlock<float>::kMinExtent)
          throw ConfigError("attention block after pooling " + std::to_string(s) +
                            " sees extents " + std::to_string(e[0]) + "x" + std::to_string(e[1]) +
                            "x" + std::to_string(e[2]) + "; each must be >= " +
                            std::to_string(AttentionBlock<float>::kMinExtent));
    }
  }
}

// ---------------------------------------------------------------- describe

namespace {

void spec_conv(std::vector<ParamSpec>& out, const std::string& p, std::size_t o, std::size_t i,
               std::size_t k) {
  out.push_back({p + "/weight", {o, i, k, k, k}});
  out.push_back({p + "/bias", {o}});
}

void spec_bn(std::vector<ParamSpec>& out, const std::string& p, std::size_t c) {
  out.push_back({p + "/gamma", {c}});
  out.push_back({p + "/beta", {c}});
  out.push_back({p + "/running_mean", {c}, false});
  out.push_back({p + "/running_var", {c}, false});
}

void spec_fconv(std::vector<ParamSpec>& out, const std::string& p, std::size_t i, std::size_t o,
                std::size_t k) {
  spec_bn(out, p + "/bn", i);
  spec_conv(out, p + "/conv", o, i, k);
}

void spec_res(std::vector<ParamSpec>& out, const std::string& p, std::size_t n) {
  const std::size_t h = n / 4;
  spec_fconv(out, p + "/stage1", n, h, 1);
  spec_fconv(out, p + "/stage2", h, h, 3);
  spec_fconv(out, p + "/stage3", h, n, 1);
}

void spec_attention(std::vector<ParamSpec>& out, const std::string& p, std::size_t n) {
  spec_res(out, p + "/initial", n);
  for (int i = 1; i <= 2; ++i) spec_res(out, p + "/trunk" + std::to_string(i), n);
  for (int i = 1; i <= 3; ++i) spec_res(out, p + "/down" + std::to_string(i), n);
  for (int i = 1; i <= 2; ++i) spec_res(out, p + "/skip" + std::to_string(i), n);
  for (int i = 1; i <= 3; ++i) spec_res(out, p + "/up" + std::to_string(i), n);
  for (int i = 1; i <= 2; ++i) spec_fconv(out, p + "/head" + std::to_string(i), n, n, 1);
  spec_res(out, p + "/final", n);
}

std::vector<std::pair<std::string, std::size_t>> branch_inputs(const ModelConfig& c) {
  switch (c.kind) {
    case ModelKind::rgb: return {{"rgb", c.rgb_channels}};
    case ModelKind::flow: return {{"flow", c.flow_channels}};
    case ModelKind::twin: return {{"rgb", c.rgb_channels}, {"flow", c.flow_channels}};
  }
  return {};
}

std::string block_prefix(const std::string& branch, std::size_t i) {
  return branch + "/block" + std::to_string(i + 1);
}

}  // namespace

std::vector<ParamSpec> describe(const ModelConfig& config) {
  config.validate();
  std::vector<ParamSpec> out;
  for (const auto& [name, channels] : branch_inputs(config)) {
    std::size_t in = channels;
    for (std::size_t i = 0; i < 3; ++i) {
      spec_conv(out, name + "/conv" + std::to_string(i + 1), config.filters[i], in, config.kernel);
      in = config.filters[i];
      if (i < config.n_blocks) {
        if (config.block_mode == BlockMode::residual) spec_res(out, block_prefix(name, i), in);
        if (config.block_mode == BlockMode::attention) spec_attention(out, block_prefix(name, i), in);
      }
    }
    out.push_back({name + "/fc/weight", {config.fc_width, config.fc_inputs()}, true, true});
    out.push_back({name + "/fc/bias", {config.fc_width}, true, true});
  }
  if (config.kind == ModelKind::twin) {
    out.push_back({"fusion/weight", {config.n_classes, config.fc_width, config.fc_width}, true, true});
    out.push_back({"fusion/bias", {config.n_classes}, true, true});
  } else {
    out.push_back({"head/weight", {config.n_classes, config.fc_width}, true, true});
    out.push_back({"head/bias", {config.n_classes}, true, true});
  }
  return out;
}

std::size_t count_parameters(const ModelConfig& config, bool include_fc) {
  std::size_t n = 0;
  for (const auto& s : describe(config))
    if (s.learnable && (include_fc || !s.fully_connected)) n += numel(s.shape);
  return n;
}

std::string manifest_text(const std::vector<ParamSpec>& specs) {
  std::ostringstream os;
  for (const auto& s : specs) {
    os << s.path << '\t';
    for (std::size_t i = 0; i < s.shape.size(); ++i) os << (i ? "x" : "") << s.shape[i];
    os << '\t' << (s.learnable ? numel(s.shape) : 0) << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------- network

template <typename T>
Network<T>::Network(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  for (const auto& [name, channels] : branch_inputs(config_)) {
    Branch<T> br;
    br.name = name;
    std::size_t in = channels;
    for (std::size_t i = 0; i < 3; ++i) {
      const std::size_t k = config_.kernel;
      br.convs[i] = nn::Conv3dParams<T>::make(config_.filters[i], in, {k, k, k}, true);
      in = config_.filters[i];
      if (i < config_.n_blocks) {
        if (config_.block_mode == BlockMode::residual) br.residual.push_back(ResidualBlock<T>::make(in));
        if (config_.block_mode == BlockMode::attention) br.attention.push_back(AttentionBlock<T>::make(in));
      }
    }
    br.fc_weight = Tensor<T>(Shape{config_.fc_width, config_.fc_inputs()}, T(0), true);
    br.fc_bias = Tensor<T>(Shape{config_.fc_width}, T(0), true);
    branches_.push_back(std::move(br));
  }
  if (config_.kind == ModelKind::twin) {
    head_weight_ = Tensor<T>(Shape{config_.n_classes, config_.fc_width, config_.fc_width}, T(0), true);
  } else {
    head_weight_ = Tensor<T>(Shape{config_.n_classes, config_.fc_width}, T(0), true);
  }
  head_bias_ = Tensor<T>(Shape{config_.n_classes}, T(0), true);

  for (const auto& br : branches_) {
    for (std::size_t i = 0; i < 3; ++i) {
      const std::string p = br.name + "/conv" + std::to_string(i + 1);
      tensors_.push_back({p + "/weight", br.convs[i].weight});
      tensors_.push_back({p + "/bias", br.convs[i].bias});
      if (i < br.residual.size()) br.residual[i].append_tensors(block_prefix(br.name, i), tensors_);
      if (i < br.attention.size()) br.attention[i].append_tensors(block_prefix(br.name, i), tensors_);
    }
    tensors_.push_back({br.name + "/fc/weight", br.fc_weight, true, true});
    tensors_.push_back({br.name + "/fc/bias", br.fc_bias, true, true});
  }
  const std::string head = config_.kind == ModelKind::twin ? "fusion" : "head";
  tensors_.push_back({head + "/weight", head_weight_, true, true});
  tensors_.push_back({head + "/bias", head_bias_, true, true});
}

template <typename T>
void Network<T>::initialize(std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, {0x1417ull}));
  auto ends_with = [](const std::string& s, const char* suffix) {
    const std::string x(suffix);
    return s.size() >= x.size() && s.compare(s.size() - x.size(), x.size(), x) == 0;
  };
  for (auto& e : tensors_) {
    auto v = e.tensor.mutable_data();
    if (ends_with(e.path, "/stage3/conv/weight")) {
      std::fill(v.begin(), v.end(), T(0));
    } else if (ends_with(e.path, "/weight")) {
      he_normal(e.tensor, rng);
    } else if (ends_with(e.path, "/gamma") || ends_with(e.path, "/running_var")) {
      std::fill(v.begin(), v.end(), T(1));
    } else {
      std::fill(v.begin(), v.end(), T(0));
    }
  }
}

template <typename T>
TensorList<T> Network<T>::parameters() const {
  TensorList<T> out;
  for (const auto& e : tensors_)
    if (e.learnable) out.push_back(e);
  return out;
}

template <typename T>
std::string Network<T>::manifest() const {
  std::vector<ParamSpec> specs;
  for (const auto& e : tensors_) specs.push_back({e.path, e.tensor.shape(), e.learnable, e.fully_connected});
  return manifest_text(specs);
}

template <typename T>
Tensor<T> Network<T>::forward_branch(Tape<T>& tape, Branch<T>& br, const Tensor<T>& x,
                                     nn::Mode mode, std::vector<MaskDump<T>>& masks) {
  Tensor<T> h = x;
  for (std::size_t i = 0; i < 3; ++i) {
    h = nn::conv3d(tape, h, br.convs[i]);
    h = nn::relu(tape, h);
    h = nn::maxpool3d(tape, h);
    if (i < br.residual.size()) h = br.residual[i].forward(tape, h, mode);
    if (i < br.attention.size()) {
      auto out = br.attention[i].forward(tape, h, mode);
      masks.push_back({br.name, i + 1, out.mask});
      h = out.y;
    }
  }
  const std::size_t B = h.dim(0);
  h = ops::reshape(tape, h, Shape{B, h.numel() / B});
  return nn::relu(tape, nn::linear(tape, h, br.fc_weight, br.fc_bias));
}

template <typename T>
ModelOutput<T> Network<T>::forward(Tape<T>& tape, const ModelInput<T>& input, nn::Mode mode) {
  auto check = [&](const Tensor<T>& x, std::size_t channels, const char* what) {
    if (!x.defined())
      throw DimensionError(std::string(what) + " input required by a " + to_string(config_.kind) +
                           " model");
    if (x.rank() != 5 || x.dim(1) != channels || x.dim(2) != config_.frames ||
        x.dim(3) != config_.height || x.dim(4) != config_.width)
      throw DimensionError(std::string(what) + " input " + to_string(x.shape()) +
                           " does not match (B, " + std::to_string(channels) + ", " +
                           std::to_string(config_.frames) + ", " + std::to_string(config_.height) +
                           ", " + std::to_string(config_.width) + ")");
  };

  ModelOutput<T> out;
  std::vector<Tensor<T>> features;
  for (auto& br : branches_) {
    const bool is_rgb = br.name == "rgb";
    const Tensor<T>& x = is_rgb ? input.rgb : input.flow;
    check(x, is_rgb ? config_.rgb_channels : config_.flow_channels, is_rgb ? "rgb" : "flow");
    features.push_back(forward_branch(tape, br, x, mode, out.masks));
  }
  if (features.size() == 2) {
    if (features[0].dim(0) != features[1].dim(0))
      throw DimensionError("rgb and flow batch sizes differ");
    const T scale = T(1) / std::sqrt(static_cast<T>(config_.fc_width));
    auto a = ops::mul_scalar(tape, features[0], scale);
    out.logits = nn::bilinear(tape, a, features[1], head_weight_, head_bias_);
  } else {
    out.logits = nn::linear(tape, features[0], head_weight_, head_bias_);
  }
  Tape<T> detached(false);
  out.probs = nn::softmax(detached, out.logits);
  return out;
}

template class Network<float>;
template class Network<double>;

}  // namespace tstcnn
