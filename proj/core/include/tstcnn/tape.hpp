#pragma once

#include <functional>
#include <initializer_list>
#include <span>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "tstcnn/tensor.hpp"

namespace tstcnn {

/// Leaf tensors that received gradient from one backward pass, in the order
/// they were reached.
template <typename T>
class GradientMap {
 public:
  bool empty() const { return leaves_.empty(); }
  std::size_t size() const { return leaves_.size(); }
  bool contains(const Tensor<T>& t) const { return ids_.contains(t.id()); }
  std::span<const T> at(const Tensor<T>& t) const;
  const std::vector<Tensor<T>>& tensors() const { return leaves_; }

  void add(const Tensor<T>& t) {
    if (ids_.insert(t.id()).second) leaves_.push_back(t);
  }

 private:
  std::vector<Tensor<T>> leaves_;
  std::unordered_set<const void*> ids_;
};

/**
 * Append-only record of differentiable operations.
 *
 * Operations append a node when the tape is recording and at least one of
 * their inputs requires a gradient. Nodes are stored in creation order, which
 * is a topological order of the computation. backward() can be replayed: the
 * gradients of intermediate results are reset at the start of every pass
 * while leaf gradients accumulate.
 */
template <typename T>
class Tape {
 public:
  /// Receives the gradient of the node output and accumulates into the
  /// gradient slots of whichever inputs require it.
  using BackwardFn = std::function<void(std::span<const T> grad_out)>;

  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }

  /// True when an op over `inputs` must be recorded.
  bool wants(std::initializer_list<const Tensor<T>*> inputs) const;

  /// Appends a node producing `output` (marked as requiring grad).
  void record(std::string_view op, std::vector<Tensor<T>> inputs, Tensor<T>& output,
              BackwardFn backward);

  GradientMap<T> backward(const Tensor<T>& root);

  std::size_t size() const { return nodes_.size(); }
  std::string_view op_name(std::size_t i) const { return nodes_.at(i).op; }
  /// Index of the node that produced `t`, or -1 for leaves.
  long producer_of(const Tensor<T>& t) const;
  const std::vector<Tensor<T>>& inputs_of(std::size_t i) const { return nodes_.at(i).inputs; }
  void clear();

 private:
  struct Node {
    std::string_view op;
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    BackwardFn backward;
  };

  bool recording_;
  std::vector<Node> nodes_;
  std::unordered_map<const void*, std::size_t> producer_;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace tstcnn
