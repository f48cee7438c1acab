#include "tstcnn/tape.hpp"

namespace tstcnn {

template <typename T>
std::span<const T> GradientMap<T>::at(const Tensor<T>& t) const {
  if (!contains(t)) throw ContractError("tensor did not receive a gradient");
  return t.grad();
}

template <typename T>
bool Tape<T>::wants(std::initializer_list<const Tensor<T>*> inputs) const {
  if (!recording_) return false;
  for (const auto* t : inputs)
    if (t && t->defined() && t->requires_grad()) return true;
  return false;
}

template <typename T>
void Tape<T>::record(std::string_view op, std::vector<Tensor<T>> inputs, Tensor<T>& output,
                     BackwardFn backward) {
  output.set_requires_grad(true);
  producer_[output.id()] = nodes_.size();
  nodes_.push_back(Node{op, std::move(inputs), output, std::move(backward)});
}

template <typename T>
long Tape<T>::producer_of(const Tensor<T>& t) const {
  auto it = producer_.find(t.id());
  return it == producer_.end() ? -1 : static_cast<long>(it->second);
}

template <typename T>
GradientMap<T> Tape<T>::backward(const Tensor<T>& root) {
  if (!root.defined() || root.numel() != 1)
    throw ContractError("backward() requires a scalar root, got shape " +
                        (root.defined() ? to_string(root.shape()) : std::string("<undefined>")));

  GradientMap<T> reached;
  for (auto& node : nodes_) node.output.clear_grad();

  long start = producer_of(root);
  if (start < 0) {
    if (root.requires_grad()) {
      Tensor<T> r = root;
      const T one[1] = {T(1)};
      r.accumulate_grad(one);
      reached.add(root);
    }
    return reached;
  }

  nodes_[static_cast<std::size_t>(start)].output.mutable_grad()[0] = T(1);
  std::vector<char> live(nodes_.size(), 0);
  live[static_cast<std::size_t>(start)] = 1;

  for (long i = start; i >= 0; --i) {
    auto& node = nodes_[static_cast<std::size_t>(i)];
    if (!live[static_cast<std::size_t>(i)] || !node.output.has_grad()) continue;
    node.backward(node.output.grad());
    for (const auto& in : node.inputs) {
      if (!in.defined() || !in.requires_grad()) continue;
      long p = producer_of(in);
      if (p >= 0)
        live[static_cast<std::size_t>(p)] = 1;
      else
        reached.add(in);
    }
  }
  return reached;
}

template <typename T>
void Tape<T>::clear() {
  nodes_.clear();
  producer_.clear();
}

template class GradientMap<float>;
template class GradientMap<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace tstcnn
