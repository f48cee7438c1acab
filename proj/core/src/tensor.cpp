#include "tstcnn/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace tstcnn {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

void validate_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have rank >= 1");
  if (std::any_of(shape.begin(), shape.end(), [](auto e) { return e == 0; }))
    throw DimensionError("tensor extents must be positive, got " + to_string(shape));
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill, bool requires_grad) : impl_(std::make_shared<Impl>()) {
  validate_shape(shape);
  impl_->data.assign(tstcnn::numel(shape), fill);
  impl_->shape = std::move(shape);
  impl_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad)
    : impl_(std::make_shared<Impl>()) {
  validate_shape(shape);
  if (tstcnn::numel(shape) != values.size())
    throw DimensionError("shape " + to_string(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  impl_->shape = std::move(shape);
  impl_->data.assign(values.begin(), values.end());
  impl_->requires_grad = requires_grad;
}

template <typename T>
const typename Tensor<T>::Impl& Tensor<T>::impl() const {
  if (!impl_) throw ContractError("use of an undefined tensor");
  return *impl_;
}

template <typename T>
typename Tensor<T>::Impl& Tensor<T>::impl() {
  if (!impl_) throw ContractError("use of an undefined tensor");
  return *impl_;
}

template <typename T>
typename Tensor<T>::Impl& Tensor<T>::shared() const {
  if (!impl_) throw ContractError("use of an undefined tensor");
  return *impl_;
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  return impl().shape;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size())
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + to_string(s));
  return s[axis];
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
  return impl().data;
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  return impl().data;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
  return impl().data[0];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return impl().requires_grad;
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  impl().requires_grad = on;
  return *this;
}

template <typename T>
bool Tensor<T>::has_grad() const {
  return !impl().grad.empty();
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  if (!has_grad()) throw ContractError("tensor " + to_string(shape()) + " has no gradient");
  return impl().grad;
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() const {
  auto& i = shared();
  if (i.grad.empty()) i.grad.assign(i.data.size(), T(0));
  return i.grad;
}

template <typename T>
void Tensor<T>::clear_grad() const {
  auto& g = shared().grad;
  g.clear();
  g.shrink_to_fit();
}

template <typename T>
void Tensor<T>::accumulate_grad(std::span<const T> delta) const {
  auto& slot = shared();
  if (slot.grad.empty() && delta.size() == slot.data.size()) {
    slot.grad.assign(delta.begin(), delta.end());
    return;
  }
  auto g = mutable_grad();
  if (delta.size() != g.size())
    throw DimensionError("gradient of size " + std::to_string(delta.size()) +
                         " for tensor " + to_string(shape()));
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor out(shape(), T(0), requires_grad());
  out.impl_->data = impl().data;
  return out;
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace tstcnn
