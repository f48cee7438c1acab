#include "tstcnn/ops.hpp"

#include <algorithm>

namespace tstcnn::ops {
namespace {

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
}

// Maps every input flat index to its flat index in the reduced output.
std::vector<std::size_t> reduction_index(const Shape& shape, const std::vector<std::size_t>& axes,
                                         Shape& out_shape) {
  std::vector<bool> reduced(shape.size(), false);
  for (auto a : axes) {
    if (a >= shape.size())
      throw DimensionError("reduce: axis " + std::to_string(a) + " invalid for shape " +
                           to_string(shape));
    reduced[a] = true;
  }
  out_shape.clear();
  for (std::size_t d = 0; d < shape.size(); ++d)
    if (!reduced[d]) out_shape.push_back(shape[d]);
  if (out_shape.empty()) out_shape.push_back(1);

  // Output strides for the kept axes, expressed per input axis (0 when reduced).
  std::vector<std::size_t> ostride(shape.size(), 0);
  std::size_t s = 1;
  for (std::size_t d = shape.size(); d-- > 0;) {
    if (!reduced[d]) {
      ostride[d] = s;
      s *= shape[d];
    }
  }
  std::vector<std::size_t> map(numel(shape));
  std::vector<std::size_t> idx(shape.size(), 0);
  for (std::size_t i = 0; i < map.size(); ++i) {
    std::size_t o = 0;
    for (std::size_t d = 0; d < shape.size(); ++d) o += idx[d] * ostride[d];
    map[i] = o;
    for (std::size_t d = shape.size(); d-- > 0;) {
      if (++idx[d] < shape[d]) break;
      idx[d] = 0;
    }
  }
  return map;
}

}  // namespace

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a, b);
  auto x = a.data();
  auto y = b.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  Tensor<T> r(a.shape(), std::move(out));
  if (tape.wants({&a, &b})) {
    tape.record("add", {a, b}, r, [a, b](std::span<const T> g) mutable {
      if (a.requires_grad()) a.accumulate_grad(g);
      if (b.requires_grad()) b.accumulate_grad(g);
    });
  }
  return r;
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  auto x = a.data();
  auto y = b.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  Tensor<T> r(a.shape(), std::move(out));
  if (tape.wants({&a, &b})) {
    tape.record("mul", {a, b}, r, [a, b](std::span<const T> g) mutable {
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        auto y = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        auto x = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
      }
    });
  }
  return r;
}

template <typename T>
Tensor<T> add_scalar(Tape<T>& tape, const Tensor<T>& a, T s) {
  auto x = a.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + s;
  Tensor<T> r(a.shape(), std::move(out));
  if (tape.wants({&a})) {
    tape.record("add_scalar", {a}, r, [a](std::span<const T> g) mutable { a.accumulate_grad(g); });
  }
  return r;
}

template <typename T>
Tensor<T> mul_scalar(Tape<T>& tape, const Tensor<T>& a, T s) {
  auto x = a.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * s;
  Tensor<T> r(a.shape(), std::move(out));
  if (tape.wants({&a})) {
    tape.record("mul_scalar", {a}, r, [a, s](std::span<const T> g) mutable {
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    });
  }
  return r;
}

template <typename T>
Tensor<T> reduce_sum(Tape<T>& tape, const Tensor<T>& x, std::vector<std::size_t> axes) {
  Shape out_shape;
  auto map = reduction_index(x.shape(), axes, out_shape);
  std::vector<T> out(numel(out_shape), T(0));
  auto v = x.data();
  for (std::size_t i = 0; i < v.size(); ++i) out[map[i]] += v[i];
  Tensor<T> r(out_shape, std::move(out));
  if (tape.wants({&x})) {
    tape.record("reduce_sum", {x}, r, [x, map = std::move(map)](std::span<const T> g) mutable {
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[map[i]];
    });
  }
  return r;
}

template <typename T>
Tensor<T> reduce_mean(Tape<T>& tape, const Tensor<T>& x, std::vector<std::size_t> axes) {
  Shape out_shape;
  auto map = reduction_index(x.shape(), axes, out_shape);
  const T inv = T(1) / static_cast<T>(x.numel() / numel(out_shape));
  std::vector<T> out(numel(out_shape), T(0));
  auto v = x.data();
  for (std::size_t i = 0; i < v.size(); ++i) out[map[i]] += v[i];
  for (auto& o : out) o *= inv;
  Tensor<T> r(out_shape, std::move(out));
  if (tape.wants({&x})) {
    tape.record("reduce_mean", {x}, r,
                [x, inv, map = std::move(map)](std::span<const T> g) mutable {
                  auto gx = x.mutable_grad();
                  for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[map[i]] * inv;
                });
  }
  return r;
}

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
  std::vector<std::size_t> axes(x.rank());
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  return reduce_sum(tape, x, std::move(axes));
}

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel())
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " +
                         to_string(shape));
  auto v = x.data();
  Tensor<T> r(std::move(shape), std::vector<T>(v.begin(), v.end()));
  if (tape.wants({&x})) {
    tape.record("reshape", {x}, r, [x](std::span<const T> g) mutable { x.accumulate_grad(g); });
  }
  return r;
}

template <typename T>
Tensor<T> weighted_sum(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w) {
  require_same_shape("weighted_sum", x, w);
  auto a = x.data();
  auto b = w.data();
  T acc = T(0);
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  Tensor<T> r(Shape{1}, acc);
  if (tape.wants({&x})) {
    tape.record("weighted_sum", {x}, r, [x, w](std::span<const T> g) mutable {
      auto gx = x.mutable_grad();
      auto b = w.data();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0] * b[i];
    });
  }
  return r;
}

#define TSTCNN_INSTANTIATE_OPS(T)                                                     \
  template Tensor<T> add(Tape<T>&, const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> mul(Tape<T>&, const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> add_scalar(Tape<T>&, const Tensor<T>&, T);                       \
  template Tensor<T> mul_scalar(Tape<T>&, const Tensor<T>&, T);                       \
  template Tensor<T> reduce_sum(Tape<T>&, const Tensor<T>&, std::vector<std::size_t>); \
  template Tensor<T> reduce_mean(Tape<T>&, const Tensor<T>&, std::vector<std::size_t>); \
  template Tensor<T> sum(Tape<T>&, const Tensor<T>&);                                 \
  template Tensor<T> reshape(Tape<T>&, const Tensor<T>&, Shape);                      \
  template Tensor<T> weighted_sum(Tape<T>&, const Tensor<T>&, const Tensor<T>&);

TSTCNN_INSTANTIATE_OPS(float)
TSTCNN_INSTANTIATE_OPS(double)

}  // namespace tstcnn::ops
