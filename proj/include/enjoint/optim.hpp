#pragma once

#include <utility>

#include "enjoint/tensor.hpp"

namespace enjoint {

/// In-place momentum SGD: v = momentum * v + g; p = p - lr * v.
/// Throws NumericError (leaving everything untouched) if g has a non-finite entry.
template <typename T>
void sgd_update_inplace(Tensor<T>& param, const Tensor<T>& grad, Tensor<T>& velocity, T lr, T momentum) {
  require_same_shape(param.shape(), grad.shape(), "sgd_update");
  require_same_shape(param.shape(), velocity.shape(), "sgd_update");
  if (!grad.all_finite()) throw NumericError("sgd_update: non-finite gradient");
  T* p = param.ptr();
  T* v = velocity.ptr();
  const T* g = grad.ptr();
  for (std::size_t i = 0; i < param.size(); ++i) {
    v[i] = momentum * v[i] + g[i];
    p[i] -= lr * v[i];
  }
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> sgd_update(Tensor<T> param, const Tensor<T>& grad, Tensor<T> velocity, T lr,
                                           T momentum) {
  sgd_update_inplace(param, grad, velocity, lr, momentum);
  return {std::move(param), std::move(velocity)};
}

}  // namespace enjoint
