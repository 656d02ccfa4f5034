// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <stdexcept>

#include "linedet/tensor.hpp"

namespace linedet {

enum class ActKind { Sigmoid, Tanh };

/// Numerically stable logistic sigmoid.
template <typename T>
inline T sigmoid(T x) {
    if (x >= T(0)) {
        T e = std::exp(-x);
        return T(1) / (T(1) + e);
    }
    T e = std::exp(x);
    return e / (T(1) + e);
}

template <typename T>
Tensor<T> activation_forward(const Tensor<T>& x, ActKind kind) {
    Tensor<T> y = x;
    if (kind == ActKind::Sigmoid) {
        for (T& v : y.data) v = sigmoid(v);
    } else {
        for (T& v : y.data) v = std::tanh(v);
    }
    return y;
}

/// Gradient with respect to the pre-activation, expressed through the
/// activation output y: sigmoid' = y(1-y), tanh' = 1-y^2.
template <typename T>
Tensor<T> activation_backward(const Tensor<T>& y, const Tensor<T>& grad_y, ActKind kind) {
    if (!y.same_shape(grad_y))
        throw std::invalid_argument("activation_backward: output shape " + y.shape_str() +
                                    " vs upstream gradient shape " + grad_y.shape_str());
    Tensor<T> gx = grad_y;
    if (kind == ActKind::Sigmoid) {
        for (std::size_t i = 0; i < gx.data.size(); ++i)
            gx.data[i] *= y.data[i] * (T(1) - y.data[i]);
    } else {
        for (std::size_t i = 0; i < gx.data.size(); ++i)
            gx.data[i] *= T(1) - y.data[i] * y.data[i];
    }
    return gx;
}

}  // namespace linedet
