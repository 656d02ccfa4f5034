// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <utility>

#include "linedet/rng.hpp"
#include "linedet/tensor.hpp"

namespace linedet {

/// Inverted dropout: in training mode each unit is zeroed with probability p
/// and survivors are scaled by 1/(1-p), so the evaluation path is the
/// identity. The returned mask already contains the survivor scaling and is
/// what backward multiplies by.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> dropout_forward(const Tensor<T>& x, double p, Rng& rng,
                                                bool training) {
    if (p < 0.0 || p >= 1.0)
        throw std::invalid_argument("dropout: p must lie in [0, 1), got " + std::to_string(p));
    Tensor<T> mask(x.channels, x.height, x.width);
    Tensor<T> out = x;
    if (!training || p == 0.0) {
        mask.fill(T(1));
        return {std::move(out), std::move(mask)};
    }
    const T keep_scale = T(1.0 / (1.0 - p));
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        const T m = rng.bernoulli(p) ? T(0) : keep_scale;
        mask.data[i] = m;
        out.data[i] = x.data[i] * m;
    }
    return {std::move(out), std::move(mask)};
}

template <typename T>
Tensor<T> dropout_backward(const Tensor<T>& grad_out, const Tensor<T>& mask) {
    if (!grad_out.same_shape(mask))
        throw std::invalid_argument("dropout_backward: gradient shape " + grad_out.shape_str() +
                                    " does not match mask shape " + mask.shape_str());
    Tensor<T> gx = grad_out;
    for (std::size_t i = 0; i < gx.data.size(); ++i) gx.data[i] *= mask.data[i];
    return gx;
}

}  // namespace linedet
