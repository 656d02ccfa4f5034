// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <stdexcept>
#include <string>

namespace linedet {

/// Plain stochastic gradient descent update: params <- params - lr * grads.
template <typename T>
void sgd_step(std::span<T> params, std::span<const T> grads, T lr) {
    if (params.size() != grads.size())
        throw std::invalid_argument("sgd_step: parameter view has " +
                                    std::to_string(params.size()) + " elements, gradient view " +
                                    std::to_string(grads.size()));
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grads[i];
}

}  // namespace linedet
