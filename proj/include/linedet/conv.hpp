// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "linedet/tensor.hpp"

namespace linedet {

/// Weights and strides of one valid (unpadded) convolution layer.
/// weights are laid out [out][in][ky][kx], bias is one value per out channel.
template <typename T>
struct ConvParams {
    int out_channels = 0;
    int in_channels = 0;
    int kernel_h = 0;
    int kernel_w = 0;
    int stride_y = 1;
    int stride_x = 1;

    std::vector<T> weights;
    std::vector<T> bias;

    ConvParams() = default;
    ConvParams(int oc, int ic, int kh, int kw, int sy, int sx)
        : out_channels(oc), in_channels(ic), kernel_h(kh), kernel_w(kw),
          stride_y(sy), stride_x(sx) {
        if (oc < 1 || ic < 1 || kh < 1 || kw < 1 || sy < 1 || sx < 1)
            throw std::invalid_argument("ConvParams: all dimensions and strides must be >= 1");
        weights.assign(static_cast<std::size_t>(oc) * ic * kh * kw, T(0));
        bias.assign(static_cast<std::size_t>(oc), T(0));
    }

    std::int64_t parameter_count() const {
        return static_cast<std::int64_t>(out_channels) * in_channels * kernel_h * kernel_w +
               out_channels;
    }

    T& weight_at(int oc, int ic, int ky, int kx) {
        return weights[((static_cast<std::size_t>(oc) * in_channels + ic) * kernel_h + ky) *
                           kernel_w + kx];
    }
    T weight_at(int oc, int ic, int ky, int kx) const {
        return weights[((static_cast<std::size_t>(oc) * in_channels + ic) * kernel_h + ky) *
                           kernel_w + kx];
    }

    /// Parameter chunks in serialization order.
    template <typename F>
    void visit(F&& f) {
        f(weights);
        f(bias);
    }
    template <typename F>
    void visit(F&& f) const {
        f(weights);
        f(bias);
    }
};

/// Valid-convolution output size: floor((in - kernel) / stride) + 1.
inline std::pair<int, int> conv_output_dims(int in_h, int in_w, int kernel_h, int kernel_w,
                                            int stride_y, int stride_x) {
    if (in_h < kernel_h)
        throw std::invalid_argument("conv: input height " + std::to_string(in_h) +
                                    " smaller than kernel height " + std::to_string(kernel_h));
    if (in_w < kernel_w)
        throw std::invalid_argument("conv: input width " + std::to_string(in_w) +
                                    " smaller than kernel width " + std::to_string(kernel_w));
    return {(in_h - kernel_h) / stride_y + 1, (in_w - kernel_w) / stride_x + 1};
}

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const ConvParams<T>& p) {
    if (input.channels != p.in_channels)
        throw std::invalid_argument("conv2d_forward: input has " +
                                    std::to_string(input.channels) + " channels, layer expects " +
                                    std::to_string(p.in_channels));
    auto [oh, ow] = conv_output_dims(input.height, input.width, p.kernel_h, p.kernel_w,
                                     p.stride_y, p.stride_x);
    Tensor<T> out(p.out_channels, oh, ow);
    const int iw = input.width;
    for (int oc = 0; oc < p.out_channels; ++oc) {
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                T acc = p.bias[oc];
                const int y0 = oy * p.stride_y;
                const int x0 = ox * p.stride_x;
                for (int ic = 0; ic < p.in_channels; ++ic) {
                    const T* in_base = input.data.data() +
                                       (static_cast<std::size_t>(ic) * input.height + y0) * iw + x0;
                    const T* w_base = p.weights.data() +
                                      (static_cast<std::size_t>(oc) * p.in_channels + ic) *
                                          p.kernel_h * p.kernel_w;
                    for (int ky = 0; ky < p.kernel_h; ++ky) {
                        const T* in_row = in_base + static_cast<std::size_t>(ky) * iw;
                        const T* w_row = w_base + static_cast<std::size_t>(ky) * p.kernel_w;
                        for (int kx = 0; kx < p.kernel_w; ++kx) acc += in_row[kx] * w_row[kx];
                    }
                }
                out.at(oc, oy, ox) = acc;
            }
        }
    }
    return out;
}

template <typename T>
struct ConvGrads {
    Tensor<T> input;
    ConvParams<T> params;
};

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& input, const ConvParams<T>& p,
                             const Tensor<T>& grad_out) {
    if (input.channels != p.in_channels)
        throw std::invalid_argument("conv2d_backward: input has " +
                                    std::to_string(input.channels) + " channels, layer expects " +
                                    std::to_string(p.in_channels));
    auto [oh, ow] = conv_output_dims(input.height, input.width, p.kernel_h, p.kernel_w,
                                     p.stride_y, p.stride_x);
    require_shape(grad_out, p.out_channels, oh, ow, "conv2d_backward: grad_out");

    ConvGrads<T> g;
    g.input = Tensor<T>(input.channels, input.height, input.width);
    g.params = ConvParams<T>(p.out_channels, p.in_channels, p.kernel_h, p.kernel_w,
                             p.stride_y, p.stride_x);
    const int iw = input.width;
    for (int oc = 0; oc < p.out_channels; ++oc) {
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                const T go = grad_out.at(oc, oy, ox);
                if (go == T(0)) continue;
                g.params.bias[oc] += go;
                const int y0 = oy * p.stride_y;
                const int x0 = ox * p.stride_x;
                for (int ic = 0; ic < p.in_channels; ++ic) {
                    const T* in_base = input.data.data() +
                                       (static_cast<std::size_t>(ic) * input.height + y0) * iw + x0;
                    T* gin_base = g.input.data.data() +
                                  (static_cast<std::size_t>(ic) * input.height + y0) * iw + x0;
                    const std::size_t w_off =
                        (static_cast<std::size_t>(oc) * p.in_channels + ic) * p.kernel_h *
                        p.kernel_w;
                    const T* w_base = p.weights.data() + w_off;
                    T* gw_base = g.params.weights.data() + w_off;
                    for (int ky = 0; ky < p.kernel_h; ++ky) {
                        const T* in_row = in_base + static_cast<std::size_t>(ky) * iw;
                        T* gin_row = gin_base + static_cast<std::size_t>(ky) * iw;
                        const T* w_row = w_base + static_cast<std::size_t>(ky) * p.kernel_w;
                        T* gw_row = gw_base + static_cast<std::size_t>(ky) * p.kernel_w;
                        for (int kx = 0; kx < p.kernel_w; ++kx) {
                            gw_row[kx] += go * in_row[kx];
                            gin_row[kx] += go * w_row[kx];
                        }
                    }
                }
            }
        }
    }
    return g;
}

}  // namespace linedet
