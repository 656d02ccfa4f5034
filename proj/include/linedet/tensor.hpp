// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace linedet {

/// Dense rank-3 array in channel-major order: index (c, y, x) maps to
/// data[(c * height + y) * width + x]. The value type is float or double;
/// every layer of the network consumes and produces this shape.
template <typename T>
struct Tensor {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<T> data;

    Tensor() = default;
    Tensor(int c, int h, int w) : channels(c), height(h), width(w) {
        if (c < 0 || h < 0 || w < 0)
            throw std::invalid_argument("Tensor: negative dimension " + shape_str());
        data.assign(static_cast<std::size_t>(c) * h * w, T(0));
    }

    std::size_t size() const { return data.size(); }

    T& at(int c, int y, int x) {
        return data[(static_cast<std::size_t>(c) * height + y) * width + x];
    }
    T at(int c, int y, int x) const {
        return data[(static_cast<std::size_t>(c) * height + y) * width + x];
    }

    bool same_shape(const Tensor& o) const {
        return channels == o.channels && height == o.height && width == o.width;
    }

    void fill(T v) { data.assign(data.size(), v); }

    std::string shape_str() const {
        return std::to_string(channels) + "x" + std::to_string(height) + "x" +
               std::to_string(width);
    }
};

template <typename T>
bool all_finite(const Tensor<T>& t) {
    for (T v : t.data)
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
}

template <typename T>
void require_shape(const Tensor<T>& t, int c, int h, int w, const char* what) {
    if (t.channels != c || t.height != h || t.width != w)
        throw std::invalid_argument(std::string(what) + ": expected shape " +
                                    std::to_string(c) + "x" + std::to_string(h) + "x" +
                                    std::to_string(w) + ", got " + t.shape_str());
}

}  // namespace linedet
