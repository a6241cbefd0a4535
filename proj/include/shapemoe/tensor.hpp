// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "shapemoe/errors.hpp"

namespace shapemoe {

// Dense row-major tensor. Shape is a plain vector of extents; rank 0 means a
// scalar with one element.
template <typename S>
struct TensorT {
    std::vector<size_t> shape;
    std::vector<S> data;

    TensorT() = default;
    explicit TensorT(std::vector<size_t> shp) : shape(std::move(shp)) {
        data.assign(numel_of(shape), S(0));
    }
    TensorT(std::vector<size_t> shp, std::vector<S> values)
        : shape(std::move(shp)), data(std::move(values)) {
        if (data.size() != numel_of(shape))
            throw DimensionError("tensor data size does not match shape");
    }

    static size_t numel_of(const std::vector<size_t>& shp) {
        size_t n = 1;
        for (size_t d : shp) n *= d;
        return n;
    }

    size_t numel() const { return data.size(); }
    size_t rank() const { return shape.size(); }

    S& operator[](size_t i) { return data[i]; }
    const S& operator[](size_t i) const { return data[i]; }

    S& at2(size_t i, size_t j) { return data[i * shape[1] + j]; }
    const S& at2(size_t i, size_t j) const { return data[i * shape[1] + j]; }

    S& at3(size_t c, size_t y, size_t x) {
        return data[(c * shape[1] + y) * shape[2] + x];
    }
    const S& at3(size_t c, size_t y, size_t x) const {
        return data[(c * shape[1] + y) * shape[2] + x];
    }

    void fill(S v) { std::fill(data.begin(), data.end(), v); }

    bool same_shape(const TensorT& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (S v : data)
            if (!std::isfinite(double(v))) return false;
        return true;
    }
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

inline std::string shape_str(const std::vector<size_t>& shp) {
    std::string s = "[";
    for (size_t i = 0; i < shp.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shp[i]);
    }
    return s + "]";
}

template <typename D, typename S>
TensorT<D> tensor_cast(const TensorT<S>& t) {
    TensorT<D> out;
    out.shape = t.shape;
    out.data.reserve(t.data.size());
    for (S v : t.data) out.data.push_back(D(v));
    return out;
}

}  // namespace shapemoe
