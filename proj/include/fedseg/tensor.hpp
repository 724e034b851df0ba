#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "fedseg/errors.hpp"

namespace fedseg {

struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        std::size_t n = 1;
        for (int d : shape) {
            if (d <= 0) throw ShapeMismatchError("Tensor: dimensions must be positive");
            n *= static_cast<std::size_t>(d);
        }
        data.assign(n, 0.0);
    }

    std::size_t numel() const { return data.size(); }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }
};

inline void check_finite(const Tensor& t, const char* where, bool gradient = false) {
    for (double v : t.data) {
        if (!std::isfinite(v)) {
            const std::string msg = std::string(where) + ": non-finite value";
            if (gradient) throw NonFiniteGradientError(msg);
            throw NonFiniteActivationError(msg);
        }
    }
}

}  // namespace fedseg
