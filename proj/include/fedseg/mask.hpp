#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "fedseg/errors.hpp"

namespace fedseg {

// Row-major boolean grid, true = foreground.
class BinaryMask {
public:
    BinaryMask() = default;

    BinaryMask(int height, int width, bool value = false)
        : height_(height), width_(width), data_(static_cast<std::size_t>(height) * width, value ? 1 : 0) {
        if (height <= 0 || width <= 0) throw ShapeMismatchError("mask dimensions must be positive");
    }

    int height() const { return height_; }
    int width() const { return width_; }

    bool at(int r, int c) const { return data_[static_cast<std::size_t>(r) * width_ + c] != 0; }

    void set(int r, int c, bool v) {
        data_[static_cast<std::size_t>(r) * width_ + c] = v ? 1 : 0;
        count_.reset();
    }

    bool in_bounds(int r, int c) const { return r >= 0 && r < height_ && c >= 0 && c < width_; }

    const std::vector<std::uint8_t>& data() const { return data_; }

    std::size_t foreground_count() const {
        if (!count_) {
            std::size_t n = 0;
            for (std::uint8_t v : data_) n += v;
            count_ = n;
        }
        return *count_;
    }

    bool empty_foreground() const { return foreground_count() == 0; }
    bool full_foreground() const { return foreground_count() == data_.size(); }

    friend bool operator==(const BinaryMask& a, const BinaryMask& b) {
        return a.height_ == b.height_ && a.width_ == b.width_ && a.data_ == b.data_;
    }

private:
    int height_ = 0;
    int width_ = 0;
    std::vector<std::uint8_t> data_;
    mutable std::optional<std::size_t> count_;
};

inline BinaryMask mask_xor(const BinaryMask& a, const BinaryMask& b) {
    if (a.height() != b.height() || a.width() != b.width())
        throw ShapeMismatchError("mask_xor: shape mismatch");
    BinaryMask out(a.height(), a.width());
    const auto& da = a.data();
    const auto& db = b.data();
    for (std::size_t i = 0; i < da.size(); ++i)
        if (da[i] ^ db[i]) out.set(static_cast<int>(i) / a.width(), static_cast<int>(i) % a.width(), true);
    return out;
}

}  // namespace fedseg
