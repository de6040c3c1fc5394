#pragma once

#include "csgs/core/gaussian.hpp"

#include <vector>

namespace csgs {

struct ImageRGB {
    int width = 0, height = 0;
    std::vector<Vec3> px;  // row major, values in [0,1]

    ImageRGB() = default;
    ImageRGB(int w, int h, const Vec3& fill = Vec3::Zero())
        : width(w), height(h), px(static_cast<std::size_t>(w) * h, fill) {}

    std::size_t idx(int row, int col) const {
        return static_cast<std::size_t>(row) * width + col;
    }
    const Vec3& at(int row, int col) const { return px[idx(row, col)]; }
    Vec3& at(int row, int col) { return px[idx(row, col)]; }
    bool same_shape(const ImageRGB& o) const { return width == o.width && height == o.height; }
};

inline double luminance(const Vec3& rgb) { return rgb.mean(); }

}  // namespace csgs
