#pragma once

#include "csgs/core/image.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <stdexcept>
#include <string>

namespace csgs {

inline void write_png(const ImageRGB& img, const std::string& path) {
    cv::Mat mat(img.height, img.width, CV_8UC3);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const Vec3& c = img.at(y, x);
            auto& px = mat.at<cv::Vec3b>(y, x);
            for (int i = 0; i < 3; ++i)  // OpenCV stores BGR
                px[2 - i] = static_cast<std::uint8_t>(
                    std::lround(std::clamp(c[i], 0.0, 1.0) * 255.0));
        }
    if (!cv::imwrite(path, mat)) throw std::runtime_error("cannot write png: " + path);
}

inline ImageRGB read_png(const std::string& path) {
    cv::Mat mat = cv::imread(path, cv::IMREAD_COLOR);
    if (mat.empty()) throw std::runtime_error("cannot read png: " + path);
    ImageRGB img(mat.cols, mat.rows);
    for (int y = 0; y < mat.rows; ++y)
        for (int x = 0; x < mat.cols; ++x) {
            const auto& px = mat.at<cv::Vec3b>(y, x);
            for (int i = 0; i < 3; ++i) img.at(y, x)[i] = px[2 - i] / 255.0;
        }
    return img;
}

}  // namespace csgs
