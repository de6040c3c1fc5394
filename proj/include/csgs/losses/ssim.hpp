#pragma once

#include "csgs/core/image.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace csgs {

// Gaussian-windowed SSIM, 11x11 window, sigma 1.5, standard stabilizers on a
// [0,1] dynamic range. Averaged over the window centers where the full window
// fits (the window shrinks only when the image itself is smaller).
struct SsimConfig {
    int window = 11;
    double sigma = 1.5;
    double c1 = 0.01 * 0.01;
    double c2 = 0.03 * 0.03;
};

namespace detail {

inline std::vector<double> gaussian_window(int size, double sigma) {
    std::vector<double> w(static_cast<std::size_t>(size) * size);
    const int half = size / 2;
    double sum = 0;
    for (int dy = -half; dy <= half; ++dy)
        for (int dx = -half; dx <= half; ++dx) {
            const double v = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
            w[(dy + half) * size + (dx + half)] = v;
            sum += v;
        }
    for (auto& v : w) v /= sum;
    return w;
}

}  // namespace detail

// Mean SSIM over channels and window positions; optional gradient w.r.t. the
// first image.
inline double ssim(const ImageRGB& a, const ImageRGB& b, std::vector<Vec3>* g_a = nullptr,
                   const SsimConfig& cfg = {}) {
    if (!a.same_shape(b)) throw std::invalid_argument("ssim: image shape mismatch");
    int win = std::min({cfg.window, a.width, a.height});
    if (win % 2 == 0) --win;
    if (win < 1) throw std::invalid_argument("ssim: empty image");
    const int half = win / 2;
    const auto w = detail::gaussian_window(win, cfg.sigma);

    if (g_a) g_a->assign(a.px.size(), Vec3::Zero());

    double total = 0;
    int windows = 0;
    for (int cy = half; cy < a.height - half; ++cy) {
        for (int cx = half; cx < a.width - half; ++cx) {
            ++windows;
            for (int ch = 0; ch < 3; ++ch) {
                double mu_x = 0, mu_y = 0;
                for (int dy = -half; dy <= half; ++dy)
                    for (int dx = -half; dx <= half; ++dx) {
                        const double wgt = w[(dy + half) * win + (dx + half)];
                        mu_x += wgt * a.at(cy + dy, cx + dx)[ch];
                        mu_y += wgt * b.at(cy + dy, cx + dx)[ch];
                    }
                double var_x = 0, var_y = 0, cov = 0;
                for (int dy = -half; dy <= half; ++dy)
                    for (int dx = -half; dx <= half; ++dx) {
                        const double wgt = w[(dy + half) * win + (dx + half)];
                        const double ax = a.at(cy + dy, cx + dx)[ch] - mu_x;
                        const double by = b.at(cy + dy, cx + dx)[ch] - mu_y;
                        var_x += wgt * ax * ax;
                        var_y += wgt * by * by;
                        cov += wgt * ax * by;
                    }
                const double a1 = 2 * mu_x * mu_y + cfg.c1;
                const double a2 = 2 * cov + cfg.c2;
                const double b1 = mu_x * mu_x + mu_y * mu_y + cfg.c1;
                const double b2 = var_x + var_y + cfg.c2;
                const double s = (a1 * a2) / (b1 * b2);
                total += s;

                if (g_a) {
                    const double ds_dmu = s * (2 * mu_y / a1 - 2 * mu_x / b1);
                    const double ds_dvar = -s / b2;
                    const double ds_dcov = s * 2 / a2;
                    for (int dy = -half; dy <= half; ++dy)
                        for (int dx = -half; dx <= half; ++dx) {
                            const double wgt = w[(dy + half) * win + (dx + half)];
                            const double ax = a.at(cy + dy, cx + dx)[ch] - mu_x;
                            const double by = b.at(cy + dy, cx + dx)[ch] - mu_y;
                            (*g_a)[a.idx(cy + dy, cx + dx)][ch] +=
                                wgt * (ds_dmu + 2 * ds_dvar * ax + ds_dcov * by);
                        }
                }
            }
        }
    }
    const double scale = 1.0 / (3.0 * windows);
    if (g_a)
        for (auto& g : *g_a) g *= scale;
    return total / (3.0 * windows);
}

// (1-lambda) L1 + lambda (1 - SSIM); zero iff the images are identical.
inline double l1_ssim(const ImageRGB& img, const ImageRGB& gt, double lambda,
                      std::vector<Vec3>* g_img = nullptr) {
    if (!img.same_shape(gt)) throw std::invalid_argument("l1_ssim: image shape mismatch");
    const double inv = 1.0 / (3.0 * img.px.size());
    double l1 = 0;
    for (std::size_t i = 0; i < img.px.size(); ++i)
        l1 += (img.px[i] - gt.px[i]).cwiseAbs().sum() * inv;

    std::vector<Vec3> g_ssim;
    const double s = ssim(img, gt, g_img ? &g_ssim : nullptr);

    if (g_img) {
        g_img->assign(img.px.size(), Vec3::Zero());
        for (std::size_t i = 0; i < img.px.size(); ++i) {
            const Vec3 sign = (img.px[i] - gt.px[i]).unaryExpr([](double v) {
                return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0);
            });
            (*g_img)[i] = (1 - lambda) * inv * sign - lambda * g_ssim[i];
        }
    }
    return (1 - lambda) * l1 + lambda * (1 - s);
}

}  // namespace csgs
