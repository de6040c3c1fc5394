#pragma once

#include "csgs/core/image.hpp"
#include "csgs/losses/ssim.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace csgs {

struct EmptyCloudError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline constexpr double kPsnrCap = 99.0;

inline double psnr(const ImageRGB& img, const ImageRGB& gt) {
    if (!img.same_shape(gt)) throw std::invalid_argument("psnr: image shape mismatch");
    double mse = 0;
    for (std::size_t i = 0; i < img.px.size(); ++i)
        mse += (img.px[i] - gt.px[i]).squaredNorm();
    mse /= 3.0 * static_cast<double>(img.px.size());
    if (mse < 1e-10) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

inline double ssim_metric(const ImageRGB& img, const ImageRGB& gt) { return ssim(img, gt); }

struct FScore {
    double precision = 0;
    double recall = 0;
    double f = 0;
};

namespace detail {

// Uniform-grid nearest-neighbor "any point within eps" query. Cell size eps
// means checking the 3x3x3 neighborhood is exact.
class EpsGrid {
public:
    EpsGrid(const std::vector<Vec3>& pts, double eps) : pts_(pts), inv_(1.0 / eps), eps2_(eps * eps) {
        for (std::size_t i = 0; i < pts.size(); ++i) cells_[key(pts[i])].push_back(i);
    }

    bool any_within(const Vec3& q) const {
        const std::int64_t kx = coord(q.x()), ky = coord(q.y()), kz = coord(q.z());
        for (std::int64_t dx = -1; dx <= 1; ++dx)
            for (std::int64_t dy = -1; dy <= 1; ++dy)
                for (std::int64_t dz = -1; dz <= 1; ++dz) {
                    const auto it = cells_.find(pack(kx + dx, ky + dy, kz + dz));
                    if (it == cells_.end()) continue;
                    for (std::size_t i : it->second)
                        if ((pts_[i] - q).squaredNorm() <= eps2_) return true;
                }
        return false;
    }

private:
    std::int64_t coord(double v) const {
        return static_cast<std::int64_t>(std::floor(v * inv_));
    }
    std::int64_t pack(std::int64_t x, std::int64_t y, std::int64_t z) const {
        return ((x & 0x1fffff) << 42) | ((y & 0x1fffff) << 21) | (z & 0x1fffff);
    }
    std::int64_t key(const Vec3& p) const {
        return pack(coord(p.x()), coord(p.y()), coord(p.z()));
    }

    const std::vector<Vec3>& pts_;
    double inv_, eps2_;
    std::map<std::int64_t, std::vector<std::size_t>> cells_;
};

}  // namespace detail

inline FScore fscore(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt, double eps) {
    if (pred.empty() || gt.empty()) throw EmptyCloudError("fscore: empty point cloud");
    if (eps <= 0) throw std::invalid_argument("fscore: eps must be positive");
    detail::EpsGrid gt_grid(gt, eps), pred_grid(pred, eps);
    std::size_t p_hit = 0, r_hit = 0;
    for (const auto& p : pred) p_hit += gt_grid.any_within(p);
    for (const auto& g : gt) r_hit += pred_grid.any_within(g);
    FScore out;
    out.precision = static_cast<double>(p_hit) / static_cast<double>(pred.size());
    out.recall = static_cast<double>(r_hit) / static_cast<double>(gt.size());
    out.f = out.precision + out.recall > 0
                ? 2.0 * out.precision * out.recall / (out.precision + out.recall)
                : 0.0;
    return out;
}

struct EvalReport {
    std::vector<std::pair<std::string, double>> view_psnr;
    std::vector<std::pair<std::string, double>> view_ssim;
    FScore mesh_fscore;
    double eps = 0;
    double seconds = 0;
    std::size_t model_size = 0;

    double mean_psnr() const {
        double s = 0;
        for (const auto& [id, v] : view_psnr) s += v;
        return view_psnr.empty() ? 0.0 : s / view_psnr.size();
    }

    std::string to_text() const {
        std::ostringstream out;
        out << "model_size\t" << model_size << "\n";
        out << "eval_seconds\t" << seconds << "\n";
        for (std::size_t i = 0; i < view_psnr.size(); ++i)
            out << "view\t" << view_psnr[i].first << "\tpsnr\t" << view_psnr[i].second
                << "\tssim\t" << view_ssim[i].second << "\n";
        out << "mean_psnr\t" << mean_psnr() << "\n";
        out << "fscore_eps\t" << eps << "\n";
        out << "precision\t" << mesh_fscore.precision << "\n";
        out << "recall\t" << mesh_fscore.recall << "\n";
        out << "fscore\t" << mesh_fscore.f << "\n";
        out << "lpips\tnot-computed\n";
        return out.str();
    }
};

}  // namespace csgs
