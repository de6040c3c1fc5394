#pragma once

#include "csgs/core/camera.hpp"
#include "csgs/core/gaussian.hpp"
#include "csgs/core/sh.hpp"
#include "csgs/render/projection.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

namespace csgs {

struct RenderConfig {
    Vec3 background = Vec3(0.5, 0.5, 0.5);
    double near_plane = 0.01;
    // Gaussian support: a primitive contributes at a pixel iff
    // 0.5 d^T conic d <= power_cutoff.
    double power_cutoff = 12.0;
    double transmittance_floor = 1e-4;  // early blend termination
    double contribution_floor = 1e-4;   // coverage indicator
    double alpha_valid_floor = 0.5;     // pixel validity for depth
    bool keep_contributors = false;     // retain per-pixel lists for backward
};

// Per-primitive per-view cache shared by forward and backward.
struct PrimView {
    bool culled = true;
    ProjectedGaussian proj;
    Mat2 conic = Mat2::Zero();
    Vec3 mu_cam = Vec3::Zero();
    Vec3 n_cam = Vec3::Zero();       // camera-frame flat normal, toward camera
    double plane_dist = 0.0;         // n_cam . mu_cam
    Vec3 color = Vec3::Zero();       // view-dependent activated color
    Vec3 view_dir = Vec3::Zero();    // unit world dir, mu - cam_center
    double view_dist = 0.0;
    double opacity = 0.0;
    int min_axis = 0;
    double n_sign = 1.0;
};

struct RenderBuffers {
    int width = 0, height = 0;
    std::vector<Vec3> rgb;              // H*W
    std::vector<double> alpha;          // H*W, sum of blend weights
    std::vector<double> plane_distance; // H*W, camera-space signed plane distance
    std::vector<Vec3> normal;           // H*W, blended then normalized, camera frame
    std::vector<std::uint32_t> coverage;  // per primitive

    // Flattened per-pixel contributor lists in blend order (front to back).
    bool has_contributors = false;
    std::vector<std::uint32_t> contrib_offset;  // H*W+1
    std::vector<std::uint32_t> contributors;    // primitive indices

    std::vector<PrimView> prim_views;
    RenderConfig config;

    std::size_t idx(int row, int col) const {
        return static_cast<std::size_t>(row) * width + col;
    }
};

inline PrimView make_prim_view(const GaussianPrimitive& p, const Camera& cam,
                               const RenderConfig& cfg) {
    PrimView pv;
    auto proj = project(p, cam, cfg.near_plane);
    if (!proj) return pv;
    pv.culled = false;
    pv.proj = *proj;
    pv.conic = pv.proj.cov2d.inverse();
    pv.mu_cam = cam.to_camera(p.mu);
    pv.min_axis = min_scale_axis(p);
    Vec3 n_world = p.rotation_matrix().col(pv.min_axis);
    pv.n_sign = (n_world.dot(cam.center() - p.mu) < 0) ? -1.0 : 1.0;
    n_world *= pv.n_sign;
    pv.n_cam = cam.rotation_w2c * n_world;
    pv.plane_dist = pv.n_cam.dot(pv.mu_cam);
    const Vec3 to_prim = p.mu - cam.center();
    pv.view_dist = to_prim.norm();
    pv.view_dir = pv.view_dist > 1e-12 ? Vec3(to_prim / pv.view_dist) : Vec3(0, 0, 1);
    pv.color = sh_color(p, pv.view_dir);
    pv.opacity = p.opacity();
    return pv;
}

// Depth-sorted alpha compositing over binned per-pixel candidate lists.
inline RenderBuffers render(const GaussianModel& m, const Camera& cam,
                            const RenderConfig& cfg = {}) {
    const int w = cam.width, h = cam.height;
    const std::size_t npix = static_cast<std::size_t>(w) * h;
    const std::size_t n = m.size();

    RenderBuffers buf;
    buf.width = w;
    buf.height = h;
    buf.config = cfg;
    buf.rgb.assign(npix, cfg.background);
    buf.alpha.assign(npix, 0.0);
    buf.plane_distance.assign(npix, 0.0);
    buf.normal.assign(npix, Vec3(0, 0, 1));
    buf.coverage.assign(n, 0);
    buf.has_contributors = cfg.keep_contributors;

    buf.prim_views.resize(n);
    std::vector<std::uint32_t> live;
    for (std::size_t k = 0; k < n; ++k) {
        buf.prim_views[k] = make_prim_view(m.primitives[k], cam, cfg);
        if (!buf.prim_views[k].culled) live.push_back(static_cast<std::uint32_t>(k));
    }
    // Front-to-back order, ties by primitive index.
    std::sort(live.begin(), live.end(), [&](std::uint32_t a, std::uint32_t b) {
        const double da = buf.prim_views[a].proj.view_depth;
        const double db = buf.prim_views[b].proj.view_depth;
        return da != db ? da < db : a < b;
    });

    // Bin candidates: per pixel, indices arrive already depth-sorted.
    const double support_scale = std::sqrt(2.0 * cfg.power_cutoff);
    std::vector<std::uint32_t> counts(npix + 1, 0);
    auto pixel_bbox = [&](const PrimView& pv, int& x0, int& x1, int& y0, int& y1) {
        const double r = support_scale * pv.proj.footprint_radius / 3.0;
        x0 = std::max(0, static_cast<int>(std::floor(pv.proj.mean2d.x() - r)));
        x1 = std::min(w - 1, static_cast<int>(std::ceil(pv.proj.mean2d.x() + r)));
        y0 = std::max(0, static_cast<int>(std::floor(pv.proj.mean2d.y() - r)));
        y1 = std::min(h - 1, static_cast<int>(std::ceil(pv.proj.mean2d.y() + r)));
    };
    for (std::uint32_t k : live) {
        int x0, x1, y0, y1;
        pixel_bbox(buf.prim_views[k], x0, x1, y0, y1);
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) ++counts[buf.idx(y, x) + 1];
    }
    std::partial_sum(counts.begin(), counts.end(), counts.begin());
    std::vector<std::uint32_t> binned(counts[npix]);
    {
        std::vector<std::uint32_t> cursor(counts.begin(), counts.end() - 1);
        for (std::uint32_t k : live) {
            int x0, x1, y0, y1;
            pixel_bbox(buf.prim_views[k], x0, x1, y0, y1);
            for (int y = y0; y <= y1; ++y)
                for (int x = x0; x <= x1; ++x) binned[cursor[buf.idx(y, x)]++] = k;
        }
    }

    if (cfg.keep_contributors) {
        buf.contrib_offset.assign(npix + 1, 0);
        buf.contributors.reserve(binned.size() / 2);
    }

    for (std::size_t pix = 0; pix < npix; ++pix) {
        const double px = static_cast<double>(pix % w) + 0.5;
        const double py = static_cast<double>(pix / w) + 0.5;
        double transmittance = 1.0;
        Vec3 rgb_acc = Vec3::Zero();
        Vec3 normal_acc = Vec3::Zero();
        double dist_acc = 0.0;
        double alpha_acc = 0.0;
        for (std::uint32_t ci = counts[pix]; ci < counts[pix + 1]; ++ci) {
            if (transmittance < cfg.transmittance_floor) break;
            const std::uint32_t k = binned[ci];
            const PrimView& pv = buf.prim_views[k];
            const Vec2 d(px - pv.proj.mean2d.x(), py - pv.proj.mean2d.y());
            const double power = 0.5 * d.dot(pv.conic * d);
            if (power > cfg.power_cutoff) continue;
            const double g = std::exp(-power);
            const double a = pv.opacity * g;
            const double wgt = a * transmittance;
            rgb_acc += wgt * pv.color;
            normal_acc += wgt * pv.n_cam;
            dist_acc += wgt * pv.plane_dist;
            alpha_acc += wgt;
            if (wgt > cfg.contribution_floor) ++buf.coverage[k];
            if (cfg.keep_contributors) buf.contributors.push_back(k);
            transmittance *= (1.0 - a);
        }
        buf.rgb[pix] = rgb_acc + transmittance * cfg.background;
        buf.alpha[pix] = alpha_acc;
        buf.plane_distance[pix] = dist_acc;
        const double nn = normal_acc.norm();
        buf.normal[pix] = nn > 1e-12 ? Vec3(normal_acc / nn) : Vec3(0, 0, 1);
        if (cfg.keep_contributors)
            buf.contrib_offset[pix + 1] = static_cast<std::uint32_t>(buf.contributors.size());
    }
    return buf;
}

struct DepthMap {
    int width = 0, height = 0;
    std::vector<double> depth;       // distance along the unit pixel ray
    std::vector<std::uint8_t> valid;

    std::size_t idx(int row, int col) const {
        return static_cast<std::size_t>(row) * width + col;
    }
};

// Plane-based depth: alpha-normalized blended plane distance over the
// normal-ray cosine. Without the normalization, semi-transparent pixels
// report depths scaled down by their accumulated alpha.
inline DepthMap unbiased_depth(const RenderBuffers& buf, const Camera& cam) {
    DepthMap out;
    out.width = buf.width;
    out.height = buf.height;
    const std::size_t npix = buf.alpha.size();
    out.depth.assign(npix, 0.0);
    out.valid.assign(npix, 0);
    for (int y = 0; y < buf.height; ++y) {
        for (int x = 0; x < buf.width; ++x) {
            const std::size_t pix = buf.idx(y, x);
            if (buf.alpha[pix] < buf.config.alpha_valid_floor) continue;
            const Vec3 ray = cam.pixel_ray(x, y);
            const double denom = buf.normal[pix].dot(ray);
            if (std::abs(denom) < 1e-4) continue;
            const double d = buf.plane_distance[pix] / (buf.alpha[pix] * denom);
            if (d <= 0) continue;
            out.depth[pix] = d;
            out.valid[pix] = 1;
        }
    }
    return out;
}

}  // namespace csgs
