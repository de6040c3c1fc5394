#pragma once

#include "csgs/core/camera.hpp"
#include "csgs/core/gaussian.hpp"
#include "csgs/core/image.hpp"
#include "csgs/core/sh.hpp"

#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <stdexcept>
#include <vector>

namespace csgs {

struct EmptyViewError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class TextureKind { kChecker, kGradient };

struct SurfaceTexture {
    TextureKind kind = TextureKind::kChecker;
    Vec3 color_a = Vec3(0.85, 0.85, 0.85);
    Vec3 color_b = Vec3(0.2, 0.25, 0.35);
    double cells = 6.0;  // checker squares per unit uv

    Vec3 sample(double u, double v) const {
        if (kind == TextureKind::kChecker) {
            const int c = (static_cast<int>(std::floor(u * cells)) +
                           static_cast<int>(std::floor(v * cells))) &
                          1;
            return c ? color_b : color_a;
        }
        const double t = 0.5 * (u + v);
        return color_a + t * (color_b - color_a);
    }
};

// Planar rectangle origin + s*edge_u + t*edge_v, s,t in [0,1].
struct TexturedRect {
    Vec3 origin = Vec3::Zero();
    Vec3 edge_u = Vec3(1, 0, 0);
    Vec3 edge_v = Vec3(0, 1, 0);
    SurfaceTexture texture;

    Vec3 normal() const { return edge_u.cross(edge_v).normalized(); }
    double area() const { return edge_u.cross(edge_v).norm(); }
};

struct TexturedBox {
    Aabb box;
    SurfaceTexture texture;
};

struct SurfaceHit {
    double t = 0;      // distance along the unit ray
    Vec3 point = Vec3::Zero();
    Vec3 normal = Vec3::Zero();  // unit, flipped toward the ray origin
    Vec3 rgb = Vec3::Zero();
};

namespace detail {

inline std::optional<SurfaceHit> ray_rect(const Vec3& eye, const Vec3& dir,
                                          const TexturedRect& r) {
    const Vec3 n = r.edge_u.cross(r.edge_v);
    const double denom = n.dot(dir);
    if (std::abs(denom) < 1e-12) return std::nullopt;
    const double t = n.dot(r.origin - eye) / denom;
    if (t <= 1e-9) return std::nullopt;
    const Vec3 p = eye + t * dir;
    const Vec3 d = p - r.origin;
    const double uu = r.edge_u.squaredNorm(), vv = r.edge_v.squaredNorm();
    const double uv = r.edge_u.dot(r.edge_v);
    const double du = d.dot(r.edge_u), dv = d.dot(r.edge_v);
    const double det = uu * vv - uv * uv;
    if (std::abs(det) < 1e-18) return std::nullopt;
    const double s = (du * vv - dv * uv) / det;
    const double q = (dv * uu - du * uv) / det;
    if (s < 0 || s > 1 || q < 0 || q > 1) return std::nullopt;
    SurfaceHit hit;
    hit.t = t;
    hit.point = p;
    hit.normal = n.normalized();
    if (hit.normal.dot(dir) > 0) hit.normal = -hit.normal;
    hit.rgb = r.texture.sample(s, q);
    return hit;
}

inline std::optional<SurfaceHit> ray_box(const Vec3& eye, const Vec3& dir,
                                         const TexturedBox& b) {
    double t0 = 1e-9, t1 = std::numeric_limits<double>::infinity();
    int enter_axis = -1;
    for (int i = 0; i < 3; ++i) {
        if (std::abs(dir[i]) < 1e-15) {
            if (eye[i] < b.box.lo[i] || eye[i] > b.box.hi[i]) return std::nullopt;
            continue;
        }
        double a = (b.box.lo[i] - eye[i]) / dir[i];
        double c = (b.box.hi[i] - eye[i]) / dir[i];
        if (a > c) std::swap(a, c);
        if (a > t0) {
            t0 = a;
            enter_axis = i;
        }
        t1 = std::min(t1, c);
        if (t0 > t1) return std::nullopt;
    }
    if (enter_axis < 0) return std::nullopt;  // eye inside: treat as no hit
    SurfaceHit hit;
    hit.t = t0;
    hit.point = eye + t0 * dir;
    hit.normal = Vec3::Zero();
    hit.normal[enter_axis] = dir[enter_axis] > 0 ? -1.0 : 1.0;
    const int ua = (enter_axis + 1) % 3, va = (enter_axis + 2) % 3;
    const Vec3 span = b.box.hi - b.box.lo;
    const double u = (hit.point[ua] - b.box.lo[ua]) / std::max(span[ua], 1e-12);
    const double v = (hit.point[va] - b.box.lo[va]) / std::max(span[va], 1e-12);
    hit.rgb = b.texture.sample(u, v);
    return hit;
}

}  // namespace detail

struct SyntheticScene {
    std::vector<TexturedRect> rects;
    std::vector<TexturedBox> boxes;
    CameraSet cameras;
    CameraSet holdout_cameras;
    std::uint32_t seed = 0;

    Aabb surface_extent() const {
        Aabb e;
        for (const auto& r : rects) {
            e.expand(r.origin);
            e.expand(r.origin + r.edge_u);
            e.expand(r.origin + r.edge_v);
            e.expand(r.origin + r.edge_u + r.edge_v);
        }
        for (const auto& b : boxes) {
            e.expand(b.box.lo);
            e.expand(b.box.hi);
        }
        return e;
    }

    std::optional<SurfaceHit> trace(const Vec3& eye, const Vec3& dir) const {
        std::optional<SurfaceHit> best;
        for (const auto& r : rects) {
            auto h = detail::ray_rect(eye, dir, r);
            if (h && (!best || h->t < best->t)) best = h;
        }
        for (const auto& b : boxes) {
            auto h = detail::ray_box(eye, dir, b);
            if (h && (!best || h->t < best->t)) best = h;
        }
        return best;
    }
};

// Per-camera analytic ground truth. depth is the hit distance along the unit
// pixel ray; normal is the world-space surface normal facing the camera.
struct GtView {
    ImageRGB rgb;
    std::vector<double> depth;
    std::vector<std::uint8_t> valid;
    std::vector<Vec3> normal;
};

inline GtView trace_view(const SyntheticScene& scene, const Camera& cam,
                         const Vec3& background = Vec3::Zero()) {
    GtView view;
    view.rgb = ImageRGB(cam.width, cam.height, background);
    const std::size_t npix = static_cast<std::size_t>(cam.width) * cam.height;
    view.depth.assign(npix, 0.0);
    view.valid.assign(npix, 0);
    view.normal.assign(npix, Vec3::Zero());
    const Vec3 eye = cam.center();
    std::size_t hits = 0;
    for (int y = 0; y < cam.height; ++y)
        for (int x = 0; x < cam.width; ++x) {
            const Vec3 dir = cam.rotation_w2c.transpose() * cam.pixel_ray(x, y);
            const auto h = scene.trace(eye, dir);
            if (!h) continue;
            const std::size_t pix = view.rgb.idx(y, x);
            view.rgb.at(y, x) = h->rgb;
            view.depth[pix] = h->t;
            view.valid[pix] = 1;
            view.normal[pix] = h->normal;
            ++hits;
        }
    if (hits == 0)
        throw EmptyViewError("camera " + cam.camera_id + " sees no surface");
    return view;
}

struct SceneSpec {
    double plane_size = 4.0;       // ground plane edge length
    double box_size = 0.5;         // cube on the plane
    int rig_rows = 4;              // camera grid
    int rig_cols = 4;
    int holdout_count = 4;
    int image_size = 64;
    double rig_height = 4.0;
    double focal_scale = 3.5;      // focal = scale * image_size
};

namespace detail {

inline Camera rig_camera(const Vec3& eye, const Vec3& target, int wh, double focal,
                         const std::string& id) {
    Camera c;
    c.camera_id = id;
    c.width = c.height = wh;
    c.fx = c.fy = focal;
    c.cx = c.cy = wh / 2.0;
    Vec3 fwd = (target - eye).normalized();
    Vec3 up(0, 1, 0);
    if (std::abs(fwd.dot(up)) > 0.99) up = Vec3(1, 0, 0);
    const Vec3 right = fwd.cross(up).normalized();
    const Vec3 down = fwd.cross(right).normalized();
    Mat3 r_c2w;
    r_c2w.col(0) = right;
    r_c2w.col(1) = down;
    r_c2w.col(2) = fwd;
    c.rotation_w2c = r_c2w.transpose();
    c.translation_w2c = -c.rotation_w2c * eye;
    return c;
}

}  // namespace detail

// Deterministic plane-and-box scene with a downward-looking camera grid.
inline SyntheticScene synth_scene(std::uint32_t seed, const SceneSpec& spec = {}) {
    SyntheticScene scene;
    scene.seed = seed;
    std::mt19937 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);

    const double hs = 0.5 * spec.plane_size;
    TexturedRect ground;
    ground.origin = Vec3(-hs, -hs, 0);
    ground.edge_u = Vec3(spec.plane_size, 0, 0);
    ground.edge_v = Vec3(0, spec.plane_size, 0);
    ground.texture.kind = TextureKind::kChecker;
    ground.texture.cells = 5.0;
    scene.rects.push_back(ground);

    TexturedBox cube;
    const double bs = 0.5 * spec.box_size;
    const Vec3 center(0.8 * hs * (u(rng) - 0.5), 0.8 * hs * (u(rng) - 0.5), 0);
    cube.box.expand(center + Vec3(-bs, -bs, 0));
    cube.box.expand(center + Vec3(bs, bs, spec.box_size));
    cube.texture.kind = TextureKind::kGradient;
    cube.texture.color_a = Vec3(0.75, 0.35, 0.25);
    cube.texture.color_b = Vec3(0.25, 0.4, 0.7);
    scene.boxes.push_back(cube);

    // Targets tile the plane in equal strips; eyes sit outward of their target
    // so every view tilts slightly inward and box side faces stay visible.
    // Footprints cover each strip with a small margin, so cameras over
    // different strips share almost no coverage.
    const double focal = spec.focal_scale * spec.image_size;
    for (int i = 0; i < spec.rig_rows; ++i)
        for (int j = 0; j < spec.rig_cols; ++j) {
            const double tx = -hs + (i + 0.5) * spec.plane_size / spec.rig_rows;
            const double ty = -hs + (j + 0.5) * spec.plane_size / spec.rig_cols;
            const Vec3 eye(tx / 0.8, ty / 0.8, spec.rig_height);
            const Vec3 target(tx, ty, 0.0);
            scene.cameras.insert(detail::rig_camera(
                eye, target, spec.image_size, focal,
                "r" + std::to_string(i) + "c" + std::to_string(j)));
        }
    for (int k = 0; k < spec.holdout_count; ++k) {
        const double ang = 2.0 * M_PI * (k + 0.5) / spec.holdout_count;
        const Vec3 target(0.5 * hs * M_SQRT2 * std::cos(ang), 0.5 * hs * M_SQRT2 * std::sin(ang),
                          0.0);
        const Vec3 eye(target.x() / 0.8, target.y() / 0.8,
                       spec.rig_height * (0.85 + 0.05 * (k % 2)));
        scene.holdout_cameras.insert(detail::rig_camera(eye, target, spec.image_size, focal,
                                                        "h" + std::to_string(k)));
    }
    return scene;
}

// Seeded area-weighted surface samples: GT point cloud and model initializer.
inline std::vector<Vec3> surface_samples(const SyntheticScene& scene, int count,
                                         std::uint32_t seed) {
    struct Patch {
        Vec3 origin, eu, ev;
        double area;
    };
    std::vector<Patch> patches;
    for (const auto& r : scene.rects)
        patches.push_back({r.origin, r.edge_u, r.edge_v, r.area()});
    for (const auto& b : scene.boxes) {
        const Vec3 lo = b.box.lo, span = b.box.hi - b.box.lo;
        for (int axis = 0; axis < 3; ++axis)
            for (int side = 0; side < 2; ++side) {
                Patch p;
                p.origin = lo;
                if (side) p.origin[axis] += span[axis];
                p.eu = Vec3::Zero();
                p.ev = Vec3::Zero();
                p.eu[(axis + 1) % 3] = span[(axis + 1) % 3];
                p.ev[(axis + 2) % 3] = span[(axis + 2) % 3];
                p.area = p.eu.norm() * p.ev.norm();
                patches.push_back(p);
            }
    }
    std::vector<double> areas;
    for (const auto& p : patches) areas.push_back(p.area);
    std::mt19937 rng(seed);
    std::discrete_distribution<std::size_t> pick(areas.begin(), areas.end());
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<Vec3> out;
    out.reserve(count);
    for (int i = 0; i < count; ++i) {
        const Patch& p = patches[pick(rng)];
        out.push_back(p.origin + u(rng) * p.eu + u(rng) * p.ev);
    }
    return out;
}

// Gaussian-model initializer from seeded surface samples with GT colors.
inline GaussianModel init_model_from_scene(const SyntheticScene& scene, int count,
                                           std::uint32_t seed, double scale = 0.08) {
    GaussianModel m;
    m.model_id = "init";
    std::mt19937 rng(seed ^ 0x9e3779b9u);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const auto pts = surface_samples(scene, count, seed);
    for (const auto& pt : pts) {
        // Color from a ray dropped slightly above the point toward it.
        const Vec3 eye = pt + Vec3(0.03 * (u(rng) - 0.5), 0.03 * (u(rng) - 0.5), 1.0);
        const auto h = scene.trace(eye, (pt - eye).normalized());
        GaussianPrimitive p;
        p.mu = pt;
        p.log_scale = Vec3(std::log(scale), std::log(scale), std::log(1e-4));
        if (h) {
            // Orient the disk along the surface: rotate z-axis onto the normal.
            const Vec3 n = h->normal.z() < 0 ? Vec3(-h->normal) : h->normal;
            const Vec3 axis = Vec3(0, 0, 1).cross(n);
            const double s = axis.norm(), c = Vec3(0, 0, 1).dot(n);
            if (s > 1e-9) {
                const double half = 0.5 * std::atan2(s, c);
                const Vec3 a = axis / s;
                p.rotation = Vec4(std::cos(half), std::sin(half) * a.x(),
                                  std::sin(half) * a.y(), std::sin(half) * a.z());
            }
            p.opacity_logit = logit(0.85);
            const Vec3 col = h->rgb.cwiseMax(0.02).cwiseMin(0.98);
            p.color_coeffs = {col.unaryExpr([](double v) { return logit(v); }) / kSH0};
        } else {
            p.opacity_logit = logit(0.5);
            p.color_coeffs = {Vec3::Zero()};
        }
        m.primitives.push_back(p);
    }
    m.recompute_extent();
    return m;
}

}  // namespace csgs
