#pragma once

#include "csgs/core/camera.hpp"
#include "csgs/core/gaussian.hpp"
#include "csgs/core/sh.hpp"
#include "csgs/render/rasterizer.hpp"

#include <random>

namespace csgs::testing {

inline GaussianPrimitive random_primitive(std::mt19937& rng, int sh_degree = 1,
                                          double extent = 1.0) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::normal_distribution<double> n(0.0, 1.0);
    GaussianPrimitive p;
    p.mu = extent * Vec3(u(rng), u(rng), u(rng));
    p.rotation = Vec4(n(rng), n(rng), n(rng), n(rng));
    if (p.rotation.norm() < 1e-3) p.rotation = Vec4(1, 0, 0, 0);
    p.renormalize_rotation();
    p.log_scale = Vec3(u(rng), u(rng), u(rng)) * 1.2 - Vec3::Constant(1.8);
    p.opacity_logit = u(rng) * 1.5;
    p.color_coeffs.assign(sh_coeff_count(sh_degree), Vec3::Zero());
    for (auto& c : p.color_coeffs) c = 0.5 * Vec3(u(rng), u(rng), u(rng));
    return p;
}

inline GaussianModel random_model(std::mt19937& rng, int count, int sh_degree = 1,
                                  double extent = 1.0) {
    GaussianModel m;
    m.model_id = "test";
    for (int i = 0; i < count; ++i)
        m.primitives.push_back(random_primitive(rng, sh_degree, extent));
    m.recompute_extent();
    return m;
}

// Camera at `eye` looking toward `target`, y-ish up.
inline Camera look_at_camera(const Vec3& eye, const Vec3& target, int width, int height,
                             double focal, const std::string& id = "cam") {
    Camera c;
    c.camera_id = id;
    c.width = width;
    c.height = height;
    c.fx = c.fy = focal;
    c.cx = width / 2.0;
    c.cy = height / 2.0;
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

// Axis-aligned camera at the origin with exactly representable intrinsics
// (identity rotation, power-of-two focal, half-integer principal point).
inline Camera identity_camera(int wh = 16, double focal = 16.0, const std::string& id = "cam") {
    Camera c;
    c.camera_id = id;
    c.width = c.height = wh;
    c.fx = c.fy = focal;
    c.cx = c.cy = wh / 2.0;
    c.rotation_w2c = Mat3::Identity();
    c.translation_w2c = Vec3::Zero();
    return c;
}

// Buffers describing an exact world plane n_w . X = offset as seen from `cam`:
// every pixel carries the same camera-frame plane hypothesis.
inline RenderBuffers plane_buffers(const Camera& cam, const Vec3& n_w, double offset,
                                   const Vec3& rgb = Vec3(0.5, 0.5, 0.5)) {
    Vec3 n_c = cam.rotation_w2c * n_w;
    double v = offset + n_c.dot(cam.translation_w2c);
    if (v > 0) {
        n_c = -n_c;
        v = -v;
    }
    RenderBuffers buf;
    buf.width = cam.width;
    buf.height = cam.height;
    const std::size_t npix = static_cast<std::size_t>(cam.width) * cam.height;
    buf.rgb.assign(npix, rgb);
    buf.alpha.assign(npix, 1.0);
    buf.plane_distance.assign(npix, v);
    buf.normal.assign(npix, n_c);
    return buf;
}

}  // namespace csgs::testing
