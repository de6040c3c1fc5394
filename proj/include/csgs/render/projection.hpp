#pragma once

#include "csgs/core/camera.hpp"
#include "csgs/core/gaussian.hpp"

#include <cmath>
#include <optional>

namespace csgs {

// 0.3-pixel isotropic low-pass added to every projected covariance.
inline constexpr double kLowPass = 0.3;

struct ProjectedGaussian {
    Vec2 mean2d = Vec2::Zero();
    Mat2 cov2d = Mat2::Zero();
    double view_depth = 0.0;
    double footprint_radius = 0.0;  // 3 sigma of cov2d, pixels
};

inline Mat3 camera_cov(const GaussianPrimitive& p, const Camera& cam) {
    return cam.rotation_w2c * covariance(p) * cam.rotation_w2c.transpose();
}

// First-order perspective Jacobian at camera-space point t.
inline Eigen::Matrix<double, 2, 3> projection_jacobian(const Camera& cam, const Vec3& t) {
    Eigen::Matrix<double, 2, 3> j;
    const double iz = 1.0 / t.z();
    j << cam.fx * iz, 0, -cam.fx * t.x() * iz * iz,
         0, cam.fy * iz, -cam.fy * t.y() * iz * iz;
    return j;
}

// EWA-style projection. nullopt means the primitive is culled for this view
// (behind the near plane or its 3-sigma footprint misses the image).
inline std::optional<ProjectedGaussian> project(const GaussianPrimitive& p, const Camera& cam,
                                                double near_plane = 0.01) {
    const Vec3 t = cam.to_camera(p.mu);
    if (t.z() <= near_plane) return std::nullopt;

    ProjectedGaussian out;
    out.view_depth = t.z();
    out.mean2d = Vec2(cam.fx * t.x() / t.z() + cam.cx, cam.fy * t.y() / t.z() + cam.cy);

    const auto j = projection_jacobian(cam, t);
    out.cov2d = j * camera_cov(p, cam) * j.transpose() + kLowPass * Mat2::Identity();

    const double lambda_max =
        0.5 * (out.cov2d.trace() +
               std::sqrt(std::max(0.0, std::pow(out.cov2d(0, 0) - out.cov2d(1, 1), 2) +
                                           4 * std::pow(out.cov2d(0, 1), 2))));
    out.footprint_radius = 3.0 * std::sqrt(std::max(lambda_max, 0.0));

    if (out.mean2d.x() + out.footprint_radius < 0 ||
        out.mean2d.x() - out.footprint_radius > cam.width ||
        out.mean2d.y() + out.footprint_radius < 0 ||
        out.mean2d.y() - out.footprint_radius > cam.height)
        return std::nullopt;
    return out;
}

}  // namespace csgs
