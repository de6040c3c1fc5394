#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace csgs {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Quat = Eigen::Quaterniond;

// Scale floor below which the 3D covariance is treated as degenerate.
inline constexpr double kScaleFloor = 1e-7;

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

struct Aabb {
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::max());
    Vec3 hi = Vec3::Constant(std::numeric_limits<double>::lowest());

    bool empty() const { return (lo.array() > hi.array()).any(); }
    void expand(const Vec3& p) { lo = lo.cwiseMin(p); hi = hi.cwiseMax(p); }
    void merge(const Aabb& o) {
        if (o.empty()) return;
        lo = lo.cwiseMin(o.lo);
        hi = hi.cwiseMax(o.hi);
    }
    bool contains(const Vec3& p) const {
        return (p.array() >= lo.array()).all() && (p.array() <= hi.array()).all();
    }
    Vec3 center() const { return 0.5 * (lo + hi); }
    double diagonal() const { return empty() ? 0.0 : (hi - lo).norm(); }
};

// Rotation matrix of a (not necessarily unit) quaternion stored as (w,x,y,z).
inline Mat3 quat_to_rotation(const Vec4& q_raw) {
    Vec4 q = q_raw / q_raw.norm();
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Mat3 r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
         2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
         2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

// One anisotropic 3D Gaussian. Parameters are stored unconstrained: scales in
// log space, opacity as a logit, rotation as a quaternion renormalized after
// every optimizer step.
struct GaussianPrimitive {
    Vec3 mu = Vec3::Zero();
    Vec4 rotation = Vec4(1, 0, 0, 0);  // (w,x,y,z)
    Vec3 log_scale = Vec3::Zero();
    double opacity_logit = 0.0;
    // Per-channel SH coefficients, layout [3][(deg+1)^2].
    std::vector<Vec3> color_coeffs = {Vec3::Zero()};

    int sh_degree() const {
        const std::size_t n = color_coeffs.size();
        if (n >= 9) return 2;
        if (n >= 4) return 1;
        return 0;
    }
    Vec3 scales() const { return log_scale.array().exp(); }
    double opacity() const { return logistic(opacity_logit); }
    Mat3 rotation_matrix() const { return quat_to_rotation(rotation); }
    void renormalize_rotation() { rotation /= rotation.norm(); }
};

inline Mat3 covariance(const GaussianPrimitive& p) {
    const Mat3 r = p.rotation_matrix();
    const Vec3 s2 = p.scales().array().square();
    return r * s2.asDiagonal() * r.transpose();
}

// Density of Eq.-style exponential form, in (0,1], 1 exactly at the mean.
inline double evaluate(const GaussianPrimitive& p, const Vec3& x) {
    const Vec3 s = p.scales();
    if (s.minCoeff() < kScaleFloor)
        throw std::domain_error("evaluate: activated scale below floor, covariance degenerate");
    const Mat3 r = p.rotation_matrix();
    const Vec3 local = r.transpose() * (x - p.mu);
    const double m = (local.array() / s.array()).square().sum();
    return std::exp(-0.5 * m);
}

// Index of the smallest activated scale, ties to the lowest axis.
inline int min_scale_axis(const GaussianPrimitive& p) {
    const Vec3 s = p.scales();
    int axis = 0;
    for (int i = 1; i < 3; ++i)
        if (s[i] < s[axis]) axis = i;
    return axis;
}

// Disk normal of a flattened Gaussian, oriented toward the given viewpoint.
inline Vec3 flat_normal_towards(const GaussianPrimitive& p, const Vec3& view_point) {
    Vec3 n = p.rotation_matrix().col(min_scale_axis(p));
    if (n.dot(view_point - p.mu) < 0) n = -n;
    return n;
}

struct GaussianModel {
    std::vector<GaussianPrimitive> primitives;
    Aabb extent;
    std::string model_id;
    std::vector<std::string> provenance;

    std::size_t size() const { return primitives.size(); }
    bool empty() const { return primitives.empty(); }

    void recompute_extent() {
        extent = Aabb{};
        for (const auto& p : primitives) extent.expand(p.mu);
    }
};

}  // namespace csgs
