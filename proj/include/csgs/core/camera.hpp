#pragma once

#include "csgs/core/gaussian.hpp"

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace csgs {

// Pinhole camera with world-to-camera extrinsics (x_cam = R x_world + t).
// Pixel (col,row) has its continuous image coordinate at (col+0.5, row+0.5).
struct Camera {
    std::string camera_id;
    double fx = 0, fy = 0, cx = 0, cy = 0;
    int width = 0, height = 0;
    Mat3 rotation_w2c = Mat3::Identity();
    Vec3 translation_w2c = Vec3::Zero();
    // Device-local only; stripped from every inter-agent artifact.
    std::optional<std::string> image_ref;

    bool valid() const {
        if (fx <= 0 || fy <= 0 || width <= 0 || height <= 0) return false;
        const Mat3 should_be_i = rotation_w2c * rotation_w2c.transpose();
        return (should_be_i - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-6 &&
               std::abs(rotation_w2c.determinant() - 1.0) < 1e-6;
    }

    Vec3 center() const { return -rotation_w2c.transpose() * translation_w2c; }
    Vec3 to_camera(const Vec3& x_world) const { return rotation_w2c * x_world + translation_w2c; }
    Vec3 view_dir() const { return rotation_w2c.row(2).transpose(); }

    // Unit camera-frame ray through pixel (col,row).
    Vec3 pixel_ray(double col, double row) const {
        Vec3 d((col + 0.5 - cx) / fx, (row + 0.5 - cy) / fy, 1.0);
        return d.normalized();
    }
};

inline Vec3 flat_normal(const GaussianPrimitive& p, const Camera& cam) {
    return flat_normal_towards(p, cam.center());
}

struct CameraSet {
    std::map<std::string, Camera> cameras;

    std::size_t size() const { return cameras.size(); }
    bool empty() const { return cameras.empty(); }
    bool contains(const std::string& id) const { return cameras.count(id) > 0; }

    void insert(const Camera& c) { cameras[c.camera_id] = c; }

    CameraSet intersect(const CameraSet& other) const {
        CameraSet out;
        for (const auto& [id, c] : cameras)
            if (other.contains(id)) out.insert(c);
        return out;
    }
    CameraSet difference(const CameraSet& other) const {
        CameraSet out;
        for (const auto& [id, c] : cameras)
            if (!other.contains(id)) out.insert(c);
        return out;
    }
    std::vector<Camera> ordered() const {
        std::vector<Camera> out;
        out.reserve(cameras.size());
        for (const auto& [id, c] : cameras) out.push_back(c);
        return out;
    }
};

}  // namespace csgs
