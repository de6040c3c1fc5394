#pragma once

#include "csgs/core/camera.hpp"
#include "csgs/core/gaussian.hpp"
#include "csgs/core/serialization.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <stdexcept>
#include <vector>

namespace csgs {

struct EmptyFusionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// One fused view: per-pixel distance along the unit pixel ray.
struct DepthObservation {
    Camera cam;
    std::vector<double> depth;
    std::vector<std::uint8_t> valid;
};

// Multi-view consistency filter. A depth pixel's 3D point is reprojected into
// every other view; a view that sees a closer surface there (the point is
// occluded) or no valid depth at all abstains. Among the views that do see
// past the point, agreement within `rel_tol` of the point's distance counts
// as support, seeing through it counts as contradiction. The pixel survives
// with `min_support` supporters, or with unanimous support when fewer views
// observe it. Floaters and grazing-angle errors are view-local and get
// contradicted; single-coverage regions are kept rather than discarded.
inline std::vector<DepthObservation> filter_depths(std::vector<DepthObservation> views,
                                                   double rel_tol = 0.01, int min_support = 2) {
    std::vector<std::vector<std::uint8_t>> keep(views.size());
    for (std::size_t i = 0; i < views.size(); ++i) {
        const auto& vi = views[i];
        const Mat3 c2w = vi.cam.rotation_w2c.transpose();
        const Vec3 eye = vi.cam.center();
        keep[i].assign(vi.depth.size(), 0);
        for (int row = 0; row < vi.cam.height; ++row)
            for (int col = 0; col < vi.cam.width; ++col) {
                const std::size_t pix = static_cast<std::size_t>(row) * vi.cam.width + col;
                if (!vi.valid[pix]) continue;
                const Vec3 p = eye + vi.depth[pix] * (c2w * vi.cam.pixel_ray(col, row));
                int observers = 0, support = 0;
                for (std::size_t j = 0; j < views.size() && support < min_support; ++j) {
                    if (j == i) continue;
                    const auto& vj = views[j];
                    const Vec3 pc = vj.cam.to_camera(p);
                    if (pc.z() <= 1e-9) continue;
                    const int c2 = static_cast<int>(std::floor(vj.cam.fx * pc.x() / pc.z() + vj.cam.cx));
                    const int r2 = static_cast<int>(std::floor(vj.cam.fy * pc.y() / pc.z() + vj.cam.cy));
                    if (c2 < 0 || c2 >= vj.cam.width || r2 < 0 || r2 >= vj.cam.height) continue;
                    const std::size_t pix2 = static_cast<std::size_t>(r2) * vj.cam.width + c2;
                    if (!vj.valid[pix2]) continue;
                    const Vec3 ray_j = vj.cam.rotation_w2c.transpose() * vj.cam.pixel_ray(c2, r2);
                    const double along = (p - vj.cam.center()).dot(ray_j);
                    if (along <= 0) continue;
                    if (vj.depth[pix2] < along * (1.0 - rel_tol)) continue;  // occluded in j
                    ++observers;
                    if (vj.depth[pix2] <= along * (1.0 + rel_tol)) ++support;
                }
                if (support >= std::min(min_support, observers)) keep[i][pix] = 1;
            }
    }
    for (std::size_t i = 0; i < views.size(); ++i) views[i].valid = std::move(keep[i]);
    return views;
}

struct TriangleMesh {
    std::vector<Vec3> vertices;
    std::vector<std::array<std::uint32_t, 3>> faces;

    bool empty() const { return faces.empty(); }
    double face_area(std::size_t f) const {
        const Vec3 a = vertices[faces[f][1]] - vertices[faces[f][0]];
        const Vec3 b = vertices[faces[f][2]] - vertices[faces[f][0]];
        return 0.5 * a.cross(b).norm();
    }
};

namespace detail {

struct TsdfGrid {
    Vec3 origin;
    double h = 0;
    int nx = 0, ny = 0, nz = 0;
    std::vector<float> value;
    std::vector<float> weight;

    std::size_t idx(int x, int y, int z) const {
        return (static_cast<std::size_t>(z) * ny + y) * nx + x;
    }
    Vec3 point(int x, int y, int z) const { return origin + h * Vec3(x, y, z); }
};

// The six-tetrahedra decomposition of a cube, as corner indices 0..7 with
// corner k at offset (k&1, (k>>1)&1, (k>>2)&1).
inline constexpr int kTets[6][4] = {{0, 1, 3, 7}, {0, 3, 2, 7}, {0, 2, 6, 7},
                                    {0, 6, 4, 7}, {0, 4, 5, 7}, {0, 5, 1, 7}};

inline Vec3 iso_vertex(const Vec3& pa, const Vec3& pb, double fa, double fb) {
    const double t = fa / (fa - fb);
    return pa + t * (pb - pa);
}

}  // namespace detail

// Truncated signed-distance fusion over a uniform grid (truncation 5 voxels,
// unit weight per valid observation), triangulated by marching tetrahedra.
// Strictly serialized over views and voxels: meshes are run-to-run identical.
inline TriangleMesh tsdf_fuse(const std::vector<DepthObservation>& views, double voxel,
                              const Aabb& bounds) {
    if (voxel <= 0) throw std::invalid_argument("tsdf_fuse: voxel size must be positive");
    bool any_valid = false;
    for (const auto& v : views)
        for (std::uint8_t b : v.valid) any_valid |= (b != 0);
    if (!any_valid) throw EmptyFusionError("tsdf_fuse: no valid depth pixels");
    if (bounds.empty()) throw std::invalid_argument("tsdf_fuse: empty bounds");

    const double trunc = 5.0 * voxel;
    detail::TsdfGrid grid;
    grid.h = voxel;
    grid.origin = bounds.lo - Vec3::Constant(trunc);
    const Vec3 span = bounds.hi - bounds.lo + 2.0 * Vec3::Constant(trunc);
    grid.nx = static_cast<int>(std::ceil(span.x() / voxel)) + 1;
    grid.ny = static_cast<int>(std::ceil(span.y() / voxel)) + 1;
    grid.nz = static_cast<int>(std::ceil(span.z() / voxel)) + 1;
    const std::size_t total = static_cast<std::size_t>(grid.nx) * grid.ny * grid.nz;
    grid.value.assign(total, 0.f);
    grid.weight.assign(total, 0.f);

    for (const auto& view : views) {
        const Camera& cam = view.cam;
        const Vec3 eye = cam.center();
        for (int z = 0; z < grid.nz; ++z)
            for (int y = 0; y < grid.ny; ++y)
                for (int x = 0; x < grid.nx; ++x) {
                    const Vec3 p = grid.point(x, y, z);
                    const Vec3 pc = cam.to_camera(p);
                    if (pc.z() <= 1e-9) continue;
                    const int col = static_cast<int>(std::floor(cam.fx * pc.x() / pc.z() + cam.cx));
                    const int row = static_cast<int>(std::floor(cam.fy * pc.y() / pc.z() + cam.cy));
                    if (col < 0 || col >= cam.width || row < 0 || row >= cam.height) continue;
                    const std::size_t pix = static_cast<std::size_t>(row) * cam.width + col;
                    if (!view.valid[pix]) continue;
                    const Vec3 ray = cam.rotation_w2c.transpose() * cam.pixel_ray(col, row);
                    const double along = (p - eye).dot(ray);
                    const double sdf = view.depth[pix] - along;
                    if (sdf < -trunc) continue;  // hidden well behind the surface
                    const float clamped = static_cast<float>(std::min(sdf, trunc));
                    const std::size_t i = grid.idx(x, y, z);
                    grid.value[i] = (grid.value[i] * grid.weight[i] + clamped) /
                                    (grid.weight[i] + 1.f);
                    grid.weight[i] += 1.f;
                }
    }

    TriangleMesh mesh;
    auto emit = [&](const Vec3& a, const Vec3& b, const Vec3& c) {
        const auto base = static_cast<std::uint32_t>(mesh.vertices.size());
        mesh.vertices.push_back(a);
        mesh.vertices.push_back(b);
        mesh.vertices.push_back(c);
        mesh.faces.push_back({base, base + 1, base + 2});
    };

    for (int z = 0; z + 1 < grid.nz; ++z)
        for (int y = 0; y + 1 < grid.ny; ++y)
            for (int x = 0; x + 1 < grid.nx; ++x) {
                Vec3 cp[8];
                double cf[8];
                bool observed = true;
                for (int k = 0; k < 8; ++k) {
                    const int cx = x + (k & 1), cy = y + ((k >> 1) & 1), cz = z + ((k >> 2) & 1);
                    const std::size_t i = grid.idx(cx, cy, cz);
                    observed &= grid.weight[i] > 0.f;
                    cp[k] = grid.point(cx, cy, cz);
                    cf[k] = grid.value[i];
                }
                if (!observed) continue;
                for (const auto& tet : detail::kTets) {
                    int inside[4], nin = 0, outside[4], nout = 0;
                    for (int k = 0; k < 4; ++k)
                        (cf[tet[k]] < 0 ? inside[nin++] : outside[nout++]) = tet[k];
                    if (nin == 0 || nin == 4) continue;
                    auto vtx = [&](int a, int b) {
                        return detail::iso_vertex(cp[a], cp[b], cf[a], cf[b]);
                    };
                    if (nin == 1) {
                        emit(vtx(inside[0], outside[0]), vtx(inside[0], outside[1]),
                             vtx(inside[0], outside[2]));
                    } else if (nin == 3) {
                        emit(vtx(outside[0], inside[0]), vtx(outside[0], inside[1]),
                             vtx(outside[0], inside[2]));
                    } else {
                        const Vec3 v00 = vtx(inside[0], outside[0]);
                        const Vec3 v01 = vtx(inside[0], outside[1]);
                        const Vec3 v10 = vtx(inside[1], outside[0]);
                        const Vec3 v11 = vtx(inside[1], outside[1]);
                        emit(v00, v01, v11);
                        emit(v00, v11, v10);
                    }
                }
            }
    return mesh;
}

// Seeded area-weighted surface point samples.
inline std::vector<Vec3> mesh_sample(const TriangleMesh& mesh, int count, std::uint32_t seed) {
    if (mesh.empty()) throw EmptyFusionError("mesh_sample: empty mesh");
    std::vector<double> areas(mesh.faces.size());
    for (std::size_t f = 0; f < mesh.faces.size(); ++f) areas[f] = mesh.face_area(f);
    std::mt19937 rng(seed);
    std::discrete_distribution<std::size_t> pick(areas.begin(), areas.end());
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<Vec3> out;
    out.reserve(count);
    for (int i = 0; i < count; ++i) {
        const auto& face = mesh.faces[pick(rng)];
        double a = u(rng), b = u(rng);
        if (a + b > 1) {
            a = 1 - a;
            b = 1 - b;
        }
        out.push_back(mesh.vertices[face[0]] +
                      a * (mesh.vertices[face[1]] - mesh.vertices[face[0]]) +
                      b * (mesh.vertices[face[2]] - mesh.vertices[face[0]]));
    }
    return out;
}

inline void save_mesh_ply(const TriangleMesh& mesh, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + path);
    f << "ply\nformat binary_little_endian 1.0\n";
    f << "element vertex " << mesh.vertices.size() << "\n";
    for (const char* n : {"x", "y", "z"}) f << "property float " << n << "\n";
    f << "element face " << mesh.faces.size() << "\n";
    f << "property list uchar uint vertex_indices\nend_header\n";
    std::string body;
    for (const auto& v : mesh.vertices)
        for (int i = 0; i < 3; ++i) detail::put_f32(body, v[i]);
    for (const auto& face : mesh.faces) {
        body.push_back(static_cast<char>(3));
        for (std::uint32_t i : face) detail::put_u32(body, i);
    }
    f.write(body.data(), static_cast<std::streamsize>(body.size()));
}

inline void save_points_ply(const std::vector<Vec3>& pts, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for write: " + path);
    f << "ply\nformat binary_little_endian 1.0\n";
    f << "element vertex " << pts.size() << "\n";
    for (const char* n : {"x", "y", "z"}) f << "property float " << n << "\n";
    f << "end_header\n";
    std::string body;
    for (const auto& v : pts)
        for (int i = 0; i < 3; ++i) detail::put_f32(body, v[i]);
    f.write(body.data(), static_cast<std::streamsize>(body.size()));
}

}  // namespace csgs
