#pragma once

#include "csgs/core/camera.hpp"
#include "csgs/core/image.hpp"
#include "csgs/losses/dual.hpp"
#include "csgs/losses/ssim.hpp"
#include "csgs/render/backward.hpp"
#include "csgs/render/rasterizer.hpp"

#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

namespace csgs {

struct DegeneratePlaneError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct EmptyModelError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct CameraMismatchError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct LossWeights {
    double lambda = 0.2;      // SSIM mix in the image reconstruction loss
    double lambda1 = 25.0;    // scale loss weight
    double beta2 = 0.01;      // single-view geometric cap
    double beta3_geo = 0.05;  // multi-view geometric cap
    double beta3_rgb = 0.2;   // multi-view photometric cap
    int tau = 700;            // stage-1 iterations
    int max_iters = 3000;     // T
    double theta = 1.0;       // reprojection threshold, pixels
    double lambda_d = 0.015;  // distillation depth weight
    double lambda_n = 0.015;  // distillation normal weight
    int patch_start = 11;
    int patch_end = 7;
    int mv_stride = 1;  // pixel stride for the multi-view terms
};

// Smooth geometric weight: 0 through stage 1, then beta_i (t - tau) / T.
inline double schedule_weight(double beta_i, int t, int tau, int max_iters) {
    if (t <= tau) return 0.0;
    return beta_i * static_cast<double>(t - tau) / static_cast<double>(max_iters);
}

inline double schedule_weight(int i, int t, const LossWeights& w) {
    const double beta = i == 2 ? w.beta2 : w.beta3_geo;
    return schedule_weight(beta, t, w.tau, w.max_iters);
}

// NCC patch size, interpolated from patch_start to patch_end over (tau, T],
// rounded to the nearest odd integer.
inline int patch_size_at(int t, const LossWeights& w) {
    if (t <= w.tau) return w.patch_start;
    const double frac = static_cast<double>(t - w.tau) / static_cast<double>(w.max_iters - w.tau);
    const double size = w.patch_start + frac * (w.patch_end - w.patch_start);
    int p = static_cast<int>(std::lround(size));
    if (p % 2 == 0) p += (size > p) ? 1 : -1;
    return std::max(1, p);
}

// Mean over primitives of the minimum activated scale (Eq.-style flattening
// pressure). Gradient is w.r.t. log scales.
inline double scale_loss(const GaussianModel& m, std::vector<Vec3>* g_log_scale = nullptr) {
    if (m.empty()) throw EmptyModelError("scale_loss on empty model");
    if (g_log_scale) g_log_scale->assign(m.size(), Vec3::Zero());
    double acc = 0;
    const double inv = 1.0 / static_cast<double>(m.size());
    for (std::size_t k = 0; k < m.size(); ++k) {
        const int axis = min_scale_axis(m.primitives[k]);
        const double s = std::exp(m.primitives[k].log_scale[axis]);
        acc += s * inv;
        if (g_log_scale) (*g_log_scale)[k][axis] = s * inv;
    }
    return acc;
}

struct NormalMap {
    int width = 0, height = 0;
    std::vector<Vec3> normal;
    std::vector<std::uint8_t> valid;
};

// Surface normal from the four-neighbor back-projections of an unbiased depth
// map, camera frame, oriented toward the camera.
inline NormalMap depth_to_normal(const DepthMap& depth, const Camera& cam) {
    NormalMap out;
    out.width = depth.width;
    out.height = depth.height;
    out.normal.assign(depth.depth.size(), Vec3::Zero());
    out.valid.assign(depth.depth.size(), 0);
    for (int y = 1; y + 1 < depth.height; ++y) {
        for (int x = 1; x + 1 < depth.width; ++x) {
            const std::size_t pix = depth.idx(y, x);
            if (!depth.valid[pix] || !depth.valid[depth.idx(y, x - 1)] ||
                !depth.valid[depth.idx(y, x + 1)] || !depth.valid[depth.idx(y - 1, x)] ||
                !depth.valid[depth.idx(y + 1, x)])
                continue;
            auto bp = [&](int col, int row) -> Vec3 {
                return depth.depth[depth.idx(row, col)] * cam.pixel_ray(col, row);
            };
            const Vec3 dx = bp(x + 1, y) - bp(x - 1, y);
            const Vec3 dy = bp(x, y + 1) - bp(x, y - 1);
            Vec3 n = dx.cross(dy);
            const double nn = n.norm();
            if (nn < 1e-12) continue;
            n /= nn;
            if (n.dot(cam.pixel_ray(x, y)) > 0) n = -n;
            out.normal[pix] = n;
            out.valid[pix] = 1;
        }
    }
    return out;
}

// Per-pixel flatness-weighted normal agreement; the combination of a stencil
// normal map with a rendered normal map. Exposed separately so its fixed
// point (N_s = N) is exact.
inline double svg_combine(const NormalMap& ns, const std::vector<Vec3>& n) {
    double acc = 0;
    int count = 0;
    for (std::size_t pix = 0; pix < ns.normal.size(); ++pix) {
        if (!ns.valid[pix]) continue;
        ++count;
        acc += std::abs(ns.normal[pix].dot(n[pix])) * (ns.normal[pix] - n[pix]).lpNorm<1>();
    }
    return count > 0 ? acc / count : 0.0;
}

namespace detail {

template <int W>
DualVec3<W> matvec(const Mat3& m, const DualVec3<W>& v) {
    return {m(0, 0) * v.x + m(0, 1) * v.y + m(0, 2) * v.z,
            m(1, 0) * v.x + m(1, 1) * v.y + m(1, 2) * v.z,
            m(2, 0) * v.x + m(2, 1) * v.y + m(2, 2) * v.z};
}

template <int W>
Dual<W> l1_diff3(const DualVec3<W>& a, const DualVec3<W>& b) {
    return abs(a.x - b.x) + abs(a.y - b.y) + abs(a.z - b.z);
}

// Pixel validity used by all geometric losses: covered, plane not grazing.
inline bool geo_valid(const RenderBuffers& buf, const DepthMap& depth, std::size_t pix) {
    return depth.valid[pix] != 0 && buf.alpha[pix] >= buf.config.alpha_valid_floor;
}

}  // namespace detail

// Single-view geometric loss: mean over valid pixels of
// |N_s . N| * ||N_s - N||_1, N_s from four-neighbor unbiased depth.
inline double svg_loss(const RenderBuffers& buf, const Camera& cam, BufferGrads* grads = nullptr) {
    const DepthMap depth = unbiased_depth(buf, cam);
    constexpr int W = 23;  // 4x(pd + normal + alpha) neighbors + rendered normal
    using D = Dual<W>;
    using V3 = DualVec3<W>;

    struct Term {
        std::size_t pix;
        D value;
    };
    std::vector<Term> terms;
    const int h = buf.height, w = buf.width;
    const int dx4[4] = {-1, 1, 0, 0};
    const int dy4[4] = {0, 0, -1, 1};

    for (int y = 1; y + 1 < h; ++y) {
        for (int x = 1; x + 1 < w; ++x) {
            const std::size_t pix = buf.idx(y, x);
            bool ok = detail::geo_valid(buf, depth, pix);
            for (int q = 0; q < 4 && ok; ++q)
                ok = detail::geo_valid(buf, depth, buf.idx(y + dy4[q], x + dx4[q]));
            if (!ok) continue;

            V3 bp[4];
            for (int q = 0; q < 4; ++q) {
                const int qx = x + dx4[q], qy = y + dy4[q];
                const std::size_t qpix = buf.idx(qy, qx);
                const D pd = D::var(buf.plane_distance[qpix], 5 * q);
                const V3 nq{D::var(buf.normal[qpix][0], 5 * q + 1),
                            D::var(buf.normal[qpix][1], 5 * q + 2),
                            D::var(buf.normal[qpix][2], 5 * q + 3)};
                const D av = D::var(buf.alpha[qpix], 5 * q + 4);
                const Vec3 ray = cam.pixel_ray(qx, qy);
                const V3 rayd{D(ray.x()), D(ray.y()), D(ray.z())};
                const D dist = pd / (av * nq.dot(rayd));
                bp[q] = rayd * dist;
            }
            V3 ns = (bp[1] - bp[0]).cross(bp[3] - bp[2]);
            const D nn = ns.norm();
            if (nn.v < 1e-12) continue;
            ns = ns / nn;
            const Vec3 ray_p = cam.pixel_ray(x, y);
            if (ns.x.v * ray_p.x() + ns.y.v * ray_p.y() + ns.z.v * ray_p.z() > 0) ns = -ns;

            const V3 nr{D::var(buf.normal[pix][0], 20), D::var(buf.normal[pix][1], 21),
                        D::var(buf.normal[pix][2], 22)};
            terms.push_back({pix, abs(ns.dot(nr)) * detail::l1_diff3(ns, nr)});
        }
    }
    if (terms.empty()) return 0.0;

    const double inv = 1.0 / static_cast<double>(terms.size());
    double loss = 0;
    for (const auto& t : terms) loss += t.value.v * inv;

    if (grads) {
        if (grads->plane_distance.empty()) grads->resize_zero(buf.alpha.size());
        for (const auto& t : terms) {
            const int x = static_cast<int>(t.pix % w), y = static_cast<int>(t.pix / w);
            for (int q = 0; q < 4; ++q) {
                const std::size_t qpix = buf.idx(y + dy4[q], x + dx4[q]);
                grads->plane_distance[qpix] += inv * t.value.g[5 * q];
                for (int i = 0; i < 3; ++i)
                    grads->normal[qpix][i] += inv * t.value.g[5 * q + 1 + i];
                grads->alpha[qpix] += inv * t.value.g[5 * q + 4];
            }
            for (int i = 0; i < 3; ++i) grads->normal[t.pix][i] += inv * t.value.g[20 + i];
        }
    }
    return loss;
}

struct PlaneHypothesis {
    Vec3 normal = Vec3(0, 0, -1);  // unit, reference-camera frame, toward camera
    double distance = 1.0;         // positive plane offset: normal . X = -distance
};

inline Mat3 intrinsics(const Camera& c) {
    Mat3 k;
    k << c.fx, 0, c.cx, 0, c.fy, c.cy, 0, 0, 1;
    return k;
}

// Plane-induced homography mapping reference pixels to neighbor pixels.
inline Mat3 plane_homography(const PlaneHypothesis& h, const Camera& cam_r, const Camera& cam_n) {
    if (std::abs(h.distance) < 1e-9)
        throw DegeneratePlaneError("camera center lies on the plane");
    const Mat3 r_rn = cam_n.rotation_w2c * cam_r.rotation_w2c.transpose();
    const Vec3 t_rn = cam_n.translation_w2c - r_rn * cam_r.translation_w2c;
    Mat3 hm = intrinsics(cam_n) * (r_rn - t_rn * h.normal.transpose() / h.distance) *
              intrinsics(cam_r).inverse();
    if (std::abs(hm(2, 2)) > 1e-12) hm /= hm(2, 2);
    return hm;
}

struct MvGeoResult {
    double loss = 0;
    int valid_count = 0;
    std::vector<std::uint8_t> valid;  // the pixel set V
};

namespace detail {

struct RelativePose {
    Mat3 rot;
    Vec3 trans;
};

inline RelativePose relative_pose(const Camera& from, const Camera& to) {
    RelativePose rp;
    rp.rot = to.rotation_w2c * from.rotation_w2c.transpose();
    rp.trans = to.translation_w2c - rp.rot * from.translation_w2c;
    return rp;
}

// Homogeneous plane warp of an image point: (R - t n^T / dist) K^-1 p.
template <int W>
DualVec3<W> plane_warp(const RelativePose& rp, const DualVec3<W>& n, const Dual<W>& dist,
                       const Camera& from, const Dual<W>& u, const Dual<W>& v) {
    const DualVec3<W> dir{(u - from.cx) / from.fx, (v - from.cy) / from.fy, Dual<W>(1.0)};
    const DualVec3<W> rotated = matvec<W>(rp.rot, dir);
    const Dual<W> scale = n.dot(dir) / dist;
    return {rotated.x - rp.trans.x() * scale, rotated.y - rp.trans.y() * scale,
            rotated.z - rp.trans.z() * scale};
}

}  // namespace detail

// Forward-backward plane-warp reprojection error between two rendered views.
// Pixels whose error exceeds theta, or that are invalid in either view, are
// excluded from the valid set V.
inline MvGeoResult mv_geo_loss(const RenderBuffers& ref_buf, const Camera& ref_cam,
                               const RenderBuffers& nbr_buf, const Camera& nbr_cam, double theta,
                               BufferGrads* g_ref = nullptr, BufferGrads* g_nbr = nullptr,
                               int stride = 1) {
    constexpr int W = 25;  // ref (pd,n,alpha) + 4 neighbor corners (pd,n,alpha)
    using D = Dual<W>;
    using V3 = DualVec3<W>;

    const DepthMap ref_depth = unbiased_depth(ref_buf, ref_cam);
    const DepthMap nbr_depth = unbiased_depth(nbr_buf, nbr_cam);
    const auto fwd = detail::relative_pose(ref_cam, nbr_cam);
    const auto bwd = detail::relative_pose(nbr_cam, ref_cam);

    MvGeoResult out;
    out.valid.assign(ref_buf.alpha.size(), 0);

    struct Term {
        std::size_t pix;
        std::size_t corners[4];
        D err;
    };
    std::vector<Term> terms;

    for (int y = 0; y < ref_buf.height; y += stride) {
        for (int x = 0; x < ref_buf.width; x += stride) {
            const std::size_t pix = ref_buf.idx(y, x);
            if (!detail::geo_valid(ref_buf, ref_depth, pix)) continue;

            const D pd_r = D::var(ref_buf.plane_distance[pix], 0);
            const V3 n_r{D::var(ref_buf.normal[pix][0], 1), D::var(ref_buf.normal[pix][1], 2),
                         D::var(ref_buf.normal[pix][2], 3)};
            const D a_r = D::var(ref_buf.alpha[pix], 4);
            const D dist_r = -pd_r / a_r;
            if (dist_r.v < 1e-6) continue;

            const D u_r(x + 0.5), v_r(y + 0.5);
            const V3 q = detail::plane_warp<W>(fwd, n_r, dist_r, ref_cam, u_r, v_r);
            if (q.z.v <= 1e-9) continue;
            const D u_n = nbr_cam.fx * (q.x / q.z) + nbr_cam.cx;
            const D v_n = nbr_cam.fy * (q.y / q.z) + nbr_cam.cy;

            // Bilinear plane hypothesis from the neighbor buffers at (u_n,v_n).
            const double gx = u_n.v - 0.5, gy = v_n.v - 0.5;
            const int x0 = static_cast<int>(std::floor(gx));
            const int y0 = static_cast<int>(std::floor(gy));
            if (x0 < 0 || y0 < 0 || x0 + 1 >= nbr_buf.width || y0 + 1 >= nbr_buf.height) continue;
            bool corners_ok = true;
            std::size_t corner_pix[4];
            for (int c = 0; c < 4; ++c) {
                corner_pix[c] = nbr_buf.idx(y0 + c / 2, x0 + c % 2);
                corners_ok = corners_ok && detail::geo_valid(nbr_buf, nbr_depth, corner_pix[c]);
            }
            if (!corners_ok) continue;

            const D wx = (u_n - 0.5) - static_cast<double>(x0);
            const D wy = (v_n - 0.5) - static_cast<double>(y0);
            const D cw[4] = {(1.0 - wx) * (1.0 - wy), wx * (1.0 - wy), (1.0 - wx) * wy, wx * wy};
            D pd_n(0.0);
            V3 n_n{D(0.0), D(0.0), D(0.0)};
            for (int c = 0; c < 4; ++c) {
                pd_n += cw[c] * (D::var(nbr_buf.plane_distance[corner_pix[c]], 5 + 5 * c) /
                                 D::var(nbr_buf.alpha[corner_pix[c]], 5 + 5 * c + 4));
                n_n.x += cw[c] * D::var(nbr_buf.normal[corner_pix[c]][0], 5 + 5 * c + 1);
                n_n.y += cw[c] * D::var(nbr_buf.normal[corner_pix[c]][1], 5 + 5 * c + 2);
                n_n.z += cw[c] * D::var(nbr_buf.normal[corner_pix[c]][2], 5 + 5 * c + 3);
            }
            const D nlen = n_n.norm();
            if (nlen.v < 1e-6) continue;
            n_n = n_n / nlen;
            const D dist_n = -pd_n / nlen;  // same plane, unit normal
            if (dist_n.v < 1e-6) continue;

            const V3 qb = detail::plane_warp<W>(bwd, n_n, dist_n, nbr_cam, u_n, v_n);
            if (qb.z.v <= 1e-9) continue;
            const D u_back = ref_cam.fx * (qb.x / qb.z) + ref_cam.cx;
            const D v_back = ref_cam.fy * (qb.y / qb.z) + ref_cam.cy;

            const D du = u_back - u_r, dv = v_back - v_r;
            const D err = sqrt(du * du + dv * dv);
            if (err.v > theta) continue;

            out.valid[pix] = 1;
            Term t;
            t.pix = pix;
            for (int c = 0; c < 4; ++c) t.corners[c] = corner_pix[c];
            t.err = err;
            terms.push_back(t);
        }
    }

    out.valid_count = static_cast<int>(terms.size());
    if (terms.empty()) return out;
    const double inv = 1.0 / static_cast<double>(terms.size());
    for (const auto& t : terms) out.loss += t.err.v * inv;

    if (g_ref && g_ref->plane_distance.empty()) g_ref->resize_zero(ref_buf.alpha.size());
    if (g_nbr && g_nbr->plane_distance.empty()) g_nbr->resize_zero(nbr_buf.alpha.size());
    for (const auto& t : terms) {
        if (g_ref) {
            g_ref->plane_distance[t.pix] += inv * t.err.g[0];
            for (int i = 0; i < 3; ++i) g_ref->normal[t.pix][i] += inv * t.err.g[1 + i];
            g_ref->alpha[t.pix] += inv * t.err.g[4];
        }
        if (g_nbr) {
            for (int c = 0; c < 4; ++c) {
                g_nbr->plane_distance[t.corners[c]] += inv * t.err.g[5 + 5 * c];
                for (int i = 0; i < 3; ++i)
                    g_nbr->normal[t.corners[c]][i] += inv * t.err.g[5 + 5 * c + 1 + i];
                g_nbr->alpha[t.corners[c]] += inv * t.err.g[5 + 5 * c + 4];
            }
        }
    }
    return out;
}

namespace detail {

// Bilinear luminance sample with clamped coordinates; differentiable in (u,v).
template <int W>
Dual<W> sample_luma(const ImageRGB& img, Dual<W> u, Dual<W> v) {
    double gx = u.v - 0.5, gy = v.v - 0.5;
    const double max_x = img.width - 1.0, max_y = img.height - 1.0;
    Dual<W> ux = u - 0.5, vy = v - 0.5;
    if (gx < 0) ux = Dual<W>(0.0);
    if (gx > max_x) ux = Dual<W>(max_x);
    if (gy < 0) vy = Dual<W>(0.0);
    if (gy > max_y) vy = Dual<W>(max_y);
    const int x0 = std::min(static_cast<int>(std::floor(ux.v)), img.width - 2);
    const int y0 = std::min(static_cast<int>(std::floor(vy.v)), img.height - 2);
    const Dual<W> wx = ux - static_cast<double>(x0);
    const Dual<W> wy = vy - static_cast<double>(y0);
    const double c00 = luminance(img.at(y0, x0)), c10 = luminance(img.at(y0, x0 + 1));
    const double c01 = luminance(img.at(y0 + 1, x0)), c11 = luminance(img.at(y0 + 1, x0 + 1));
    return (1.0 - wy) * ((1.0 - wx) * c00 + wx * c10) + wy * ((1.0 - wx) * c01 + wx * c11);
}

}  // namespace detail

// Zero-mean normalized cross correlation with a variance floor, in [-1,1].
template <typename Scalar>
Scalar ncc(const std::vector<double>& a, const std::vector<Scalar>& b) {
    const double inv = 1.0 / static_cast<double>(a.size());
    double mean_a = 0;
    Scalar mean_b(0.0);
    for (std::size_t i = 0; i < a.size(); ++i) {
        mean_a += a[i] * inv;
        mean_b += b[i] * inv;
    }
    double var_a = 0;
    Scalar var_b(0.0), cov(0.0);
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double da = a[i] - mean_a;
        const Scalar db = b[i] - mean_b;
        var_a += da * da * inv;
        var_b += db * db * inv;
        cov += da * db * inv;
    }
    constexpr double kVarFloor = 1e-8;
    if (var_a < kVarFloor) var_a = kVarFloor;
    if (var_b < kVarFloor) var_b = Scalar(kVarFloor);
    // Bitwise-identical patches accumulate cov == var_a == var_b; the true
    // correlation is 1, a maximum, so its gradient vanishes there.
    const Scalar va(var_a);
    if (!(cov < va) && !(cov > va) && !(cov < var_b) && !(cov > var_b)) return Scalar(1.0);
    Scalar r = cov / sqrt(var_a * var_b);
    if (r > Scalar(1.0)) r = Scalar(1.0);
    if (Scalar(-1.0) > r) r = Scalar(-1.0);
    return r;
}

inline double ncc(const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<Dual<0>> bd(b.begin(), b.end());
    return ncc<Dual<0>>(a, bd).v;
}

// Multi-view photometric loss: mean over V of 1 - NCC between the reference
// patch and the plane-warped neighbor patch.
inline double mv_rgb_loss(const ImageRGB& ref_img, const RenderBuffers& ref_buf,
                          const Camera& ref_cam, const ImageRGB& nbr_img, const Camera& nbr_cam,
                          int patch, const std::vector<std::uint8_t>& valid,
                          BufferGrads* g_ref = nullptr, int stride = 1) {
    if (patch % 2 == 0) throw std::invalid_argument("mv_rgb_loss: patch size must be odd");
    constexpr int W = 5;
    using D = Dual<W>;
    const int half = patch / 2;
    const auto fwd = detail::relative_pose(ref_cam, nbr_cam);

    struct Term {
        std::size_t pix;
        D value;
    };
    std::vector<Term> terms;
    std::vector<double> ref_patch;
    std::vector<D> nbr_patch;

    for (int y = half; y + half < ref_buf.height; y += stride) {
        for (int x = half; x + half < ref_buf.width; x += stride) {
            const std::size_t pix = ref_buf.idx(y, x);
            if (!valid[pix]) continue;
            const D pd_r = D::var(ref_buf.plane_distance[pix], 0);
            const DualVec3<W> n_r{D::var(ref_buf.normal[pix][0], 1),
                                  D::var(ref_buf.normal[pix][1], 2),
                                  D::var(ref_buf.normal[pix][2], 3)};
            const D a_r = D::var(ref_buf.alpha[pix], 4);
            const D dist_r = -pd_r / a_r;
            if (dist_r.v < 1e-6) continue;

            ref_patch.clear();
            nbr_patch.clear();
            bool ok = true;
            for (int dy = -half; dy <= half && ok; ++dy) {
                for (int dx = -half; dx <= half && ok; ++dx) {
                    ref_patch.push_back(luminance(ref_img.at(y + dy, x + dx)));
                    const D u(x + dx + 0.5), v(y + dy + 0.5);
                    const DualVec3<W> q = detail::plane_warp<W>(fwd, n_r, dist_r, ref_cam, u, v);
                    if (q.z.v <= 1e-9) {
                        ok = false;
                        break;
                    }
                    nbr_patch.push_back(
                        detail::sample_luma<W>(nbr_img, nbr_cam.fx * (q.x / q.z) + nbr_cam.cx,
                                               nbr_cam.fy * (q.y / q.z) + nbr_cam.cy));
                }
            }
            if (!ok) continue;
            terms.push_back({pix, D(1.0) - ncc<D>(ref_patch, nbr_patch)});
        }
    }
    if (terms.empty()) return 0.0;
    const double inv = 1.0 / static_cast<double>(terms.size());
    double loss = 0;
    for (const auto& t : terms) loss += t.value.v * inv;
    if (g_ref) {
        if (g_ref->plane_distance.empty()) g_ref->resize_zero(ref_buf.alpha.size());
        for (const auto& t : terms) {
            g_ref->plane_distance[t.pix] += inv * t.value.g[0];
            for (int i = 0; i < 3; ++i) g_ref->normal[t.pix][i] += inv * t.value.g[1 + i];
            g_ref->alpha[t.pix] += inv * t.value.g[4];
        }
    }
    return loss;
}

struct DeviceLossResult {
    double total = 0;
    double l_3dgs = 0, l_scale = 0, l_svg = 0, l_mvgeo = 0, l_mvrgb = 0;
    double w_svg = 0, w_mvgeo = 0, w_mvrgb = 0;
    bool has_neighbor = false;
    BufferGrads ref_grads;
    BufferGrads nbr_grads;
    std::vector<Vec3> g_log_scale;
};

struct ViewData {
    const RenderBuffers* buf = nullptr;
    const Camera* cam = nullptr;
    const ImageRGB* image = nullptr;  // ground truth
};

// Full device objective. Stage 1 (t <= tau) is image reconstruction plus the
// flattening pressure; geometric terms ramp in afterwards.
inline DeviceLossResult device_loss(const GaussianModel& m, const ViewData& ref,
                                    const std::optional<ViewData>& nbr, int t,
                                    const LossWeights& w, bool want_grads = false) {
    DeviceLossResult out;
    out.w_svg = schedule_weight(w.beta2, t, w.tau, w.max_iters);
    out.w_mvgeo = schedule_weight(w.beta3_geo, t, w.tau, w.max_iters);
    out.w_mvrgb = schedule_weight(w.beta3_rgb, t, w.tau, w.max_iters);

    const std::size_t npix = ref.buf->alpha.size();
    ImageRGB rendered(ref.buf->width, ref.buf->height);
    rendered.px = ref.buf->rgb;

    std::vector<Vec3> g_rgb;
    out.l_3dgs = l1_ssim(rendered, *ref.image, w.lambda, want_grads ? &g_rgb : nullptr);
    out.l_scale = scale_loss(m, want_grads ? &out.g_log_scale : nullptr);
    if (want_grads) {
        out.ref_grads.resize_zero(npix);
        out.ref_grads.rgb = std::move(g_rgb);
        for (auto& g : out.g_log_scale) g *= w.lambda1;
    }

    BufferGrads svg_grads;
    if (out.w_svg > 0)
        out.l_svg = svg_loss(*ref.buf, *ref.cam, want_grads ? &svg_grads : nullptr);

    const bool mv_active = nbr.has_value() && (out.w_mvgeo > 0 || out.w_mvrgb > 0);
    if (mv_active) {
        out.has_neighbor = true;
        if (want_grads) out.nbr_grads.resize_zero(nbr->buf->alpha.size());
        BufferGrads geo_ref, geo_nbr;
        auto geo = mv_geo_loss(*ref.buf, *ref.cam, *nbr->buf, *nbr->cam, w.theta,
                               want_grads ? &geo_ref : nullptr, want_grads ? &geo_nbr : nullptr,
                               w.mv_stride);
        out.l_mvgeo = geo.loss;

        BufferGrads rgb_ref;
        out.l_mvrgb = mv_rgb_loss(*ref.image, *ref.buf, *ref.cam, *nbr->image, *nbr->cam,
                                  patch_size_at(t, w), geo.valid,
                                  want_grads ? &rgb_ref : nullptr, w.mv_stride);
        if (want_grads) {
            auto axpy = [](BufferGrads& dst, const BufferGrads& src, double s) {
                if (src.plane_distance.empty()) return;
                for (std::size_t i = 0; i < dst.plane_distance.size(); ++i) {
                    dst.plane_distance[i] += s * src.plane_distance[i];
                    dst.normal[i] += s * src.normal[i];
                    dst.alpha[i] += s * src.alpha[i];
                }
            };
            axpy(out.ref_grads, geo_ref, out.w_mvgeo);
            axpy(out.nbr_grads, geo_nbr, out.w_mvgeo);
            axpy(out.ref_grads, rgb_ref, out.w_mvrgb);
        }
    }

    if (want_grads && !svg_grads.plane_distance.empty()) {
        for (std::size_t i = 0; i < npix; ++i) {
            out.ref_grads.plane_distance[i] += out.w_svg * svg_grads.plane_distance[i];
            out.ref_grads.normal[i] += out.w_svg * svg_grads.normal[i];
            out.ref_grads.alpha[i] += out.w_svg * svg_grads.alpha[i];
        }
    }

    out.total = out.l_3dgs + w.lambda1 * out.l_scale + out.w_svg * out.l_svg +
                out.w_mvgeo * out.l_mvgeo + out.w_mvrgb * out.l_mvrgb;
    return out;
}

struct DistillResult {
    double total = 0;
    double l_3dgs = 0, l_scale = 0, l_svg = 0, l_depth = 0, l_normal = 0;
    BufferGrads student_grads;
    std::vector<Vec3> g_log_scale;
};

// Self-distillation objective: match the teacher's RGB everywhere and its
// depth/normal where the teacher is valid, plus the student's own flattening
// and single-view consistency terms.
inline DistillResult distill_losses(const GaussianModel& student_model,
                                    const RenderBuffers& student, const Camera& student_cam,
                                    const RenderBuffers& teacher, const Camera& teacher_cam,
                                    const LossWeights& w, bool want_grads = false) {
    if (student_cam.camera_id != teacher_cam.camera_id || student.width != teacher.width ||
        student.height != teacher.height ||
        (student_cam.center() - teacher_cam.center()).norm() > 1e-12)
        throw CameraMismatchError("distill_losses: student and teacher cameras differ");

    DistillResult out;
    const std::size_t npix = student.alpha.size();
    if (want_grads) out.student_grads.resize_zero(npix);

    ImageRGB s_img(student.width, student.height), t_img(teacher.width, teacher.height);
    s_img.px = student.rgb;
    t_img.px = teacher.rgb;
    std::vector<Vec3> g_rgb;
    out.l_3dgs = l1_ssim(s_img, t_img, w.lambda, want_grads ? &g_rgb : nullptr);
    if (want_grads) out.student_grads.rgb = std::move(g_rgb);

    out.l_scale = scale_loss(student_model, want_grads ? &out.g_log_scale : nullptr);
    if (want_grads)
        for (auto& g : out.g_log_scale) g *= w.lambda1;

    BufferGrads svg_grads;
    out.l_svg = svg_loss(student, student_cam, want_grads ? &svg_grads : nullptr);

    // Depth and normal supervision masked to teacher-valid pixels.
    const DepthMap t_depth = unbiased_depth(teacher, teacher_cam);
    const DepthMap s_depth = unbiased_depth(student, student_cam);
    int count = 0;
    double normal_acc = 0, depth_acc = 0;
    struct DepthTerm {
        std::size_t pix;
        double sign;
        Vec3 ray;
    };
    std::vector<DepthTerm> depth_terms;
    for (int y = 0; y < student.height; ++y) {
        for (int x = 0; x < student.width; ++x) {
            const std::size_t pix = student.idx(y, x);
            if (!detail::geo_valid(teacher, t_depth, pix)) continue;
            ++count;
            normal_acc += (student.normal[pix] - teacher.normal[pix]).lpNorm<1>();
            if (!s_depth.valid[pix]) {
                // Student not yet covering this pixel: no usable depth, skip the
                // depth residual (the rgb/alpha path pulls coverage in).
                continue;
            }
            const double r = s_depth.depth[pix] - t_depth.depth[pix];
            depth_acc += std::abs(r);
            if (want_grads && r != 0)
                depth_terms.push_back({pix, r > 0 ? 1.0 : -1.0, student_cam.pixel_ray(x, y)});
        }
    }
    if (count > 0) {
        const double inv = 1.0 / static_cast<double>(count);
        out.l_normal = normal_acc * inv;
        out.l_depth = depth_acc * inv;
        if (want_grads) {
            for (const auto& dt : depth_terms) {
                // depth = pd / (alpha * (n . ray))
                const double denom = student.normal[dt.pix].dot(dt.ray);
                const double alpha = student.alpha[dt.pix];
                const double depth = student.plane_distance[dt.pix] / (alpha * denom);
                const double s = w.lambda_d * inv * dt.sign;
                out.student_grads.plane_distance[dt.pix] += s / (alpha * denom);
                out.student_grads.alpha[dt.pix] -= s * depth / alpha;
                out.student_grads.normal[dt.pix] -= s * depth / denom * dt.ray;
            }
            for (int y = 0; y < student.height; ++y)
                for (int x = 0; x < student.width; ++x) {
                    const std::size_t pix = student.idx(y, x);
                    if (!detail::geo_valid(teacher, t_depth, pix)) continue;
                    for (int i = 0; i < 3; ++i) {
                        const double d = student.normal[pix][i] - teacher.normal[pix][i];
                        out.student_grads.normal[pix][i] +=
                            w.lambda_n * inv * (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0));
                    }
                }
        }
    }

    if (want_grads && !svg_grads.plane_distance.empty()) {
        for (std::size_t i = 0; i < npix; ++i) {
            out.student_grads.plane_distance[i] += w.beta2 * svg_grads.plane_distance[i];
            out.student_grads.normal[i] += w.beta2 * svg_grads.normal[i];
            out.student_grads.alpha[i] += w.beta2 * svg_grads.alpha[i];
        }
    }

    out.total = out.l_3dgs + w.lambda1 * out.l_scale + w.beta2 * out.l_svg +
                w.lambda_d * out.l_depth + w.lambda_n * out.l_normal;
    return out;
}

}  // namespace csgs
