#pragma once

#include "csgs/render/rasterizer.hpp"

#include <stdexcept>
#include <vector>

namespace csgs {

struct MissingContributorsError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Upstream gradients of a scalar loss w.r.t. the rendered buffers. Empty
// vectors mean zero.
struct BufferGrads {
    std::vector<Vec3> rgb;
    std::vector<double> alpha;
    std::vector<Vec3> normal;           // w.r.t. the normalized output normal
    std::vector<double> plane_distance;

    void resize_zero(std::size_t npix) {
        rgb.assign(npix, Vec3::Zero());
        alpha.assign(npix, 0.0);
        normal.assign(npix, Vec3::Zero());
        plane_distance.assign(npix, 0.0);
    }
};

struct ParamGrads {
    std::vector<Vec3> mu;
    std::vector<Vec4> rotation;
    std::vector<Vec3> log_scale;
    std::vector<double> opacity_logit;
    std::vector<std::vector<Vec3>> color_coeffs;

    void resize_zero(const GaussianModel& m) {
        const std::size_t n = m.size();
        mu.assign(n, Vec3::Zero());
        rotation.assign(n, Vec4::Zero());
        log_scale.assign(n, Vec3::Zero());
        opacity_logit.assign(n, 0.0);
        color_coeffs.resize(n);
        for (std::size_t k = 0; k < n; ++k)
            color_coeffs[k].assign(m.primitives[k].color_coeffs.size(), Vec3::Zero());
    }
    void add(const ParamGrads& o) {
        for (std::size_t k = 0; k < mu.size(); ++k) {
            mu[k] += o.mu[k];
            rotation[k] += o.rotation[k];
            log_scale[k] += o.log_scale[k];
            opacity_logit[k] += o.opacity_logit[k];
            for (std::size_t c = 0; c < color_coeffs[k].size(); ++c)
                color_coeffs[k][c] += o.color_coeffs[k][c];
        }
    }
};

namespace detail {

// dR/dq entries for a unit quaternion (w,x,y,z); returns dL/dq_hat.
inline Vec4 rotation_grad_to_quat(const Mat3& g_r, const Vec4& q_unit) {
    const double w = q_unit[0], x = q_unit[1], y = q_unit[2], z = q_unit[3];
    Mat3 dw, dx, dy, dz;
    dw << 0, -z, y, z, 0, -x, -y, x, 0;
    dx << 0, y, z, y, -2 * x, -w, z, w, -2 * x;
    dy << -2 * y, x, w, x, 0, z, -w, z, -2 * y;
    dz << -2 * z, -w, x, w, -2 * z, y, x, y, 0;
    return 2.0 * Vec4(g_r.cwiseProduct(dw).sum(), g_r.cwiseProduct(dx).sum(),
                      g_r.cwiseProduct(dy).sum(), g_r.cwiseProduct(dz).sum());
}

struct PrimAccum {
    Vec2 g_mean2d = Vec2::Zero();
    Mat2 g_conic = Mat2::Zero();
    Vec3 g_color = Vec3::Zero();
    Vec3 g_ncam = Vec3::Zero();
    double g_dist = 0.0;
    double g_opacity = 0.0;  // w.r.t. activated opacity
    bool touched = false;
};

}  // namespace detail

// Exact reverse-mode gradients of the rendered buffers. Replays the per-pixel
// contributor lists in reverse blend order.
inline ParamGrads backward(const GaussianModel& m, const Camera& cam, const RenderBuffers& buf,
                           const BufferGrads& up, std::vector<Vec2>* g_mean2d = nullptr) {
    if (!buf.has_contributors)
        throw MissingContributorsError("render ran without keep_contributors");

    const std::size_t n = m.size();
    const std::size_t npix = buf.alpha.size();
    ParamGrads grads;
    grads.resize_zero(m);

    std::vector<detail::PrimAccum> acc(n);
    const bool has_rgb = !up.rgb.empty();
    const bool has_alpha = !up.alpha.empty();
    const bool has_normal = !up.normal.empty();
    const bool has_dist = !up.plane_distance.empty();

    std::vector<double> a_seq, t_seq;
    const int w = buf.width;
    for (std::size_t pix = 0; pix < npix; ++pix) {
        const std::uint32_t begin = buf.contrib_offset[pix];
        const std::uint32_t end = buf.contrib_offset[pix + 1];
        const Vec3 g_rgb = has_rgb ? up.rgb[pix] : Vec3::Zero();
        const double g_alpha = has_alpha ? up.alpha[pix] : 0.0;
        const Vec3 g_nout = has_normal ? up.normal[pix] : Vec3::Zero();
        const double g_pd = has_dist ? up.plane_distance[pix] : 0.0;
        if (g_rgb.isZero() && g_alpha == 0.0 && g_nout.isZero() && g_pd == 0.0) continue;
        if (begin == end && g_rgb.isZero()) continue;

        const double px = static_cast<double>(pix % w) + 0.5;
        const double py = static_cast<double>(pix / w) + 0.5;

        // Replay the forward blend to recover weights and raw sums.
        a_seq.clear();
        t_seq.clear();
        double transmittance = 1.0;
        Vec3 normal_raw = Vec3::Zero();
        for (std::uint32_t ci = begin; ci < end; ++ci) {
            const PrimView& pv = buf.prim_views[buf.contributors[ci]];
            const Vec2 d(px - pv.proj.mean2d.x(), py - pv.proj.mean2d.y());
            const double g = std::exp(-0.5 * d.dot(pv.conic * d));
            const double a = pv.opacity * g;
            t_seq.push_back(transmittance);
            a_seq.push_back(a);
            normal_raw += a * transmittance * pv.n_cam;
            transmittance *= (1.0 - a);
        }

        // Chain from the normalized normal to the raw blend sum.
        Vec3 g_nraw = Vec3::Zero();
        const double nn = normal_raw.norm();
        if (has_normal && nn > 1e-12) {
            const Vec3 nunit = normal_raw / nn;
            g_nraw = (g_nout - nunit * nunit.dot(g_nout)) / nn;
        }

        // Suffix starts with the background pseudo-contributor (weight = final
        // transmittance, payload only in rgb).
        double suffix = g_rgb.dot(buf.config.background) * transmittance;
        for (std::uint32_t ci = end; ci-- > begin;) {
            const std::size_t i = ci - begin;
            const std::uint32_t k = buf.contributors[ci];
            const PrimView& pv = buf.prim_views[k];
            const double a = a_seq[i];
            const double t = t_seq[i];
            const double wgt = a * t;

            const double value = g_rgb.dot(pv.color) + g_alpha + g_nraw.dot(pv.n_cam) +
                                 g_pd * pv.plane_dist;
            const double g_a = t * value - suffix / (1.0 - a);
            suffix += wgt * value;

            detail::PrimAccum& pa = acc[k];
            pa.touched = true;
            pa.g_color += wgt * g_rgb;
            pa.g_ncam += wgt * g_nraw;
            pa.g_dist += wgt * g_pd;
            pa.g_opacity += g_a * (a / pv.opacity);  // = g_a * G

            const double g_g = g_a * pv.opacity;
            const Vec2 d(px - pv.proj.mean2d.x(), py - pv.proj.mean2d.y());
            const double g = a / pv.opacity;
            const Vec2 cd = pv.conic * d;
            pa.g_mean2d += g_g * g * cd;
            pa.g_conic += (-0.5 * g_g * g) * (d * d.transpose());
        }
    }

    if (g_mean2d) {
        g_mean2d->assign(n, Vec2::Zero());
        for (std::size_t k = 0; k < n; ++k) (*g_mean2d)[k] = acc[k].g_mean2d;
    }

    // Per-primitive conversion from screen-space accumulators to parameters.
    const Mat3 w2c = cam.rotation_w2c;
    for (std::size_t k = 0; k < n; ++k) {
        const detail::PrimAccum& pa = acc[k];
        const PrimView& pv = buf.prim_views[k];
        if (pv.culled || !pa.touched) continue;
        const GaussianPrimitive& p = m.primitives[k];

        Vec3 g_mu = Vec3::Zero();
        Vec3 g_t = Vec3::Zero();
        Mat3 g_r = Mat3::Zero();

        // conic -> cov2d
        const Mat2 g_cov2d = -pv.conic * pa.g_conic * pv.conic;
        const Mat2 g_v = 0.5 * (g_cov2d + g_cov2d.transpose());

        const Vec3 t = pv.mu_cam;
        const auto j = projection_jacobian(cam, t);
        const Mat3 u = camera_cov(p, cam);
        const Mat3 g_u = j.transpose() * g_v * j;
        const Eigen::Matrix<double, 2, 3> g_j = 2.0 * g_v * j * u;
        const Mat3 g_sigma = w2c.transpose() * g_u * w2c;

        // mean2d and Jacobian dependence on the camera-space position.
        const double iz = 1.0 / t.z();
        const double iz2 = iz * iz;
        g_t.x() += pa.g_mean2d.x() * cam.fx * iz;
        g_t.y() += pa.g_mean2d.y() * cam.fy * iz;
        g_t.z() += -pa.g_mean2d.x() * cam.fx * t.x() * iz2 -
                   pa.g_mean2d.y() * cam.fy * t.y() * iz2;
        g_t.x() += g_j(0, 2) * (-cam.fx * iz2);
        g_t.y() += g_j(1, 2) * (-cam.fy * iz2);
        g_t.z() += g_j(0, 0) * (-cam.fx * iz2) + g_j(0, 2) * (2 * cam.fx * t.x() * iz2 * iz) +
                   g_j(1, 1) * (-cam.fy * iz2) + g_j(1, 2) * (2 * cam.fy * t.y() * iz2 * iz);

        // plane distance = n_cam . t
        g_t += pa.g_dist * pv.n_cam;
        const Vec3 g_ncam_total = pa.g_ncam + pa.g_dist * t;
        g_r.col(pv.min_axis) += pv.n_sign * (w2c.transpose() * g_ncam_total);

        // covariance = R diag(s^2) R^T
        const Vec3 s = p.scales();
        const Mat3 rot = p.rotation_matrix();
        const Mat3 g_sigma_sym = 0.5 * (g_sigma + g_sigma.transpose());
        g_r += 2.0 * g_sigma_sym * rot * Vec3(s.array().square()).asDiagonal().toDenseMatrix();
        const Mat3 rtgr = rot.transpose() * g_sigma_sym * rot;
        for (int i = 0; i < 3; ++i)
            grads.log_scale[k][i] += 2.0 * s[i] * s[i] * rtgr(i, i);

        // view-dependent color
        const Vec3 g_dir =
            sh_color_backward(p, pv.view_dir, pv.color, pa.g_color, grads.color_coeffs[k]);
        if (pv.view_dist > 1e-12)
            g_mu += (g_dir - pv.view_dir * pv.view_dir.dot(g_dir)) / pv.view_dist;

        g_mu += w2c.transpose() * g_t;
        grads.mu[k] += g_mu;

        const Vec4 q_unit = p.rotation / p.rotation.norm();
        const Vec4 g_q_unit = detail::rotation_grad_to_quat(g_r, q_unit);
        grads.rotation[k] += (g_q_unit - q_unit * q_unit.dot(g_q_unit)) / p.rotation.norm();

        const double o = pv.opacity;
        grads.opacity_logit[k] += pa.g_opacity * o * (1.0 - o);
    }
    return grads;
}

}  // namespace csgs
