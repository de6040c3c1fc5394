#include "csgs/losses/losses.hpp"

#include "helpers.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <random>

using namespace csgs;
using csgs::testing::identity_camera;
using csgs::testing::look_at_camera;
using csgs::testing::plane_buffers;
using csgs::testing::random_model;

namespace {

ImageRGB random_image(std::mt19937& rng, int w, int h, double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    ImageRGB img(w, h);
    for (auto& p : img.px) p = Vec3(u(rng), u(rng), u(rng));
    return img;
}

// Independent SSIM oracle using the uncentered moment formulation.
double ssim_oracle(const ImageRGB& a, const ImageRGB& b) {
    const SsimConfig cfg;
    int win = std::min({cfg.window, a.width, a.height});
    if (win % 2 == 0) --win;
    const int half = win / 2;
    const auto w = detail::gaussian_window(win, cfg.sigma);
    double total = 0;
    int windows = 0;
    for (int cy = half; cy < a.height - half; ++cy)
        for (int cx = half; cx < a.width - half; ++cx) {
            ++windows;
            for (int ch = 0; ch < 3; ++ch) {
                double mx = 0, my = 0, exx = 0, eyy = 0, exy = 0;
                for (int dy = -half; dy <= half; ++dy)
                    for (int dx = -half; dx <= half; ++dx) {
                        const double wgt = w[(dy + half) * win + (dx + half)];
                        const double x = a.at(cy + dy, cx + dx)[ch];
                        const double y = b.at(cy + dy, cx + dx)[ch];
                        mx += wgt * x;
                        my += wgt * y;
                        exx += wgt * x * x;
                        eyy += wgt * y * y;
                        exy += wgt * x * y;
                    }
                const double vx = exx - mx * mx, vy = eyy - my * my, cv = exy - mx * my;
                total += ((2 * mx * my + cfg.c1) * (2 * cv + cfg.c2)) /
                         ((mx * mx + my * my + cfg.c1) * (vx + vy + cfg.c2));
            }
        }
    return total / (3.0 * windows);
}

// Central-difference check of BufferGrads against a scalar loss of buffers.
template <typename F>
void check_buffer_grads(std::vector<RenderBuffers*> bufs, std::vector<const BufferGrads*> grads,
                        F loss, double h = 1e-6, double rel_tol = 2e-4, double abs_tol = 1e-6,
                        bool check_rgb = false) {
    REQUIRE(bufs.size() == grads.size());
    int checked = 0;
    for (std::size_t b = 0; b < bufs.size(); ++b) {
        auto& buf = *bufs[b];
        const auto& g = *grads[b];
        if (g.plane_distance.empty()) continue;
        auto probe = [&](double& slot, double analytic) {
            const double orig = slot;
            slot = orig + h;
            const double up = loss();
            slot = orig - h;
            const double dn = loss();
            slot = orig;
            const double fd = (up - dn) / (2 * h);
            double err = std::abs(fd - analytic);
            const double scale = std::max({std::abs(fd), std::abs(analytic), 1.0});
            const double tol = std::max(abs_tol, rel_tol * scale);
            if (err > tol) {
                // L1-style kinks: the analytic value is a one-sided slope.
                const double mid = loss();
                err = std::min({err, std::abs((up - mid) / h - analytic),
                                std::abs((mid - dn) / h - analytic)});
            }
            INFO("fd=" << fd << " analytic=" << analytic);
            CHECK(err <= tol);
            ++checked;
        };
        for (std::size_t pix = 0; pix < buf.alpha.size(); pix += 7) {
            probe(buf.plane_distance[pix], g.plane_distance[pix]);
            for (int c = 0; c < 3; ++c) probe(buf.normal[pix][c], g.normal[pix][c]);
            if (check_rgb && !g.rgb.empty())
                for (int c = 0; c < 3; ++c) probe(buf.rgb[pix][c], g.rgb[pix][c]);
        }
    }
    REQUIRE(checked > 0);
}

// A rendered tilted-plane scene: thin disks on z = z0 + gx*x + gy*y.
GaussianModel disk_plane(std::mt19937& rng, int count, double z0, double gx, double gy) {
    const Vec3 plane_n = Vec3(-gx, -gy, 1).normalized();
    GaussianModel m;
    std::uniform_real_distribution<double> u(-1.5, 1.5);
    for (int i = 0; i < count; ++i) {
        const double x = u(rng), y = u(rng);
        GaussianPrimitive p;
        p.mu = Vec3(x, y, z0 + gx * x + gy * y);
        p.log_scale = Vec3(std::log(0.3), std::log(0.3), std::log(1e-5));
        p.opacity_logit = logit(0.995);
        p.color_coeffs = {Vec3(0.2 * x, 0.2 * y, 0.1)};
        const Vec3 axis = Vec3(0, 0, 1).cross(plane_n);
        if (axis.norm() > 1e-12) {
            const double angle = std::asin(axis.norm());
            const Vec3 a = axis.normalized();
            p.rotation = Vec4(std::cos(angle / 2), a.x() * std::sin(angle / 2),
                              a.y() * std::sin(angle / 2), a.z() * std::sin(angle / 2));
        }
        m.primitives.push_back(p);
    }
    m.recompute_extent();
    return m;
}

// Nudge rendered buffers off the planar fixed point of the geometric losses,
// where the L1 terms kink and finite differences are undefined.
void jitter_buffers(std::mt19937& rng, RenderBuffers& buf, double eps = 0.01) {
    std::uniform_real_distribution<double> u(-eps, eps);
    for (std::size_t i = 0; i < buf.alpha.size(); ++i) {
        buf.plane_distance[i] += u(rng);
        for (int c = 0; c < 3; ++c) {
            buf.normal[i][c] += u(rng);
            buf.rgb[i][c] += u(rng);
        }
    }
}

Vec2 apply_h(const Mat3& h, const Vec2& p) {
    const Vec3 q = h * Vec3(p.x(), p.y(), 1.0);
    return Vec2(q.x() / q.z(), q.y() / q.z());
}

}  // namespace

TEST_CASE("l1_ssim is exactly zero on identical images") {
    std::mt19937 rng(7);
    auto img = random_image(rng, 16, 16);
    CHECK(l1_ssim(img, img, 0.2) == 0.0);
    CHECK(ssim(img, img) == 1.0);
}

TEST_CASE("l1_ssim with lambda 0 reduces to mean L1") {
    std::mt19937 rng(11);
    auto img = random_image(rng, 12, 12, 0.2, 0.6);
    auto gt = img;
    for (auto& p : gt.px) p += Vec3::Constant(0.1);
    CHECK(l1_ssim(img, gt, 0.0) == Catch::Approx(0.1).margin(1e-12));
}

TEST_CASE("ssim matches the uncentered brute-force oracle") {
    std::mt19937 rng(13);
    auto a = random_image(rng, 16, 16);
    auto b = random_image(rng, 16, 16);
    CHECK(ssim(a, b) == Catch::Approx(ssim_oracle(a, b)).margin(1e-9));
    // Small images shrink the window rather than failing.
    auto sa = random_image(rng, 5, 5), sb = random_image(rng, 5, 5);
    CHECK(std::isfinite(ssim(sa, sb)));
    CHECK(ssim(sa, sb) == Catch::Approx(ssim_oracle(sa, sb)).margin(1e-9));
}

TEST_CASE("l1_ssim rejects shape mismatch and bounds ssim") {
    ImageRGB a(4, 4), b(5, 4);
    CHECK_THROWS_AS(l1_ssim(a, b, 0.2), std::invalid_argument);
    std::mt19937 rng(17);
    for (int i = 0; i < 5; ++i) {
        auto x = random_image(rng, 13, 13);
        auto y = random_image(rng, 13, 13);
        const double s = ssim(x, y);
        CHECK(s <= 1.0);
        CHECK(s >= -1.0);
        CHECK(l1_ssim(x, y, 0.2) >= 0.0);
    }
}

TEST_CASE("l1_ssim gradient matches finite differences") {
    std::mt19937 rng(19);
    auto img = random_image(rng, 9, 9, 0.1, 0.9);
    auto gt = random_image(rng, 9, 9, 0.1, 0.9);
    std::vector<Vec3> g;
    l1_ssim(img, gt, 0.2, &g);
    const double h = 1e-6;
    for (std::size_t i = 0; i < img.px.size(); i += 5) {
        for (int c = 0; c < 3; ++c) {
            const double orig = img.px[i][c];
            img.px[i][c] = orig + h;
            const double up = l1_ssim(img, gt, 0.2);
            img.px[i][c] = orig - h;
            const double dn = l1_ssim(img, gt, 0.2);
            img.px[i][c] = orig;
            const double fd = (up - dn) / (2 * h);
            CHECK(fd == Catch::Approx(g[i][c]).margin(1e-6).epsilon(1e-4));
        }
    }
}

TEST_CASE("scale_loss selects the minimum activated scale") {
    GaussianPrimitive p;
    p.log_scale = Vec3(std::log(1.0), std::log(2.0), std::log(3.0));
    p.color_coeffs = {Vec3::Zero()};
    GaussianModel m;
    m.primitives = {p};
    CHECK(scale_loss(m) == Catch::Approx(1.0).epsilon(1e-12));

    // Floor case: minimum pinned at the scale floor.
    m.primitives[0].log_scale = Vec3(std::log(kScaleFloor), 0.0, 0.0);
    CHECK(scale_loss(m) == Catch::Approx(kScaleFloor).epsilon(1e-12));

    GaussianModel empty;
    CHECK_THROWS_AS(scale_loss(empty), EmptyModelError);
}

TEST_CASE("scale_loss matches the brute-force mean and its gradient checks out") {
    std::mt19937 rng(23);
    auto m = random_model(rng, 30);
    double expect = 0;
    for (const auto& p : m.primitives) expect += p.scales().minCoeff() / m.size();
    std::vector<Vec3> g;
    CHECK(scale_loss(m, &g) == Catch::Approx(expect).epsilon(1e-12));

    const double h = 1e-7;
    for (std::size_t k = 0; k < m.size(); k += 3) {
        for (int c = 0; c < 3; ++c) {
            const double orig = m.primitives[k].log_scale[c];
            m.primitives[k].log_scale[c] = orig + h;
            const double up = scale_loss(m);
            m.primitives[k].log_scale[c] = orig - h;
            const double dn = scale_loss(m);
            m.primitives[k].log_scale[c] = orig;
            CHECK((up - dn) / (2 * h) == Catch::Approx(g[k][c]).margin(1e-8));
        }
    }
}

TEST_CASE("depth_to_normal on a fronto-parallel plane gives the view axis") {
    auto cam = identity_camera(16, 16.0);
    DepthMap d;
    d.width = d.height = 16;
    d.depth.assign(256, 0.0);
    d.valid.assign(256, 1);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) d.depth[d.idx(y, x)] = 2.0 / cam.pixel_ray(x, y).z();
    auto n = depth_to_normal(d, cam);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
            const std::size_t pix = d.idx(y, x);
            if (x == 0 || y == 0 || x == 15 || y == 15) {
                CHECK(n.valid[pix] == 0);  // border: neighborhood undefined
            } else {
                REQUIRE(n.valid[pix] == 1);
                CHECK((n.normal[pix] - Vec3(0, 0, -1)).norm() < 1e-9);
            }
        }
}

TEST_CASE("depth_to_normal recovers an analytic tilted plane normal") {
    auto cam = identity_camera(24, 32.0);
    const Vec3 n0(-0.3, -0.1, 1.0);  // plane z = 2 + 0.3x + 0.1y: n0 . X = 2
    DepthMap d;
    d.width = d.height = 24;
    d.depth.assign(576, 0.0);
    d.valid.assign(576, 1);
    for (int y = 0; y < 24; ++y)
        for (int x = 0; x < 24; ++x) d.depth[d.idx(y, x)] = 2.0 / n0.dot(cam.pixel_ray(x, y));
    auto n = depth_to_normal(d, cam);
    const Vec3 expect = -n0.normalized();  // oriented toward the camera
    for (int y = 1; y < 23; ++y)
        for (int x = 1; x < 23; ++x) {
            REQUIRE(n.valid[d.idx(y, x)] == 1);
            CHECK((n.normal[d.idx(y, x)] - expect).norm() < 1e-3);
        }
}

TEST_CASE("depth_to_normal propagates invalid neighbors") {
    auto cam = identity_camera(8, 8.0);
    DepthMap d;
    d.width = d.height = 8;
    d.depth.assign(64, 2.0);
    d.valid.assign(64, 1);
    d.valid[d.idx(4, 4)] = 0;
    auto n = depth_to_normal(d, cam);
    CHECK(n.valid[d.idx(4, 4)] == 0);
    CHECK(n.valid[d.idx(4, 3)] == 0);
    CHECK(n.valid[d.idx(3, 4)] == 0);
    CHECK(n.valid[d.idx(2, 2)] == 1);
}

TEST_CASE("svg_combine is exactly zero at agreement and under orthogonality") {
    std::mt19937 rng(29);
    NormalMap ns;
    ns.width = ns.height = 8;
    ns.normal.assign(64, Vec3::Zero());
    ns.valid.assign(64, 0);
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<Vec3> n(64, Vec3::Zero());
    for (std::size_t i = 0; i < 64; ++i) {
        if (i % 3 == 0) continue;
        ns.valid[i] = 1;
        ns.normal[i] = Vec3(g(rng), g(rng), g(rng)).normalized();
        n[i] = ns.normal[i];
    }
    CHECK(svg_combine(ns, n) == 0.0);

    // Orthogonal pair gates the contribution to exactly zero.
    for (std::size_t i = 0; i < 64; ++i) {
        ns.normal[i] = Vec3(1, 0, 0);
        n[i] = Vec3(0, 0, -1);
    }
    CHECK(svg_combine(ns, n) == 0.0);
}

TEST_CASE("svg_loss matches the per-pixel stencil oracle on a rendered scene") {
    std::mt19937 rng(31);
    auto m = disk_plane(rng, 80, 2.0, 0.25, -0.1);
    auto cam = look_at_camera(Vec3(0, 0, 0), Vec3(0, 0, 1), 24, 24, 24);
    auto buf = render(m, cam);

    const double loss = svg_loss(buf, cam);
    const auto depth = unbiased_depth(buf, cam);
    const auto ns = depth_to_normal(depth, cam);
    const double oracle = svg_combine(ns, buf.normal);
    CHECK(loss == Catch::Approx(oracle).margin(1e-9));
    CHECK(loss >= 0.0);
}

TEST_CASE("svg_loss gradient matches finite differences") {
    std::mt19937 rng(37);
    auto m = disk_plane(rng, 40, 2.0, 0.2, 0.1);
    auto cam = look_at_camera(Vec3(0, 0, 0), Vec3(0, 0, 1), 12, 12, 12);
    auto buf = render(m, cam);
    jitter_buffers(rng, buf);
    BufferGrads g;
    svg_loss(buf, cam, &g);
    check_buffer_grads({&buf}, {&g}, [&] { return svg_loss(buf, cam); });
}

TEST_CASE("plane_homography is the identity for coincident cameras") {
    auto cam = identity_camera(16, 16.0);
    PlaneHypothesis hyp{Vec3(0.1, -0.2, -1.0).normalized(), 2.0};
    const Mat3 h = plane_homography(hyp, cam, cam);
    CHECK((h - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("plane_homography throws on a degenerate plane") {
    auto cam = identity_camera(16, 16.0);
    CHECK_THROWS_AS(plane_homography({Vec3(0, 0, -1), 1e-12}, cam, cam), DegeneratePlaneError);
}

TEST_CASE("plane_homography matches the ray-plane-project oracle and round trips") {
    auto cam_r = identity_camera(32, 32.0, "r");
    auto cam_n = look_at_camera(Vec3(0.4, -0.2, 0.1), Vec3(0.1, 0, 2.0), 32, 32, 32.0, "n");

    // Plane in the reference camera frame (== world frame here).
    const Vec3 n_h = Vec3(0.2, -0.1, -1.0).normalized();
    const double dist = 2.0;
    const Mat3 h_rn = plane_homography({n_h, dist}, cam_r, cam_n);

    // Same plane expressed in the neighbor frame for the reverse map.
    const Mat3 r_rn = cam_n.rotation_w2c * cam_r.rotation_w2c.transpose();
    const Vec3 t_rn = cam_n.translation_w2c - r_rn * cam_r.translation_w2c;
    const Vec3 n_nbr = r_rn * n_h;
    const double dist_nbr = dist - n_nbr.dot(t_rn);
    const Mat3 h_nr = plane_homography({n_nbr, dist_nbr}, cam_n, cam_r);

    int checked = 0;
    for (int y = 2; y < 30; y += 3) {
        for (int x = 2; x < 30; x += 3) {
            const Vec2 p(x + 0.5, y + 0.5);
            const Vec3 ray = cam_r.pixel_ray(x, y);
            const double denom = n_h.dot(ray);
            if (denom >= -1e-6) continue;
            const double t = -dist / denom;
            const Vec3 x_ref = t * ray;  // on the plane, ref/world frame
            const Vec3 x_nbr = cam_n.rotation_w2c * x_ref + cam_n.translation_w2c;
            REQUIRE(x_nbr.z() > 0);
            const Vec2 oracle(cam_n.fx * x_nbr.x() / x_nbr.z() + cam_n.cx,
                              cam_n.fy * x_nbr.y() / x_nbr.z() + cam_n.cy);
            const Vec2 warped = apply_h(h_rn, p);
            CHECK((warped - oracle).norm() < 1e-6);
            const Vec2 back = apply_h(h_nr, warped);
            CHECK((back - p).norm() < 1e-6);
            ++checked;
        }
    }
    REQUIRE(checked > 50);
}

TEST_CASE("mv_geo_loss is exactly zero for coincident exact views") {
    auto cam = identity_camera(16, 16.0);
    auto ref = plane_buffers(cam, Vec3(0.2, -0.1, 1.0).normalized(), 2.0);
    auto nbr = ref;
    auto res = mv_geo_loss(ref, cam, nbr, cam, 1.0);
    CHECK(res.loss == 0.0);
    CHECK(res.valid_count > 100);
}

TEST_CASE("mv_geo_loss vanishes on a perfect two-view plane and excludes outliers") {
    auto cam_r = identity_camera(24, 24.0, "r");
    auto cam_n = look_at_camera(Vec3(0.3, 0.1, -0.2), Vec3(0, 0, 2.0), 24, 24, 24.0, "n");
    const Vec3 n_w = Vec3(0.15, -0.1, 1.0).normalized();
    auto ref = plane_buffers(cam_r, n_w, 2.0);
    auto nbr = plane_buffers(cam_n, n_w, 2.0);

    auto res = mv_geo_loss(ref, cam_r, nbr, cam_n, 1.0);
    REQUIRE(res.valid_count > 100);
    CHECK(res.loss < 1e-9);

    // Corrupt one pixel's plane distance: its forward-backward error blows
    // past theta and the pixel leaves the valid set.
    auto corrupted = ref;
    const std::size_t pix = corrupted.idx(12, 12);
    REQUIRE(res.valid[pix] == 1);
    corrupted.plane_distance[pix] *= 1.5;
    auto res2 = mv_geo_loss(corrupted, cam_r, nbr, cam_n, 1.0);
    CHECK(res2.valid[pix] == 0);
    CHECK(res2.valid_count == res.valid_count - 1);
}

TEST_CASE("mv_geo_loss matches a brute-force homography oracle on perturbed planes") {
    auto cam_r = identity_camera(20, 20.0, "r");
    auto cam_n = look_at_camera(Vec3(0.25, -0.15, 0.0), Vec3(0, 0, 2.0), 20, 20, 20.0, "n");
    const Vec3 n_w = Vec3(0.1, 0.05, 1.0).normalized();
    auto ref = plane_buffers(cam_r, n_w, 2.0);
    auto nbr = plane_buffers(cam_n, n_w, 2.0);
    std::mt19937 rng(41);
    std::uniform_real_distribution<double> u(-0.01, 0.01);
    for (auto& pd : ref.plane_distance) pd += u(rng);
    for (auto& pd : nbr.plane_distance) pd += u(rng);
    for (auto& n : nbr.normal) n = (n + 0.02 * Vec3(u(rng), u(rng), u(rng))).normalized();

    const double theta = 1.0;
    auto res = mv_geo_loss(ref, cam_r, nbr, cam_n, theta);
    REQUIRE(res.valid_count > 50);

    // Independent re-implementation via explicit homography matrices.
    const auto nbr_depth = unbiased_depth(nbr, cam_n);
    double acc = 0;
    int count = 0;
    for (int y = 0; y < 20; ++y)
        for (int x = 0; x < 20; ++x) {
            const std::size_t pix = ref.idx(y, x);
            const Vec2 p(x + 0.5, y + 0.5);
            const PlaneHypothesis hyp_r{ref.normal[pix], -ref.plane_distance[pix]};
            const Vec2 warped = apply_h(plane_homography(hyp_r, cam_r, cam_n), p);
            const double gx = warped.x() - 0.5, gy = warped.y() - 0.5;
            const int x0 = static_cast<int>(std::floor(gx));
            const int y0 = static_cast<int>(std::floor(gy));
            if (x0 < 0 || y0 < 0 || x0 + 1 >= 20 || y0 + 1 >= 20) continue;
            bool ok = true;
            for (int c = 0; c < 4; ++c)
                ok = ok && nbr_depth.valid[nbr.idx(y0 + c / 2, x0 + c % 2)];
            if (!ok) continue;
            const double wx = gx - x0, wy = gy - y0;
            double pd = 0;
            Vec3 nn = Vec3::Zero();
            const double cw[4] = {(1 - wx) * (1 - wy), wx * (1 - wy), (1 - wx) * wy, wx * wy};
            for (int c = 0; c < 4; ++c) {
                const std::size_t cp = nbr.idx(y0 + c / 2, x0 + c % 2);
                pd += cw[c] * nbr.plane_distance[cp];
                nn += cw[c] * nbr.normal[cp];
            }
            const double nl = nn.norm();
            const PlaneHypothesis hyp_n{nn / nl, -pd / nl};
            const Vec2 back = apply_h(plane_homography(hyp_n, cam_n, cam_r), warped);
            const double err = (back - p).norm();
            if (err > theta) continue;
            acc += err;
            ++count;
        }
    REQUIRE(count == res.valid_count);
    CHECK(res.loss == Catch::Approx(acc / count).margin(1e-9));
}

TEST_CASE("mv_geo_loss gradients match finite differences") {
    auto cam_r = identity_camera(12, 12.0, "r");
    auto cam_n = look_at_camera(Vec3(0.2, 0.1, -0.1), Vec3(0, 0, 2.0), 12, 12, 12.0, "n");
    const Vec3 n_w = Vec3(0.1, -0.05, 1.0).normalized();
    auto ref = plane_buffers(cam_r, n_w, 2.0);
    auto nbr = plane_buffers(cam_n, n_w, 2.0);
    std::mt19937 rng(43);
    std::uniform_real_distribution<double> u(-0.005, 0.005);
    for (auto& pd : ref.plane_distance) pd += u(rng);
    for (auto& pd : nbr.plane_distance) pd += u(rng);

    BufferGrads g_ref, g_nbr;
    auto res = mv_geo_loss(ref, cam_r, nbr, cam_n, 5.0, &g_ref, &g_nbr);
    REQUIRE(res.valid_count > 20);
    auto loss = [&] { return mv_geo_loss(ref, cam_r, nbr, cam_n, 5.0).loss; };
    check_buffer_grads({&ref, &nbr}, {&g_ref, &g_nbr}, loss);
}

TEST_CASE("ncc matches the direct formula, is bounded, and is affine invariant") {
    std::mt19937 rng(47);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> a(49), b(49);
        for (auto& v : a) v = u(rng);
        for (auto& v : b) v = u(rng);
        double ma = 0, mb = 0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            ma += a[i] / a.size();
            mb += b[i] / b.size();
        }
        double va = 0, vb = 0, cov = 0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            va += (a[i] - ma) * (a[i] - ma) / a.size();
            vb += (b[i] - mb) * (b[i] - mb) / b.size();
            cov += (a[i] - ma) * (b[i] - mb) / a.size();
        }
        const double expect = cov / std::sqrt(std::max(va, 1e-8) * std::max(vb, 1e-8));
        const double r = ncc(a, b);
        CHECK(r == Catch::Approx(expect).margin(1e-9));
        CHECK(r <= 1.0);
        CHECK(r >= -1.0);

        // Positive affine transform of either argument leaves NCC unchanged.
        std::vector<double> b2(b.size());
        for (std::size_t i = 0; i < b.size(); ++i) b2[i] = 2.0 * b[i] + 5.0;
        CHECK(ncc(a, b2) == Catch::Approx(r).margin(1e-9));
        std::vector<double> a2(a.size());
        for (std::size_t i = 0; i < a.size(); ++i) a2[i] = 2.0 * a[i] + 5.0;
        CHECK(ncc(a2, b2) == Catch::Approx(r).margin(1e-9));
    }
    // Self-correlation is exactly 1.
    std::vector<double> a(25);
    for (auto& v : a) v = u(rng);
    CHECK(ncc(a, a) == 1.0);
}

TEST_CASE("mv_rgb_loss is exactly zero for identical views with an identity warp") {
    auto cam = identity_camera(16, 16.0);
    std::mt19937 rng(53);
    auto img = random_image(rng, 16, 16);
    auto buf = plane_buffers(cam, Vec3(0, 0, 1), 2.0);
    std::vector<std::uint8_t> valid(buf.alpha.size(), 1);
    CHECK(mv_rgb_loss(img, buf, cam, img, cam, 7, valid) == 0.0);
}

TEST_CASE("mv_rgb_loss is zero under a per-patch positive affine intensity change") {
    auto cam = identity_camera(16, 16.0);
    std::mt19937 rng(59);
    auto img = random_image(rng, 16, 16);
    auto img2 = img;
    for (auto& p : img2.px) p = 2.0 * p + Vec3::Constant(5.0);
    auto buf = plane_buffers(cam, Vec3(0, 0, 1), 2.0);
    std::vector<std::uint8_t> valid(buf.alpha.size(), 1);
    CHECK(mv_rgb_loss(img, buf, cam, img2, cam, 7, valid) < 1e-9);
}

TEST_CASE("mv_rgb_loss requires an odd patch and respects the valid set") {
    auto cam = identity_camera(16, 16.0);
    std::mt19937 rng(61);
    auto img = random_image(rng, 16, 16);
    auto buf = plane_buffers(cam, Vec3(0, 0, 1), 2.0);
    std::vector<std::uint8_t> valid(buf.alpha.size(), 1);
    CHECK_THROWS_AS(mv_rgb_loss(img, buf, cam, img, cam, 6, valid), std::invalid_argument);
    std::vector<std::uint8_t> none(buf.alpha.size(), 0);
    CHECK(mv_rgb_loss(img, buf, cam, img, cam, 7, none) == 0.0);
}

TEST_CASE("mv_rgb_loss gradients match finite differences") {
    auto cam_r = identity_camera(14, 14.0, "r");
    auto cam_n = look_at_camera(Vec3(0.2, -0.1, 0.0), Vec3(0, 0, 2.0), 14, 14, 14.0, "n");
    const Vec3 n_w = Vec3(0.1, 0.05, 1.0).normalized();
    auto ref = plane_buffers(cam_r, n_w, 2.0);
    std::mt19937 rng(67);
    auto ref_img = random_image(rng, 14, 14);
    auto nbr_img = random_image(rng, 14, 14);
    std::vector<std::uint8_t> valid(ref.alpha.size(), 1);

    BufferGrads g;
    mv_rgb_loss(ref_img, ref, cam_r, nbr_img, cam_n, 5, valid, &g);
    auto loss = [&] { return mv_rgb_loss(ref_img, ref, cam_r, nbr_img, cam_n, 5, valid); };
    check_buffer_grads({&ref}, {&g}, loss, 1e-6, 5e-4, 1e-6);
}

TEST_CASE("schedule_weight reproduces the closed form") {
    LossWeights w;
    CHECK(schedule_weight(w.beta2, w.tau, w.tau, w.max_iters) == 0.0);
    CHECK(schedule_weight(0.01, 30000, 7000, 30000) ==
          Catch::Approx(0.01 * 23000.0 / 30000.0).margin(1e-15));
    CHECK(schedule_weight(0.01, 30000, 7000, 30000) == Catch::Approx(0.0076667).margin(1e-7));
    CHECK(schedule_weight(0.0, 1234, 700, 3000) == 0.0);

    // Monotone non-decreasing and continuous at tau.
    double prev = -1;
    for (int t = 0; t <= 3000; t += 10) {
        const double v = schedule_weight(0.05, t, 700, 3000);
        CHECK(v >= prev);
        prev = v;
    }
    CHECK(schedule_weight(0.05, 701, 700, 3000) < 1e-4);
}

TEST_CASE("patch size interpolates from 11 to 7 and stays odd") {
    LossWeights w;
    CHECK(patch_size_at(0, w) == 11);
    CHECK(patch_size_at(w.tau, w) == 11);
    CHECK(patch_size_at(w.max_iters, w) == 7);
    int prev = 11;
    for (int t = w.tau + 1; t <= w.max_iters; t += 50) {
        const int p = patch_size_at(t, w);
        CHECK(p % 2 == 1);
        CHECK(p <= prev);
        prev = p;
    }
}

TEST_CASE("device_loss reduces to image + scale terms in stage 1") {
    std::mt19937 rng(71);
    auto m = disk_plane(rng, 30, 2.0, 0.1, 0.0);
    auto cam = look_at_camera(Vec3(0, 0, 0), Vec3(0, 0, 1), 16, 16, 16);
    auto buf = render(m, cam);
    auto gt = random_image(rng, 16, 16);
    LossWeights w;

    ViewData ref{&buf, &cam, &gt};
    auto res = device_loss(m, ref, std::nullopt, w.tau, w);
    ImageRGB rendered(16, 16);
    rendered.px = buf.rgb;
    const double expect = l1_ssim(rendered, gt, w.lambda) + w.lambda1 * scale_loss(m);
    CHECK(res.total == Catch::Approx(expect).margin(1e-12));
    CHECK(res.w_svg == 0.0);
    CHECK(res.l_mvgeo == 0.0);
    CHECK(res.l_mvrgb == 0.0);
}

TEST_CASE("device_loss equals the manual weighted component sum after stage 1") {
    std::mt19937 rng(73);
    auto m = disk_plane(rng, 60, 2.0, 0.15, -0.05);
    auto cam_r = look_at_camera(Vec3(0, 0, 0), Vec3(0, 0, 1), 16, 16, 16, "r");
    auto cam_n = look_at_camera(Vec3(0.2, 0.1, 0), Vec3(0, 0, 2), 16, 16, 16, "n");
    auto buf_r = render(m, cam_r);
    auto buf_n = render(m, cam_n);
    ImageRGB gt_r(16, 16), gt_n(16, 16);
    gt_r.px = buf_r.rgb;
    gt_n.px = buf_n.rgb;
    for (auto& p : gt_r.px) p += Vec3::Constant(0.01);

    LossWeights w;
    const int t = 2000;
    ViewData ref{&buf_r, &cam_r, &gt_r};
    ViewData nbr{&buf_n, &cam_n, &gt_n};
    auto res = device_loss(m, ref, nbr, t, w);

    ImageRGB rendered(16, 16);
    rendered.px = buf_r.rgb;
    auto geo = mv_geo_loss(buf_r, cam_r, buf_n, cam_n, w.theta);
    const double manual =
        l1_ssim(rendered, gt_r, w.lambda) + w.lambda1 * scale_loss(m) +
        schedule_weight(w.beta2, t, w.tau, w.max_iters) * svg_loss(buf_r, cam_r) +
        schedule_weight(w.beta3_geo, t, w.tau, w.max_iters) * geo.loss +
        schedule_weight(w.beta3_rgb, t, w.tau, w.max_iters) *
            mv_rgb_loss(gt_r, buf_r, cam_r, gt_n, cam_n, patch_size_at(t, w), geo.valid);
    CHECK(res.total == Catch::Approx(manual).margin(1e-12));
    CHECK(res.l_mvgeo == Catch::Approx(geo.loss).margin(1e-15));
}

TEST_CASE("device_loss is near zero at the flat-scene global optimum") {
    std::mt19937 rng(79);
    auto m = disk_plane(rng, 30, 2.0, 0.0, 0.0);
    for (auto& p : m.primitives) p.log_scale.z() = std::log(kScaleFloor);
    auto cam = look_at_camera(Vec3(0, 0, 0), Vec3(0, 0, 1), 16, 16, 16);
    auto buf = render(m, cam);
    ImageRGB gt(16, 16);
    gt.px = buf.rgb;  // perfect render
    LossWeights w;
    ViewData ref{&buf, &cam, &gt};
    auto res = device_loss(m, ref, std::nullopt, 100, w);
    CHECK(res.total < 1e-4);
}

TEST_CASE("distill_losses has an exact self-distillation fixed point") {
    std::mt19937 rng(83);
    auto m = disk_plane(rng, 50, 2.0, 0.1, 0.05);
    auto cam = look_at_camera(Vec3(0, 0, 0), Vec3(0, 0, 1), 16, 16, 16);
    auto student = render(m, cam);
    auto teacher = render(m, cam);
    LossWeights w;
    auto res = distill_losses(m, student, cam, teacher, cam, w);
    CHECK(res.l_3dgs == 0.0);
    CHECK(res.l_depth == 0.0);
    CHECK(res.l_normal == 0.0);
}

TEST_CASE("distill_losses depth term equals a constant offset") {
    auto cam = identity_camera(16, 16.0);
    const double delta = 0.25;
    RenderBuffers student = plane_buffers(cam, Vec3(0, 0, 1), 2.0);
    RenderBuffers teacher = plane_buffers(cam, Vec3(0, 0, 1), 2.0);
    // Per-pixel plane distances chosen so depths differ by exactly delta
    // along every ray.
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
            const double rz = cam.pixel_ray(x, y).z();
            student.plane_distance[student.idx(y, x)] = -2.0 * rz;
            teacher.plane_distance[teacher.idx(y, x)] = -(2.0 + delta) * rz;
        }
    GaussianModel m;
    GaussianPrimitive p;
    p.color_coeffs = {Vec3::Zero()};
    m.primitives = {p};
    LossWeights w;
    auto res = distill_losses(m, student, cam, teacher, cam, w);
    CHECK(res.l_depth == Catch::Approx(delta).margin(1e-9));
    CHECK(res.l_normal == Catch::Approx(0.0).margin(1e-15));
}

TEST_CASE("distill_losses matches brute-force per-pixel means on a random pair") {
    std::mt19937 rng(89);
    auto m1 = disk_plane(rng, 40, 2.0, 0.1, 0.0);
    auto m2 = disk_plane(rng, 40, 2.1, 0.05, 0.1);
    auto cam = look_at_camera(Vec3(0, 0, 0), Vec3(0, 0, 1), 16, 16, 16);
    auto student = render(m1, cam);
    auto teacher = render(m2, cam);
    LossWeights w;
    auto res = distill_losses(m1, student, cam, teacher, cam, w);

    const auto td = unbiased_depth(teacher, cam);
    const auto sd = unbiased_depth(student, cam);
    double depth_acc = 0, normal_acc = 0;
    int count = 0;
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
            const std::size_t pix = student.idx(y, x);
            if (!td.valid[pix]) continue;
            ++count;
            normal_acc += (student.normal[pix] - teacher.normal[pix]).lpNorm<1>();
            if (sd.valid[pix]) depth_acc += std::abs(sd.depth[pix] - td.depth[pix]);
        }
    REQUIRE(count > 0);
    CHECK(res.l_depth == Catch::Approx(depth_acc / count).margin(1e-12));
    CHECK(res.l_normal == Catch::Approx(normal_acc / count).margin(1e-12));

    ImageRGB si(16, 16), ti(16, 16);
    si.px = student.rgb;
    ti.px = teacher.rgb;
    const double manual = l1_ssim(si, ti, w.lambda) + w.lambda1 * scale_loss(m1) +
                          w.beta2 * svg_loss(student, cam) + w.lambda_d * depth_acc / count +
                          w.lambda_n * normal_acc / count;
    CHECK(res.total == Catch::Approx(manual).margin(1e-12));
}

TEST_CASE("distill_losses rejects mismatched cameras") {
    std::mt19937 rng(97);
    auto m = disk_plane(rng, 10, 2.0, 0.0, 0.0);
    auto cam_a = look_at_camera(Vec3(0, 0, 0), Vec3(0, 0, 1), 8, 8, 8, "a");
    auto cam_b = look_at_camera(Vec3(0.1, 0, 0), Vec3(0, 0, 1), 8, 8, 8, "b");
    auto sa = render(m, cam_a);
    auto sb = render(m, cam_b);
    CHECK_THROWS_AS(distill_losses(m, sa, cam_a, sb, cam_b, LossWeights{}), CameraMismatchError);
}

TEST_CASE("distill_losses student gradients match finite differences") {
    std::mt19937 rng(101);
    auto m1 = disk_plane(rng, 30, 2.0, 0.1, 0.0);
    auto m2 = disk_plane(rng, 30, 2.05, 0.08, 0.02);
    auto cam = look_at_camera(Vec3(0, 0, 0), Vec3(0, 0, 1), 12, 12, 12);
    auto student = render(m1, cam);
    auto teacher = render(m2, cam);
    jitter_buffers(rng, student);
    LossWeights w;
    auto res = distill_losses(m1, student, cam, teacher, cam, w, true);
    auto loss = [&] { return distill_losses(m1, student, cam, teacher, cam, w).total; };
    check_buffer_grads({&student}, {&res.student_grads}, loss, 1e-6, 5e-4, 1e-6, true);
}
