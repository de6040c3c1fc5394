#include "csgs/eval/metrics.hpp"
#include "csgs/eval/synth.hpp"
#include "csgs/eval/tsdf.hpp"
#include "csgs/io/png.hpp"

#include "helpers.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <random>

using namespace csgs;
using csgs::testing::look_at_camera;

namespace {

SyntheticScene single_plane_scene(double z0, const Vec3& normal_tilt = Vec3::Zero()) {
    SyntheticScene scene;
    TexturedRect r;
    r.origin = Vec3(-2, -2, z0) + Vec3(0, 0, normal_tilt.dot(Vec3(-2, -2, 0)));
    r.edge_u = Vec3(4, 0, 4 * normal_tilt.x());
    r.edge_v = Vec3(0, 4, 4 * normal_tilt.y());
    scene.rects.push_back(r);
    return scene;
}

FScore fscore_oracle(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt, double eps) {
    auto near_any = [&](const Vec3& q, const std::vector<Vec3>& pts) {
        for (const auto& p : pts)
            if ((p - q).squaredNorm() <= eps * eps) return true;
        return false;
    };
    FScore out;
    std::size_t ph = 0, rh = 0;
    for (const auto& p : pred) ph += near_any(p, gt);
    for (const auto& g : gt) rh += near_any(g, pred);
    out.precision = double(ph) / pred.size();
    out.recall = double(rh) / gt.size();
    out.f = out.precision + out.recall > 0
                ? 2 * out.precision * out.recall / (out.precision + out.recall)
                : 0.0;
    return out;
}

bool views_identical(const GtView& a, const GtView& b) {
    return a.rgb.px == b.rgb.px && a.depth == b.depth && a.valid == b.valid &&
           a.normal == b.normal;
}

}  // namespace

TEST_CASE("fronto-parallel plane has constant perpendicular depth") {
    auto scene = single_plane_scene(0.0);
    auto cam = look_at_camera(Vec3(0.2, -0.1, 3.0), Vec3(0.2, -0.1, 0.0), 32, 32, 40);
    auto view = trace_view(scene, cam);
    int valid = 0;
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
            const std::size_t pix = view.rgb.idx(y, x);
            if (!view.valid[pix]) continue;
            ++valid;
            // Along-ray distance times the forward cosine is the plane gap.
            const Vec3 dir = cam.rotation_w2c.transpose() * cam.pixel_ray(x, y);
            CHECK(view.depth[pix] * std::abs(dir.z()) == Catch::Approx(3.0).margin(1e-12));
            CHECK(view.normal[pix] == Vec3(0, 0, 1));
        }
    CHECK(valid > 900);
}

TEST_CASE("tilted plane reports the analytic normal everywhere") {
    auto scene = single_plane_scene(1.0, Vec3(0.3, -0.2, 0));
    const Vec3 expect = scene.rects[0].normal();
    auto cam = look_at_camera(Vec3(0, 0, 5.0), Vec3(0, 0, 1.0), 24, 24, 30);
    auto view = trace_view(scene, cam);
    for (std::size_t pix = 0; pix < view.valid.size(); ++pix) {
        if (!view.valid[pix]) continue;
        CHECK((view.normal[pix] - expect).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("synth_scene is bit-identical under the same seed") {
    auto a = synth_scene(42);
    auto b = synth_scene(42);
    auto c = synth_scene(43);
    REQUIRE(a.cameras.size() == b.cameras.size());
    const Camera cam = a.cameras.cameras.begin()->second;
    CHECK(views_identical(trace_view(a, cam), trace_view(b, cam)));
    CHECK(a.boxes[0].box.lo == b.boxes[0].box.lo);
    CHECK(a.boxes[0].box.lo != c.boxes[0].box.lo);
    CHECK(surface_samples(a, 100, 7) == surface_samples(b, 100, 7));
}

TEST_CASE("every rig camera sees the scene; blind cameras are an error") {
    auto scene = synth_scene(3);
    for (const auto& [id, cam] : scene.cameras.cameras) CHECK_NOTHROW(trace_view(scene, cam));
    for (const auto& [id, cam] : scene.holdout_cameras.cameras)
        CHECK_NOTHROW(trace_view(scene, cam));
    Camera away;
    away.camera_id = "away";
    away.width = away.height = 8;
    away.fx = away.fy = 8;
    away.cx = away.cy = 4;
    away.rotation_w2c = Mat3::Identity();
    away.translation_w2c = Vec3(0, 0, -100);  // looking +z from z=100, scene behind
    CHECK_THROWS_AS(trace_view(scene, away), EmptyViewError);
}

TEST_CASE("the synthetic oracle has no rasterizer dependency") {
    std::ifstream f(std::string(CSGS_INCLUDE_DIR) + "/csgs/eval/synth.hpp");
    REQUIRE(f.good());
    std::string line;
    while (std::getline(f, line)) {
        if (line.rfind("#include", 0) != 0) continue;
        CHECK(line.find("render") == std::string::npos);
        CHECK(line.find("losses") == std::string::npos);
    }
}

TEST_CASE("psnr formula, cap, and shape checking") {
    ImageRGB a(8, 8, Vec3(0.5, 0.5, 0.5));
    ImageRGB b = a;
    CHECK(psnr(a, b) == 99.0);
    CHECK(ssim_metric(a, b) == 1.0);

    for (auto& p : b.px) p += Vec3::Constant(0.1);  // MSE exactly 0.01
    CHECK(psnr(a, b) == Catch::Approx(20.0).margin(1e-9));

    std::mt19937 rng(7);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    ImageRGB r1(8, 8), r2(8, 8);
    for (auto& p : r1.px) p = Vec3(u(rng), u(rng), u(rng));
    for (auto& p : r2.px) p = Vec3(u(rng), u(rng), u(rng));
    double mse = 0;
    for (std::size_t i = 0; i < r1.px.size(); ++i)
        mse += (r1.px[i] - r2.px[i]).squaredNorm() / (3.0 * r1.px.size());
    CHECK(psnr(r1, r2) == Catch::Approx(10 * std::log10(1 / mse)).margin(1e-12));

    CHECK_THROWS_AS(psnr(a, ImageRGB(4, 4)), std::invalid_argument);
}

TEST_CASE("psnr strictly decreases with noise amplitude") {
    std::mt19937 rng(11);
    std::normal_distribution<double> n(0.0, 1.0);
    ImageRGB base(16, 16, Vec3(0.5, 0.5, 0.5));
    std::vector<Vec3> noise(base.px.size());
    for (auto& v : noise) v = Vec3(n(rng), n(rng), n(rng));
    double prev = 1e9;
    for (double amp : {0.01, 0.02, 0.05, 0.1, 0.2}) {
        ImageRGB noisy = base;
        for (std::size_t i = 0; i < noisy.px.size(); ++i) noisy.px[i] += amp * noise[i];
        const double v = psnr(noisy, base);
        CHECK(v < prev);
        prev = v;
    }
}

TEST_CASE("fscore identities, disjoint clouds, and the exhaustive oracle") {
    std::mt19937 rng(13);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<Vec3> cloud(100);
    for (auto& p : cloud) p = Vec3(u(rng), u(rng), u(rng));

    SECTION("identical clouds score (1,1,1)") {
        auto s = fscore(cloud, cloud, 0.05);
        CHECK(s.precision == 1.0);
        CHECK(s.recall == 1.0);
        CHECK(s.f == 1.0);
    }
    SECTION("well-separated clouds score (0,0,0)") {
        auto far = cloud;
        for (auto& p : far) p += Vec3(10, 0, 0);
        auto s = fscore(cloud, far, 0.05);
        CHECK(s.precision == 0.0);
        CHECK(s.recall == 0.0);
        CHECK(s.f == 0.0);
    }
    SECTION("grid query equals the exhaustive oracle exactly") {
        std::vector<Vec3> pred(100), gt(100);
        for (auto& p : pred) p = Vec3(u(rng), u(rng), u(rng));
        for (auto& p : gt) p = Vec3(u(rng), u(rng), u(rng));
        for (double eps : {0.02, 0.08, 0.2}) {
            auto got = fscore(pred, gt, eps);
            auto expect = fscore_oracle(pred, gt, eps);
            CHECK(got.precision == expect.precision);
            CHECK(got.recall == expect.recall);
            CHECK(got.f == expect.f);
        }
    }
    SECTION("swapping the clouds exchanges precision and recall") {
        std::vector<Vec3> pred(60), gt(80);
        for (auto& p : pred) p = Vec3(u(rng), u(rng), u(rng));
        for (auto& p : gt) p = Vec3(u(rng), u(rng), u(rng));
        auto ab = fscore(pred, gt, 0.1);
        auto ba = fscore(gt, pred, 0.1);
        CHECK(ab.precision == ba.recall);
        CHECK(ab.recall == ba.precision);
        CHECK(ab.f == ba.f);
    }
    SECTION("empty clouds are an error") {
        CHECK_THROWS_AS(fscore({}, cloud, 0.1), EmptyCloudError);
        CHECK_THROWS_AS(fscore(cloud, {}, 0.1), EmptyCloudError);
    }
}

TEST_CASE("tsdf fusion of analytic plane depths stays within one voxel") {
    auto scene = single_plane_scene(0.0);
    std::vector<DepthObservation> obs;
    const Vec3 eyes[4] = {Vec3(0.5, 0.5, 3), Vec3(-0.5, 0.4, 2.8), Vec3(0.3, -0.5, 3.2),
                          Vec3(-0.4, -0.4, 3)};
    for (int i = 0; i < 4; ++i) {
        auto cam = look_at_camera(eyes[i], Vec3(0, 0, 0), 48, 48, 48, "v" + std::to_string(i));
        auto view = trace_view(scene, cam);
        obs.push_back({cam, view.depth, view.valid});
    }
    Aabb bounds;
    bounds.expand(Vec3(-1.5, -1.5, -0.2));
    bounds.expand(Vec3(1.5, 1.5, 0.2));
    const double voxel = 0.1;
    auto mesh = tsdf_fuse(obs, voxel, bounds);
    REQUIRE(!mesh.empty());
    for (const auto& v : mesh.vertices) CHECK(std::abs(v.z()) <= voxel);

    SECTION("fusion is deterministic") {
        auto again = tsdf_fuse(obs, voxel, bounds);
        CHECK(mesh.vertices == again.vertices);
        CHECK(mesh.faces == again.faces);
        CHECK(mesh_sample(mesh, 500, 3) == mesh_sample(again, 500, 3));
    }
}

TEST_CASE("tsdf fusion without valid depths is an error") {
    Camera cam = look_at_camera(Vec3(0, 0, 3), Vec3::Zero(), 8, 8, 8);
    DepthObservation obs{cam, std::vector<double>(64, 0.0), std::vector<std::uint8_t>(64, 0)};
    Aabb bounds;
    bounds.expand(Vec3(-1, -1, -1));
    bounds.expand(Vec3(1, 1, 1));
    CHECK_THROWS_AS(tsdf_fuse({obs}, 0.1, bounds), EmptyFusionError);
}

TEST_CASE("plane-and-box scene reconstructs to a high f-score from GT depths") {
    auto scene = synth_scene(17);
    std::vector<DepthObservation> obs;
    for (const auto& [id, cam] : scene.cameras.cameras) {
        auto view = trace_view(scene, cam);
        obs.push_back({cam, view.depth, view.valid});
    }
    const Aabb bounds = scene.surface_extent();
    const double voxel = 0.1;
    auto mesh = tsdf_fuse(obs, voxel, bounds);
    REQUIRE(!mesh.empty());
    auto pred = mesh_sample(mesh, 20000, 5);
    auto gt = surface_samples(scene, 20000, 6);
    auto s = fscore(pred, gt, 2 * voxel);
    INFO("precision " << s.precision << " recall " << s.recall << " f " << s.f);
    CHECK(s.f >= 0.95);
}

TEST_CASE("filter_depths drops an injected floater and keeps the consistent surface") {
    SceneSpec spec;
    spec.image_size = 32;
    auto scene = synth_scene(23, spec);
    std::vector<DepthObservation> obs;
    for (const auto& [id, cam] : scene.cameras.cameras) {
        auto view = trace_view(scene, cam);
        obs.push_back({cam, view.depth, view.valid});
    }
    const std::size_t bad = obs[0].depth.size() / 2 + 5;
    REQUIRE(obs[0].valid[bad]);
    obs[0].depth[bad] *= 0.7;  // pulled toward the camera, agrees with nobody

    long before = 0, after = 0;
    for (const auto& o : obs)
        for (auto v : o.valid) before += v != 0;
    auto filt = filter_depths(obs);
    for (const auto& o : filt)
        for (auto v : o.valid) after += v != 0;

    CHECK_FALSE(filt[0].valid[bad]);
    CHECK(after < before);
    CHECK(after > 0.75 * before);
}

TEST_CASE("png round trip preserves 8-bit colors") {
    namespace fs = std::filesystem;
    std::mt19937 rng(19);
    std::uniform_int_distribution<int> u8(0, 255);
    ImageRGB img(16, 12);
    for (auto& p : img.px) p = Vec3(u8(rng), u8(rng), u8(rng)) / 255.0;
    const auto path = (fs::temp_directory_path() / "csgs_test_roundtrip.png").string();
    write_png(img, path);
    auto back = read_png(path);
    REQUIRE(back.width == img.width);
    REQUIRE(back.height == img.height);
    for (std::size_t i = 0; i < img.px.size(); ++i)
        CHECK((back.px[i] - img.px[i]).cwiseAbs().maxCoeff() < 0.5 / 255.0);
    fs::remove(path);
}

TEST_CASE("eval report serializes every metric") {
    EvalReport rep;
    rep.view_psnr = {{"h0", 25.0}, {"h1", 27.5}};
    rep.view_ssim = {{"h0", 0.9}, {"h1", 0.92}};
    rep.mesh_fscore = {0.8, 0.9, 2 * 0.8 * 0.9 / 1.7};
    rep.eps = 0.05;
    rep.model_size = 1234;
    const std::string text = rep.to_text();
    CHECK(text.find("mean_psnr\t26.25") != std::string::npos);
    CHECK(text.find("fscore") != std::string::npos);
    CHECK(text.find("lpips\tnot-computed") != std::string::npos);
    CHECK(rep.mean_psnr() == 26.25);
}
