#pragma once

#include "csgs/core/camera.hpp"
#include "csgs/core/gaussian.hpp"
#include "csgs/losses/losses.hpp"
#include "csgs/render/backward.hpp"
#include "csgs/render/rasterizer.hpp"
#include "csgs/train/adam.hpp"
#include "csgs/train/trainer.hpp"

#include <algorithm>
#include <map>
#include <ostream>
#include <random>
#include <stdexcept>
#include <utility>
#include <vector>

namespace csgs {

struct EmptyCameraSetError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct AggregationConfig {
    int distill_epochs = 5;
    LearningRates distill_lr{1.6e-5, 1.6e-7, 1e-3, 5e-3, 5e-2, 2.5e-3};  // 10x slower position
    double postprune_opacity = 0.005;
    double postprune_scale_fraction = 0.1;

    // Frustum covisibility sampling.
    double frustum_near_fraction = 0.01;  // of the global extent diagonal
    double frustum_far_fraction = 2.0;
    int frustum_grid = 8;
    int frustum_depth_slices = 8;

    double beta_agp = 0.1;
    RenderConfig render;
    LossWeights weights;
    std::uint32_t seed = 0;
};

// Deterministic sampled-frustum covisibility: a camera overlaps the global
// model when any ray sample between near and far lands inside its extent.
inline bool frustum_intersects(const Camera& cam, const Aabb& box, const AggregationConfig& cfg) {
    if (box.empty()) return false;
    const double diag = box.diagonal();
    const double near = cfg.frustum_near_fraction * diag;
    const double far = cfg.frustum_far_fraction * diag;
    const Vec3 eye = cam.center();
    for (int i = 0; i < cfg.frustum_grid; ++i) {
        for (int j = 0; j < cfg.frustum_grid; ++j) {
            const double u = (i + 0.5) / cfg.frustum_grid * cam.width;
            const double v = (j + 0.5) / cfg.frustum_grid * cam.height;
            const Vec3 dir_cam =
                Vec3((u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0).normalized();
            const Vec3 dir = cam.rotation_w2c.transpose() * dir_cam;
            for (int s = 0; s < cfg.frustum_depth_slices; ++s) {
                const double d = near + (far - near) * (s + 0.5) / cfg.frustum_depth_slices;
                if (box.contains(eye + d * dir)) return true;
            }
        }
    }
    return false;
}

inline CameraSet camera_overlap(const CameraSet& local, const Aabb& global_extent,
                                const AggregationConfig& cfg = {}) {
    CameraSet out;
    if (global_extent.empty()) return out;
    for (const auto& [id, cam] : local.cameras)
        if (frustum_intersects(cam, global_extent, cfg)) out.insert(cam);
    return out;
}

// Per-model variant: a camera overlaps when its frustum reaches any one of the
// already-merged models' extents. The single bounding box of several disjoint
// models would cover the gaps between them and over-count overlap.
inline CameraSet camera_overlap(const CameraSet& local, const std::vector<Aabb>& extents,
                                const AggregationConfig& cfg = {}) {
    CameraSet out;
    for (const auto& [id, cam] : local.cameras)
        for (const auto& box : extents)
            if (!box.empty() && frustum_intersects(cam, box, cfg)) {
                out.insert(cam);
                break;
            }
    return out;
}

inline double psi(const CameraSet& local, const CameraSet& overlap) {
    if (local.empty()) throw EmptyCameraSetError("psi: local camera set is empty");
    return static_cast<double>(overlap.size()) / static_cast<double>(local.size());
}

// Local Model Compression: score under the non-overlapping cameras and drop
// the lowest floor(psi N).
inline GaussianModel lmc_compress(const GaussianModel& m, const CameraSet& local,
                                  const CameraSet& overlap, const AggregationConfig& cfg = {}) {
    const double ratio = psi(local, overlap);
    if (ratio == 0.0 || m.empty()) return m;
    const CameraSet rest = local.difference(overlap);
    PriorityScores scores;
    if (!rest.empty()) {
        scores = agp_score(m, rest.ordered(), cfg.render, cfg.beta_agp);
    } else {
        // Fully overlapped local: fall back to opacity times the volume factor.
        const auto factor = agp_volume_factor(m, cfg.beta_agp);
        scores.resize(m.size());
        for (std::size_t k = 0; k < m.size(); ++k)
            scores[k] = m.primitives[k].opacity() * factor[k];
    }
    return agp_prune(m, scores, ratio);
}

// Union of compressed locals, bit-exact, provenance tracking source ids.
inline GaussianModel mas_init(const std::vector<GaussianModel>& locals) {
    if (locals.empty()) throw std::invalid_argument("mas_init: no local models");
    GaussianModel out;
    out.model_id = "global";
    for (const auto& l : locals) {
        out.primitives.insert(out.primitives.end(), l.primitives.begin(), l.primitives.end());
        out.provenance.push_back(l.model_id);
        out.provenance.insert(out.provenance.end(), l.provenance.begin(), l.provenance.end());
        out.extent.merge(l.extent);
    }
    return out;
}

struct TeacherModel {
    GaussianModel model;
    CameraSet cameras;
};

// Self-distillation of the merged global model against renders of its
// constituent locals. No densification; count never increases.
inline GaussianModel mas_distill(GaussianModel global, const std::vector<TeacherModel>& teachers,
                                 const AggregationConfig& cfg, std::ostream* log = nullptr) {
    if (cfg.distill_epochs <= 0 || global.empty()) return global;
    struct Pair {
        std::size_t teacher;
        const Camera* cam;
    };
    std::vector<Pair> pairs;
    for (std::size_t i = 0; i < teachers.size(); ++i)
        for (const auto& [id, cam] : teachers[i].cameras.cameras) pairs.push_back({i, &cam});
    if (pairs.empty()) throw EmptyCameraSetError("mas_distill: teachers expose no cameras");

    global.recompute_extent();
    const double extent_diag = std::max(global.extent.diagonal(), 1e-9);
    Adam adam;
    adam.reset(global);
    std::mt19937 rng(cfg.seed);

    RenderConfig rc = cfg.render;
    rc.keep_contributors = true;
    RenderConfig teacher_rc = cfg.render;
    teacher_rc.keep_contributors = false;

    // Teacher renders are immutable; cache across epochs.
    std::map<std::pair<std::size_t, std::string>, RenderBuffers> cache;

    LossWeights w = cfg.weights;
    int step = 0;
    for (int epoch = 0; epoch < cfg.distill_epochs; ++epoch) {
        std::shuffle(pairs.begin(), pairs.end(), rng);
        for (const auto& pr : pairs) {
            const Camera& cam = *pr.cam;
            auto key = std::make_pair(pr.teacher, cam.camera_id);
            auto it = cache.find(key);
            if (it == cache.end())
                it = cache.emplace(key, render(teachers[pr.teacher].model, cam, teacher_rc))
                         .first;

            auto student_buf = render(global, cam, rc);
            auto res = distill_losses(global, student_buf, cam, it->second, cam, w, true);
            if (log)
                *log << epoch << "\t" << step << "\t" << res.total << "\t" << res.l_3dgs << "\t"
                     << res.l_depth << "\t" << res.l_normal << "\n";
            ++step;

            ParamGrads grads = backward(global, cam, student_buf, res.student_grads);
            for (std::size_t k = 0; k < global.size(); ++k)
                grads.log_scale[k] += res.g_log_scale[k];
            adam.step(global, grads, cfg.distill_lr, cfg.distill_lr.position * extent_diag);
            for (auto& p : global.primitives) p.renormalize_rotation();
        }
    }
    global.recompute_extent();
    return global;
}

// Opacity/size post-prune of the distilled global model.
inline GaussianModel mas_postprune(const GaussianModel& m, const AggregationConfig& cfg = {}) {
    GaussianModel out;
    out.model_id = m.model_id;
    out.provenance = m.provenance;
    Aabb extent = m.extent;
    if (extent.empty()) {
        GaussianModel tmp = m;
        tmp.recompute_extent();
        extent = tmp.extent;
    }
    const double max_scale = cfg.postprune_scale_fraction * extent.diagonal();
    for (const auto& p : m.primitives) {
        if (p.opacity() < cfg.postprune_opacity) continue;
        if (p.scales().maxCoeff() > max_scale) continue;
        out.primitives.push_back(p);
    }
    out.recompute_extent();
    return out;
}

struct LocalAgent {
    GaussianModel model;
    CameraSet cameras;
};

// One aggregation round (edge over devices, or cloud over edges): sequential
// LMC against the extents of the models merged so far, merge, distill,
// post-prune.
inline GaussianModel aggregate(const std::vector<LocalAgent>& locals,
                               const AggregationConfig& cfg, std::ostream* log = nullptr) {
    if (locals.empty()) throw std::invalid_argument("aggregate: no local models");
    std::vector<GaussianModel> compressed;
    std::vector<TeacherModel> teachers;
    std::vector<Aabb> merged_extents;
    for (const auto& l : locals) {
        const CameraSet overlap = camera_overlap(l.cameras, merged_extents, cfg);
        GaussianModel c = lmc_compress(l.model, l.cameras, overlap, cfg);
        c.recompute_extent();
        if (log)
            *log << "lmc\t" << l.model.model_id << "\t" << l.model.size() << "\t" << c.size()
                 << "\t" << psi(l.cameras, overlap) << "\n";
        merged_extents.push_back(c.extent);
        compressed.push_back(c);
        // Teach only from views the compression kept content for; a pruned
        // teacher on its covisible views would distill its holes into the
        // student.
        CameraSet teach = l.cameras.difference(overlap);
        if (teach.size() == 0) teach = l.cameras;
        teachers.push_back({std::move(c), std::move(teach)});
    }
    GaussianModel global = mas_init(compressed);
    global = mas_distill(std::move(global), teachers, cfg, log);
    return mas_postprune(global, cfg);
}

}  // namespace csgs
