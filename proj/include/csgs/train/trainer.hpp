#pragma once

#include "csgs/core/camera.hpp"
#include "csgs/core/image.hpp"
#include "csgs/losses/losses.hpp"
#include "csgs/render/backward.hpp"
#include "csgs/render/rasterizer.hpp"
#include "csgs/train/adam.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <stdexcept>
#include <vector>

namespace csgs {

struct NoCameraError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NonFiniteLossError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainerConfig {
    int max_iters = 3000;
    int stage1_iters = 700;
    int prune_iter = 2000;
    double prune_fraction = 0.2;

    int densify_interval = 100;
    int densify_start = 500;
    int densify_stop = 1500;
    double densify_grad_threshold = 2e-4;
    double densify_scale_fraction = 0.01;  // clone below this fraction of extent
    double split_factor = 1.6;

    double beta_agp = 0.1;
    LearningRates lr;
    LossWeights weights;
    RenderConfig render;
    std::uint32_t seed = 0;
};

struct TrainView {
    Camera cam;
    ImageRGB image;
};

using PriorityScores = std::vector<double>;

// Per-primitive volume factor gamma(Sigma) = (V / V_max90 clamped to [0,1])
// raised to beta; V_max90 is the 90th-percentile (nearest-rank) volume.
inline std::vector<double> agp_volume_factor(const GaussianModel& m, double beta_agp) {
    const std::size_t n = m.size();
    std::vector<double> volume(n, 0.0);
    for (std::size_t k = 0; k < n; ++k) volume[k] = m.primitives[k].scales().prod();
    std::vector<double> sorted = volume;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t rank =
        n == 0 ? 0 : static_cast<std::size_t>(std::ceil(0.9 * static_cast<double>(n))) - 1;
    const double v_max90 = n == 0 ? 1.0 : sorted[std::min(rank, n - 1)];
    std::vector<double> factor(n, 0.0);
    for (std::size_t k = 0; k < n; ++k)
        factor[k] = std::pow(v_max90 > 0 ? std::clamp(volume[k] / v_max90, 0.0, 1.0) : 1.0,
                             beta_agp);
    return factor;
}

// Eq.-style priority: blend-contribution frequency times opacity times a
// percentile-normalized volume factor.
inline PriorityScores agp_score(const GaussianModel& m, const std::vector<Camera>& cameras,
                                const RenderConfig& cfg, double beta_agp = 0.1) {
    if (cameras.empty()) throw NoCameraError("agp_score needs at least one camera");
    const std::size_t n = m.size();
    std::vector<std::uint64_t> hits(n, 0);
    for (const auto& cam : cameras) {
        RenderConfig rc = cfg;
        rc.keep_contributors = false;
        auto buf = render(m, cam, rc);
        for (std::size_t k = 0; k < n; ++k) hits[k] += buf.coverage[k];
    }
    const auto factor = agp_volume_factor(m, beta_agp);
    PriorityScores scores(n, 0.0);
    for (std::size_t k = 0; k < n; ++k)
        scores[k] = static_cast<double>(hits[k]) * m.primitives[k].opacity() * factor[k];
    return scores;
}

// Removes exactly floor(phi N) lowest-score primitives; ties drop the higher
// index first; survivor order is preserved.
inline GaussianModel agp_prune(const GaussianModel& m, const PriorityScores& scores, double phi) {
    if (scores.size() != m.size())
        throw std::invalid_argument("agp_prune: score/model size mismatch");
    const std::size_t n = m.size();
    const auto remove = static_cast<std::size_t>(std::floor(phi * static_cast<double>(n)));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return scores[a] != scores[b] ? scores[a] < scores[b] : a > b;
    });
    std::vector<std::uint8_t> drop(n, 0);
    for (std::size_t i = 0; i < remove; ++i) drop[order[i]] = 1;

    GaussianModel out;
    out.model_id = m.model_id;
    out.provenance = m.provenance;
    for (std::size_t k = 0; k < n; ++k)
        if (!drop[k]) out.primitives.push_back(m.primitives[k]);
    out.recompute_extent();
    return out;
}

// Clone-or-split densification on accumulated screen-space position gradients.
// `kept` (optional) reports, per output primitive, the input index it derives
// from, letting callers keep optimizer state aligned.
inline GaussianModel densify(const GaussianModel& m, const std::vector<double>& mean_grad_norm,
                             const TrainerConfig& cfg, std::vector<std::size_t>* parent = nullptr,
                             std::vector<std::uint8_t>* is_new = nullptr) {
    if (mean_grad_norm.size() != m.size())
        throw std::invalid_argument("densify: gradient/model size mismatch");
    const double extent_diag = std::max(m.extent.diagonal(), 1e-9);
    std::mt19937 rng(cfg.seed ^ (static_cast<std::uint32_t>(m.size()) * 2654435761u));
    std::normal_distribution<double> gauss(0.0, 1.0);

    GaussianModel out;
    out.model_id = m.model_id;
    out.provenance = m.provenance;
    out.extent = m.extent;
    if (parent) parent->clear();
    if (is_new) is_new->clear();
    std::vector<GaussianPrimitive> appended;
    std::vector<std::size_t> appended_parent;

    for (std::size_t k = 0; k < m.size(); ++k) {
        const auto& p = m.primitives[k];
        const bool hot = mean_grad_norm[k] > cfg.densify_grad_threshold;
        const double max_scale = p.scales().maxCoeff();
        if (!hot) {
            out.primitives.push_back(p);
            if (parent) parent->push_back(k);
            if (is_new) is_new->push_back(0);
            continue;
        }
        if (max_scale < cfg.densify_scale_fraction * extent_diag) {
            // Clone: keep the original and append a copy.
            out.primitives.push_back(p);
            if (parent) parent->push_back(k);
            if (is_new) is_new->push_back(0);
            appended.push_back(p);
            appended_parent.push_back(k);
        } else {
            // Split: two shrunken samples of the original distribution.
            GaussianPrimitive child = p;
            child.log_scale -= Vec3::Constant(std::log(cfg.split_factor));
            const Mat3 rot = p.rotation_matrix();
            const Vec3 s = p.scales();
            GaussianPrimitive a = child, b = child;
            a.mu = p.mu + rot * (s.cwiseProduct(Vec3(gauss(rng), gauss(rng), gauss(rng))));
            b.mu = p.mu + rot * (s.cwiseProduct(Vec3(gauss(rng), gauss(rng), gauss(rng))));
            out.primitives.push_back(a);
            if (parent) parent->push_back(k);
            if (is_new) is_new->push_back(1);
            appended.push_back(b);
            appended_parent.push_back(k);
        }
    }
    for (std::size_t i = 0; i < appended.size(); ++i) {
        out.primitives.push_back(appended[i]);
        if (parent) parent->push_back(appended_parent[i]);
        if (is_new) is_new->push_back(1);
    }
    out.recompute_extent();
    return out;
}

// Nearest other camera by center distance with view directions within 60
// degrees; nullopt when none qualifies.
inline std::optional<std::size_t> select_neighbor_view(const std::vector<TrainView>& views,
                                                       std::size_t ref) {
    const Vec3 c0 = views[ref].cam.center();
    const Vec3 f0 = views[ref].cam.rotation_w2c.row(2).transpose();
    std::optional<std::size_t> best;
    double best_dist = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < views.size(); ++i) {
        if (i == ref) continue;
        const Vec3 fi = views[i].cam.rotation_w2c.row(2).transpose();
        if (f0.dot(fi) < 0.5) continue;  // cos 60
        const double d = (views[i].cam.center() - c0).norm();
        if (d < best_dist) {
            best_dist = d;
            best = i;
        }
    }
    return best;
}

// Full per-device optimization loop. Deterministic under cfg.seed; optionally
// streams "iter<TAB>component<TAB>value" log lines.
inline GaussianModel train(GaussianModel model, const std::vector<TrainView>& views,
                           const TrainerConfig& cfg, std::ostream* log = nullptr) {
    if (views.empty()) throw NoCameraError("train needs at least one camera with an image");
    if (cfg.max_iters <= 0) return model;

    LossWeights w = cfg.weights;
    w.tau = cfg.stage1_iters;
    w.max_iters = cfg.max_iters;

    model.recompute_extent();
    const double extent_diag = std::max(model.extent.diagonal(), 1e-9);

    Adam adam;
    adam.reset(model);
    std::vector<double> grad_accum(model.size(), 0.0);
    std::vector<std::uint32_t> grad_count(model.size(), 0);

    std::mt19937 rng(cfg.seed);
    std::vector<std::size_t> order(views.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t cursor = 0;

    RenderConfig rc = cfg.render;
    rc.keep_contributors = true;

    std::vector<Vec2> g2d_ref, g2d_nbr;
    for (int t = 1; t <= cfg.max_iters; ++t) {
        if (cursor == order.size()) {
            std::shuffle(order.begin(), order.end(), rng);
            cursor = 0;
        }
        const std::size_t vi = order[cursor++];
        const TrainView& view = views[vi];

        auto buf = render(model, view.cam, rc);
        ViewData ref{&buf, &view.cam, &view.image};

        std::optional<ViewData> nbr;
        RenderBuffers nbr_buf;
        std::optional<std::size_t> ni;
        if (t > w.tau && views.size() > 1) {
            ni = select_neighbor_view(views, vi);
            if (ni) {
                nbr_buf = render(model, views[*ni].cam, rc);
                nbr = ViewData{&nbr_buf, &views[*ni].cam, &views[*ni].image};
            }
        }

        auto res = device_loss(model, ref, nbr, t, w, true);
        if (!std::isfinite(res.total))
            throw NonFiniteLossError("non-finite loss at iteration " + std::to_string(t) +
                                     ": image=" + std::to_string(res.l_3dgs) +
                                     " scale=" + std::to_string(res.l_scale) +
                                     " svg=" + std::to_string(res.l_svg) +
                                     " mvgeo=" + std::to_string(res.l_mvgeo) +
                                     " mvrgb=" + std::to_string(res.l_mvrgb));
        if (log) {
            *log << t << "\ttotal\t" << res.total << "\n"
                 << t << "\timage\t" << res.l_3dgs << "\n"
                 << t << "\tscale\t" << res.l_scale << "\n"
                 << t << "\tsvg\t" << res.l_svg << "\n"
                 << t << "\tmvgeo\t" << res.l_mvgeo << "\n"
                 << t << "\tmvrgb\t" << res.l_mvrgb << "\n";
        }

        ParamGrads grads = backward(model, view.cam, buf, res.ref_grads, &g2d_ref);
        if (res.has_neighbor) {
            ParamGrads ng = backward(model, views[*ni].cam, nbr_buf, res.nbr_grads, &g2d_nbr);
            grads.add(ng);
            for (std::size_t k = 0; k < model.size(); ++k) g2d_ref[k] += g2d_nbr[k];
        }
        for (std::size_t k = 0; k < model.size(); ++k) grads.log_scale[k] += res.g_log_scale[k];

        // Screen-space gradient statistics for densification (half-resolution
        // normalization matches the usual threshold scale).
        const double px_scale = 0.5 * std::max(buf.width, buf.height);
        for (std::size_t k = 0; k < model.size(); ++k) {
            const double gn = g2d_ref[k].norm() * px_scale;
            if (gn > 0) {
                grad_accum[k] += gn;
                ++grad_count[k];
            }
        }

        const double pos_lr =
            cfg.lr.position * extent_diag *
            std::pow(cfg.lr.position_final / cfg.lr.position,
                     static_cast<double>(t) / static_cast<double>(cfg.max_iters));
        adam.step(model, grads, cfg.lr, pos_lr);
        for (auto& p : model.primitives) p.renormalize_rotation();

        if (t >= cfg.densify_start && t <= cfg.densify_stop && cfg.densify_interval > 0 &&
            t % cfg.densify_interval == 0) {
            std::vector<double> mean_grad(model.size(), 0.0);
            for (std::size_t k = 0; k < model.size(); ++k)
                if (grad_count[k] > 0) mean_grad[k] = grad_accum[k] / grad_count[k];
            std::vector<std::size_t> parent;
            std::vector<std::uint8_t> is_new;
            TrainerConfig dcfg = cfg;
            dcfg.seed = cfg.seed + static_cast<std::uint32_t>(t);
            auto grown = densify(model, mean_grad, dcfg, &parent, &is_new);
            if (grown.size() != model.size()) {
                Adam next;
                next.reset(grown);
                model = std::move(grown);
                adam = std::move(next);
            } else {
                model = std::move(grown);
            }
            grad_accum.assign(model.size(), 0.0);
            grad_count.assign(model.size(), 0);
        }

        if (t == cfg.prune_iter && cfg.prune_fraction > 0 && !model.empty()) {
            std::vector<Camera> cams;
            cams.reserve(views.size());
            for (const auto& v : views) cams.push_back(v.cam);
            auto scores = agp_score(model, cams, cfg.render, cfg.beta_agp);
            model = agp_prune(model, scores, cfg.prune_fraction);
            adam.reset(model);
            grad_accum.assign(model.size(), 0.0);
            grad_count.assign(model.size(), 0);
        }
    }
    return model;
}

}  // namespace csgs
