#pragma once

#include "csgs/core/gaussian.hpp"
#include "csgs/render/backward.hpp"

#include <cmath>
#include <cstddef>
#include <vector>

namespace csgs {

struct LearningRates {
    // Position rates are multiplied by the scene extent diagonal and decay
    // exponentially from `position` to `position_final` over training.
    double position = 1.6e-4;
    double position_final = 1.6e-6;
    double rotation = 1e-3;
    double scale = 5e-3;
    double opacity = 5e-2;
    double color = 2.5e-3;
};

// Adam moments for every primitive parameter, index-aligned with the model.
class Adam {
public:
    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEps = 1e-15;

    void reset(const GaussianModel& m) {
        mu_m_.assign(m.size(), Vec3::Zero());
        mu_v_.assign(m.size(), Vec3::Zero());
        rot_m_.assign(m.size(), Vec4::Zero());
        rot_v_.assign(m.size(), Vec4::Zero());
        ls_m_.assign(m.size(), Vec3::Zero());
        ls_v_.assign(m.size(), Vec3::Zero());
        op_m_.assign(m.size(), 0.0);
        op_v_.assign(m.size(), 0.0);
        color_m_.resize(m.size());
        color_v_.resize(m.size());
        for (std::size_t k = 0; k < m.size(); ++k) {
            color_m_[k].assign(m.primitives[k].color_coeffs.size(), Vec3::Zero());
            color_v_[k].assign(m.primitives[k].color_coeffs.size(), Vec3::Zero());
        }
        step_ = 0;
    }

    void append_zero(const GaussianPrimitive& p) {
        mu_m_.push_back(Vec3::Zero());
        mu_v_.push_back(Vec3::Zero());
        rot_m_.push_back(Vec4::Zero());
        rot_v_.push_back(Vec4::Zero());
        ls_m_.push_back(Vec3::Zero());
        ls_v_.push_back(Vec3::Zero());
        op_m_.push_back(0.0);
        op_v_.push_back(0.0);
        color_m_.emplace_back(p.color_coeffs.size(), Vec3::Zero());
        color_v_.emplace_back(p.color_coeffs.size(), Vec3::Zero());
    }

    void zero_entry(std::size_t k) {
        mu_m_[k].setZero();
        mu_v_[k].setZero();
        rot_m_[k].setZero();
        rot_v_[k].setZero();
        ls_m_[k].setZero();
        ls_v_[k].setZero();
        op_m_[k] = 0.0;
        op_v_[k] = 0.0;
        for (auto& c : color_m_[k]) c.setZero();
        for (auto& c : color_v_[k]) c.setZero();
    }

    void filter(const std::vector<std::size_t>& keep) {
        auto apply = [&](auto& vec) {
            auto copy = vec;
            vec.clear();
            vec.reserve(keep.size());
            for (auto k : keep) vec.push_back(std::move(copy[k]));
        };
        apply(mu_m_);
        apply(mu_v_);
        apply(rot_m_);
        apply(rot_v_);
        apply(ls_m_);
        apply(ls_v_);
        apply(op_m_);
        apply(op_v_);
        apply(color_m_);
        apply(color_v_);
    }

    void step(GaussianModel& m, const ParamGrads& g, const LearningRates& lr,
              double position_lr_abs) {
        ++step_;
        const double c1 = 1.0 - std::pow(kBeta1, step_);
        const double c2 = 1.0 - std::pow(kBeta2, step_);
        auto upd = [&](double& p, double& mm, double& vv, double grad, double rate) {
            mm = kBeta1 * mm + (1.0 - kBeta1) * grad;
            vv = kBeta2 * vv + (1.0 - kBeta2) * grad * grad;
            p -= rate * (mm / c1) / (std::sqrt(vv / c2) + kEps);
        };
        for (std::size_t k = 0; k < m.size(); ++k) {
            auto& p = m.primitives[k];
            for (int i = 0; i < 3; ++i) {
                upd(p.mu[i], mu_m_[k][i], mu_v_[k][i], g.mu[k][i], position_lr_abs);
                upd(p.log_scale[i], ls_m_[k][i], ls_v_[k][i], g.log_scale[k][i], lr.scale);
            }
            for (int i = 0; i < 4; ++i)
                upd(p.rotation[i], rot_m_[k][i], rot_v_[k][i], g.rotation[k][i], lr.rotation);
            upd(p.opacity_logit, op_m_[k], op_v_[k], g.opacity_logit[k], lr.opacity);
            for (std::size_t c = 0; c < p.color_coeffs.size(); ++c)
                for (int i = 0; i < 3; ++i)
                    upd(p.color_coeffs[c][i], color_m_[k][c][i], color_v_[k][c][i],
                        g.color_coeffs[k][c][i], lr.color);
        }
    }

private:
    std::vector<Vec3> mu_m_, mu_v_, ls_m_, ls_v_;
    std::vector<Vec4> rot_m_, rot_v_;
    std::vector<double> op_m_, op_v_;
    std::vector<std::vector<Vec3>> color_m_, color_v_;
    long step_ = 0;
};

}  // namespace csgs
