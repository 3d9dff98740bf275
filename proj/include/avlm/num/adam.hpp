#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "avlm/num/tensor.hpp"

namespace avlm::num {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.99;  // paper's optimizer setting
    double beta2 = 0.999;
    double eps = 1e-8;
    int64_t warmup_steps = 0;  // linear warmup: lr * step/warmup while step <= warmup
};

/// Adam with bias correction and linear warmup. Parameters may be grouped
/// so adapters, fusion and heads can run at different learning rates while
/// sharing one step counter.
class Adam {
public:
    struct Group {
        std::vector<Tensor> params;
        double lr;
    };

    Adam(std::vector<Tensor> params, AdamConfig cfg)
        : Adam(std::vector<Group>{Group{std::move(params), cfg.lr}}, cfg) {}

    Adam(std::vector<Group> groups, AdamConfig cfg) : groups_(std::move(groups)), cfg_(cfg) {
        for (auto& g : groups_) {
            GroupState st;
            st.m.reserve(g.params.size());
            st.v.reserve(g.params.size());
            for (auto& p : g.params) {
                if (!p.requires_grad())
                    throw std::invalid_argument("Adam: parameter without requires_grad");
                st.m.emplace_back(p.numel(), 0.0);
                st.v.emplace_back(p.numel(), 0.0);
            }
            states_.push_back(std::move(st));
        }
    }

    /// Warmup-scaled learning rate that a given 1-based step would use.
    double lr_at(int64_t step, double base_lr) const {
        if (cfg_.warmup_steps > 0 && step <= cfg_.warmup_steps)
            return base_lr * static_cast<double>(step) / static_cast<double>(cfg_.warmup_steps);
        return base_lr;
    }

    void step() {
        ++step_count_;
        double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
        double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
        for (size_t gi = 0; gi < groups_.size(); ++gi) {
            auto& g = groups_[gi];
            auto& st = states_[gi];
            double lr = lr_at(step_count_, g.lr);
            for (size_t pi = 0; pi < g.params.size(); ++pi) {
                Tensor& p = g.params[pi];
                if (!p.has_grad()) continue;  // untouched this step
                const double* grad = p.grad();
                double* m = st.m[pi].data();
                double* v = st.v[pi].data();
                double* x = p.data();
                for (size_t i = 0; i < p.numel(); ++i) {
                    double gv = grad[i];
                    if (!std::isfinite(gv))
                        throw std::runtime_error("Adam: non-finite gradient");
                    m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gv;
                    v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gv * gv;
                    double mh = m[i] / bc1;
                    double vh = v[i] / bc2;
                    x[i] -= lr * mh / (std::sqrt(vh) + cfg_.eps);
                }
            }
        }
    }

    void zero_grad() {
        for (auto& g : groups_)
            for (auto& p : g.params) p.zero_grad();
    }

    int64_t step_count() const { return step_count_; }
    double current_lr() const { return lr_at(step_count_ + 1, groups_[0].lr); }
    const AdamConfig& config() const { return cfg_; }

private:
    struct GroupState {
        std::vector<std::vector<double>> m;
        std::vector<std::vector<double>> v;
    };

    std::vector<Group> groups_;
    std::vector<GroupState> states_;
    AdamConfig cfg_;
    int64_t step_count_ = 0;
};

}  // namespace avlm::num
