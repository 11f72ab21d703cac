#pragma once

// Decoupled-weight-decay adaptive-moment optimizer with standard bias
// correction. Moments live in the working precision.

#include <cmath>
#include <vector>

#include "sre/tensor.hpp"

namespace sre {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.005;
};

template <class R>
class AdamW {
  public:
    struct Group {
        std::vector<Tensor<R>*> params;
        double lr;
    };

    AdamW(std::vector<Group> groups, AdamWConfig cfg = {}) : groups_(std::move(groups)), cfg_(cfg) {
        for (auto& g : groups_) {
            for (auto* p : g.params) {
                m_.emplace_back(p->numel(), R(0));
                v_.emplace_back(p->numel(), R(0));
            }
        }
    }

    void zero_grad() {
        for (auto& g : groups_)
            for (auto* p : g.params) p->zero_grad();
    }

    // grad_scale multiplies gradients before the update (1/accumulation_steps).
    void step(double grad_scale = 1.0) {
        ++t_;
        double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
        double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
        size_t slot = 0;
        for (auto& g : groups_) {
            R lr = static_cast<R>(g.lr);
            for (auto* p : g.params) {
                auto& m = m_[slot];
                auto& v = v_[slot];
                ++slot;
                auto& val = p->values();
                auto& grad = p->grad();
                for (size_t i = 0; i < val.size(); ++i) {
                    R gi = grad[i] * static_cast<R>(grad_scale);
                    m[i] = static_cast<R>(cfg_.beta1) * m[i] + static_cast<R>(1.0 - cfg_.beta1) * gi;
                    v[i] = static_cast<R>(cfg_.beta2) * v[i] +
                           static_cast<R>(1.0 - cfg_.beta2) * gi * gi;
                    R mhat = m[i] / static_cast<R>(bc1);
                    R vhat = v[i] / static_cast<R>(bc2);
                    val[i] -= lr * (mhat / (std::sqrt(vhat) + static_cast<R>(cfg_.eps)) +
                                    static_cast<R>(cfg_.weight_decay) * val[i]);
                }
            }
        }
    }

    long steps_taken() const { return t_; }

  private:
    std::vector<Group> groups_;
    AdamWConfig cfg_;
    std::vector<std::vector<R>> m_, v_;
    long t_ = 0;
};

}  // namespace sre
