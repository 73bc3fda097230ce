#pragma once

#include <cmath>
#include <vector>

#include "mmpt/nn.hpp"

namespace mmpt {

// Cosine decay from lr_max at t=0 with a hard floor:
//   lr(t) = max(lr_max * 0.5 * (1 + cos(pi * t / total)), floor)
inline double cosine_lr(double lr_max, std::size_t t, std::size_t total, double floor = 1e-6) {
    if (total == 0) return std::max(lr_max, floor);
    const double frac = std::min(static_cast<double>(t) / static_cast<double>(total), 1.0);
    return std::max(lr_max * 0.5 * (1.0 + std::cos(M_PI * frac)), floor);
}

// AdamW with decoupled weight decay. Moment slots align with the parameter
// registration order and serialize into checkpoints.
class AdamW {
  public:
    AdamW() = default;
    AdamW(double beta1, double beta2, double eps, double weight_decay)
        : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

    void init(const std::vector<Param*>& params) {
        m_.clear();
        v_.clear();
        for (Param* p : params) {
            m_.push_back(Tensor::zeros(p->value.shape));
            v_.push_back(Tensor::zeros(p->value.shape));
        }
        t_ = 0;
    }

    void step(const std::vector<Param*>& params, double lr_t) {
        if (params.size() != m_.size()) throw ShapeError("AdamW::step: parameter list changed");
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            Param& p = *params[i];
            if (p.grad.data.size() != p.value.data.size())
                throw ShapeError("AdamW::step: grad shape mismatch for " + p.name);
            double* m = m_[i].data.data();
            double* v = v_[i].data.data();
            double* w = p.value.data.data();
            const double* g = p.grad.data.data();
            for (std::size_t j = 0; j < p.value.data.size(); ++j) {
                m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
                v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
                const double mhat = m[j] / bc1;
                const double vhat = v[j] / bc2;
                w[j] -= lr_t * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * w[j]);
            }
        }
    }

    std::size_t steps_taken() const { return t_; }
    void set_steps_taken(std::size_t t) { t_ = t; }
    std::size_t slots() const { return m_.size(); }
    Tensor& moment1(std::size_t i) { return m_[i]; }
    Tensor& moment2(std::size_t i) { return v_[i]; }
    const Tensor& moment1(std::size_t i) const { return m_[i]; }
    const Tensor& moment2(std::size_t i) const { return v_[i]; }

    double beta1() const { return beta1_; }
    double beta2() const { return beta2_; }
    double eps() const { return eps_; }
    double weight_decay() const { return weight_decay_; }

  private:
    double beta1_ = 0.9;
    double beta2_ = 0.999;
    double eps_ = 1e-8;
    double weight_decay_ = 0.05;
    std::vector<Tensor> m_, v_;
    std::size_t t_ = 0;
};

}  // namespace mmpt
