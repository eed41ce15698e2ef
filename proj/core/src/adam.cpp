#include "qdpd/adam.hpp"

#include <cmath>

#include "qdpd/errors.hpp"

namespace qdpd {

Adam::Adam(std::vector<Param*> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (Param* p : params_) {
        m_.emplace_back(p->value.shape);
        v_.emplace_back(p->value.shape);
    }
}

void Adam::step() {
    double sq = 0.0;
    for (Param* p : params_) {
        for (float g : p->grad.data) {
            if (!std::isfinite(g))
                throw TrainingError("non-finite gradient in parameter '" + p->name + "'");
            sq += static_cast<double>(g) * g;
        }
    }
    last_norm_ = std::sqrt(sq);
    double scale = 1.0;
    if (cfg_.clip_norm > 0.0 && last_norm_ > cfg_.clip_norm) scale = cfg_.clip_norm / last_norm_;
    last_applied_norm_ = last_norm_ * scale;

    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t pi = 0; pi < params_.size(); ++pi) {
        Param& p = *params_[pi];
        Tensor& m = m_[pi];
        Tensor& v = v_[pi];
        for (size_t i = 0; i < p.value.data.size(); ++i) {
            double g = static_cast<double>(p.grad.data[i]) * scale;
            double mi = cfg_.beta1 * m.data[i] + (1.0 - cfg_.beta1) * g;
            double vi = cfg_.beta2 * v.data[i] + (1.0 - cfg_.beta2) * g * g;
            m.data[i] = static_cast<float>(mi);
            v.data[i] = static_cast<float>(vi);
            double update = cfg_.lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg_.eps);
            p.value.data[i] = static_cast<float>(p.value.data[i] - update);
        }
        p.zero_grad();
    }
}

}  // namespace qdpd
