#pragma once

#include <cstdint>
#include <vector>

#include "qdpd/graph.hpp"

namespace qdpd {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 1.0;  // global-norm clip applied before moment updates; 0 disables
};

// Bias-corrected Adam over a fixed parameter list. step() consumes the
// gradients currently held by the params and zeroes them afterwards.
class Adam {
  public:
    Adam(std::vector<Param*> params, AdamConfig cfg);

    void step();

    int64_t step_count() const { return t_; }
    double last_grad_norm() const { return last_norm_; }
    double last_applied_norm() const { return last_applied_norm_; }
    const AdamConfig& config() const { return cfg_; }

  private:
    std::vector<Param*> params_;
    std::vector<Tensor> m_, v_;
    AdamConfig cfg_;
    int64_t t_ = 0;
    double last_norm_ = 0.0;
    double last_applied_norm_ = 0.0;
};

}  // namespace qdpd
