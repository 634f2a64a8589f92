#pragma once

#include "flowood/bijections.hpp"

#include <cstdint>
#include <vector>

namespace flowood {

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0; // decoupled: p -= lr * wd * p
    double clip_norm = 50.0;   // global gradient-norm clip; 0 disables
    // Linear lr ramp over the first N steps; 0 disables. Deep coupling stacks
    // take a coherent first Adam step out of their zero init, so the early
    // scale terms compound unless the step size starts small.
    std::int64_t warmup_steps = 0;
};

// Adam with decoupled weight decay over a fixed parameter list. step() reads
// the gradients currently accumulated on the parameters; a parameter without
// a gradient this step contributes zero (its moments still decay).
class Adam {
public:
    Adam(std::vector<Param> params, AdamConfig cfg);

    const AdamConfig& config() const { return cfg_; }
    std::int64_t step_count() const { return t_; }
    void set_step_count(std::int64_t t); // checkpoint restore

    void zero_grad();
    void step();

    // Moment tensors as "adam.m.{name}" / "adam.v.{name}" for checkpointing.
    // The returned handles alias live state; writing into them restores it.
    void append_state(std::vector<Param>& out);

private:
    AdamConfig cfg_;
    std::vector<Param> params_;
    std::vector<Tensor> m_, v_;
    std::int64_t t_ = 0;
};

} // namespace flowood
