#include "flowood/optim.hpp"

#include "flowood/errors.hpp"

#include <cmath>
#include <utility>

namespace flowood {

Adam::Adam(std::vector<Param> params, AdamConfig cfg) : cfg_(cfg), params_(std::move(params)) {
    if (!(cfg_.learning_rate > 0.0)) throw ValueError("adam: learning rate must be positive");
    if (cfg_.beta1 < 0.0 || cfg_.beta1 >= 1.0 || cfg_.beta2 < 0.0 || cfg_.beta2 >= 1.0)
        throw ValueError("adam: betas must lie in [0, 1)");
    if (cfg_.clip_norm < 0.0) throw ValueError("adam: clip_norm must be >= 0");
    if (cfg_.warmup_steps < 0) throw ValueError("adam: warmup_steps must be >= 0");
    for (const auto& p : params_) {
        m_.emplace_back(p.tensor.shape());
        v_.emplace_back(p.tensor.shape());
    }
}

void Adam::set_step_count(std::int64_t t) {
    if (t < 0) throw ValueError("adam: step count must be >= 0");
    t_ = t;
}

void Adam::zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
}

void Adam::step() {
    double scale = 1.0;
    if (cfg_.clip_norm > 0.0) {
        double total_sq = 0.0;
        for (const auto& p : params_) {
            if (!p.tensor.has_grad()) continue;
            for (double g : p.tensor.grad_data()) total_sq += g * g;
        }
        const double norm = std::sqrt(total_sq);
        if (norm > cfg_.clip_norm) scale = cfg_.clip_norm / norm;
    }

    t_ += 1;
    double lr = cfg_.learning_rate;
    if (t_ < cfg_.warmup_steps) lr *= static_cast<double>(t_) / static_cast<double>(cfg_.warmup_steps);
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto data = params_[i].tensor.data();
        auto m = m_[i].data();
        auto v = v_[i].data();
        const bool has = params_[i].tensor.has_grad();
        auto grad = has ? params_[i].tensor.grad_data() : std::span<const double>{};
        for (std::size_t j = 0; j < data.size(); ++j) {
            const double g = has ? grad[j] * scale : 0.0;
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
            v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
            const double m_hat = m[j] / bc1;
            const double v_hat = v[j] / bc2;
            const double decay = cfg_.weight_decay * data[j];
            data[j] -= lr * (m_hat / (std::sqrt(v_hat) + cfg_.eps) + decay);
        }
    }
}

void Adam::append_state(std::vector<Param>& out) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
        out.push_back({"adam.m." + params_[i].name, m_[i]});
        out.push_back({"adam.v." + params_[i].name, v_[i]});
    }
}

} // namespace flowood
