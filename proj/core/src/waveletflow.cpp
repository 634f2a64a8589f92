#include "flowood/waveletflow.hpp"

#include "flowood/errors.hpp"

#include <cmath>
#include <utility>

namespace flowood {

namespace {

// Two-block channel partition alternating with layer parity. Unlike the
// public channel-wise mask this tolerates odd counts (3C details with C
// odd), giving the first block floor(c/2) channels.
MaskPartition half_partition(std::int64_t channels, int layer) {
    MaskPartition p;
    p.spatial = false;
    const std::int64_t half = channels / 2;
    std::vector<std::int64_t> first, second;
    for (std::int64_t c = 0; c < channels; ++c)
        (c < half ? first : second).push_back(c);
    if (layer % 2 == 0) {
        p.a = std::move(first);
        p.b = std::move(second);
    } else {
        p.a = std::move(second);
        p.b = std::move(first);
    }
    return p;
}

// actnorm -> 1x1 conv -> coupling, repeated; couplings dropped when the
// tensor has a single channel (nothing to condition on).
FlowChain make_level_chain(std::int64_t channels, std::int64_t side, std::int64_t context_channels,
                           std::int64_t steps, std::int64_t hidden, Rng& rng) {
    FlowChain chain;
    const Shape chw = {channels, side, side};
    for (std::int64_t k = 0; k < steps; ++k) {
        chain.push(std::make_unique<ActNorm>(channels));
        chain.push(std::make_unique<InvConv1x1>(channels, rng));
        if (channels >= 2)
            chain.push(std::make_unique<AffineCoupling>(half_partition(channels, static_cast<int>(k)),
                                                        chw, context_channels, hidden, rng));
    }
    return chain;
}

bool all_finite(const Tensor& t) {
    for (double v : t.data())
        if (!std::isfinite(v)) return false;
    return true;
}

} // namespace

WaveletFlowModel::WaveletFlowModel(WaveletFlowConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    if (cfg_.n_levels < 1) throw ValueError("waveletflow: n_levels must be >= 1");
    if (cfg_.channels < 1) throw ValueError("waveletflow: channels must be >= 1");
    if (cfg_.flows_per_level < 1 || cfg_.base_flow_steps < 1)
        throw ValueError("waveletflow: flow depths must be >= 1");
    if (cfg_.hidden_channels < 1) throw ValueError("waveletflow: hidden_channels must be >= 1");
    if (cfg_.quantization_levels < 2) throw ValueError("waveletflow: quantization_levels must be >= 2");

    base_ = make_level_chain(cfg_.channels, 1, 0, cfg_.base_flow_steps, cfg_.hidden_channels, rng);
    std::int64_t side = 1;
    for (std::int64_t i = 0; i < cfg_.n_levels; ++i) {
        level_flows_.push_back(make_level_chain(3 * cfg_.channels, side, cfg_.channels,
                                                cfg_.flows_per_level, cfg_.hidden_channels, rng));
        side *= 2;
    }
}

Shape WaveletFlowModel::image_shape() const {
    std::int64_t side = 1;
    for (std::int64_t i = 0; i < cfg_.n_levels; ++i) side *= 2;
    return {cfg_.channels, side, side};
}

std::int64_t WaveletFlowModel::data_dim() const { return shape_numel(image_shape()); }

std::int64_t WaveletFlowModel::level_coeff_count(std::int64_t level) const {
    if (level < 0 || level > cfg_.n_levels) throw ValueError("waveletflow: level out of range");
    if (level == cfg_.n_levels) return cfg_.channels;
    std::int64_t side = 1;
    for (std::int64_t i = 0; i < level; ++i) side *= 2;
    return 3 * cfg_.channels * side * side;
}

void WaveletFlowModel::check_batch(const Tensor& batch) const {
    const Shape want = image_shape();
    if (batch.rank() != 4 || batch.shape()[1] != want[0] || batch.shape()[2] != want[1] ||
        batch.shape()[3] != want[2])
        throw ShapeError("waveletflow: batch shape " + shape_str(batch.shape()) +
                         " does not match image shape " + shape_str(want));
}

Tensor WaveletFlowModel::level_term(const HaarPyramid& pyr, std::int64_t level, std::int64_t n) {
    if (level == cfg_.n_levels) {
        FlowResult r = base_.forward(pyr.lows[0]);
        return StandardNormal(cfg_.channels).log_prob_batch(reshape(r.y, {n, cfg_.channels})) + r.logdet;
    }
    const Tensor& context = pyr.lows[static_cast<std::size_t>(level)];
    FlowResult r = level_flows_[static_cast<std::size_t>(level)].forward(
        pyr.details[static_cast<std::size_t>(level)], &context);
    const std::int64_t d = level_coeff_count(level);
    return StandardNormal(d).log_prob_batch(reshape(r.y, {n, d})) + r.logdet;
}

Tensor WaveletFlowModel::per_level_log_likelihood(const Tensor& batch, std::int64_t level) {
    check_batch(batch);
    if (level < 0 || level > cfg_.n_levels) throw ValueError("waveletflow: level out of range");
    HaarPyramid pyr = build_pyramid(batch);
    return level_term(pyr, level, batch.shape()[0]);
}

Tensor WaveletFlowModel::encode_level(const Tensor& batch, std::int64_t level) {
    check_batch(batch);
    if (level < 0 || level > cfg_.n_levels) throw ValueError("waveletflow: level out of range");
    HaarPyramid pyr = build_pyramid(batch);
    if (level == cfg_.n_levels) return base_.forward(pyr.lows[0]).y;
    const Tensor& context = pyr.lows[static_cast<std::size_t>(level)];
    return level_flows_[static_cast<std::size_t>(level)]
        .forward(pyr.details[static_cast<std::size_t>(level)], &context)
        .y;
}

Tensor WaveletFlowModel::total_log_likelihood(const Tensor& batch) {
    check_batch(batch);
    const std::int64_t n = batch.shape()[0];
    HaarPyramid pyr = build_pyramid(batch);
    Tensor total = level_term(pyr, 0, n);
    for (std::int64_t level = 1; level <= cfg_.n_levels; ++level)
        total = total + level_term(pyr, level, n);
    return total + dequant_correction();
}

Tensor WaveletFlowModel::nll_loss(const Tensor& batch) {
    if (batch.rank() != 4 || batch.shape()[0] < 1)
        throw ValueError("waveletflow: nll_loss needs a nonempty batch");
    return 0.0 - mean(total_log_likelihood(batch));
}

Tensor WaveletFlowModel::level_nll_loss(const Tensor& batch, std::int64_t level) {
    if (batch.rank() != 4 || batch.shape()[0] < 1)
        throw ValueError("waveletflow: level_nll_loss needs a nonempty batch");
    return 0.0 - mean(per_level_log_likelihood(batch, level));
}

double WaveletFlowModel::dequant_correction() const {
    return -static_cast<double>(data_dim()) * std::log(static_cast<double>(cfg_.quantization_levels));
}

Tensor WaveletFlowModel::sample(std::int64_t n, double temperature, std::uint64_t seed) const {
    if (n < 1) throw ValueError("waveletflow: sample count must be positive");
    if (!(temperature > 0.0)) throw ValueError("waveletflow: temperature must be positive");
    NoGradGuard ng;
    Rng rng(seed);
    auto draw = [&](Shape shape) {
        Tensor z(std::move(shape));
        for (auto& v : z.data()) v = rng.normal() * temperature;
        return z;
    };
    Tensor low = base_.inverse(draw({n, cfg_.channels, 1, 1}));
    std::int64_t side = 1;
    for (std::int64_t i = 0; i < cfg_.n_levels; ++i) {
        Tensor z = draw({n, 3 * cfg_.channels, side, side});
        Tensor detail = level_flows_[static_cast<std::size_t>(i)].inverse(z, &low);
        low = haar_synthesize(low, detail);
        side *= 2;
    }
    return low + 0.5;
}

void WaveletFlowModel::append_params(std::vector<Param>& out) {
    base_.append_params("base.", out);
    for (std::size_t i = 0; i < level_flows_.size(); ++i)
        level_flows_[i].append_params("level" + std::to_string(i) + ".", out);
}

void WaveletFlowModel::append_level_params(std::int64_t level, std::vector<Param>& out) {
    if (level < 0 || level > cfg_.n_levels) throw ValueError("waveletflow: level out of range");
    if (level == cfg_.n_levels)
        base_.append_params("base.", out);
    else
        level_flows_[static_cast<std::size_t>(level)].append_params("level" + std::to_string(level) + ".",
                                                                    out);
}

bool WaveletFlowModel::actnorm_initialized() const {
    if (!base_.actnorm_initialized()) return false;
    for (const auto& chain : level_flows_)
        if (!chain.actnorm_initialized()) return false;
    return true;
}

void WaveletFlowModel::set_actnorm_initialized(bool v) {
    base_.set_actnorm_initialized(v);
    for (auto& chain : level_flows_) chain.set_actnorm_initialized(v);
}

bool WaveletFlowModel::level_actnorm_initialized(std::int64_t level) const {
    if (level < 0 || level > cfg_.n_levels) throw ValueError("waveletflow: level out of range");
    if (level == cfg_.n_levels) return base_.actnorm_initialized();
    return level_flows_[static_cast<std::size_t>(level)].actnorm_initialized();
}

void WaveletFlowModel::set_level_actnorm_initialized(std::int64_t level, bool v) {
    if (level < 0 || level > cfg_.n_levels) throw ValueError("waveletflow: level out of range");
    if (level == cfg_.n_levels)
        base_.set_actnorm_initialized(v);
    else
        level_flows_[static_cast<std::size_t>(level)].set_actnorm_initialized(v);
}

std::string WaveletFlowModel::first_nonfinite_layer(const Tensor& batch) {
    check_batch(batch);
    NoGradGuard ng;
    if (!all_finite(batch)) return "input";
    HaarPyramid pyr = build_pyramid(batch);
    {
        Tensor cur = pyr.lows[0];
        for (std::size_t i = 0; i < base_.size(); ++i) {
            FlowResult r = base_.step(i).forward(cur);
            if (!all_finite(r.y) || !all_finite(r.logdet))
                return "base.s" + std::to_string(i) + "." + base_.step(i).kind();
            cur = r.y;
        }
    }
    for (std::size_t l = 0; l < level_flows_.size(); ++l) {
        Tensor cur = pyr.details[l];
        const Tensor& ctx = pyr.lows[l];
        for (std::size_t i = 0; i < level_flows_[l].size(); ++i) {
            FlowResult r = level_flows_[l].step(i).forward(cur, &ctx);
            if (!all_finite(r.y) || !all_finite(r.logdet))
                return "level" + std::to_string(l) + ".s" + std::to_string(i) + "." +
                       level_flows_[l].step(i).kind();
            cur = r.y;
        }
    }
    return "";
}

} // namespace flowood
