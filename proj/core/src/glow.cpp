#include "flowood/glow.hpp"

#include "flowood/errors.hpp"

#include <cmath>
#include <utility>

namespace flowood {

namespace {

bool divisible_by_pow2(std::int64_t n, std::int64_t k) {
    for (std::int64_t i = 0; i < k; ++i) {
        if (n % 2 != 0) return false;
        n /= 2;
    }
    return n >= 1;
}

Tensor zeros_batch(std::int64_t n) { return repeat_scalar(Tensor::scalar(0.0), n); }

bool all_finite(const Tensor& t) {
    for (double v : t.data())
        if (!std::isfinite(v)) return false;
    return true;
}

} // namespace

GlowModel::GlowModel(GlowConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    if (cfg_.levels < 1) throw ValueError("glow: levels must be >= 1");
    if (cfg_.flows_per_level < 1) throw ValueError("glow: flows_per_level must be >= 1");
    if (cfg_.hidden_channels < 1) throw ValueError("glow: hidden_channels must be >= 1");
    if (cfg_.image_shape.size() != 3)
        throw ShapeError("glow: image_shape must be {C,H,W}, got " + shape_str(cfg_.image_shape));
    if (cfg_.quantization_levels < 2) throw ValueError("glow: quantization_levels must be >= 2");

    const std::int64_t C = cfg_.image_shape[0];
    const std::int64_t H = cfg_.image_shape[1];
    const std::int64_t W = cfg_.image_shape[2];
    if (!divisible_by_pow2(H, cfg_.levels) || !divisible_by_pow2(W, cfg_.levels))
        throw ShapeError("glow: spatial extents " + std::to_string(H) + "x" + std::to_string(W) +
                         " not divisible by 2^" + std::to_string(cfg_.levels));

    const bool checker = cfg_.mask_scheme == MaskScheme::checkerboard;
    Shape cur = {C, H, W};
    for (std::int64_t l = 0; l < cfg_.levels; ++l) {
        Level level;
        level.squeeze_first = !checker;
        level.split_after = l + 1 < cfg_.levels;

        const Shape flow_shape = checker ? cur : Shape{cur[0] * 4, cur[1] / 2, cur[2] / 2};
        for (std::int64_t k = 0; k < cfg_.flows_per_level; ++k) {
            level.steps.push(std::make_unique<ActNorm>(flow_shape[0]));
            level.steps.push(std::make_unique<InvConv1x1>(flow_shape[0], rng));
            MaskPartition part =
                make_mask(cfg_.mask_scheme, static_cast<int>(k), flow_shape, cfg_.cycle_iterations);
            level.steps.push(std::make_unique<AffineCoupling>(std::move(part), flow_shape, 0,
                                                              cfg_.hidden_channels, rng));
        }
        levels_.push_back(std::move(level));

        const Shape after = {cur[0] * 4, cur[1] / 2, cur[2] / 2}; // post-squeeze either way
        if (l + 1 < cfg_.levels) {
            latent_shapes_.push_back({after[0] / 2, after[1], after[2]});
            cur = {after[0] / 2, after[1], after[2]};
        } else {
            latent_shapes_.push_back(after);
        }
    }
}

std::int64_t GlowModel::data_dim() const { return shape_numel(cfg_.image_shape); }

void GlowModel::check_batch(const Tensor& batch) const {
    if (batch.rank() != 4 || batch.shape()[1] != cfg_.image_shape[0] ||
        batch.shape()[2] != cfg_.image_shape[1] || batch.shape()[3] != cfg_.image_shape[2])
        throw ShapeError("glow: batch shape " + shape_str(batch.shape()) + " does not match image shape " +
                         shape_str(cfg_.image_shape));
}

GlowModel::Encoded GlowModel::encode(const Tensor& batch) {
    check_batch(batch);
    const std::int64_t n = batch.shape()[0];

    Encoded out;
    out.logdet = zeros_batch(n);
    Tensor cur = batch;
    for (auto& level : levels_) {
        if (level.squeeze_first) cur = squeeze2x2(cur);
        for (std::size_t i = 0; i < level.steps.size(); ++i) {
            FlowResult r = level.steps.step(i).forward(cur);
            out.logdet = out.logdet + r.logdet;
            out.step_logdets.push_back(r.logdet);
            cur = r.y;
        }
        if (!level.squeeze_first) cur = squeeze2x2(cur);
        if (level.split_after) {
            auto [kept, factored] = split_channels(cur);
            out.latents.push_back(factored);
            cur = kept;
        }
    }
    out.latents.push_back(cur);
    return out;
}

Tensor GlowModel::decode(const std::vector<Tensor>& latents) const {
    if (latents.size() != latent_shapes_.size())
        throw ShapeError("glow: expected " + std::to_string(latent_shapes_.size()) +
                         " latent tensors, got " + std::to_string(latents.size()));
    NoGradGuard ng;
    Tensor cur = latents.back();
    for (std::size_t l = levels_.size(); l-- > 0;) {
        const Level& level = levels_[l];
        if (level.split_after) cur = unsplit_channels(cur, latents[l]);
        if (level.squeeze_first) {
            cur = level.steps.inverse(cur);
            cur = unsqueeze2x2(cur);
        } else {
            cur = unsqueeze2x2(cur);
            cur = level.steps.inverse(cur);
        }
    }
    return cur;
}

Tensor GlowModel::log_likelihood(const Tensor& batch) {
    const std::int64_t n = batch.shape().empty() ? 0 : batch.shape()[0];
    Encoded enc = encode(batch);
    Tensor lp = zeros_batch(n);
    for (const Tensor& z : enc.latents) {
        const std::int64_t d = z.numel() / n;
        lp = lp + StandardNormal(d).log_prob_batch(reshape(z, {n, d}));
    }
    const double correction =
        -static_cast<double>(data_dim()) * std::log(static_cast<double>(cfg_.quantization_levels));
    return lp + enc.logdet + correction;
}

Tensor GlowModel::nll_loss(const Tensor& batch) {
    if (batch.rank() != 4 || batch.shape()[0] < 1) throw ValueError("glow: nll_loss needs a nonempty batch");
    return 0.0 - mean(log_likelihood(batch));
}

Tensor GlowModel::sample(std::int64_t n, double temperature, std::uint64_t seed) const {
    if (n < 1) throw ValueError("glow: sample count must be positive");
    if (!(temperature > 0.0)) throw ValueError("glow: temperature must be positive");
    NoGradGuard ng;
    Rng rng(seed);
    std::vector<Tensor> latents;
    for (const Shape& s : latent_shapes_) {
        Tensor z({n, s[0], s[1], s[2]});
        for (auto& v : z.data()) v = rng.normal() * temperature;
        latents.push_back(std::move(z));
    }
    return decode(latents) + 0.5;
}

void GlowModel::append_params(std::vector<Param>& out) {
    for (std::size_t l = 0; l < levels_.size(); ++l)
        levels_[l].steps.append_params("level" + std::to_string(l) + ".", out);
}

bool GlowModel::actnorm_initialized() const {
    for (const auto& level : levels_)
        if (!level.steps.actnorm_initialized()) return false;
    return true;
}

void GlowModel::set_actnorm_initialized(bool v) {
    for (auto& level : levels_) level.steps.set_actnorm_initialized(v);
}

std::string GlowModel::first_nonfinite_layer(const Tensor& batch) {
    check_batch(batch);
    NoGradGuard ng;
    if (!all_finite(batch)) return "input";
    Tensor cur = batch;
    for (std::size_t l = 0; l < levels_.size(); ++l) {
        Level& level = levels_[l];
        if (level.squeeze_first) cur = squeeze2x2(cur);
        for (std::size_t i = 0; i < level.steps.size(); ++i) {
            FlowResult r = level.steps.step(i).forward(cur);
            if (!all_finite(r.y) || !all_finite(r.logdet))
                return "level" + std::to_string(l) + ".s" + std::to_string(i) + "." +
                       level.steps.step(i).kind();
            cur = r.y;
        }
        if (!level.squeeze_first) cur = squeeze2x2(cur);
        if (level.split_after) cur = split_channels(cur).first;
    }
    return "";
}

} // namespace flowood
