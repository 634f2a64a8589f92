#pragma once

#include "flowood/bijections.hpp"
#include "flowood/distributions.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace flowood {

struct GlowConfig {
    std::int64_t levels = 3;           // L
    std::int64_t flows_per_level = 32; // K
    std::int64_t hidden_channels = 256;
    MaskScheme mask_scheme = MaskScheme::channel_wise;
    int cycle_iterations = 0; // cycle scheme only
    Shape image_shape;        // {C, H, W}; H and W divisible by 2^L
    int quantization_levels = 256;
};

// Multi-scale GLOW: L levels of K flow steps (actnorm -> 1x1 conv ->
// coupling) with a squeeze per level and a channel split between levels.
// Factored latents are scored against the standard normal at the point of
// splitting; the last level keeps its full tensor.
//
// Checkerboard masking runs its K steps at the incoming resolution and
// squeezes afterwards, so the spatial masks always see at least a 2x2 grid.
// Channel-wise and cycle masking squeeze first, which also guarantees an
// even channel count for the couplings.
class GlowModel {
public:
    GlowModel(GlowConfig cfg, Rng& rng);

    const GlowConfig& config() const { return cfg_; }
    std::int64_t data_dim() const; // C*H*W

    // Per-sample latent shapes in encode order: one factored tensor per
    // split, then the final level output. Their numels sum to data_dim().
    const std::vector<Shape>& latent_shapes() const { return latent_shapes_; }

    struct Encoded {
        std::vector<Tensor> latents;      // encode order, see latent_shapes()
        Tensor logdet;                    // [N] total forward log|det|
        std::vector<Tensor> step_logdets; // per flow step, [N] each
    };

    // batch is [N,C,H,W] of dequantized values. Records gradients when grad
    // mode is on (which also triggers actnorm init on the first batch).
    Encoded encode(const Tensor& batch);
    Tensor decode(const std::vector<Tensor>& latents) const;

    // log p(x) per sample, dequantization correction included. [N]
    Tensor log_likelihood(const Tensor& batch);
    // mean over the batch of -log_likelihood, in nats. [1]
    Tensor nll_loss(const Tensor& batch);

    // Draws z ~ N(0, temperature^2) and inverts the chain; returns images in
    // [0,1] as [n,C,H,W]. Latents are drawn in encode order, row-major.
    Tensor sample(std::int64_t n, double temperature, std::uint64_t seed) const;

    void append_params(std::vector<Param>& out); // names "level{l}.s{i}.{kind}.{param}"
    bool actnorm_initialized() const;
    void set_actnorm_initialized(bool v);

    // Name of the first flow step producing a non-finite output on this
    // batch, or empty when the whole pass is clean. Used for NaN diagnostics.
    std::string first_nonfinite_layer(const Tensor& batch);

private:
    struct Level {
        FlowChain steps;
        bool squeeze_first = true;
        bool split_after = false;
    };

    void check_batch(const Tensor& batch) const;

    GlowConfig cfg_;
    std::vector<Level> levels_;
    std::vector<Shape> latent_shapes_;
};

} // namespace flowood
