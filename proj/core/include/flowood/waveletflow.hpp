#pragma once

#include "flowood/bijections.hpp"
#include "flowood/distributions.hpp"
#include "flowood/haar.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace flowood {

struct WaveletFlowConfig {
    std::int64_t n_levels = 5; // image is C x 2^n x 2^n
    std::int64_t channels = 3;
    std::int64_t flows_per_level = 4; // K per detail level
    std::int64_t hidden_channels = 64;
    std::int64_t base_flow_steps = 4; // depth of the flow over I_0
    int quantization_levels = 256;
    // Optimizer-step budget per level, 0 = unlimited. The reference full-scale
    // budgets are far beyond desk scale and live in the documentation.
    std::int64_t max_steps_per_level = 0;
};

// Wavelet Flow: a Haar pyramid with one conditional flow per detail level,
// p(D_i | I_i), plus an unconditional base flow over the 1x1 low-pass I_0.
//   log p(I) = log p0(I_0) + sum_i log p(D_i | I_i) + dequant correction.
// The Haar steps are orthonormal, so they add no volume term and the
// correction is applied once at the pixel level.
//
// Detail-level chains are GLOW-style steps (actnorm -> 1x1 conv -> coupling)
// without squeeze or split; couplings mask the 3C detail channels
// channel-wise and receive I_i channel-concatenated into their conditioner.
// Levels share no parameters and are independently trainable.
class WaveletFlowModel {
public:
    WaveletFlowModel(WaveletFlowConfig cfg, Rng& rng);

    const WaveletFlowConfig& config() const { return cfg_; }
    std::int64_t n_levels() const { return cfg_.n_levels; }
    Shape image_shape() const; // {C, 2^n, 2^n}
    std::int64_t data_dim() const;

    // Number of coefficients scored by a level term; divides that level's
    // NLL for level BPD. Levels 0..n-1 are detail stacks, level n is I_0.
    std::int64_t level_coeff_count(std::int64_t level) const;

    // log p(D_level | I_level), or log p0(I_0) for level == n_levels().
    // batch is [N,C,2^n,2^n] of dequantized values; no correction term. [N]
    Tensor per_level_log_likelihood(const Tensor& batch, std::int64_t level);

    // The latent a level term scores, i.e. that level's chain output on the
    // image's pyramid. Inverse of the corresponding draw in sample().
    Tensor encode_level(const Tensor& batch, std::int64_t level);

    // Sum of all level terms plus the dequantization correction. [N]
    Tensor total_log_likelihood(const Tensor& batch);

    Tensor nll_loss(const Tensor& batch);                            // [1]
    Tensor level_nll_loss(const Tensor& batch, std::int64_t level);  // [1]

    double dequant_correction() const; // per-sample constant, in nats

    // I_0 from the base flow, then D_i | I_i per level ascending, each
    // synthesized into I_{i+1}. Latents drawn base first, then level 0..n-1,
    // row-major. Returns images in [0,1] as [n,C,2^n,2^n].
    Tensor sample(std::int64_t n, double temperature, std::uint64_t seed) const;

    // Names "base.s{i}.*" and "level{l}.s{i}.*".
    void append_params(std::vector<Param>& out);
    // level n_levels() selects the base flow.
    void append_level_params(std::int64_t level, std::vector<Param>& out);

    bool actnorm_initialized() const;
    void set_actnorm_initialized(bool v);
    // Per-chain flags, so a checkpoint of a partially trained model restores
    // exactly. level n_levels() selects the base flow.
    bool level_actnorm_initialized(std::int64_t level) const;
    void set_level_actnorm_initialized(std::int64_t level, bool v);

    std::string first_nonfinite_layer(const Tensor& batch);

private:
    void check_batch(const Tensor& batch) const;
    Tensor level_term(const HaarPyramid& pyr, std::int64_t level, std::int64_t n);

    WaveletFlowConfig cfg_;
    FlowChain base_;
    std::vector<FlowChain> level_flows_;
};

} // namespace flowood
