#pragma once

#include "flowood/random.hpp"
#include "flowood/tensor.hpp"

#include <cstdint>

namespace flowood {

// Isotropic unit Gaussian over R^D, the base density p0(z0) of every flow.
class StandardNormal {
public:
    explicit StandardNormal(std::int64_t dim);

    std::int64_t dim() const { return dim_; }

    // log p0(z) = -D/2 ln(2pi) - ||z||^2 / 2. Differentiable in z.
    Tensor log_prob(const Tensor& z) const;        // numel D -> [1]
    Tensor log_prob_batch(const Tensor& z) const;  // [N, D] -> [N]

    Tensor sample(std::int64_t n, std::uint64_t seed) const; // [n, D]
    Tensor sample(std::int64_t n, Rng& rng) const;

private:
    std::int64_t dim_;
};

struct DequantResult {
    Tensor values;            // same shape as input, values in [-0.5, 0.5)
    double logdet_correction; // -numel * ln(levels), added to model log-likelihood
};

// Uniform dequantization of integer pixels: (img + u)/levels - 0.5, u ~ U[0,1).
// The correction makes continuous densities comparable to discrete likelihoods.
class Dequantizer {
public:
    explicit Dequantizer(int levels = 256);

    int levels() const { return levels_; }

    DequantResult dequantize(const Tensor& img, std::uint64_t seed) const;
    DequantResult dequantize(const Tensor& img, Rng& rng) const;

    double correction(std::int64_t numel) const;

private:
    int levels_;
};

// BPD = -log_likelihood / (h*w*c*ln 2); lower is a better fit.
double bits_per_dim(double log_likelihood, std::int64_t h, std::int64_t w, std::int64_t c);

} // namespace flowood
