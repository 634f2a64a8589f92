#include "flowood/distributions.hpp"

#include "flowood/errors.hpp"

#include <cmath>
#include <numbers>

namespace flowood {

namespace {
constexpr double kLn2Pi = 1.8378770664093454836;
}

StandardNormal::StandardNormal(std::int64_t dim) : dim_(dim) {
    if (dim < 1) throw ValueError("StandardNormal: dim must be positive");
}

Tensor StandardNormal::log_prob(const Tensor& z) const {
    if (z.numel() != dim_)
        throw ShapeError("log_prob: expected " + std::to_string(dim_) + " elements, got " +
                         std::to_string(z.numel()));
    Tensor flat = z.rank() == 1 ? z : reshape(z, {dim_});
    return -0.5 * static_cast<double>(dim_) * kLn2Pi - 0.5 * sum(square(flat));
}

Tensor StandardNormal::log_prob_batch(const Tensor& z) const {
    if (z.rank() < 2 || z.numel() % z.shape()[0] != 0 || z.numel() / z.shape()[0] != dim_)
        throw ShapeError("log_prob_batch: expected [N," + std::to_string(dim_) + "], got " +
                         shape_str(z.shape()));
    return -0.5 * static_cast<double>(dim_) * kLn2Pi - 0.5 * sample_sum(square(z));
}

Tensor StandardNormal::sample(std::int64_t n, std::uint64_t seed) const {
    Rng rng(seed);
    return sample(n, rng);
}

Tensor StandardNormal::sample(std::int64_t n, Rng& rng) const {
    if (n < 1) throw ValueError("sample: n must be positive");
    Tensor out({n, dim_});
    for (auto& v : out.data()) v = rng.normal();
    return out;
}

Dequantizer::Dequantizer(int levels) : levels_(levels) {
    if (levels < 2) throw ValueError("Dequantizer: levels must be at least 2");
}

DequantResult Dequantizer::dequantize(const Tensor& img, std::uint64_t seed) const {
    Rng rng(seed);
    return dequantize(img, rng);
}

DequantResult Dequantizer::dequantize(const Tensor& img, Rng& rng) const {
    const double inv = 1.0 / static_cast<double>(levels_);
    Tensor out(img.shape());
    auto src = img.data();
    auto dst = out.data();
    for (std::size_t i = 0; i < src.size(); ++i) {
        const double v = src[i];
        if (v != std::floor(v) || v < 0.0 || v > static_cast<double>(levels_ - 1))
            throw ValueError("dequantize: pixel values must be integers in [0," +
                             std::to_string(levels_ - 1) + "], got " + std::to_string(v));
        dst[i] = (v + rng.uniform()) * inv - 0.5;
    }
    return {out, correction(img.numel())};
}

double Dequantizer::correction(std::int64_t numel) const {
    return -static_cast<double>(numel) * std::log(static_cast<double>(levels_));
}

double bits_per_dim(double log_likelihood, std::int64_t h, std::int64_t w, std::int64_t c) {
    if (h < 1 || w < 1 || c < 1) throw ValueError("bits_per_dim: h, w, c must be positive");
    return -log_likelihood / (static_cast<double>(h * w * c) * std::numbers::ln2);
}

} // namespace flowood
