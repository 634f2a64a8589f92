#pragma once

#include "flowood/random.hpp"
#include "flowood/tensor.hpp"

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace flowood {

struct Param {
    std::string name;
    Tensor tensor;
};

// Result of the normalizing direction: y = f(x) plus the per-sample
// log|det df/dx| as a [N] tensor on the same graph as y.
struct FlowResult {
    Tensor y;
    Tensor logdet;
};

// Invertible transform with exact log-Jacobian-determinant. forward runs in
// the normalizing (data -> latent) direction and may record gradients;
// inverse is a value-space computation used for sampling. context carries
// conditioning channels into couplings and is ignored elsewhere.
class Bijection {
public:
    virtual ~Bijection() = default;

    virtual const char* kind() const = 0;
    virtual FlowResult forward(const Tensor& x, const Tensor* context = nullptr) = 0;
    virtual Tensor inverse(const Tensor& y, const Tensor* context = nullptr) const = 0;
    virtual void append_params(const std::string& prefix, std::vector<Param>& out) {}

    // Data-dependent state; only actnorm overrides these.
    virtual bool actnorm_initialized() const { return true; }
    virtual void set_actnorm_initialized(bool) {}
};

// y = a*x + b applied per element; logdet = numel_per_sample * ln|a|.
class ElementwiseAffine : public Bijection {
public:
    ElementwiseAffine(double a, double b);

    const char* kind() const override { return "elementwise"; }
    FlowResult forward(const Tensor& x, const Tensor* context = nullptr) override;
    Tensor inverse(const Tensor& y, const Tensor* context = nullptr) const override;
    void append_params(const std::string& prefix, std::vector<Param>& out) override;

private:
    Tensor a_, b_;
};

// y = Ax + b with A = P * L * U: P a fixed permutation, L unit lower
// triangular, U upper triangular with diagonal sign fixed and log-magnitude
// learned. The parametrization keeps A invertible by construction.
class LinearLU : public Bijection {
public:
    explicit LinearLU(std::int64_t dim);
    LinearLU(std::int64_t dim, std::vector<std::int64_t> perm, std::vector<double> diag_sign);

    const char* kind() const override { return "linear_lu"; }
    FlowResult forward(const Tensor& x, const Tensor* context = nullptr) override;
    Tensor inverse(const Tensor& y, const Tensor* context = nullptr) const override;
    void append_params(const std::string& prefix, std::vector<Param>& out) override;

    Tensor matrix() const; // dense A, graph-traced through the parameters

private:
    std::int64_t dim_;
    std::vector<std::int64_t> perm_;
    std::vector<double> diag_sign_;
    Tensor lower_, upper_, log_diag_, bias_;
};

// y = x + u_hat * tanh(w^T x + b). u is projected onto the half-space
// w^T u_hat >= -1 + eps only when the raw value violates it, so admissible
// parameters pass through untouched.
class Planar : public Bijection {
public:
    Planar(std::int64_t dim, Rng& rng); // small random init
    Planar(std::vector<double> u, std::vector<double> w, double b);

    const char* kind() const override { return "planar"; }
    FlowResult forward(const Tensor& x, const Tensor* context = nullptr) override;
    Tensor inverse(const Tensor& y, const Tensor* context = nullptr) const override;
    void append_params(const std::string& prefix, std::vector<Param>& out) override;

private:
    Tensor u_hat() const;
    std::int64_t dim_;
    Tensor u_, w_, b_;
};

// y = x + beta/(alpha + r) * (x - x0), r = ||x - x0||. Stored as
// alpha = exp(alpha_raw) and beta = -alpha + softplus(beta_raw), which keeps
// alpha > 0 and beta > -alpha (the invertibility condition).
class Radial : public Bijection {
public:
    Radial(std::int64_t dim, Rng& rng);
    Radial(std::vector<double> x0, double alpha, double beta);

    const char* kind() const override { return "radial"; }
    FlowResult forward(const Tensor& x, const Tensor* context = nullptr) override;
    Tensor inverse(const Tensor& y, const Tensor* context = nullptr) const override;
    void append_params(const std::string& prefix, std::vector<Param>& out) override;

private:
    std::int64_t dim_;
    Tensor x0_, alpha_raw_, beta_raw_;
};

// Per-channel affine y = s*x + b with s = exp(logs). The first forward under
// gradient recording initializes s = 1/std_c, b = -mean_c/std_c from that
// batch; afterwards the parameters are free.
class ActNorm : public Bijection {
public:
    explicit ActNorm(std::int64_t channels);

    const char* kind() const override { return "actnorm"; }
    FlowResult forward(const Tensor& x, const Tensor* context = nullptr) override;
    Tensor inverse(const Tensor& y, const Tensor* context = nullptr) const override;
    void append_params(const std::string& prefix, std::vector<Param>& out) override;

    bool actnorm_initialized() const override { return initialized_; }
    void set_actnorm_initialized(bool v) override { initialized_ = v; }

private:
    std::int64_t channels_;
    Tensor logs_, bias_;
    bool initialized_ = false;
};

// Per-pixel channel mixing y = Wx, W c-by-c in the same LU form as LinearLU.
// The permutation is drawn once at construction and never learned.
class InvConv1x1 : public Bijection {
public:
    explicit InvConv1x1(std::int64_t channels);     // identity permutation
    InvConv1x1(std::int64_t channels, Rng& rng);    // random fixed permutation

    const char* kind() const override { return "inv_conv1x1"; }
    FlowResult forward(const Tensor& x, const Tensor* context = nullptr) override;
    Tensor inverse(const Tensor& y, const Tensor* context = nullptr) const override;
    void append_params(const std::string& prefix, std::vector<Param>& out) override;

    Tensor matrix() const;

private:
    std::int64_t channels_;
    std::vector<std::int64_t> perm_;
    std::vector<double> diag_sign_;
    Tensor lower_, upper_, log_diag_;
};

enum class MaskScheme { channel_wise, checkerboard, cycle };

struct MaskSpec {
    MaskScheme scheme = MaskScheme::channel_wise;
    int cycle_iterations = 0;
    int layer_index = 0;
};

// Concrete two-set partition induced by a mask over a [C,H,W] input. For
// channel schemes a/b hold channel indices; for checkerboard they hold flat
// spatial indices y*W + x and apply to every channel.
struct MaskPartition {
    bool spatial = false;
    std::vector<std::int64_t> a; // transformed set
    std::vector<std::int64_t> b; // identity set
};

MaskPartition make_mask(MaskScheme scheme, int layer_index, const Shape& chw, int cycle_iterations = 0);

// Single-hidden-layer CNN: 3x3 conv -> ReLU -> 3x3 conv. The output layer is
// zero-initialized so a fresh coupling is the identity map.
class Conditioner {
public:
    Conditioner(std::int64_t in_channels, std::int64_t hidden_channels, std::int64_t out_channels, Rng& rng);

    Tensor apply(const Tensor& x) const;
    std::int64_t out_channels() const { return w2_.shape()[0]; }
    void append_params(const std::string& prefix, std::vector<Param>& out);

private:
    Tensor w1_, b1_, w2_, b2_;
};

// y_A = x_A * exp(s) + t, y_B = x_B, with (s_raw, t) = cond(x_B ++ context)
// and s = tanh(s_raw) * 2 for stability. The conditioner output stacks the
// s channels first, then the t channels.
class AffineCoupling : public Bijection {
public:
    AffineCoupling(MaskPartition partition, Shape chw, std::int64_t context_channels,
                   std::int64_t hidden_channels, Rng& rng);

    const char* kind() const override { return "affine_coupling"; }
    FlowResult forward(const Tensor& x, const Tensor* context = nullptr) override;
    Tensor inverse(const Tensor& y, const Tensor* context = nullptr) const override;
    void append_params(const std::string& prefix, std::vector<Param>& out) override;

private:
    // (s, t) from the identity part; shared by forward and inverse.
    std::pair<Tensor, Tensor> scale_shift(const Tensor& identity_part, const Tensor* context) const;

    MaskPartition part_;
    Shape chw_;
    std::int64_t context_channels_;
    Tensor mask_; // [C,H,W] 0/1 over A, checkerboard mode only
    std::unique_ptr<Conditioner> cond_;
};

// Space-to-depth as a volume-preserving flow step.
class SqueezeFlow : public Bijection {
public:
    const char* kind() const override { return "squeeze"; }
    FlowResult forward(const Tensor& x, const Tensor* context = nullptr) override;
    Tensor inverse(const Tensor& y, const Tensor* context = nullptr) const override;
};

// Multi-scale split along channels: first half continues, second half is
// factored out and scored against the base immediately.
std::pair<Tensor, Tensor> split_channels(const Tensor& x); // (kept, factored)
Tensor unsplit_channels(const Tensor& kept, const Tensor& factored);

// Ordered composition; logdets add (Appendix-A summation form).
class FlowChain {
public:
    FlowChain() = default;
    FlowChain(FlowChain&&) = default;
    FlowChain& operator=(FlowChain&&) = default;

    void push(std::unique_ptr<Bijection> step);
    std::size_t size() const { return steps_.size(); }
    Bijection& step(std::size_t i) { return *steps_[i]; }
    const Bijection& step(std::size_t i) const { return *steps_[i]; }

    FlowResult forward(const Tensor& x, const Tensor* context = nullptr);
    Tensor inverse(const Tensor& z, const Tensor* context = nullptr) const;
    void append_params(const std::string& prefix, std::vector<Param>& out);

    bool actnorm_initialized() const;
    void set_actnorm_initialized(bool v);

private:
    std::vector<std::unique_ptr<Bijection>> steps_;
};

} // namespace flowood
