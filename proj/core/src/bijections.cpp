#include "flowood/bijections.hpp"

#include "flowood/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace flowood {

namespace {

void require_vec_batch(const Tensor& x, std::int64_t dim, const char* who) {
    if (x.rank() != 2 || x.shape()[1] != dim)
        throw ShapeError(std::string(who) + ": expected [N," + std::to_string(dim) + "], got " +
                         shape_str(x.shape()));
}

void require_image_batch(const Tensor& x, std::int64_t channels, const char* who) {
    if (x.rank() != 4 || x.shape()[1] != channels)
        throw ShapeError(std::string(who) + ": expected [N," + std::to_string(channels) +
                         ",H,W], got " + shape_str(x.shape()));
}

std::vector<std::int64_t> strict_lower_positions(std::int64_t d) {
    std::vector<std::int64_t> pos;
    for (std::int64_t i = 0; i < d; ++i)
        for (std::int64_t j = 0; j < i; ++j) pos.push_back(i * d + j);
    return pos;
}

std::vector<std::int64_t> strict_upper_positions(std::int64_t d) {
    std::vector<std::int64_t> pos;
    for (std::int64_t i = 0; i < d; ++i)
        for (std::int64_t j = i + 1; j < d; ++j) pos.push_back(i * d + j);
    return pos;
}

std::vector<std::int64_t> diag_positions(std::int64_t d) {
    std::vector<std::int64_t> pos(static_cast<std::size_t>(d));
    for (std::int64_t i = 0; i < d; ++i) pos[static_cast<std::size_t>(i)] = i * d + i;
    return pos;
}

Tensor identity_matrix(std::int64_t d) {
    Tensor m({d, d});
    for (std::int64_t i = 0; i < d; ++i) m.data()[static_cast<std::size_t>(i * d + i)] = 1.0;
    return m;
}

// Row-permutation matrix: (P v)[i] = v[perm[i]].
Tensor permutation_matrix(const std::vector<std::int64_t>& perm) {
    const std::int64_t d = static_cast<std::int64_t>(perm.size());
    Tensor p({d, d});
    for (std::int64_t i = 0; i < d; ++i)
        p.data()[static_cast<std::size_t>(i * d + perm[static_cast<std::size_t>(i)])] = 1.0;
    return p;
}

void validate_permutation(const std::vector<std::int64_t>& perm, std::int64_t d) {
    if (static_cast<std::int64_t>(perm.size()) != d)
        throw ValueError("permutation length mismatch");
    std::vector<bool> seen(static_cast<std::size_t>(d), false);
    for (auto v : perm) {
        if (v < 0 || v >= d || seen[static_cast<std::size_t>(v)])
            throw ValueError("invalid permutation");
        seen[static_cast<std::size_t>(v)] = true;
    }
}

// W = P * L * U with unit-diagonal L and sign * exp(log_diag) on U's diagonal.
// lower/upper may be undefined when d == 1.
Tensor assemble_plu(std::int64_t d, const std::vector<std::int64_t>& perm,
                    const Tensor& lower, const Tensor& upper, const Tensor& log_diag,
                    const std::vector<double>& sign) {
    Tensor sign_t = Tensor::from_data({d}, sign);
    Tensor u = scatter_fixed(exp(log_diag) * sign_t, diag_positions(d), {d, d});
    if (upper.defined()) u = u + scatter_fixed(upper, strict_upper_positions(d), {d, d});
    Tensor l = identity_matrix(d);
    if (lower.defined()) l = l + scatter_fixed(lower, strict_lower_positions(d), {d, d});
    Tensor lu = matmul(l, u);
    bool is_identity_perm = true;
    for (std::int64_t i = 0; i < d; ++i)
        if (perm[static_cast<std::size_t>(i)] != i) is_identity_perm = false;
    return is_identity_perm ? lu : matmul(permutation_matrix(perm), lu);
}

// Value-space solver for (P L U) x = v.
struct DenseLU {
    std::int64_t d;
    std::vector<std::int64_t> perm_inv;
    std::vector<double> L, U; // dense row-major

    void solve(double* v, std::int64_t stride) const {
        std::vector<double> w(static_cast<std::size_t>(d));
        for (std::int64_t i = 0; i < d; ++i)
            w[static_cast<std::size_t>(i)] = v[stride * perm_inv[static_cast<std::size_t>(i)]];
        for (std::int64_t i = 0; i < d; ++i) {
            double acc = w[static_cast<std::size_t>(i)];
            for (std::int64_t j = 0; j < i; ++j) acc -= L[static_cast<std::size_t>(i * d + j)] * w[static_cast<std::size_t>(j)];
            w[static_cast<std::size_t>(i)] = acc;
        }
        for (std::int64_t i = d - 1; i >= 0; --i) {
            double acc = w[static_cast<std::size_t>(i)];
            for (std::int64_t j = i + 1; j < d; ++j) acc -= U[static_cast<std::size_t>(i * d + j)] * w[static_cast<std::size_t>(j)];
            w[static_cast<std::size_t>(i)] = acc / U[static_cast<std::size_t>(i * d + i)];
        }
        for (std::int64_t i = 0; i < d; ++i) v[stride * i] = w[static_cast<std::size_t>(i)];
    }
};

DenseLU dense_lu(std::int64_t d, const std::vector<std::int64_t>& perm,
                 const Tensor& lower, const Tensor& upper, const Tensor& log_diag,
                 const std::vector<double>& sign) {
    DenseLU lu;
    lu.d = d;
    lu.perm_inv.resize(static_cast<std::size_t>(d));
    for (std::int64_t i = 0; i < d; ++i) lu.perm_inv[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = i;
    lu.L.assign(static_cast<std::size_t>(d * d), 0.0);
    lu.U.assign(static_cast<std::size_t>(d * d), 0.0);
    for (std::int64_t i = 0; i < d; ++i) {
        lu.L[static_cast<std::size_t>(i * d + i)] = 1.0;
        lu.U[static_cast<std::size_t>(i * d + i)] =
            sign[static_cast<std::size_t>(i)] * std::exp(log_diag.at(i));
    }
    if (lower.defined()) {
        auto pos = strict_lower_positions(d);
        for (std::size_t k = 0; k < pos.size(); ++k) lu.L[static_cast<std::size_t>(pos[k])] = lower.at(static_cast<std::int64_t>(k));
    }
    if (upper.defined()) {
        auto pos = strict_upper_positions(d);
        for (std::size_t k = 0; k < pos.size(); ++k) lu.U[static_cast<std::size_t>(pos[k])] = upper.at(static_cast<std::int64_t>(k));
    }
    return lu;
}

// Bisection on a strictly increasing function with a valid bracket.
double solve_increasing(const std::function<double(double)>& f, double lo, double hi) {
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        if (f(mid) <= 0.0) lo = mid;
        else hi = mid;
        if (hi - lo < 1e-15 * std::max(1.0, std::abs(lo) + std::abs(hi))) break;
    }
    return 0.5 * (lo + hi);
}

double inverse_softplus(double z) {
    // ln(e^z - 1); z > 30 is already past double round-off of the identity
    return z > 30.0 ? z : std::log(std::expm1(z));
}

Tensor zeros_like_batch(const Tensor& x) { return Tensor({x.shape()[0]}, 0.0); }

} // namespace

// ---------------------------------------------------------------------------
// ElementwiseAffine
// ---------------------------------------------------------------------------

ElementwiseAffine::ElementwiseAffine(double a, double b) {
    if (a == 0.0) throw ValueError("elementwise flow: a must be nonzero");
    a_ = Tensor::scalar(a);
    b_ = Tensor::scalar(b);
    a_.set_requires_grad(true);
    b_.set_requires_grad(true);
}

FlowResult ElementwiseAffine::forward(const Tensor& x, const Tensor*) {
    if (x.rank() < 2) throw ShapeError("elementwise flow: expected batched input");
    const std::int64_t per_sample = x.numel() / x.shape()[0];
    Tensor y = x * a_ + b_;
    Tensor logdet = repeat_scalar(log_abs(a_) * static_cast<double>(per_sample), x.shape()[0]);
    return {y, logdet};
}

Tensor ElementwiseAffine::inverse(const Tensor& y, const Tensor*) const {
    NoGradGuard ng;
    return (y - b_) / a_;
}

void ElementwiseAffine::append_params(const std::string& prefix, std::vector<Param>& out) {
    out.push_back({prefix + "a", a_});
    out.push_back({prefix + "b", b_});
}

// ---------------------------------------------------------------------------
// LinearLU
// ---------------------------------------------------------------------------

LinearLU::LinearLU(std::int64_t dim) : LinearLU(dim, [dim] {
    std::vector<std::int64_t> p(static_cast<std::size_t>(dim));
    std::iota(p.begin(), p.end(), 0);
    return p;
}(), std::vector<double>(static_cast<std::size_t>(dim), 1.0)) {}

LinearLU::LinearLU(std::int64_t dim, std::vector<std::int64_t> perm, std::vector<double> diag_sign)
    : dim_(dim), perm_(std::move(perm)), diag_sign_(std::move(diag_sign)) {
    if (dim < 1) throw ValueError("linear_lu: dim must be positive");
    validate_permutation(perm_, dim);
    if (static_cast<std::int64_t>(diag_sign_.size()) != dim)
        throw ValueError("linear_lu: diag_sign length mismatch");
    for (double s : diag_sign_)
        if (s != 1.0 && s != -1.0) throw ValueError("linear_lu: diag signs must be +-1");
    const std::int64_t off = dim * (dim - 1) / 2;
    if (off > 0) {
        lower_ = Tensor({off});
        upper_ = Tensor({off});
        lower_.set_requires_grad(true);
        upper_.set_requires_grad(true);
    }
    log_diag_ = Tensor({dim});
    bias_ = Tensor({dim});
    log_diag_.set_requires_grad(true);
    bias_.set_requires_grad(true);
}

Tensor LinearLU::matrix() const {
    return assemble_plu(dim_, perm_, lower_, upper_, log_diag_, diag_sign_);
}

FlowResult LinearLU::forward(const Tensor& x, const Tensor*) {
    require_vec_batch(x, dim_, "linear_lu");
    Tensor y = matmul(x, transpose2d(matrix())) + bias_;
    Tensor logdet = repeat_scalar(sum(log_diag_), x.shape()[0]);
    return {y, logdet};
}

Tensor LinearLU::inverse(const Tensor& y, const Tensor*) const {
    NoGradGuard ng;
    require_vec_batch(y, dim_, "linear_lu inverse");
    Tensor x = (y - bias_).detach();
    DenseLU lu = dense_lu(dim_, perm_, lower_, upper_, log_diag_, diag_sign_);
    for (std::int64_t n = 0; n < y.shape()[0]; ++n) lu.solve(x.data().data() + n * dim_, 1);
    return x;
}

void LinearLU::append_params(const std::string& prefix, std::vector<Param>& out) {
    if (lower_.defined()) {
        out.push_back({prefix + "lower", lower_});
        out.push_back({prefix + "upper", upper_});
    }
    out.push_back({prefix + "log_diag", log_diag_});
    out.push_back({prefix + "bias", bias_});
}

// ---------------------------------------------------------------------------
// Planar
// ---------------------------------------------------------------------------

Planar::Planar(std::int64_t dim, Rng& rng) : dim_(dim) {
    if (dim < 1) throw ValueError("planar: dim must be positive");
    u_ = Tensor({dim});
    w_ = Tensor({dim});
    b_ = Tensor({1});
    double norm = 0.0;
    while (norm < 1e-6) {
        norm = 0.0;
        for (std::int64_t i = 0; i < dim; ++i) {
            const double v = rng.normal() * 0.1;
            w_.data()[static_cast<std::size_t>(i)] = v;
            norm += v * v;
        }
    }
    for (auto& v : u_.data()) v = rng.normal() * 0.1;
    u_.set_requires_grad(true);
    w_.set_requires_grad(true);
    b_.set_requires_grad(true);
}

Planar::Planar(std::vector<double> u, std::vector<double> w, double b)
    : dim_(static_cast<std::int64_t>(u.size())) {
    if (u.size() != w.size() || u.empty()) throw ValueError("planar: u and w must match and be nonempty");
    double norm = 0.0;
    for (double v : w) norm += v * v;
    if (norm == 0.0) throw ValueError("planar: ||w|| must be nonzero");
    u_ = Tensor::from_data({dim_}, std::move(u));
    w_ = Tensor::from_data({dim_}, std::move(w));
    b_ = Tensor::scalar(b);
    u_.set_requires_grad(true);
    w_.set_requires_grad(true);
    b_.set_requires_grad(true);
}

Tensor Planar::u_hat() const {
    // Project u onto w^T u >= -1 + eps only when violated, so admissible
    // parameters (and the documented closed-form examples) pass through.
    constexpr double eps = 1e-4;
    Tensor wu = sum(w_ * u_);
    if (wu.item() >= -1.0 + eps) return u_;
    Tensor wnorm2 = sum(square(w_));
    if (wnorm2.item() < 1e-24) throw ValueError("planar: ||w|| must be nonzero");
    return u_ + ((-1.0 + eps) - wu) * w_ / wnorm2;
}

FlowResult Planar::forward(const Tensor& x, const Tensor*) {
    require_vec_batch(x, dim_, "planar");
    Tensor uh = u_hat();
    Tensor pre = matmul(x, reshape(w_, {dim_, 1})) + b_; // [N,1]
    Tensor h = tanh(pre);
    Tensor y = x + matmul(h, reshape(uh, {1, dim_}));
    Tensor wu = sum(w_ * uh); // scalar, >= -1 + eps by construction
    Tensor logdet = reshape(log_abs(1.0 + (1.0 - square(h)) * wu), {x.shape()[0]});
    return {y, logdet};
}

Tensor Planar::inverse(const Tensor& y, const Tensor*) const {
    NoGradGuard ng;
    require_vec_batch(y, dim_, "planar inverse");
    Tensor uh = u_hat();
    const double b = b_.item();
    double c = 0.0; // w^T u_hat
    for (std::int64_t i = 0; i < dim_; ++i) c += w_.at(i) * uh.at(i);

    Tensor x = y.detach();
    for (std::int64_t n = 0; n < y.shape()[0]; ++n) {
        double wy = 0.0;
        for (std::int64_t i = 0; i < dim_; ++i) wy += w_.at(i) * y.at(n * dim_ + i);
        // alpha = w^T x solves alpha + c*tanh(alpha + b) = w^T y; strictly
        // increasing since c > -1.
        const double alpha = solve_increasing(
            [&](double a) { return a + c * std::tanh(a + b) - wy; },
            wy - std::abs(c) - 1.0, wy + std::abs(c) + 1.0);
        const double t = std::tanh(alpha + b);
        for (std::int64_t i = 0; i < dim_; ++i)
            x.data()[static_cast<std::size_t>(n * dim_ + i)] = y.at(n * dim_ + i) - uh.at(i) * t;
    }
    return x;
}

void Planar::append_params(const std::string& prefix, std::vector<Param>& out) {
    out.push_back({prefix + "u", u_});
    out.push_back({prefix + "w", w_});
    out.push_back({prefix + "b", b_});
}

// ---------------------------------------------------------------------------
// Radial
// ---------------------------------------------------------------------------

Radial::Radial(std::int64_t dim, Rng& rng) : dim_(dim) {
    if (dim < 1) throw ValueError("radial: dim must be positive");
    x0_ = Tensor({dim});
    for (auto& v : x0_.data()) v = rng.normal() * 0.1;
    alpha_raw_ = Tensor::scalar(0.0);                       // alpha = 1
    beta_raw_ = Tensor::scalar(inverse_softplus(1.0));      // beta = 0
    x0_.set_requires_grad(true);
    alpha_raw_.set_requires_grad(true);
    beta_raw_.set_requires_grad(true);
}

Radial::Radial(std::vector<double> x0, double alpha, double beta)
    : dim_(static_cast<std::int64_t>(x0.size())) {
    if (x0.empty()) throw ValueError("radial: x0 must be nonempty");
    if (alpha <= 0.0) throw ValueError("radial: alpha must be positive");
    if (beta + alpha <= 0.0) throw ValueError("radial: beta must exceed -alpha");
    x0_ = Tensor::from_data({dim_}, std::move(x0));
    alpha_raw_ = Tensor::scalar(std::log(alpha));
    beta_raw_ = Tensor::scalar(inverse_softplus(beta + alpha));
    x0_.set_requires_grad(true);
    alpha_raw_.set_requires_grad(true);
    beta_raw_.set_requires_grad(true);
}

FlowResult Radial::forward(const Tensor& x, const Tensor*) {
    require_vec_batch(x, dim_, "radial");
    Tensor alpha = exp(alpha_raw_);
    Tensor beta = softplus(beta_raw_) - alpha;
    Tensor diff = x - x0_;
    Tensor r = sqrt(sample_sum(square(diff))); // [N]
    Tensor denom = alpha + r;
    Tensor factor = beta / denom;
    Tensor y = x + scale_rows(diff, factor);
    Tensor one_pf = 1.0 + factor; // > 0 given beta > -alpha
    Tensor logdet = static_cast<double>(dim_ - 1) * log(one_pf) +
                    log(one_pf - beta * r / square(denom));
    return {y, logdet};
}

Tensor Radial::inverse(const Tensor& y, const Tensor*) const {
    NoGradGuard ng;
    require_vec_batch(y, dim_, "radial inverse");
    const double alpha = std::exp(alpha_raw_.item());
    const double beta = softplus(beta_raw_).item() - alpha;

    Tensor x = y.detach();
    for (std::int64_t n = 0; n < y.shape()[0]; ++n) {
        double R2 = 0.0;
        for (std::int64_t i = 0; i < dim_; ++i) {
            const double d = y.at(n * dim_ + i) - x0_.at(i);
            R2 += d * d;
        }
        const double R = std::sqrt(R2);
        if (R == 0.0) {
            for (std::int64_t i = 0; i < dim_; ++i) x.data()[static_cast<std::size_t>(n * dim_ + i)] = x0_.at(i);
            continue;
        }
        // r solves r + beta*r/(alpha+r) = R; strictly increasing for beta > -alpha.
        const double r = solve_increasing(
            [&](double v) { return v + beta * v / (alpha + v) - R; }, 0.0,
            R + std::abs(beta) + 1.0);
        const double shrink = 1.0 / (1.0 + beta / (alpha + r));
        for (std::int64_t i = 0; i < dim_; ++i)
            x.data()[static_cast<std::size_t>(n * dim_ + i)] =
                x0_.at(i) + (y.at(n * dim_ + i) - x0_.at(i)) * shrink;
    }
    return x;
}

void Radial::append_params(const std::string& prefix, std::vector<Param>& out) {
    out.push_back({prefix + "x0", x0_});
    out.push_back({prefix + "alpha_raw", alpha_raw_});
    out.push_back({prefix + "beta_raw", beta_raw_});
}

// ---------------------------------------------------------------------------
// ActNorm
// ---------------------------------------------------------------------------

ActNorm::ActNorm(std::int64_t channels) : channels_(channels) {
    if (channels < 1) throw ValueError("actnorm: channels must be positive");
    logs_ = Tensor({channels});
    bias_ = Tensor({channels});
    logs_.set_requires_grad(true);
    bias_.set_requires_grad(true);
}

FlowResult ActNorm::forward(const Tensor& x, const Tensor*) {
    require_image_batch(x, channels_, "actnorm");
    if (!initialized_ && grad_enabled()) {
        NoGradGuard ng;
        Tensor mu = channel_mean(x);
        Tensor sd = channel_std(x);
        for (std::int64_t c = 0; c < channels_; ++c) {
            const double s = std::max(sd.at(c), 1e-6);
            logs_.data()[static_cast<std::size_t>(c)] = -std::log(s);
            bias_.data()[static_cast<std::size_t>(c)] = -mu.at(c) / s;
        }
        initialized_ = true;
    }
    Tensor y = x * exp(logs_) + bias_;
    const double hw = static_cast<double>(x.shape()[2] * x.shape()[3]);
    Tensor logdet = repeat_scalar(sum(logs_) * hw, x.shape()[0]);
    return {y, logdet};
}

Tensor ActNorm::inverse(const Tensor& y, const Tensor*) const {
    NoGradGuard ng;
    require_image_batch(y, channels_, "actnorm inverse");
    return (y - bias_) / exp(logs_);
}

void ActNorm::append_params(const std::string& prefix, std::vector<Param>& out) {
    out.push_back({prefix + "logs", logs_});
    out.push_back({prefix + "bias", bias_});
}

// ---------------------------------------------------------------------------
// InvConv1x1
// ---------------------------------------------------------------------------

InvConv1x1::InvConv1x1(std::int64_t channels) : channels_(channels) {
    if (channels < 1) throw ValueError("inv_conv1x1: channels must be positive");
    perm_.resize(static_cast<std::size_t>(channels));
    std::iota(perm_.begin(), perm_.end(), 0);
    diag_sign_.assign(static_cast<std::size_t>(channels), 1.0);
    const std::int64_t off = channels * (channels - 1) / 2;
    if (off > 0) {
        lower_ = Tensor({off});
        upper_ = Tensor({off});
        lower_.set_requires_grad(true);
        upper_.set_requires_grad(true);
    }
    log_diag_ = Tensor({channels});
    log_diag_.set_requires_grad(true);
}

InvConv1x1::InvConv1x1(std::int64_t channels, Rng& rng) : InvConv1x1(channels) {
    // Fisher-Yates with the library generator; the permutation is fixed state.
    for (std::int64_t i = channels - 1; i > 0; --i) {
        const std::int64_t j = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(i + 1)));
        std::swap(perm_[static_cast<std::size_t>(i)], perm_[static_cast<std::size_t>(j)]);
    }
}

Tensor InvConv1x1::matrix() const {
    return assemble_plu(channels_, perm_, lower_, upper_, log_diag_, diag_sign_);
}

FlowResult InvConv1x1::forward(const Tensor& x, const Tensor*) {
    require_image_batch(x, channels_, "inv_conv1x1");
    Tensor kernel = reshape(matrix(), {channels_, channels_, 1, 1});
    Tensor y = conv2d(x, kernel, 0);
    const double hw = static_cast<double>(x.shape()[2] * x.shape()[3]);
    Tensor logdet = repeat_scalar(sum(log_diag_) * hw, x.shape()[0]);
    return {y, logdet};
}

Tensor InvConv1x1::inverse(const Tensor& y, const Tensor*) const {
    NoGradGuard ng;
    require_image_batch(y, channels_, "inv_conv1x1 inverse");
    Tensor x = y.detach();
    DenseLU lu = dense_lu(channels_, perm_, lower_, upper_, log_diag_, diag_sign_);
    const std::int64_t N = y.shape()[0], HW = y.shape()[2] * y.shape()[3];
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t p = 0; p < HW; ++p)
            lu.solve(x.data().data() + n * channels_ * HW + p, HW);
    return x;
}

void InvConv1x1::append_params(const std::string& prefix, std::vector<Param>& out) {
    if (lower_.defined()) {
        out.push_back({prefix + "lower", lower_});
        out.push_back({prefix + "upper", upper_});
    }
    out.push_back({prefix + "log_diag", log_diag_});
}

// ---------------------------------------------------------------------------
// Masks
// ---------------------------------------------------------------------------

MaskPartition make_mask(MaskScheme scheme, int layer_index, const Shape& chw, int cycle_iterations) {
    if (chw.size() != 3) throw ShapeError("make_mask: shape must be [C,H,W], got " + shape_str(chw));
    const std::int64_t C = chw[0], H = chw[1], W = chw[2];
    if (cycle_iterations < 0) throw ValueError("make_mask: cycle_iterations must be non-negative");
    MaskPartition part;

    switch (scheme) {
    case MaskScheme::channel_wise: {
        if (C % 2 != 0)
            throw ValueError("channel_wise mask requires an even channel count, got " + std::to_string(C));
        std::vector<std::int64_t> first(static_cast<std::size_t>(C / 2)), second(static_cast<std::size_t>(C / 2));
        std::iota(first.begin(), first.end(), 0);
        std::iota(second.begin(), second.end(), C / 2);
        const bool even = layer_index % 2 == 0;
        part.a = even ? first : second;
        part.b = even ? second : first;
        break;
    }
    case MaskScheme::checkerboard: {
        part.spatial = true;
        for (std::int64_t i = 0; i < H; ++i)
            for (std::int64_t j = 0; j < W; ++j) {
                const std::int64_t parity = (((i + j + layer_index) % 2) + 2) % 2;
                (parity == 0 ? part.a : part.b).push_back(i * W + j);
            }
        break;
    }
    case MaskScheme::cycle: {
        if (C < 2) throw ValueError("cycle mask requires at least 2 channels");
        // Rotate the partition boundary so every channel lands in A across a
        // full period; one cycle iteration sweeps half the channel range.
        const std::int64_t step = std::max<std::int64_t>(1, C / (2 * (cycle_iterations + 1)));
        const std::int64_t start = ((static_cast<std::int64_t>(layer_index) * step) % C + C) % C;
        const std::int64_t half = C / 2;
        std::vector<bool> in_a(static_cast<std::size_t>(C), false);
        for (std::int64_t k = 0; k < half; ++k) {
            const std::int64_t c = (start + k) % C;
            part.a.push_back(c);
            in_a[static_cast<std::size_t>(c)] = true;
        }
        for (std::int64_t c = 0; c < C; ++c)
            if (!in_a[static_cast<std::size_t>(c)]) part.b.push_back(c);
        break;
    }
    }
    if (part.a.empty() || part.b.empty()) throw ValueError("make_mask: degenerate partition");
    return part;
}

// ---------------------------------------------------------------------------
// Conditioner
// ---------------------------------------------------------------------------

Conditioner::Conditioner(std::int64_t in_channels, std::int64_t hidden_channels,
                         std::int64_t out_channels, Rng& rng) {
    if (in_channels < 1 || hidden_channels < 1 || out_channels < 1)
        throw ValueError("conditioner: channel counts must be positive");
    w1_ = Tensor({hidden_channels, in_channels, 3, 3});
    b1_ = Tensor({hidden_channels});
    w2_ = Tensor({out_channels, hidden_channels, 3, 3});
    b2_ = Tensor({out_channels});
    const double std1 = std::sqrt(2.0 / static_cast<double>(in_channels * 9));
    for (auto& v : w1_.data()) v = rng.normal() * std1;
    // Output layer starts at zero so the owning coupling is the identity.
    for (Tensor* t : {&w1_, &b1_, &w2_, &b2_}) t->set_requires_grad(true);
}

Tensor Conditioner::apply(const Tensor& x) const {
    Tensor h = relu(conv2d(x, w1_, 1) + b1_);
    return conv2d(h, w2_, 1) + b2_;
}

void Conditioner::append_params(const std::string& prefix, std::vector<Param>& out) {
    out.push_back({prefix + "w1", w1_});
    out.push_back({prefix + "b1", b1_});
    out.push_back({prefix + "w2", w2_});
    out.push_back({prefix + "b2", b2_});
}

// ---------------------------------------------------------------------------
// AffineCoupling
// ---------------------------------------------------------------------------

AffineCoupling::AffineCoupling(MaskPartition partition, Shape chw, std::int64_t context_channels,
                               std::int64_t hidden_channels, Rng& rng)
    : part_(std::move(partition)), chw_(std::move(chw)), context_channels_(context_channels) {
    if (chw_.size() != 3) throw ShapeError("affine_coupling: shape must be [C,H,W]");
    if (part_.a.empty() || part_.b.empty())
        throw ValueError("affine_coupling: both partition sets must be nonempty");
    const std::int64_t C = chw_[0];

    std::int64_t cond_in, cond_out;
    if (part_.spatial) {
        // Binary mask over A pixels, replicated across channels.
        mask_ = Tensor({C, chw_[1], chw_[2]});
        for (std::int64_t c = 0; c < C; ++c)
            for (auto p : part_.a) mask_.data()[static_cast<std::size_t>(c * chw_[1] * chw_[2] + p)] = 1.0;
        cond_in = C + context_channels;
        cond_out = 2 * C;
    } else {
        std::vector<std::int8_t> seen(static_cast<std::size_t>(C), 0);
        for (auto c : part_.a) seen.at(static_cast<std::size_t>(c))++;
        for (auto c : part_.b) seen.at(static_cast<std::size_t>(c))++;
        for (auto v : seen)
            if (v != 1) throw ValueError("affine_coupling: partition must cover each channel once");
        cond_in = static_cast<std::int64_t>(part_.b.size()) + context_channels;
        cond_out = 2 * static_cast<std::int64_t>(part_.a.size());
    }
    cond_ = std::make_unique<Conditioner>(cond_in, hidden_channels, cond_out, rng);
}

std::pair<Tensor, Tensor> AffineCoupling::scale_shift(const Tensor& identity_part,
                                                      const Tensor* context) const {
    Tensor in = identity_part;
    if (context_channels_ > 0) {
        if (!context) throw ValueError("affine_coupling: context required but missing");
        if (context->rank() != 4 || context->shape()[1] != context_channels_ ||
            context->shape()[0] != in.shape()[0] || context->shape()[2] != in.shape()[2] ||
            context->shape()[3] != in.shape()[3])
            throw ShapeError("affine_coupling: context shape mismatch " + shape_str(context->shape()));
        in = concat_channels(in, *context);
    } else if (context) {
        throw ValueError("affine_coupling: unexpected context for an unconditional coupling");
    }
    Tensor out = cond_->apply(in);
    const std::int64_t half = cond_->out_channels() / 2;
    std::vector<std::int64_t> s_idx(static_cast<std::size_t>(half)), t_idx(static_cast<std::size_t>(half));
    std::iota(s_idx.begin(), s_idx.end(), 0);
    std::iota(t_idx.begin(), t_idx.end(), half);
    Tensor s = tanh(gather_channels(out, s_idx)) * 2.0; // bounded log-scale
    Tensor t = gather_channels(out, t_idx);
    return {s, t};
}

FlowResult AffineCoupling::forward(const Tensor& x, const Tensor* context) {
    require_image_batch(x, chw_[0], "affine_coupling");
    if (part_.spatial) {
        Tensor visible = x * (1.0 - mask_);
        auto [s_full, t_full] = scale_shift(visible, context);
        Tensor s = s_full * mask_;
        Tensor t = t_full * mask_;
        Tensor y = x * exp(s) + t;
        return {y, sample_sum(s)};
    }
    Tensor xa = gather_channels(x, part_.a);
    Tensor xb = gather_channels(x, part_.b);
    auto [s, t] = scale_shift(xb, context);
    Tensor ya = xa * exp(s) + t;
    Tensor y = combine_channels(ya, part_.a, xb, part_.b);
    return {y, sample_sum(s)};
}

Tensor AffineCoupling::inverse(const Tensor& y, const Tensor* context) const {
    NoGradGuard ng;
    require_image_batch(y, chw_[0], "affine_coupling inverse");
    if (part_.spatial) {
        Tensor visible = y * (1.0 - mask_); // identity pixels carry x_B
        auto [s_full, t_full] = scale_shift(visible, context);
        Tensor s = s_full * mask_;
        Tensor t = t_full * mask_;
        return (y - t) / exp(s);
    }
    Tensor yb = gather_channels(y, part_.b);
    auto [s, t] = scale_shift(yb, context);
    Tensor xa = (gather_channels(y, part_.a) - t) / exp(s);
    return combine_channels(xa, part_.a, yb, part_.b);
}

void AffineCoupling::append_params(const std::string& prefix, std::vector<Param>& out) {
    cond_->append_params(prefix + "cond.", out);
}

// ---------------------------------------------------------------------------
// Squeeze / split
// ---------------------------------------------------------------------------

FlowResult SqueezeFlow::forward(const Tensor& x, const Tensor*) {
    return {squeeze2x2(x), zeros_like_batch(x)};
}

Tensor SqueezeFlow::inverse(const Tensor& y, const Tensor*) const {
    NoGradGuard ng;
    return unsqueeze2x2(y);
}

std::pair<Tensor, Tensor> split_channels(const Tensor& x) {
    if (x.rank() != 4 || x.shape()[1] % 2 != 0)
        throw ShapeError("split_channels: need NCHW with even channels, got " + shape_str(x.shape()));
    const std::int64_t half = x.shape()[1] / 2;
    std::vector<std::int64_t> kept(static_cast<std::size_t>(half)), factored(static_cast<std::size_t>(half));
    std::iota(kept.begin(), kept.end(), 0);
    std::iota(factored.begin(), factored.end(), half);
    return {gather_channels(x, kept), gather_channels(x, factored)};
}

Tensor unsplit_channels(const Tensor& kept, const Tensor& factored) {
    return concat_channels(kept, factored);
}

// ---------------------------------------------------------------------------
// FlowChain
// ---------------------------------------------------------------------------

void FlowChain::push(std::unique_ptr<Bijection> step) {
    if (!step) throw ValueError("FlowChain: null step");
    steps_.push_back(std::move(step));
}

FlowResult FlowChain::forward(const Tensor& x, const Tensor* context) {
    if (steps_.empty()) throw ValueError("FlowChain: empty chain");
    FlowResult res = steps_.front()->forward(x, context);
    for (std::size_t i = 1; i < steps_.size(); ++i) {
        FlowResult step = steps_[i]->forward(res.y, context);
        res.y = step.y;
        res.logdet = res.logdet + step.logdet;
    }
    return res;
}

Tensor FlowChain::inverse(const Tensor& z, const Tensor* context) const {
    NoGradGuard ng;
    if (steps_.empty()) throw ValueError("FlowChain: empty chain");
    Tensor cur = z;
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) cur = (*it)->inverse(cur, context);
    return cur;
}

void FlowChain::append_params(const std::string& prefix, std::vector<Param>& out) {
    for (std::size_t i = 0; i < steps_.size(); ++i)
        steps_[i]->append_params(prefix + "s" + std::to_string(i) + "." +
                                 steps_[i]->kind() + ".", out);
}

bool FlowChain::actnorm_initialized() const {
    for (const auto& s : steps_)
        if (!s->actnorm_initialized()) return false;
    return true;
}

void FlowChain::set_actnorm_initialized(bool v) {
    for (auto& s : steps_) s->set_actnorm_initialized(v);
}

} // namespace flowood
