#include "doctest.h"

#include "flowood/bijections.hpp"
#include "flowood/errors.hpp"
#include "support/oracles.hpp"

#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <vector>

using namespace flowood;

namespace {

std::vector<double> randn(Rng& rng, std::int64_t n, double scale = 1.0) {
    std::vector<double> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = rng.normal() * scale;
    return v;
}

// ln|det J| of the forward map by central differences, batch of one.
double numerical_logdet(Bijection& b, const Shape& in_shape, const std::vector<double>& x0,
                        const Tensor* ctx = nullptr) {
    auto f = [&](const std::vector<double>& v) {
        NoGradGuard ng;
        Tensor x = Tensor::from_data(in_shape, v);
        FlowResult r = b.forward(x, ctx);
        return std::vector<double>(r.y.data().begin(), r.y.data().end());
    };
    return oracle::log_abs_det(oracle::fd_jacobian(f, x0));
}

double analytic_logdet(Bijection& b, const Shape& in_shape, const std::vector<double>& x0,
                       const Tensor* ctx = nullptr) {
    NoGradGuard ng;
    return b.forward(Tensor::from_data(in_shape, x0), ctx).logdet.at(0);
}

double roundtrip_error(Bijection& b, const Tensor& x, const Tensor* ctx = nullptr) {
    NoGradGuard ng;
    FlowResult fwd = b.forward(x, ctx);
    Tensor back = b.inverse(fwd.y, ctx);
    double worst = 0.0;
    for (std::int64_t i = 0; i < x.numel(); ++i)
        worst = std::max(worst, std::abs(back.at(i) - x.at(i)));
    return worst;
}

void set_param(Bijection& b, const std::string& suffix, const std::vector<double>& values) {
    std::vector<Param> params;
    b.append_params("", params);
    for (auto& p : params) {
        if (p.name.size() >= suffix.size() &&
            p.name.compare(p.name.size() - suffix.size(), suffix.size(), suffix) == 0) {
            REQUIRE(p.tensor.numel() == static_cast<std::int64_t>(values.size()));
            std::copy(values.begin(), values.end(), p.tensor.data().begin());
            return;
        }
    }
    FAIL("no parameter matching ", suffix);
}

} // namespace

TEST_CASE("elementwise affine") {
    ElementwiseAffine ident(1.0, 0.0);
    Tensor x = Tensor::from_data({1, 2}, {1.0, 2.0});
    FlowResult r = ident.forward(x);
    CHECK(r.y.at(0) == 1.0);
    CHECK(r.logdet.at(0) == doctest::Approx(0.0));

    ElementwiseAffine f(2.0, 1.0);
    FlowResult r2 = f.forward(x);
    CHECK(r2.y.at(0) == doctest::Approx(3.0));
    CHECK(r2.y.at(1) == doctest::Approx(5.0));
    CHECK(r2.logdet.at(0) == doctest::Approx(2.0 * std::log(2.0)));
    Tensor back = f.inverse(r2.y);
    CHECK(back.at(0) == doctest::Approx(1.0));
    CHECK(back.at(1) == doctest::Approx(2.0));

    CHECK_THROWS_AS(ElementwiseAffine(0.0, 1.0), ValueError);
}

TEST_CASE("linear LU flow") {
    SUBCASE("identity") {
        LinearLU f(3);
        Tensor x = Tensor::from_data({1, 3}, {1.0, -2.0, 0.5});
        FlowResult r = f.forward(x);
        for (int i = 0; i < 3; ++i) CHECK(r.y.at(i) == doctest::Approx(x.at(i)));
        CHECK(r.logdet.at(0) == doctest::Approx(0.0));
    }
    SUBCASE("diagonal U example") {
        LinearLU f(3);
        set_param(f, "log_diag", {std::log(2.0), std::log(3.0), std::log(4.0)});
        Tensor e1 = Tensor::from_data({1, 3}, {1.0, 0.0, 0.0});
        FlowResult r = f.forward(e1);
        CHECK(r.y.at(0) == doctest::Approx(2.0)); // first column of U
        CHECK(r.y.at(1) == doctest::Approx(0.0));
        CHECK(r.y.at(2) == doctest::Approx(0.0));
        CHECK(r.logdet.at(0) == doctest::Approx(std::log(24.0)));
    }
    SUBCASE("random D=6 against the dense determinant oracle") {
        Rng rng(17);
        std::vector<std::int64_t> perm = {3, 0, 5, 1, 4, 2};
        std::vector<double> signs = {1, -1, 1, 1, -1, 1};
        LinearLU f(6, perm, signs);
        set_param(f, "lower", randn(rng, 15, 0.5));
        set_param(f, "upper", randn(rng, 15, 0.5));
        set_param(f, "log_diag", randn(rng, 6, 0.3));
        set_param(f, "bias", randn(rng, 6));

        NoGradGuard ng;
        Tensor a = f.matrix();
        std::vector<std::vector<double>> dense(6, std::vector<double>(6));
        for (int i = 0; i < 6; ++i)
            for (int j = 0; j < 6; ++j) dense[i][j] = a.at(i * 6 + j);
        const double expect = oracle::log_abs_det(dense);

        Tensor x = Tensor::from_data({2, 6}, randn(rng, 12));
        FlowResult r = f.forward(x);
        CHECK(std::abs(r.logdet.at(0) - expect) <= 1e-8 * std::max(1.0, std::abs(expect)));
        CHECK(r.logdet.at(1) == doctest::Approx(r.logdet.at(0)));

        CHECK(roundtrip_error(f, x) < 1e-8);
        // FD Jacobian agreement on the full map.
        std::vector<double> x0 = randn(rng, 6);
        CHECK(oracle::close_rel(analytic_logdet(f, {1, 6}, x0), numerical_logdet(f, {1, 6}, x0), 1e-4));
    }
    SUBCASE("rejects bad construction") {
        CHECK_THROWS_AS(LinearLU(3, {0, 0, 1}, {1, 1, 1}), ValueError);
        CHECK_THROWS_AS(LinearLU(3, {0, 1, 2}, {1, 2, 1}), ValueError);
    }
}

TEST_CASE("planar flow") {
    SUBCASE("u = 0 is the identity") {
        Planar f({0.0, 0.0}, {0.3, -0.4}, 0.7);
        Tensor x = Tensor::from_data({1, 2}, {1.0, 2.0});
        FlowResult r = f.forward(x);
        CHECK(r.y.at(0) == doctest::Approx(1.0));
        CHECK(r.y.at(1) == doctest::Approx(2.0));
        CHECK(r.logdet.at(0) == doctest::Approx(0.0));
    }
    SUBCASE("documented 1D example") {
        Planar f({1.0}, {1.0}, 0.0);
        FlowResult r = f.forward(Tensor::from_data({1, 1}, {0.0}));
        CHECK(r.y.at(0) == doctest::Approx(0.0));
        CHECK(r.logdet.at(0) == doctest::Approx(std::log(2.0)));
    }
    SUBCASE("numerical Jacobian agreement and round trip") {
        Rng rng(23);
        for (int trial = 0; trial < 20; ++trial) {
            Planar f(2, rng);
            std::vector<double> x0 = randn(rng, 2);
            CHECK(oracle::close_rel(analytic_logdet(f, {1, 2}, x0), numerical_logdet(f, {1, 2}, x0), 1e-4));
            CHECK(roundtrip_error(f, Tensor::from_data({3, 2}, randn(rng, 6, 2.0))) < 1e-6);
        }
    }
    SUBCASE("constraint-violating u is projected and stays invertible") {
        // w^T u = -4 < -1: must be reparametrized.
        Planar f({-4.0, 0.0}, {1.0, 0.0}, 0.1);
        Rng rng(9);
        Tensor x = Tensor::from_data({5, 2}, randn(rng, 10, 3.0));
        CHECK(roundtrip_error(f, x) < 1e-6);
        std::vector<double> x0 = randn(rng, 2);
        CHECK(oracle::close_rel(analytic_logdet(f, {1, 2}, x0), numerical_logdet(f, {1, 2}, x0), 1e-4));
    }
    SUBCASE("zero w rejected") {
        CHECK_THROWS_AS(Planar({1.0, 1.0}, {0.0, 0.0}, 0.0), ValueError);
    }
}

TEST_CASE("radial flow") {
    SUBCASE("beta = 0 is the identity") {
        Radial f({0.5, -0.5}, 1.0, 0.0);
        Tensor x = Tensor::from_data({1, 2}, {2.0, 1.0});
        FlowResult r = f.forward(x);
        CHECK(r.y.at(0) == doctest::Approx(2.0));
        CHECK(r.y.at(1) == doctest::Approx(1.0));
        CHECK(r.logdet.at(0) == doctest::Approx(0.0));
    }
    SUBCASE("centre is a fixed point") {
        NoGradGuard ng;
        Radial f({0.3, 0.4}, 0.8, 1.5);
        FlowResult r = f.forward(Tensor::from_data({1, 2}, {0.3, 0.4}));
        CHECK(r.y.at(0) == doctest::Approx(0.3));
        CHECK(r.y.at(1) == doctest::Approx(0.4));
    }
    SUBCASE("numerical Jacobian agreement and round trip") {
        Rng rng(29);
        for (int trial = 0; trial < 20; ++trial) {
            const double alpha = std::exp(rng.normal() * 0.5);
            const double beta = -alpha + std::exp(rng.normal()); // > -alpha
            Radial f(randn(rng, 2), alpha, beta);
            std::vector<double> x0 = randn(rng, 2);
            CHECK(oracle::close_rel(analytic_logdet(f, {1, 2}, x0), numerical_logdet(f, {1, 2}, x0), 1e-4));
            CHECK(roundtrip_error(f, Tensor::from_data({4, 2}, randn(rng, 8, 2.0))) < 1e-6);
        }
        // Contractive case beta < 0 as well.
        Radial g({0.0, 0.0}, 1.0, -0.6);
        std::vector<double> x0 = {1.3, -0.2};
        CHECK(oracle::close_rel(analytic_logdet(g, {1, 2}, x0), numerical_logdet(g, {1, 2}, x0), 1e-4));
        CHECK(roundtrip_error(g, Tensor::from_data({1, 2}, x0)) < 1e-6);
    }
    SUBCASE("parameter validation") {
        CHECK_THROWS_AS(Radial({0.0}, 0.0, 0.0), ValueError);
        CHECK_THROWS_AS(Radial({0.0}, -1.0, 0.0), ValueError);
        CHECK_THROWS_AS(Radial({0.0}, 1.0, -1.0), ValueError);
    }
}

TEST_CASE("actnorm") {
    SUBCASE("fresh layer without init is the identity") {
        NoGradGuard ng;
        ActNorm f(2);
        Rng rng(3);
        Tensor x = Tensor::from_data({2, 2, 2, 2}, randn(rng, 16));
        FlowResult r = f.forward(x);
        for (std::int64_t i = 0; i < 16; ++i) CHECK(r.y.at(i) == doctest::Approx(x.at(i)));
        CHECK(r.logdet.at(0) == doctest::Approx(0.0));
        CHECK_FALSE(f.actnorm_initialized());
    }
    SUBCASE("data-dependent init normalizes the first training batch") {
        ActNorm f(3);
        Rng rng(41);
        std::vector<double> vals = randn(rng, 4 * 3 * 4 * 4, 2.5);
        for (auto& v : vals) v += 1.7;
        Tensor x = Tensor::from_data({4, 3, 4, 4}, vals);
        FlowResult r = f.forward(x); // grad mode: triggers init
        CHECK(f.actnorm_initialized());

        Tensor mu = channel_mean(r.y.detach());
        Tensor sd = channel_std(r.y.detach());
        for (int c = 0; c < 3; ++c) {
            CHECK(std::abs(mu.at(c)) < 1e-6);
            CHECK(std::abs(sd.at(c) - 1.0) < 1e-6);
        }

        // A later batch must not re-trigger init.
        std::vector<Param> params;
        f.append_params("", params);
        std::vector<double> before(params[0].tensor.data().begin(), params[0].tensor.data().end());
        f.forward(Tensor::from_data({2, 3, 4, 4}, randn(rng, 96, 5.0)));
        for (std::size_t i = 0; i < before.size(); ++i)
            CHECK(params[0].tensor.at(static_cast<std::int64_t>(i)) == before[i]);
    }
    SUBCASE("logdet formula and Jacobian oracle") {
        ActNorm f(1);
        f.set_actnorm_initialized(true);
        set_param(f, "logs", {std::log(2.0)});
        Rng rng(8);
        std::vector<double> x0 = randn(rng, 4);
        CHECK(analytic_logdet(f, {1, 1, 2, 2}, x0) == doctest::Approx(4.0 * std::log(2.0)));
        CHECK(oracle::close_rel(analytic_logdet(f, {1, 1, 2, 2}, x0),
                                numerical_logdet(f, {1, 1, 2, 2}, x0), 1e-4));
        CHECK(roundtrip_error(f, Tensor::from_data({1, 1, 2, 2}, x0)) < 1e-9);
    }
}

TEST_CASE("invertible 1x1 convolution") {
    SUBCASE("identity parametrization") {
        InvConv1x1 f(3);
        Rng rng(2);
        Tensor x = Tensor::from_data({1, 3, 2, 2}, randn(rng, 12));
        FlowResult r = f.forward(x);
        for (std::int64_t i = 0; i < 12; ++i) CHECK(r.y.at(i) == doctest::Approx(x.at(i)));
        CHECK(r.logdet.at(0) == doctest::Approx(0.0));
    }
    SUBCASE("diagonal example") {
        InvConv1x1 f(2);
        set_param(f, "log_diag", {std::log(2.0), std::log(3.0)});
        Rng rng(6);
        std::vector<double> x0 = randn(rng, 2 * 2 * 2);
        Tensor x = Tensor::from_data({1, 2, 2, 2}, x0);
        FlowResult r = f.forward(x);
        CHECK(r.logdet.at(0) == doctest::Approx(4.0 * (std::log(2.0) + std::log(3.0))));
        for (int i = 0; i < 4; ++i) {
            CHECK(r.y.at(i) == doctest::Approx(2.0 * x.at(i)));
            CHECK(r.y.at(4 + i) == doctest::Approx(3.0 * x.at(4 + i)));
        }
    }
    SUBCASE("random c=4 with random permutation") {
        Rng rng(55);
        InvConv1x1 f(4, rng);
        set_param(f, "lower", randn(rng, 6, 0.4));
        set_param(f, "upper", randn(rng, 6, 0.4));
        set_param(f, "log_diag", randn(rng, 4, 0.3));

        Tensor x = Tensor::from_data({2, 4, 3, 3}, randn(rng, 72));
        CHECK(roundtrip_error(f, x) < 1e-8);

        // Analytic logdet equals h*w*ln|det W| with W assembled densely.
        NoGradGuard ng;
        Tensor w = f.matrix();
        std::vector<std::vector<double>> dense(4, std::vector<double>(4));
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 4; ++j) dense[i][j] = w.at(i * 4 + j);
        FlowResult r = f.forward(x);
        CHECK(r.logdet.at(0) == doctest::Approx(9.0 * oracle::log_abs_det(dense)).epsilon(1e-8));

        // Jacobian oracle on a 3-channel 2x2 (12 dims) instance.
        InvConv1x1 g(3, rng);
        set_param(g, "lower", randn(rng, 3, 0.4));
        set_param(g, "upper", randn(rng, 3, 0.4));
        set_param(g, "log_diag", randn(rng, 3, 0.3));
        std::vector<double> y0 = randn(rng, 12);
        CHECK(oracle::close_rel(analytic_logdet(g, {1, 3, 2, 2}, y0),
                                numerical_logdet(g, {1, 3, 2, 2}, y0), 1e-4));
    }
    SUBCASE("single channel degenerates to a scale") {
        InvConv1x1 f(1);
        set_param(f, "log_diag", {std::log(2.5)});
        Rng rng(1);
        std::vector<double> x0 = randn(rng, 4);
        Tensor x = Tensor::from_data({1, 1, 2, 2}, x0);
        FlowResult r = f.forward(x);
        for (int i = 0; i < 4; ++i) CHECK(r.y.at(i) == doctest::Approx(2.5 * x0[static_cast<std::size_t>(i)]));
        CHECK(roundtrip_error(f, x) < 1e-10);
    }
}

TEST_CASE("mask construction") {
    SUBCASE("channel-wise parity alternation") {
        MaskPartition l0 = make_mask(MaskScheme::channel_wise, 0, {4, 2, 2});
        CHECK(l0.a == std::vector<std::int64_t>{0, 1});
        CHECK(l0.b == std::vector<std::int64_t>{2, 3});
        MaskPartition l1 = make_mask(MaskScheme::channel_wise, 1, {4, 2, 2});
        CHECK(l1.a == std::vector<std::int64_t>{2, 3});
        CHECK(l1.b == std::vector<std::int64_t>{0, 1});
        CHECK_THROWS_AS(make_mask(MaskScheme::channel_wise, 0, {3, 2, 2}), ValueError);
    }
    SUBCASE("checkerboard") {
        MaskPartition m = make_mask(MaskScheme::checkerboard, 0, {1, 2, 2});
        CHECK(m.spatial);
        CHECK(m.a == std::vector<std::int64_t>{0, 3}); // (0,0) and (1,1)
        CHECK(m.b == std::vector<std::int64_t>{1, 2});
        MaskPartition m1 = make_mask(MaskScheme::checkerboard, 1, {1, 2, 2});
        CHECK(m1.a == std::vector<std::int64_t>{1, 2});
    }
    SUBCASE("cycle-1 on 4 channels visits every boundary") {
        std::set<std::int64_t> starts;
        std::set<std::int64_t> covered;
        for (int layer = 0; layer < 4; ++layer) {
            MaskPartition m = make_mask(MaskScheme::cycle, layer, {4, 2, 2}, 1);
            REQUIRE(m.a.size() == 2);
            starts.insert(m.a.front());
            for (auto c : m.a) covered.insert(c);
            // Exact two-set partition.
            std::set<std::int64_t> all(m.a.begin(), m.a.end());
            all.insert(m.b.begin(), m.b.end());
            CHECK(all.size() == 4);
        }
        CHECK(starts == std::set<std::int64_t>{0, 1, 2, 3});
        CHECK(covered.size() == 4);
    }
    SUBCASE("cycle coverage holds across widths and iteration counts") {
        for (std::int64_t C : {4, 6, 8, 12}) {
            for (int iters : {0, 1, 2}) {
                std::set<std::int64_t> covered;
                for (int layer = 0; layer < 32; ++layer) {
                    MaskPartition m = make_mask(MaskScheme::cycle, layer, {C, 2, 2}, iters);
                    for (auto c : m.a) covered.insert(c);
                }
                CHECK(covered.size() == static_cast<std::size_t>(C));
            }
        }
    }
}

TEST_CASE("affine coupling") {
    SUBCASE("zero-initialized conditioner gives the identity") {
        Rng rng(12);
        AffineCoupling f(make_mask(MaskScheme::channel_wise, 0, {4, 2, 2}), {4, 2, 2}, 0, 8, rng);
        Tensor x = Tensor::from_data({2, 4, 2, 2}, randn(rng, 32));
        NoGradGuard ng;
        FlowResult r = f.forward(x);
        for (std::int64_t i = 0; i < 32; ++i) CHECK(r.y.at(i) == doctest::Approx(x.at(i)));
        CHECK(r.logdet.at(0) == doctest::Approx(0.0));
        CHECK(r.logdet.at(1) == doctest::Approx(0.0));
    }
    SUBCASE("1D toy example: constant s = ln 2, t = 1") {
        Rng rng(13);
        MaskPartition part;
        part.a = {0};
        part.b = {1};
        AffineCoupling f(part, {2, 1, 1}, 0, 4, rng);
        // Zero the hidden layer and set the output bias: s_raw channel gives
        // tanh(s_raw)*2 = ln 2, t channel gives 1.
        std::vector<Param> params;
        f.append_params("", params);
        for (auto& p : params)
            std::fill(p.tensor.data().begin(), p.tensor.data().end(), 0.0);
        const double s_raw = std::atanh(std::log(2.0) / 2.0);
        set_param(f, "cond.b2", {s_raw, 1.0});

        Tensor x = Tensor::from_data({1, 2, 1, 1}, {3.0, -0.7});
        NoGradGuard ng;
        FlowResult r = f.forward(x);
        CHECK(r.y.at(0) == doctest::Approx(7.0));
        CHECK(r.y.at(1) == doctest::Approx(-0.7));
        CHECK(r.logdet.at(0) == doctest::Approx(std::log(2.0)));

        Tensor back = f.inverse(r.y);
        CHECK(back.at(0) == doctest::Approx(3.0));
    }
    SUBCASE("channel mode matches the numerical Jacobian (2x2x3, 12 dims)") {
        Rng rng(14);
        AffineCoupling f(make_mask(MaskScheme::channel_wise, 1, {2, 2, 3}), {2, 2, 3}, 0, 6, rng);
        set_param(f, "cond.w2", randn(rng, 2 * 6 * 9, 0.3));
        set_param(f, "cond.b2", randn(rng, 2, 0.3));
        std::vector<double> x0 = randn(rng, 12);
        CHECK(oracle::close_rel(analytic_logdet(f, {1, 2, 2, 3}, x0),
                                numerical_logdet(f, {1, 2, 2, 3}, x0), 1e-4));
        CHECK(roundtrip_error(f, Tensor::from_data({1, 2, 2, 3}, x0)) < 1e-6);
    }
    SUBCASE("checkerboard mode matches the numerical Jacobian") {
        Rng rng(15);
        AffineCoupling f(make_mask(MaskScheme::checkerboard, 0, {3, 2, 2}), {3, 2, 2}, 0, 6, rng);
        set_param(f, "cond.w2", randn(rng, 6 * 6 * 9, 0.3));
        set_param(f, "cond.b2", randn(rng, 6, 0.3));
        std::vector<double> x0 = randn(rng, 12);
        CHECK(oracle::close_rel(analytic_logdet(f, {1, 3, 2, 2}, x0),
                                numerical_logdet(f, {1, 3, 2, 2}, x0), 1e-4));
        CHECK(roundtrip_error(f, Tensor::from_data({1, 3, 2, 2}, x0)) < 1e-6);
    }
    SUBCASE("context is consumed and changes the output") {
        Rng rng(16);
        MaskPartition part;
        part.a = {0};
        part.b = {1, 2};
        AffineCoupling f(part, {3, 2, 2}, 1, 6, rng);
        set_param(f, "cond.w2", randn(rng, 2 * 6 * 9, 0.5));

        Tensor x = Tensor::from_data({1, 3, 2, 2}, randn(rng, 12));
        Tensor ctx1 = Tensor::from_data({1, 1, 2, 2}, randn(rng, 4));
        Tensor ctx2 = Tensor::from_data({1, 1, 2, 2}, randn(rng, 4));
        NoGradGuard ng;
        FlowResult r1 = f.forward(x, &ctx1);
        FlowResult r2 = f.forward(x, &ctx2);
        bool differs = false;
        for (std::int64_t i = 0; i < 12; ++i)
            if (std::abs(r1.y.at(i) - r2.y.at(i)) > 1e-12) differs = true;
        CHECK(differs);

        // Jacobian in x with the context held fixed.
        std::vector<double> x0(x.data().begin(), x.data().end());
        CHECK(oracle::close_rel(analytic_logdet(f, {1, 3, 2, 2}, x0, &ctx1),
                                numerical_logdet(f, {1, 3, 2, 2}, x0, &ctx1), 1e-4));
        CHECK(roundtrip_error(f, x, &ctx1) < 1e-6);

        CHECK_THROWS_AS(f.forward(x, nullptr), ValueError);
        AffineCoupling g(part, {3, 2, 2}, 0, 6, rng);
        CHECK_THROWS_AS(g.forward(x, &ctx1), ValueError);
    }
    SUBCASE("degenerate partitions rejected") {
        Rng rng(18);
        MaskPartition bad;
        bad.a = {0, 1};
        CHECK_THROWS_AS(AffineCoupling(bad, {2, 2, 2}, 0, 4, rng), ValueError);
    }
}

TEST_CASE("squeeze flow and channel split") {
    Rng rng(19);
    SqueezeFlow sq;
    Tensor x = Tensor::from_data({1, 1, 4, 4}, randn(rng, 16));
    FlowResult r = sq.forward(x);
    CHECK(r.y.shape() == Shape{1, 4, 2, 2});
    CHECK(r.logdet.at(0) == 0.0);
    CHECK(roundtrip_error(sq, x) == 0.0);

    Tensor big = Tensor::from_data({2, 8, 2, 2}, randn(rng, 64));
    auto [kept, factored] = split_channels(big);
    CHECK(kept.shape() == Shape{2, 4, 2, 2});
    CHECK(factored.shape() == Shape{2, 4, 2, 2});
    Tensor re = unsplit_channels(kept, factored);
    for (std::int64_t i = 0; i < big.numel(); ++i) CHECK(re.at(i) == big.at(i));
    CHECK_THROWS_AS(split_channels(Tensor({1, 3, 2, 2})), ShapeError);
}

TEST_CASE("flow chain composes logdets additively") {
    Rng rng(20);
    FlowChain chain;
    chain.push(std::make_unique<ElementwiseAffine>(1.7, 0.2));
    chain.push(std::make_unique<Planar>(2, rng));
    chain.push(std::make_unique<Radial>(2, rng));
    chain.push(std::make_unique<LinearLU>(2));

    Tensor x = Tensor::from_data({3, 2}, randn(rng, 6));
    NoGradGuard ng;
    FlowResult total = chain.forward(x);

    Tensor cur = x;
    double expect0 = 0.0;
    for (std::size_t i = 0; i < chain.size(); ++i) {
        FlowResult step = chain.step(i).forward(cur);
        expect0 += step.logdet.at(0);
        cur = step.y;
    }
    CHECK(total.logdet.at(0) == doctest::Approx(expect0).epsilon(1e-12));
    for (std::int64_t i = 0; i < cur.numel(); ++i) CHECK(total.y.at(i) == doctest::Approx(cur.at(i)));

    Tensor back = chain.inverse(total.y);
    for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(back.at(i) == doctest::Approx(x.at(i)).epsilon(1e-9));
}

TEST_CASE("round trips over many random parameterizations") {
    Rng rng(21);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const double a = rng.uniform(0.2, 2.0) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
        ElementwiseAffine ew(a, rng.normal());
        worst = std::max(worst, roundtrip_error(ew, Tensor::from_data({2, 3}, randn(rng, 6, 2.0))));

        Planar pl(randn(rng, 3), randn(rng, 3), rng.normal());
        worst = std::max(worst, roundtrip_error(pl, Tensor::from_data({2, 3}, randn(rng, 6, 2.0))));

        const double alpha = std::exp(rng.normal() * 0.5);
        Radial ra(randn(rng, 3), alpha, -alpha + std::exp(rng.normal()));
        worst = std::max(worst, roundtrip_error(ra, Tensor::from_data({2, 3}, randn(rng, 6, 2.0))));

        LinearLU lu(3);
        set_param(lu, "lower", randn(rng, 3, 0.5));
        set_param(lu, "upper", randn(rng, 3, 0.5));
        set_param(lu, "log_diag", randn(rng, 3, 0.4));
        set_param(lu, "bias", randn(rng, 3));
        worst = std::max(worst, roundtrip_error(lu, Tensor::from_data({2, 3}, randn(rng, 6, 2.0))));

        ActNorm an(2);
        an.set_actnorm_initialized(true);
        set_param(an, "logs", randn(rng, 2, 0.5));
        set_param(an, "bias", randn(rng, 2));
        worst = std::max(worst, roundtrip_error(an, Tensor::from_data({1, 2, 2, 2}, randn(rng, 8))));

        InvConv1x1 ic(4, rng);
        set_param(ic, "lower", randn(rng, 6, 0.4));
        set_param(ic, "upper", randn(rng, 6, 0.4));
        set_param(ic, "log_diag", randn(rng, 4, 0.3));
        worst = std::max(worst, roundtrip_error(ic, Tensor::from_data({1, 4, 2, 2}, randn(rng, 16))));

        AffineCoupling cp(make_mask(MaskScheme::channel_wise, trial, {4, 2, 2}), {4, 2, 2}, 0, 6, rng);
        set_param(cp, "cond.w2", randn(rng, 4 * 6 * 9, 0.4));
        set_param(cp, "cond.b2", randn(rng, 4, 0.4));
        worst = std::max(worst, roundtrip_error(cp, Tensor::from_data({1, 4, 2, 2}, randn(rng, 16))));
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("1D chain conserves probability mass") {
    Rng rng(22);
    FlowChain chain;
    chain.push(std::make_unique<ElementwiseAffine>(1.4, -0.3));
    chain.push(std::make_unique<Planar>(std::vector<double>{0.8}, std::vector<double>{0.9}, 0.2));

    // p(x) = N(f(x); 0, 1) * |det df/dx|
    NoGradGuard ng;
    auto density = [&](double x) {
        FlowResult r = chain.forward(Tensor::from_data({1, 1}, {x}));
        const double z = r.y.at(0);
        const double log_base = -0.5 * std::log(2.0 * 3.14159265358979323846) - 0.5 * z * z;
        return std::exp(log_base + r.logdet.at(0));
    };
    const double mass = oracle::trapezoid(density, -10.0, 10.0, 20000);
    CHECK(mass == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("gradients flow through every parameterized bijection") {
    Rng rng(24);
    FlowChain chain;
    chain.push(std::make_unique<ElementwiseAffine>(1.2, 0.1));
    chain.push(std::make_unique<Planar>(2, rng));
    chain.push(std::make_unique<Radial>(2, rng));
    chain.push(std::make_unique<LinearLU>(2));

    Tensor x = Tensor::from_data({4, 2}, randn(rng, 8));
    FlowResult r = chain.forward(x);
    Tensor loss = mean(square(r.y)) - mean(r.logdet);
    backward(loss);

    std::vector<Param> params;
    chain.append_params("chain.", params);
    CHECK(params.size() == 12);
    for (const auto& p : params) {
        INFO(p.name);
        CHECK(p.tensor.has_grad());
    }
}
