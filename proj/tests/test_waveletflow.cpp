#include "doctest.h"

#include "flowood/errors.hpp"
#include "flowood/waveletflow.hpp"
#include "support/oracles.hpp"

#include <cmath>
#include <vector>

using namespace flowood;

namespace {

constexpr double kPi = 3.14159265358979323846;

std::vector<double> randn(Rng& rng, std::int64_t n, double scale = 1.0) {
    std::vector<double> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = rng.normal() * scale;
    return v;
}

WaveletFlowConfig small_config(std::int64_t n_levels, std::int64_t channels) {
    WaveletFlowConfig cfg;
    cfg.n_levels = n_levels;
    cfg.channels = channels;
    cfg.flows_per_level = 2;
    cfg.hidden_channels = 8;
    cfg.base_flow_steps = 2;
    return cfg;
}

void randomize_couplings(WaveletFlowModel& m, Rng& rng, double scale = 0.25) {
    std::vector<Param> params;
    m.append_params(params);
    for (auto& p : params) {
        if (p.name.find("cond.w2") == std::string::npos && p.name.find("cond.b2") == std::string::npos)
            continue;
        for (auto& v : p.tensor.data()) v = rng.normal() * scale;
    }
}

std::vector<std::vector<double>> snapshot(const std::vector<Param>& params) {
    std::vector<std::vector<double>> out;
    for (const auto& p : params)
        out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
    return out;
}

} // namespace

TEST_CASE("constant image on identity flows has a closed form") {
    Rng rng(3);
    WaveletFlowModel m(small_config(1, 1), rng);
    NoGradGuard ng; // keep actnorm uninitialized

    const double c = 0.25;
    Tensor img({1, 1, 2, 2});
    for (auto& v : img.data()) v = c;

    // Pyramid: I_0 = 2c, D_0 = 0 (three coefficients).
    const double detail_term = -1.5 * std::log(2.0 * kPi);
    const double base_term = -0.5 * std::log(2.0 * kPi) - 0.5 * (2.0 * c) * (2.0 * c);
    const double corr = -4.0 * std::log(256.0);

    CHECK(m.per_level_log_likelihood(img, 0).at(0) == doctest::Approx(detail_term).epsilon(1e-12));
    CHECK(m.per_level_log_likelihood(img, 1).at(0) == doctest::Approx(base_term).epsilon(1e-12));
    CHECK(m.total_log_likelihood(img).at(0) ==
          doctest::Approx(detail_term + base_term + corr).epsilon(1e-12));
    CHECK(m.dequant_correction() == doctest::Approx(corr));
}

TEST_CASE("total decomposes into per-level terms plus the correction") {
    Rng rng(9);
    WaveletFlowModel m(small_config(3, 1), rng);
    randomize_couplings(m, rng);
    m.set_actnorm_initialized(true);

    NoGradGuard ng;
    Tensor batch = Tensor::from_data({3, 1, 8, 8}, randn(rng, 192, 0.3));
    Tensor total = m.total_log_likelihood(batch);
    for (std::int64_t s = 0; s < 3; ++s) {
        double sum = m.dequant_correction();
        for (std::int64_t level = 0; level <= m.n_levels(); ++level)
            sum += m.per_level_log_likelihood(batch, level).at(s);
        CHECK(std::abs(total.at(s) - sum) < 1e-9);
    }

    std::int64_t coeffs = 0;
    for (std::int64_t level = 0; level <= m.n_levels(); ++level) coeffs += m.level_coeff_count(level);
    CHECK(coeffs == m.data_dim());
    CHECK(m.data_dim() == 64);
}

TEST_CASE("level training is isolated") {
    Rng rng(15);
    WaveletFlowModel m(small_config(2, 1), rng);
    randomize_couplings(m, rng);

    Tensor batch = Tensor::from_data({4, 1, 4, 4}, randn(rng, 64, 0.3));

    std::vector<Param> all;
    m.append_params(all);
    std::vector<Param> target;
    m.append_level_params(1, target);
    REQUIRE(!target.empty());

    // Two plain gradient steps on level 1 only.
    for (int it = 0; it < 2; ++it) {
        for (auto& p : all) p.tensor.zero_grad();
        Tensor loss = m.level_nll_loss(batch, 1);
        backward(loss);
        NoGradGuard ng;
        for (auto& p : target) {
            if (!p.tensor.has_grad()) continue;
            auto g = p.tensor.grad_data();
            for (std::size_t i = 0; i < g.size(); ++i) p.tensor.data()[i] -= 1e-3 * g[i];
        }
    }

    // Nothing outside level 1 received a gradient, let alone an update.
    bool level1_moved = false;
    std::vector<Param> after;
    m.append_params(after);
    std::vector<std::vector<double>> snap = snapshot(after);
    for (std::size_t i = 0; i < after.size(); ++i) {
        const bool in_level1 = after[i].name.rfind("level1.", 0) == 0;
        if (!in_level1) {
            CHECK_FALSE(after[i].tensor.has_grad());
        } else if (after[i].tensor.has_grad()) {
            level1_moved = true;
        }
    }
    CHECK(level1_moved);

    // And a step on the base flow leaves the detail levels untouched.
    std::vector<Param> base_params;
    m.append_level_params(m.n_levels(), base_params);
    for (auto& p : after) p.tensor.zero_grad();
    Tensor loss = m.level_nll_loss(batch, m.n_levels());
    backward(loss);
    {
        NoGradGuard ng;
        for (auto& p : base_params) {
            if (!p.tensor.has_grad()) continue;
            auto g = p.tensor.grad_data();
            for (std::size_t i = 0; i < g.size(); ++i) p.tensor.data()[i] -= 1e-3 * g[i];
        }
    }
    for (std::size_t i = 0; i < after.size(); ++i) {
        if (after[i].name.rfind("base.", 0) == 0) continue;
        for (std::size_t j = 0; j < snap[i].size(); ++j)
            CHECK(after[i].tensor.at(static_cast<std::int64_t>(j)) == snap[i][j]);
    }
}

TEST_CASE("per-level loss reaches every parameter of that level") {
    Rng rng(21);
    WaveletFlowModel m(small_config(2, 1), rng);
    randomize_couplings(m, rng); // zero-init couplings would have dead w1 grads
    Tensor batch = Tensor::from_data({4, 1, 4, 4}, randn(rng, 64, 0.3));

    Tensor loss = m.level_nll_loss(batch, 0);
    backward(loss);
    std::vector<Param> params;
    m.append_level_params(0, params);
    for (const auto& p : params) {
        INFO(p.name);
        CHECK(p.tensor.has_grad());
    }
}

TEST_CASE("conditioning on the low-pass is live") {
    Rng rng(27);
    WaveletFlowModel m(small_config(2, 1), rng);
    randomize_couplings(m, rng, 0.5);
    m.set_actnorm_initialized(true);

    NoGradGuard ng;
    // Same detail coefficients, different low-pass: a constant offset moves
    // only the lows, so any likelihood difference comes from the context.
    std::vector<double> base_img = randn(rng, 16, 0.2);
    std::vector<double> shifted = base_img;
    for (auto& v : shifted) v += 0.1;
    Tensor a = Tensor::from_data({1, 1, 4, 4}, base_img);
    Tensor b = Tensor::from_data({1, 1, 4, 4}, shifted);

    const double lla = m.per_level_log_likelihood(a, 1).at(0);
    const double llb = m.per_level_log_likelihood(b, 1).at(0);
    CHECK(std::abs(lla - llb) > 1e-8);
}

TEST_CASE("sampling") {
    Rng rng(33);
    WaveletFlowModel m(small_config(2, 1), rng);

    SUBCASE("temperature -> 0 on a fresh model gives mid-gray") {
        Tensor img = m.sample(2, 1e-12, 5);
        CHECK(img.shape() == Shape{2, 1, 4, 4});
        for (std::int64_t i = 0; i < img.numel(); ++i) CHECK(img.at(i) == doctest::Approx(0.5).epsilon(1e-9));
    }
    SUBCASE("analyzing a sample recovers the drawn latents") {
        randomize_couplings(m, rng);
        m.set_actnorm_initialized(true);
        const double temp = 0.8;
        Tensor img = m.sample(2, temp, 4321);

        Rng replay(4321);
        std::vector<double> zs;
        for (std::int64_t i = 0; i < 2 * 1; ++i) zs.push_back(replay.normal() * temp);        // base
        for (std::int64_t i = 0; i < 2 * 3; ++i) zs.push_back(replay.normal() * temp);        // level 0
        for (std::int64_t i = 0; i < 2 * 3 * 4; ++i) zs.push_back(replay.normal() * temp);    // level 1

        NoGradGuard ng;
        Tensor x = img - 0.5;
        HaarPyramid pyr = build_pyramid(x);
        std::size_t k = 0;
        double worst = 0.0;
        auto compare = [&](const Tensor& z) {
            for (double v : z.data()) worst = std::max(worst, std::abs(v - zs[k++]));
        };
        // Base term first, then levels ascending, matching the draw order.
        compare(m.encode_level(x, m.n_levels()));
        compare(m.encode_level(x, 0));
        compare(m.encode_level(x, 1));
        CHECK(k == zs.size());
        CHECK(worst < 1e-5);
    }
    SUBCASE("fixed seed is bit-identical") {
        Tensor a = m.sample(2, 1.0, 7);
        Tensor b = m.sample(2, 1.0, 7);
        for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(a.at(i) == b.at(i));
    }
}

TEST_CASE("validation") {
    Rng rng(39);
    WaveletFlowModel m(small_config(2, 1), rng);
    CHECK_THROWS_AS(m.per_level_log_likelihood(Tensor({1, 1, 8, 8}), 0), ShapeError);
    CHECK_THROWS_AS(m.per_level_log_likelihood(Tensor({1, 1, 4, 4}), 3), ValueError);
    CHECK_THROWS_AS(m.level_coeff_count(-1), ValueError);

    WaveletFlowConfig bad = small_config(0, 1);
    CHECK_THROWS_AS(WaveletFlowModel(bad, rng), ValueError);
}

TEST_CASE("non-finite diagnostics") {
    Rng rng(45);
    WaveletFlowModel m(small_config(2, 1), rng);
    m.set_actnorm_initialized(true);
    Tensor x = Tensor::from_data({1, 1, 4, 4}, randn(rng, 16, 0.3));
    CHECK(m.first_nonfinite_layer(x) == "");

    std::vector<Param> params;
    m.append_params(params);
    for (auto& p : params)
        if (p.name == "level1.s0.actnorm.logs") p.tensor.data()[0] = std::numeric_limits<double>::infinity();
    CHECK(m.first_nonfinite_layer(x) == "level1.s0.actnorm");
}
