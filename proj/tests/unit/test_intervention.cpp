#include <doctest.h>

#include <cmath>

#include "crft/intervention.hpp"
#include "crft/ops.hpp"
#include "fixtures.hpp"

using namespace crft;
using crft::testing::relative_error;

namespace {

Tensor gaussian(std::size_t r, std::size_t c, Rng& rng) {
    Tensor t({r, c});
    for (double& v : t.values()) v = rng.normal();
    return t;
}

}  // namespace

TEST_SUITE("intervention") {

TEST_CASE("init params") {
    const InterventionParams p = init_params(16, 4, 0, 2, 2, 7);
    CHECK(p.blocks().size() == 6);
    CHECK(p.groups_in_layer(1) == 2);
    for (const auto& [key, b] : p.blocks()) {
        CHECK(orthonormality_error(b.R) <= 1e-6);
        for (double v : b.b.values()) CHECK(v == 0.0);
        CHECK(b.W.shape() == Shape{4, 16});
    }
    CHECK(p.identical(init_params(16, 4, 0, 2, 2, 7)));
    CHECK_FALSE(p.identical(init_params(16, 4, 0, 2, 2, 8)));
    CHECK_THROWS_AS(init_params(4, 5, 0, 0, 1, 1), std::invalid_argument);
    CHECK(p.trainable_count() == 6u * (4 * 16 + 4));
    CHECK(init_params(16, 4, 0, 2, 2, 7, true).trainable_count() == 6u * (2 * 4 * 16 + 4));
    CHECK_THROWS_AS(p.block(3, 0), std::out_of_range);
}

TEST_CASE("orthonormalize") {
    const Tensor diag = orthonormalize(Tensor::matrix(2, 2, {2, 0, 0, 3}));
    CHECK(diag.identical(Tensor::matrix(2, 2, {1, 0, 0, 1})));

    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const Tensor a = gaussian(4, 16, rng);
        const Tensor q = orthonormalize(a);
        CHECK(orthonormality_error(q) <= 1e-10);
        // Same row space: each input row is reproduced by projection onto q.
        for (std::size_t r = 0; r < 4; ++r) {
            std::vector<double> proj(16, 0.0);
            for (std::size_t k = 0; k < 4; ++k) {
                double dot = 0.0;
                for (std::size_t c = 0; c < 16; ++c) dot += a(r, c) * q(k, c);
                for (std::size_t c = 0; c < 16; ++c) proj[c] += dot * q(k, c);
            }
            for (std::size_t c = 0; c < 16; ++c) CHECK(std::abs(proj[c] - a(r, c)) <= 1e-10);
        }
        // Idempotent up to sign per row.
        const Tensor again = orthonormalize(q);
        for (std::size_t r = 0; r < 4; ++r) {
            const double sign = again(r, 0) * q(r, 0) < 0 ? -1.0 : 1.0;
            for (std::size_t c = 0; c < 16; ++c) CHECK(std::abs(again(r, c) - sign * q(r, c)) <= 1e-12);
        }
    }
    CHECK_THROWS_AS(orthonormalize(Tensor::matrix(2, 2, {1, 2, 2, 4})), std::domain_error);
    CHECK_THROWS_AS(orthonormalize(Tensor({3, 2}, 1.0)), std::domain_error);
}

TEST_CASE("apply closed forms") {
    InterventionBlock b{Tensor::matrix(1, 2, {1, 0}), Tensor::matrix(1, 2, {0, 0}), Tensor::vector({1})};
    const std::vector<double> h = {0.3, 0.7};
    const auto out = crft::apply(h, b);
    CHECK(out[0] == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(out[1] == 0.7);

    Rng rng(4);
    const InterventionParams p = init_params(16, 4, 0, 0, 1, 5);
    InterventionBlock id = p.block(0, 0);
    id.W = id.R;
    std::vector<double> x(16);
    for (double& v : x) v = rng.normal();
    CHECK(crft::apply(x, id) == x);
    CHECK(crft::apply(crft::apply(x, id), id) == x);
    CHECK_THROWS_AS(crft::apply(std::vector<double>(3), id), ShapeError);
}

TEST_CASE("edit leaves the orthogonal complement untouched") {
    Rng rng(6);
    for (int trial = 0; trial < 100; ++trial) {
        const InterventionParams p = init_params(12, 3, 0, 0, 1, 100 + static_cast<std::uint64_t>(trial));
        InterventionBlock b = p.block(0, 0);
        b.W = gaussian(3, 12, rng);
        for (double& v : b.b.values()) v = rng.normal();
        // Completion of R to a full orthonormal basis.
        Tensor full({12, 12});
        for (std::size_t r = 0; r < 3; ++r) {
            for (std::size_t c = 0; c < 12; ++c) full(r, c) = b.R(r, c);
        }
        Tensor extra = gaussian(9, 12, rng);
        for (std::size_t r = 0; r < 9; ++r) {
            for (std::size_t c = 0; c < 12; ++c) full(3 + r, c) = extra(r, c);
        }
        const Tensor basis = orthonormalize(full);
        std::vector<double> h(12);
        for (double& v : h) v = rng.normal();
        const auto out = crft::apply(h, b);
        for (std::size_t r = 3; r < 12; ++r) {
            double a = 0.0;
            double c = 0.0;
            for (std::size_t k = 0; k < 12; ++k) {
                a += basis(r, k) * out[k];
                c += basis(r, k) * h[k];
            }
            CHECK(std::abs(a - c) <= 1e-12);
        }
        // Inside the subspace the coordinates become W h + b.
        for (std::size_t r = 0; r < 3; ++r) {
            double rd = 0.0;
            double src = b.b[r];
            for (std::size_t k = 0; k < 12; ++k) {
                rd += b.R(r, k) * out[k];
                src += b.W(r, k) * h[k];
            }
            CHECK(std::abs(rd - src) <= 1e-12);
        }
    }
}

TEST_CASE("parameter accounting") {
    CrftConfig cfg;
    CHECK(param_count(cfg, 4096, 32) == 1048832u);
    CHECK(static_cast<double>(param_count(cfg, 4096, 32)) / 6.738e9 * 100 == doctest::Approx(0.0156).epsilon(0.005));
    cfg.train_R = true;
    CHECK(param_count(cfg, 4096, 32) == 2097408u);
    CHECK(static_cast<double>(param_count(cfg, 4096, 32)) / 6.738e9 * 100 == doctest::Approx(0.0311).epsilon(0.005));
    cfg.train_R = false;
    cfg.segment_grouping = true;
    CHECK(param_count(cfg, 4096, 32) == 2u * 1048832u);
}

TEST_CASE("taped application matches the direct edit and its gradients") {
    Rng rng(9);
    InterventionParams p = init_params(6, 2, 0, 0, 2, 10, true);
    for (auto& [key, b] : p.blocks()) {
        b.W = gaussian(2, 6, rng);
        for (double& v : b.b.values()) v = rng.normal();
    }
    const Tensor hidden = gaussian(5, 6, rng);
    LayerSites sites{0, {1, 3, kSentinel}, {0, 1, 0}};

    Tape t;
    Var h = t.param(hidden, true);
    const BoundInterventions bound = bind(t, p, true);
    Var out = apply_on_tape(t, h, sites, bound);
    const Tensor& got = t.value(out);
    for (std::size_t r = 0; r < 5; ++r) {
        std::vector<double> expect(hidden.row(r).begin(), hidden.row(r).end());
        if (r == 1) expect = crft::apply(hidden.row(r), p.block(0, 0));
        if (r == 3) expect = crft::apply(hidden.row(r), p.block(0, 1));
        for (std::size_t c = 0; c < 6; ++c) CHECK(got(r, c) == doctest::Approx(expect[c]).epsilon(1e-14));
    }

    const Tensor weights = gaussian(5, 6, rng);
    t.backward(ops::sum(t, ops::mul(t, out, t.constant(weights))));
    auto objective = [&](const InterventionParams& q, const Tensor& x) {
        double s = 0.0;
        for (std::size_t r = 0; r < 5; ++r) {
            std::vector<double> row(x.row(r).begin(), x.row(r).end());
            if (r == 1) row = crft::apply(x.row(r), q.block(0, 0));
            if (r == 3) row = crft::apply(x.row(r), q.block(0, 1));
            for (std::size_t c = 0; c < 6; ++c) s += row[c] * weights(r, c);
        }
        return s;
    };
    const double step = 1e-6;
    for (int g = 0; g < 2; ++g) {
        const BoundBlock& bb = bound.blocks.at({0, g});
        for (auto [var, pick] : {std::pair{bb.W, 0}, std::pair{bb.b, 1}, std::pair{bb.R, 2}}) {
            const Tensor* grad = t.grad(var);
            REQUIRE(grad != nullptr);
            for (std::size_t i = 0; i < grad->size(); ++i) {
                InterventionParams plus = p;
                InterventionParams minus = p;
                auto field = [&](InterventionParams& q) -> Tensor& {
                    InterventionBlock& blk = q.block(0, g);
                    return pick == 0 ? blk.W : (pick == 1 ? blk.b : blk.R);
                };
                field(plus)[i] += step;
                field(minus)[i] -= step;
                const double fd = (objective(plus, hidden) - objective(minus, hidden)) / (2 * step);
                CHECK(relative_error((*grad)[i], fd, 1e-5) < 1e-5);
            }
        }
    }

    Tape frozen;
    const BoundInterventions fb = bind(frozen, init_params(6, 2, 0, 0, 1, 1, false), true);
    CHECK_FALSE(frozen.requires_grad(fb.blocks.at({0, 0}).R));
    CHECK(frozen.requires_grad(fb.blocks.at({0, 0}).W));
}

}  // TEST_SUITE
