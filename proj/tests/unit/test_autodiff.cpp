#include <doctest.h>

#include <cmath>
#include <functional>

#include "crft/ops.hpp"
#include "crft/rng.hpp"
#include "fixtures.hpp"

using namespace crft;
using crft::testing::relative_error;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.values()) v = scale * rng.normal();
    return t;
}

using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

// Builds f(inputs) on a tape, projects it to a scalar with fixed random
// weights and compares every input gradient with central differences.
double max_gradient_error(const Builder& build, std::vector<Tensor> inputs, std::uint64_t seed) {
    Rng rng(seed);
    Tensor proj;
    auto scalar = [&](Tape& t, const std::vector<Var>& vars) {
        Var out = build(t, vars);
        if (proj.size() == 0) proj = random_tensor(t.value(out).shape(), rng);
        return ops::sum(t, ops::mul(t, out, t.constant(proj)));
    };
    auto value_at = [&](const std::vector<Tensor>& xs) {
        Tape t;
        std::vector<Var> vars;
        for (const auto& x : xs) vars.push_back(t.param(x, false));
        return t.value(scalar(t, vars))[0];
    };

    Tape t;
    std::vector<Var> vars;
    for (const auto& x : inputs) vars.push_back(t.param(x, true));
    Var loss = scalar(t, vars);
    t.backward(loss);

    double worst = 0.0;
    const double h = 1e-5;
    for (std::size_t a = 0; a < inputs.size(); ++a) {
        const Tensor* g = t.grad(vars[a]);
        for (std::size_t i = 0; i < inputs[a].size(); ++i) {
            std::vector<Tensor> plus = inputs;
            std::vector<Tensor> minus = inputs;
            plus[a][i] += h;
            minus[a][i] -= h;
            const double fd = (value_at(plus) - value_at(minus)) / (2 * h);
            const double an = g != nullptr ? (*g)[i] : 0.0;
            worst = std::max(worst, relative_error(an, fd, 1e-4));
        }
    }
    return worst;
}

}  // namespace

TEST_SUITE("autodiff") {

TEST_CASE("softmax_causal closed forms") {
    Tape t;
    Var s = t.leaf(Tensor::matrix(2, 2, {0.0, 5.0, 0.0, 0.0}));
    const Tensor& p = t.value(ops::softmax_causal(t, s));
    CHECK(p(0, 0) == 1.0);
    CHECK(p(0, 1) == 0.0);
    CHECK(p(1, 0) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(p(1, 1) == doctest::Approx(0.5).epsilon(1e-15));

    Tape t2;
    Var s2 = t2.leaf(Tensor::matrix(2, 2, {0.0, 0.0, std::log(2.0), 0.0}));
    const Tensor& p2 = t2.value(ops::softmax_causal(t2, s2));
    CHECK(p2(1, 0) == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
    CHECK(p2(1, 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
}

TEST_CASE("softmax_causal rows are stochastic and masked") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 1 + rng.below(9);
        Tape t;
        const Tensor& p = t.value(ops::softmax_causal(t, t.leaf(random_tensor({n, n}, rng, 4.0))));
        for (std::size_t i = 0; i < n; ++i) {
            double sum = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                if (j > i) CHECK(p(i, j) == 0.0);
                sum += p(i, j);
            }
            CHECK(std::abs(sum - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("softmax gradient rows sum to zero") {
    Rng rng(5);
    Tape t;
    Var s = t.leaf(random_tensor({5, 5}, rng), true);
    Var p = ops::softmax_causal(t, s);
    t.backward(ops::sum(t, ops::mul(t, p, t.leaf(random_tensor({5, 5}, rng)))));
    const Tensor& g = *t.grad(s);
    for (std::size_t i = 0; i < 5; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < 5; ++j) sum += g(i, j);
        CHECK(std::abs(sum) <= 1e-12);
    }
}

TEST_CASE("softmax_causal rejects bad shapes") {
    Tape t;
    CHECK_THROWS_AS(ops::softmax_causal(t, t.leaf(Tensor({2, 3}))), ShapeError);
    CHECK_THROWS_AS(ops::softmax_causal(t, t.leaf(Tensor({0, 0}))), ShapeError);
}

TEST_CASE("cross_entropy closed forms and errors") {
    {
        Tape t;
        Var logits = t.leaf(Tensor::matrix(1, 4, {0, 0, 0, 0}));
        const int label[] = {2};
        CHECK(t.value(ops::cross_entropy(t, logits, label))[0] == doctest::Approx(std::log(4.0)).epsilon(1e-14));
    }
    {
        Tape t;
        Var logits = t.leaf(Tensor::matrix(1, 4, {800, 0, 0, 0}));
        const int label[] = {0};
        CHECK(t.value(ops::cross_entropy(t, logits, label))[0] == doctest::Approx(0.0));
    }
    {
        // Independent per-position -log p over a random 3x5 block.
        Rng rng(11);
        Tensor z = random_tensor({3, 5}, rng, 2.0);
        const int labels[] = {4, -1, 1};
        Tape t;
        const double got = t.value(ops::cross_entropy(t, t.leaf(z), labels))[0];
        double expect = 0.0;
        for (std::size_t r : {0u, 2u}) {
            double sum = 0.0;
            for (std::size_t c = 0; c < 5; ++c) sum += std::exp(z(r, c));
            expect += -std::log(std::exp(z(r, static_cast<std::size_t>(labels[r]))) / sum);
        }
        CHECK(got == doctest::Approx(expect / 2).epsilon(1e-13));
    }
    Tape t;
    Var logits = t.leaf(Tensor({2, 4}));
    const int bad[] = {0, 4};
    const int none[] = {-1, -1};
    CHECK_THROWS_AS(ops::cross_entropy(t, logits, bad), std::out_of_range);
    CHECK_THROWS_AS(ops::cross_entropy(t, logits, none), std::invalid_argument);
}

TEST_CASE("backward basics") {
    Tape t;
    Var x = t.leaf(Tensor::vector({1, 2, 3}), true);
    Var unrelated = t.leaf(Tensor::vector({4, 5}), true);
    Var loss = ops::sum(t, x);
    t.backward(loss);
    for (double g : t.grad(x)->values()) CHECK(g == 1.0);
    const Tensor* gu = t.grad(unrelated);
    if (gu != nullptr) {
        for (double g : gu->values()) CHECK(g == 0.0);
    }
    CHECK_THROWS_AS(t.backward(loss), TapeError);

    Tape t2;
    Var y = t2.leaf(Tensor::vector({1, 2}), true);
    CHECK_THROWS_AS(t2.backward(y), TapeError);
}

TEST_CASE("operation gradients match finite differences") {
    Rng rng(17);
    for (int trial = 0; trial < 5; ++trial) {
        const std::size_t m = 1 + rng.below(4);
        const std::size_t k = 1 + rng.below(4);
        const std::size_t n = 1 + rng.below(4);
        const auto seed = static_cast<std::uint64_t>(trial) + 100;
        CAPTURE(m);
        CAPTURE(k);
        CAPTURE(n);
        CHECK(max_gradient_error([](Tape& t, const std::vector<Var>& v) { return ops::matmul(t, v[0], v[1]); },
                                 {random_tensor({m, k}, rng), random_tensor({k, n}, rng)}, seed) < 1e-3);
        CHECK(max_gradient_error([](Tape& t, const std::vector<Var>& v) { return ops::matmul_nt(t, v[0], v[1]); },
                                 {random_tensor({m, k}, rng), random_tensor({n, k}, rng)}, seed) < 1e-3);
        CHECK(max_gradient_error(
                  [](Tape& t, const std::vector<Var>& v) {
                      return ops::sub(t, ops::mul(t, v[0], v[1]), ops::scale(t, ops::add(t, v[0], v[1]), 0.7));
                  },
                  {random_tensor({m, k}, rng), random_tensor({m, k}, rng)}, seed) < 1e-3);
        CHECK(max_gradient_error([](Tape& t, const std::vector<Var>& v) { return ops::add_row(t, v[0], v[1]); },
                                 {random_tensor({m, k}, rng), random_tensor({k}, rng)}, seed) < 1e-3);
        CHECK(max_gradient_error([](Tape& t, const std::vector<Var>& v) { return ops::gelu(t, v[0]); },
                                 {random_tensor({m, k}, rng, 2.0)}, seed) < 1e-3);
        CHECK(max_gradient_error(
                  [](Tape& t, const std::vector<Var>& v) { return ops::layer_norm(t, v[0], v[1], v[2]); },
                  {random_tensor({m, k + 1}, rng), random_tensor({k + 1}, rng), random_tensor({k + 1}, rng)},
                  seed) < 1e-3);
        CHECK(max_gradient_error([](Tape& t, const std::vector<Var>& v) { return ops::softmax_causal(t, v[0]); },
                                 {random_tensor({n, n}, rng, 2.0)}, seed) < 1e-3);
        std::vector<int> labels(m);
        for (std::size_t r = 0; r < m; ++r) labels[r] = r == 0 ? -1 : static_cast<int>(rng.below(k + 1));
        labels.back() = static_cast<int>(rng.below(k + 1));
        CHECK(max_gradient_error(
                  [&](Tape& t, const std::vector<Var>& v) { return ops::cross_entropy(t, v[0], labels); },
                  {random_tensor({m, k + 1}, rng, 2.0)}, seed) < 1e-3);
        const std::vector<int> ids = {0, static_cast<int>(m - 1), 0};
        CHECK(max_gradient_error([&](Tape& t, const std::vector<Var>& v) { return ops::embedding(t, v[0], ids); },
                                 {random_tensor({m, k}, rng)}, seed) < 1e-3);
        CHECK(max_gradient_error([&](Tape& t, const std::vector<Var>& v) { return ops::gather_rows(t, v[0], ids); },
                                 {random_tensor({m, k}, rng)}, seed) < 1e-3);
        CHECK(max_gradient_error(
                  [&](Tape& t, const std::vector<Var>& v) { return ops::scatter_add_rows(t, v[0], ids, v[1]); },
                  {random_tensor({m, k}, rng), random_tensor({3, k}, rng)}, seed) < 1e-3);
        CHECK(max_gradient_error(
                  [&](Tape& t, const std::vector<Var>& v) {
                      return ops::concat_cols(t, {ops::slice_cols(t, v[0], k - 1, 1), ops::slice_rows(t, v[1], 0, m)});
                  },
                  {random_tensor({m, k}, rng), random_tensor({m + 1, n}, rng)}, seed) < 1e-3);
    }
}

TEST_CASE("retain_grad turns an intermediate into a gradient sink") {
    Rng rng(23);
    Tape t;
    Var s = t.leaf(random_tensor({3, 3}, rng));
    Var p = ops::softmax_causal(t, s);
    t.retain_grad(p);
    Tensor w = random_tensor({3, 3}, rng);
    t.backward(ops::sum(t, ops::mul(t, p, t.constant(w))));
    REQUIRE(t.grad(p) != nullptr);
    CHECK(t.grad(p)->identical(w));
}

TEST_CASE("shape errors") {
    Tape t;
    CHECK_THROWS_AS(ops::matmul(t, t.leaf(Tensor({2, 3})), t.leaf(Tensor({2, 3}))), ShapeError);
    CHECK_THROWS_AS(ops::add(t, t.leaf(Tensor({2, 3})), t.leaf(Tensor({3, 2}))), ShapeError);
    CHECK_THROWS_AS(ops::add_row(t, t.leaf(Tensor({2, 3})), t.leaf(Tensor({2}))), ShapeError);
    CHECK_THROWS_AS(ops::slice_rows(t, t.leaf(Tensor({2, 3})), 1, 2), ShapeError);
    const int ids[] = {5};
    CHECK_THROWS_AS(ops::embedding(t, t.leaf(Tensor({2, 3})), ids), std::out_of_range);
}

TEST_CASE("tensor basics") {
    Tensor a = Tensor::matrix(2, 2, {1, 2, 3, 4});
    CHECK(a.rows() == 2);
    CHECK(a(1, 0) == 3);
    CHECK(shape_numel({2, 3, 4}) == 24);
    CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
    Tensor b = a;
    CHECK(a.identical(b));
    b[0] = std::nextafter(1.0, 2.0);
    CHECK_FALSE(a.identical(b));
    b[0] = std::nan("");
    CHECK_FALSE(b.all_finite());
}

}  // TEST_SUITE
