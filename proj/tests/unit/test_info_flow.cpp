#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "crft/info_flow.hpp"
#include "crft/ops.hpp"
#include "fixtures.hpp"

using namespace crft;
using namespace crft::testing;

namespace {

InfoGrid grid_of(std::size_t n, std::initializer_list<double> values) {
    InfoGrid g;
    g.values = Tensor({n, n}, std::vector<double>(values));
    return g;
}

// Random causal grid; about a third of the cells are zero and some
// diagonal cells hit the thresholds exactly, to exercise ties.
InfoGrid random_grid(Rng& rng) {
    const std::size_t n = 1 + rng.below(12);
    InfoGrid g;
    g.values = Tensor({n, n});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            const double u = rng.uniform();
            g.values(i, j) = u < 0.3 ? 0.0 : (u < 0.4 ? 0.05 : rng.uniform());
        }
    }
    return g;
}

SegmentMap plain_segments(std::size_t n) {
    SegmentMap s;
    s.tags.assign(n, SegmentTag::question);
    return s;
}

}  // namespace

TEST_SUITE("info_flow") {

TEST_CASE("attention grid averages heads") {
    ForwardTrace tr;
    tr.attention = {{Tensor::matrix(2, 2, {1, 0, 0.2, 0.8}), Tensor::matrix(2, 2, {1, 0, 0.4, 0.6})}};
    const InfoGrid g = attention_grid(tr, 0);
    CHECK(g.kind == GridKind::attention);
    CHECK(g.values(1, 0) == doctest::Approx(0.3).epsilon(1e-15));
    CHECK(g.values(1, 1) == doctest::Approx(0.7).epsilon(1e-15));
    CHECK_THROWS_AS(attention_grid(tr, 1), std::out_of_range);

    ForwardTrace one;
    one.attention = {{Tensor::matrix(2, 2, {1, 0, 0.25, 0.75})}};
    CHECK(attention_grid(one, 0).values.identical(one.attention[0][0]));

    const Model m = rough_model(tiny_config(), 1);
    const ForwardTrace real = forward(m, random_tokens(9, 2));
    for (int l = 0; l < 2; ++l) {
        const InfoGrid grid = attention_grid(real, l);
        for (std::size_t i = 0; i < grid.size(); ++i) {
            double sum = 0.0;
            for (std::size_t j = 0; j < grid.size(); ++j) sum += grid.values(i, j);
            CHECK(std::abs(sum - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("saliency grid arithmetic") {
    ForwardTrace tr;
    tr.attention = {{Tensor::matrix(2, 2, {1, 0, 0.5, 0.5})}};
    AttentionGrads grads = {{Tensor::matrix(2, 2, {0.3, 0, -0.2, 0.2})}};
    const InfoGrid g = saliency_grid(tr, 0, grads);
    CHECK(g.kind == GridKind::saliency);
    CHECK(g.values(0, 0) == 1.0);
    CHECK(g.values(1, 0) == doctest::Approx(0.5));
    CHECK(g.values(1, 1) == doctest::Approx(0.5));

    AttentionGrads zero = {{Tensor({2, 2})}};
    CHECK_THROWS_AS(saliency_grid(tr, 0, zero), DegenerateGrid);
    AttentionGrads missing;
    CHECK_THROWS_AS(saliency_grid(tr, 0, missing), std::invalid_argument);
}

TEST_CASE("saliency grid matches finite-difference attention gradients") {
    const Model m = rough_model(tiny_config(2, 2, 4, 6), 3);
    const auto tokens = random_tokens(5, 4);
    const std::vector<int> labels = {3, 1, 4, 1, 5};
    const SaliencyPass pass = saliency_pass(m, tokens, std::span<const int>(labels));
    const double h = 1e-5;
    for (int l = 0; l < 2; ++l) {
        const InfoGrid got = saliency_grid(pass.trace, l, pass.grads);
        Tensor expect({5, 5});
        for (int hd = 0; hd < 2; ++hd) {
            const Tensor& a = pass.trace.attention[static_cast<std::size_t>(l)][static_cast<std::size_t>(hd)];
            for (std::size_t i = 0; i < 5; ++i) {
                for (std::size_t j = 0; j <= i; ++j) {
                    const double fd = (reference_loss(m, tokens, labels, {l, hd, i, j, h}) -
                                       reference_loss(m, tokens, labels, {l, hd, i, j, -h})) / (2 * h);
                    expect(i, j) += std::abs(a(i, j) * fd) / 2;
                }
            }
        }
        for (std::size_t i = 0; i < 5; ++i) {
            double sum = 0.0;
            for (std::size_t j = 0; j <= i; ++j) sum += expect(i, j);
            for (std::size_t j = 0; j <= i; ++j) {
                CHECK(relative_error(got.values(i, j), expect(i, j) / sum, 1e-6) <= 1e-2);
            }
        }
    }
}

TEST_CASE("self-referential filter") {
    const InfoGrid g = grid_of(3, {1.0, 0, 0, 0.99, 0.01, 0, 0.3, 0.2, 0.5});
    const ScoredPositions s = self_referential_filter(g, 0.05);
    CHECK(s == ScoredPositions{{0, 1.0}, {2, 0.5}});
    CHECK(self_referential_filter(g, 1.0) == ScoredPositions{{0, 1.0}});
    CHECK(self_referential_filter(g, 0.05, 1) == ScoredPositions{{0, 1.0}});

    const Model m = rough_model(tiny_config(), 5);
    const ForwardTrace tr = forward(m, random_tokens(10, 6));
    for (int l = 0; l < 2; ++l) {
        CHECK(self_referential_filter(attention_grid(tr, l), 1.0) == ScoredPositions{{0, 1.0}});
    }
}

TEST_CASE("multi-referential filter") {
    const InfoGrid g = grid_of(3, {1, 0, 0, 0.5, 0.5, 0, 0.2, 0.3, 0.5});
    const ScoredPositions s = multi_referential_filter(g, 0.45);
    REQUIRE(s.size() == 2);
    CHECK(s.at(0) == doctest::Approx(1.7 / 3));
    CHECK(s.at(2) == doctest::Approx(0.5));
    CHECK(multi_referential_filter(g, 0.0).size() == 3);
}

TEST_CASE("filters agree with brute force on 1000 random grids") {
    Rng rng(7);
    for (int trial = 0; trial < 1000; ++trial) {
        const InfoGrid g = random_grid(rng);
        const std::size_t n = g.size();
        const double alpha = rng.uniform() < 0.2 ? 0.05 : rng.uniform();
        const std::size_t eligible = rng.uniform() < 0.5 ? n : rng.below(n + 1);

        ScoredPositions self;
        for (std::size_t i = 0; i < eligible; ++i) {
            if (g.values(i, i) >= alpha) self[static_cast<int>(i)] = g.values(i, i);
        }
        CHECK(self_referential_filter(g, alpha, eligible) == self);

        ScoredPositions multi;
        for (std::size_t j = 0; j < eligible; ++j) {
            double sum = 0.0;
            std::size_t rows = 0;
            for (std::size_t i = 0; i < n; ++i) {
                if (i >= j) {
                    sum += g.values(i, j);
                    ++rows;
                }
            }
            if (sum / static_cast<double>(rows) >= alpha) multi[static_cast<int>(j)] = sum / static_cast<double>(rows);
        }
        CHECK(multi_referential_filter(g, alpha, eligible) == multi);
    }
}

TEST_CASE("filters are monotone in their threshold") {
    Rng rng(8);
    for (int trial = 0; trial < 200; ++trial) {
        const InfoGrid g = random_grid(rng);
        double lo = rng.uniform();
        double hi = rng.uniform();
        if (lo > hi) std::swap(lo, hi);
        for (auto filter : {&self_referential_filter, &multi_referential_filter}) {
            const ScoredPositions strict = filter(g, hi, kAllPositions);
            const ScoredPositions loose = filter(g, lo, kAllPositions);
            for (const auto& [pos, score] : strict) CHECK(loose.count(pos) == 1);
        }
    }
}

TEST_CASE("union and chaining") {
    const ScoredPositions a{{1, 0.2}, {3, 0.4}};
    const ScoredPositions b{{3, 0.9}, {5, 0.1}};
    const ScoredPositions u = union_filter(a, b);
    CHECK(u == ScoredPositions{{1, 0.2}, {3, 0.9}, {5, 0.1}});
    CHECK(union_filter({}, b) == b);
    CHECK(union_filter(a, a) == a);

    const std::vector<int> prev = {1, 2, 5, kSentinel};
    const ScoredPositions cur{{2, 0.5}, {5, 0.6}, {9, 0.7}};
    CHECK(chain_inherit(prev, cur) == ScoredPositions{{2, 0.5}, {5, 0.6}});
    const std::vector<int> all = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    CHECK(chain_inherit(all, cur) == cur);
}

TEST_CASE("union strategy equals an independent recomposition") {
    const Model m = rough_model(tiny_config(), 9);
    const auto tokens = random_tokens(10, 10);
    const ForwardTrace tr = forward(m, tokens);
    CrftConfig cfg;
    cfg.strategy = Strategy::union_attn;
    cfg.alpha = 0.3;
    cfg.beta = 0.15;
    cfg.k_int = 10;
    const CriticalSet set = identify(m, tokens, plain_segments(10), cfg);
    for (int l = 0; l < 2; ++l) {
        // The self filter reads block l, the multi filter the block after it.
        const InfoGrid self_grid = attention_grid(tr, l);
        const InfoGrid multi_grid = attention_grid(tr, std::min(l + 1, 1));
        std::set<int> expect;
        for (std::size_t i = 0; i < 10; ++i) {
            if (self_grid.values(i, i) >= 0.3) expect.insert(static_cast<int>(i));
            double col = 0.0;
            for (std::size_t r = i; r < 10; ++r) col += multi_grid.values(r, i);
            if (col / static_cast<double>(10 - i) >= 0.15) expect.insert(static_cast<int>(i));
        }
        std::set<int> got;
        for (int p : set.layers[static_cast<std::size_t>(l)].positions) {
            if (p != kSentinel) got.insert(p);
        }
        CHECK(got == expect);
    }
}

TEST_CASE("select positions") {
    const ScoredPositions c{{2, 0.9}, {7, 0.1}, {9, 0.5}};
    CHECK(select_positions(c, 2, Criteria::order, 0) == std::vector<int>{2, 7});
    CHECK(select_positions(c, 2, Criteria::score, 0) == std::vector<int>{2, 9});
    CHECK(select_positions({{4, 0.3}}, 3, Criteria::order, 0) == std::vector<int>{4, kSentinel, kSentinel});
    CHECK_THROWS_AS(select_positions(c, 0, Criteria::order, 0), std::invalid_argument);
    // Ties in score go to the smaller position.
    CHECK(select_positions({{1, 0.5}, {3, 0.5}, {4, 0.5}}, 2, Criteria::score, 0) == std::vector<int>{1, 3});

    ScoredPositions many;
    for (int i = 0; i < 20; ++i) many[i] = 0.0;
    const auto r1 = select_positions(many, 5, Criteria::random, 11);
    CHECK(r1 == select_positions(many, 5, Criteria::random, 11));
    CHECK(std::set<int>(r1.begin(), r1.end()).size() == 5);
    CHECK(r1 != select_positions(many, 5, Criteria::random, 12));
    // Every position is drawn with roughly equal frequency.
    std::vector<int> hits(20, 0);
    for (std::uint64_t s = 0; s < 4000; ++s) {
        for (int p : select_positions(many, 5, Criteria::random, s)) ++hits[static_cast<std::size_t>(p)];
    }
    for (int h : hits) CHECK(std::abs(h - 1000) < 120);
}

TEST_CASE("identify: fixed, random and composed strategies") {
    const Model m = rough_model(tiny_config(), 12);
    const auto tokens = random_tokens(10, 13);
    const SegmentMap seg = plain_segments(10);

    CrftConfig fixed;
    fixed.strategy = Strategy::fixed;
    fixed.prefix = 2;
    fixed.suffix = 2;
    const CriticalSet f = identify(m, tokens, seg, fixed);
    REQUIRE(f.layers.size() == 2);
    for (const auto& l : f.layers) CHECK(l.positions == std::vector<int>{0, 1, 8, 9});

    CrftConfig random;
    random.strategy = Strategy::random;
    random.k_int = 4;
    random.seed = 37;
    const CriticalSet r37 = identify(m, tokens, seg, random);
    random.seed = 38;
    const CriticalSet r38 = identify(m, tokens, seg, random);
    CHECK(r37.layers[0].positions.size() == 4);
    CHECK(r38.layers[0].positions.size() == 4);
    CHECK((r37.layers[0].positions != r38.layers[0].positions || r37.layers[1].positions != r38.layers[1].positions));

    CrftConfig saf;
    saf.k_int = 3;
    const CriticalSet s = identify(m, tokens, seg, saf);
    const ForwardTrace tr = forward(m, tokens);
    for (int l = 0; l < 2; ++l) {
        const auto manual =
            select_positions(self_referential_filter(attention_grid(tr, l), saf.alpha), 3, Criteria::order, 0);
        CHECK(s.layers[static_cast<std::size_t>(l)].positions == manual);
    }
    CHECK(identify(m, tokens, seg, saf).layers[1].positions == s.layers[1].positions);
}

TEST_CASE("identify never selects answer positions and assigns groups") {
    const Model m = rough_model(tiny_config(), 14);
    const auto tokens = random_tokens(12, 15);
    SegmentMap seg;
    seg.tags.assign(4, SegmentTag::demonstration);
    seg.tags.resize(9, SegmentTag::question);
    seg.tags.resize(12, SegmentTag::answer);
    CrftConfig cfg;
    cfg.alpha = 0.0;
    cfg.k_int = 12;
    cfg.segment_grouping = true;
    const CriticalSet set = identify(m, tokens, seg, cfg);
    for (const auto& l : set.layers) {
        for (std::size_t k = 0; k < l.positions.size(); ++k) {
            const int p = l.positions[k];
            if (p == kSentinel) continue;
            CHECK(p < 9);
            CHECK(l.groups[k] == (p < 4 ? kDemonstrationGroup : kQuestionGroup));
        }
        CHECK(std::count(l.positions.begin(), l.positions.end(), kSentinel) == 3);
    }
}

TEST_CASE("inherit chaining restricts later layers") {
    const Model m = rough_model(tiny_config(), 16);
    const auto tokens = random_tokens(10, 17);
    CrftConfig cfg;
    cfg.alpha = 0.2;
    cfg.chain = ChainMode::inherit;
    const CriticalSet set = identify(m, tokens, plain_segments(10), cfg);
    const auto& first = set.layers[0].positions;
    for (int p : set.layers[1].positions) {
        if (p != kSentinel) CHECK(std::find(first.begin(), first.end(), p) != first.end());
    }
}

TEST_CASE("saliency strategies run in both label modes") {
    const Model m = rough_model(tiny_config(), 18);
    const auto tokens = random_tokens(8, 19);
    const std::vector<int> labels = {-1, -1, -1, -1, 3, 5, 7, 9};
    CrftConfig cfg;
    cfg.strategy = Strategy::union_sal;
    cfg.k_int = 4;
    const CriticalSet with = identify(m, tokens, plain_segments(8), cfg, std::span<const int>(labels));
    const CriticalSet without = identify(m, tokens, plain_segments(8), cfg);
    CHECK_NOTHROW(with.validate(8));
    CHECK_NOTHROW(without.validate(8));
}

TEST_CASE("perturbation oracle") {
    const Model m = rough_model(tiny_config(1, 2, 8, 16), 20);
    const std::vector<int> prompt = {1, 2, 3, 4};
    const int expect = greedy_decode(m, prompt, 1)[0];
    const CorrectFn correct = [&](std::span<const int> g) { return !g.empty() && g[0] == expect; };

    const FlipRates none = perturbation_oracle(m, prompt, correct, 0.0, 3, 1, 1);
    CHECK(none.baseline_correct);
    for (double r : none.rate[0]) CHECK(r == 0.0);

    const double eps = 1.5;
    const int trials = 6;
    const FlipRates got = perturbation_oracle(m, prompt, correct, eps, trials, 21, 1);
    for (int pos = 0; pos < 4; ++pos) {
        int flips = 0;
        for (int t = 0; t < trials; ++t) {
            NoisePlan plan{{0, pos, gaussian_noise(8, eps, noise_stream(21, 0, pos, t))}};
            ForwardOptions o;
            o.noise = &plan;
            const Tensor logits = forward(m, prompt, o).logits;
            auto row = logits.row(3);
            const int arg = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
            flips += arg != expect;
        }
        CHECK(got.rate[0][static_cast<std::size_t>(pos)] == static_cast<double>(flips) / trials);
    }
    // After the only block, earlier rows no longer reach the last position.
    CHECK(got.rate[0][0] == 0.0);
    CHECK(got.rate[0][2] == 0.0);
    CHECK(got.rate[0][3] > 0.0);
    CHECK_THROWS_AS(perturbation_oracle(m, prompt, correct, eps, 0, 1, 1), std::invalid_argument);
}

}  // TEST_SUITE
