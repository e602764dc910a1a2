#include "crft/info_flow.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "crft/ops.hpp"
#include "crft/rng.hpp"

namespace crft {
namespace {

void check_layer(const ForwardTrace& trace, int layer) {
    if (layer < 0 || static_cast<std::size_t>(layer) >= trace.attention.size()) {
        throw std::out_of_range("layer " + std::to_string(layer) + " outside trace of " +
                                std::to_string(trace.attention.size()) + " layers");
    }
    if (trace.attention[static_cast<std::size_t>(layer)].empty()) {
        throw std::invalid_argument("trace has no attention heads for layer " + std::to_string(layer));
    }
}

std::size_t clamp_eligible(const InfoGrid& grid, std::size_t eligible) {
    return std::min(eligible, grid.size());
}

}  // namespace

InfoGrid attention_grid(const ForwardTrace& trace, int layer) {
    check_layer(trace, layer);
    const auto& heads = trace.attention[static_cast<std::size_t>(layer)];
    InfoGrid grid;
    grid.layer = layer;
    grid.kind = GridKind::attention;
    grid.values = Tensor(heads.front().shape(), 0.0);
    for (const Tensor& h : heads) {
        for (std::size_t i = 0; i < h.size(); ++i) grid.values[i] += h[i];
    }
    const double inv = 1.0 / static_cast<double>(heads.size());
    for (double& v : grid.values.values()) v *= inv;
    return grid;
}

InfoGrid saliency_grid(const ForwardTrace& trace, int layer, const AttentionGrads& grads) {
    check_layer(trace, layer);
    const auto l = static_cast<std::size_t>(layer);
    if (grads.size() <= l || grads[l].size() != trace.attention[l].size()) {
        throw std::invalid_argument("missing attention gradients for layer " + std::to_string(layer));
    }
    const auto& heads = trace.attention[l];
    InfoGrid grid;
    grid.layer = layer;
    grid.kind = GridKind::saliency;
    grid.values = Tensor(heads.front().shape(), 0.0);
    for (std::size_t h = 0; h < heads.size(); ++h) {
        if (grads[l][h].shape() != heads[h].shape()) {
            throw std::invalid_argument("attention gradient shape mismatch at layer " + std::to_string(layer));
        }
        for (std::size_t i = 0; i < heads[h].size(); ++i) {
            grid.values[i] += std::abs(heads[h][i] * grads[l][h][i]);
        }
    }
    const double inv = 1.0 / static_cast<double>(heads.size());
    const std::size_t n = grid.size();
    bool any = false;
    for (std::size_t i = 0; i < n; ++i) {
        double row_sum = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
            grid.values(i, j) *= inv;
            row_sum += grid.values(i, j);
        }
        if (row_sum > 0.0) {
            any = true;
            for (std::size_t j = 0; j <= i; ++j) grid.values(i, j) /= row_sum;
        }
    }
    if (!any) {
        throw DegenerateGrid("saliency grid of layer " + std::to_string(layer) +
                             " is all zero: the loss does not depend on its attention");
    }
    return grid;
}

ScoredPositions self_referential_filter(const InfoGrid& grid, double alpha, std::size_t eligible) {
    ScoredPositions out;
    const std::size_t n = clamp_eligible(grid, eligible);
    for (std::size_t i = 0; i < n; ++i) {
        const double score = grid.values(i, i);
        if (score >= alpha) out.emplace(static_cast<int>(i), score);
    }
    return out;
}

ScoredPositions multi_referential_filter(const InfoGrid& grid, double beta, std::size_t eligible) {
    ScoredPositions out;
    const std::size_t total = grid.size();
    const std::size_t n = clamp_eligible(grid, eligible);
    for (std::size_t j = 0; j < n; ++j) {
        double column = 0.0;
        for (std::size_t i = j; i < total; ++i) column += grid.values(i, j);
        const double score = column / static_cast<double>(total - j);
        if (score >= beta) out.emplace(static_cast<int>(j), score);
    }
    return out;
}

ScoredPositions union_filter(const ScoredPositions& a, const ScoredPositions& b) {
    ScoredPositions out = a;
    for (const auto& [pos, score] : b) {
        auto [it, inserted] = out.emplace(pos, score);
        if (!inserted) it->second = std::max(it->second, score);
    }
    return out;
}

ScoredPositions chain_inherit(std::span<const int> previous, const ScoredPositions& current) {
    ScoredPositions out;
    for (int p : previous) {
        if (p == kSentinel) continue;
        if (auto it = current.find(p); it != current.end()) out.insert(*it);
    }
    return out;
}

std::vector<int> select_positions(const ScoredPositions& candidates, int k_int, Criteria criteria,
                                  std::uint64_t seed) {
    if (k_int <= 0) throw std::invalid_argument("select_positions: k_int must be at least 1");
    const auto k = static_cast<std::size_t>(k_int);
    std::vector<int> picked;
    switch (criteria) {
        case Criteria::order:
            for (const auto& [pos, _] : candidates) {
                if (picked.size() == k) break;
                picked.push_back(pos);
            }
            break;
        case Criteria::score: {
            std::vector<std::pair<int, double>> ranked(candidates.begin(), candidates.end());
            std::stable_sort(ranked.begin(), ranked.end(),
                             [](const auto& a, const auto& b) { return a.second > b.second; });
            for (std::size_t i = 0; i < std::min(k, ranked.size()); ++i) picked.push_back(ranked[i].first);
            break;
        }
        case Criteria::random: {
            std::vector<int> pool;
            for (const auto& [pos, _] : candidates) pool.push_back(pos);
            Rng rng(seed);
            // Partial Fisher-Yates.
            for (std::size_t i = 0; i < std::min(k, pool.size()); ++i) {
                const std::size_t j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
                std::swap(pool[i], pool[j]);
                picked.push_back(pool[i]);
            }
            break;
        }
    }
    std::sort(picked.begin(), picked.end());
    picked.resize(k, kSentinel);
    return picked;
}

SaliencyPass saliency_pass(const Model& model, std::span<const int> tokens,
                           std::optional<std::span<const int>> labels) {
    Tape tape;
    auto weights = bind_weights(tape, model, false);
    TapedOptions opts;
    opts.attention_grads = true;
    TapedForward tf = forward_on_tape(tape, model, weights, tokens, opts);

    const Tensor& logits = tape.value(tf.logits);
    std::vector<int> targets;
    if (labels) {
        targets.assign(labels->begin(), labels->end());
    } else {
        targets.resize(logits.rows());
        for (std::size_t r = 0; r < logits.rows(); ++r) {
            auto row = logits.row(r);
            targets[r] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
        }
    }
    Var loss = ops::cross_entropy(tape, tf.logits, targets);
    tape.backward(loss);

    SaliencyPass out;
    out.loss = tape.value(loss)[0];
    for (Var h : tf.hidden) out.trace.hidden.push_back(tape.value(h));
    for (const auto& layer : tf.attention) {
        std::vector<Tensor> probs;
        std::vector<Tensor> grads;
        for (Var p : layer) {
            probs.push_back(tape.value(p));
            const Tensor* g = tape.grad(p);
            grads.push_back(g != nullptr ? *g : Tensor(tape.value(p).shape(), 0.0));
        }
        out.trace.attention.push_back(std::move(probs));
        out.grads.push_back(std::move(grads));
    }
    out.trace.logits = logits;
    return out;
}

namespace {

std::size_t eligible_count(const SegmentMap& segments, std::size_t n) {
    std::size_t count = 0;
    while (count < n && (count >= segments.size() || segments.tags[count] != SegmentTag::answer)) ++count;
    return count;
}

struct GridSource {
    const ForwardTrace* trace = nullptr;
    const AttentionGrads* grads = nullptr;
    int n_layers = 0;

    InfoGrid grid(int layer, bool saliency) const {
        return saliency ? saliency_grid(*trace, layer, *grads) : attention_grid(*trace, layer);
    }
};

ScoredPositions candidates_for(const GridSource& src, const CrftConfig& cfg, int layer, std::size_t eligible) {
    // Self-referential filtering reads the block that produces the edited
    // representation; multi-referential filtering reads the block that
    // consumes it (clamped at the last block).
    const int consumer = cfg.align_grid_layers ? layer : std::min(layer + 1, src.n_layers - 1);
    switch (cfg.strategy) {
        case Strategy::saf: return self_referential_filter(src.grid(layer, false), cfg.alpha, eligible);
        case Strategy::ssf: return self_referential_filter(src.grid(layer, true), cfg.alpha, eligible);
        case Strategy::maf: return multi_referential_filter(src.grid(consumer, false), cfg.beta, eligible);
        case Strategy::msf: return multi_referential_filter(src.grid(consumer, true), cfg.beta, eligible);
        case Strategy::union_attn:
            return union_filter(self_referential_filter(src.grid(layer, false), cfg.alpha, eligible),
                                multi_referential_filter(src.grid(consumer, false), cfg.beta, eligible));
        case Strategy::union_sal:
            return union_filter(self_referential_filter(src.grid(layer, true), cfg.alpha, eligible),
                                multi_referential_filter(src.grid(consumer, true), cfg.beta, eligible));
        default: break;
    }
    throw std::logic_error("strategy has no information-flow filter");
}

void assign_groups(LayerSites& sites, const SegmentMap& segments, bool grouping) {
    sites.groups.resize(sites.positions.size(), 0);
    for (std::size_t k = 0; k < sites.positions.size(); ++k) {
        const int p = sites.positions[k];
        sites.groups[k] = p == kSentinel ? 0 : segments.group_of(static_cast<std::size_t>(p), grouping);
    }
}

}  // namespace

std::vector<ScoredPositions> layer_scores(const Model& model, std::span<const int> tokens,
                                          const SegmentMap& segments, const CrftConfig& raw,
                                          std::optional<std::span<const int>> labels) {
    const CrftConfig cfg = raw.resolved(model.config().n_layers);
    if (cfg.strategy == Strategy::fixed || cfg.strategy == Strategy::random) {
        throw std::invalid_argument("layer_scores needs an information-flow strategy");
    }
    const std::size_t eligible = eligible_count(segments, tokens.size());
    SaliencyPass pass;
    if (uses_saliency(cfg.strategy)) {
        pass = saliency_pass(model, tokens, labels);
    } else {
        pass.trace = forward(model, tokens);
    }
    GridSource src{&pass.trace, &pass.grads, model.config().n_layers};
    std::vector<ScoredPositions> out;
    for (int layer = cfg.layer_first; layer <= cfg.layer_last; ++layer) {
        out.push_back(candidates_for(src, cfg, layer, eligible));
    }
    return out;
}

CriticalSet identify(const Model& model, std::span<const int> tokens, const SegmentMap& segments,
                     const CrftConfig& raw, std::optional<std::span<const int>> labels,
                     std::uint64_t example_key) {
    const CrftConfig cfg = raw.resolved(model.config().n_layers);
    const std::size_t eligible = eligible_count(segments, tokens.size());
    CriticalSet set;

    if (cfg.strategy == Strategy::fixed) {
        set.width = cfg.prefix + cfg.suffix;
        std::vector<int> chosen;
        for (int i = 0; i < cfg.prefix && static_cast<std::size_t>(i) < eligible; ++i) chosen.push_back(i);
        for (int i = 0; i < cfg.suffix; ++i) {
            const std::int64_t p = static_cast<std::int64_t>(eligible) - cfg.suffix + i;
            if (p >= 0 && std::find(chosen.begin(), chosen.end(), p) == chosen.end()) {
                chosen.push_back(static_cast<int>(p));
            }
        }
        std::sort(chosen.begin(), chosen.end());
        chosen.resize(static_cast<std::size_t>(set.width), kSentinel);
        for (int layer = cfg.layer_first; layer <= cfg.layer_last; ++layer) {
            LayerSites sites{layer, chosen, {}};
            assign_groups(sites, segments, cfg.segment_grouping);
            set.layers.push_back(std::move(sites));
        }
        return set;
    }

    set.width = cfg.k_int;
    if (cfg.strategy == Strategy::random) {
        ScoredPositions all;
        for (std::size_t i = 0; i < eligible; ++i) all.emplace(static_cast<int>(i), 0.0);
        for (int layer = cfg.layer_first; layer <= cfg.layer_last; ++layer) {
            const auto seed = Rng::derive(cfg.seed, {example_key, static_cast<std::uint64_t>(layer), 0x7a});
            LayerSites sites{layer, select_positions(all, cfg.k_int, Criteria::random, seed), {}};
            assign_groups(sites, segments, cfg.segment_grouping);
            set.layers.push_back(std::move(sites));
        }
        return set;
    }

    SaliencyPass pass;
    if (uses_saliency(cfg.strategy)) {
        pass = saliency_pass(model, tokens, labels);
    } else {
        pass.trace = forward(model, tokens);
    }
    GridSource src{&pass.trace, &pass.grads, model.config().n_layers};
    for (int layer = cfg.layer_first; layer <= cfg.layer_last; ++layer) {
        ScoredPositions cand = candidates_for(src, cfg, layer, eligible);
        if (cfg.chain == ChainMode::inherit && !set.layers.empty()) {
            cand = chain_inherit(set.layers.back().positions, cand);
        }
        const auto seed = Rng::derive(cfg.seed, {example_key, static_cast<std::uint64_t>(layer), 0x5e});
        LayerSites sites{layer, select_positions(cand, cfg.k_int, cfg.criteria, seed), {}};
        assign_groups(sites, segments, cfg.segment_grouping);
        set.layers.push_back(std::move(sites));
    }
    return set;
}

std::vector<double> gaussian_noise(std::size_t d, double std, std::uint64_t stream_seed) {
    Rng rng(stream_seed);
    std::vector<double> out(d);
    for (double& v : out) v = std * rng.normal();
    return out;
}

std::uint64_t noise_stream(std::uint64_t seed, int layer, int position, int trial) {
    return Rng::derive(seed, {static_cast<std::uint64_t>(layer), static_cast<std::uint64_t>(position),
                              static_cast<std::uint64_t>(trial)});
}

FlipRates perturbation_oracle(const Model& model, std::span<const int> prompt, const CorrectFn& is_correct,
                              double epsilon, int trials, std::uint64_t seed, int max_new,
                              std::optional<int> stop_token) {
    if (trials <= 0) throw std::invalid_argument("perturbation_oracle: trials must be positive");
    if (epsilon < 0.0) throw std::invalid_argument("perturbation_oracle: epsilon must be >= 0");
    const ModelConfig& mc = model.config();
    FlipRates out;
    out.baseline_correct = is_correct(greedy_decode(model, prompt, max_new, stop_token));
    out.rate.assign(static_cast<std::size_t>(mc.n_layers), std::vector<double>(prompt.size(), 0.0));
    for (int layer = 0; layer < mc.n_layers; ++layer) {
        for (std::size_t pos = 0; pos < prompt.size(); ++pos) {
            int flips = 0;
            for (int trial = 0; trial < trials; ++trial) {
                NoisePlan plan{{layer, static_cast<int>(pos),
                                gaussian_noise(static_cast<std::size_t>(mc.d_model), epsilon,
                                               noise_stream(seed, layer, static_cast<int>(pos), trial))}};
                ForwardOptions opts;
                opts.noise = &plan;
                const bool ok = is_correct(greedy_decode(model, prompt, max_new, stop_token, opts));
                flips += ok != out.baseline_correct;
            }
            out.rate[static_cast<std::size_t>(layer)][pos] = static_cast<double>(flips) / trials;
        }
    }
    return out;
}

}  // namespace crft
