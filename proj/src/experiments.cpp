#include "crft/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace crft {
namespace {

SegmentMap prompt_segments(const TaskSample& s) {
    SegmentMap m;
    m.tags.assign(s.segments.tags.begin(), s.segments.tags.begin() + static_cast<std::ptrdiff_t>(s.prompt.size()));
    return m;
}

int decode_budget(const Model& model, const TaskSample& s) {
    const int room = model.config().max_seq - static_cast<int>(s.prompt.size());
    if (room < 1) throw std::invalid_argument("prompt leaves no room to decode");
    return room;
}

std::vector<int> decode(const Model& model, const TaskSample& s, std::size_t index,
                        const std::optional<InterventionSpec>& iv, const NoisePlan* noise = nullptr) {
    ForwardOptions opts;
    opts.noise = noise;
    CriticalSet sites;
    if (iv && iv->params != nullptr) {
        sites = identify(model, s.prompt, prompt_segments(s), iv->config, std::nullopt, eval_example_key(index));
        opts.sites = &sites;
        opts.params = iv->params;
    }
    return greedy_decode(model, s.prompt, decode_budget(model, s), vocab::kEos, opts);
}

// Scores over every prompt position: the strategy's indicator with its
// thresholds disabled.
std::vector<ScoredPositions> rank_positions(const Model& model, const TaskSample& s, const CrftConfig& cfg) {
    CrftConfig open = cfg;
    open.alpha = 0.0;
    open.beta = 0.0;
    return layer_scores(model, s.prompt, prompt_segments(s), open);
}

}  // namespace

std::uint64_t eval_example_key(std::size_t index) { return (std::uint64_t{1} << 40) + index; }

EvalResult evaluate(const Model& model, const Dataset& data, const std::optional<InterventionSpec>& interventions) {
    if (data.empty()) throw std::invalid_argument("evaluate: empty dataset");
    EvalResult out;
    out.records.reserve(data.size());
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        EvalRecord rec;
        rec.generated = decode(model, data[i], i, interventions);
        rec.predicted = extract_answer(rec.generated);
        rec.correct = answer_matches(rec.generated, data[i].answer);
        correct += rec.correct;
        out.records.push_back(std::move(rec));
    }
    out.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
    return out;
}

RetentionCurve noise_experiment(const Model& model, const Dataset& data, const CrftConfig& identify_cfg,
                                const NoiseOptions& options) {
    if (options.top_k < 1 || options.bottom_k < 1) throw std::invalid_argument("noise_experiment: empty position set");
    if (options.trials < 1) throw std::invalid_argument("noise_experiment: trials must be positive");
    if (options.levels.empty()) throw std::invalid_argument("noise_experiment: no noise levels");
    for (std::size_t i = 0; i < options.levels.size(); ++i) {
        if (options.levels[i] < 0.0 || (i > 0 && options.levels[i] <= options.levels[i - 1])) {
            throw std::invalid_argument("noise_experiment: levels must be non-negative and ascending");
        }
    }
    const CrftConfig cfg = identify_cfg.resolved(model.config().n_layers);
    const auto d = static_cast<std::size_t>(model.config().d_model);
    const std::size_t need = static_cast<std::size_t>(options.top_k + options.bottom_k);

    struct Case {
        std::size_t index;
        std::vector<std::vector<int>> top;     // per layer
        std::vector<std::vector<int>> bottom;
        std::vector<std::vector<double>> rms;  // per layer, per position
    };
    std::vector<Case> cases;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const TaskSample& s = data[i];
        if (s.prompt.size() < need) continue;
        if (!answer_matches(decode(model, s, i, std::nullopt), s.answer)) continue;
        Case c{i, {}, {}, {}};
        const ForwardTrace trace = forward(model, s.prompt);
        for (const ScoredPositions& scores : rank_positions(model, s, cfg)) {
            std::vector<std::pair<double, int>> ranked;
            for (std::size_t p = 0; p < s.prompt.size(); ++p) {
                auto it = scores.find(static_cast<int>(p));
                ranked.emplace_back(it == scores.end() ? 0.0 : it->second, static_cast<int>(p));
            }
            // Highest score first; ties to the smaller position.
            std::stable_sort(ranked.begin(), ranked.end(),
                             [](const auto& a, const auto& b) { return a.first > b.first; });
            std::vector<int> top;
            std::vector<int> bottom;
            for (int k = 0; k < options.top_k; ++k) top.push_back(ranked[static_cast<std::size_t>(k)].second);
            for (int k = 0; k < options.bottom_k; ++k) bottom.push_back(ranked[ranked.size() - 1 - static_cast<std::size_t>(k)].second);
            c.top.push_back(std::move(top));
            c.bottom.push_back(std::move(bottom));
        }
        for (int layer = cfg.layer_first; layer <= cfg.layer_last; ++layer) {
            const Tensor& h = trace.hidden[static_cast<std::size_t>(layer) + 1];
            std::vector<double> rms(s.prompt.size());
            for (std::size_t p = 0; p < s.prompt.size(); ++p) {
                double acc = 0.0;
                for (double v : h.row(p)) acc += v * v;
                rms[p] = std::sqrt(acc / static_cast<double>(d));
            }
            c.rms.push_back(std::move(rms));
        }
        cases.push_back(std::move(c));
    }
    if (cases.empty()) throw std::runtime_error("noise_experiment: no correctly answered examples");

    RetentionCurve curve;
    curve.levels = options.levels;
    curve.examples = cases.size();
    for (double level : options.levels) {
        for (int which = 0; which < 2; ++which) {
            std::size_t kept = 0;
            for (const Case& c : cases) {
                const auto& sets = which == 0 ? c.top : c.bottom;
                for (int trial = 0; trial < options.trials; ++trial) {
                    NoisePlan plan;
                    for (std::size_t li = 0; li < sets.size(); ++li) {
                        const int layer = cfg.layer_first + static_cast<int>(li);
                        for (int p : sets[li]) {
                            const double sd = options.scale_by_rms ? level * c.rms[li][static_cast<std::size_t>(p)] : level;
                            plan.push_back({layer, p,
                                            gaussian_noise(d, sd,
                                                           noise_stream(Rng::derive(options.seed, {c.index}), layer, p,
                                                                        trial))});
                        }
                    }
                    kept += answer_matches(decode(model, data[c.index], c.index, std::nullopt, &plan),
                                           data[c.index].answer);
                }
            }
            const double r = static_cast<double>(kept) / static_cast<double>(cases.size() * static_cast<std::size_t>(options.trials));
            (which == 0 ? curve.top : curve.bottom).push_back(r);
        }
    }
    return curve;
}

std::optional<double> calibrate_noise(const RetentionCurve& curve, double threshold) {
    for (std::size_t i = 0; i < curve.levels.size(); ++i) {
        if (curve.top[i] < threshold) return curve.levels[i];
    }
    return std::nullopt;
}

std::string_view to_string(AblationAxis axis) {
    switch (axis) {
        case AblationAxis::threshold: return "threshold";
        case AblationAxis::k_int: return "k_int";
        case AblationAxis::criteria: return "criteria";
        case AblationAxis::layers: return "layers";
        case AblationAxis::random_seed: return "random_seed";
    }
    return "?";
}

AblationAxis parse_axis(std::string_view text) {
    for (AblationAxis a : {AblationAxis::threshold, AblationAxis::k_int, AblationAxis::criteria, AblationAxis::layers,
                           AblationAxis::random_seed}) {
        if (to_string(a) == text) return a;
    }
    if (text == "k-int") return AblationAxis::k_int;
    if (text == "random-seed" || text == "seed") return AblationAxis::random_seed;
    throw std::invalid_argument("unknown ablation axis '" + std::string(text) + "'");
}

std::vector<std::pair<std::string, CrftConfig>> ablation_grid(AblationAxis axis, const CrftConfig& base,
                                                              int n_layers) {
    std::vector<std::pair<std::string, CrftConfig>> out;
    auto add = [&](std::string label, CrftConfig c) { out.emplace_back(std::move(label), c); };
    switch (axis) {
        case AblationAxis::threshold:
            for (double v : {1.0, 0.25, 0.05, 0.01}) {
                CrftConfig c = base;
                c.alpha = v;
                c.beta = v;
                char buf[32];
                std::snprintf(buf, sizeof buf, "%g", v);
                add(buf, c);
            }
            break;
        case AblationAxis::k_int:
            for (int v : {0, 14, 20, 30}) {
                CrftConfig c = base;
                c.k_int = v;
                add(std::to_string(v), c);
            }
            break;
        case AblationAxis::criteria:
            for (Criteria v : {Criteria::order, Criteria::score, Criteria::random}) {
                CrftConfig c = base;
                c.criteria = v;
                add(std::string(to_string(v)), c);
            }
            break;
        case AblationAxis::layers: {
            const int half = std::max(1, n_layers / 2);
            const std::pair<const char*, std::pair<int, int>> ranges[] = {
                {"first", {0, 0}},
                {"last", {n_layers - 1, n_layers - 1}},
                {"first-half", {0, half - 1}},
                {"second-half", {std::min(half, n_layers - 1), n_layers - 1}},
                {"all", {0, n_layers - 1}},
            };
            for (const auto& [label, range] : ranges) {
                CrftConfig c = base;
                c.layer_first = range.first;
                c.layer_last = range.second;
                add(label, c);
            }
            break;
        }
        case AblationAxis::random_seed:
            for (std::uint64_t s = 37; s <= 47; ++s) {
                CrftConfig c = base;
                c.strategy = Strategy::random;
                c.seed = s;
                add(std::to_string(s), c);
            }
            break;
    }
    return out;
}

std::vector<AblationCell> ablation_suite(const Model& model, const Dataset& train_data, const Dataset& eval_data,
                                         const CrftConfig& base, const TrainConfig& train,
                                         const std::vector<AblationAxis>& axes) {
    std::vector<AblationCell> cells;
    std::optional<double> baseline;
    for (AblationAxis axis : axes) {
        for (auto& [label, cfg] : ablation_grid(axis, base, model.config().n_layers)) {
            AblationCell cell{axis, label, cfg, 0.0, false};
            if (cfg.k_int == 0) {
                if (!baseline) baseline = evaluate(model, eval_data).accuracy;
                cell.accuracy = *baseline;
            } else {
                const CrftResult r = train_crft(model, train_data, cfg, train);
                cell.accuracy = evaluate(model, eval_data, InterventionSpec{&r.params, cfg}).accuracy;
                cell.trained = true;
            }
            cells.push_back(std::move(cell));
        }
    }
    return cells;
}

ChainArithOptions BaseRecipe::desk_task() {
    ChainArithOptions t;
    t.n_steps = 4;
    t.modulus = 5;
    t.operators = {vocab::kPlus, vocab::kMinus, vocab::kTimes};
    return t;
}

PretrainConfig BaseRecipe::reasoning_phase() {
    PretrainConfig c;
    c.max_steps = 8000;
    c.batch_size = 16;
    c.learning_rate = 3e-3;
    c.warmup_ratio = 0.02;
    c.weight_decay = 0.01;
    c.seed = 7;
    c.eval_every = 250;
    c.stop_min = 0.9;
    c.stop_max = 1.0;
    return c;
}

PretrainConfig BaseRecipe::answer_only_phase() {
    PretrainConfig c;
    c.max_steps = 2000;
    c.batch_size = 16;
    c.learning_rate = 1e-4;
    c.warmup_ratio = 0.0;
    c.weight_decay = 0.01;
    c.seed = 8;
    c.eval_every = 10;
    c.stop_min = 0.4;
    c.stop_max = 0.55;
    return c;
}

TaskSplits make_splits(const ChainArithOptions& task, std::size_t n_train, std::size_t n_val, std::size_t n_test,
                       std::uint64_t seed) {
    TaskSplits s;
    ChainArithOptions o = task;
    o.split = Split::train;
    s.train = gen_chain_arith(n_train, o, seed);
    o.split = Split::val;
    s.val = gen_chain_arith(n_val, o, seed);
    o.split = Split::test;
    s.test = gen_chain_arith(n_test, o, seed);
    return s;
}

BaseReport build_desk_base(const BaseRecipe& recipe) {
    BaseReport out;
    out.model = Model(recipe.model, recipe.model_seed);
    const TaskSplits worked = make_splits(recipe.task, recipe.train_examples, recipe.val_examples, 1, recipe.data_seed);
    ChainArithOptions bare = recipe.task;
    bare.cot = false;
    bare.split = Split::train;
    const Dataset answers = gen_chain_arith(recipe.train_examples, bare, Rng::derive(recipe.data_seed, {0xa5}));

    double last = 0.0;
    const EvalFn eval = [&](const Model& m) { return last = evaluate(m, worked.val).accuracy; };
    out.reasoning = pretrain(out.model, worked.train, recipe.reasoning, eval);
    out.reasoning_val_accuracy = last;
    out.answer_only = pretrain(out.model, answers, recipe.answer_only, eval);
    out.val_accuracy = last;
    return out;
}

}  // namespace crft
