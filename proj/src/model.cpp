#include "crft/model.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <cstring>
#include <memory>
#include <stdexcept>

#include "crft/ops.hpp"

namespace crft {
namespace {

constexpr std::size_t kPerLayer = 12;

enum LayerSlot : std::size_t {
    kLn1G, kLn1B, kWq, kWk, kWv, kWo, kLn2G, kLn2B, kW1, kB1, kW2, kB2
};

std::size_t layer_index(int layer, LayerSlot slot) {
    return 2 + static_cast<std::size_t>(layer) * kPerLayer + slot;
}

}  // namespace

void ModelConfig::validate() const {
    if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_ff < 1 || vocab_size < 1 || max_seq < 1) {
        throw std::invalid_argument("model counts must all be at least 1");
    }
    if (d_model % n_heads != 0) {
        throw std::invalid_argument("d_model " + std::to_string(d_model) +
                                    " is not divisible by n_heads " + std::to_string(n_heads));
    }
    if (!(dropout >= 0.0 && dropout <= 1.0)) throw std::invalid_argument("dropout must lie in [0, 1]");
}

std::vector<std::pair<std::string, Shape>> Model::layout(const ModelConfig& c) {
    const auto d = static_cast<std::size_t>(c.d_model);
    const auto ff = static_cast<std::size_t>(c.d_ff);
    const auto v = static_cast<std::size_t>(c.vocab_size);
    std::vector<std::pair<std::string, Shape>> out;
    out.emplace_back("tok_emb", Shape{v, d});
    out.emplace_back("pos_emb", Shape{static_cast<std::size_t>(c.max_seq), d});
    for (int l = 0; l < c.n_layers; ++l) {
        const std::string p = "blocks." + std::to_string(l) + ".";
        out.emplace_back(p + "ln1.g", Shape{d});
        out.emplace_back(p + "ln1.b", Shape{d});
        out.emplace_back(p + "attn.wq", Shape{d, d});
        out.emplace_back(p + "attn.wk", Shape{d, d});
        out.emplace_back(p + "attn.wv", Shape{d, d});
        out.emplace_back(p + "attn.wo", Shape{d, d});
        out.emplace_back(p + "ln2.g", Shape{d});
        out.emplace_back(p + "ln2.b", Shape{d});
        out.emplace_back(p + "mlp.w1", Shape{d, ff});
        out.emplace_back(p + "mlp.b1", Shape{ff});
        out.emplace_back(p + "mlp.w2", Shape{ff, d});
        out.emplace_back(p + "mlp.b2", Shape{d});
    }
    out.emplace_back("ln_f.g", Shape{d});
    out.emplace_back("ln_f.b", Shape{d});
    out.emplace_back("head.w", Shape{d, v});
    return out;
}

Model::Model(const ModelConfig& config, std::uint64_t seed) : seed(seed), config_(config) {
    config_.validate();
    Rng rng(seed);
    const double residual_std = 0.02 / std::sqrt(2.0 * config_.n_layers);
    for (auto& [name, shape] : layout(config_)) {
        Tensor t(shape, 0.0);
        const bool is_gain = name.ends_with(".g");
        const bool is_bias = name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2");
        if (is_gain) {
            t.fill(1.0);
        } else if (!is_bias) {
            const double std =
                (name.ends_with("attn.wo") || name.ends_with("mlp.w2")) ? residual_std : 0.02;
            for (double& v : t.values()) v = std * rng.normal();
        }
        weights_.push_back({name, std::move(t)});
    }
}

Model::Model(const ModelConfig& config, std::vector<NamedTensor> weights)
    : config_(config), weights_(std::move(weights)) {
    config_.validate();
    const auto expected = layout(config_);
    if (expected.size() != weights_.size()) {
        throw std::invalid_argument("expected " + std::to_string(expected.size()) + " weight tensors, got " +
                                    std::to_string(weights_.size()));
    }
    for (std::size_t i = 0; i < expected.size(); ++i) {
        if (expected[i].first != weights_[i].name || expected[i].second != weights_[i].value.shape()) {
            throw std::invalid_argument("weight " + weights_[i].name + " " +
                                        shape_string(weights_[i].value.shape()) + " does not match expected " +
                                        expected[i].first + " " + shape_string(expected[i].second));
        }
    }
}

Tensor& Model::weight(const std::string& name) {
    for (auto& w : weights_) {
        if (w.name == name) return w.value;
    }
    throw std::out_of_range("no weight named " + name);
}

const Tensor& Model::weight(const std::string& name) const {
    return const_cast<Model*>(this)->weight(name);
}

std::vector<Var> bind_weights(Tape& tape, const Model& model, bool requires_grad) {
    std::vector<Var> vars;
    vars.reserve(model.weights().size());
    for (const auto& w : model.weights()) vars.push_back(tape.param(w.value, requires_grad));
    return vars;
}

namespace {

Var dropout(Tape& tape, Var x, double rate, Rng& rng) {
    const double keep = 1.0 - rate;
    Tensor mask(tape.value(x).shape());
    for (double& m : mask.values()) m = rng.uniform() < keep ? 1.0 / keep : 0.0;
    return ops::mul(tape, x, tape.leaf(std::move(mask)));
}

}  // namespace

TapedForward forward_on_tape(Tape& tape, const Model& model, const std::vector<Var>& w,
                             std::span<const int> tokens, const TapedOptions& options) {
    const ModelConfig& cfg = model.config();
    const std::size_t n = tokens.size();
    if (n == 0) throw std::invalid_argument("forward: empty token sequence");
    if (n > static_cast<std::size_t>(cfg.max_seq)) {
        throw std::invalid_argument("forward: sequence of " + std::to_string(n) + " tokens exceeds max_seq " +
                                    std::to_string(cfg.max_seq));
    }
    if (w.size() != model.weights().size()) throw std::invalid_argument("forward: weight binding mismatch");
    if (options.sites != nullptr) options.sites->validate(n);
    const bool train = options.mode == Mode::train;
    const bool block_dropout = train && options.block_dropout && cfg.dropout > 0.0;
    if ((block_dropout || (train && options.source_dropout > 0.0)) && options.dropout_rng == nullptr) {
        throw std::invalid_argument("forward: train-mode dropout needs a generator");
    }

    TapedForward out;
    Var x = ops::add(tape, ops::embedding(tape, w[0], tokens), ops::slice_rows(tape, w[1], 0, n));
    out.hidden.push_back(x);

    const std::size_t dh = static_cast<std::size_t>(cfg.head_dim());
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    SourceDropout source_dropout{options.source_dropout, options.dropout_rng};

    for (int l = 0; l < cfg.n_layers; ++l) {
        auto W = [&](LayerSlot s) { return w[layer_index(l, s)]; };
        Var a = ops::layer_norm(tape, x, W(kLn1G), W(kLn1B));
        Var q = ops::matmul(tape, a, W(kWq));
        Var k = ops::matmul(tape, a, W(kWk));
        Var v = ops::matmul(tape, a, W(kWv));
        std::vector<Var> heads;
        std::vector<Var> probs;
        for (int h = 0; h < cfg.n_heads; ++h) {
            const std::size_t off = static_cast<std::size_t>(h) * dh;
            Var qh = ops::slice_cols(tape, q, off, dh);
            Var kh = ops::slice_cols(tape, k, off, dh);
            Var vh = ops::slice_cols(tape, v, off, dh);
            Var p = ops::softmax_causal(tape, ops::scale(tape, ops::matmul_nt(tape, qh, kh), inv_sqrt));
            if (options.attention_grads) tape.retain_grad(p);
            probs.push_back(p);
            heads.push_back(ops::matmul(tape, p, vh));
        }
        out.attention.push_back(std::move(probs));
        Var attn = ops::matmul(tape, ops::concat_cols(tape, heads), W(kWo));
        if (block_dropout) attn = dropout(tape, attn, cfg.dropout, *options.dropout_rng);
        x = ops::add(tape, x, attn);

        Var m = ops::layer_norm(tape, x, W(kLn2G), W(kLn2B));
        m = ops::gelu(tape, ops::add_row(tape, ops::matmul(tape, m, W(kW1)), W(kB1)));
        m = ops::add_row(tape, ops::matmul(tape, m, W(kW2)), W(kB2));
        if (block_dropout) m = dropout(tape, m, cfg.dropout, *options.dropout_rng);
        x = ops::add(tape, x, m);

        if (options.sites != nullptr && options.interventions != nullptr) {
            if (const LayerSites* sites = options.sites->find(l)) {
                x = apply_on_tape(tape, x, *sites, *options.interventions,
                                  train ? &source_dropout : nullptr);
            }
        }
        if (options.noise != nullptr) {
            std::vector<int> rows;
            std::vector<double> deltas;
            for (const NoiseSite& site : *options.noise) {
                if (site.layer != l) continue;
                if (site.delta.size() != static_cast<std::size_t>(cfg.d_model)) {
                    throw ShapeError("noise vector width does not match d_model");
                }
                rows.push_back(site.position);
                deltas.insert(deltas.end(), site.delta.begin(), site.delta.end());
            }
            if (!rows.empty()) {
                Var delta = tape.leaf(Tensor({rows.size(), dh * cfg.n_heads}, std::move(deltas)));
                x = ops::scatter_add_rows(tape, x, rows, delta);
            }
        }
        out.hidden.push_back(x);
    }
    const std::size_t tail = 2 + static_cast<std::size_t>(cfg.n_layers) * kPerLayer;
    Var f = ops::layer_norm(tape, x, w[tail], w[tail + 1]);
    out.logits = ops::matmul(tape, f, w[tail + 2]);
    return out;
}

namespace {

struct ValueBinding {
    Tape tape;
    std::vector<Var> weights;
    std::optional<BoundInterventions> bound;
    std::unique_ptr<Rng> rng;
    TapedOptions taped;
};

void prepare(ValueBinding& vb, const Model& model, const ForwardOptions& options) {
    vb.weights = bind_weights(vb.tape, model, false);
    vb.taped.sites = options.sites;
    vb.taped.noise = options.noise;
    vb.taped.mode = options.mode;
    if (options.params != nullptr) {
        if (options.params->d() != static_cast<std::size_t>(model.config().d_model)) {
            throw ShapeError("intervention width does not match d_model");
        }
        vb.bound = bind(vb.tape, *options.params, false);
        vb.taped.interventions = &*vb.bound;
    }
    if (options.mode == Mode::train) {
        vb.rng = std::make_unique<Rng>(options.dropout_seed);
        vb.taped.dropout_rng = vb.rng.get();
    }
}

}  // namespace

ForwardTrace forward(const Model& model, std::span<const int> tokens, const ForwardOptions& options) {
    ValueBinding vb;
    prepare(vb, model, options);
    TapedForward tf = forward_on_tape(vb.tape, model, vb.weights, tokens, vb.taped);
    ForwardTrace trace;
    for (Var h : tf.hidden) trace.hidden.push_back(vb.tape.value(h));
    for (const auto& layer : tf.attention) {
        std::vector<Tensor> heads;
        for (Var p : layer) heads.push_back(vb.tape.value(p));
        trace.attention.push_back(std::move(heads));
    }
    trace.logits = vb.tape.value(tf.logits);
    return trace;
}

std::vector<int> greedy_decode(const Model& model, std::span<const int> prompt, int max_new,
                               std::optional<int> stop_token, const ForwardOptions& options) {
    if (prompt.empty()) throw std::invalid_argument("greedy_decode: empty prompt");
    if (max_new < 1) throw std::invalid_argument("greedy_decode: max_new must be at least 1");
    if (prompt.size() > static_cast<std::size_t>(model.config().max_seq)) {
        throw std::invalid_argument("greedy_decode: prompt exceeds max_seq");
    }
    std::vector<int> seq(prompt.begin(), prompt.end());
    std::vector<int> generated;
    for (int step = 0; step < max_new; ++step) {
        if (seq.size() > static_cast<std::size_t>(model.config().max_seq)) break;
        ValueBinding vb;
        prepare(vb, model, options);
        TapedForward tf = forward_on_tape(vb.tape, model, vb.weights, seq, vb.taped);
        const Tensor& logits = vb.tape.value(tf.logits);
        auto last = logits.row(logits.rows() - 1);
        int best = 0;
        for (std::size_t c = 1; c < last.size(); ++c) {
            if (last[c] > last[static_cast<std::size_t>(best)]) best = static_cast<int>(c);
        }
        generated.push_back(best);
        seq.push_back(best);
        if (stop_token && best == *stop_token) break;
    }
    return generated;
}

std::string freeze_digest(const Model& model) {
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr);
    const ModelConfig& c = model.config();
    const std::int64_t header[] = {c.n_layers, c.n_heads, c.d_model, c.d_ff, c.vocab_size, c.max_seq};
    EVP_DigestUpdate(ctx.get(), header, sizeof(header));
    EVP_DigestUpdate(ctx.get(), &c.dropout, sizeof(double));
    for (const auto& w : model.weights()) {
        EVP_DigestUpdate(ctx.get(), w.name.data(), w.name.size() + 1);
        for (std::size_t dim : w.value.shape()) {
            const std::uint64_t d = dim;
            EVP_DigestUpdate(ctx.get(), &d, sizeof(d));
        }
        EVP_DigestUpdate(ctx.get(), w.value.data(), w.value.size() * sizeof(double));
    }
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx.get(), md, &len);
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[md[i] >> 4];
        out += hex[md[i] & 15];
    }
    return out;
}

}  // namespace crft
