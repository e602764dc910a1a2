#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "crft/info_flow.hpp"
#include "crft/model.hpp"
#include "crft/rng.hpp"

namespace crft::testing {

inline ModelConfig tiny_config(int layers = 2, int heads = 2, int d = 8, int ff = 16) {
    ModelConfig c;
    c.n_layers = layers;
    c.n_heads = heads;
    c.d_model = d;
    c.d_ff = ff;
    c.vocab_size = 19;
    c.max_seq = 24;
    return c;
}

/// Model whose weights are all O(1) so gradients are not vanishingly small.
inline Model rough_model(const ModelConfig& c, std::uint64_t seed) {
    Model m(c, seed);
    Rng rng(seed ^ 0x5eed);
    for (auto& w : m.weights()) {
        for (double& v : w.value.values()) v += 0.3 * rng.normal();
    }
    return m;
}

inline std::vector<int> random_tokens(std::size_t n, std::uint64_t seed, int vocab = 19) {
    Rng rng(seed);
    std::vector<int> t(n);
    for (int& x : t) x = static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab)));
    return t;
}

/// Additive change to one cell of one head's post-softmax attention.
struct AttentionNudge {
    int layer = -1;
    int head = 0;
    std::size_t row = 0;
    std::size_t col = 0;
    double delta = 0.0;
};

/// Plain-loop re-implementation of the model's forward pass and mean
/// cross-entropy, independent of the tape.
inline double reference_loss(const Model& m, std::span<const int> tokens, std::span<const int> labels,
                             const AttentionNudge& nudge = {}) {
    const ModelConfig& c = m.config();
    const std::size_t n = tokens.size();
    const auto d = static_cast<std::size_t>(c.d_model);
    const auto ff = static_cast<std::size_t>(c.d_ff);
    const auto V = static_cast<std::size_t>(c.vocab_size);
    const std::size_t dh = d / static_cast<std::size_t>(c.n_heads);
    using Mat = std::vector<std::vector<double>>;
    auto W = [&](const std::string& name) -> const Tensor& { return m.weight(name); };

    auto layer_norm = [&](const Mat& x, const Tensor& g, const Tensor& b) {
        Mat y = x;
        for (std::size_t r = 0; r < n; ++r) {
            double mean = 0.0;
            for (double v : x[r]) mean += v;
            mean /= static_cast<double>(d);
            double var = 0.0;
            for (double v : x[r]) var += (v - mean) * (v - mean);
            var /= static_cast<double>(d);
            const double s = 1.0 / std::sqrt(var + 1e-5);
            for (std::size_t k = 0; k < d; ++k) y[r][k] = (x[r][k] - mean) * s * g[k] + b[k];
        }
        return y;
    };
    auto matmul = [&](const Mat& x, const Tensor& w, std::size_t out) {
        const std::size_t in = x.empty() ? 0 : x[0].size();
        Mat y(n, std::vector<double>(out, 0.0));
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t k = 0; k < in; ++k) {
                for (std::size_t o = 0; o < out; ++o) y[r][o] += x[r][k] * w[k * out + o];
            }
        }
        return y;
    };

    Mat x(n, std::vector<double>(d));
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t k = 0; k < d; ++k) {
            x[r][k] = W("tok_emb")[static_cast<std::size_t>(tokens[r]) * d + k] + W("pos_emb")[r * d + k];
        }
    }
    for (int l = 0; l < c.n_layers; ++l) {
        const std::string p = "blocks." + std::to_string(l) + ".";
        Mat a = layer_norm(x, W(p + "ln1.g"), W(p + "ln1.b"));
        Mat q = matmul(a, W(p + "attn.wq"), d);
        Mat k = matmul(a, W(p + "attn.wk"), d);
        Mat v = matmul(a, W(p + "attn.wv"), d);
        Mat heads(n, std::vector<double>(d, 0.0));
        for (int h = 0; h < c.n_heads; ++h) {
            const std::size_t off = static_cast<std::size_t>(h) * dh;
            Mat prob(n, std::vector<double>(n, 0.0));
            for (std::size_t i = 0; i < n; ++i) {
                double mx = -1e300;
                std::vector<double> s(i + 1);
                for (std::size_t j = 0; j <= i; ++j) {
                    double dot = 0.0;
                    for (std::size_t e = 0; e < dh; ++e) dot += q[i][off + e] * k[j][off + e];
                    s[j] = dot / std::sqrt(static_cast<double>(dh));
                    mx = std::max(mx, s[j]);
                }
                double z = 0.0;
                for (std::size_t j = 0; j <= i; ++j) z += std::exp(s[j] - mx);
                for (std::size_t j = 0; j <= i; ++j) prob[i][j] = std::exp(s[j] - mx) / z;
            }
            if (nudge.layer == l && nudge.head == h) prob[nudge.row][nudge.col] += nudge.delta;
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    for (std::size_t e = 0; e < dh; ++e) heads[i][off + e] += prob[i][j] * v[j][off + e];
                }
            }
        }
        Mat o = matmul(heads, W(p + "attn.wo"), d);
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t e = 0; e < d; ++e) x[r][e] += o[r][e];
        }
        Mat hdn = matmul(layer_norm(x, W(p + "ln2.g"), W(p + "ln2.b")), W(p + "mlp.w1"), ff);
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t e = 0; e < ff; ++e) {
                const double u = hdn[r][e] + W(p + "mlp.b1")[e];
                hdn[r][e] = 0.5 * u * (1.0 + std::tanh(0.7978845608028654 * (u + 0.044715 * u * u * u)));
            }
        }
        Mat out = matmul(hdn, W(p + "mlp.w2"), d);
        for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t e = 0; e < d; ++e) x[r][e] += out[r][e] + W(p + "mlp.b2")[e];
        }
    }
    Mat logits = matmul(layer_norm(x, W("ln_f.g"), W("ln_f.b")), W("head.w"), V);
    double total = 0.0;
    int scored = 0;
    for (std::size_t r = 0; r < n; ++r) {
        if (labels[r] < 0) continue;
        double mx = -1e300;
        for (double z : logits[r]) mx = std::max(mx, z);
        double sum = 0.0;
        for (double z : logits[r]) sum += std::exp(z - mx);
        total += -(logits[r][static_cast<std::size_t>(labels[r])] - mx - std::log(sum));
        ++scored;
    }
    return total / scored;
}

/// Frozen model behind the files in tests/golden.
inline Model golden_model() { return Model(tiny_config(1, 2, 8, 16), 2024); }

inline std::vector<int> golden_tokens() { return {16, 1, 10, 2, 13, 3}; }

inline InfoGrid golden_grid() { return attention_grid(forward(golden_model(), golden_tokens()), 0); }

inline double relative_error(double a, double b, double floor = 1e-6) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace crft::testing
