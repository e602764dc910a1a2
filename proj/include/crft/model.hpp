#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "crft/critical_set.hpp"
#include "crft/intervention.hpp"
#include "crft/rng.hpp"
#include "crft/tape.hpp"
#include "crft/tensor.hpp"

namespace crft {

struct ModelConfig {
    int n_layers = 2;
    int n_heads = 4;
    int d_model = 64;
    int d_ff = 256;
    int vocab_size = 19;
    int max_seq = 64;
    double dropout = 0.0;

    /// Throws std::invalid_argument on a non-positive count, d_model not
    /// divisible by n_heads, or dropout outside [0, 1].
    void validate() const;
    int head_dim() const { return d_model / n_heads; }
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class Mode { eval, train };

struct NamedTensor {
    std::string name;
    Tensor value;
};

/// Pre-norm decoder-only transformer with learned positional embeddings.
class Model {
public:
    Model() = default;
    /// Freshly initialized weights drawn from `seed`.
    Model(const ModelConfig& config, std::uint64_t seed);
    /// Wraps existing weights; names and shapes must match the layout
    /// implied by `config`.
    Model(const ModelConfig& config, std::vector<NamedTensor> weights);

    const ModelConfig& config() const noexcept { return config_; }
    std::vector<NamedTensor>& weights() noexcept { return weights_; }
    const std::vector<NamedTensor>& weights() const noexcept { return weights_; }
    Tensor& weight(const std::string& name);
    const Tensor& weight(const std::string& name) const;

    /// Expected (name, shape) layout for a config.
    static std::vector<std::pair<std::string, Shape>> layout(const ModelConfig& config);

    std::uint64_t train_step = 0;
    std::uint64_t seed = 0;

private:
    ModelConfig config_;
    std::vector<NamedTensor> weights_;
};

/// Additive perturbation of one representation at a block output.
struct NoiseSite {
    int layer = 0;
    int position = 0;
    std::vector<double> delta;
};
using NoisePlan = std::vector<NoiseSite>;

struct ForwardOptions {
    const CriticalSet* sites = nullptr;
    const InterventionParams* params = nullptr;
    const NoisePlan* noise = nullptr;
    Mode mode = Mode::eval;
    std::uint64_t dropout_seed = 0;
};

/// Everything one pass produces. hidden[0] is the embedding output and
/// hidden[l + 1] the (possibly edited) residual stream after block l.
struct ForwardTrace {
    std::vector<Tensor> hidden;                  // L+1 x [n, d]
    std::vector<std::vector<Tensor>> attention;  // L x H x [n, n]
    Tensor logits;                               // [n, V]
};

// ---- taped forward ----------------------------------------------------------

struct TapedForward {
    std::vector<Var> hidden;
    std::vector<std::vector<Var>> attention;
    Var logits;
};

struct TapedOptions {
    const CriticalSet* sites = nullptr;
    const BoundInterventions* interventions = nullptr;
    const NoisePlan* noise = nullptr;
    Mode mode = Mode::eval;
    Rng* dropout_rng = nullptr;     // required for dropout in train mode
    bool block_dropout = true;      // config dropout inside blocks (train mode)
    double source_dropout = 0.0;    // dropout on the intervention source
    bool attention_grads = false;   // make attention matrices gradient sinks
};

/// Registers the model weights on a tape, in Model::weights() order.
std::vector<Var> bind_weights(Tape& tape, const Model& model, bool requires_grad);

TapedForward forward_on_tape(Tape& tape, const Model& model, const std::vector<Var>& weights,
                             std::span<const int> tokens, const TapedOptions& options = {});

// ---- value-level API --------------------------------------------------------

ForwardTrace forward(const Model& model, std::span<const int> tokens,
                     const ForwardOptions& options = {});

/// Argmax decoding without caching. Interventions and noise listed in
/// `options` are applied at their (prompt) positions on every step.
std::vector<int> greedy_decode(const Model& model, std::span<const int> prompt, int max_new,
                               std::optional<int> stop_token = std::nullopt,
                               const ForwardOptions& options = {});

/// SHA-256 over config, names, shapes and raw weight bytes, hex encoded.
std::string freeze_digest(const Model& model);

}  // namespace crft
