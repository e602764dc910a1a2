#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "crft/config.hpp"
#include "crft/intervention.hpp"
#include "crft/model.hpp"
#include "crft/tasks.hpp"

namespace crft {

/// Optimizer and schedule settings. Defaults follow the arithmetic recipe:
/// 12 epochs, batch 2 with 16 accumulation steps, lr 9e-4 with linear decay.
struct TrainConfig {
    int epochs = 12;
    int batch_size = 2;
    int grad_accum_steps = 16;
    double learning_rate = 9e-4;
    double warmup_ratio = 0.0;
    double weight_decay = 0.06;
    double dropout = 0.05;
    std::uint64_t seed = 42;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    /// Stop after this many optimizer steps when positive.
    std::size_t max_steps = 0;

    void validate() const;
    std::size_t examples_per_step() const {
        return static_cast<std::size_t>(batch_size) * static_cast<std::size_t>(grad_accum_steps);
    }
};

/// Linear warmup from 0 to the base rate over warmup_ratio * total_steps,
/// then linear decay to 0 at total_steps.
double lr_at(std::size_t step, std::size_t total_steps, const TrainConfig& cfg);

struct AdamState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    std::size_t t = 0;
};

/// Decoupled-weight-decay Adam update of `params` in place.
void optimizer_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state,
                    double lr, double weight_decay, const TrainConfig& cfg);

struct StepRecord {
    std::size_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
    double grad_norm = 0.0;
};

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    std::optional<double> eval_accuracy;
};

struct RunHistory {
    std::vector<StepRecord> steps;
    std::vector<EpochRecord> epochs;
};

/// One JSON object per line: {"step":..,"loss":..,"lr":..,"grad_norm":..}
void write_history(std::ostream& out, const RunHistory& history);
RunHistory read_history(std::istream& in);

class NonFiniteLoss : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Mean cross-entropy over the answer span of a teacher-forced sample.
double answer_loss(const Model& model, const TaskSample& sample, const ForwardOptions& options = {});

// ---- base-model pretraining -----------------------------------------------

struct PretrainConfig {
    std::size_t max_steps = 4000;
    int batch_size = 16;
    double learning_rate = 3e-3;
    double warmup_ratio = 0.02;
    double weight_decay = 0.01;
    std::uint64_t seed = 7;
    /// Evaluate every `eval_every` steps and stop as soon as the accuracy
    /// lies in [stop_min, stop_max] (disabled when stop_max <= 0).
    std::size_t eval_every = 100;
    double stop_min = 0.0;
    double stop_max = 0.0;
};

using EvalFn = std::function<double(const Model&)>;

RunHistory pretrain(Model& model, const Dataset& data, const PretrainConfig& cfg,
                    const EvalFn& eval = {});

// ---- CRFT ---------------------------------------------------------------------

struct CrftResult {
    InterventionParams params;
    RunHistory history;
    /// Maximum |R R^T - I| observed after each optimizer step.
    std::vector<double> orthonormality;
    /// True when no base-model tensor ever received a gradient.
    bool base_gradient_free = true;
};

struct CrftHooks {
    /// Called after every optimizer step.
    std::function<void(std::size_t step, const InterventionParams&)> on_step;
    /// Optional per-epoch evaluation.
    EvalFn eval;
};

/// Trains intervention parameters on identified positions with the base
/// model frozen. Loss covers answer-span positions only.
CrftResult train_crft(const Model& model, const Dataset& data, const CrftConfig& crft,
                      const TrainConfig& train, const CrftHooks& hooks = {});

}  // namespace crft
