#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "crft/config.hpp"
#include "crft/info_flow.hpp"
#include "crft/intervention.hpp"
#include "crft/model.hpp"
#include "crft/tasks.hpp"
#include "crft/training.hpp"

namespace crft {

/// Trained interventions together with the identification settings that
/// place them at inference time.
struct InterventionSpec {
    const InterventionParams* params = nullptr;
    CrftConfig config;
};

struct EvalRecord {
    std::vector<int> generated;
    std::vector<int> predicted;  // final-answer span
    bool correct = false;
};

struct EvalResult {
    double accuracy = 0.0;
    std::vector<EvalRecord> records;
};

/// Greedy-decodes every prompt (up to EOS or the end of the context) and
/// scores the final-answer span. With interventions, positions are
/// identified on the prompt and edited on every decoding step.
EvalResult evaluate(const Model& model, const Dataset& data,
                    const std::optional<InterventionSpec>& interventions = std::nullopt);

/// Per-example key used to seed position sampling during evaluation; kept
/// apart from the training keys (dataset indices).
std::uint64_t eval_example_key(std::size_t index);

// ---- noise asymmetry --------------------------------------------------------

struct NoiseOptions {
    int top_k = 5;
    int bottom_k = 5;
    std::vector<double> levels = {0.0, 0.01, 0.02};
    int trials = 4;
    std::uint64_t seed = 0;
    /// Multiply each level by the RMS of the representation it perturbs.
    bool scale_by_rms = false;
};

struct RetentionCurve {
    std::vector<double> levels;  // ascending
    std::vector<double> top;     // retention per level
    std::vector<double> bottom;
    std::size_t examples = 0;    // originally-correct examples used
};

/// Positions are ranked per layer by the strategy's indicator with the
/// thresholds disabled; the top_k highest and the bottom_k lowest (disjoint)
/// prompt positions receive Gaussian noise in every layer of the configured
/// range. Only examples the unmodified model answers correctly, and whose
/// prompt has at least top_k + bottom_k positions, take part.
RetentionCurve noise_experiment(const Model& model, const Dataset& data, const CrftConfig& identify_cfg,
                                const NoiseOptions& options);

/// Ascending sweep for the smallest level at which top-set retention
/// first falls below `threshold`; returns nullopt if it never does.
std::optional<double> calibrate_noise(const RetentionCurve& curve, double threshold = 0.9);

// ---- ablations ----------------------------------------------------------------

enum class AblationAxis { threshold, k_int, criteria, layers, random_seed };

std::string_view to_string(AblationAxis axis);
AblationAxis parse_axis(std::string_view text);

struct AblationCell {
    AblationAxis axis;
    std::string value;
    CrftConfig config;
    double accuracy = 0.0;
    bool trained = false;  // false for the k_int = 0 baseline cell
};

/// Configurations of one axis derived from `base`: alpha and beta in
/// {1.0, 0.25, 0.05, 0.01}; k_int in {0, 14, 20, 30}; every criteria;
/// layer ranges first/last/first-half/second-half/all; RANDOM seeds 37..47.
std::vector<std::pair<std::string, CrftConfig>> ablation_grid(AblationAxis axis, const CrftConfig& base,
                                                              int n_layers);

/// Trains and evaluates every cell of the requested axes in order.
std::vector<AblationCell> ablation_suite(const Model& model, const Dataset& train_data, const Dataset& eval_data,
                                         const CrftConfig& base, const TrainConfig& train,
                                         const std::vector<AblationAxis>& axes);

// ---- desk-scale base model ----------------------------------------------------

/// Two-phase recipe for a base model with headroom: pretrain on worked
/// solutions until validation accuracy reaches the reasoning band, then
/// continue on answer-only targets until it falls into the target band. The
/// result still carries the step-by-step skill but rarely uses it.
struct BaseRecipe {
    ModelConfig model;
    std::uint64_t model_seed = 3;
    std::uint64_t data_seed = 1;
    ChainArithOptions task = desk_task();
    std::size_t train_examples = 6000;
    std::size_t val_examples = 200;
    PretrainConfig reasoning = reasoning_phase();
    PretrainConfig answer_only = answer_only_phase();

    static ChainArithOptions desk_task();
    static PretrainConfig reasoning_phase();
    static PretrainConfig answer_only_phase();
};

struct BaseReport {
    Model model;
    RunHistory reasoning;
    RunHistory answer_only;
    double reasoning_val_accuracy = 0.0;
    double val_accuracy = 0.0;
};

BaseReport build_desk_base(const BaseRecipe& recipe);

/// Dataset splits for one task family, all derived from one seed.
struct TaskSplits {
    Dataset train;
    Dataset val;
    Dataset test;
};

TaskSplits make_splits(const ChainArithOptions& task, std::size_t n_train, std::size_t n_val, std::size_t n_test,
                       std::uint64_t seed);

}  // namespace crft
