#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "crft/config.hpp"
#include "crft/critical_set.hpp"
#include "crft/model.hpp"
#include "crft/tasks.hpp"

namespace crft {

enum class GridKind { attention, saliency };

/// Causal matrix of pairwise information interaction at one layer; cell
/// (i, j) is the flow from position j into position i.
struct InfoGrid {
    int layer = 0;
    Tensor values;
    GridKind kind = GridKind::attention;

    std::size_t size() const { return values.rows(); }
};

/// d loss / d attention, laid out like ForwardTrace::attention.
using AttentionGrads = std::vector<std::vector<Tensor>>;

/// Candidate positions with their filter scores, ordered by position.
using ScoredPositions = std::map<int, double>;

class DegenerateGrid : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr std::size_t kAllPositions = std::numeric_limits<std::size_t>::max();

/// Head-averaged post-softmax attention of block `layer`.
InfoGrid attention_grid(const ForwardTrace& trace, int layer);

/// |A * dL/dA| averaged over heads, each row normalized to sum 1 over its
/// unmasked prefix. Rows with no saliency stay zero; a grid with no
/// saliency at all throws DegenerateGrid.
InfoGrid saliency_grid(const ForwardTrace& trace, int layer, const AttentionGrads& grads);

/// {i : grid(i, i) >= alpha}, scored by the diagonal. Only the first
/// `eligible` positions are candidates.
ScoredPositions self_referential_filter(const InfoGrid& grid, double alpha,
                                        std::size_t eligible = kAllPositions);

/// {j : mean_{i >= j} grid(i, j) >= beta}, scored by the column mean over
/// all rows of the grid.
ScoredPositions multi_referential_filter(const InfoGrid& grid, double beta,
                                         std::size_t eligible = kAllPositions);

/// Set union; a position found by both filters keeps the larger score.
ScoredPositions union_filter(const ScoredPositions& a, const ScoredPositions& b);

/// Current candidates restricted to the previous layer's selected
/// (non-sentinel) positions.
ScoredPositions chain_inherit(std::span<const int> previous, const ScoredPositions& current);

/// Fixed-width list sorted by position, padded with kSentinel.
///   order  - smallest positions first
///   score  - highest scores, ties to the smaller position
///   random - uniform without replacement from `seed`
std::vector<int> select_positions(const ScoredPositions& candidates, int k_int, Criteria criteria,
                                  std::uint64_t seed);

struct SaliencyPass {
    ForwardTrace trace;
    AttentionGrads grads;
    double loss = 0.0;
};

/// Forward + backward on the frozen model. With `labels` the loss is the
/// cross-entropy against them (-1 unscored); without, every position is
/// scored against the model's own argmax prediction.
SaliencyPass saliency_pass(const Model& model, std::span<const int> tokens,
                           std::optional<std::span<const int>> labels = std::nullopt);

/// Critical positions for every layer in the configured range. Candidates
/// are restricted to positions not tagged as answer. `example_key` seeds the
/// random strategy and random criteria per example.
CriticalSet identify(const Model& model, std::span<const int> tokens, const SegmentMap& segments,
                     const CrftConfig& cfg,
                     std::optional<std::span<const int>> labels = std::nullopt,
                     std::uint64_t example_key = 0);

/// Candidate scores per layer as computed inside identify() before
/// selection; used by the noise experiments to rank positions.
std::vector<ScoredPositions> layer_scores(const Model& model, std::span<const int> tokens,
                                          const SegmentMap& segments, const CrftConfig& cfg,
                                          std::optional<std::span<const int>> labels = std::nullopt);

/// Gaussian vector of width d and standard deviation `std` from one stream.
std::vector<double> gaussian_noise(std::size_t d, double std, std::uint64_t stream_seed);
std::uint64_t noise_stream(std::uint64_t seed, int layer, int position, int trial);

using CorrectFn = std::function<bool(std::span<const int> generated)>;

struct FlipRates {
    bool baseline_correct = false;
    std::vector<std::vector<double>> rate;  // [layer][position]
};

/// Empirical criticality: for each (layer, position) of the prompt, the
/// fraction of trials in which Gaussian noise of std `epsilon` on that one
/// representation flips answer correctness.
FlipRates perturbation_oracle(const Model& model, std::span<const int> prompt, const CorrectFn& is_correct,
                              double epsilon, int trials, std::uint64_t seed, int max_new,
                              std::optional<int> stop_token = std::nullopt);

}  // namespace crft
