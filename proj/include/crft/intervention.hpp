#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <utility>
#include <vector>

#include "crft/config.hpp"
#include "crft/critical_set.hpp"
#include "crft/rng.hpp"
#include "crft/tape.hpp"
#include "crft/tensor.hpp"

namespace crft {

/// Low-rank edit  h -> h + R^T (W h + b - R h)  for one (layer, group).
struct InterventionBlock {
    Tensor R;  // [rank, d], orthonormal rows
    Tensor W;  // [rank, d]
    Tensor b;  // [rank]
};

struct GroupKey {
    int layer = 0;
    int group = 0;
    friend auto operator<=>(const GroupKey&, const GroupKey&) = default;
};

class InterventionParams {
public:
    InterventionParams() = default;
    InterventionParams(std::size_t d, std::size_t rank, bool train_R)
        : d_(d), rank_(rank), train_R_(train_R) {}

    std::size_t d() const noexcept { return d_; }
    std::size_t rank() const noexcept { return rank_; }
    bool train_R() const noexcept { return train_R_; }

    InterventionBlock& block(int layer, int group);
    const InterventionBlock& block(int layer, int group) const;
    bool contains(int layer, int group) const { return blocks_.count({layer, group}) != 0; }
    void insert(int layer, int group, InterventionBlock block);

    std::map<GroupKey, InterventionBlock>& blocks() noexcept { return blocks_; }
    const std::map<GroupKey, InterventionBlock>& blocks() const noexcept { return blocks_; }

    /// Number of distinct group ids present for `layer`.
    std::size_t groups_in_layer(int layer) const;
    std::size_t trainable_count() const;
    bool identical(const InterventionParams& other) const;

private:
    std::size_t d_ = 0;
    std::size_t rank_ = 0;
    bool train_R_ = false;
    std::map<GroupKey, InterventionBlock> blocks_;
};

/// One parameter set per (layer in [layer_first, layer_last], group).
/// R: orthonormalized seeded Gaussian rows; W ~ N(0, 1e-3^2); b = 0.
InterventionParams init_params(std::size_t d, std::size_t rank, int layer_first, int layer_last,
                               int groups, std::uint64_t seed, bool train_R = false);

/// Modified Gram-Schmidt with one re-orthogonalization pass. Rows keep
/// their order and orientation. Throws std::domain_error when the rows are
/// numerically rank deficient.
Tensor orthonormalize(const Tensor& rows);

/// max |R R^T - I|
double orthonormality_error(const Tensor& R);

/// Direct evaluation of the edit on one vector.
std::vector<double> apply(std::span<const double> h, const InterventionBlock& block);

/// Trainable-parameter count: W and b per (layer, group), plus R when it
/// is trained.
std::uint64_t param_count(const CrftConfig& cfg, std::uint64_t d, std::uint64_t layers_intervened);

// ---- taped application -----------------------------------------------------

struct BoundBlock {
    Var R;
    Var W;
    Var b;
};

/// Intervention parameters registered on a tape.
struct BoundInterventions {
    std::map<GroupKey, BoundBlock> blocks;
};

/// Registers params on the tape. W and b (and R when train_R) receive
/// gradients iff `trainable`.
BoundInterventions bind(Tape& tape, const InterventionParams& params, bool trainable);

/// Dropout on the projected source (W h + b) during training.
struct SourceDropout {
    double rate = 0.0;
    Rng* rng = nullptr;
};

/// Applies the edit at every non-sentinel site of `sites` to rows of
/// `hidden` [n, d]; rows not listed pass through unchanged.
Var apply_on_tape(Tape& tape, Var hidden, const LayerSites& sites, const BoundInterventions& bound,
                  const SourceDropout* dropout = nullptr);

}  // namespace crft
