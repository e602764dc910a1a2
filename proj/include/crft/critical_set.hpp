#pragma once

#include <cstddef>
#include <vector>

namespace crft {

/// Padding value for unused intervention slots.
inline constexpr int kSentinel = -1;

/// Parameter group ids. A single shared group unless demonstration and
/// question segments get separate parameters.
inline constexpr int kQuestionGroup = 0;
inline constexpr int kDemonstrationGroup = 1;

struct LayerSites {
    int layer = 0;
    std::vector<int> positions;  // exactly `width` entries, kSentinel padded
    std::vector<int> groups;     // parallel to positions; ignored at sentinels
};

/// Per-layer fixed-width lists of positions to intervene on.
struct CriticalSet {
    int width = 0;
    std::vector<LayerSites> layers;

    const LayerSites* find(int layer) const;
    /// Throws std::invalid_argument when an entry is out of range, repeated
    /// within a layer, or a list is not exactly `width` long.
    void validate(std::size_t n_total) const;
    std::size_t active_count() const;
};

}  // namespace crft
