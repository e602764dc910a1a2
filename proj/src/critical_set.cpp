#include "crft/critical_set.hpp"

#include <set>
#include <stdexcept>
#include <string>

namespace crft {

const LayerSites* CriticalSet::find(int layer) const {
    for (const auto& sites : layers) {
        if (sites.layer == layer) return &sites;
    }
    return nullptr;
}

void CriticalSet::validate(std::size_t n_total) const {
    for (const auto& sites : layers) {
        if (sites.positions.size() != static_cast<std::size_t>(width)) {
            throw std::invalid_argument("layer " + std::to_string(sites.layer) + " has " +
                                        std::to_string(sites.positions.size()) +
                                        " slots, expected " + std::to_string(width));
        }
        if (!sites.groups.empty() && sites.groups.size() != sites.positions.size()) {
            throw std::invalid_argument("group list does not match position list");
        }
        std::set<int> seen;
        for (int p : sites.positions) {
            if (p == kSentinel) continue;
            if (p < 0 || static_cast<std::size_t>(p) >= n_total) {
                throw std::out_of_range("intervention position " + std::to_string(p) +
                                        " outside sequence of length " + std::to_string(n_total));
            }
            if (!seen.insert(p).second) {
                throw std::invalid_argument("position " + std::to_string(p) + " repeated in layer " +
                                            std::to_string(sites.layer));
            }
        }
    }
}

std::size_t CriticalSet::active_count() const {
    std::size_t count = 0;
    for (const auto& sites : layers) {
        for (int p : sites.positions) count += p != kSentinel;
    }
    return count;
}

}  // namespace crft
