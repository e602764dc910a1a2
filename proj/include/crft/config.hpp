#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace crft {

enum class Strategy { saf, ssf, maf, msf, union_attn, union_sal, fixed, random };
enum class Criteria { order, score, random };
enum class ChainMode { inherit, fresh };

std::string_view to_string(Strategy s);
std::string_view to_string(Criteria c);
std::string_view to_string(ChainMode m);
Strategy parse_strategy(std::string_view text);
Criteria parse_criteria(std::string_view text);
ChainMode parse_chain_mode(std::string_view text);

bool uses_saliency(Strategy s);

/// Identification and intervention settings for one CRFT run.
struct CrftConfig {
    Strategy strategy = Strategy::saf;
    double alpha = 0.05;
    double beta = 0.05;
    int k_int = 14;
    Criteria criteria = Criteria::order;
    ChainMode chain = ChainMode::fresh;
    int layer_first = 0;
    int layer_last = -1;  // -1: last layer of the model
    int rank = 8;
    bool train_R = false;
    bool segment_grouping = false;
    int prefix = 7;  // FIXED strategy only
    int suffix = 7;
    // Multi-referential filtering reads the grid of the block that consumes
    // the intervened representation; set to read the producing block instead.
    bool align_grid_layers = false;
    std::uint64_t seed = 42;

    /// Resolves layer_last against the model depth and checks invariants.
    CrftConfig resolved(int n_layers) const;
    int group_count() const { return segment_grouping ? 2 : 1; }
    int layer_count() const { return layer_last - layer_first + 1; }
};

}  // namespace crft
