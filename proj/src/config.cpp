#include "crft/config.hpp"

#include <array>
#include <stdexcept>
#include <string>
#include <utility>

namespace crft {
namespace {

constexpr std::array<std::pair<Strategy, std::string_view>, 8> kStrategies{{
    {Strategy::saf, "saf"},
    {Strategy::ssf, "ssf"},
    {Strategy::maf, "maf"},
    {Strategy::msf, "msf"},
    {Strategy::union_attn, "union_attn"},
    {Strategy::union_sal, "union_sal"},
    {Strategy::fixed, "fixed"},
    {Strategy::random, "random"},
}};

}  // namespace

std::string_view to_string(Strategy s) {
    for (const auto& [value, name] : kStrategies) {
        if (value == s) return name;
    }
    return "?";
}

std::string_view to_string(Criteria c) {
    switch (c) {
        case Criteria::order: return "order";
        case Criteria::score: return "score";
        case Criteria::random: return "random";
    }
    return "?";
}

std::string_view to_string(ChainMode m) { return m == ChainMode::inherit ? "inherit" : "fresh"; }

Strategy parse_strategy(std::string_view text) {
    for (const auto& [value, name] : kStrategies) {
        if (name == text) return value;
    }
    if (text == "union-attn") return Strategy::union_attn;
    if (text == "union-sal") return Strategy::union_sal;
    throw std::invalid_argument("unknown strategy '" + std::string(text) + "'");
}

Criteria parse_criteria(std::string_view text) {
    if (text == "order") return Criteria::order;
    if (text == "score") return Criteria::score;
    if (text == "random") return Criteria::random;
    throw std::invalid_argument("unknown selection criteria '" + std::string(text) + "'");
}

ChainMode parse_chain_mode(std::string_view text) {
    if (text == "inherit") return ChainMode::inherit;
    if (text == "fresh") return ChainMode::fresh;
    throw std::invalid_argument("unknown chain mode '" + std::string(text) + "'");
}

bool uses_saliency(Strategy s) {
    return s == Strategy::ssf || s == Strategy::msf || s == Strategy::union_sal;
}

CrftConfig CrftConfig::resolved(int n_layers) const {
    CrftConfig out = *this;
    if (out.layer_last < 0) out.layer_last = n_layers - 1;
    if (out.layer_first < 0 || out.layer_first > out.layer_last || out.layer_last >= n_layers) {
        throw std::invalid_argument("layer range " + std::to_string(layer_first) + ":" +
                                    std::to_string(out.layer_last) + " outside [0, " +
                                    std::to_string(n_layers - 1) + "]");
    }
    if (out.k_int < 1) throw std::invalid_argument("k_int must be at least 1");
    if (out.rank < 1) throw std::invalid_argument("rank must be at least 1");
    if (out.alpha < 0.0 || out.alpha > 1.0 || out.beta < 0.0 || out.beta > 1.0) {
        throw std::invalid_argument("thresholds must lie in [0, 1]");
    }
    if (out.prefix < 0 || out.suffix < 0) throw std::invalid_argument("prefix/suffix must be >= 0");
    return out;
}

}  // namespace crft
