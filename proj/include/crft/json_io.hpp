#pragma once

#include <json.hpp>

#include "crft/config.hpp"
#include "crft/experiments.hpp"
#include "crft/model.hpp"
#include "crft/training.hpp"

namespace crft {

using Json = nlohmann::ordered_json;

// Every field is written; reading starts from the defaults, so partial
// objects (config files) override only what they mention. Unknown keys throw.
Json to_json(const ModelConfig& c);
Json to_json(const CrftConfig& c);
Json to_json(const TrainConfig& c);
Json to_json(const PretrainConfig& c);

void merge_json(const Json& j, ModelConfig& c);
void merge_json(const Json& j, CrftConfig& c);
void merge_json(const Json& j, TrainConfig& c);
void merge_json(const Json& j, PretrainConfig& c);

Json to_json(const ChainArithOptions& c);
Json to_json(const BaseRecipe& c);
Json to_json(const NoiseOptions& c);
void merge_json(const Json& j, ChainArithOptions& c);
void merge_json(const Json& j, BaseRecipe& c);
void merge_json(const Json& j, NoiseOptions& c);

template <class T>
T from_json(const Json& j) {
    T value{};
    merge_json(j, value);
    return value;
}

}  // namespace crft
