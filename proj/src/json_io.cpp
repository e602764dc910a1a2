#include "crft/json_io.hpp"

#include <stdexcept>
#include <string>

namespace crft {
namespace {

// Reads j[key] into `out` when present and records the key as consumed.
template <class T>
void take(const Json& j, const char* key, T& out, std::size_t& used) {
    auto it = j.find(key);
    if (it == j.end()) return;
    out = it->template get<T>();
    ++used;
}

void expect_object(const Json& j, const char* what) {
    if (!j.is_object()) throw std::invalid_argument(std::string(what) + " must be a JSON object");
}

void check_unknown(const Json& j, std::size_t used, const char* what) {
    if (used == j.size()) return;
    throw std::invalid_argument(std::string("unknown key in ") + what + " object: " + j.dump());
}

}  // namespace

Json to_json(const ModelConfig& c) {
    return Json{{"n_layers", c.n_layers}, {"n_heads", c.n_heads}, {"d_model", c.d_model},
                {"d_ff", c.d_ff},         {"vocab_size", c.vocab_size}, {"max_seq", c.max_seq},
                {"dropout", c.dropout}};
}

void merge_json(const Json& j, ModelConfig& c) {
    expect_object(j, "model config");
    std::size_t used = 0;
    take(j, "n_layers", c.n_layers, used);
    take(j, "n_heads", c.n_heads, used);
    take(j, "d_model", c.d_model, used);
    take(j, "d_ff", c.d_ff, used);
    take(j, "vocab_size", c.vocab_size, used);
    take(j, "max_seq", c.max_seq, used);
    take(j, "dropout", c.dropout, used);
    check_unknown(j, used, "model config");
}

Json to_json(const CrftConfig& c) {
    return Json{{"strategy", to_string(c.strategy)},
                {"alpha", c.alpha},
                {"beta", c.beta},
                {"k_int", c.k_int},
                {"criteria", to_string(c.criteria)},
                {"chain", to_string(c.chain)},
                {"layer_first", c.layer_first},
                {"layer_last", c.layer_last},
                {"rank", c.rank},
                {"train_R", c.train_R},
                {"segment_grouping", c.segment_grouping},
                {"prefix", c.prefix},
                {"suffix", c.suffix},
                {"align_grid_layers", c.align_grid_layers},
                {"seed", c.seed}};
}

void merge_json(const Json& j, CrftConfig& c) {
    expect_object(j, "crft config");
    std::size_t used = 0;
    if (j.contains("strategy")) {
        c.strategy = parse_strategy(j.at("strategy").get<std::string>());
        ++used;
    }
    if (j.contains("criteria")) {
        c.criteria = parse_criteria(j.at("criteria").get<std::string>());
        ++used;
    }
    if (j.contains("chain")) {
        c.chain = parse_chain_mode(j.at("chain").get<std::string>());
        ++used;
    }
    take(j, "alpha", c.alpha, used);
    take(j, "beta", c.beta, used);
    take(j, "k_int", c.k_int, used);
    take(j, "layer_first", c.layer_first, used);
    take(j, "layer_last", c.layer_last, used);
    take(j, "rank", c.rank, used);
    take(j, "train_R", c.train_R, used);
    take(j, "segment_grouping", c.segment_grouping, used);
    take(j, "prefix", c.prefix, used);
    take(j, "suffix", c.suffix, used);
    take(j, "align_grid_layers", c.align_grid_layers, used);
    take(j, "seed", c.seed, used);
    check_unknown(j, used, "crft config");
}

Json to_json(const TrainConfig& c) {
    return Json{{"epochs", c.epochs},
                {"batch_size", c.batch_size},
                {"grad_accum_steps", c.grad_accum_steps},
                {"learning_rate", c.learning_rate},
                {"warmup_ratio", c.warmup_ratio},
                {"weight_decay", c.weight_decay},
                {"dropout", c.dropout},
                {"seed", c.seed},
                {"beta1", c.beta1},
                {"beta2", c.beta2},
                {"eps", c.eps},
                {"max_steps", c.max_steps}};
}

void merge_json(const Json& j, TrainConfig& c) {
    expect_object(j, "train config");
    std::size_t used = 0;
    take(j, "epochs", c.epochs, used);
    take(j, "batch_size", c.batch_size, used);
    take(j, "grad_accum_steps", c.grad_accum_steps, used);
    take(j, "learning_rate", c.learning_rate, used);
    take(j, "warmup_ratio", c.warmup_ratio, used);
    take(j, "weight_decay", c.weight_decay, used);
    take(j, "dropout", c.dropout, used);
    take(j, "seed", c.seed, used);
    take(j, "beta1", c.beta1, used);
    take(j, "beta2", c.beta2, used);
    take(j, "eps", c.eps, used);
    take(j, "max_steps", c.max_steps, used);
    check_unknown(j, used, "train config");
}

Json to_json(const PretrainConfig& c) {
    return Json{{"max_steps", c.max_steps},         {"batch_size", c.batch_size},
                {"learning_rate", c.learning_rate}, {"warmup_ratio", c.warmup_ratio},
                {"weight_decay", c.weight_decay},   {"seed", c.seed},
                {"eval_every", c.eval_every},       {"stop_min", c.stop_min},
                {"stop_max", c.stop_max}};
}

void merge_json(const Json& j, PretrainConfig& c) {
    expect_object(j, "pretrain config");
    std::size_t used = 0;
    take(j, "max_steps", c.max_steps, used);
    take(j, "batch_size", c.batch_size, used);
    take(j, "learning_rate", c.learning_rate, used);
    take(j, "warmup_ratio", c.warmup_ratio, used);
    take(j, "weight_decay", c.weight_decay, used);
    take(j, "seed", c.seed, used);
    take(j, "eval_every", c.eval_every, used);
    take(j, "stop_min", c.stop_min, used);
    take(j, "stop_max", c.stop_max, used);
    check_unknown(j, used, "pretrain config");
}

namespace {

std::string split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "?";
}

Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw std::invalid_argument("unknown split '" + s + "'");
}

std::string operator_name(int op) {
    switch (op) {
        case vocab::kPlus: return "+";
        case vocab::kMinus: return "-";
        case vocab::kTimes: return "*";
    }
    throw std::invalid_argument("unknown operator token " + std::to_string(op));
}

int parse_operator(const std::string& s) {
    if (s == "+") return vocab::kPlus;
    if (s == "-") return vocab::kMinus;
    if (s == "*") return vocab::kTimes;
    throw std::invalid_argument("unknown operator '" + s + "'");
}

}  // namespace

Json to_json(const ChainArithOptions& c) {
    Json ops = Json::array();
    for (int op : c.operators) ops.push_back(operator_name(op));
    return Json{{"n_steps", c.n_steps}, {"modulus", c.modulus},      {"shots", c.shots},
                {"shot_steps", c.shot_steps}, {"split", split_name(c.split)}, {"operators", ops}, {"cot", c.cot}};
}

void merge_json(const Json& j, ChainArithOptions& c) {
    expect_object(j, "task");
    std::size_t used = 0;
    take(j, "n_steps", c.n_steps, used);
    take(j, "modulus", c.modulus, used);
    take(j, "shots", c.shots, used);
    take(j, "shot_steps", c.shot_steps, used);
    take(j, "cot", c.cot, used);
    if (j.contains("split")) {
        c.split = parse_split(j.at("split").get<std::string>());
        ++used;
    }
    if (j.contains("operators")) {
        c.operators.clear();
        for (const auto& op : j.at("operators")) c.operators.push_back(parse_operator(op.get<std::string>()));
        ++used;
    }
    check_unknown(j, used, "task");
}

Json to_json(const BaseRecipe& c) {
    return Json{{"model", to_json(c.model)},
                {"model_seed", c.model_seed},
                {"data_seed", c.data_seed},
                {"task", to_json(c.task)},
                {"train_examples", c.train_examples},
                {"val_examples", c.val_examples},
                {"reasoning", to_json(c.reasoning)},
                {"answer_only", to_json(c.answer_only)}};
}

void merge_json(const Json& j, BaseRecipe& c) {
    expect_object(j, "base recipe");
    std::size_t used = 0;
    auto section = [&](const char* key, auto& target) {
        if (!j.contains(key)) return;
        merge_json(j.at(key), target);
        ++used;
    };
    section("model", c.model);
    section("task", c.task);
    section("reasoning", c.reasoning);
    section("answer_only", c.answer_only);
    take(j, "model_seed", c.model_seed, used);
    take(j, "data_seed", c.data_seed, used);
    take(j, "train_examples", c.train_examples, used);
    take(j, "val_examples", c.val_examples, used);
    check_unknown(j, used, "base recipe");
}

Json to_json(const NoiseOptions& c) {
    return Json{{"top_k", c.top_k},   {"bottom_k", c.bottom_k}, {"levels", c.levels},
                {"trials", c.trials}, {"seed", c.seed},         {"scale_by_rms", c.scale_by_rms}};
}

void merge_json(const Json& j, NoiseOptions& c) {
    expect_object(j, "noise");
    std::size_t used = 0;
    take(j, "top_k", c.top_k, used);
    take(j, "bottom_k", c.bottom_k, used);
    take(j, "levels", c.levels, used);
    take(j, "trials", c.trials, used);
    take(j, "seed", c.seed, used);
    take(j, "scale_by_rms", c.scale_by_rms, used);
    check_unknown(j, used, "noise");
}

}  // namespace crft
