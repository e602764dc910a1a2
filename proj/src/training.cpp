#include "crft/training.hpp"

#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <string>

#include <json.hpp>

#include "crft/info_flow.hpp"
#include "crft/ops.hpp"

namespace crft {

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
    if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0)) throw std::invalid_argument("warmup_ratio must lie in [0, 1)");
    if (epochs < 1 || batch_size < 1 || grad_accum_steps < 1) {
        throw std::invalid_argument("epochs, batch_size and grad_accum_steps must be positive");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("dropout must lie in [0, 1)");
    if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be >= 0");
}

double lr_at(std::size_t step, std::size_t total_steps, const TrainConfig& cfg) {
    if (total_steps == 0) throw std::invalid_argument("lr_at: total_steps must be positive");
    if (step > total_steps) throw std::invalid_argument("lr_at: step beyond total_steps");
    const double warmup = cfg.warmup_ratio * static_cast<double>(total_steps);
    const double s = static_cast<double>(step);
    if (s < warmup) return cfg.learning_rate * s / warmup;
    return cfg.learning_rate * (static_cast<double>(total_steps) - s) /
           (static_cast<double>(total_steps) - warmup);
}

void optimizer_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state,
                    double lr, double weight_decay, const TrainConfig& cfg) {
    if (params.size() != grads.size()) throw ShapeError("optimizer_step: parameter/gradient count mismatch");
    if (state.m.empty()) {
        for (const Tensor* p : params) {
            state.m.emplace_back(p->shape(), 0.0);
            state.v.emplace_back(p->shape(), 0.0);
        }
    }
    if (state.m.size() != params.size()) throw ShapeError("optimizer_step: state does not match parameters");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i]->shape() != grads[i].shape() || state.m[i].shape() != grads[i].shape()) {
            throw ShapeError("optimizer_step: gradient shape " + shape_string(grads[i].shape()) +
                             " does not match parameter " + shape_string(params[i]->shape()));
        }
    }
    state.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        const Tensor& g = grads[i];
        Tensor& m = state.m[i];
        Tensor& v = state.v[i];
        for (std::size_t k = 0; k < p.size(); ++k) {
            p[k] *= 1.0 - lr * weight_decay;
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            const double mhat = m[k] / bc1;
            const double vhat = v[k] / bc2;
            p[k] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

void write_history(std::ostream& out, const RunHistory& history) {
    for (const auto& s : history.steps) {
        nlohmann::ordered_json rec;
        rec["step"] = s.step;
        rec["loss"] = s.loss;
        rec["lr"] = s.lr;
        rec["grad_norm"] = s.grad_norm;
        out << rec.dump() << '\n';
    }
}

RunHistory read_history(std::istream& in) {
    RunHistory h;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto rec = nlohmann::json::parse(line);
        h.steps.push_back({rec.at("step").get<std::size_t>(), rec.at("loss").get<double>(),
                           rec.at("lr").get<double>(), rec.at("grad_norm").get<double>()});
    }
    return h;
}

double answer_loss(const Model& model, const TaskSample& sample, const ForwardOptions& options) {
    const auto input = sample.teacher_input();
    const auto labels = sample.teacher_labels();
    ForwardTrace trace = forward(model, input, options);
    Tape tape;
    Var logits = tape.constant(trace.logits);
    return tape.value(ops::cross_entropy(tape, logits, labels))[0];
}

namespace {

double norm_of(std::span<const Tensor> grads) {
    double s = 0.0;
    for (const Tensor& g : grads) {
        for (double v : g.values()) s += v * v;
    }
    return std::sqrt(s);
}

void check_finite(double loss, std::size_t step) {
    if (!std::isfinite(loss)) {
        throw NonFiniteLoss("non-finite loss " + std::to_string(loss) + " at step " + std::to_string(step));
    }
}

}  // namespace

RunHistory pretrain(Model& model, const Dataset& data, const PretrainConfig& cfg, const EvalFn& eval) {
    if (data.empty()) throw std::invalid_argument("pretrain: empty dataset");
    if (cfg.max_steps == 0 || cfg.batch_size < 1) throw std::invalid_argument("pretrain: bad step budget");
    TrainConfig sched;
    sched.learning_rate = cfg.learning_rate;
    sched.warmup_ratio = cfg.warmup_ratio;

    const std::size_t n_weights = model.weights().size();
    std::vector<Tensor*> params;
    for (auto& w : model.weights()) params.push_back(&w.value);
    AdamState state;
    Rng order(Rng::derive(cfg.seed, {0x0b}));
    RunHistory history;

    for (std::size_t step = 0; step < cfg.max_steps; ++step) {
        std::vector<Tensor> grads;
        for (const auto& w : model.weights()) grads.emplace_back(w.value.shape(), 0.0);
        double loss_sum = 0.0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const TaskSample& s = data[order.below(data.size())];
            const auto input = s.teacher_input();
            const auto labels = s.teacher_labels();
            Tape tape;
            auto w = bind_weights(tape, model, true);
            Rng drop(Rng::derive(cfg.seed, {step, static_cast<std::uint64_t>(b)}));
            TapedOptions opts;
            opts.mode = model.config().dropout > 0.0 ? Mode::train : Mode::eval;
            opts.dropout_rng = &drop;
            TapedForward tf = forward_on_tape(tape, model, w, input, opts);
            Var loss = ops::cross_entropy(tape, tf.logits, labels);
            loss_sum += tape.value(loss)[0];
            tape.backward(loss);
            for (std::size_t i = 0; i < n_weights; ++i) {
                if (const Tensor* g = tape.grad(w[i])) {
                    for (std::size_t k = 0; k < g->size(); ++k) grads[i][k] += (*g)[k];
                }
            }
        }
        const double inv = 1.0 / cfg.batch_size;
        for (Tensor& g : grads) {
            for (double& v : g.values()) v *= inv;
        }
        const double loss = loss_sum * inv;
        check_finite(loss, step);
        double gn = norm_of(grads);
        if (gn > 1.0) {
            for (Tensor& g : grads) {
                for (double& v : g.values()) v /= gn;
            }
        }
        const double lr = lr_at(step, cfg.max_steps, sched);
        optimizer_step(params, grads, state, lr, cfg.weight_decay, sched);
        model.train_step += 1;
        history.steps.push_back({step, loss, lr, gn});

        if (eval && cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) {
            const double acc = eval(model);
            history.epochs.push_back({static_cast<int>(step + 1), loss, acc});
            if (cfg.stop_max > 0.0 && acc >= cfg.stop_min && acc <= cfg.stop_max) break;
        }
    }
    return history;
}

CrftResult train_crft(const Model& model, const Dataset& data, const CrftConfig& raw,
                      const TrainConfig& train, const CrftHooks& hooks) {
    if (data.empty()) throw std::invalid_argument("train_crft: empty dataset");
    train.validate();
    const CrftConfig cfg = raw.resolved(model.config().n_layers);
    const std::string digest_before = freeze_digest(model);

    CrftResult result;
    result.params = init_params(static_cast<std::size_t>(model.config().d_model),
                                static_cast<std::size_t>(cfg.rank), cfg.layer_first, cfg.layer_last,
                                cfg.group_count(), Rng::derive(train.seed, {0x1417}), cfg.train_R);

    std::vector<Tensor*> trainable;
    for (auto& [key, block] : result.params.blocks()) {
        trainable.push_back(&block.W);
        trainable.push_back(&block.b);
        if (cfg.train_R) trainable.push_back(&block.R);
    }

    // Identification runs on the frozen base without interventions; its
    // result does not change across epochs, so each example is identified once.
    std::vector<std::optional<CriticalSet>> sites(data.size());

    const std::size_t per_step = train.examples_per_step();
    const std::size_t steps_per_epoch = (data.size() + per_step - 1) / per_step;
    std::size_t total_steps = steps_per_epoch * static_cast<std::size_t>(train.epochs);
    if (train.max_steps > 0) total_steps = std::min(total_steps, train.max_steps);

    AdamState state;
    std::size_t step = 0;
    for (int epoch = 0; epoch < train.epochs && step < total_steps; ++epoch) {
        std::vector<std::size_t> order(data.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle(Rng::derive(train.seed, {0x5u, static_cast<std::uint64_t>(epoch)}));
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

        double epoch_loss = 0.0;
        std::size_t epoch_count = 0;
        for (std::size_t start = 0; start < order.size() && step < total_steps; start += per_step) {
            const std::size_t end = std::min(order.size(), start + per_step);
            std::vector<Tensor> grads;
            for (const Tensor* p : trainable) grads.emplace_back(p->shape(), 0.0);
            double loss_sum = 0.0;
            for (std::size_t k = start; k < end; ++k) {
                const std::size_t idx = order[k];
                const TaskSample& sample = data[idx];
                const auto input = sample.teacher_input();
                const auto labels = sample.teacher_labels();
                if (!sites[idx]) {
                    sites[idx] = identify(model, input, sample.teacher_segments(), cfg,
                                          std::span<const int>(labels), idx);
                }
                Tape tape;
                auto w = bind_weights(tape, model, false);
                BoundInterventions bound = bind(tape, result.params, true);
                Rng drop(Rng::derive(train.seed, {0xd0, step, idx}));
                TapedOptions opts;
                opts.sites = &*sites[idx];
                opts.interventions = &bound;
                opts.mode = Mode::train;
                opts.block_dropout = false;
                opts.source_dropout = train.dropout;
                opts.dropout_rng = &drop;
                TapedForward tf = forward_on_tape(tape, model, w, input, opts);
                Var loss = ops::cross_entropy(tape, tf.logits, labels);
                loss_sum += tape.value(loss)[0];
                tape.backward(loss);

                for (Var v : w) {
                    if (tape.requires_grad(v) || tape.grad(v) != nullptr) result.base_gradient_free = false;
                }
                std::size_t slot = 0;
                for (const auto& [key, blk] : bound.blocks) {
                    const Var vars[3] = {blk.W, blk.b, blk.R};
                    const int count = cfg.train_R ? 3 : 2;
                    for (int i = 0; i < count; ++i, ++slot) {
                        if (const Tensor* g = tape.grad(vars[i])) {
                            for (std::size_t e = 0; e < g->size(); ++e) grads[slot][e] += (*g)[e];
                        }
                    }
                }
            }
            const double inv = 1.0 / static_cast<double>(end - start);
            for (Tensor& g : grads) {
                for (double& v : g.values()) v *= inv;
            }
            const double loss = loss_sum * inv;
            check_finite(loss, step);
            const double lr = lr_at(step, total_steps, train);
            const double gn = norm_of(grads);
            optimizer_step(trainable, grads, state, lr, train.weight_decay, train);

            double ortho = 0.0;
            for (auto& [key, block] : result.params.blocks()) {
                if (cfg.train_R) block.R = orthonormalize(block.R);
                ortho = std::max(ortho, orthonormality_error(block.R));
            }
            result.orthonormality.push_back(ortho);
            result.history.steps.push_back({step, loss, lr, gn});
            epoch_loss += loss_sum;
            epoch_count += end - start;
            ++step;
            if (hooks.on_step) hooks.on_step(step, result.params);
        }
        EpochRecord rec{epoch, epoch_loss / static_cast<double>(std::max<std::size_t>(epoch_count, 1)), {}};
        if (hooks.eval) rec.eval_accuracy = hooks.eval(model);
        result.history.epochs.push_back(rec);
    }

    if (freeze_digest(model) != digest_before) {
        throw std::logic_error("base model weights changed during intervention training");
    }
    return result;
}

}  // namespace crft
