#include "crft/cli.hpp"

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>

#include "crft/checkpoint.hpp"
#include "crft/experiments.hpp"
#include "crft/heatmap.hpp"
#include "crft/info_flow.hpp"
#include "crft/json_io.hpp"
#include "crft/manifest.hpp"

namespace crft {
namespace {

namespace fs = std::filesystem;

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct DataSpec {
    std::uint64_t seed = 1;
    std::size_t train = 1000;
    std::size_t val = 200;
    std::size_t test = 300;
};

struct HeatmapSpec {
    int layer = 0;
    std::string kind = "attention";
    std::string format = "pgm";
    std::size_t example = 0;
};

/// Every configurable section; each command resolves the subset it uses.
struct Settings {
    BaseRecipe recipe;
    ChainArithOptions task = BaseRecipe::desk_task();
    DataSpec data;
    CrftConfig crft;
    TrainConfig train;
    NoiseOptions noise;
    std::vector<std::string> axes = {"threshold"};
    HeatmapSpec heatmap;
};

Json data_json(const DataSpec& d) {
    return Json{{"seed", d.seed}, {"train", d.train}, {"val", d.val}, {"test", d.test}};
}

Json heatmap_json(const HeatmapSpec& h) {
    return Json{{"layer", h.layer}, {"kind", h.kind}, {"format", h.format}, {"example", h.example}};
}

template <class T>
void read_field(const Json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

void check_keys(const Json& j, std::initializer_list<const char*> keys, const char* what) {
    if (!j.is_object()) throw UsageError(std::string(what) + " must be a JSON object");
    for (const auto& [k, v] : j.items()) {
        bool known = false;
        for (const char* key : keys) known = known || k == key;
        if (!known) throw UsageError("unknown key '" + k + "' in " + what);
    }
}

void merge_settings(const Json& j, Settings& s) {
    check_keys(j, {"recipe", "task", "data", "crft", "train", "noise", "ablate", "heatmap"}, "config file");
    if (j.contains("recipe")) merge_json(j.at("recipe"), s.recipe);
    if (j.contains("task")) merge_json(j.at("task"), s.task);
    if (j.contains("crft")) merge_json(j.at("crft"), s.crft);
    if (j.contains("train")) merge_json(j.at("train"), s.train);
    if (j.contains("noise")) merge_json(j.at("noise"), s.noise);
    if (j.contains("data")) {
        const Json& d = j.at("data");
        check_keys(d, {"seed", "train", "val", "test"}, "data section");
        read_field(d, "seed", s.data.seed);
        read_field(d, "train", s.data.train);
        read_field(d, "val", s.data.val);
        read_field(d, "test", s.data.test);
    }
    if (j.contains("ablate")) {
        check_keys(j.at("ablate"), {"axes"}, "ablate section");
        read_field(j.at("ablate"), "axes", s.axes);
    }
    if (j.contains("heatmap")) {
        const Json& h = j.at("heatmap");
        check_keys(h, {"layer", "kind", "format", "example"}, "heatmap section");
        read_field(h, "layer", s.heatmap.layer);
        read_field(h, "kind", s.heatmap.kind);
        read_field(h, "format", s.heatmap.format);
        read_field(h, "example", s.heatmap.example);
    }
}

// ---- flags --------------------------------------------------------------------

struct Flags {
    std::optional<std::string> config;
    std::optional<std::string> out;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> checkpoint;
    std::optional<std::string> interventions;
    std::optional<std::string> train_data;
    std::optional<std::string> eval_data;
    std::optional<std::string> manifest;

    std::optional<std::string> strategy;
    std::optional<double> alpha;
    std::optional<double> beta;
    std::optional<int> k_int;
    std::optional<std::string> criteria;
    std::optional<std::string> chain;
    std::optional<std::string> layers;
    std::optional<int> rank;
    bool train_r = false;
    bool segments = false;

    std::optional<int> epochs;
    std::optional<double> lr;

    std::optional<std::string> noise_levels;
    std::optional<int> trials;
    std::vector<std::string> axes;

    std::optional<int> layer;
    std::optional<std::string> kind;
    std::optional<std::string> format;
    std::optional<std::size_t> example;
};

void add_common(CLI::App* app, Flags& f) {
    app->add_option("--config", f.config, "JSON config file (defaults < file < flags)");
    app->add_option("--out", f.out, "run directory (relative paths resolve under CRFT_RUN_DIR when set)");
}

void add_inputs(CLI::App* app, Flags& f) {
    app->add_option("--checkpoint", f.checkpoint, "base model checkpoint")->required();
    app->add_option("--train-data", f.train_data, "training samples (JSONL) instead of generated ones");
    app->add_option("--eval-data", f.eval_data, "evaluation samples (JSONL) instead of the generated test split");
}

void add_crft(CLI::App* app, Flags& f) {
    app->add_option("--strategy", f.strategy, "saf|ssf|maf|msf|union_attn|union_sal|fixed|random");
    app->add_option("--alpha", f.alpha, "self-referential threshold");
    app->add_option("--beta", f.beta, "multi-referential threshold");
    app->add_option("--k-int", f.k_int, "positions per layer");
    app->add_option("--criteria", f.criteria, "order|score|random");
    app->add_option("--chain", f.chain, "inherit|fresh");
    app->add_option("--layers", f.layers, "intervened layer range A:B");
    app->add_option("--rank", f.rank, "intervention rank");
    app->add_flag("--train-r", f.train_r, "train the projection R as well");
    app->add_flag("--segments", f.segments, "separate parameters for demonstration and question");
}

void add_train(CLI::App* app, Flags& f) {
    app->add_option("--epochs", f.epochs, "training epochs");
    app->add_option("--lr", f.lr, "peak learning rate");
}

std::vector<double> parse_levels(const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != item.size() || item.empty()) throw UsageError("bad noise level '" + item + "'");
        out.push_back(v);
    }
    if (out.empty()) throw UsageError("--noise-levels needs at least one value");
    return out;
}

void apply_crft_flags(const Flags& f, CrftConfig& c) {
    try {
        if (f.strategy) c.strategy = parse_strategy(*f.strategy);
        if (f.criteria) c.criteria = parse_criteria(*f.criteria);
        if (f.chain) c.chain = parse_chain_mode(*f.chain);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    if (f.alpha) c.alpha = *f.alpha;
    if (f.beta) c.beta = *f.beta;
    if (f.k_int) c.k_int = *f.k_int;
    if (f.rank) c.rank = *f.rank;
    if (f.train_r) c.train_R = true;
    if (f.segments) c.segment_grouping = true;
    if (f.layers) {
        const auto colon = f.layers->find(':');
        try {
            if (colon == std::string::npos) throw std::invalid_argument("");
            std::size_t a = 0;
            std::size_t b = 0;
            const std::string lo = f.layers->substr(0, colon);
            const std::string hi = f.layers->substr(colon + 1);
            c.layer_first = std::stoi(lo, &a);
            c.layer_last = std::stoi(hi, &b);
            if (a != lo.size() || b != hi.size()) throw std::invalid_argument("");
        } catch (const std::exception&) {
            throw UsageError("--layers expects A:B, got '" + *f.layers + "'");
        }
    }
}

// ---- run directory --------------------------------------------------------------

fs::path resolve_out(const Flags& f, const std::string& command) {
    fs::path out = f.out ? fs::path(*f.out) : fs::path(command);
    if (out.is_relative()) {
        const char* root = std::getenv("CRFT_RUN_DIR");
        out = fs::path(root != nullptr && *root != '\0' ? root : "runs") / out;
    }
    return out;
}

class Run {
public:
    Run(std::string command, fs::path dir) : dir_(std::move(dir)), start_(std::chrono::steady_clock::now()) {
        manifest_.command = std::move(command);
        std::error_code ec;
        fs::create_directories(dir_, ec);
        if (ec) throw std::runtime_error("cannot create run directory " + dir_.string() + ": " + ec.message());
    }

    const fs::path& dir() const { return dir_; }
    RunManifest& manifest() { return manifest_; }

    void input(const std::string& role, const std::optional<std::string>& path) {
        if (path) manifest_.inputs[role] = fs::absolute(*path).string();
    }

    void emit(const std::string& role, const std::string& name, const std::string& bytes) {
        write_file_atomic(dir_ / name, bytes);
        manifest_.outputs[role] = name;
        manifest_.digests[name] = sha256_hex(bytes);
    }

    void finish(std::ostream& out) {
        manifest_.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        write_manifest(dir_ / "manifest.json", manifest_);
        out << "run directory: " << dir_.string() << "\n";
    }

private:
    fs::path dir_;
    RunManifest manifest_;
    std::chrono::steady_clock::time_point start_;
};

Dataset read_samples(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open dataset " + path);
    return read_dataset(in);
}

TaskSplits load_data(const Settings& s, const Flags& f) {
    TaskSplits d = make_splits(s.task, s.data.train, s.data.val, s.data.test, s.data.seed);
    if (f.train_data) d.train = read_samples(*f.train_data);
    if (f.eval_data) d.test = read_samples(*f.eval_data);
    return d;
}

std::string jsonl(const std::vector<Json>& rows) {
    std::string out;
    for (const Json& r : rows) out += r.dump() + "\n";
    return out;
}

std::string history_text(const RunHistory& h) {
    std::ostringstream ss;
    write_history(ss, h);
    return ss.str();
}

Json sites_json(const CriticalSet& set) {
    Json layers = Json::array();
    for (const auto& l : set.layers) {
        layers.push_back(Json{{"layer", l.layer}, {"positions", l.positions}, {"groups", l.groups}});
    }
    return Json{{"width", set.width}, {"layers", layers}};
}

// ---- commands ---------------------------------------------------------------------

void cmd_pretrain(Run& run, const Settings& s, std::ostream& out) {
    const BaseReport rep = build_desk_base(s.recipe);
    const TaskSplits held = make_splits(s.recipe.task, 1, 1, 300, Rng::derive(s.recipe.data_seed, {0x7e57}));
    const double test = evaluate(rep.model, held.test).accuracy;
    run.emit("checkpoint", "base.ckpt", encode_checkpoint(rep.model));
    run.emit("reasoning_history", "reasoning_history.jsonl", history_text(rep.reasoning));
    run.emit("answer_only_history", "answer_only_history.jsonl", history_text(rep.answer_only));
    const Json metrics{{"reasoning_steps", rep.reasoning.steps.size()},
                       {"reasoning_val_accuracy", rep.reasoning_val_accuracy},
                       {"answer_only_steps", rep.answer_only.steps.size()},
                       {"val_accuracy", rep.val_accuracy},
                       {"test_accuracy", test},
                       {"digest", freeze_digest(rep.model)}};
    run.emit("metrics", "metrics.json", metrics.dump(2) + "\n");
    out << "base model: val accuracy " << rep.val_accuracy << ", test accuracy " << test << "\n";
}

void cmd_identify(Run& run, const Settings& s, const Flags& f, std::ostream& out) {
    const Model model = load_checkpoint(*f.checkpoint);
    const TaskSplits data = load_data(s, f);
    std::vector<Json> rows;
    std::vector<double> active(static_cast<std::size_t>(s.crft.resolved(model.config().n_layers).layer_count()), 0.0);
    for (std::size_t i = 0; i < data.test.size(); ++i) {
        const TaskSample& sample = data.test[i];
        SegmentMap seg;
        seg.tags.assign(sample.segments.tags.begin(),
                        sample.segments.tags.begin() + static_cast<std::ptrdiff_t>(sample.prompt.size()));
        const CriticalSet set = identify(model, sample.prompt, seg, s.crft, std::nullopt, eval_example_key(i));
        for (std::size_t l = 0; l < set.layers.size(); ++l) {
            for (int p : set.layers[l].positions) active[l] += p != kSentinel;
        }
        Json row = sites_json(set);
        row["example"] = i;
        row["prompt"] = vocab::render(sample.prompt);
        rows.push_back(std::move(row));
    }
    for (double& a : active) a /= static_cast<double>(data.test.size());
    run.emit("sites", "sites.jsonl", jsonl(rows));
    const Json metrics{{"examples", data.test.size()}, {"mean_active_per_layer", active}};
    run.emit("metrics", "metrics.json", metrics.dump(2) + "\n");
    out << "identified positions for " << data.test.size() << " examples\n";
}

void cmd_train(Run& run, const Settings& s, const Flags& f, std::ostream& out) {
    const Model model = load_checkpoint(*f.checkpoint);
    const TaskSplits data = load_data(s, f);
    const CrftConfig cfg = s.crft.resolved(model.config().n_layers);
    const CrftResult r = train_crft(model, data.train, cfg, s.train);
    const double acc = evaluate(model, data.test, InterventionSpec{&r.params, cfg}).accuracy;
    run.emit("interventions", "interventions.ckpt", encode_interventions(r.params, cfg));
    run.emit("history", "history.jsonl", history_text(r.history));
    const Json metrics{{"steps", r.history.steps.size()},
                       {"final_loss", r.history.steps.empty() ? 0.0 : r.history.steps.back().loss},
                       {"trainable_parameters", r.params.trainable_count()},
                       {"test_accuracy", acc},
                       {"base_digest", freeze_digest(model)},
                       {"base_gradient_free", r.base_gradient_free}};
    run.emit("metrics", "metrics.json", metrics.dump(2) + "\n");
    out << "trained " << r.params.trainable_count() << " parameters; test accuracy " << acc << "\n";
}

void cmd_eval(Run& run, const Settings& s, const Flags& f, std::ostream& out) {
    const Model model = load_checkpoint(*f.checkpoint);
    const TaskSplits data = load_data(s, f);
    std::optional<InterventionFile> iv;
    if (f.interventions) iv = load_interventions(*f.interventions);
    std::optional<InterventionSpec> spec;
    if (iv) spec = InterventionSpec{&iv->params, iv->config};
    const EvalResult r = evaluate(model, data.test, spec);
    std::vector<Json> rows;
    for (std::size_t i = 0; i < r.records.size(); ++i) {
        rows.push_back(Json{{"example", i},
                            {"generated", vocab::render(r.records[i].generated)},
                            {"answer", data.test[i].answer},
                            {"correct", r.records[i].correct}});
    }
    run.emit("predictions", "predictions.jsonl", jsonl(rows));
    const Json metrics{{"examples", data.test.size()}, {"accuracy", r.accuracy}, {"interventions", iv.has_value()}};
    run.emit("metrics", "metrics.json", metrics.dump(2) + "\n");
    out << (iv ? "intervened" : "baseline") << " accuracy " << r.accuracy << "\n";
}

void cmd_perturb(Run& run, const Settings& s, const Flags& f, std::ostream& out) {
    const Model model = load_checkpoint(*f.checkpoint);
    const TaskSplits data = load_data(s, f);
    const RetentionCurve c = noise_experiment(model, data.test, s.crft, s.noise);
    std::string csv = "level,top,bottom\n";
    char buf[96];
    for (std::size_t i = 0; i < c.levels.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", c.levels[i], c.top[i], c.bottom[i]);
        csv += buf;
    }
    run.emit("retention", "retention.csv", csv);
    const auto cal = calibrate_noise(c);
    Json metrics{{"examples", c.examples}, {"levels", c.levels}, {"top", c.top}, {"bottom", c.bottom}};
    metrics["calibrated_level"] = cal ? Json(*cal) : Json(nullptr);
    run.emit("metrics", "metrics.json", metrics.dump(2) + "\n");
    out << csv;
}

void cmd_ablate(Run& run, const Settings& s, const Flags& f, std::ostream& out) {
    const Model model = load_checkpoint(*f.checkpoint);
    const TaskSplits data = load_data(s, f);
    std::vector<AblationAxis> axes;
    try {
        for (const auto& a : s.axes) axes.push_back(parse_axis(a));
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    const auto cells = ablation_suite(model, data.train, data.test, s.crft, s.train, axes);
    std::string csv = "axis,value,accuracy,trained\n";
    Json rows = Json::array();
    char buf[64];
    for (const auto& cell : cells) {
        std::snprintf(buf, sizeof buf, "%.17g", cell.accuracy);
        csv += std::string(to_string(cell.axis)) + "," + cell.value + "," + buf + "," + (cell.trained ? "1" : "0") + "\n";
        rows.push_back(Json{{"axis", to_string(cell.axis)},
                            {"value", cell.value},
                            {"accuracy", cell.accuracy},
                            {"config", to_json(cell.config)}});
    }
    run.emit("table", "ablation.csv", csv);
    run.emit("metrics", "metrics.json", Json{{"cells", rows}}.dump(2) + "\n");
    out << csv;
}

void cmd_heatmap(Run& run, const Settings& s, const Flags& f, std::ostream& out) {
    const Model model = load_checkpoint(*f.checkpoint);
    const TaskSplits data = load_data(s, f);
    const HeatmapSpec& h = s.heatmap;
    if (h.example >= data.test.size()) throw UsageError("--example out of range");
    HeatmapFormat format;
    try {
        format = parse_heatmap_format(h.format);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    const TaskSample& sample = data.test[h.example];
    InfoGrid grid;
    if (h.kind == "attention") {
        grid = attention_grid(forward(model, sample.prompt), h.layer);
    } else if (h.kind == "saliency") {
        const SaliencyPass pass = saliency_pass(model, sample.prompt);
        grid = saliency_grid(pass.trace, h.layer, pass.grads);
    } else {
        throw UsageError("--kind must be attention or saliency");
    }
    const std::string name = "grid." + h.format;
    run.emit("heatmap", name, format == HeatmapFormat::csv ? render_csv(grid.values) : render_pgm(grid.values));
    out << "wrote " << (run.dir() / name).string() << " for prompt " << vocab::render(sample.prompt) << "\n";
}

Json resolved_config(const std::string& command, const Settings& s, const Model* model) {
    Json j = Json::object();
    if (command == "pretrain") {
        j["recipe"] = to_json(s.recipe);
        return j;
    }
    j["task"] = to_json(s.task);
    j["data"] = data_json(s.data);
    const int layers = model != nullptr ? model->config().n_layers : 0;
    auto crft = [&] { return to_json(layers > 0 ? s.crft.resolved(layers) : s.crft); };
    if (command == "identify" || command == "train" || command == "perturb" || command == "ablate") j["crft"] = crft();
    if (command == "train" || command == "ablate") j["train"] = to_json(s.train);
    if (command == "perturb") j["noise"] = to_json(s.noise);
    if (command == "ablate") j["ablate"] = Json{{"axes", s.axes}};
    if (command == "heatmap") j["heatmap"] = heatmap_json(s.heatmap);
    return j;
}

int dispatch(const std::string& command, const Flags& f, std::ostream& out) {
    Settings s;
    if (f.config) {
        const std::string text = read_file(*f.config);
        Json j;
        try {
            j = Json::parse(text);
        } catch (const nlohmann::json::parse_error& e) {
            throw UsageError(std::string("config file is not valid JSON: ") + e.what());
        }
        try {
            merge_settings(j, s);
        } catch (const std::invalid_argument& e) {
            throw UsageError(e.what());
        } catch (const nlohmann::json::exception& e) {
            throw UsageError(std::string("bad config value: ") + e.what());
        }
    }
    apply_crft_flags(f, s.crft);
    if (f.epochs) s.train.epochs = *f.epochs;
    if (f.lr) s.train.learning_rate = *f.lr;
    if (f.noise_levels) s.noise.levels = parse_levels(*f.noise_levels);
    if (f.trials) s.noise.trials = *f.trials;
    if (!f.axes.empty()) s.axes = f.axes;
    if (f.layer) s.heatmap.layer = *f.layer;
    if (f.kind) s.heatmap.kind = *f.kind;
    if (f.format) s.heatmap.format = *f.format;
    if (f.example) s.heatmap.example = *f.example;
    if (f.seed) {
        s.recipe.model_seed = *f.seed;
        s.crft.seed = *f.seed;
        s.train.seed = *f.seed;
        s.noise.seed = *f.seed;
    }

    std::optional<Model> model;
    if (f.checkpoint) model = load_checkpoint(*f.checkpoint);
    if (model) {
        try {
            s.crft = s.crft.resolved(model->config().n_layers);
            s.train.validate();
        } catch (const std::invalid_argument& e) {
            throw UsageError(e.what());
        }
    }

    Run run(command, resolve_out(f, command));
    run.manifest().config = resolved_config(command, s, model ? &*model : nullptr);
    run.manifest().seed = command == "pretrain" ? s.recipe.model_seed : s.train.seed;
    run.input("checkpoint", f.checkpoint);
    run.input("interventions", f.interventions);
    run.input("train-data", f.train_data);
    run.input("eval-data", f.eval_data);

    if (command == "pretrain") cmd_pretrain(run, s, out);
    else if (command == "identify") cmd_identify(run, s, f, out);
    else if (command == "train") cmd_train(run, s, f, out);
    else if (command == "eval") cmd_eval(run, s, f, out);
    else if (command == "perturb") cmd_perturb(run, s, f, out);
    else if (command == "ablate") cmd_ablate(run, s, f, out);
    else if (command == "heatmap") cmd_heatmap(run, s, f, out);
    run.finish(out);
    return 0;
}

int replay(const Flags& f, std::ostream& out, std::ostream& err) {
    const fs::path source = *f.manifest;
    const RunManifest m = read_manifest(source);
    const fs::path dir = resolve_out(f, m.command + "-replay");
    fs::create_directories(dir);
    const fs::path config = dir / "replay-config.json";
    write_file_atomic(config, m.config.dump(2) + "\n");

    std::vector<std::string> args{m.command, "--config", config.string(), "--out", fs::absolute(dir).string()};
    for (const auto& [role, path] : m.inputs) {
        args.push_back("--" + role);
        args.push_back(path);
    }
    std::ostringstream quiet;
    const int code = run_command(args, quiet, err);
    if (code != 0) return code;

    const RunManifest again = read_manifest(dir / "manifest.json");
    bool same = true;
    for (const auto& [name, digest] : m.digests) {
        auto it = again.digests.find(name);
        const bool match = it != again.digests.end() && it->second == digest;
        out << (match ? "identical " : "DIFFERS   ") << name << "\n";
        same = same && match;
    }
    return same ? 0 : 2;
}

}  // namespace

int run_command(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Critical-representation fine-tuning on a micro transformer", "crft"};
    app.require_subcommand(1);
    Flags f;

    auto* pretrain = app.add_subcommand("pretrain", "build the desk-scale base model");
    add_common(pretrain, f);
    pretrain->add_option("--seed", f.seed, "model initialization seed");

    auto* ident = app.add_subcommand("identify", "list critical positions for evaluation prompts");
    add_common(ident, f);
    add_inputs(ident, f);
    add_crft(ident, f);
    ident->add_option("--seed", f.seed, "position-sampling seed");

    auto* train = app.add_subcommand("train", "train interventions on the frozen base");
    add_common(train, f);
    add_inputs(train, f);
    add_crft(train, f);
    add_train(train, f);
    train->add_option("--seed", f.seed, "training seed");

    auto* eval = app.add_subcommand("eval", "greedy-decode accuracy, optionally with interventions");
    add_common(eval, f);
    add_inputs(eval, f);
    eval->add_option("--interventions", f.interventions, "trained intervention file");

    auto* perturb = app.add_subcommand("perturb", "noise retention of top- vs bottom-scored positions");
    add_common(perturb, f);
    add_inputs(perturb, f);
    add_crft(perturb, f);
    perturb->add_option("--noise-levels", f.noise_levels, "comma-separated ascending standard deviations");
    perturb->add_option("--trials", f.trials, "noise draws per example");
    perturb->add_option("--seed", f.seed, "noise seed");

    auto* ablate = app.add_subcommand("ablate", "train and evaluate one row per ablation cell");
    add_common(ablate, f);
    add_inputs(ablate, f);
    add_crft(ablate, f);
    add_train(ablate, f);
    ablate->add_option("--axis", f.axes, "threshold|k_int|criteria|layers|random_seed (repeatable)");
    ablate->add_option("--seed", f.seed, "training seed");

    auto* heat = app.add_subcommand("heatmap", "export an attention or saliency grid");
    add_common(heat, f);
    add_inputs(heat, f);
    heat->add_option("--layer", f.layer, "block index");
    heat->add_option("--kind", f.kind, "attention|saliency");
    heat->add_option("--format", f.format, "csv|pgm");
    heat->add_option("--example", f.example, "index into the evaluation set");

    auto* rep = app.add_subcommand("replay", "re-run a recorded run and compare its outputs");
    rep->add_option("--manifest", f.manifest, "manifest.json of the original run")->required();
    rep->add_option("--out", f.out, "run directory for the replay");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return 1;
    }

    const CLI::App* chosen = app.get_subcommands().front();
    const std::string command = chosen->get_name();
    try {
        if (command == "replay") return replay(f, out, err);
        return dispatch(command, f, out);
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n\n" << chosen->help();
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
}

}  // namespace crft
