#include <doctest.h>

#include <filesystem>
#include <sstream>

#include "crft/checkpoint.hpp"
#include "crft/cli.hpp"
#include "crft/manifest.hpp"
#include "fixtures.hpp"

using namespace crft;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    int code;
    std::string out;
    std::string err;
};

Outcome run(const std::vector<std::string>& args) {
    std::ostringstream out;
    std::ostringstream err;
    const int code = run_command(args, out, err);
    return {code, out.str(), err.str()};
}

fs::path workdir() {
    static const fs::path dir = [] {
        const fs::path d = fs::temp_directory_path() / "crft-cli-tests";
        fs::remove_all(d);
        fs::create_directories(d);
        ModelConfig c = testing::tiny_config(2, 2, 8, 16);
        c.max_seq = 32;
        save_checkpoint(d / "tiny.ckpt", testing::rough_model(c, 1));
        write_file_atomic(d / "small.json",
                          R"({"data": {"train": 6, "val": 2, "test": 4},
                              "crft": {"k_int": 3, "rank": 2},
                              "train": {"epochs": 1, "grad_accum_steps": 1, "max_steps": 2},
                              "noise": {"levels": [0.0, 0.5], "trials": 1, "top_k": 2, "bottom_k": 2}})");
        return d;
    }();
    return dir;
}

std::string p(const std::string& name) { return (workdir() / name).string(); }

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("exit codes") {
    CHECK(run({"--help"}).code == 0);
    CHECK(run({"eval", "--help"}).code == 0);
    CHECK(run({}).code == 1);
    CHECK(run({"frobnicate"}).code == 1);
    CHECK(run({"eval"}).code == 1);
    CHECK(run({"eval", "--checkpoint", p("tiny.ckpt"), "--bogus"}).code == 1);
    CHECK(run({"train", "--checkpoint", p("tiny.ckpt"), "--strategy", "nope", "--out", p("x")}).code == 1);
    CHECK(run({"train", "--checkpoint", p("tiny.ckpt"), "--layers", "1-2", "--out", p("x")}).code == 1);
    CHECK(run({"perturb", "--checkpoint", p("tiny.ckpt"), "--noise-levels", "0,a", "--out", p("x")}).code == 1);

    write_file_atomic(workdir() / "unknown.json", R"({"crft": {"kint": 3}})");
    CHECK(run({"eval", "--checkpoint", p("tiny.ckpt"), "--config", p("unknown.json"), "--out", p("x")}).code == 1);
    write_file_atomic(workdir() / "section.json", R"({"model": {}})");
    CHECK(run({"eval", "--checkpoint", p("tiny.ckpt"), "--config", p("section.json"), "--out", p("x")}).code == 1);

    const Outcome missing = run({"eval", "--checkpoint", p("absent.ckpt"), "--out", p("x")});
    CHECK(missing.code == 2);
    CHECK(missing.err.find("absent.ckpt") != std::string::npos);
}

TEST_CASE("flags override the config file, which overrides defaults") {
    const Outcome o = run({"identify", "--checkpoint", p("tiny.ckpt"), "--config", p("small.json"), "--alpha", "0.5",
                           "--out", p("prec")});
    REQUIRE(o.code == 0);
    const RunManifest m = read_manifest(workdir() / "prec" / "manifest.json");
    const Json& c = m.config.at("crft");
    CHECK(c.at("alpha").get<double>() == 0.5);
    CHECK(c.at("k_int").get<int>() == 3);
    CHECK(c.at("beta").get<double>() == CrftConfig{}.beta);
    CHECK(c.at("layer_last").get<int>() == 1);
    CHECK(m.config.at("data").at("test").get<int>() == 4);
    CHECK_FALSE(m.config.contains("train"));
    CHECK(m.outputs.at("sites") == "sites.jsonl");
    CHECK(file_sha256(workdir() / "prec" / "sites.jsonl") == m.digests.at("sites.jsonl"));
}

TEST_CASE("train, eval and replay") {
    REQUIRE(run({"train", "--checkpoint", p("tiny.ckpt"), "--config", p("small.json"), "--out", p("tr")}).code == 0);
    const RunManifest tm = read_manifest(workdir() / "tr" / "manifest.json");
    CHECK(tm.config.at("train").at("max_steps").get<int>() == 2);
    REQUIRE(fs::exists(workdir() / "tr" / "interventions.ckpt"));

    REQUIRE(run({"eval", "--checkpoint", p("tiny.ckpt"), "--interventions", p("tr/interventions.ckpt"), "--config",
                 p("small.json"), "--out", p("ev")})
                .code == 0);
    const Outcome r = run({"replay", "--manifest", p("ev/manifest.json"), "--out", p("ev-again")});
    CHECK(r.code == 0);
    CHECK(r.out.find("identical metrics.json") != std::string::npos);
    CHECK(r.out.find("DIFFERS") == std::string::npos);

    const Outcome tr = run({"replay", "--manifest", p("tr/manifest.json"), "--out", p("tr-again")});
    CHECK(tr.code == 0);
    CHECK(tr.out.find("identical interventions.ckpt") != std::string::npos);
}

TEST_CASE("ablate writes one row per cell") {
    const Outcome o = run({"ablate", "--checkpoint", p("tiny.ckpt"), "--config", p("small.json"), "--axis",
                           "threshold", "--out", p("ab")});
    REQUIRE(o.code == 0);
    const std::string csv = read_file(workdir() / "ab" / "ablation.csv");
    std::istringstream lines(csv);
    std::string line;
    std::getline(lines, line);
    CHECK(line == "axis,value,accuracy,trained");
    int rows = 0;
    while (std::getline(lines, line)) {
        CHECK(line.rfind("threshold,", 0) == 0);
        ++rows;
    }
    CHECK(rows == 4);
}

TEST_CASE("perturb and heatmap outputs") {
    // The random tiny model answers nothing correctly, so there is nothing to perturb.
    const Outcome none = run({"perturb", "--checkpoint", p("tiny.ckpt"), "--config", p("small.json"), "--out", p("pt0")});
    CHECK(none.code == 2);
    CHECK(none.err.find("correctly answered") != std::string::npos);

    write_file_atomic(workdir() / "desk.json", R"({"data": {"test": 20}, "noise": {"levels": [0.0, 0.5], "trials": 1}})");
    REQUIRE(run({"perturb", "--checkpoint", CRFT_GOLDEN_DIR "/desk_base.ckpt", "--config", p("desk.json"), "--out",
                 p("pt")})
                .code == 0);
    CHECK(read_file(workdir() / "pt" / "retention.csv").rfind("level,top,bottom\n", 0) == 0);

    REQUIRE(run({"heatmap", "--checkpoint", p("tiny.ckpt"), "--config", p("small.json"), "--format", "csv",
                 "--layer", "1", "--out", p("hm")})
                .code == 0);
    CHECK(fs::exists(workdir() / "hm" / "grid.csv"));
    CHECK(run({"heatmap", "--checkpoint", p("tiny.ckpt"), "--config", p("small.json"), "--kind", "x", "--out",
               p("hm2")})
              .code == 1);
}

}  // TEST_SUITE
