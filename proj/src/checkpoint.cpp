#include "crft/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <cstdio>

#include "crft/json_io.hpp"

namespace crft {
namespace {

constexpr std::string_view kMagic = "CRFT-CKPT\n";

struct Entry {
    std::string name;
    const Tensor* tensor;
};

void append_le(std::string& out, double v) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

double read_le(const char* p) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    return std::bit_cast<double>(bits);
}

std::string encode(Json header, const std::vector<Entry>& entries) {
    Json dir = Json::array();
    std::size_t offset = 0;
    for (const auto& e : entries) {
        dir.push_back(Json{{"name", e.name}, {"shape", e.tensor->shape()}, {"offset", offset}});
        offset += e.tensor->size() * sizeof(double);
    }
    header["tensors"] = std::move(dir);
    header["payload_bytes"] = offset;
    const std::string text = header.dump(1);
    std::string out(kMagic);
    out += std::to_string(text.size());
    out += '\n';
    out += text;
    out.reserve(out.size() + offset);
    for (const auto& e : entries) {
        for (double v : e.tensor->values()) append_le(out, v);
    }
    return out;
}

struct Decoded {
    Json header;
    std::vector<std::pair<std::string, Tensor>> tensors;
};

[[noreturn]] void corrupt(const std::string& what) {
    throw CheckpointError(CheckpointError::Kind::corrupt, "corrupt checkpoint: " + what);
}

Decoded decode(const std::string& bytes, std::string_view kind) {
    if (bytes.compare(0, kMagic.size(), kMagic) != 0) corrupt("bad magic");
    const std::size_t nl = bytes.find('\n', kMagic.size());
    if (nl == std::string::npos || nl == kMagic.size() || nl - kMagic.size() > 12) corrupt("missing header length");
    std::size_t header_len = 0;
    for (std::size_t i = kMagic.size(); i < nl; ++i) {
        if (bytes[i] < '0' || bytes[i] > '9') corrupt("bad header length");
        header_len = header_len * 10 + static_cast<std::size_t>(bytes[i] - '0');
    }
    const std::size_t body = nl + 1;
    if (bytes.size() - body < header_len) corrupt("truncated header");

    Decoded out;
    try {
        out.header = Json::parse(bytes.substr(body, header_len));
    } catch (const nlohmann::json::exception& e) {
        corrupt(std::string("header is not valid JSON: ") + e.what());
    }
    try {
        const int version = out.header.at("version").get<int>();
        if (version != kCheckpointVersion) {
            throw CheckpointError(CheckpointError::Kind::version,
                                  "unsupported checkpoint version " + std::to_string(version) + " (expected " +
                                      std::to_string(kCheckpointVersion) + ")");
        }
        if (out.header.at("kind").get<std::string>() != kind) {
            throw CheckpointError(CheckpointError::Kind::shape,
                                  "checkpoint holds '" + out.header.at("kind").get<std::string>() +
                                      "', expected '" + std::string(kind) + "'");
        }
        const std::size_t payload = out.header.at("payload_bytes").get<std::size_t>();
        const std::size_t start = body + header_len;
        if (bytes.size() - start != payload) {
            corrupt("payload is " + std::to_string(bytes.size() - start) + " bytes, header declares " +
                    std::to_string(payload));
        }
        std::size_t expected = 0;
        for (const auto& t : out.header.at("tensors")) {
            Shape shape = t.at("shape").get<Shape>();
            const std::size_t offset = t.at("offset").get<std::size_t>();
            const std::size_t n = shape_numel(shape);
            if (offset != expected || offset + n * sizeof(double) > payload) corrupt("tensor directory out of range");
            std::vector<double> data(n);
            for (std::size_t i = 0; i < n; ++i) data[i] = read_le(bytes.data() + start + offset + i * sizeof(double));
            out.tensors.emplace_back(t.at("name").get<std::string>(), Tensor(std::move(shape), std::move(data)));
            expected = offset + n * sizeof(double);
        }
        if (expected != payload) corrupt("tensor directory does not cover the payload");
    } catch (const nlohmann::json::exception& e) {
        corrupt(std::string("malformed header: ") + e.what());
    }
    return out;
}

}  // namespace

std::string encode_checkpoint(const Model& model) {
    Json header{{"version", kCheckpointVersion},
                {"kind", "model"},
                {"config", to_json(model.config())},
                {"step", model.train_step},
                {"seed", model.seed}};
    std::vector<Entry> entries;
    for (const auto& w : model.weights()) entries.push_back({w.name, &w.value});
    return encode(std::move(header), entries);
}

Model decode_checkpoint(const std::string& bytes) {
    Decoded d = decode(bytes, "model");
    ModelConfig config;
    std::uint64_t step = 0;
    std::uint64_t seed = 0;
    try {
        config = from_json<ModelConfig>(d.header.at("config"));
        step = d.header.at("step").get<std::uint64_t>();
        seed = d.header.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        corrupt(std::string("malformed header: ") + e.what());
    } catch (const std::invalid_argument& e) {
        corrupt(e.what());
    }
    std::vector<NamedTensor> weights;
    for (auto& [name, t] : d.tensors) weights.push_back({name, std::move(t)});
    Model m = [&] {
        try {
            return Model(config, std::move(weights));
        } catch (const std::invalid_argument& e) {
            throw CheckpointError(CheckpointError::Kind::shape, e.what());
        }
    }();
    m.train_step = step;
    m.seed = seed;
    return m;
}

std::string encode_interventions(const InterventionParams& params, const CrftConfig& config) {
    Json header{{"version", kCheckpointVersion},
                {"kind", "interventions"},
                {"config", to_json(config)},
                {"d_model", params.d()},
                {"rank", params.rank()},
                {"train_R", params.train_R()}};
    std::vector<Entry> entries;
    for (const auto& [key, block] : params.blocks()) {
        const std::string base = "layer" + std::to_string(key.layer) + ".group" + std::to_string(key.group) + ".";
        entries.push_back({base + "R", &block.R});
        entries.push_back({base + "W", &block.W});
        entries.push_back({base + "b", &block.b});
    }
    return encode(std::move(header), entries);
}

InterventionFile decode_interventions(const std::string& bytes) {
    Decoded d = decode(bytes, "interventions");
    InterventionFile out;
    try {
        out.config = from_json<CrftConfig>(d.header.at("config"));
        out.params = InterventionParams(d.header.at("d_model").get<std::size_t>(),
                                        d.header.at("rank").get<std::size_t>(), d.header.at("train_R").get<bool>());
    } catch (const nlohmann::json::exception& e) {
        corrupt(std::string("malformed header: ") + e.what());
    } catch (const std::invalid_argument& e) {
        corrupt(e.what());
    }
    if (d.tensors.size() % 3 != 0) corrupt("intervention tensors must come in R, W, b triples");
    for (std::size_t i = 0; i < d.tensors.size(); i += 3) {
        int layer = -1;
        int group = -1;
        char tail = 0;
        const std::string& name = d.tensors[i].first;
        if (std::sscanf(name.c_str(), "layer%d.group%d.%c", &layer, &group, &tail) != 3 || tail != 'R' ||
            layer < 0 || group < 0) {
            corrupt("unexpected tensor name '" + name + "'");
        }
        const std::string base = name.substr(0, name.size() - 1);
        if (d.tensors[i + 1].first != base + "W" || d.tensors[i + 2].first != base + "b") {
            corrupt("incomplete intervention block '" + base + "'");
        }
        try {
            out.params.insert(layer, group,
                              {std::move(d.tensors[i].second), std::move(d.tensors[i + 1].second),
                               std::move(d.tensors[i + 2].second)});
        } catch (const std::invalid_argument& e) {
            throw CheckpointError(CheckpointError::Kind::shape, e.what());
        }
    }
    return out;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw CheckpointError(CheckpointError::Kind::io, "cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw CheckpointError(CheckpointError::Kind::io, "write failed for " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw CheckpointError(CheckpointError::Kind::io, "cannot rename onto " + path.string() + ": " + ec.message());
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError(CheckpointError::Kind::io, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void save_checkpoint(const std::filesystem::path& path, const Model& model) {
    write_file_atomic(path, encode_checkpoint(model));
}

Model load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

void save_interventions(const std::filesystem::path& path, const InterventionParams& params,
                        const CrftConfig& config) {
    write_file_atomic(path, encode_interventions(params, config));
}

InterventionFile load_interventions(const std::filesystem::path& path) {
    return decode_interventions(read_file(path));
}

}  // namespace crft
