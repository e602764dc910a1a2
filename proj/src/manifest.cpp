#include "crft/manifest.hpp"

#include <memory>
#include <stdexcept>

#include <openssl/evp.h>

#include "crft/checkpoint.hpp"

namespace crft {

Json to_json(const RunManifest& m) {
    Json j;
    j["schema"] = 1;
    j["command"] = m.command;
    j["seed"] = m.seed;
    j["config"] = m.config;
    j["inputs"] = m.inputs;
    j["outputs"] = m.outputs;
    j["digests"] = m.digests;
    j["wall_seconds"] = m.wall_seconds;
    return j;
}

RunManifest manifest_from_json(const Json& j) {
    RunManifest m;
    try {
        if (j.at("schema").get<int>() != 1) throw std::runtime_error("unsupported manifest schema");
        m.command = j.at("command").get<std::string>();
        m.seed = j.at("seed").get<std::uint64_t>();
        m.config = j.at("config");
        m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
        m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
        m.digests = j.at("digests").get<std::map<std::string, std::string>>();
        m.wall_seconds = j.at("wall_seconds").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string("malformed manifest: ") + e.what());
    }
    return m;
}

void write_manifest(const std::filesystem::path& path, const RunManifest& m) {
    write_file_atomic(path, to_json(m).dump(2) + "\n");
}

RunManifest read_manifest(const std::filesystem::path& path) {
    const std::string text = read_file(path);
    try {
        return manifest_from_json(Json::parse(text));
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error(std::string("manifest is not valid JSON: ") + e.what());
    }
}

std::string sha256_hex(const std::string& bytes) {
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr);
    EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size());
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx.get(), md, &len);
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[md[i] >> 4];
        out += hex[md[i] & 0xf];
    }
    return out;
}

std::string file_sha256(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

}  // namespace crft
