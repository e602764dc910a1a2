#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "crft/json_io.hpp"

namespace crft {

/// Record written at the end of every CLI run; `config` is the fully
/// resolved configuration, enough to replay the run.
struct RunManifest {
    std::string command;
    Json config = Json::object();
    std::uint64_t seed = 0;
    std::map<std::string, std::string> inputs;   // role -> path
    std::map<std::string, std::string> outputs;  // role -> file name inside the run directory
    std::map<std::string, std::string> digests;  // output file name -> sha256
    double wall_seconds = 0.0;
};

Json to_json(const RunManifest& m);
RunManifest manifest_from_json(const Json& j);

void write_manifest(const std::filesystem::path& path, const RunManifest& m);
RunManifest read_manifest(const std::filesystem::path& path);

std::string sha256_hex(const std::string& bytes);
std::string file_sha256(const std::filesystem::path& path);

}  // namespace crft
