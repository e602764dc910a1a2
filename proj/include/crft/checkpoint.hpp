#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include "crft/config.hpp"
#include "crft/intervention.hpp"
#include "crft/model.hpp"

namespace crft {

// Container layout:
//   "CRFT-CKPT\n"
//   decimal header length "\n"
//   JSON header: version, kind, config, step, seed, tensors [{name, shape, offset}]
//   raw little-endian float64 payload, tensors back to back
inline constexpr int kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    enum class Kind { io, corrupt, version, shape };
    CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

std::string encode_checkpoint(const Model& model);
Model decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const Model& model);
Model load_checkpoint(const std::filesystem::path& path);

struct InterventionFile {
    InterventionParams params;
    CrftConfig config;
};

/// Tensors are named "layer{l}.group{g}.{R,W,b}".
std::string encode_interventions(const InterventionParams& params, const CrftConfig& config);
InterventionFile decode_interventions(const std::string& bytes);

void save_interventions(const std::filesystem::path& path, const InterventionParams& params,
                        const CrftConfig& config);
InterventionFile load_interventions(const std::filesystem::path& path);

/// Writes to a sibling temporary file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace crft
