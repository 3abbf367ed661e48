#pragma once

#include "memat/model.hpp"

#include <filesystem>
#include <map>

namespace memat {

// Small string metadata block stored alongside the weights (ordered so the
// byte layout is reproducible).
using CheckpointMeta = std::map<std::string, std::string>;

// Binary container: magic, format version, config fields, metadata, then
// named rank-2 float32 tensors, all little-endian. Weights are narrowed to
// float32 on disk; loading widens back, so save(load(f)) is byte-identical.
void save_model(const std::filesystem::path& path, const ModelParams& params,
                const CheckpointMeta& meta = {});

struct LoadedModel {
    ModelParams params;
    CheckpointMeta meta;
};

LoadedModel load_model(const std::filesystem::path& path);

// Generic container with the same byte conventions (metadata block plus named
// rank-2 float32 tensors) for auxiliary artifacts such as edit deltas. `kind`
// is an arbitrary tag checked on load so artifact types cannot be confused.
struct TensorFile {
    CheckpointMeta meta;
    std::vector<std::pair<std::string, Mat>> tensors;
};

void save_tensor_file(const std::filesystem::path& path, const std::string& kind,
                      const TensorFile& file);
TensorFile load_tensor_file(const std::filesystem::path& path, const std::string& kind);

}  // namespace memat
