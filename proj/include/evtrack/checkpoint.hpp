#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "evtrack/tensor.hpp"

namespace evtrack {

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

/// Flat parameter archive.
///
/// Layout (all integers little-endian):
///   "EVCKPT01"                     8-byte magic
///   u64 manifest_bytes, manifest   JSON: model config, seed, step count
///   u64 tensor_count
///   per tensor: u32 name_bytes, name, u32 rank, u64 extents[rank],
///               f64 values[prod(extents)]
struct Checkpoint {
    nlohmann::json manifest;
    std::vector<NamedTensor> tensors;

    const Tensor* find(std::string_view name) const;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(std::string_view bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace evtrack
