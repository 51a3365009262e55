#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "mmasd/binary_io.hpp"
#include "mmasd/nn.hpp"
#include "mmasd/tensor.hpp"

namespace mmasd::io {

/// "MMT1", u32 rank, u32 extents, f64 payload (row-major, little-endian).
void write_tensor(const std::filesystem::path& path, const ad::Tensor& tensor);
ad::Tensor read_tensor(const std::filesystem::path& path);

struct NamedBuffer {
    std::string name;
    std::vector<double>* values;
};

/// Writes one tensor file per parameter plus manifest.json
/// ({"parameters": {name: file}, "buffers": {...}, "meta": meta}).
void save_checkpoint(const std::filesystem::path& dir, const nn::ParameterStore& store,
                     const std::vector<NamedBuffer>& buffers, const nlohmann::json& meta);

/// Loads values into an already-constructed store; every parameter must be
/// present with a matching shape. Returns the manifest's "meta" object.
nlohmann::json load_checkpoint(const std::filesystem::path& dir, nn::ParameterStore& store,
                               const std::vector<NamedBuffer>& buffers);

nlohmann::json read_manifest(const std::filesystem::path& dir);

}  // namespace mmasd::io
