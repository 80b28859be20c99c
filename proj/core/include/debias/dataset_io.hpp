#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "debias/data.hpp"

namespace debias {

/// Text description of a cached dataset, one `key = value` per line.
struct DatasetManifest {
    std::string source;
    Split split = Split::train;
    std::size_t count = 0;
    int classes = 0;
    BiasLayout layout = BiasLayout::none;
    std::vector<double> severity;
    std::uint64_t seed = 0;
    std::vector<std::size_t> aligned_counts; // per attribute
    Palette palette;
    std::string tensor_file; // relative to the manifest
    std::uint64_t checksum = 0; // FNV-1a 64 of the tensor file
};

class CacheError : public Error {
public:
    enum class Kind { missing, checksum_mismatch, malformed };

    CacheError(Kind kind, std::string what) : Error(std::move(what)), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

/// Writes `<stem>.bin` (binary tensors) and `<stem>.manifest` next to each other.
/// Image datasets store their grayscale pixels and bias labels; features are
/// re-rendered on load. Returns the manifest path.
std::filesystem::path write_dataset_cache(const BiasedDataset& dataset, const std::string& source,
                                          const std::filesystem::path& directory,
                                          const std::string& stem);

DatasetManifest read_manifest(const std::filesystem::path& manifest_path);

/// Loads a cached dataset after verifying the tensor checksum.
BiasedDataset read_dataset_cache(const std::filesystem::path& manifest_path);

std::uint64_t file_checksum(const std::filesystem::path& path);

std::string to_string(Split split);
std::string to_string(BiasLayout layout);

} // namespace debias
