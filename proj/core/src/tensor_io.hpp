#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace clicktok {

// Checkpoint container: a directory holding manifest.json plus one raw
// little-endian float32 blob per named tensor (row-major).

struct tensor_blob {
    std::string name;
    std::vector<int64_t> shape;
    std::vector<float> data;

    int64_t count() const {
        int64_t n = 1;
        for (int64_t s : shape) n *= s;
        return n;
    }
};

void write_checkpoint(const std::string & dir, const std::string & kind,
                      const nlohmann::json & extra, const std::vector<tensor_blob> & tensors);

// Loads manifest + all tensors; checks the stored kind.
nlohmann::json read_checkpoint(const std::string & dir, const std::string & kind,
                               std::vector<tensor_blob> & tensors);

// FNV-1a over tensor names, shapes and bytes in manifest order.
uint64_t checkpoint_hash(const std::vector<tensor_blob> & tensors);

} // namespace clicktok
