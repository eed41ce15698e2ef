#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "qdpd/tensor.hpp"

namespace qdpd {

// Checkpoint container: `<stem>.json` manifest plus `<stem>.bin` blob.
//
// Manifest:
//   {
//     "format": "qdpd-checkpoint", "version": 1, "byte_order": "little",
//     "blob": "<stem>.bin",
//     "entries": [ {"name": ..., "shape": [...], "dtype": "f32",
//                   "offset_bytes": ...}, ... ],
//     "extra": { ... }
//   }
//
// Blob: the entries' float32 values, row-major, little-endian, concatenated
// in entry order with no padding. offset_bytes locates each entry.
void save_checkpoint(const std::string& json_path,
                     const std::vector<std::pair<std::string, const Tensor*>>& entries,
                     const nlohmann::json& extra = nlohmann::json::object());

struct Checkpoint {
    std::map<std::string, Tensor> tensors;
    nlohmann::json extra;

    const Tensor& at(const std::string& name) const;
};

Checkpoint load_checkpoint(const std::string& json_path);

// Atomic-ish JSON write (temp file + rename) with a stable key order.
void write_json(const std::string& path, const nlohmann::json& j);
nlohmann::json read_json(const std::string& path);

}  // namespace qdpd
