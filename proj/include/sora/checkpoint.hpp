#pragma once

#include "sora/tensor.hpp"

#include <json.hpp>

#include <map>
#include <string>
#include <utility>
#include <vector>

namespace sora {

// Weight directory: manifest.json plus one binary tensor file per weight.
// The manifest records name, shape, and file for every tensor, the config
// hash of the producing run, and an optional free-form meta object. Files
// are numbered in list order, so the manifest is the single naming
// authority.
void save_checkpoint(const std::string& dir,
                     const std::vector<std::pair<std::string, const Tensor*>>& tensors,
                     const std::string& config_hash,
                     const nlohmann::json& meta = nlohmann::json::object());

struct Checkpoint {
    std::map<std::string, Tensor> tensors;
    std::string config_hash;
    nlohmann::json meta;
};

Checkpoint load_checkpoint(const std::string& dir);

// Copies the named tensor into dst, requiring an exact shape match.
void checkpoint_fill(const Checkpoint& ckpt, const std::string& name, Tensor& dst);

}  // namespace sora
