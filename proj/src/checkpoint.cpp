#include "sora/checkpoint.hpp"

#include "sora/errors.hpp"
#include "sora/tensor_io.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

namespace sora {

void save_checkpoint(const std::string& dir,
                     const std::vector<std::pair<std::string, const Tensor*>>& tensors,
                     const std::string& config_hash, const nlohmann::json& meta) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["version"] = 1;
    manifest["config_hash"] = config_hash;
    manifest["meta"] = meta;
    nlohmann::json list = nlohmann::json::array();
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        char file[16];
        std::snprintf(file, sizeof(file), "w%04zu.ten", i);
        const auto& [name, tensor] = tensors[i];
        write_tensor((std::filesystem::path(dir) / file).string(), *tensor);
        list.push_back({{"name", name}, {"shape", tensor->shape()}, {"file", file}});
    }
    manifest["tensors"] = std::move(list);
    write_file_atomic((std::filesystem::path(dir) / "manifest.json").string(),
                      manifest.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::string& dir) {
    const std::string manifest_path =
        (std::filesystem::path(dir) / "manifest.json").string();
    std::ifstream in(manifest_path);
    if (!in) throw IoError("checkpoint: cannot open " + manifest_path);
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("checkpoint: bad manifest " + manifest_path + ": " + e.what());
    }
    Checkpoint ckpt;
    try {
        ckpt.config_hash = manifest.at("config_hash").get<std::string>();
        ckpt.meta = manifest.value("meta", nlohmann::json::object());
        for (const auto& entry : manifest.at("tensors")) {
            const std::string name = entry.at("name").get<std::string>();
            const std::string file = entry.at("file").get<std::string>();
            const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
            Tensor t = read_tensor((std::filesystem::path(dir) / file).string());
            if (t.shape() != shape) {
                throw IoError("checkpoint: tensor " + name + " has shape " +
                              t.shape_str() + " but the manifest promises another");
            }
            ckpt.tensors.emplace(name, std::move(t));
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError("checkpoint: malformed manifest " + manifest_path + ": " +
                      e.what());
    }
    return ckpt;
}

void checkpoint_fill(const Checkpoint& ckpt, const std::string& name, Tensor& dst) {
    const auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end()) {
        throw IoError("checkpoint: missing tensor " + name);
    }
    if (!it->second.same_shape(dst)) {
        throw IoError("checkpoint: tensor " + name + " has shape " +
                      it->second.shape_str() + ", expected " + dst.shape_str());
    }
    dst = it->second;
}

}  // namespace sora
