#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>

#include "ppt/tensor.hpp"

namespace ppt {

// Checkpoint = JSON manifest + raw blob of little-endian 64-bit floats.
// The manifest lists {name, shape, byte offset} in store order; `meta`
// carries run provenance (config hash, seed, model configuration).
// Round-trips are bit-exact.

inline std::filesystem::path blob_path_for(const std::filesystem::path& manifest_path) {
    std::filesystem::path p = manifest_path;
    p.replace_extension(".blob");
    return p;
}

inline void save_checkpoint(const std::filesystem::path& manifest_path, const ParamStore& params,
                            const nlohmann::json& meta) {
    const std::filesystem::path blob_path = blob_path_for(manifest_path);
    nlohmann::json tensors = nlohmann::json::array();
    uint64_t offset = 0;

    std::ofstream blob(blob_path, std::ios::binary | std::ios::trunc);
    check(blob.good(), "cannot open blob for writing: " + blob_path.string());
    for (const auto& [name, t] : params) {
        tensors.push_back({{"name", name}, {"shape", t.shape}, {"offset", offset}});
        const auto bytes = static_cast<std::streamsize>(t.data.size() * sizeof(double));
        blob.write(reinterpret_cast<const char*>(t.data.data()), bytes);
        offset += static_cast<uint64_t>(bytes);
    }
    blob.close();
    check(blob.good(), "blob write failed: " + blob_path.string());

    nlohmann::json manifest = {{"dtype", "f64le"},
                               {"blob", blob_path.filename().string()},
                               {"meta", meta},
                               {"tensors", std::move(tensors)}};
    std::ofstream mf(manifest_path, std::ios::trunc);
    check(mf.good(), "cannot open manifest for writing: " + manifest_path.string());
    mf << manifest.dump(2) << "\n";
    mf.close();
    check(mf.good(), "manifest write failed: " + manifest_path.string());
}

inline ParamStore load_checkpoint(const std::filesystem::path& manifest_path,
                                  nlohmann::json* meta_out = nullptr) {
    std::ifstream mf(manifest_path);
    check(mf.good(), "cannot open manifest: " + manifest_path.string());
    nlohmann::json manifest = nlohmann::json::parse(mf);
    check(manifest.at("dtype") == "f64le", "unsupported checkpoint dtype");
    if (meta_out) *meta_out = manifest.value("meta", nlohmann::json::object());

    const std::filesystem::path blob_path =
        manifest_path.parent_path() / manifest.at("blob").get<std::string>();
    std::ifstream blob(blob_path, std::ios::binary);
    check(blob.good(), "cannot open blob: " + blob_path.string());
    std::vector<char> raw((std::istreambuf_iterator<char>(blob)), std::istreambuf_iterator<char>());

    ParamStore params;
    for (const auto& entry : manifest.at("tensors")) {
        Tensor t(entry.at("shape").get<std::vector<int64_t>>());
        const auto offset = entry.at("offset").get<uint64_t>();
        const size_t bytes = t.data.size() * sizeof(double);
        check(offset + bytes <= raw.size(), "checkpoint blob too short for tensor \"" +
                                                entry.at("name").get<std::string>() + "\"");
        std::memcpy(t.data.data(), raw.data() + offset, bytes);
        params.add(entry.at("name").get<std::string>(), std::move(t));
    }
    params.check_finite("loaded checkpoint");
    return params;
}

}  // namespace ppt
