#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedseg/errors.hpp"
#include "fedseg/learner.hpp"

namespace fedseg {

// Checkpoint layout: 8-byte magic, little-endian u64 header length, JSON
// header (layer shapes in order plus a config hash), then float32 blobs for
// each layer's weights and bias in layer order. Parameters live in double
// precision in memory and are narrowed on write, so load-then-save
// reproduces a file byte for byte.
inline constexpr char kCheckpointMagic[8] = {'F', 'S', 'E', 'G', 'C', 'K', 'P', 'T'};

struct Checkpoint {
    ModelParams params;
    std::string config_hash;
};

inline void save_checkpoint(const std::string& path, const ModelParams& params,
                            const std::string& config_hash) {
    nlohmann::json header;
    header["version"] = 1;
    header["config_hash"] = config_hash;
    nlohmann::json layers = nlohmann::json::array();
    for (const ParamLayer& layer : params.layers) {
        nlohmann::json entry;
        entry["layer_index"] = layer.layer_index;
        entry["weights_shape"] = layer.weights.shape;
        entry["bias_shape"] = layer.bias.shape;
        layers.push_back(entry);
    }
    header["layers"] = layers;
    const std::string header_bytes = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("save_checkpoint: cannot open " + path);
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    const std::uint64_t hlen = header_bytes.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(header_bytes.data(), static_cast<std::streamsize>(header_bytes.size()));
    std::vector<float> buf;
    for (const ParamLayer& layer : params.layers) {
        for (const auto* tensor : {&layer.weights, &layer.bias}) {
            buf.assign(tensor->data.begin(), tensor->data.end());
            out.write(reinterpret_cast<const char*>(buf.data()),
                      static_cast<std::streamsize>(buf.size() * sizeof(float)));
        }
    }
    if (!out) throw IoError("save_checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_checkpoint: cannot open " + path);
    char magic[sizeof(kCheckpointMagic)];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
        throw IoError("load_checkpoint: bad magic in " + path);
    std::uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    if (!in || hlen == 0 || hlen > (1u << 20)) throw IoError("load_checkpoint: bad header length");
    std::string header_bytes(hlen, '\0');
    in.read(header_bytes.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw IoError("load_checkpoint: truncated header");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_bytes);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("load_checkpoint: header parse failure: ") + e.what());
    }
    Checkpoint ckpt;
    ckpt.config_hash = header.at("config_hash").get<std::string>();
    for (const auto& entry : header.at("layers")) {
        ParamLayer layer;
        layer.layer_index = entry.at("layer_index").get<int>();
        layer.weights = Tensor(entry.at("weights_shape").get<std::vector<int>>());
        layer.bias = Tensor(entry.at("bias_shape").get<std::vector<int>>());
        for (auto* tensor : {&layer.weights, &layer.bias}) {
            std::vector<float> buf(tensor->numel());
            in.read(reinterpret_cast<char*>(buf.data()),
                    static_cast<std::streamsize>(buf.size() * sizeof(float)));
            if (!in) throw IoError("load_checkpoint: truncated tensor data");
            for (std::size_t i = 0; i < buf.size(); ++i) tensor->data[i] = static_cast<double>(buf[i]);
        }
        ckpt.params.layers.push_back(std::move(layer));
    }
    return ckpt;
}

}  // namespace fedseg
