#pragma once

#include <bit>
#include <fstream>

#include <json.hpp>

#include "nncomp/model.hpp"

namespace nncomp {

// Container layout: "NNC1" | version u32 | header length u64 | UTF-8 JSON
// header (config + tensor directory) | little-endian payload.

constexpr uint32_t CHECKPOINT_VERSION = 1;

namespace detail {

inline nlohmann::json config_to_json(const ModelConfig& c) {
    return {{"n_layers", c.n_layers},
            {"pattern", c.pattern.str()},
            {"d_model", c.d_model},
            {"d_ffn", c.d_ffn},
            {"n_q_heads", c.n_q_heads},
            {"n_kv_heads", c.n_kv_heads},
            {"attn_head_dim", c.attn_head_dim},
            {"mamba_state_dim", c.mamba_state_dim},
            {"mamba_head_dim", c.mamba_head_dim},
            {"mamba_groups", c.mamba_groups},
            {"mamba_expand", c.mamba_expand},
            {"mamba_heads", c.mamba_heads},
            {"conv_window", c.conv_window},
            {"vocab_size", c.vocab_size},
            {"tied_embeddings", c.tied_embeddings},
            {"rms_denom", c.rms_denom},
            {"mamba_rms_denom", c.mamba_rms_denom}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<int64_t>();
    c.pattern = LayerPattern::from_str(j.at("pattern").get<std::string>());
    c.d_model = j.at("d_model").get<int64_t>();
    c.d_ffn = j.at("d_ffn").get<int64_t>();
    c.n_q_heads = j.at("n_q_heads").get<int64_t>();
    c.n_kv_heads = j.at("n_kv_heads").get<int64_t>();
    c.attn_head_dim = j.at("attn_head_dim").get<int64_t>();
    c.mamba_state_dim = j.at("mamba_state_dim").get<int64_t>();
    c.mamba_head_dim = j.at("mamba_head_dim").get<int64_t>();
    c.mamba_groups = j.at("mamba_groups").get<int64_t>();
    c.mamba_expand = j.at("mamba_expand").get<int64_t>();
    c.mamba_heads = j.at("mamba_heads").get<int64_t>();
    c.conv_window = j.at("conv_window").get<int64_t>();
    c.vocab_size = j.at("vocab_size").get<int64_t>();
    c.tied_embeddings = j.at("tied_embeddings").get<bool>();
    c.rms_denom = j.value("rms_denom", int64_t(0));
    c.mamba_rms_denom = j.value("mamba_rms_denom", int64_t(0));
    return c;
}

template <typename T>
const char* dtype_name();
template <>
inline const char* dtype_name<float>() {
    return "f32";
}
template <>
inline const char* dtype_name<double>() {
    return "f64";
}

// payload bytes are written little-endian; on big-endian hosts we would
// need byte swaps here
static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes a little-endian host");

}  // namespace detail

template <typename T>
void save_checkpoint(const Checkpoint<T>& ck, const std::string& path) {
    nlohmann::json dir = nlohmann::json::array();
    uint64_t offset = 0;
    for (const auto& [name, t] : ck.tensors) {
        dir.push_back({{"name", name}, {"dtype", detail::dtype_name<T>()}, {"shape", t.shape}, {"offset", offset}});
        offset += static_cast<uint64_t>(t.size()) * sizeof(T);
    }
    nlohmann::json header = {{"config", detail::config_to_json(ck.config)}, {"tensors", dir}};
    std::string hs = header.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
    f.write("NNC1", 4);
    uint32_t version = CHECKPOINT_VERSION;
    f.write(reinterpret_cast<const char*>(&version), 4);
    uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&hlen), 8);
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& [name, t] : ck.tensors)
        f.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.size() * sizeof(T)));
    if (!f) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::string(magic, 4) != "NNC1") throw std::runtime_error("load_checkpoint: bad magic");
    uint32_t version = 0;
    f.read(reinterpret_cast<char*>(&version), 4);
    if (version != CHECKPOINT_VERSION)
        throw std::runtime_error("load_checkpoint: unsupported version " + std::to_string(version));
    uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), 8);
    std::string hs(hlen, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!f) throw std::runtime_error("load_checkpoint: truncated header");
    nlohmann::json header = nlohmann::json::parse(hs, nullptr, false);
    if (header.is_discarded()) throw std::runtime_error("load_checkpoint: malformed header JSON");

    Checkpoint<T> ck;
    ck.config = detail::config_from_json(header.at("config"));
    uint64_t expected_offset = 0;
    for (const auto& entry : header.at("tensors")) {
        auto name = entry.at("name").get<std::string>();
        auto dtype = entry.at("dtype").get<std::string>();
        if (dtype != detail::dtype_name<T>())
            throw std::runtime_error("load_checkpoint: tensor " + name + " has dtype " + dtype + ", expected " +
                                     detail::dtype_name<T>());
        auto shape = entry.at("shape").get<Shape>();
        auto offset = entry.at("offset").get<uint64_t>();
        if (offset != expected_offset) throw std::runtime_error("load_checkpoint: tensor offsets out of order");
        Tensor<T> t(shape);
        f.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(t.size() * sizeof(T)));
        if (!f) throw std::runtime_error("load_checkpoint: truncated payload at tensor " + name);
        expected_offset += static_cast<uint64_t>(t.size()) * sizeof(T);
        ck.tensors.emplace(name, std::move(t));
    }
    // no trailing garbage
    f.peek();
    if (!f.eof()) throw std::runtime_error("load_checkpoint: payload longer than the directory declares");
    return ck;
}

}  // namespace nncomp
