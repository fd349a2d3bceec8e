#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "noforge/error.hpp"
#include "noforge/layers.hpp"

namespace noforge {

// Checkpoint container: 8-byte magic "NOFORGE1", a little-endian u64 header
// length, a UTF-8 JSON header (dtype, model kind, config + config hash, and
// the parameter table with byte offsets), then the raw little-endian tensor
// payloads in header order. Complex weights appear as their two real planes.

inline constexpr char kCheckpointMagic[8] = {'N', 'O', 'F', 'O', 'R', 'G', 'E', '1'};

inline std::string fnv1a_hex(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (const unsigned char c : s) h = (h ^ c) * 1099511628211ULL;
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

template <typename T>
const char* dtype_name() {
    if constexpr (sizeof(T) == 4) return "f32";
    else return "f64";
}

template <typename T>
void save_checkpoint(const std::string& path, const ParamStore<T>& store,
                     const std::string& model_kind, const nlohmann::json& config) {
    nlohmann::json header;
    header["version"] = 1;
    header["dtype"] = dtype_name<T>();
    header["model_kind"] = model_kind;
    header["config"] = config;
    header["config_hash"] = fnv1a_hex(config.dump());
    nlohmann::json params = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& p : store.items()) {
        nlohmann::json e;
        e["name"] = p->name;
        e["shape"] = p->value.shape;
        e["offset"] = offset;
        params.push_back(std::move(e));
        offset += static_cast<std::uint64_t>(p->value.size()) * sizeof(T);
    }
    header["params"] = std::move(params);
    const std::string header_str = header.dump();

    // Write to a temp file and rename so a crash never leaves a torn
    // checkpoint behind.
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IOFailure("cannot open " + tmp + " for writing");
        f.write(kCheckpointMagic, 8);
        const std::uint64_t len = header_str.size();
        f.write(reinterpret_cast<const char*>(&len), 8);
        f.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
        for (const auto& p : store.items())
            f.write(reinterpret_cast<const char*>(p->value.data.data()),
                    static_cast<std::streamsize>(p->value.data.size() * sizeof(T)));
        if (!f) throw IOFailure("short write to " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IOFailure("cannot move checkpoint into place at " + path);
}

struct CheckpointHeader {
    nlohmann::json header;
    std::uint64_t payload_start = 0;
};

inline CheckpointHeader read_checkpoint_header(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CorruptCheckpoint("cannot open checkpoint " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw CorruptCheckpoint("bad magic in " + path);
    std::uint64_t len = 0;
    f.read(reinterpret_cast<char*>(&len), 8);
    if (!f || len == 0 || len > (1ULL << 30)) throw CorruptCheckpoint("bad header length in " + path);
    std::string header_str(len, '\0');
    f.read(header_str.data(), static_cast<std::streamsize>(len));
    if (!f) throw CorruptCheckpoint("truncated header in " + path);
    CheckpointHeader out;
    try {
        out.header = nlohmann::json::parse(header_str);
    } catch (const nlohmann::json::exception& e) {
        throw CorruptCheckpoint("header parse error in " + path + ": " + e.what());
    }
    out.payload_start = 16 + len;
    return out;
}

// Load payloads into an already-constructed store; the parameter table must
// match names and shapes exactly.
template <typename T>
void load_checkpoint_params(const std::string& path, const CheckpointHeader& hdr,
                            ParamStore<T>& store) {
    try {
        if (hdr.header.at("dtype").get<std::string>() != dtype_name<T>())
            throw IncompatibleCheckpoint("checkpoint dtype " +
                                         hdr.header.at("dtype").get<std::string>() +
                                         " does not match this build");
        const auto& params = hdr.header.at("params");
        if (params.size() != store.items().size())
            throw IncompatibleCheckpoint("checkpoint parameter count mismatch");
        std::ifstream f(path, std::ios::binary);
        if (!f) throw CorruptCheckpoint("cannot open checkpoint " + path);
        std::size_t i = 0;
        for (const auto& p : store.items()) {
            const auto& e = params.at(i++);
            if (e.at("name").get<std::string>() != p->name)
                throw IncompatibleCheckpoint("checkpoint parameter order/name mismatch at " + p->name);
            const Shape shape = e.at("shape").get<Shape>();
            if (shape != p->value.shape)
                throw IncompatibleCheckpoint("checkpoint shape mismatch for " + p->name);
            f.seekg(static_cast<std::streamoff>(hdr.payload_start + e.at("offset").get<std::uint64_t>()));
            f.read(reinterpret_cast<char*>(p->value.data.data()),
                   static_cast<std::streamsize>(p->value.data.size() * sizeof(T)));
            if (!f) throw CorruptCheckpoint("truncated payload in " + path + " at " + p->name);
        }
    } catch (const nlohmann::json::exception& e) {
        throw CorruptCheckpoint("header schema error in " + path + ": " + e.what());
    }
}

} // namespace noforge
