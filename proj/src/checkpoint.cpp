#include "ssmtad/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

#include <json.hpp>

namespace ssmtad {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian and target LE hosts");

using nlohmann::json;
namespace fs = std::filesystem;

uint32_t crc32(const void* data, size_t n) {
    static const auto table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    uint32_t c = 0xFFFFFFFFu;
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) c = table[(c ^ p[i]) & 0xFFu] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

namespace {

DType dtype_from(const std::string& s) {
    if (s == "f64") return DType::f64;
    if (s == "f32") return DType::f32;
    throw IoError("checkpoint: unknown dtype '" + s + "'");
}

size_t dtype_bytes(DType dt) { return dt == DType::f64 ? 8 : 4; }

}  // namespace

void checkpoint_save(const std::string& dir, const Checkpoint& c) {
    fs::create_directories(dir);
    std::string blob;
    json tensors = json::array();
    for (const auto& [name, t] : c.tensors) {
        if (!t.defined()) throw ValueError("checkpoint: undefined tensor '" + name + "'");
        size_t offset = blob.size();
        size_t bytes = size_t(t.numel()) * dtype_bytes(t.dtype());
        if (t.dtype() == DType::f64) {
            const auto& d = t.data_f64();
            blob.append(reinterpret_cast<const char*>(d.data()), bytes);
        } else {
            const auto& d = t.data_f32();
            blob.append(reinterpret_cast<const char*>(d.data()), bytes);
        }
        tensors.push_back({{"name", name},
                           {"dtype", dtype_name(t.dtype())},
                           {"shape", t.shape()},
                           {"offset", offset},
                           {"bytes", bytes}});
    }
    json manifest = {{"version", 1},
                     {"step", c.step},
                     {"rng", c.rng_state},
                     {"config", c.config_json},
                     {"crc32", crc32(blob.data(), blob.size())},
                     {"tensors", std::move(tensors)}};

    std::ofstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw IoError("checkpoint: cannot write manifest in " + dir);
    mf << manifest.dump(2) << "\n";
    std::ofstream bf(fs::path(dir) / "weights.bin", std::ios::binary);
    if (!bf) throw IoError("checkpoint: cannot write blob in " + dir);
    bf.write(blob.data(), std::streamsize(blob.size()));
    if (!bf) throw IoError("checkpoint: short write in " + dir);
}

Checkpoint checkpoint_load(const std::string& dir) {
    std::ifstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw IoError("checkpoint: missing manifest in " + dir);
    json manifest = json::parse(mf, nullptr, false);
    if (manifest.is_discarded()) throw IoError("checkpoint: malformed manifest in " + dir);
    if (manifest.at("version").get<int>() != 1)
        throw IoError("checkpoint: unsupported manifest version in " + dir);

    std::ifstream bf(fs::path(dir) / "weights.bin", std::ios::binary);
    if (!bf) throw IoError("checkpoint: missing blob in " + dir);
    std::string blob((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());

    size_t expected = 0;
    for (const auto& jt : manifest.at("tensors"))
        expected = std::max(expected, jt.at("offset").get<size_t>() + jt.at("bytes").get<size_t>());
    if (blob.size() != expected)
        throw IoError("checkpoint: blob size mismatch (truncated or stale) in " + dir);
    if (crc32(blob.data(), blob.size()) != manifest.at("crc32").get<uint32_t>())
        throw IoError("checkpoint: checksum failure in " + dir);

    Checkpoint c;
    c.step = manifest.at("step").get<int64_t>();
    c.rng_state = manifest.at("rng").get<std::string>();
    c.config_json = manifest.at("config").get<std::string>();
    for (const auto& jt : manifest.at("tensors")) {
        auto name = jt.at("name").get<std::string>();
        DType dt = dtype_from(jt.at("dtype").get<std::string>());
        Shape shape = jt.at("shape").get<Shape>();
        size_t offset = jt.at("offset").get<size_t>();
        size_t bytes = jt.at("bytes").get<size_t>();
        int64_t n = numel_of(shape);
        if (bytes != size_t(n) * dtype_bytes(dt))
            throw IoError("checkpoint: byte count mismatch for tensor '" + name + "'");
        std::vector<double> vals(static_cast<size_t>(n));
        if (dt == DType::f64) {
            std::memcpy(vals.data(), blob.data() + offset, bytes);
        } else {
            std::vector<float> f(static_cast<size_t>(n));
            std::memcpy(f.data(), blob.data() + offset, bytes);
            for (size_t i = 0; i < f.size(); ++i) vals[i] = double(f[i]);
        }
        c.tensors.emplace_back(name, Tensor::from_vector(shape, vals, dt));
    }
    return c;
}

void checkpoint_apply(const Checkpoint& c, NamedTensors& live) {
    std::map<std::string, const Tensor*> by_name;
    for (const auto& [name, t] : c.tensors)
        if (!by_name.emplace(name, &t).second)
            throw IoError("checkpoint: duplicate tensor '" + name + "'");
    for (auto& [name, t] : live) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw IoError("checkpoint: missing tensor '" + name + "'");
        const Tensor& src = *it->second;
        if (src.shape() != t.shape())
            throw IoError("checkpoint: shape mismatch for tensor '" + name + "'");
        if (src.dtype() != t.dtype())
            throw IoError("checkpoint: dtype mismatch for tensor '" + name + "'");
        t.copy_from(src);
        by_name.erase(it);
    }
    if (!by_name.empty())
        throw IoError("checkpoint: unexpected tensor '" + by_name.begin()->first + "'");
}

}  // namespace ssmtad
