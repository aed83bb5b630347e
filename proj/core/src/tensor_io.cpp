#include "tensor_io.hpp"

#include "clicktok/errors.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace clicktok {

namespace {

// blobs are written little-endian; this codebase targets little-endian hosts
static_assert(std::endian::native == std::endian::little, "big-endian hosts unsupported");

constexpr int checkpoint_version = 1;

} // namespace

void write_checkpoint(const std::string & dir, const std::string & kind,
                      const json & extra, const std::vector<tensor_blob> & tensors) {
    fs::create_directories(dir);

    json manifest;
    manifest["kind"] = kind;
    manifest["version"] = checkpoint_version;
    manifest["meta"] = extra;
    json jt = json::object();
    for (const auto & t : tensors) {
        jt[t.name] = t.shape;
        if (t.count() != (int64_t) t.data.size()) {
            throw numeric_error("write_checkpoint: shape/data mismatch for " + t.name);
        }
        std::ofstream f(fs::path(dir) / (t.name + ".f32"), std::ios::binary | std::ios::trunc);
        if (!f) throw data_error("write_checkpoint: cannot write tensor " + t.name);
        f.write((const char *) t.data.data(), (std::streamsize) (t.data.size() * sizeof(float)));
    }
    manifest["tensors"] = std::move(jt);

    std::ofstream f(fs::path(dir) / "manifest.json", std::ios::trunc);
    if (!f) throw data_error("write_checkpoint: cannot write manifest in " + dir);
    f << manifest.dump(2) << "\n";
}

json read_checkpoint(const std::string & dir, const std::string & kind,
                     std::vector<tensor_blob> & tensors) {
    std::ifstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw data_error("read_checkpoint: missing manifest in " + dir);
    json manifest;
    try {
        mf >> manifest;
    } catch (const json::exception & ex) {
        throw data_error("read_checkpoint: bad manifest in " + dir + ": " + ex.what());
    }

    if (manifest.value("kind", "") != kind) {
        throw data_error("read_checkpoint: expected kind '" + kind + "' in " + dir);
    }

    tensors.clear();
    for (auto & [name, jshape] : manifest.at("tensors").items()) {
        tensor_blob t;
        t.name = name;
        for (const auto & s : jshape) t.shape.push_back(s.get<int64_t>());

        std::ifstream f(fs::path(dir) / (name + ".f32"), std::ios::binary);
        if (!f) throw data_error("read_checkpoint: missing tensor " + name + " in " + dir);
        t.data.resize(t.count());
        f.read((char *) t.data.data(), (std::streamsize) (t.data.size() * sizeof(float)));
        if (f.gcount() != (std::streamsize) (t.data.size() * sizeof(float))) {
            throw data_error("read_checkpoint: truncated tensor " + name + " in " + dir);
        }
        tensors.push_back(std::move(t));
    }
    return manifest.at("meta");
}

uint64_t checkpoint_hash(const std::vector<tensor_blob> & tensors) {
    uint64_t h = 0xCBF29CE484222325ull;
    auto feed = [&h](const void * p, size_t n) {
        const uint8_t * b = (const uint8_t *) p;
        for (size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001B3ull;
        }
    };
    for (const auto & t : tensors) {
        feed(t.name.data(), t.name.size());
        for (int64_t s : t.shape) feed(&s, sizeof(s));
        feed(t.data.data(), t.data.size() * sizeof(float));
    }
    return h;
}

} // namespace clicktok
