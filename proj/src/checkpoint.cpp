#include "afr/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>

namespace afr::model {

namespace {

void put_u32(std::ostream& out, uint32_t v) {
    unsigned char b[4] = {uint8_t(v), uint8_t(v >> 8), uint8_t(v >> 16), uint8_t(v >> 24)};
    out.write(reinterpret_cast<char*>(b), 4);
}

uint32_t get_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw std::runtime_error("truncated blob file");
    return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}

void put_f32(std::ostream& out, const float* data, size_t n) {
    static_assert(sizeof(float) == 4);
    // little-endian host assumed; bytes written verbatim
    out.write(reinterpret_cast<const char*>(data), std::streamsize(n * 4));
}

}  // namespace

void write_blob_file(const std::string& path, const char magic[4], const BlobFile& file) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.write(magic, 4);
    put_u32(out, file.version);
    put_u32(out, uint32_t(file.meta.size()));
    out.write(file.meta.data(), std::streamsize(file.meta.size()));
    put_u32(out, uint32_t(file.tensors.size()));
    for (const auto& t : file.tensors) {
        put_u32(out, uint32_t(t.name.size()));
        out.write(t.name.data(), std::streamsize(t.name.size()));
        put_u32(out, uint32_t(t.dims.size()));
        size_t n = 1;
        for (int d : t.dims) {
            put_u32(out, uint32_t(d));
            n *= size_t(d);
        }
        if (n != t.data.size())
            throw std::runtime_error("blob " + t.name + ": dims do not match payload");
        put_f32(out, t.data.data(), n);
    }
    if (!out) throw std::runtime_error("short write: " + path);
}

BlobFile read_blob_file(const std::string& path, const char magic[4]) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    char got[4];
    in.read(got, 4);
    if (!in || std::memcmp(got, magic, 4) != 0)
        throw std::runtime_error(path + ": bad magic (expected " + std::string(magic, 4) + ")");
    BlobFile file;
    file.version = get_u32(in);
    uint32_t meta_len = get_u32(in);
    file.meta.resize(meta_len);
    in.read(file.meta.data(), meta_len);
    uint32_t n_tensors = get_u32(in);
    file.tensors.resize(n_tensors);
    for (auto& t : file.tensors) {
        uint32_t name_len = get_u32(in);
        t.name.resize(name_len);
        in.read(t.name.data(), name_len);
        uint32_t rank = get_u32(in);
        t.dims.resize(rank);
        size_t n = 1;
        for (auto& d : t.dims) {
            d = int(get_u32(in));
            n *= size_t(d);
        }
        t.data.resize(n);
        in.read(reinterpret_cast<char*>(t.data.data()), std::streamsize(n * 4));
        if (!in) throw std::runtime_error(path + ": truncated tensor " + t.name);
    }
    return file;
}

static const char kCheckpointMagic[4] = {'A', 'F', 'R', 'N'};

void save_checkpoint(const std::string& path, AfrNet<float>& net, ArcFaceHead<float>* arcface) {
    BlobFile file;
    file.meta = net.config().serialize();
    net.visit_params([&](nn::Param<float>& p) {
        file.tensors.push_back({p.name, p.value.shape, p.value.v});
    });
    net.visit_stats([&](const std::string& name, std::vector<float>& v) {
        TensorBlob b;
        b.name = "stats." + name;
        b.dims = {int(v.size())};
        b.data.assign(v.begin(), v.end());
        file.tensors.push_back(std::move(b));
    });
    if (arcface) {
        arcface->visit_params("arcface", [&](nn::Param<float>& p) {
            file.tensors.push_back({p.name, p.value.shape, p.value.v});
        });
    }
    write_blob_file(path, kCheckpointMagic, file);
}

Checkpoint load_checkpoint(const std::string& path) {
    BlobFile file = read_blob_file(path, kCheckpointMagic);
    ModelConfig cfg = ModelConfig::deserialize(file.meta);
    std::map<std::string, const TensorBlob*> by_name;
    for (const auto& t : file.tensors) by_name[t.name] = &t;

    Checkpoint ckpt;
    ckpt.net = std::make_unique<AfrNet<float>>(cfg);
    ckpt.net->visit_params([&](nn::Param<float>& p) {
        auto it = by_name.find(p.name);
        if (it == by_name.end()) throw std::runtime_error(path + ": missing tensor " + p.name);
        if (it->second->dims != p.value.shape)
            throw std::runtime_error(path + ": shape mismatch for " + p.name);
        p.value.v = it->second->data;
    });
    ckpt.net->visit_stats([&](const std::string& name, std::vector<float>& v) {
        auto it = by_name.find("stats." + name);
        if (it == by_name.end()) throw std::runtime_error(path + ": missing stats " + name);
        v.assign(it->second->data.begin(), it->second->data.end());
    });
    if (by_name.count("arcface.weight")) {
        util::Rng rng(0);
        ckpt.arcface = std::make_unique<ArcFaceHead<float>>(cfg.num_classes, cfg.embed_dim,
                                                            cfg.arcface, rng);
        ckpt.arcface->visit_params("arcface", [&](nn::Param<float>& p) {
            auto it = by_name.find(p.name);
            if (it->second->dims != p.value.shape)
                throw std::runtime_error(path + ": shape mismatch for " + p.name);
            p.value.v = it->second->data;
        });
    }
    return ckpt;
}

}  // namespace afr::model
