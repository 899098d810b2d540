#pragma once

#include <memory>
#include <string>
#include <vector>

#include "afr/model.hpp"

namespace afr::model {

/// Named little-endian float32 tensor container shared by checkpoints and
/// training-state files.
struct TensorBlob {
    std::string name;
    std::vector<int> dims;
    std::vector<float> data;
};

struct BlobFile {
    uint32_t version = 1;
    std::string meta;
    std::vector<TensorBlob> tensors;
};

void write_blob_file(const std::string& path, const char magic[4], const BlobFile& file);
BlobFile read_blob_file(const std::string& path, const char magic[4]);

/// Checkpoint = header {magic "AFRN", version, serialized ModelConfig} +
/// named parameter tensors. Round-trips bit-exactly.
void save_checkpoint(const std::string& path, AfrNet<float>& net,
                     ArcFaceHead<float>* arcface = nullptr);

struct Checkpoint {
    std::unique_ptr<AfrNet<float>> net;
    std::unique_ptr<ArcFaceHead<float>> arcface;  // present when saved with one
};

Checkpoint load_checkpoint(const std::string& path);

}  // namespace afr::model
