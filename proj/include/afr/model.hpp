#pragma once

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "afr/geometry.hpp"
#include "afr/image.hpp"
#include "afr/nn/layers.hpp"

namespace afr::model {

struct ArcFaceParams {
    double margin = 0.5;  // radians
    double scale = 64.0;
    bool operator==(const ArcFaceParams&) const = default;
};

/// Network hyperparameters. The paper-scale and desk-scale ("tiny") presets
/// share all grid geometry so the matcher code paths are identical.
struct ModelConfig {
    int input_size = 224;
    int stem_channels = 64;
    std::array<int, 4> stage_channels{256, 512, 1024, 2048};
    std::array<int, 4> stage_blocks{3, 4, 6, 3};
    std::array<int, 5> stn_channels{16, 24, 32, 48, 64};
    int stn_fc = 32;
    int attn_depth = 12;
    int attn_heads = 6;
    int embed_dim = 384;
    int embed_hidden = 1024;
    int local_dim = 1024;  // == stage_channels[2], the correspondence feature width
    int grid = 14;
    int patch = 16;
    int num_classes = 2;
    ArcFaceParams arcface;

    static ModelConfig paper(int num_classes = 2);
    static ModelConfig tiny(int num_classes = 2);
    /// Very small configuration for fast tests (input 32, grid 2).
    static ModelConfig micro(int num_classes = 3);

    void validate() const;
    std::string serialize() const;
    static ModelConfig deserialize(const std::string& text);
    uint64_t hash() const;
    bool operator==(const ModelConfig&) const = default;
};

struct EmbeddingPair {
    std::vector<float> z_c;
    std::vector<float> z_a;
};

/// Grid of per-cell local descriptors taken from the last stage-3 output,
/// L2-normalized per cell.
struct LocalFeatureMap {
    int grid_h = 0;
    int grid_w = 0;
    int dim = 0;
    std::vector<float> data;  // (grid_h*grid_w) x dim, row-major cells
    std::string provenance = "conv4";

    geometry::DescriptorSet to_descriptor_set(int patch) const;
};

struct AlignmentParams {
    double theta_deg = 0;
    double scale = 1;
    double tx = 0;  // normalized translation in [-1, 1]
    double ty = 0;
};

// ---------------------------------------------------------------------------
// Building blocks

/// Bilinear resampling of a (C, S, S) image under a similarity transform in
/// align-corners normalized coordinates; out-of-frame samples take `fill`.
template <typename T>
void grid_sample_similarity(const T* img, int channels, int side, double scale, double theta,
                            double tx, double ty, T fill, T* out);

/// Gradient of grid_sample_similarity w.r.t. (scale, theta, tx, ty).
template <typename T>
void grid_sample_similarity_grad(const T* img, int channels, int side, double scale, double theta,
                                 double tx, double ty, T fill, const T* dout, double grad4[4]);

template <typename T>
class Bottleneck {
public:
    Bottleneck() = default;
    Bottleneck(int in_c, int out_c, int stride, util::Rng& rng);
    nn::Tensor<T> forward(const nn::Tensor<T>& x, bool train);
    nn::Tensor<T> backward(const nn::Tensor<T>& dy);
    void visit_params(const std::string& prefix, const nn::ParamVisitor<T>& fn);
    void visit_stats(const std::string& prefix,
                     const std::function<void(const std::string&, std::vector<float>&)>& fn);

private:
    bool has_down_ = false;
    nn::Conv2d<T> c1_, c2_, c3_, cd_;
    nn::BatchNorm2d<T> b1_, b2_, b3_, bd_;
    nn::ReLU<T> r1_, r2_, r3_;
    nn::Tensor<T> skip_cache_;
};

/// Localization network plus differentiable resampler. The four localization
/// outputs map to (scale, rotation, tx, ty) of a similarity transform:
/// scale = exp(p0 - 1), theta = p1, tx = tanh(p2), ty = tanh(p3), which keeps
/// scale positive and translations in [-1, 1] and is the identity at the
/// zero-weight / bias=(1,0,0,0) initialization.
template <typename T>
class SpatialAlignment {
public:
    SpatialAlignment() = default;
    SpatialAlignment(const ModelConfig& cfg, util::Rng& rng);

    struct Out {
        nn::Tensor<T> aligned;  // (N, 3, S, S)
        nn::Tensor<T> params;   // (N, 4): scale, theta_rad, tx, ty (mapped)
    };
    Out forward(const nn::Tensor<T>& x, bool train,
                std::vector<std::pair<std::string, std::vector<int>>>* ledger);
    /// Backpropagates into the localization stack; the image input is a leaf.
    void backward(const nn::Tensor<T>& d_aligned);

    void visit_params(const std::string& prefix, const nn::ParamVisitor<T>& fn);

    /// Resamples with externally forced parameters (no localization pass).
    static nn::Tensor<T> apply_params(const nn::Tensor<T>& x, const AlignmentParams& p);

private:
    int side_ = 0;
    std::array<nn::Conv2d<T>, 5> convs_;
    std::array<nn::ReLU<T>, 5> relus_;
    std::array<nn::MaxPool2d<T>, 5> pools_;
    nn::Linear<T> fc1_, fc2_;
    nn::ReLU<T> fc_relu_;
    nn::Tensor<T> x_cache_, raw_cache_, mapped_cache_;
};

/// Per-row L2 normalization to the unit sphere.
template <typename T>
class L2NormRows {
public:
    nn::Tensor<T> forward(const nn::Tensor<T>& x, bool train);
    nn::Tensor<T> backward(const nn::Tensor<T>& dy);

private:
    nn::Tensor<T> y_cache_;
    std::vector<double> norms_;
};

// ---------------------------------------------------------------------------
// ArcFace

/// Additive-angular-margin logits for a single embedding: logit_j =
/// s * cos(theta_j + m * [j == label]). Inputs must be unit-norm
/// (checked to 1e-4); m in [0, pi/2).
std::vector<double> arcface_logits(const std::vector<double>& z,
                                   const std::vector<std::vector<double>>& w_rows, int label,
                                   double margin, double scale);

/// Classification layer trained with the additive angular margin loss.
template <typename T>
class ArcFaceHead {
public:
    ArcFaceHead() = default;
    ArcFaceHead(int num_classes, int dim, const ArcFaceParams& p, util::Rng& rng);

    /// Mean cross-entropy over the batch; fills dz (same shape as z) when
    /// requested. z rows must be unit norm.
    double loss(const nn::Tensor<T>& z, const std::vector<int>& labels, nn::Tensor<T>* dz);

    void visit_params(const std::string& prefix, const nn::ParamVisitor<T>& fn);

private:
    int classes_ = 0, dim_ = 0;
    ArcFaceParams p_;
    nn::Param<T> w_;
};

// ---------------------------------------------------------------------------
// The full network

template <typename T>
class AfrNet {
public:
    explicit AfrNet(const ModelConfig& cfg, uint64_t init_seed = 0x5eed0001ull);

    struct Output {
        nn::Tensor<T> z_c;      // (N, embed_dim), unit rows
        nn::Tensor<T> z_a;      // (N, embed_dim), unit rows
        nn::Tensor<T> locals;   // (N, grid^2, local_dim), unit cells
        nn::Tensor<T> align;    // (N, 4): scale, theta_rad, tx, ty
        nn::Tensor<T> tokens;   // (N, grid^2, embed_dim) final patch states
    };

    Output forward(const nn::Tensor<T>& x, bool train);
    /// Gradients are w.r.t. the normalized embeddings returned by forward.
    void backward(const nn::Tensor<T>& dz_c, const nn::Tensor<T>& dz_a);

    void visit_params(const nn::ParamVisitor<T>& fn);
    void visit_stats(const std::function<void(const std::string&, std::vector<float>&)>& fn);
    void zero_grads();

    const ModelConfig& config() const { return cfg_; }

    void record_shapes(bool on) { record_shapes_ = on; }
    const std::vector<std::pair<std::string, std::vector<int>>>& shape_ledger() const {
        return ledger_;
    }

private:
    ModelConfig cfg_;
    SpatialAlignment<T> stn_;
    nn::Conv2d<T> stem_;
    nn::BatchNorm2d<T> stem_bn_;
    nn::ReLU<T> stem_relu_;
    nn::MaxPool2d<T> stem_pool_;
    std::vector<Bottleneck<T>> stage1_, stage2_, stage3_, stage4_;
    nn::Linear<T> fc_c_;
    L2NormRows<T> norm_c_;
    // attention head
    nn::Linear<T> embed_fc1_, embed_fc2_;
    nn::Gelu<T> embed_gelu_;
    nn::Param<T> cls_token_, pos_embed_;
    std::vector<nn::EncoderBlock<T>> blocks_;
    nn::LayerNorm<T> final_ln_;
    nn::Linear<T> fc_a_;
    L2NormRows<T> norm_a_;

    bool record_shapes_ = false;
    std::vector<std::pair<std::string, std::vector<int>>> ledger_;
    // backward bookkeeping
    int batch_ = 0;
    std::vector<int> gap_shape_;
};

// ---------------------------------------------------------------------------
// Image <-> tensor plumbing (grayscale replicated to 3 channels, [0,1] then
// standardized by mean 0.5 / std 0.5).

template <typename T>
nn::Tensor<T> images_to_tensor(const std::vector<const Image*>& imgs, int input_size);

Image preprocess_to_canvas(const Image& img, int input_size);

extern template class AfrNet<float>;
extern template class AfrNet<double>;

}  // namespace afr::model
