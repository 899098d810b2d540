#pragma once

#include <optional>
#include <string>
#include <vector>

#include "afr/geometry.hpp"
#include "afr/image.hpp"
#include "afr/model.hpp"

namespace afr::matcher {

struct MatchParams {
    double w1 = 0.2;   // CNN-head weight in the global score
    double w2 = 0.8;   // attention-head weight
    double w3 = 0.5;   // original-score weight in the fusion
    double w4 = 0.5;   // refined-score weight
    double s_low = 0.3;   // realignment gating band, inclusive
    double s_high = 0.6;
    double descriptor_tau = 0.6;
    int min_correspondences = 8;
    geometry::RansacParams ransac;
    geometry::TransformLimits limits;
    double min_overlap_fraction = geometry::kDefaultMinOverlapFraction;
    bool enable_realign = true;
    double decision_threshold = 0.36;

    void validate() const;
    static MatchParams for_model(const model::ModelConfig& cfg);
};

struct MatchResult {
    double score = 0;
    double global_score = 0;  // the pre-realignment similarity
    bool realign_attempted = false;
    bool realign_applied = false;
    std::optional<geometry::AffineTransform> transform;
    int n_correspondences = 0;
    std::optional<double> refined_score;
};

/// Everything the matcher needs about one image: preprocessed canvas, global
/// embeddings, local descriptors, alignment readout.
struct Extraction {
    model::EmbeddingPair emb;
    model::LocalFeatureMap locals;  // empty when extracted without locals
    model::AlignmentParams align;
    Image canvas;  // input_size x input_size

    bool has_locals() const { return !locals.data.empty(); }
};

Extraction extract(model::AfrNet<float>& net, const Image& img, bool with_locals = true);
std::vector<Extraction> extract_batch(model::AfrNet<float>& net,
                                      const std::vector<const Image*>& imgs,
                                      bool with_locals = true);

/// w1 * (z_c1 . z_c2) + w2 * (z_a1 . z_a2)
double global_score(const model::EmbeddingPair& e1, const model::EmbeddingPair& e2, double w1,
                    double w2);

MatchResult match(const Image& i1, const Image& i2, model::AfrNet<float>& net,
                  const MatchParams& p);
/// Same, on precomputed extractions (embedding caches for batch evaluation).
MatchResult match_extracted(const Extraction& e1, const Extraction& e2,
                            model::AfrNet<float>& net, const MatchParams& p);

struct VerifyResult {
    bool accept = false;
    MatchResult result;
};

VerifyResult verify(const Image& i1, const Image& i2, model::AfrNet<float>& net,
                    const MatchParams& p, double threshold);

// ---------------------------------------------------------------------------
// Templates and 1:N search

struct Template {
    std::string subject;
    std::string finger;
    model::EmbeddingPair emb;
    bool has_locals = false;
    model::LocalFeatureMap locals;
    Mask foreground;  // canvas-resolution foreground, stored with locals
    uint64_t model_hash = 0;
};

Template enroll(const Image& img, model::AfrNet<float>& net, const std::string& subject,
                const std::string& finger, bool with_locals = true);

/// Template file: "AFRT" header + float32 payloads + length-prefixed labels.
/// Round-trips bit-exactly.
void save_template(const std::string& path, const Template& t);
Template load_template(const std::string& path);

struct Gallery {
    uint64_t model_hash = 0;
    std::vector<Template> templates;  // enrollment order
};

/// Directory of template files plus manifest.json naming labels and files.
void save_gallery(const std::string& dir, const Gallery& g);
Gallery load_gallery(const std::string& dir);

struct SearchHit {
    int index = -1;  // enrollment order
    std::string subject;
    std::string finger;
    double score = 0;
    bool realigned = false;
};

/// Scores the probe against every template; candidates whose global score
/// falls inside [s_low, s_high] get the local-embedding realignment when the
/// template stores locals. Top-k by final score, ties broken by ascending
/// enrollment order. Throws on model fingerprint mismatch.
std::vector<SearchHit> search(const Image& probe, const Gallery& gallery,
                              model::AfrNet<float>& net, const MatchParams& p, int k);
std::vector<SearchHit> search_extracted(const Extraction& probe, const Gallery& gallery,
                                        model::AfrNet<float>& net, const MatchParams& p, int k);

}  // namespace afr::matcher
