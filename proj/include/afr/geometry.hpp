#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "afr/image.hpp"

namespace afr::geometry {

struct Keypoint {
    double x = 0;  // pixels, horizontal, origin top-left
    double y = 0;  // pixels, vertical
};

/// A set of unit-norm local descriptors with their anchor keypoints.
struct DescriptorSet {
    int dim = 0;
    std::vector<float> data;  // count x dim, row-major
    std::vector<Keypoint> keypoints;

    int count() const { return int(keypoints.size()); }
    const float* row(int i) const { return data.data() + size_t(i) * dim; }

    /// Checks |descriptors| == |keypoints| and unit L2 norms (±1e-5).
    void validate() const;
};

struct Correspondence {
    int idx_a = -1;
    int idx_b = -1;
    double similarity = 0;  // cosine in [-1, 1]
};

/// 2x3 affine map taking probe pixel coordinates into reference coordinates.
struct AffineTransform {
    double m[2][3] = {{1, 0, 0}, {0, 1, 0}};

    static AffineTransform identity() { return {}; }
    static AffineTransform similarity(double scale, double rotation_deg, double tx, double ty);
    /// Similarity transform that rotates/scales about a pivot, then translates.
    static AffineTransform about_point(double cx, double cy, double scale, double rotation_deg,
                                       double tx, double ty);

    Keypoint apply(const Keypoint& p) const {
        return {m[0][0] * p.x + m[0][1] * p.y + m[0][2], m[1][0] * p.x + m[1][1] * p.y + m[1][2]};
    }
    double det2() const { return m[0][0] * m[1][1] - m[0][1] * m[1][0]; }
    std::optional<AffineTransform> inverse() const;
    bool is_identity(double tol = 0.0) const;
};

/// Rotation * shear * scale + translation factors of an affine matrix.
struct Decomposition {
    double scale_x = 1;
    double scale_y = 1;
    double rotation_deg = 0;
    double shear = 0;
    double tx = 0;
    double ty = 0;
};

struct TransformLimits {
    double scale_min = 0.5;
    double scale_max = 2.0;
    double max_rotation_deg = 60.0;
    double max_translation_px = 112.0;

    static TransformLimits for_image_size(int side) {
        TransformLimits l;
        l.max_translation_px = side / 2.0;
        return l;
    }
    void validate() const;
};

struct RansacParams {
    int iters = 500;
    double inlier_px = 3.0;
    int min_inliers = 8;
};

// ---------------------------------------------------------------------------
// Operations

/// Centers of a grid of patch x patch cells, row-major: cell (i, j) anchors at
/// (j*patch + patch/2, i*patch + patch/2).
std::vector<Keypoint> patch_centers(int grid_h, int grid_w, int patch);

/// Mutual-nearest-neighbor matching under cosine similarity: a pair (i, j) is
/// kept iff j is i's argmax over B and i is j's argmax over A and the cosine
/// is >= tau. Ties resolve to the lowest index. Result sorted by descending
/// similarity, then ascending (idx_a, idx_b).
std::vector<Correspondence> match_descriptors(const DescriptorSet& a, const DescriptorSet& b,
                                              double tau);

/// Robust 6-DOF affine fit from correspondences: RANSAC over 3-point minimal
/// samples, least-squares refit on the inlier consensus. Returns nullopt when
/// fewer than 3 correspondences, all samples degenerate, or the consensus is
/// smaller than min_inliers. Deterministic under a fixed seed.
std::optional<AffineTransform> estimate_affine(const std::vector<Correspondence>& corr,
                                               const std::vector<Keypoint>& kp_a,
                                               const std::vector<Keypoint>& kp_b,
                                               const RansacParams& params, uint64_t seed);

/// Exact least-squares affine on all given pairs (no robustness). Exposed for
/// refits; returns nullopt on degenerate configurations.
std::optional<AffineTransform> fit_affine_lsq(const std::vector<Keypoint>& src,
                                              const std::vector<Keypoint>& dst);

/// QR-style factorization of the 2x2 part: M = R(theta) * Shear * Scale, plus
/// translation. Throws std::invalid_argument when the 2x2 part is singular.
Decomposition decompose(const AffineTransform& t);
AffineTransform recompose(const Decomposition& d);

bool transform_ok(const AffineTransform& t, const TransformLimits& limits);

/// Inverse-mapping bilinear warp; out-of-bounds samples take `fill`.
/// Throws std::invalid_argument when the transform is not invertible.
Image warp_image(const Image& img, const AffineTransform& t, uint8_t fill);
Mask warp_mask(const Mask& mask, const AffineTransform& t);

/// Block-variance foreground detector: a 16x16 block is foreground when its
/// intensity std on the 0-255 scale exceeds 10.
Mask foreground_mask(const Image& img, int block = 16, double std_thresh = 10.0);

inline constexpr double kDefaultMinOverlapFraction = 0.1;

/// Masks both images to the intersection of their foregrounds. Returns
/// nullopt (no overlap) when the intersection covers less than
/// min_overlap_fraction of either foreground.
std::optional<std::pair<Image, Image>> overlap_masks(const Image& img_a_warped,
                                                     const Image& img_b, const Mask& fg_a,
                                                     const Mask& fg_b, uint8_t fill,
                                                     double min_overlap_fraction = kDefaultMinOverlapFraction);

/// Paints background-colored rectangles until the occluded fraction of the
/// foreground lies in [ratio - 0.02, ratio + 0.02]. Deterministic per seed.
Image random_occlusion(const Image& img, double ratio, uint64_t seed);

/// Removes `ratio` of the foreground with a random straight cut, then applies
/// a random mild affine placement back onto the canvas. Deterministic per
/// seed; remaining foreground is (1 - ratio) +- 0.02 of the original.
Image random_partial_affine(const Image& img, double ratio, uint64_t seed);

}  // namespace afr::geometry
