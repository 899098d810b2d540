#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "afr/geometry.hpp"
#include "afr/image.hpp"

namespace afr::synth {

/// Procedural finger identity: a smooth phase field whose level sets are the
/// ridges. The field is a base linear ramp plus low-order harmonic warps plus
/// an integer-winding singular term around the core.
struct SyntheticIdentity {
    uint64_t seed = 0;
    double base_angle = 0;  // radians, direction of the ridge normal
    struct Harmonic {
        double amp = 0;    // pixels of phase displacement
        double fx = 0;     // cycles per canvas width
        double fy = 0;
        double phase = 0;  // radians
    };
    std::vector<Harmonic> harmonics;
    std::vector<Harmonic> amplitude;  // slow ridge-contrast modulation
    double ridge_frequency = 0.1;  // cycles per pixel, in [0.08, 0.14]
    geometry::Keypoint core;
    int winding = 0;  // integer turns around the core
    double mask_cx = 0, mask_cy = 0, mask_rx = 0, mask_ry = 0;  // foreground ellipse
    struct Pore {
        double x = 0, y = 0, r = 1.5;
    };
    std::vector<Pore> pores;  // bright point features along the ridges
};

struct Perturbation {
    geometry::AffineTransform affine;
    double occlusion_ratio = 0;
    double noise_std = 0;       // intensity levels
    double contrast_gain = 1;
    double contrast_bias = 0;
    uint64_t seed = 0;  // drives occlusion placement and noise

    static Perturbation identity() { return {}; }
};

SyntheticIdentity gen_identity(uint64_t seed, int canvas = 224);

/// Phase field and ridge-normal orientation at a point (for tests and
/// identity-separation checks).
double phase_at(const SyntheticIdentity& id, double x, double y);
double orientation_at(const SyntheticIdentity& id, double x, double y);  // radians mod pi

/// Mean absolute orientation difference (mod pi) over a sampling grid.
double orientation_field_distance(const SyntheticIdentity& a, const SyntheticIdentity& b,
                                  int canvas = 224, int step = 8);

/// Pure function of (identity, perturbation): oriented sinusoidal ridge
/// pattern, soft elliptical mask onto white background, then affine,
/// occlusion, noise, contrast in that order.
Image render_impression(const SyntheticIdentity& id, const Perturbation& p, int size = 224);

/// Mild random perturbation used for dataset impressions. Impression 0 of an
/// identity uses Perturbation::identity() plus light noise. Geometry scales
/// with the canvas side.
Perturbation random_perturbation(uint64_t seed, bool allow_occlusion = true, int canvas = 224);

struct DatasetSpec {
    int identities = 50;
    int impressions = 8;
    uint64_t seed = 1;
    int size = 224;
};

struct Sample {
    int identity = 0;
    int impression = 0;
    Perturbation perturbation;
    Image image;
};

/// Renders the full identities x impressions grid; deterministic per spec.
std::vector<Sample> render_dataset(const DatasetSpec& spec);

/// Perturbation of impression `j` of identity `i` under dataset seed.
Perturbation dataset_perturbation(const DatasetSpec& spec, int identity, int impression);

struct DatasetOnDisk {
    DatasetSpec spec;
    std::vector<Sample> samples;  // identity-major, impression-minor
};

/// Writes images plus manifest.json (identity, impression, perturbation
/// record per file). format is "pgm" or "png".
void save_dataset(const std::string& dir, const DatasetSpec& spec,
                  const std::vector<Sample>& samples, const std::string& format = "pgm");
DatasetOnDisk load_dataset(const std::string& dir);

}  // namespace afr::synth
