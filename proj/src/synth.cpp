#include "afr/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>

#include <nlohmann/json.hpp>

#include "afr/util.hpp"

namespace afr::synth {

namespace {
constexpr double kTwoPi = 2.0 * std::numbers::pi;
}

SyntheticIdentity gen_identity(uint64_t seed, int canvas) {
    util::Rng rng(util::seed_mix(seed, 0x1dee7ull));
    std::uniform_real_distribution<double> u01(0, 1);

    SyntheticIdentity id;
    id.seed = seed;
    id.base_angle = u01(rng) * std::numbers::pi;
    id.ridge_frequency = 0.08 + 0.06 * u01(rng);

    const int n_harm = 3;
    for (int k = 0; k < n_harm; ++k) {
        SyntheticIdentity::Harmonic h;
        h.amp = 2.0 + 6.0 * u01(rng);
        double wavelength = 60.0 + 120.0 * u01(rng);  // pixels
        double dir = u01(rng) * kTwoPi;
        h.fx = std::cos(dir) / wavelength;
        h.fy = std::sin(dir) / wavelength;
        h.phase = u01(rng) * kTwoPi;
        id.harmonics.push_back(h);
    }
    // ridge-contrast modulation keeps local patches aperiodic
    for (int k = 0; k < 2; ++k) {
        SyntheticIdentity::Harmonic h;
        h.amp = 0.12 + 0.10 * u01(rng);  // contrast swing
        double wavelength = 30.0 + 50.0 * u01(rng);
        double dir = u01(rng) * kTwoPi;
        h.fx = std::cos(dir) / wavelength;
        h.fy = std::sin(dir) / wavelength;
        h.phase = u01(rng) * kTwoPi;
        id.amplitude.push_back(h);
    }

    const double c = canvas / 2.0;
    id.core = {c + (u01(rng) - 0.5) * 50.0, c + (u01(rng) - 0.5) * 50.0};
    id.winding = int(u01(rng) * 3.0);  // 0 = arch-like, 1 = loop-like, 2 = whorl-like
    // the print footprint itself carries identity: position and radii vary
    id.mask_cx = c + (u01(rng) - 0.5) * 36.0 * canvas / 224.0;
    id.mask_cy = c + (u01(rng) - 0.5) * 36.0 * canvas / 224.0;
    id.mask_rx = (0.28 + 0.16 * u01(rng)) * canvas;
    id.mask_ry = (0.30 + 0.15 * u01(rng)) * canvas;

    // sweat pores: aperiodic point features that anchor correspondences
    const int n_pores = int(120.0 * canvas * canvas / (224.0 * 224.0)) + 20;
    for (int k = 0; k < n_pores; ++k) {
        SyntheticIdentity::Pore pore;
        double ang = u01(rng) * kTwoPi;
        double rad = std::sqrt(u01(rng));
        pore.x = id.mask_cx + std::cos(ang) * rad * id.mask_rx * 0.92;
        pore.y = id.mask_cy + std::sin(ang) * rad * id.mask_ry * 0.92;
        pore.r = 1.1 + 1.2 * u01(rng);
        id.pores.push_back(pore);
    }
    return id;
}

double phase_at(const SyntheticIdentity& id, double x, double y) {
    double dx = x - id.core.x, dy = y - id.core.y;
    double phi = std::cos(id.base_angle) * dx + std::sin(id.base_angle) * dy;
    for (const auto& h : id.harmonics)
        phi += h.amp * std::sin(kTwoPi * (h.fx * x + h.fy * y) + h.phase);
    if (id.winding != 0) {
        // integer winding keeps cos(2*pi*f*phi) continuous across the cut
        phi += id.winding / (kTwoPi * id.ridge_frequency) * std::atan2(dy, dx);
    }
    return phi;
}

double orientation_at(const SyntheticIdentity& id, double x, double y) {
    const double h = 0.5;
    double gx = (phase_at(id, x + h, y) - phase_at(id, x - h, y)) / (2 * h);
    double gy = (phase_at(id, x, y + h) - phase_at(id, x, y - h)) / (2 * h);
    double a = std::atan2(gy, gx);
    if (a < 0) a += std::numbers::pi * 2;
    return std::fmod(a, std::numbers::pi);  // ridge normal direction, mod pi
}

double orientation_field_distance(const SyntheticIdentity& a, const SyntheticIdentity& b,
                                  int canvas, int step) {
    double total = 0;
    int count = 0;
    for (int y = step; y < canvas - step; y += step) {
        for (int x = step; x < canvas - step; x += step) {
            // stay away from branch cuts near the cores
            auto near_core = [&](const SyntheticIdentity& id) {
                double dx = x - id.core.x, dy = y - id.core.y;
                return dx * dx + dy * dy < 32 * 32;
            };
            if (near_core(a) || near_core(b)) continue;
            double da = orientation_at(a, x, y), db = orientation_at(b, x, y);
            double d = std::abs(da - db);
            d = std::min(d, std::numbers::pi - d);
            total += d;
            ++count;
        }
    }
    return count ? total / count : 0.0;
}

Image render_impression(const SyntheticIdentity& id, const Perturbation& p, int size) {
    if (!(p.occlusion_ratio >= 0 && p.occlusion_ratio < 1))
        throw std::invalid_argument("render_impression: occlusion_ratio in [0, 1)");
    Image img(size, size, 255);
    const double f = id.ridge_frequency;
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            double g = std::cos(kTwoPi * f * phase_at(id, x, y));
            double gain = 1.0;
            for (const auto& h : id.amplitude)
                gain -= h.amp * (0.5 + 0.5 * std::sin(kTwoPi * (h.fx * x + h.fy * y) + h.phase));
            double ridge = 127.5 - 110.0 * gain * std::tanh(2.2 * g);
            double ex = (x - id.mask_cx) / id.mask_rx;
            double ey = (y - id.mask_cy) / id.mask_ry;
            double e = ex * ex + ey * ey;
            double blend = std::clamp((1.0 - e) / 0.15, 0.0, 1.0);  // soft ellipse edge
            double v = blend * ridge + (1 - blend) * 255.0;
            img.at(x, y) = uint8_t(std::lround(std::clamp(v, 0.0, 255.0)));
        }
    }
    for (const auto& pore : id.pores) {
        int x0 = std::max(0, int(pore.x - pore.r - 1)), x1 = std::min(size - 1, int(pore.x + pore.r + 1));
        int y0 = std::max(0, int(pore.y - pore.r - 1)), y1 = std::min(size - 1, int(pore.y + pore.r + 1));
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                double d2 = (x - pore.x) * (x - pore.x) + (y - pore.y) * (y - pore.y);
                if (d2 > pore.r * pore.r) continue;
                double lift = 150.0 * (1.0 - d2 / (pore.r * pore.r));
                img.at(x, y) = uint8_t(std::min(255.0, img.at(x, y) + lift));
            }
    }

    if (!p.affine.is_identity())
        img = geometry::warp_image(img, p.affine, 255);
    if (p.occlusion_ratio > 0)
        img = geometry::random_occlusion(img, p.occlusion_ratio,
                                         util::seed_mix(p.seed, 0x0cc1u));
    if (p.noise_std > 0) {
        util::Rng rng(util::seed_mix(p.seed, 0x401ceull));
        std::normal_distribution<double> noise(0.0, p.noise_std);
        for (auto& px : img.px) {
            double v = px + noise(rng);
            px = uint8_t(std::lround(std::clamp(v, 0.0, 255.0)));
        }
    }
    if (p.contrast_gain != 1.0 || p.contrast_bias != 0.0) {
        for (auto& px : img.px) {
            double v = p.contrast_gain * (px - 128.0) + 128.0 + p.contrast_bias;
            px = uint8_t(std::lround(std::clamp(v, 0.0, 255.0)));
        }
    }
    return img;
}

Perturbation random_perturbation(uint64_t seed, bool allow_occlusion, int canvas) {
    util::Rng rng(util::seed_mix(seed, 0xfeedbeefull));
    std::uniform_real_distribution<double> u01(0, 1);
    const double px = canvas / 224.0;  // geometry scales with the canvas
    Perturbation p;
    double rot = (u01(rng) - 0.5) * 12.0;              // +-6 degrees
    double scale = 0.97 + 0.075 * u01(rng);            // [0.97, 1.045]
    double tx = (u01(rng) - 0.5) * 12.0 * px;          // +-6 px at 224
    double ty = (u01(rng) - 0.5) * 12.0 * px;
    p.affine = geometry::AffineTransform::about_point(canvas / 2.0, canvas / 2.0, scale, rot,
                                                      tx, ty);
    p.noise_std = 2.0 + 3.0 * u01(rng);
    p.contrast_gain = 0.94 + 0.12 * u01(rng);
    p.contrast_bias = (u01(rng) - 0.5) * 12.0;
    double occ = u01(rng);
    if (allow_occlusion && occ > 0.7) p.occlusion_ratio = 0.05 + 0.05 * u01(rng);
    p.seed = util::seed_mix(seed, 0x5eedull);
    return p;
}

Perturbation dataset_perturbation(const DatasetSpec& spec, int identity, int impression) {
    if (impression == 0) {
        // canonical reference impression: no geometry change, light noise
        Perturbation p;
        p.noise_std = 2.0;
        p.seed = util::seed_mix(spec.seed, identity, impression, 0xab11ull);
        return p;
    }
    return random_perturbation(util::seed_mix(spec.seed, identity, impression), true, spec.size);
}

std::vector<Sample> render_dataset(const DatasetSpec& spec) {
    if (spec.identities < 1 || spec.impressions < 1)
        throw std::invalid_argument("render_dataset: counts must be >= 1");
    std::vector<Sample> out(size_t(spec.identities) * spec.impressions);
    util::parallel_for(int64_t(out.size()), [&](int64_t idx) {
        int i = int(idx / spec.impressions), j = int(idx % spec.impressions);
        Sample& s = out[idx];
        s.identity = i;
        s.impression = j;
        s.perturbation = dataset_perturbation(spec, i, j);
        SyntheticIdentity id = gen_identity(util::seed_mix(spec.seed, 0x1d, i), spec.size);
        s.image = render_impression(id, s.perturbation, spec.size);
    });
    return out;
}

namespace {
using json = nlohmann::ordered_json;

json perturbation_to_json(const Perturbation& p) {
    json j;
    j["affine"] = {p.affine.m[0][0], p.affine.m[0][1], p.affine.m[0][2],
                   p.affine.m[1][0], p.affine.m[1][1], p.affine.m[1][2]};
    j["occlusion_ratio"] = p.occlusion_ratio;
    j["noise_std"] = p.noise_std;
    j["contrast_gain"] = p.contrast_gain;
    j["contrast_bias"] = p.contrast_bias;
    j["seed"] = p.seed;
    return j;
}

Perturbation perturbation_from_json(const json& j) {
    Perturbation p;
    auto a = j.at("affine");
    p.affine.m[0][0] = a[0];
    p.affine.m[0][1] = a[1];
    p.affine.m[0][2] = a[2];
    p.affine.m[1][0] = a[3];
    p.affine.m[1][1] = a[4];
    p.affine.m[1][2] = a[5];
    p.occlusion_ratio = j.at("occlusion_ratio");
    p.noise_std = j.at("noise_std");
    p.contrast_gain = j.at("contrast_gain");
    p.contrast_bias = j.at("contrast_bias");
    p.seed = j.at("seed");
    return p;
}
}  // namespace

void save_dataset(const std::string& dir, const DatasetSpec& spec,
                  const std::vector<Sample>& samples, const std::string& format) {
    if (format != "pgm" && format != "png")
        throw std::invalid_argument("save_dataset: format must be pgm or png");
    std::filesystem::create_directories(dir);
    json manifest;
    manifest["kind"] = "afr-dataset";
    manifest["seed"] = spec.seed;
    manifest["identities"] = spec.identities;
    manifest["impressions"] = spec.impressions;
    manifest["size"] = spec.size;
    manifest["images"] = json::array();
    for (const auto& s : samples) {
        char name[64];
        std::snprintf(name, sizeof(name), "id_%03d_imp_%02d.%s", s.identity, s.impression,
                      format.c_str());
        io::write_image(dir + "/" + name, s.image);
        json entry;
        entry["identity"] = s.identity;
        entry["impression"] = s.impression;
        entry["file"] = name;
        entry["perturbation"] = perturbation_to_json(s.perturbation);
        manifest["images"].push_back(entry);
    }
    std::ofstream out(dir + "/manifest.json");
    out << manifest.dump(2) << "\n";
    if (!out) throw std::runtime_error("cannot write dataset manifest in " + dir);
}

DatasetOnDisk load_dataset(const std::string& dir) {
    std::ifstream in(dir + "/manifest.json");
    if (!in) throw std::runtime_error("no dataset manifest in " + dir);
    json manifest = json::parse(in);
    if (manifest.value("kind", "") != "afr-dataset")
        throw std::runtime_error(dir + ": not a dataset directory");
    DatasetOnDisk out;
    out.spec.seed = manifest.at("seed");
    out.spec.identities = manifest.at("identities");
    out.spec.impressions = manifest.at("impressions");
    out.spec.size = manifest.at("size");
    for (const auto& entry : manifest.at("images")) {
        Sample s;
        s.identity = entry.at("identity");
        s.impression = entry.at("impression");
        s.perturbation = perturbation_from_json(entry.at("perturbation"));
        s.image = io::read_image(dir + "/" + entry.at("file").get<std::string>());
        out.samples.push_back(std::move(s));
    }
    // identity-major order expected downstream
    std::sort(out.samples.begin(), out.samples.end(), [](const Sample& a, const Sample& b) {
        if (a.identity != b.identity) return a.identity < b.identity;
        return a.impression < b.impression;
    });
    return out;
}

}  // namespace afr::synth
