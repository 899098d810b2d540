#include "afr/matcher.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "afr/checkpoint.hpp"
#include "afr/util.hpp"

namespace afr::matcher {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

void MatchParams::validate() const {
    if (std::abs(w1 + w2 - 1.0) > 1e-12 || std::abs(w3 + w4 - 1.0) > 1e-12)
        throw std::invalid_argument("MatchParams: w1+w2 and w3+w4 must equal 1");
    // bands outside [-1, 1] are legal and simply never (or always) gate
    if (!(s_low <= s_high))
        throw std::invalid_argument("MatchParams: need s_low <= s_high");
    limits.validate();
}

MatchParams MatchParams::for_model(const model::ModelConfig& cfg) {
    MatchParams p;
    p.limits = geometry::TransformLimits::for_image_size(cfg.input_size);
    return p;
}

Extraction extract(model::AfrNet<float>& net, const Image& img, bool with_locals) {
    std::vector<const Image*> one{&img};
    return std::move(extract_batch(net, one, with_locals)[0]);
}

std::vector<Extraction> extract_batch(model::AfrNet<float>& net,
                                      const std::vector<const Image*>& imgs, bool with_locals) {
    const auto& cfg = net.config();
    const int S = cfg.input_size, D = cfg.embed_dim;
    const int Tn = cfg.grid * cfg.grid, C4 = cfg.local_dim;
    std::vector<Extraction> out(imgs.size());
    const size_t chunk = 32;
    for (size_t b = 0; b < imgs.size(); b += chunk) {
        size_t e = std::min(imgs.size(), b + chunk);
        std::vector<Image> canvases(e - b);
        std::vector<const Image*> ptrs(e - b);
        for (size_t i = b; i < e; ++i) {
            if (imgs[i]->empty()) throw std::invalid_argument("extract: empty image");
            canvases[i - b] = model::preprocess_to_canvas(*imgs[i], S);
            ptrs[i - b] = &canvases[i - b];
        }
        auto x = model::images_to_tensor<float>(ptrs, S);
        auto fwd = net.forward(x, false);
        for (size_t i = b; i < e; ++i) {
            size_t n = i - b;
            Extraction& ex = out[i];
            ex.canvas = std::move(canvases[n]);
            ex.emb.z_c.assign(fwd.z_c.data() + n * D, fwd.z_c.data() + (n + 1) * D);
            ex.emb.z_a.assign(fwd.z_a.data() + n * D, fwd.z_a.data() + (n + 1) * D);
            ex.align.scale = fwd.align.v[n * 4 + 0];
            ex.align.theta_deg = fwd.align.v[n * 4 + 1] * 180.0 / M_PI;
            ex.align.tx = fwd.align.v[n * 4 + 2];
            ex.align.ty = fwd.align.v[n * 4 + 3];
            if (with_locals) {
                ex.locals.grid_h = cfg.grid;
                ex.locals.grid_w = cfg.grid;
                ex.locals.dim = C4;
                ex.locals.data.assign(fwd.locals.data() + n * size_t(Tn) * C4,
                                      fwd.locals.data() + (n + 1) * size_t(Tn) * C4);
            }
        }
    }
    return out;
}

double global_score(const model::EmbeddingPair& e1, const model::EmbeddingPair& e2, double w1,
                    double w2) {
    if (e1.z_c.size() != e2.z_c.size() || e1.z_a.size() != e2.z_a.size())
        throw std::invalid_argument("global_score: embedding dimension mismatch");
    double dc = 0, da = 0;
    for (size_t i = 0; i < e1.z_c.size(); ++i) dc += double(e1.z_c[i]) * e2.z_c[i];
    for (size_t i = 0; i < e1.z_a.size(); ++i) da += double(e1.z_a[i]) * e2.z_a[i];
    return w1 * dc + w2 * da;
}

namespace {

uint64_t ransac_seed_from(const std::vector<geometry::Correspondence>& corr) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& c : corr) {
        int32_t ids[2] = {c.idx_a, c.idx_b};
        h = util::fnv1a(ids, sizeof(ids), h);
        h = util::fnv1a(&c.similarity, sizeof(c.similarity), h);
    }
    return h;
}

}  // namespace

MatchResult match_extracted(const Extraction& e1, const Extraction& e2,
                            model::AfrNet<float>& net, const MatchParams& p) {
    p.validate();
    MatchResult res;
    double s = global_score(e1.emb, e2.emb, p.w1, p.w2);
    res.global_score = s;
    res.score = s;
    if (!p.enable_realign || s < p.s_low || s > p.s_high) return res;
    res.realign_attempted = true;
    if (!e1.has_locals() || !e2.has_locals()) return res;

    const int patch = net.config().patch;
    geometry::DescriptorSet d1 = e1.locals.to_descriptor_set(patch);
    geometry::DescriptorSet d2 = e2.locals.to_descriptor_set(patch);
    auto corr = geometry::match_descriptors(d1, d2, p.descriptor_tau);
    res.n_correspondences = int(corr.size());
    if (int(corr.size()) < p.min_correspondences) return res;

    auto transform = geometry::estimate_affine(corr, d1.keypoints, d2.keypoints, p.ransac,
                                               ransac_seed_from(corr));
    if (!transform) return res;
    res.transform = transform;
    if (!geometry::transform_ok(*transform, p.limits)) return res;

    Image warped1 = geometry::warp_image(e1.canvas, *transform, 255);
    Mask fg1 = geometry::warp_mask(geometry::foreground_mask(e1.canvas), *transform);
    Mask fg2 = geometry::foreground_mask(e2.canvas);
    auto crops = geometry::overlap_masks(warped1, e2.canvas, fg1, fg2, 255,
                                         p.min_overlap_fraction);
    if (!crops) return res;

    std::vector<const Image*> pair{&crops->first, &crops->second};
    auto redone = extract_batch(net, pair, false);
    double s2 = global_score(redone[0].emb, redone[1].emb, p.w1, p.w2);
    res.refined_score = s2;
    res.score = p.w3 * s + p.w4 * s2;
    res.realign_applied = true;
    return res;
}

MatchResult match(const Image& i1, const Image& i2, model::AfrNet<float>& net,
                  const MatchParams& p) {
    std::vector<const Image*> imgs{&i1, &i2};
    auto ex = extract_batch(net, imgs, p.enable_realign);
    return match_extracted(ex[0], ex[1], net, p);
}

VerifyResult verify(const Image& i1, const Image& i2, model::AfrNet<float>& net,
                    const MatchParams& p, double threshold) {
    if (!(threshold >= -1.0 && threshold <= 1.0))
        throw std::invalid_argument("verify: threshold in [-1, 1]");
    VerifyResult v;
    v.result = match(i1, i2, net, p);
    v.accept = v.result.score >= threshold;  // ties accept
    return v;
}

// ---------------------------------------------------------------------------
// Templates

Template enroll(const Image& img, model::AfrNet<float>& net, const std::string& subject,
                const std::string& finger, bool with_locals) {
    Extraction ex = extract(net, img, with_locals);
    Template t;
    t.subject = subject;
    t.finger = finger;
    t.emb = std::move(ex.emb);
    t.has_locals = with_locals;
    if (with_locals) {
        t.locals = std::move(ex.locals);
        t.foreground = geometry::foreground_mask(ex.canvas);
    }
    t.model_hash = net.config().hash();
    return t;
}

namespace {

void put_u32(std::ostream& out, uint32_t v) {
    unsigned char b[4] = {uint8_t(v), uint8_t(v >> 8), uint8_t(v >> 16), uint8_t(v >> 24)};
    out.write(reinterpret_cast<char*>(b), 4);
}
void put_u64(std::ostream& out, uint64_t v) {
    put_u32(out, uint32_t(v));
    put_u32(out, uint32_t(v >> 32));
}
uint32_t get_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw std::runtime_error("truncated template file");
    return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}
uint64_t get_u64(std::istream& in) {
    uint64_t lo = get_u32(in);
    return lo | uint64_t(get_u32(in)) << 32;
}
void put_floats(std::ostream& out, const float* p, size_t n) {
    out.write(reinterpret_cast<const char*>(p), std::streamsize(n * 4));
}
void get_floats(std::istream& in, float* p, size_t n) {
    in.read(reinterpret_cast<char*>(p), std::streamsize(n * 4));
    if (!in) throw std::runtime_error("truncated template file");
}
void put_str(std::ostream& out, const std::string& s) {
    put_u32(out, uint32_t(s.size()));
    out.write(s.data(), std::streamsize(s.size()));
}
std::string get_str(std::istream& in) {
    uint32_t n = get_u32(in);
    std::string s(n, '\0');
    in.read(s.data(), n);
    if (!in) throw std::runtime_error("truncated template file");
    return s;
}

constexpr uint32_t kTemplateVersion = 1;
constexpr uint32_t kFlagLocals = 1;

}  // namespace

void save_template(const std::string& path, const Template& t) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write template " + path);
    out.write("AFRT", 4);
    put_u32(out, kTemplateVersion);
    put_u32(out, uint32_t(t.emb.z_c.size()));
    const int local_dim = t.has_locals ? t.locals.dim : 0;
    const int grid = t.has_locals ? t.locals.grid_h : 0;
    put_u32(out, uint32_t(local_dim));
    put_u32(out, uint32_t(grid));
    put_u32(out, t.has_locals ? kFlagLocals : 0);
    put_u64(out, t.model_hash);
    put_floats(out, t.emb.z_c.data(), t.emb.z_c.size());
    put_floats(out, t.emb.z_a.data(), t.emb.z_a.size());
    if (t.has_locals) {
        put_floats(out, t.locals.data.data(), t.locals.data.size());
        std::vector<float> fgf(t.foreground.on.size());
        for (size_t i = 0; i < fgf.size(); ++i) fgf[i] = t.foreground.on[i] ? 1.f : 0.f;
        put_floats(out, fgf.data(), fgf.size());
    }
    put_str(out, t.subject);
    put_str(out, t.finger);
    if (!out) throw std::runtime_error("short write: " + path);
}

Template load_template(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open template " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "AFRT", 4) != 0)
        throw std::runtime_error(path + ": not a template file");
    uint32_t version = get_u32(in);
    if (version != kTemplateVersion)
        throw std::runtime_error(path + ": unsupported template version");
    uint32_t embed_dim = get_u32(in);
    uint32_t local_dim = get_u32(in);
    uint32_t grid = get_u32(in);
    uint32_t flags = get_u32(in);
    Template t;
    t.model_hash = get_u64(in);
    t.emb.z_c.resize(embed_dim);
    t.emb.z_a.resize(embed_dim);
    get_floats(in, t.emb.z_c.data(), embed_dim);
    get_floats(in, t.emb.z_a.data(), embed_dim);
    if (flags & kFlagLocals) {
        t.has_locals = true;
        t.locals.grid_h = t.locals.grid_w = int(grid);
        t.locals.dim = int(local_dim);
        t.locals.data.resize(size_t(grid) * grid * local_dim);
        get_floats(in, t.locals.data.data(), t.locals.data.size());
        const int side = int(grid) * 16;
        t.foreground = Mask(side, side);
        std::vector<float> fgf(t.foreground.on.size());
        get_floats(in, fgf.data(), fgf.size());
        for (size_t i = 0; i < fgf.size(); ++i) t.foreground.on[i] = fgf[i] > 0.5f ? 1 : 0;
    }
    t.subject = get_str(in);
    t.finger = get_str(in);
    return t;
}

void save_gallery(const std::string& dir, const Gallery& g) {
    fs::create_directories(dir);
    json manifest;
    char hex[32];
    std::snprintf(hex, sizeof(hex), "%016llx", (unsigned long long)g.model_hash);
    manifest["model_hash"] = hex;
    manifest["templates"] = json::array();
    for (size_t i = 0; i < g.templates.size(); ++i) {
        char name[64];
        std::snprintf(name, sizeof(name), "tpl_%05zu.aft", i);
        save_template(dir + "/" + name, g.templates[i]);
        json entry;
        entry["subject"] = g.templates[i].subject;
        entry["finger"] = g.templates[i].finger;
        entry["file"] = name;
        manifest["templates"].push_back(entry);
    }
    std::ofstream out(dir + "/manifest.json");
    out << manifest.dump(2) << "\n";
    if (!out) throw std::runtime_error("cannot write gallery manifest in " + dir);
}

Gallery load_gallery(const std::string& dir) {
    std::ifstream in(dir + "/manifest.json");
    if (!in) throw std::runtime_error("no gallery manifest in " + dir);
    json manifest = json::parse(in);
    Gallery g;
    g.model_hash = std::stoull(manifest.at("model_hash").get<std::string>(), nullptr, 16);
    for (const auto& entry : manifest.at("templates")) {
        Template t = load_template(dir + "/" + entry.at("file").get<std::string>());
        if (t.model_hash != g.model_hash)
            throw std::runtime_error("gallery template model hash mismatch in " + dir);
        g.templates.push_back(std::move(t));
    }
    return g;
}

// ---------------------------------------------------------------------------
// 1:N search

std::vector<SearchHit> search_extracted(const Extraction& probe, const Gallery& gallery,
                                        model::AfrNet<float>& net, const MatchParams& p, int k) {
    p.validate();
    if (gallery.templates.empty()) throw std::invalid_argument("search: empty gallery");
    if (gallery.model_hash != net.config().hash())
        throw std::runtime_error("search: gallery was enrolled with a different model");
    const int n = int(gallery.templates.size());

    std::vector<double> scores(n);
    std::vector<char> realigned(n, 0);
    util::parallel_for(n, [&](int64_t i) {
        scores[i] = global_score(probe.emb, gallery.templates[i].emb, p.w1, p.w2);
    });

    if (p.enable_realign && probe.has_locals()) {
        const int patch = net.config().patch;
        geometry::DescriptorSet dp = probe.locals.to_descriptor_set(patch);
        Mask probe_fg = geometry::foreground_mask(probe.canvas);
        for (int i = 0; i < n; ++i) {  // sequential: each refit re-embeds
            const Template& t = gallery.templates[i];
            double s = scores[i];
            if (s < p.s_low || s > p.s_high || !t.has_locals) continue;
            geometry::DescriptorSet dt = t.locals.to_descriptor_set(patch);
            auto corr = geometry::match_descriptors(dp, dt, p.descriptor_tau);
            if (int(corr.size()) < p.min_correspondences) continue;
            auto transform = geometry::estimate_affine(corr, dp.keypoints, dt.keypoints,
                                                       p.ransac, ransac_seed_from(corr));
            if (!transform || !geometry::transform_ok(*transform, p.limits)) continue;
            Image warped = geometry::warp_image(probe.canvas, *transform, 255);
            Mask wfg = geometry::warp_mask(probe_fg, *transform);
            // gallery image is unavailable: mask the warped probe against the
            // template's stored foreground and re-embed the probe side only
            auto crops = geometry::overlap_masks(warped, warped, wfg, t.foreground, 255,
                                                 p.min_overlap_fraction);
            if (!crops) continue;
            std::vector<const Image*> one{&crops->first};
            auto redone = extract_batch(net, one, false);
            double s2 = global_score(redone[0].emb, t.emb, p.w1, p.w2);
            scores[i] = p.w3 * s + p.w4 * s2;
            realigned[i] = 1;
        }
    }

    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    std::vector<SearchHit> hits;
    const int kk = std::min(k, n);
    for (int r = 0; r < kk; ++r) {
        const Template& t = gallery.templates[order[r]];
        hits.push_back({order[r], t.subject, t.finger, scores[order[r]], realigned[order[r]] != 0});
    }
    return hits;
}

std::vector<SearchHit> search(const Image& probe, const Gallery& gallery,
                              model::AfrNet<float>& net, const MatchParams& p, int k) {
    Extraction ex = extract(net, probe, p.enable_realign);
    return search_extracted(ex, gallery, net, p, k);
}

}  // namespace afr::matcher
