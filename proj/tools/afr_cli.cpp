// Command-line front end: dataset generation, training, verification,
// enrollment, 1:N search, evaluation protocols, saliency scans, robustness
// sweeps. Exit codes: 0 success/accept, 1 reject (verify), 2 usage or config
// error, 3 runtime failure.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "afr/checkpoint.hpp"
#include "afr/eval.hpp"
#include "afr/matcher.hpp"
#include "afr/synth.hpp"
#include "afr/train.hpp"
#include "afr/util.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace afr;

namespace {

constexpr int kExitAccept = 0;
constexpr int kExitReject = 1;
constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

std::string hash_hex(uint64_t h) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx", (unsigned long long)h);
    return buf;
}

void write_manifest(const std::string& dir, json manifest) {
    std::ofstream out(dir + "/manifest.json");
    out << manifest.dump(2) << "\n";
    if (!out) throw std::runtime_error("cannot write manifest in " + dir);
}

model::ModelConfig model_config_from(const util::KeyValueConfig& kv) {
    std::string preset = kv.get("model", "preset", "tiny");
    model::ModelConfig cfg;
    if (preset == "tiny") cfg = model::ModelConfig::tiny();
    else if (preset == "paper") cfg = model::ModelConfig::paper();
    else if (preset == "micro") cfg = model::ModelConfig::micro();
    else throw std::invalid_argument("unknown model preset: " + preset);
    cfg.input_size = int(kv.get_int("model", "input_size", cfg.input_size));
    cfg.attn_depth = int(kv.get_int("model", "attn_depth", cfg.attn_depth));
    cfg.attn_heads = int(kv.get_int("model", "attn_heads", cfg.attn_heads));
    cfg.embed_dim = int(kv.get_int("model", "embed_dim", cfg.embed_dim));
    cfg.embed_hidden = int(kv.get_int("model", "embed_hidden", cfg.embed_hidden));
    cfg.grid = int(kv.get_int("model", "grid", cfg.grid));
    cfg.arcface.margin = kv.get_double("model", "arc_margin", cfg.arcface.margin);
    cfg.arcface.scale = kv.get_double("model", "arc_scale", cfg.arcface.scale);
    return cfg;
}

matcher::MatchParams match_params_from(const util::KeyValueConfig& kv,
                                       const model::ModelConfig& cfg) {
    matcher::MatchParams p = matcher::MatchParams::for_model(cfg);
    p.w1 = kv.get_double("match", "w1", p.w1);
    p.w2 = kv.get_double("match", "w2", 1.0 - p.w1);
    p.w3 = kv.get_double("match", "w3", p.w3);
    p.w4 = kv.get_double("match", "w4", 1.0 - p.w3);
    p.s_low = kv.get_double("match", "s_low", p.s_low);
    p.s_high = kv.get_double("match", "s_high", p.s_high);
    p.descriptor_tau = kv.get_double("match", "descriptor_tau", p.descriptor_tau);
    p.min_correspondences =
        int(kv.get_int("match", "min_correspondences", p.min_correspondences));
    p.ransac.iters = int(kv.get_int("match", "ransac_iters", p.ransac.iters));
    p.ransac.inlier_px = kv.get_double("match", "ransac_inlier_px", p.ransac.inlier_px);
    p.ransac.min_inliers = int(kv.get_int("match", "ransac_min_inliers", p.ransac.min_inliers));
    p.limits.scale_min = kv.get_double("match", "scale_min", p.limits.scale_min);
    p.limits.scale_max = kv.get_double("match", "scale_max", p.limits.scale_max);
    p.limits.max_rotation_deg =
        kv.get_double("match", "max_rotation", p.limits.max_rotation_deg);
    p.limits.max_translation_px =
        kv.get_double("match", "max_translation", p.limits.max_translation_px);
    p.min_overlap_fraction =
        kv.get_double("match", "min_overlap_fraction", p.min_overlap_fraction);
    p.decision_threshold = kv.get_double("match", "threshold", p.decision_threshold);
    return p;
}

json match_params_json(const matcher::MatchParams& p) {
    json j;
    j["w1"] = p.w1;
    j["w2"] = p.w2;
    j["w3"] = p.w3;
    j["w4"] = p.w4;
    j["s_low"] = p.s_low;
    j["s_high"] = p.s_high;
    j["descriptor_tau"] = p.descriptor_tau;
    j["min_correspondences"] = p.min_correspondences;
    j["ransac_iters"] = p.ransac.iters;
    j["ransac_inlier_px"] = p.ransac.inlier_px;
    j["ransac_min_inliers"] = p.ransac.min_inliers;
    j["scale_min"] = p.limits.scale_min;
    j["scale_max"] = p.limits.scale_max;
    j["max_rotation"] = p.limits.max_rotation_deg;
    j["max_translation"] = p.limits.max_translation_px;
    j["min_overlap_fraction"] = p.min_overlap_fraction;
    j["enable_realign"] = p.enable_realign;
    return j;
}

struct PairImages {
    std::vector<std::pair<const Image*, const Image*>> genuine, imposter;
};

PairImages build_pairs(const synth::DatasetOnDisk& data, const eval::PairLists& lists) {
    const int imps = data.spec.impressions;
    auto img = [&](const eval::PairIdx& p, bool first) -> const Image* {
        int f = first ? p.finger_a : p.finger_b;
        int i = first ? p.imp_a : p.imp_b;
        return &data.samples[size_t(f) * imps + i].image;
    };
    PairImages out;
    for (const auto& p : lists.genuine) out.genuine.emplace_back(img(p, true), img(p, false));
    for (const auto& p : lists.imposter) out.imposter.emplace_back(img(p, true), img(p, false));
    return out;
}

// ---------------------------------------------------------------------------

int cmd_gen(int identities, int impressions, uint64_t seed, const std::string& out,
            int size, const std::string& format) {
    if (identities < 1 || impressions < 1) {
        std::cerr << "gen: --identities and --impressions must be >= 1\n";
        return kExitUsage;
    }
    synth::DatasetSpec spec{identities, impressions, seed, size};
    auto samples = synth::render_dataset(spec);
    try {
        synth::save_dataset(out, spec, samples, format);
    } catch (const std::exception& e) {
        std::cerr << "gen: " << e.what() << "\n";
        return kExitUsage;  // unwritable output
    }
    std::cout << "wrote " << samples.size() << " images to " << out << "\n";
    return 0;
}

int cmd_train(const std::string& data_dir, const std::string& config_path,
              const std::string& out, int epochs_override, bool resume) {
    util::KeyValueConfig kv;
    if (!config_path.empty()) kv = util::KeyValueConfig::parse_file(config_path);
    model::ModelConfig mcfg = model_config_from(kv);

    train::TrainConfig tcfg;
    tcfg.identities = int(kv.get_int("train", "identities", tcfg.identities));
    tcfg.impressions_per_id = int(kv.get_int("train", "impressions", tcfg.impressions_per_id));
    tcfg.epochs = int(kv.get_int("train", "epochs", tcfg.epochs));
    tcfg.batch = int(kv.get_int("train", "batch", tcfg.batch));
    tcfg.lr0 = kv.get_double("train", "lr0", tcfg.lr0);
    tcfg.lr_min = kv.get_double("train", "lr_min", tcfg.lr_min);
    tcfg.power = kv.get_double("train", "power", tcfg.power);
    tcfg.weight_decay = kv.get_double("train", "weight_decay", tcfg.weight_decay);
    tcfg.seed = uint64_t(kv.get_int("train", "seed", int64_t(tcfg.seed)));
    tcfg.early_stop_val_tar =
        kv.get_double("train", "early_stop_val_tar", tcfg.early_stop_val_tar);
    if (epochs_override > 0) tcfg.epochs = epochs_override;

    std::vector<synth::Sample> samples;
    const std::vector<synth::Sample>* data_ptr = nullptr;
    if (!data_dir.empty()) {
        auto data = synth::load_dataset(data_dir);
        tcfg.identities = data.spec.identities;
        tcfg.impressions_per_id = data.spec.impressions;
        tcfg.seed = kv.has("train", "seed") ? tcfg.seed : data.spec.seed;
        samples = std::move(data.samples);
        data_ptr = &samples;
    }

    auto result = train::train(tcfg, mcfg, out, resume, &std::cerr, data_ptr);

    mcfg.num_classes = tcfg.identities;
    json manifest;
    manifest["command"] = "train";
    manifest["config_hash"] = hash_hex(mcfg.hash());
    manifest["seed"] = tcfg.seed;
    manifest["train"] = {{"identities", tcfg.identities},
                         {"impressions", tcfg.impressions_per_id},
                         {"epochs", tcfg.epochs},
                         {"batch", tcfg.batch},
                         {"lr0", tcfg.lr0},
                         {"lr_min", tcfg.lr_min},
                         {"power", tcfg.power},
                         {"weight_decay", tcfg.weight_decay},
                         {"arc_margin", mcfg.arcface.margin},
                         {"arc_scale", mcfg.arcface.scale}};
    manifest["best_val_tar"] = result.best_val_tar;
    manifest["best_epoch"] = result.best_epoch;
    manifest["files"] = {{"best", "best.afrn"}, {"last", "last.afrn"},
                         {"metrics", "metrics.csv"}, {"state", "state.afrs"}};
    write_manifest(out, manifest);
    std::cout << "best val_tar " << result.best_val_tar << " (epoch " << result.best_epoch
              << "), checkpoints in " << out << "\n";
    return 0;
}

int cmd_verify(const std::string& model_path, const std::string& img1_path,
               const std::string& img2_path, double threshold, bool no_realign,
               bool json_output) {
    auto ckpt = model::load_checkpoint(model_path);
    matcher::MatchParams p = matcher::MatchParams::for_model(ckpt.net->config());
    p.enable_realign = !no_realign;
    Image i1 = io::read_image(img1_path);
    Image i2 = io::read_image(img2_path);
    auto v = matcher::verify(i1, i2, *ckpt.net, p, threshold);
    if (json_output) {
        json j;
        j["score"] = v.result.score;
        j["global_score"] = v.result.global_score;
        j["threshold"] = threshold;
        j["decision"] = v.accept ? "accept" : "reject";
        j["realign_attempted"] = v.result.realign_attempted;
        j["realign_applied"] = v.result.realign_applied;
        j["n_correspondences"] = v.result.n_correspondences;
        if (v.result.refined_score) j["refined_score"] = *v.result.refined_score;
        if (v.result.transform) {
            const auto& m = v.result.transform->m;
            j["transform"] = {m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2]};
        }
        std::cout << j.dump(2) << "\n";
    } else {
        std::cout << "score " << util::fmt_double(v.result.score) << " threshold "
                  << util::fmt_double(threshold) << " -> "
                  << (v.accept ? "accept" : "reject") << "\n";
        if (v.result.realign_applied)
            std::cout << "realigned: " << v.result.n_correspondences
                      << " correspondences, refined score "
                      << util::fmt_double(*v.result.refined_score) << "\n";
    }
    return v.accept ? kExitAccept : kExitReject;
}

int cmd_enroll(const std::string& model_path, const std::string& gallery_dir,
               const std::string& img_path, const std::string& subject,
               const std::string& finger, const std::string& data_dir, int impression,
               bool no_locals) {
    auto ckpt = model::load_checkpoint(model_path);
    matcher::Gallery gallery;
    if (fs::exists(gallery_dir + "/manifest.json")) {
        gallery = matcher::load_gallery(gallery_dir);
        if (gallery.model_hash != ckpt.net->config().hash())
            throw std::runtime_error("gallery belongs to a different model");
    } else {
        gallery.model_hash = ckpt.net->config().hash();
    }
    int added = 0;
    if (!img_path.empty()) {
        Image img = io::read_image(img_path);
        gallery.templates.push_back(
            matcher::enroll(img, *ckpt.net, subject, finger, !no_locals));
        ++added;
    }
    if (!data_dir.empty()) {
        auto data = synth::load_dataset(data_dir);
        for (const auto& s : data.samples) {
            if (s.impression != impression) continue;
            char subj[32], fing[32];
            std::snprintf(subj, sizeof(subj), "id_%03d", s.identity);
            std::snprintf(fing, sizeof(fing), "imp_%02d", s.impression);
            gallery.templates.push_back(
                matcher::enroll(s.image, *ckpt.net, subj, fing, !no_locals));
            ++added;
        }
    }
    if (added == 0) {
        std::cerr << "enroll: nothing to enroll (need --img or --data)\n";
        return kExitUsage;
    }
    matcher::save_gallery(gallery_dir, gallery);
    std::cout << "enrolled " << added << " template(s); gallery size "
              << gallery.templates.size() << "\n";
    return 0;
}

int cmd_search(const std::string& model_path, const std::string& gallery_dir,
               const std::string& probe_path, int k, const std::string& out,
               bool no_realign) {
    auto ckpt = model::load_checkpoint(model_path);
    matcher::MatchParams p = matcher::MatchParams::for_model(ckpt.net->config());
    p.enable_realign = !no_realign;
    auto gallery = matcher::load_gallery(gallery_dir);
    Image probe = io::read_image(probe_path);
    auto hits = matcher::search(probe, gallery, *ckpt.net, p, k);

    std::cout << "rank subject     finger     score        realigned\n";
    for (size_t r = 0; r < hits.size(); ++r) {
        char line[160];
        std::snprintf(line, sizeof(line), "%-4zu %-11s %-10s %-12.6f %s", r + 1,
                      hits[r].subject.c_str(), hits[r].finger.c_str(), hits[r].score,
                      hits[r].realigned ? "yes" : "no");
        std::cout << line << "\n";
    }
    if (!out.empty()) {
        fs::create_directories(out);
        std::ofstream csv(out + "/search.csv");
        csv << "rank,subject,finger,score,realigned\n";
        for (size_t r = 0; r < hits.size(); ++r)
            csv << (r + 1) << "," << hits[r].subject << "," << hits[r].finger << ","
                << util::fmt_double(hits[r].score) << "," << (hits[r].realigned ? 1 : 0)
                << "\n";
        json manifest;
        manifest["command"] = "search";
        manifest["config_hash"] = hash_hex(ckpt.net->config().hash());
        manifest["probe"] = probe_path;
        manifest["gallery"] = gallery_dir;
        manifest["k"] = k;
        manifest["match_params"] = match_params_json(p);
        manifest["files"] = {{"results", "search.csv"}};
        write_manifest(out, manifest);
    }
    return 0;
}

int cmd_eval(const std::string& model_path, const std::string& data_dir,
             const std::string& protocol, const std::string& out, bool no_realign,
             bool all_imposters, bool with_cmc, int bins, std::vector<double> far_targets) {
    if (protocol != "fvc" && protocol != "full") {
        std::cerr << "eval: --protocol must be fvc or full\n";
        return kExitUsage;
    }
    auto ckpt = model::load_checkpoint(model_path);
    matcher::MatchParams p = matcher::MatchParams::for_model(ckpt.net->config());
    p.enable_realign = !no_realign;
    auto data = synth::load_dataset(data_dir);

    eval::PairLists lists = eval::fvc_pairs(data.spec.identities, data.spec.impressions);
    if (protocol == "full" && all_imposters) {
        lists.imposter.clear();
        for (int f = 0; f < data.spec.identities; ++f)
            for (int g = f + 1; g < data.spec.identities; ++g)
                for (int a = 0; a < data.spec.impressions; ++a)
                    for (int b = 0; b < data.spec.impressions; ++b)
                        lists.imposter.push_back({f, a, g, b});
    }
    PairImages pairs = build_pairs(data, lists);
    auto stages = eval::score_pairs(pairs.genuine, pairs.imposter, *ckpt.net, p);

    fs::create_directories(out);
    eval::write_roc_csv(out + "/roc.csv", eval::roc(stages.fused));
    std::vector<std::pair<std::string, eval::Histogram>> hists;
    hists.emplace_back("original", eval::histogram(stages.original, bins));
    if (!stages.refined.genuine.empty() || !stages.refined.imposter.empty())
        hists.emplace_back("refined", eval::histogram(stages.refined, bins));
    hists.emplace_back("fused", eval::histogram(stages.fused, bins));
    eval::write_histograms_csv(out + "/histograms.csv", hists);

    std::vector<matcher::MatchResult> all_results = stages.genuine_results;
    all_results.insert(all_results.end(), stages.imposter_results.begin(),
                       stages.imposter_results.end());
    double realign_rate = eval::measure_realign_rate(all_results);

    json manifest;
    manifest["command"] = "eval";
    manifest["config_hash"] = hash_hex(ckpt.net->config().hash());
    manifest["protocol"] = protocol;
    manifest["dataset_seed"] = data.spec.seed;
    manifest["genuine_pairs"] = lists.genuine.size();
    manifest["imposter_pairs"] = lists.imposter.size();
    manifest["realign_rate"] = realign_rate;
    manifest["match_params"] = match_params_json(p);
    json tars = json::array();
    for (double far : far_targets) {
        auto t = eval::tar_at_far(stages.fused, far);
        json e;
        e["far"] = far;
        e["tar"] = t.tar;
        e["threshold"] = t.threshold;
        e["resolution_ok"] = t.resolution_ok;
        tars.push_back(e);
        std::cout << "TAR @ FAR=" << far << ": " << t.tar
                  << (t.resolution_ok ? "" : " (FAR resolution insufficient)") << "\n";
    }
    manifest["tar_at_far"] = tars;
    manifest["files"] = {{"roc", "roc.csv"}, {"histograms", "histograms.csv"}};

    if (with_cmc) {
        // closed-set identification: first impressions enroll the gallery,
        // every later impression probes it
        matcher::Gallery gallery;
        gallery.model_hash = ckpt.net->config().hash();
        for (int f = 0; f < data.spec.identities; ++f) {
            char subj[32];
            std::snprintf(subj, sizeof(subj), "id_%03d", f);
            gallery.templates.push_back(matcher::enroll(
                data.samples[size_t(f) * data.spec.impressions].image, *ckpt.net, subj,
                "imp_00", true));
        }
        std::vector<std::vector<std::string>> rankings;
        std::vector<std::string> mates;
        for (int f = 0; f < data.spec.identities; ++f) {
            for (int i = 1; i < data.spec.impressions; ++i) {
                auto hits =
                    matcher::search(data.samples[size_t(f) * data.spec.impressions + i].image,
                                    gallery, *ckpt.net, p, data.spec.identities);
                std::vector<std::string> ranked;
                for (const auto& hit : hits) ranked.push_back(hit.subject);
                rankings.push_back(std::move(ranked));
                char subj[32];
                std::snprintf(subj, sizeof(subj), "id_%03d", f);
                mates.push_back(subj);
            }
        }
        auto acc = eval::cmc(rankings, mates, data.spec.identities);
        eval::write_cmc_csv(out + "/cmc.csv", acc);
        manifest["rank1_accuracy"] = acc.front();
        manifest["files"]["cmc"] = "cmc.csv";
        std::cout << "rank-1 identification accuracy " << acc.front() << "\n";
    }
    write_manifest(out, manifest);
    std::cout << "realign rate " << realign_rate << "; artifacts in " << out << "\n";
    return 0;
}

int cmd_saliency(const std::string& model_path, const std::string& img1_path,
                 const std::string& img2_path, const std::string& out, bool no_realign) {
    auto ckpt = model::load_checkpoint(model_path);
    matcher::MatchParams p = matcher::MatchParams::for_model(ckpt.net->config());
    p.enable_realign = !no_realign;
    Image i1 = io::read_image(img1_path);
    Image i2 = io::read_image(img2_path);
    auto res = eval::saliency_map(i1, i2, *ckpt.net, p);

    fs::create_directories(out);
    auto dump = [&](const std::string& name, const std::vector<double>& heat) {
        std::ofstream csv(out + "/" + name);
        csv << "row,col,score\n";
        for (int r = 0; r < res.grid; ++r)
            for (int c = 0; c < res.grid; ++c)
                csv << r << "," << c << ","
                    << util::fmt_double(heat[size_t(r) * res.grid + c]) << "\n";
    };
    dump("saliency_1.csv", res.heat_1);
    dump("saliency_2.csv", res.heat_2);
    json manifest;
    manifest["command"] = "saliency";
    manifest["config_hash"] = hash_hex(ckpt.net->config().hash());
    manifest["grid"] = res.grid;
    manifest["base_score"] = res.base_score;
    manifest["files"] = {{"image1_scan", "saliency_1.csv"}, {"image2_scan", "saliency_2.csv"}};
    write_manifest(out, manifest);
    std::cout << "base score " << res.base_score << "; " << res.grid << "x" << res.grid
              << " heatmaps in " << out << "\n";
    return 0;
}

int cmd_robustness(const std::string& model_path, const std::string& data_dir,
                   const std::string& mode_str, const std::string& out,
                   std::vector<double> ratios, int repeats, uint64_t seed, int max_genuine,
                   int max_imposter, double far_target, bool no_realign) {
    eval::PerturbMode mode;
    if (mode_str == "occlusion") mode = eval::PerturbMode::Occlusion;
    else if (mode_str == "affine") mode = eval::PerturbMode::PartialAffine;
    else {
        std::cerr << "robustness: --mode must be occlusion or affine\n";
        return kExitUsage;
    }
    auto ckpt = model::load_checkpoint(model_path);
    matcher::MatchParams p = matcher::MatchParams::for_model(ckpt.net->config());
    p.enable_realign = !no_realign;
    auto data = synth::load_dataset(data_dir);
    eval::PairLists lists = eval::fvc_pairs(data.spec.identities, data.spec.impressions);
    if (max_genuine > 0 && int(lists.genuine.size()) > max_genuine)
        lists.genuine.resize(max_genuine);
    if (max_imposter > 0 && int(lists.imposter.size()) > max_imposter)
        lists.imposter.resize(max_imposter);
    PairImages pairs = build_pairs(data, lists);

    auto rows = eval::robustness_sweep(pairs.genuine, pairs.imposter, *ckpt.net, p, ratios,
                                       repeats, mode, seed, far_target);
    fs::create_directories(out);
    {
        std::ofstream csv(out + "/robustness.csv");
        csv << "ratio,mean_tar,std_tar\n";
        for (const auto& r : rows)
            csv << util::fmt_double(r.ratio) << "," << util::fmt_double(r.mean_tar) << ","
                << util::fmt_double(r.std_tar) << "\n";
    }
    {
        std::ofstream csv(out + "/robustness_runs.csv");
        csv << "ratio,repeat,tar\n";
        for (const auto& r : rows)
            for (size_t i = 0; i < r.run_tars.size(); ++i)
                csv << util::fmt_double(r.ratio) << "," << i << ","
                    << util::fmt_double(r.run_tars[i]) << "\n";
    }
    json manifest;
    manifest["command"] = "robustness";
    manifest["config_hash"] = hash_hex(ckpt.net->config().hash());
    manifest["mode"] = mode_str;
    manifest["seed"] = seed;
    manifest["far_target"] = far_target;
    manifest["ratios"] = ratios;
    manifest["repeats"] = repeats;
    manifest["genuine_pairs"] = lists.genuine.size();
    manifest["imposter_pairs"] = lists.imposter.size();
    manifest["files"] = {{"summary", "robustness.csv"}, {"runs", "robustness_runs.csv"}};
    write_manifest(out, manifest);
    for (const auto& r : rows)
        std::cout << "ratio " << r.ratio << ": mean TAR " << r.mean_tar << " (std "
                  << r.std_tar << ")\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"afrnet: dual-head fingerprint recognition engine"};
    app.require_subcommand(1);
    int threads = 0;
    app.add_option("--threads", threads, "cap for data-parallel sections (env AFR_THREADS)");

    // gen
    auto* gen = app.add_subcommand("gen", "generate a synthetic fingerprint dataset");
    int g_ids = 50, g_imps = 8, g_size = 224;
    uint64_t g_seed = 1;
    std::string g_out, g_format = "pgm";
    gen->add_option("--identities", g_ids);
    gen->add_option("--impressions", g_imps);
    gen->add_option("--seed", g_seed);
    gen->add_option("--size", g_size);
    gen->add_option("--format", g_format)->check(CLI::IsMember({"pgm", "png"}));
    gen->add_option("--out", g_out)->required();

    // train
    auto* tr = app.add_subcommand("train", "train on a synthetic dataset");
    std::string t_data, t_config, t_out;
    int t_epochs = 0;
    bool t_resume = false;
    tr->add_option("--data", t_data, "dataset directory (default: render from config)");
    tr->add_option("--config", t_config, "key = value config file");
    tr->add_option("--epochs", t_epochs, "override epoch count");
    tr->add_flag("--resume", t_resume, "resume from the last epoch checkpoint");
    tr->add_option("--out", t_out)->required();

    // verify
    auto* ve = app.add_subcommand("verify", "1:1 comparison of two fingerprint images");
    std::string v_model, v_img1, v_img2;
    double v_threshold = 0.36;
    bool v_norealign = false, v_json = false;
    ve->add_option("--model", v_model)->required();
    ve->add_option("--img1", v_img1)->required();
    ve->add_option("--img2", v_img2)->required();
    ve->add_option("--threshold", v_threshold);
    ve->add_flag("--no-realign", v_norealign);
    ve->add_flag("--json", v_json);

    // enroll
    auto* en = app.add_subcommand("enroll", "add templates to a gallery");
    std::string e_model, e_gallery, e_img, e_subject, e_finger = "0", e_data;
    int e_impression = 0;
    bool e_nolocals = false;
    en->add_option("--model", e_model)->required();
    en->add_option("--gallery", e_gallery)->required();
    en->add_option("--img", e_img);
    en->add_option("--subject", e_subject);
    en->add_option("--finger", e_finger);
    en->add_option("--data", e_data, "dataset directory for bulk enrollment");
    en->add_option("--impression", e_impression, "impression index for bulk enrollment");
    en->add_flag("--no-locals", e_nolocals);

    // search
    auto* se = app.add_subcommand("search", "1:N identification against a gallery");
    std::string s_model, s_gallery, s_probe, s_out;
    int s_k = 10;
    bool s_norealign = false;
    se->add_option("--model", s_model)->required();
    se->add_option("--gallery", s_gallery)->required();
    se->add_option("--probe", s_probe)->required();
    se->add_option("-k,--top-k", s_k);
    se->add_option("--out", s_out);
    se->add_flag("--no-realign", s_norealign);

    // eval
    auto* ev = app.add_subcommand("eval", "verification metrics over a dataset");
    std::string ev_model, ev_data, ev_protocol = "fvc", ev_out;
    bool ev_norealign = false, ev_allimp = false, ev_cmc = false;
    int ev_bins = 50;
    std::vector<double> ev_fars{0.001, 0.0001};
    ev->add_option("--model", ev_model)->required();
    ev->add_option("--data", ev_data)->required();
    ev->add_option("--protocol", ev_protocol)->check(CLI::IsMember({"fvc", "full"}));
    ev->add_option("--out", ev_out)->required();
    ev->add_option("--far", ev_fars);
    ev->add_option("--bins", ev_bins);
    ev->add_flag("--no-realign", ev_norealign);
    ev->add_flag("--all-imposters", ev_allimp);
    ev->add_flag("--cmc", ev_cmc, "also run closed-set identification and write cmc.csv");

    // saliency
    auto* sa = app.add_subcommand("saliency", "patch-occlusion saliency scan of a pair");
    std::string sa_model, sa_img1, sa_img2, sa_out;
    bool sa_norealign = false;
    sa->add_option("--model", sa_model)->required();
    sa->add_option("--img1", sa_img1)->required();
    sa->add_option("--img2", sa_img2)->required();
    sa->add_option("--out", sa_out)->required();
    sa->add_flag("--no-realign", sa_norealign);

    // robustness
    auto* ro = app.add_subcommand("robustness", "TAR under occlusion / partial-affine sweeps");
    std::string r_model, r_data, r_mode = "occlusion", r_out;
    std::vector<double> r_ratios{0.1, 0.2, 0.3, 0.4, 0.5};
    int r_repeats = 5, r_maxgen = 200, r_maximp = 300;
    uint64_t r_seed = 1;
    double r_far = 0.001;
    bool r_norealign = false;
    ro->add_option("--model", r_model)->required();
    ro->add_option("--data", r_data)->required();
    ro->add_option("--mode", r_mode)->check(CLI::IsMember({"occlusion", "affine"}));
    ro->add_option("--out", r_out)->required();
    ro->add_option("--ratios", r_ratios);
    ro->add_option("--repeats", r_repeats);
    ro->add_option("--seed", r_seed);
    ro->add_option("--max-genuine", r_maxgen);
    ro->add_option("--max-imposter", r_maximp);
    ro->add_option("--far", r_far);
    ro->add_flag("--no-realign", r_norealign);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    }

    if (threads > 0) util::set_threads(threads);

    try {
        if (gen->parsed())
            return cmd_gen(g_ids, g_imps, g_seed, g_out, g_size, g_format);
        if (tr->parsed()) return cmd_train(t_data, t_config, t_out, t_epochs, t_resume);
        if (ve->parsed())
            return cmd_verify(v_model, v_img1, v_img2, v_threshold, v_norealign, v_json);
        if (en->parsed())
            return cmd_enroll(e_model, e_gallery, e_img, e_subject, e_finger, e_data,
                              e_impression, e_nolocals);
        if (se->parsed())
            return cmd_search(s_model, s_gallery, s_probe, s_k, s_out, s_norealign);
        if (ev->parsed())
            return cmd_eval(ev_model, ev_data, ev_protocol, ev_out, ev_norealign, ev_allimp,
                            ev_cmc, ev_bins, ev_fars);
        if (sa->parsed())
            return cmd_saliency(sa_model, sa_img1, sa_img2, sa_out, sa_norealign);
        if (ro->parsed())
            return cmd_robustness(r_model, r_data, r_mode, r_out, r_ratios, r_repeats, r_seed,
                                  r_maxgen, r_maximp, r_far, r_norealign);
    } catch (const train::DivergenceError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitUsage;
}
