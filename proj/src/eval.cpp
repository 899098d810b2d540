#include "afr/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "afr/util.hpp"

namespace afr::eval {

std::vector<RocPoint> roc(const ScoreSet& scores) {
    if (scores.genuine.empty() || scores.imposter.empty())
        throw std::invalid_argument("roc: both genuine and imposter scores required");
    std::vector<double> gen = scores.genuine, imp = scores.imposter;
    std::sort(gen.begin(), gen.end());
    std::sort(imp.begin(), imp.end());
    std::set<double> thresholds(gen.begin(), gen.end());
    thresholds.insert(imp.begin(), imp.end());

    auto frac_at_or_above = [](const std::vector<double>& v, double t) {
        auto it = std::lower_bound(v.begin(), v.end(), t);
        return double(v.end() - it) / double(v.size());
    };
    std::vector<RocPoint> points;
    for (double t : thresholds)
        points.push_back({frac_at_or_above(imp, t), frac_at_or_above(gen, t), t});
    std::sort(points.begin(), points.end(), [](const RocPoint& a, const RocPoint& b) {
        if (a.far != b.far) return a.far < b.far;
        return a.tar < b.tar;
    });
    return points;
}

TarResult tar_at_far(const ScoreSet& scores, double far_target) {
    if (!(far_target > 0 && far_target < 1))
        throw std::invalid_argument("tar_at_far: far_target in (0, 1)");
    if (scores.genuine.empty() || scores.imposter.empty())
        throw std::invalid_argument("tar_at_far: empty score set");
    TarResult res;
    res.resolution_ok = double(scores.imposter.size()) >= 1.0 / far_target;

    std::vector<double> gen = scores.genuine, imp = scores.imposter;
    std::sort(gen.begin(), gen.end());
    std::sort(imp.begin(), imp.end());
    std::set<double> thresholds(gen.begin(), gen.end());
    thresholds.insert(imp.begin(), imp.end());
    auto frac_at_or_above = [](const std::vector<double>& v, double t) {
        auto it = std::lower_bound(v.begin(), v.end(), t);
        return double(v.end() - it) / double(v.size());
    };
    // smallest threshold keeping FAR within target -> maximal TAR
    for (double t : thresholds) {
        if (frac_at_or_above(imp, t) <= far_target) {
            res.tar = frac_at_or_above(gen, t);
            res.threshold = t;
            return res;
        }
    }
    // every observed threshold over-accepts; only a threshold above the top
    // score satisfies the target
    res.threshold = std::max(gen.back(), imp.back()) + 1.0;
    res.tar = 0.0;
    return res;
}

PairLists fvc_pairs(int n_fingers, int n_impressions) {
    if (n_fingers < 2 || n_impressions < 2)
        throw std::invalid_argument("fvc_pairs: need >= 2 fingers and >= 2 impressions");
    PairLists out;
    for (int f = 0; f < n_fingers; ++f)
        for (int a = 0; a < n_impressions; ++a)
            for (int b = a + 1; b < n_impressions; ++b) out.genuine.push_back({f, a, f, b});
    for (int f = 0; f < n_fingers; ++f)
        for (int g = f + 1; g < n_fingers; ++g) out.imposter.push_back({f, 0, g, 0});
    return out;
}

std::vector<double> cmc(const std::vector<std::vector<std::string>>& ranked_labels,
                        const std::vector<std::string>& mates, int max_rank) {
    if (ranked_labels.size() != mates.size())
        throw std::invalid_argument("cmc: probes and mates disagree");
    if (ranked_labels.empty()) throw std::invalid_argument("cmc: no probes");
    std::vector<int64_t> hits(max_rank, 0);
    for (size_t i = 0; i < ranked_labels.size(); ++i) {
        const auto& ranked = ranked_labels[i];
        auto it = std::find(ranked.begin(), ranked.end(), mates[i]);
        if (it == ranked.end())
            throw std::invalid_argument("cmc: probe " + std::to_string(i) +
                                        " has no mate in the ranking (closed-set contract)");
        int rank = int(it - ranked.begin()) + 1;
        if (rank <= max_rank) ++hits[rank - 1];
    }
    std::vector<double> acc(max_rank, 0);
    int64_t cum = 0;
    for (int k = 0; k < max_rank; ++k) {
        cum += hits[k];
        acc[k] = double(cum) / double(ranked_labels.size());
    }
    return acc;
}

void LatencyModel::validate() const {
    if (t_inference_ms < 0 || t_realign_ms < 0)
        throw std::invalid_argument("LatencyModel: times must be >= 0");
    if (!(realign_rate >= 0 && realign_rate <= 1))
        throw std::invalid_argument("LatencyModel: rate in [0, 1]");
}

double amortized_latency(const LatencyModel& lm) {
    lm.validate();
    return lm.realign_rate * (lm.t_realign_ms + 2 * lm.t_inference_ms) +
           (1 - lm.realign_rate) * lm.t_inference_ms;
}

double measure_realign_rate(const std::vector<matcher::MatchResult>& results) {
    if (results.empty()) throw std::invalid_argument("measure_realign_rate: no results");
    int64_t attempted = 0;
    for (const auto& r : results) attempted += r.realign_attempted ? 1 : 0;
    return double(attempted) / double(results.size());
}

double measure_realign_rate(const std::vector<std::pair<const Image*, const Image*>>& pairs,
                            model::AfrNet<float>& net, const matcher::MatchParams& p) {
    std::vector<matcher::MatchResult> results;
    results.reserve(pairs.size());
    for (const auto& [a, b] : pairs) results.push_back(matcher::match(*a, *b, net, p));
    return measure_realign_rate(results);
}

Histogram histogram(const ScoreSet& scores, int bins) {
    if (bins < 1) throw std::invalid_argument("histogram: bins >= 1");
    if (scores.genuine.empty() && scores.imposter.empty())
        throw std::invalid_argument("histogram: empty score set");
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (double s : scores.genuine) {
        lo = std::min(lo, s);
        hi = std::max(hi, s);
    }
    for (double s : scores.imposter) {
        lo = std::min(lo, s);
        hi = std::max(hi, s);
    }
    if (hi <= lo) hi = lo + 1e-9;
    Histogram h;
    h.edges.resize(bins + 1);
    for (int i = 0; i <= bins; ++i) h.edges[i] = lo + (hi - lo) * i / bins;
    h.genuine.assign(bins, 0);
    h.imposter.assign(bins, 0);
    auto bin_of = [&](double s) {
        int b = int((s - lo) / (hi - lo) * bins);
        return std::clamp(b, 0, bins - 1);
    };
    for (double s : scores.genuine) ++h.genuine[bin_of(s)];
    for (double s : scores.imposter) ++h.imposter[bin_of(s)];
    return h;
}

void write_histograms_csv(const std::string& path,
                          const std::vector<std::pair<std::string, Histogram>>& stages) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "stage,bin_lo,bin_hi,genuine_count,imposter_count\n";
    for (const auto& [stage, h] : stages) {
        for (size_t b = 0; b + 1 < h.edges.size(); ++b)
            out << stage << "," << util::fmt_double(h.edges[b]) << ","
                << util::fmt_double(h.edges[b + 1]) << "," << h.genuine[b] << ","
                << h.imposter[b] << "\n";
    }
}

StageScores score_pairs(const std::vector<std::pair<const Image*, const Image*>>& genuine,
                        const std::vector<std::pair<const Image*, const Image*>>& imposter,
                        model::AfrNet<float>& net, const matcher::MatchParams& p) {
    // embed every distinct image once
    std::vector<const Image*> uniq;
    auto index_of = [&](const Image* im) {
        for (size_t i = 0; i < uniq.size(); ++i)
            if (uniq[i] == im) return int(i);
        uniq.push_back(im);
        return int(uniq.size()) - 1;
    };
    std::vector<std::pair<int, int>> gidx, iidx;
    for (const auto& [a, b] : genuine) gidx.emplace_back(index_of(a), index_of(b));
    for (const auto& [a, b] : imposter) iidx.emplace_back(index_of(a), index_of(b));
    auto ex = matcher::extract_batch(net, uniq, p.enable_realign);

    StageScores out;
    auto run = [&](const std::vector<std::pair<int, int>>& idx,
                   std::vector<matcher::MatchResult>& results, std::vector<double>& original,
                   std::vector<double>& refined, std::vector<double>& fused) {
        for (const auto& [a, b] : idx) {
            matcher::MatchResult r = matcher::match_extracted(ex[a], ex[b], net, p);
            original.push_back(r.global_score);
            if (r.refined_score) refined.push_back(*r.refined_score);
            fused.push_back(r.score);
            results.push_back(std::move(r));
        }
    };
    run(gidx, out.genuine_results, out.original.genuine, out.refined.genuine,
        out.fused.genuine);
    run(iidx, out.imposter_results, out.original.imposter, out.refined.imposter,
        out.fused.imposter);
    return out;
}

SaliencyResult saliency_map(const Image& i1, const Image& i2, model::AfrNet<float>& net,
                            const matcher::MatchParams& p) {
    const auto& cfg = net.config();
    const int S = cfg.input_size, patch = cfg.patch, g = S / patch;

    std::vector<const Image*> two{&i1, &i2};
    auto ex = matcher::extract_batch(net, two, p.enable_realign);
    SaliencyResult res;
    res.grid = g;
    res.base_score = matcher::match_extracted(ex[0], ex[1], net, p).score;
    res.heat_1.assign(size_t(g) * g, 0);
    res.heat_2.assign(size_t(g) * g, 0);

    auto modal_background = [](const Image& img) {
        Mask fg = geometry::foreground_mask(img);
        std::array<int64_t, 256> counts{};
        for (size_t i = 0; i < img.px.size(); ++i)
            if (!fg.on[i]) ++counts[img.px[i]];
        int best = 255;
        int64_t best_count = -1;
        for (int v = 0; v < 256; ++v)
            if (counts[v] > best_count) {
                best_count = counts[v];
                best = v;
            }
        return uint8_t(best_count > 0 ? best : 255);
    };

    auto scan = [&](const matcher::Extraction& scanned, const matcher::Extraction& intact,
                    bool scanned_first, std::vector<double>& heat) {
        uint8_t bg = modal_background(scanned.canvas);
        for (int cy = 0; cy < g; ++cy) {
            for (int cx = 0; cx < g; ++cx) {
                Image occluded = scanned.canvas;
                for (int y = cy * patch; y < (cy + 1) * patch; ++y)
                    for (int x = cx * patch; x < (cx + 1) * patch; ++x) occluded.at(x, y) = bg;
                matcher::Extraction exo = matcher::extract(net, occluded, p.enable_realign);
                matcher::MatchResult r = scanned_first
                                             ? matcher::match_extracted(exo, intact, net, p)
                                             : matcher::match_extracted(intact, exo, net, p);
                heat[size_t(cy) * g + cx] = r.score;
            }
        }
    };
    scan(ex[0], ex[1], true, res.heat_1);
    scan(ex[1], ex[0], false, res.heat_2);
    return res;
}

std::vector<RobustnessRow> robustness_sweep(
    const std::vector<std::pair<const Image*, const Image*>>& genuine,
    const std::vector<std::pair<const Image*, const Image*>>& imposter,
    model::AfrNet<float>& net, const matcher::MatchParams& p, const std::vector<double>& ratios,
    int repeats, PerturbMode mode, uint64_t seed, double far_target) {
    if (ratios.empty() || repeats < 1)
        throw std::invalid_argument("robustness_sweep: ratios nonempty, repeats >= 1");

    // intact right-hand sides are shared across all runs
    std::vector<const Image*> intact;
    for (const auto& [a, b] : genuine) intact.push_back(b);
    for (const auto& [a, b] : imposter) intact.push_back(b);
    auto intact_ex = matcher::extract_batch(net, intact, p.enable_realign);

    std::vector<RobustnessRow> rows;
    for (size_t ri = 0; ri < ratios.size(); ++ri) {
        RobustnessRow row;
        row.ratio = ratios[ri];
        for (int rep = 0; rep < repeats; ++rep) {
            ScoreSet scores;
            size_t pair_idx = 0;
            auto run_side = [&](const std::vector<std::pair<const Image*, const Image*>>& pairs,
                                std::vector<double>& sink) {
                // perturb, then score against the cached intact side
                std::vector<Image> perturbed(pairs.size());
                util::parallel_for(int64_t(pairs.size()), [&](int64_t i) {
                    uint64_t s = util::seed_mix(seed, ri, rep, pair_idx + i);
                    perturbed[i] =
                        mode == PerturbMode::Occlusion
                            ? geometry::random_occlusion(*pairs[i].first, ratios[ri], s)
                            : geometry::random_partial_affine(*pairs[i].first, ratios[ri], s);
                });
                std::vector<const Image*> ptrs;
                for (auto& im : perturbed) ptrs.push_back(&im);
                auto pex = matcher::extract_batch(net, ptrs, p.enable_realign);
                for (size_t i = 0; i < pairs.size(); ++i)
                    sink.push_back(
                        matcher::match_extracted(pex[i], intact_ex[pair_idx + i], net, p).score);
                pair_idx += pairs.size();
            };
            run_side(genuine, scores.genuine);
            run_side(imposter, scores.imposter);
            row.run_tars.push_back(tar_at_far(scores, far_target).tar);
        }
        double mean = 0;
        for (double t : row.run_tars) mean += t;
        mean /= row.run_tars.size();
        double var = 0;
        for (double t : row.run_tars) var += (t - mean) * (t - mean);
        var /= row.run_tars.size();
        row.mean_tar = mean;
        row.std_tar = std::sqrt(var);
        rows.push_back(std::move(row));
    }
    return rows;
}

void write_roc_csv(const std::string& path, const std::vector<RocPoint>& points) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "far,tar,threshold\n";
    for (const auto& pt : points)
        out << util::fmt_double(pt.far) << "," << util::fmt_double(pt.tar) << ","
            << util::fmt_double(pt.threshold) << "\n";
}

void write_cmc_csv(const std::string& path, const std::vector<double>& accuracies) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "rank,accuracy\n";
    for (size_t k = 0; k < accuracies.size(); ++k)
        out << (k + 1) << "," << util::fmt_double(accuracies[k]) << "\n";
}

}  // namespace afr::eval
