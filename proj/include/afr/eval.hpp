#pragma once

#include <string>
#include <vector>

#include "afr/matcher.hpp"

namespace afr::eval {

struct ScoreSet {
    std::vector<double> genuine;
    std::vector<double> imposter;
};

struct RocPoint {
    double far = 0;
    double tar = 0;
    double threshold = 0;
};

/// Threshold sweep over all distinct scores; ties accept (score >= t).
/// Points sorted by ascending FAR.
std::vector<RocPoint> roc(const ScoreSet& scores);

struct TarResult {
    double tar = 0;
    double threshold = 0;
    /// false when there are fewer imposter scores than 1/far_target
    bool resolution_ok = true;
};

/// TAR at the smallest threshold whose FAR does not exceed far_target.
TarResult tar_at_far(const ScoreSet& scores, double far_target);

struct PairIdx {
    int finger_a = 0, imp_a = 0;
    int finger_b = 0, imp_b = 0;
};

struct PairLists {
    std::vector<PairIdx> genuine;
    std::vector<PairIdx> imposter;
};

/// FVC protocol: all within-finger impression pairs are genuine
/// (n * C(m, 2)); first impressions across fingers are imposter (C(n, 2)).
PairLists fvc_pairs(int n_fingers, int n_impressions);

/// Rank-k accuracies for k = 1..max_rank from per-probe ranked labels.
/// Closed set: throws if a probe's mate label never appears.
std::vector<double> cmc(const std::vector<std::vector<std::string>>& ranked_labels,
                        const std::vector<std::string>& mates, int max_rank);

struct LatencyModel {
    double t_inference_ms = 0;  // one embedding pass
    double t_realign_ms = 0;    // realignment overhead
    double realign_rate = 0;    // fraction of comparisons realigned

    void validate() const;
};

/// Amortized per-comparison cost: r*(t_R + 2*t_I) + (1 - r)*t_I.
double amortized_latency(const LatencyModel& lm);

double measure_realign_rate(const std::vector<matcher::MatchResult>& results);
double measure_realign_rate(const std::vector<std::pair<const Image*, const Image*>>& pairs,
                            model::AfrNet<float>& net, const matcher::MatchParams& p);

struct Histogram {
    std::vector<double> edges;      // bins + 1 ascending edges
    std::vector<int64_t> genuine;   // bins counts
    std::vector<int64_t> imposter;  // bins counts
};

Histogram histogram(const ScoreSet& scores, int bins);

/// CSV rows: stage,bin_lo,bin_hi,genuine_count,imposter_count.
void write_histograms_csv(const std::string& path,
                          const std::vector<std::pair<std::string, Histogram>>& stages);

/// Scores for the three stages of the matcher on a batch of pairs: original
/// global scores for every pair, refined scores where realignment applied,
/// final fused scores for every pair.
struct StageScores {
    ScoreSet original;
    ScoreSet refined;
    ScoreSet fused;
    std::vector<matcher::MatchResult> genuine_results;
    std::vector<matcher::MatchResult> imposter_results;
};

StageScores score_pairs(const std::vector<std::pair<const Image*, const Image*>>& genuine,
                        const std::vector<std::pair<const Image*, const Image*>>& imposter,
                        model::AfrNet<float>& net, const matcher::MatchParams& p);

struct SaliencyResult {
    int grid = 0;
    double base_score = 0;
    std::vector<double> heat_1;  // grid x grid: occlusion scan over image 1
    std::vector<double> heat_2;  // scan over image 2
};

/// Slides a patch-sized background occluder (stride = patch) across each
/// image in turn and records the resulting match score per cell.
SaliencyResult saliency_map(const Image& i1, const Image& i2, model::AfrNet<float>& net,
                            const matcher::MatchParams& p);

enum class PerturbMode { Occlusion, PartialAffine };

struct RobustnessRow {
    double ratio = 0;
    double mean_tar = 0;
    double std_tar = 0;
    std::vector<double> run_tars;  // one per repeat
};

/// Perturbs the first image of every pair at each ratio, `repeats` times with
/// fresh seeds, and reports TAR @ far_target per ratio. Deterministic per
/// seed.
std::vector<RobustnessRow> robustness_sweep(
    const std::vector<std::pair<const Image*, const Image*>>& genuine,
    const std::vector<std::pair<const Image*, const Image*>>& imposter,
    model::AfrNet<float>& net, const matcher::MatchParams& p, const std::vector<double>& ratios,
    int repeats, PerturbMode mode, uint64_t seed, double far_target = 0.001);

void write_roc_csv(const std::string& path, const std::vector<RocPoint>& points);
void write_cmc_csv(const std::string& path, const std::vector<double>& accuracies);

}  // namespace afr::eval
