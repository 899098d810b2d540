#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "afr/model.hpp"
#include "afr/synth.hpp"

namespace afr::train {

struct TrainConfig {
    int identities = 50;
    int impressions_per_id = 8;
    int epochs = 30;
    int batch = 16;
    double lr0 = 1e-4;
    double lr_min = 1e-5;
    double power = 3.0;
    double weight_decay = 2e-5;
    uint64_t seed = 1;
    /// Stop after the epoch whose validation TAR reaches this value; > 1
    /// disables early stopping.
    double early_stop_val_tar = 1.5;
    /// Interrupt the run after completing this many epochs in this process
    /// (0 = run to cfg.epochs). The LR schedule still spans cfg.epochs, so a
    /// later resume continues the same trajectory.
    int stop_after_epochs = 0;

    void validate() const;
};

/// Polynomial decay: lr_min + (lr0 - lr_min) * (1 - step/total)^power,
/// clamped to lr_min past the end.
double poly_lr(int64_t step, int64_t total_steps, const TrainConfig& cfg);

struct EpochMetrics {
    int epoch = 0;
    int64_t step = 0;
    double lr = 0;
    double loss_cnn_head = 0;
    double loss_attn_head = 0;
    double val_tar = 0;
};

struct TrainResult {
    std::vector<EpochMetrics> log;
    double best_val_tar = 0;
    int best_epoch = -1;
    std::string best_checkpoint;
    std::string last_checkpoint;
};

/// Thrown when the loss stops being finite.
struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Trains on the built-in synthetic dataset (or on `data` when provided,
/// identity-major), minimizing the summed dual-head additive-angular-margin
/// loss with decoupled weight decay. Writes best.afrn / last.afrn /
/// state.afrs / metrics.csv under out_dir; fully seeded; resumable from the
/// last epoch checkpoint.
TrainResult train(const TrainConfig& cfg, const model::ModelConfig& mcfg,
                  const std::string& out_dir, bool resume = false,
                  std::ostream* progress = nullptr,
                  const std::vector<synth::Sample>* data = nullptr);

/// Writes the metrics log ("epoch,step,lr,loss_cnn_head,loss_attn_head,val_tar").
void write_metrics_csv(const std::string& path, const std::vector<EpochMetrics>& log);

}  // namespace afr::train
